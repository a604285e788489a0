//! Behaviour of pruned models: heatmap drift, perturbation curves and
//! per-layer relevance summaries.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::forward;
use crate::graph::{apply_mask, Graph, PruneMask};
use crate::lrp::{attribute, CompositeConfig};
use crate::prune::{component_relevance, rank_components, Attributor, ComponentScores, ReferenceSet};
use crate::seed::stream_rng;
use crate::tensor::{softmax_rows, Tensor};

pub use crate::stats::{mean, pearson, sem, spearman};

/// Input heatmap for display and comparison: rank-3 relevance `[c, h, w]` is
/// summed over channels, anything else is flattened as is.
pub fn display_heatmap(relevance: &Tensor) -> Vec<f64> {
    let r = relevance.to_f64();
    if relevance.rank() != 3 {
        return r;
    }
    let per = relevance.shape()[1] * relevance.shape()[2];
    let mut out = vec![0.0; per];
    for ch in r.chunks(per) {
        out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
    }
    out
}

/// Cosine similarity; `None` when either vector has zero norm. Identical
/// vectors give exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    if a == b {
        return Some(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Heatmap similarity to the unpruned model and class confidence per pruning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSeries {
    pub rates: Vec<f64>,
    /// Mean cosine similarity over samples with a defined value; `None` if none had one.
    pub similarity: Vec<Option<f64>>,
    /// Mean softmax probability of the explained class.
    pub confidence: Vec<f64>,
    pub samples: usize,
    /// Correlation of similarity and confidence over rates, when defined.
    pub pearson: Option<f64>,
}

impl HeatmapSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate,similarity,confidence,samples\n");
        for ((r, s), c) in self.rates.iter().zip(&self.similarity).zip(&self.confidence) {
            let s = s.map(|v| v.to_string()).unwrap_or_else(|| "missing".into());
            writeln!(out, "{r},{s},{c},{}", self.samples).unwrap();
        }
        out
    }
}

fn confidence(graph: &Graph, x: &Tensor, class: usize) -> Result<f64> {
    let logits = forward(graph, x)?.to_f64();
    Ok(softmax_rows(&logits, logits.len())[class])
}

/// Prune by `scores` at each rate (`⌊rate · p⌋` lowest-ranked components),
/// explain every `(input, class)` pair with `composite`, and compare its heatmap
/// with the one of the unpruned model.
pub fn heatmap_drift(
    graph: &Graph,
    scores: &ComponentScores,
    rates: &[f64],
    inputs: &[(Tensor, usize)],
    composite: &CompositeConfig,
) -> Result<HeatmapSeries> {
    if inputs.is_empty() {
        return Err(invalid("heatmap drift needs at least one input"));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(invalid(format!("pruning rate {r} outside [0, 1]")));
    }
    let composite = composite.clone().fit_to(graph);
    let order = rank_components(scores);
    let p = order.len();
    let reference: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|(x, c)| attribute(graph, x, *c, &composite).map(|t| display_heatmap(t.heatmap())))
        .collect::<Result<_>>()?;
    let per_rate: Vec<(Option<f64>, f64)> = rates
        .par_iter()
        .map(|&rate| {
            let count = ((rate * p as f64) + 1e-9).floor() as usize;
            let pruned = apply_mask(graph, &PruneMask::dropping(scores.kind, p, order[..count.min(p)].iter().copied()))?;
            let mut sims = Vec::new();
            let mut conf = 0.0;
            for ((x, c), r0) in inputs.iter().zip(&reference) {
                let h = display_heatmap(attribute(&pruned, x, *c, &composite)?.heatmap());
                sims.extend(cosine(r0, &h));
                conf += confidence(&pruned, x, *c)?;
            }
            let sim = (!sims.is_empty()).then(|| mean(&sims));
            Ok((sim, conf / inputs.len() as f64))
        })
        .collect::<Result<_>>()?;
    let similarity: Vec<Option<f64>> = per_rate.iter().map(|v| v.0).collect();
    let confidence: Vec<f64> = per_rate.iter().map(|v| v.1).collect();
    let paired: (Vec<f64>, Vec<f64>) =
        similarity.iter().zip(&confidence).filter_map(|(s, c)| s.map(|s| (s, *c))).unzip();
    Ok(HeatmapSeries {
        rates: rates.to_vec(),
        similarity,
        confidence,
        samples: inputs.len(),
        pearson: pearson(&paired.0, &paired.1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    /// Fraction of input elements replaced, `k / steps` for `k = 0..=steps`.
    pub fractions: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Trapezoidal area under confidence over fraction.
    pub area: f64,
}

/// Replace input elements with their channel baseline in order of decreasing
/// heatmap value (ties in seeded random order) and track the class confidence.
pub fn perturbation_curve(
    graph: &Graph,
    heatmap: &Tensor,
    input: &Tensor,
    class: usize,
    baseline: &[f64],
    steps: usize,
    seed: u64,
) -> Result<PerturbationCurve> {
    if steps < 1 {
        return Err(invalid("perturbation needs at least one step"));
    }
    if heatmap.shape() != input.shape() {
        return Err(invalid(format!("heatmap shape {:?} differs from input shape {:?}", heatmap.shape(), input.shape())));
    }
    let channels = if input.rank() >= 2 { input.shape()[0] } else { 1 };
    if baseline.len() != channels {
        return Err(invalid(format!("baseline has {} values for {channels} channels", baseline.len())));
    }
    let n = input.numel();
    let per = n / channels.max(1);
    let mut rng = stream_rng(seed, 0x9e7);
    let keys: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let h = heatmap.to_f64();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(keys[a].cmp(&keys[b])));
    let fractions: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let confidence: Vec<f64> = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let count = k * n / steps;
            let mut x = input.to_f64();
            for &i in &order[..count] {
                x[i] = baseline[i / per.max(1)];
            }
            confidence(graph, &Tensor::from_f64(input.shape(), &x)?, class)
        })
        .collect::<Result<_>>()?;
    let area = fractions.windows(2).zip(confidence.windows(2)).map(|(f, c)| (f[1] - f[0]) * (c[0] + c[1]) / 2.0).sum();
    Ok(PerturbationCurve { fractions, confidence, area })
}

/// Summary of `|component relevance|` for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub layer: String,
    pub count: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Per-layer count, mean and maximum of the absolute component relevance.
pub fn relevance_flow(scores: &ComponentScores) -> Vec<FlowRow> {
    let mut rows: Vec<(usize, FlowRow)> = Vec::new();
    for (c, s) in scores.components.iter().zip(&scores.scores) {
        if rows.last().is_none_or(|(l, _)| *l != c.layer) {
            rows.push((c.layer, FlowRow { layer: c.layer_id.clone(), count: 0, mean_abs: 0.0, max_abs: 0.0 }));
        }
        let row = &mut rows.last_mut().expect("pushed").1;
        row.count += 1;
        row.mean_abs += s.abs();
        row.max_abs = row.max_abs.max(s.abs());
    }
    rows.into_iter()
        .map(|(_, mut r)| {
            r.mean_abs /= r.count as f64;
            r
        })
        .collect()
}

/// Score the components of `kind` on `refs` with `composite` and summarize per layer.
pub fn relevance_flow_for(
    graph: &Graph,
    refs: &ReferenceSet,
    composite: &CompositeConfig,
    kind: crate::graph::ComponentKind,
) -> Result<Vec<FlowRow>> {
    let attributor = Attributor::Lrp(composite.clone().fit_to(graph));
    Ok(relevance_flow(&component_relevance(graph, refs, &attributor, kind)?))
}

pub fn flow_csv(rows: &[FlowRow]) -> String {
    let mut out = String::from("layer,count,mean_abs,max_abs\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.layer, r.count, r.mean_abs, r.max_abs).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Op};

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), Some(1.0));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), None);
        assert!((cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap()).abs() < 1e-15);
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.5, -0.25];
        let scaled: Vec<f64> = b.iter().map(|v| v * 7.5).collect();
        assert!((cosine(&a, &b).unwrap() - cosine(&a, &scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn channel_sum_for_images() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(display_heatmap(&t), vec![11.0, 22.0]);
        let v = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(display_heatmap(&v), vec![1.0, 2.0, 3.0]);
    }

    fn linear_model() -> Graph {
        let mut b = GraphBuilder::new(vec![4]);
        b.push("fc", Op::linear(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]).unwrap(), None));
        b.build(2).unwrap()
    }

    #[test]
    fn perturbation_endpoints() {
        let g = linear_model();
        let x = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let h = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = perturbation_curve(&g, &h, &x, 0, &[0.0], 4, 0).unwrap();
        assert_eq!(c.fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.confidence[0], confidence(&g, &x, 0).unwrap());
        assert_eq!(c.confidence[4], 0.5);
        // most relevant element (weight 4) goes first
        let after_one = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(c.confidence[1], confidence(&g, &after_one, 0).unwrap());
        assert!(perturbation_curve(&g, &h, &x, 0, &[0.0], 0, 0).is_err());
        assert!(perturbation_curve(&g, &h, &x, 0, &[0.0, 1.0], 2, 0).is_err());
    }

    #[test]
    fn series_csv_marks_missing() {
        let s = HeatmapSeries { rates: vec![0.0, 0.5], similarity: vec![Some(1.0), None], confidence: vec![0.9, 0.4], samples: 3, pearson: None };
        assert_eq!(s.to_csv(), "rate,similarity,confidence,samples\n0,1,0.9,3\n0.5,missing,0.4,3\n");
    }
}
