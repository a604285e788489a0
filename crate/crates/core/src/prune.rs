//! Component relevance over reference samples, relevance-ordered masking, and
//! the pruning sweep objective (mean accuracy over pruning rates).

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attrib::{integrated_gradients, random_scores, IGConfig};
use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::exec::forward;
use crate::graph::{apply_mask, enumerate_components, AggregationAxes, Component, ComponentKind, Graph, PruneMask};
use crate::lrp::{attribute, CompositeConfig};
use crate::seed::stream_rng;
use crate::stats::{mean, sem};
use crate::tensor::Tensor;

/// Samples explained to estimate component relevance, each with the class
/// whose logit is explained.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    samples: Vec<Tensor>,
    targets: Vec<usize>,
}

impl ReferenceSet {
    pub fn new(samples: Vec<Tensor>, targets: Vec<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("reference set is empty"));
        }
        if samples.len() != targets.len() {
            return Err(invalid("reference samples and targets differ in length"));
        }
        Ok(Self { samples, targets })
    }

    /// Every sample of a dataset, explained toward its own label.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::new(ds.samples().to_vec(), ds.labels().to_vec())
    }

    /// `per_class` samples of every class present in `pool`, drawn without
    /// replacement from the stream `(master, stream)`.
    pub fn draw(pool: &Dataset, per_class: usize, master: u64, stream: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(invalid("reference count must be at least 1"));
        }
        let mut rng = stream_rng(master, stream);
        let mut picked = Vec::new();
        for (class, idx) in pool.by_class() {
            if idx.len() < per_class {
                return Err(invalid(format!(
                    "class {class} has {} samples, {per_class} reference samples requested",
                    idx.len()
                )));
            }
            let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), per_class).into_iter().map(|i| idx[i]).collect();
            chosen.sort_unstable();
            picked.extend(chosen);
        }
        Self::from_dataset(&pool.subset(&picked))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// How component relevance is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum Attributor {
    Lrp(CompositeConfig),
    Ig { config: IGConfig, magnitude: bool },
    Random { seed: u64 },
}

impl Attributor {
    pub fn method(&self) -> &'static str {
        match self {
            Attributor::Lrp(_) => "lrp",
            Attributor::Ig { .. } => "ig",
            Attributor::Random { .. } => "random",
        }
    }

    pub fn composite_id(&self) -> String {
        match self {
            Attributor::Lrp(c) => c.label(),
            Attributor::Ig { config, magnitude } => {
                format!("ig/steps={}/{}", config.steps, if *magnitude { "mag" } else { "signed" })
            }
            Attributor::Random { .. } => "random".into(),
        }
    }

    pub fn magnitude(&self) -> bool {
        match self {
            Attributor::Lrp(c) => c.magnitude,
            Attributor::Ig { magnitude, .. } => *magnitude,
            Attributor::Random { .. } => false,
        }
    }

    /// Same attributor with a fresh random seed (only random scoring uses it).
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            Attributor::Random { .. } => Attributor::Random { seed },
            other => other.clone(),
        }
    }

    /// The attributor used by seed `seed` of a run with master seed `master`.
    pub fn reseeded_for(&self, master: u64, seed: u64) -> Self {
        self.reseeded(stream_rng(master ^ 0x5eed, seed).random())
    }

    /// Adapt an LRP composite's softmax handling to `graph`.
    pub fn fit_to(self, graph: &Graph) -> Self {
        match self {
            Attributor::Lrp(c) => Attributor::Lrp(c.fit_to(graph)),
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub kind: ComponentKind,
    pub components: Vec<Component>,
    pub scores: Vec<f64>,
    pub magnitude: bool,
    pub method: String,
    pub composite_id: String,
}

/// Sum of a `[rows, cols]` map; with `magnitude`, the sum over rows of the
/// absolute row sums.
pub fn aggregate_map(map: &[f64], rows: usize, cols: usize, magnitude: bool) -> f64 {
    debug_assert_eq!(map.len(), rows * cols);
    if magnitude {
        map.chunks(cols).map(|r| r.iter().sum::<f64>().abs()).sum()
    } else {
        map.iter().sum()
    }
}

/// Relevance of one component from the per-layer relevance of one sample.
///
/// Filters sum their output map, neurons sum over tokens, heads sum their
/// output block `[tokens, head_dim]` (or use [`aggregate_map`]'s magnitude form).
pub fn aggregate_component(
    graph: &Graph,
    c: &Component,
    outputs: &[Tensor],
    heads: &[Option<Tensor>],
    magnitude: bool,
) -> Result<f64> {
    let out = &outputs[c.layer];
    Ok(match c.axes {
        AggregationAxes::ChannelMap => {
            let per = out.numel() / out.shape()[0];
            out.data()[c.index * per..(c.index + 1) * per].iter().map(|v| *v as f64).sum()
        }
        AggregationAxes::Tokens => {
            let width = *out.shape().last().unwrap();
            out.data().iter().skip(c.index).step_by(width).map(|v| *v as f64).sum()
        }
        AggregationAxes::HeadOutput => {
            let h = heads[c.layer].as_ref().ok_or_else(|| invalid(format!("no head relevance for `{}`", c.layer_id)))?;
            let crate::graph::Op::Attention(a) = &graph.layer(c.layer).op else {
                return Err(invalid("head component on a non-attention layer"));
            };
            let (t, d, dh) = (h.shape()[0], h.shape()[1], a.head_dim());
            let block: Vec<f64> =
                (0..t).flat_map(|i| (0..dh).map(move |k| h.data()[i * d + c.index * dh + k] as f64)).collect();
            aggregate_map(&block, t, dh, magnitude)
        }
    })
}

fn sample_scores(
    graph: &Graph,
    components: &[Component],
    x: &Tensor,
    target: usize,
    attributor: &Attributor,
) -> Result<Vec<f64>> {
    let (outputs, heads) = match attributor {
        Attributor::Lrp(c) => {
            let r = attribute(graph, x, target, c)?;
            (r.outputs, r.head_outputs)
        }
        Attributor::Ig { config, .. } => {
            let r = integrated_gradients(graph, x, target, config)?;
            (r.outputs, r.head_outputs)
        }
        Attributor::Random { .. } => unreachable!("random scores need no samples"),
    };
    components
        .iter()
        .map(|c| aggregate_component(graph, c, &outputs, &heads, attributor.magnitude()))
        .collect()
}

/// Mean relevance of every component of `kind` over the reference set
/// (absolute value when the attributor uses magnitudes).
pub fn component_relevance(
    graph: &Graph,
    refs: &ReferenceSet,
    attributor: &Attributor,
    kind: ComponentKind,
) -> Result<ComponentScores> {
    let components = enumerate_components(graph, kind)?;
    if refs.is_empty() {
        return Err(invalid("reference set is empty"));
    }
    if let Some(t) = refs.targets.iter().find(|&&t| t >= graph.num_classes()) {
        return Err(invalid(format!("reference target {t} outside the {} graph outputs", graph.num_classes())));
    }
    let scores = match attributor {
        Attributor::Random { seed } => random_scores(&components, *seed)?,
        _ => {
            let per_sample: Vec<Vec<f64>> = refs
                .samples
                .par_iter()
                .zip(&refs.targets)
                .map(|(x, &t)| sample_scores(graph, &components, x, t, attributor))
                .collect::<Result<_>>()?;
            let n = refs.len() as f64;
            let mut acc = vec![0.0; components.len()];
            for s in &per_sample {
                acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / n).map(|v| if attributor.magnitude() { v.abs() } else { v }).collect()
        }
    };
    if let Some(i) = scores.iter().position(|s: &f64| !s.is_finite()) {
        return Err(Error::NonFiniteRelevance { layer: components[i].layer_id.clone(), rule: attributor.composite_id() });
    }
    Ok(ComponentScores {
        kind,
        components,
        scores,
        magnitude: attributor.magnitude(),
        method: attributor.method().to_string(),
        composite_id: attributor.composite_id(),
    })
}

/// Component ids by ascending score, ties by `(layer, index)`.
pub fn rank_components(scores: &ComponentScores) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.components.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&scores.components[a], &scores.components[b]);
        scores.scores[a].total_cmp(&scores.scores[b]).then((ca.layer, ca.index).cmp(&(cb.layer, cb.index)))
    });
    order.into_iter().map(|i| scores.components[i].id).collect()
}

/// Top-1 accuracy on a labelled dataset.
pub fn accuracy(graph: &Graph, eval: &Dataset) -> Result<f64> {
    if eval.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let correct: Vec<bool> = eval
        .samples()
        .par_iter()
        .zip(eval.labels())
        .map(|(x, &y)| forward(graph, x).map(|out| out.argmax() == y))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|c| **c).count() as f64 / eval.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Number of pruning rates `m`; rates are `i/m` for `i = 0..m`.
    pub steps: usize,
    pub kind: ComponentKind,
    /// Re-score the masked graph before every step instead of ranking once.
    #[serde(default)]
    pub rescore: bool,
}

impl SweepConfig {
    pub fn new(steps: usize, kind: ComponentKind) -> Self {
        Self { steps, kind, rescore: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid(format!("a sweep needs at least 2 pruning rates, got {}", self.steps)));
        }
        Ok(())
    }

    pub fn rates(&self) -> Vec<f64> {
        (0..self.steps).map(|i| i as f64 / self.steps as f64).collect()
    }

    /// `⌊(i/m)·p⌋` for each rate.
    pub fn pruned_counts(&self, p: usize) -> Vec<usize> {
        (0..self.steps).map(|i| i * p / self.steps).collect()
    }
}

/// Mean of the accuracy curve.
pub fn a_pr(accuracy: &[f64]) -> f64 {
    mean(accuracy)
}

/// Largest rate whose accuracy is at least 95% of the accuracy at rate 0.
pub fn top_pr(rates: &[f64], accuracy: &[f64]) -> f64 {
    let Some(&base) = accuracy.first() else { return 0.0 };
    rates.iter().zip(accuracy).filter(|(_, &a)| a >= 0.95 * base).map(|(&r, _)| r).fold(0.0, f64::max)
}

/// One accuracy-vs-rate curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub rates: Vec<f64>,
    pub pruned: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub a_pr: f64,
    pub top_pr: f64,
}

impl SweepCurve {
    pub fn from_accuracy(rates: Vec<f64>, pruned: Vec<usize>, accuracy: Vec<f64>) -> Self {
        let (a, t) = (a_pr(&accuracy), top_pr(&rates, &accuracy));
        Self { rates, pruned, accuracy, a_pr: a, top_pr: t }
    }
}

/// Mask the lowest-ranked components cumulatively and record accuracy per rate.
pub fn run_sweep(graph: &Graph, scores: &ComponentScores, cfg: &SweepConfig, eval: &Dataset) -> Result<SweepCurve> {
    cfg.validate()?;
    if scores.kind != cfg.kind {
        return Err(invalid(format!("scores are for {}, sweep targets {}", scores.kind, cfg.kind)));
    }
    let order = rank_components(scores);
    let p = order.len();
    let counts = cfg.pruned_counts(p);
    let accuracy = counts
        .iter()
        .map(|&q| accuracy(&apply_mask(graph, &PruneMask::dropping(cfg.kind, p, order[..q].iter().copied()))?, eval))
        .collect::<Result<_>>()?;
    Ok(SweepCurve::from_accuracy(cfg.rates(), counts, accuracy))
}

/// Sweep that re-scores the masked graph before each step and prunes the
/// lowest-scored components that are still present.
pub fn run_sweep_rescoring(
    graph: &Graph,
    refs: &ReferenceSet,
    attributor: &Attributor,
    cfg: &SweepConfig,
    eval: &Dataset,
) -> Result<SweepCurve> {
    cfg.validate()?;
    let p = enumerate_components(graph, cfg.kind)?.len();
    let counts = cfg.pruned_counts(p);
    let mut mask = PruneMask::keep_all(cfg.kind, p);
    let mut acc = Vec::with_capacity(counts.len());
    for &q in &counts {
        let current = apply_mask(graph, &mask)?;
        if q > mask.pruned_count() {
            let scores = component_relevance(&current, refs, attributor, cfg.kind)?;
            let next: Vec<usize> = rank_components(&scores).into_iter().filter(|&id| mask.keep[id]).collect();
            for id in next.into_iter().take(q - mask.pruned_count()) {
                mask.keep[id] = false;
            }
        }
        acc.push(accuracy(&apply_mask(graph, &mask)?, eval)?);
    }
    Ok(SweepCurve::from_accuracy(cfg.rates(), counts, acc))
}

/// Curves of several seeds summarized per rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: String,
    pub composite_id: String,
    pub rates: Vec<f64>,
    pub acc_mean: Vec<f64>,
    /// Standard error over seeds; 0 for a single seed.
    pub acc_sem: Vec<f64>,
    pub a_pr: f64,
    pub a_pr_sem: f64,
    /// Top-PR of the mean curve.
    pub top_pr: f64,
    pub curves: Vec<SweepCurve>,
}

impl SweepResult {
    pub fn from_curves(method: &str, composite_id: &str, curves: Vec<SweepCurve>) -> Result<Self> {
        let first = curves.first().ok_or_else(|| invalid("no sweep curves to summarize"))?;
        let rates = first.rates.clone();
        if curves.iter().any(|c| c.rates != rates) {
            return Err(invalid("sweep curves use different rate schedules"));
        }
        let column = |i: usize| curves.iter().map(|c| c.accuracy[i]).collect::<Vec<_>>();
        let acc_mean: Vec<f64> = (0..rates.len()).map(|i| mean(&column(i))).collect();
        let acc_sem = (0..rates.len()).map(|i| sem(&column(i)).unwrap_or(0.0)).collect();
        let aprs: Vec<f64> = curves.iter().map(|c| c.a_pr).collect();
        Ok(Self {
            method: method.to_string(),
            composite_id: composite_id.to_string(),
            top_pr: top_pr(&rates, &acc_mean),
            a_pr: mean(&aprs),
            a_pr_sem: sem(&aprs).unwrap_or(0.0),
            rates,
            acc_mean,
            acc_sem,
            curves,
        })
    }

    pub fn seed_count(&self) -> usize {
        self.curves.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate,acc_mean,acc_sem,method,composite_id,seed_count\n");
        for i in 0..self.rates.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.rates[i],
                self.acc_mean[i],
                self.acc_sem[i],
                self.method,
                self.composite_id,
                self.seed_count()
            )
            .unwrap();
        }
        out
    }
}

/// A pruning experiment repeated over seeds; each seed draws its own
/// reference set (`n_ref` per class) from `pool`.
#[derive(Clone, Debug)]
pub struct SeededSweep<'a> {
    pub graph: &'a Graph,
    pub pool: &'a Dataset,
    pub eval: &'a Dataset,
    pub attributor: &'a Attributor,
    pub sweep: SweepConfig,
    pub n_ref: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
}

impl SeededSweep<'_> {
    pub fn curve(&self, seed: u64) -> Result<SweepCurve> {
        let refs = ReferenceSet::draw(self.pool, self.n_ref, self.master_seed, seed)?;
        let attributor = self.attributor.reseeded_for(self.master_seed, seed);
        if self.sweep.rescore {
            return run_sweep_rescoring(self.graph, &refs, &attributor, &self.sweep, self.eval);
        }
        let scores = component_relevance(self.graph, &refs, &attributor, self.sweep.kind)?;
        run_sweep(self.graph, &scores, &self.sweep, self.eval)
    }

    pub fn run(&self) -> Result<SweepResult> {
        if self.seeds.is_empty() {
            return Err(invalid("no seeds given"));
        }
        let curves = self.seeds.par_iter().map(|&s| self.curve(s)).collect::<Result<Vec<_>>>()?;
        SweepResult::from_curves(self.attributor.method(), &self.attributor.composite_id(), curves)
    }
}

/// A_PR and Top-PR statistics for one reference count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefCountRow {
    pub n_ref: usize,
    pub seeds: usize,
    pub a_pr_mean: f64,
    pub a_pr_sem: f64,
    pub top_pr_mean: f64,
    pub top_pr_sem: f64,
}

/// Repeat the seeded sweep for every reference count.
pub fn ref_count_study(base: &SeededSweep<'_>, counts: &[usize]) -> Result<Vec<RefCountRow>> {
    let available = base.pool.by_class().values().map(Vec::len).min().unwrap_or(0);
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(invalid(format!("reference count {c} not in 1..={available} (samples per class)")));
    }
    counts
        .iter()
        .map(|&n_ref| {
            let res = SeededSweep { n_ref, ..base.clone() }.run()?;
            let tops: Vec<f64> = res.curves.iter().map(|c| c.top_pr).collect();
            Ok(RefCountRow {
                n_ref,
                seeds: res.seed_count(),
                a_pr_mean: res.a_pr,
                a_pr_sem: res.a_pr_sem,
                top_pr_mean: mean(&tops),
                top_pr_sem: sem(&tops).unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn ref_count_csv(rows: &[RefCountRow]) -> String {
    let mut out = String::from("n_ref,seeds,a_pr_mean,a_pr_sem,top_pr_mean,top_pr_sem\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.n_ref, r.seeds, r.a_pr_mean, r.a_pr_sem, r.top_pr_mean, r.top_pr_sem)
            .unwrap();
    }
    out
}
