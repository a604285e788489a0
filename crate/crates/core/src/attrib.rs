//! Attribution baselines: Integrated Gradients and random component scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::exec::{backward_grad, forward_trace, ActivationTrace};
use crate::graph::{Component, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IGConfig {
    /// Path start; all zeros when absent.
    #[serde(default)]
    pub baseline: Option<Tensor>,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    20
}

impl Default for IGConfig {
    fn default() -> Self {
        Self { baseline: None, steps: default_steps() }
    }
}

impl IGConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { baseline: None, steps }
    }
}

/// Integrated Gradients of one logit for the input and every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct IgAttribution {
    pub input: Tensor,
    /// Latent attribution of every layer's output.
    pub outputs: Vec<Tensor>,
    /// Latent attribution of the concatenated head outputs of attention layers.
    pub head_outputs: Vec<Option<Tensor>>,
}

struct PathGrads {
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
    heads: Vec<Option<Vec<f64>>>,
}

fn diff_times(end: &Tensor, start: &Tensor, mean_grad: &[f64]) -> Vec<f64> {
    end.data().iter().zip(start.data()).zip(mean_grad).map(|((e, s), g)| (*e as f64 - *s as f64) * g).collect()
}

/// Riemann-sum Integrated Gradients along `x′ + (k/m)(x − x′)`, `k = 1..=m`.
///
/// Latent attributions use the same path: the difference of a layer's
/// activations between `x` and `x′` times the mean gradient with respect to
/// that layer's activations along the path. At the input this is the usual
/// input attribution.
pub fn integrated_gradients(graph: &Graph, x: &Tensor, target: usize, cfg: &IGConfig) -> Result<IgAttribution> {
    if cfg.steps == 0 {
        return Err(invalid("integrated gradients needs at least one step"));
    }
    if x.shape() != graph.input_shape() {
        return Err(shape(format!("input shape {:?}, graph expects {:?}", x.shape(), graph.input_shape())));
    }
    let baseline = match &cfg.baseline {
        Some(b) if b.shape() != x.shape() => {
            return Err(shape(format!("baseline shape {:?} differs from input {:?}", b.shape(), x.shape())))
        }
        Some(b) => b.clone(),
        None => Tensor::zeros(x.shape()),
    };
    let m = cfg.steps;
    let (xs, bs) = (x.to_f64(), baseline.to_f64());
    let per_step: Vec<PathGrads> = (1..=m)
        .into_par_iter()
        .map(|k| {
            let t = k as f64 / m as f64;
            let point: Vec<f64> = bs.iter().zip(&xs).map(|(b, v)| b + t * (v - b)).collect();
            let (_, trace) = forward_trace(graph, &Tensor::from_f64(x.shape(), &point)?)?;
            let g = backward_grad(graph, &trace, target)?;
            Ok(PathGrads {
                input: g.input.to_f64(),
                outputs: g.outputs.iter().map(Tensor::to_f64).collect(),
                heads: g.head_outputs.iter().map(|h| h.as_ref().map(Tensor::to_f64)).collect(),
            })
        })
        .collect::<Result<_>>()?;

    // fixed-order reduction
    let mut sum_in = vec![0.0; xs.len()];
    let mut sum_out: Vec<Vec<f64>> = (0..graph.len()).map(|i| vec![0.0; graph.output_shape(i).iter().product()]).collect();
    let mut sum_heads: Vec<Option<Vec<f64>>> = vec![None; graph.len()];
    for pg in &per_step {
        sum_in.iter_mut().zip(&pg.input).for_each(|(a, v)| *a += v);
        for (acc, g) in sum_out.iter_mut().zip(&pg.outputs) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        for (acc, g) in sum_heads.iter_mut().zip(&pg.heads) {
            if let Some(g) = g {
                let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
    let inv = 1.0 / m as f64;
    let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|a| *a *= inv);

    let (_, end) = forward_trace(graph, x)?;
    let (_, start) = forward_trace(graph, &baseline)?;
    scale(&mut sum_in);
    let input: Vec<f64> = xs.iter().zip(&bs).zip(&sum_in).map(|((v, b), g)| (v - b) * g).collect();
    let mut outputs = Vec::with_capacity(graph.len());
    let mut heads = Vec::with_capacity(graph.len());
    for i in 0..graph.len() {
        scale(&mut sum_out[i]);
        outputs.push(Tensor::from_f64(
            graph.output_shape(i),
            &diff_times(&end.record(i).output, &start.record(i).output, &sum_out[i]),
        )?);
        heads.push(match (&mut sum_heads[i], latent_context(&end, i), latent_context(&start, i)) {
            (Some(g), Some(e), Some(s)) => {
                scale(g);
                Some(Tensor::from_f64(e.shape(), &diff_times(e, s, g))?)
            }
            _ => None,
        });
    }
    Ok(IgAttribution { input: Tensor::from_f64(x.shape(), &input)?, outputs, head_outputs: heads })
}

fn latent_context(trace: &ActivationTrace, layer: usize) -> Option<&Tensor> {
    trace.record(layer).attention.as_ref().map(|a| &a.context)
}

/// Gradient of the target logit at `x`, multiplied by `x`.
pub fn gradient_times_input(graph: &Graph, x: &Tensor, target: usize) -> Result<Tensor> {
    let (_, trace) = forward_trace(graph, x)?;
    let g = backward_grad(graph, &trace, target)?;
    let v: Vec<f64> = g.input.data().iter().zip(x.data()).map(|(g, x)| *g as f64 * *x as f64).collect();
    Tensor::from_f64(x.shape(), &v)
}

/// Independent uniform `[0, 1)` scores, one per component, from `seed`.
pub fn random_scores(components: &[Component], seed: u64) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(invalid("no components to score"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(components.iter().map(|_| rng.random::<f64>()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{enumerate_components, ComponentKind, GraphBuilder, Op};

    fn linear() -> Graph {
        let mut b = GraphBuilder::new(vec![2]);
        b.push("fc", Op::linear(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), None));
        b.build(1).unwrap()
    }

    #[test]
    fn linear_model_is_exact_for_any_step_count() {
        let g = linear();
        for m in [1, 3, 20] {
            let ig = integrated_gradients(&g, &Tensor::vector(vec![1.0, 1.0]), 0, &IGConfig::with_steps(m)).unwrap();
            assert_eq!(ig.input.data(), &[1.0, 2.0]);
        }
    }

    #[test]
    fn zero_path_gives_zero() {
        let g = linear();
        let x = Tensor::vector(vec![0.4, -3.0]);
        let cfg = IGConfig { baseline: Some(x.clone()), steps: 5 };
        let ig = integrated_gradients(&g, &x, 0, &cfg).unwrap();
        assert!(ig.input.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_zero_steps_and_bad_baseline() {
        let g = linear();
        let x = Tensor::vector(vec![1.0, 1.0]);
        assert!(integrated_gradients(&g, &x, 0, &IGConfig::with_steps(0)).is_err());
        let cfg = IGConfig { baseline: Some(Tensor::vector(vec![0.0])), steps: 2 };
        assert!(integrated_gradients(&g, &x, 0, &cfg).is_err());
    }

    #[test]
    fn random_scores_are_seeded() {
        let mut b = GraphBuilder::new(vec![4]);
        b.push("h", Op::linear(Tensor::zeros(&[24, 4]), None));
        b.push("out", Op::linear(Tensor::zeros(&[2, 24]), None));
        let comps = enumerate_components(&b.build(2).unwrap(), ComponentKind::LinearNeuron).unwrap();
        let a = random_scores(&comps, 3).unwrap();
        assert_eq!(a, random_scores(&comps, 3).unwrap());
        assert_ne!(a, random_scores(&comps, 4).unwrap());
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
        assert!(random_scores(&[], 0).is_err());
    }
}
