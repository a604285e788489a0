//! Mini-batch SGD with momentum on softmax cross-entropy, for the linear and
//! conv parameters of a graph. Other parameters stay fixed.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::{backward_from, forward_trace, keep_factor};
use crate::graph::{conv_map, Graph, Op};
use crate::prune::accuracy;
use crate::seed::stream_rng;
use crate::tensor::{softmax_rows, DenseMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Training stops once train accuracy reaches this value.
    pub target_accuracy: f64,
    /// Epochs run before the accuracy target may stop training.
    pub min_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 60, batch: 16, lr: 0.05, momentum: 0.9, weight_decay: 0.0, target_accuracy: 0.95, min_epochs: 0, seed: 0 }
    }
}

/// Weights held at exactly zero during training, per layer index
/// (`true` = frozen), in the layer's weight layout.
pub type Frozen = BTreeMap<usize, Vec<bool>>;

#[derive(Clone)]
struct Param {
    w: Vec<f64>,
    b: Vec<f64>,
}

fn params_of(graph: &Graph) -> Vec<Option<Param>> {
    graph
        .layers()
        .iter()
        .map(|l| match &l.op {
            Op::Linear(x) => Some(Param {
                w: x.weight.to_f64(),
                b: x.bias.as_ref().map(|b| b.to_f64()).unwrap_or_else(|| vec![0.0; x.weight.shape()[0]]),
            }),
            Op::Conv2d(x) => Some(Param {
                w: x.weight.to_f64(),
                b: x.bias.as_ref().map(|b| b.to_f64()).unwrap_or_else(|| vec![0.0; x.weight.shape()[0]]),
            }),
            _ => None,
        })
        .collect()
}

fn with_params(graph: &Graph, params: &[Option<Param>]) -> Result<Graph> {
    let mut layers = graph.layers().to_vec();
    for (layer, p) in layers.iter_mut().zip(params) {
        let Some(p) = p else { continue };
        let (weight, bias) = match &mut layer.op {
            Op::Linear(x) => (&mut x.weight, &mut x.bias),
            Op::Conv2d(x) => (&mut x.weight, &mut x.bias),
            _ => continue,
        };
        *weight = Arc::new(Tensor::from_f64(weight.shape(), &p.w)?);
        *bias = Some(Arc::new(Tensor::from_f64(&[p.b.len()], &p.b)?));
    }
    Graph::with_class_map(layers, graph.input_shape().to_vec(), graph.num_classes(), graph.class_map().map(<[usize]>::to_vec))
}

fn sample_grads(graph: &Graph, x: &Tensor, label: usize) -> Result<Vec<Option<Param>>> {
    let (out, trace) = forward_trace(graph, x)?;
    let mut seed = softmax_rows(&out.to_f64(), out.numel());
    seed[label] -= 1.0;
    let g = backward_from(graph, &trace, &seed)?;
    Ok(graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let xin = trace.inputs(i)[0];
            let gy = g.outputs[i].to_f64();
            match &l.op {
                Op::Linear(lin) => {
                    let ws = lin.weight.shape();
                    let gy: Vec<f64> = gy.iter().enumerate().map(|(k, v)| v * keep_factor(&lin.keep, k % ws[0])).collect();
                    let map = DenseMap { rows: xin.numel() / ws[1], inp: ws[1], out: ws[0] };
                    let mut b = vec![0.0; ws[0]];
                    for (k, v) in gy.iter().enumerate() {
                        b[k % ws[0]] += v;
                    }
                    Some(Param { w: map.weight_grad(&xin.to_f64(), &gy), b })
                }
                Op::Conv2d(c) => {
                    let map = conv_map(c, xin.shape());
                    let per = gy.len() / map.c_out;
                    let gy: Vec<f64> = gy.iter().enumerate().map(|(k, v)| v * keep_factor(&c.keep, k / per)).collect();
                    let b = gy.chunks(per).map(|ch| ch.iter().sum()).collect();
                    Some(Param { w: map.weight_grad(&xin.to_f64(), &gy), b })
                }
                _ => None,
            }
        })
        .collect())
}

/// Train until `target_accuracy` on `data` or fail after `max_epochs`.
/// Returns the trained graph and its final train accuracy.
pub fn train(graph: &Graph, data: &Dataset, cfg: &TrainConfig, frozen: &Frozen) -> Result<(Graph, f64)> {
    let mut params = params_of(graph);
    for (&i, mask) in frozen {
        if let Some(p) = params.get_mut(i).and_then(Option::as_mut) {
            p.w.iter_mut().zip(mask).filter(|(_, f)| **f).for_each(|(w, _)| *w = 0.0);
        }
    }
    let mut velocity: Vec<Option<Param>> = params
        .iter()
        .map(|p| p.as_ref().map(|p| Param { w: vec![0.0; p.w.len()], b: vec![0.0; p.b.len()] }))
        .collect();
    let mut current = with_params(graph, &params)?;
    let mut rng = stream_rng(cfg.seed, 0x7a1d);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = accuracy(&current, data)?;
    for epoch in 0..cfg.max_epochs {
        if epoch >= cfg.min_epochs && acc >= cfg.target_accuracy {
            break;
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch.max(1)) {
            let grads: Vec<Vec<Option<Param>>> = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = data.get(i);
                    sample_grads(&current, x, y)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (li, slot) in params.iter_mut().enumerate() {
                let (Some(p), Some(v)) = (slot.as_mut(), velocity[li].as_mut()) else { continue };
                let mut gw = vec![0.0; p.w.len()];
                let mut gb = vec![0.0; p.b.len()];
                for g in &grads {
                    let g = g[li].as_ref().expect("same layout");
                    gw.iter_mut().zip(&g.w).for_each(|(a, b)| *a += b * scale);
                    gb.iter_mut().zip(&g.b).for_each(|(a, b)| *a += b * scale);
                }
                let fmask = frozen.get(&li);
                for (k, (w, vw)) in p.w.iter_mut().zip(v.w.iter_mut()).enumerate() {
                    if fmask.is_some_and(|m| m[k]) {
                        continue;
                    }
                    *vw = cfg.momentum * *vw - cfg.lr * (gw[k] + cfg.weight_decay * *w);
                    *w += *vw;
                }
                for ((b, vb), g) in p.b.iter_mut().zip(v.b.iter_mut()).zip(&gb) {
                    *vb = cfg.momentum * *vb - cfg.lr * g;
                    *b += *vb;
                }
            }
            current = with_params(graph, &params)?;
        }
        acc = accuracy(&current, data)?;
    }
    if acc < cfg.target_accuracy {
        return Err(Error::Training { target: cfg.target_accuracy, achieved: acc });
    }
    Ok((current, acc))
}
