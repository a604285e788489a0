//! Layer-wise relevance propagation over [`Graph`]s.
//!
//! Relevance starts as the target logit and is pushed backwards layer by
//! layer. Each parameterized layer uses the rule of its layer group (see
//! [`split_layer_groups`]); softmax non-linearities use the composite's
//! [`SoftmaxHandler`].

mod composite;
mod rules;

pub use composite::{CompositeConfig, LayerGroup, RuleConstants, PRESET_NAMES, RULE_NAMES};
pub use rules::{
    propagate_linear, propagate_map, propagate_matmul_attn, propagate_softmax, Rule, RuleKind, SoftmaxHandler,
    ZeroDenominator, DEFAULT_EPSILON, DEFAULT_GAMMA,
};

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::exec::{forward_trace, keep_factor, max_pool_argmax, ActivationTrace, HeadLayout};
use crate::graph::{conv_map, Attention, Graph, Op, Source};
use crate::tensor::{sign0, AddMap, AvgPoolMap, DenseMap, LinearMap, Tensor};

/// Layer group of every layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroups {
    pub groups: Vec<LayerGroup>,
    /// Set when the graph has no fully-connected classifier.
    pub warning: Option<String>,
}

impl LayerGroups {
    pub fn of(&self, layer: usize) -> LayerGroup {
        self.groups[layer]
    }

    pub fn by_id(&self, graph: &Graph) -> BTreeMap<String, LayerGroup> {
        graph.layers().iter().zip(&self.groups).map(|(l, g)| (l.id.clone(), *g)).collect()
    }

    /// Parameterized layer count per group.
    pub fn counts(&self, graph: &Graph) -> [usize; 4] {
        let mut c = [0; 4];
        for (l, g) in graph.layers().iter().zip(&self.groups) {
            if l.op.is_parameterized() {
                c[g.index()] += 1;
            }
        }
        c
    }
}

/// Assign every layer to LLL, MLL, HLL or FCL.
///
/// The FCL is the trailing run of linear layers acting on flat vectors. The
/// remaining parameterized ("hidden") layers are split by depth: the first
/// `⌊n/4⌋` go to LLL, the last `⌊n/4⌋` to HLL and the rest to MLL. When every
/// parameterized layer is a flat linear layer, only the last one is the FCL.
/// Layers without parameters inherit the group of the closest preceding
/// parameterized layer (LLL before the first one).
pub fn split_layer_groups(graph: &Graph) -> LayerGroups {
    let params: Vec<usize> = (0..graph.len()).filter(|&i| graph.layer(i).op.is_parameterized()).collect();
    let mut fcl = 0;
    for &i in params.iter().rev() {
        let layer = graph.layer(i);
        let flat = graph.source_shape(layer.inputs[0]).len() == 1;
        if matches!(layer.op, Op::Linear(_)) && flat {
            fcl += 1;
        } else {
            break;
        }
    }
    if fcl == params.len() && fcl > 1 {
        fcl = 1;
    }
    let warning = (fcl == 0).then(|| "graph has no fully-connected classifier; FCL group is empty".to_string());
    let hidden = params.len() - fcl;
    let k = hidden / 4;
    let mut groups = vec![LayerGroup::Lll; graph.len()];
    let mut current = LayerGroup::Lll;
    let mut rank = 0;
    for (i, g) in groups.iter_mut().enumerate() {
        if graph.layer(i).op.is_parameterized() {
            current = if rank >= hidden {
                LayerGroup::Fcl
            } else if rank < k {
                LayerGroup::Lll
            } else if rank >= hidden - k {
                LayerGroup::Hll
            } else {
                LayerGroup::Mll
            };
            rank += 1;
        }
        *g = current;
    }
    LayerGroups { groups, warning }
}

/// Relevance of one attribution pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceTrace {
    pub target: usize,
    /// Value of the target logit; the relevance put into the output layer.
    pub initial: f64,
    /// Relevance of the graph input (the heatmap).
    pub input: Tensor,
    /// Relevance of every layer's output.
    pub outputs: Vec<Tensor>,
    /// For attention layers, relevance of the concatenated head outputs
    /// (the input of the output projection), `[tokens, dim]`.
    pub head_outputs: Vec<Option<Tensor>>,
}

impl RelevanceTrace {
    pub fn heatmap(&self) -> &Tensor {
        &self.input
    }
}

/// Explain logit `target` of `graph` at `input` under `composite`.
pub fn attribute(graph: &Graph, input: &Tensor, target: usize, composite: &CompositeConfig) -> Result<RelevanceTrace> {
    let (_, trace) = forward_trace(graph, input)?;
    attribute_traced(graph, &trace, target, composite)
}

/// As [`attribute`], reusing a forward trace of the same graph.
pub fn attribute_traced(
    graph: &Graph,
    trace: &ActivationTrace,
    target: usize,
    composite: &CompositeConfig,
) -> Result<RelevanceTrace> {
    trace.check_matches(graph)?;
    composite.validate_for(graph)?;
    if target >= graph.num_classes() {
        return Err(invalid(format!("target class {target} out of range for {} outputs", graph.num_classes())));
    }
    let groups = split_layer_groups(graph);
    let nl = graph.len();
    let mut r_out: Vec<Vec<f64>> = (0..nl).map(|i| vec![0.0; trace.record(i).output.numel()]).collect();
    let mut r_input = vec![0.0; trace.input().numel()];
    let initial = trace.output().data()[target] as f64;
    r_out[nl - 1][target] = initial;
    let mut heads: Vec<Option<Tensor>> = vec![None; nl];

    for i in (0..nl).rev() {
        let layer = graph.layer(i);
        let r = std::mem::take(&mut r_out[i]);
        let rule = composite.rule(groups.of(i));
        let step = LayerStep { graph, trace, layer: i, rule, composite };
        let (r_ins, head_r) = step.run(&r).map_err(|e| match e {
            StepError::Zero(rule) => Error::NonFiniteRelevance { layer: layer.id.clone(), rule },
            StepError::Other(e) => e,
        })?;
        for (src, ri) in layer.inputs.iter().zip(&r_ins) {
            if ri.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRelevance { layer: layer.id.clone(), rule: rule.name().into() });
            }
            let dst = match *src {
                Source::Input => &mut r_input,
                Source::Layer(j) => &mut r_out[j],
            };
            for (d, v) in dst.iter_mut().zip(ri) {
                *d += v;
            }
        }
        heads[i] = head_r.map(|h| Tensor::from_f64(graph.output_shape(i), &h)).transpose()?;
        r_out[i] = r;
    }
    let outputs = r_out
        .iter()
        .enumerate()
        .map(|(i, r)| Tensor::from_f64(graph.output_shape(i), r))
        .collect::<Result<_>>()?;
    Ok(RelevanceTrace {
        target,
        initial,
        input: Tensor::from_f64(graph.input_shape(), &r_input)?,
        outputs,
        head_outputs: heads,
    })
}

enum StepError {
    Zero(String),
    Other(Error),
}

impl From<Error> for StepError {
    fn from(e: Error) -> Self {
        StepError::Other(e)
    }
}

type StepResult = std::result::Result<(Vec<Vec<f64>>, Option<Vec<f64>>), StepError>;

struct LayerStep<'a> {
    graph: &'a Graph,
    trace: &'a ActivationTrace,
    layer: usize,
    rule: &'a Rule,
    composite: &'a CompositeConfig,
}

fn through<M: LinearMap + ?Sized>(
    rule: &Rule,
    map: &M,
    a: &[f64],
    w: &[f64],
    bias: &[f64],
    r: &[f64],
) -> std::result::Result<Vec<f64>, StepError> {
    propagate_map(rule, map, a, w, bias, r).map_err(|_| StepError::Zero(rule.name().to_string()))
}

/// Weights and per-output bias with masked units zeroed.
fn masked_dense(
    weight: &Tensor,
    bias: Option<&Tensor>,
    keep: &Option<std::sync::Arc<Vec<bool>>>,
) -> (Vec<f64>, Vec<f64>) {
    let (out, inp) = (weight.shape()[0], weight.shape()[1..].iter().product::<usize>());
    let mut w = weight.to_f64();
    let mut b = bias.map(|b| b.to_f64()).unwrap_or_else(|| vec![0.0; out]);
    for o in 0..out {
        if keep_factor(keep, o) == 0.0 {
            w[o * inp..(o + 1) * inp].iter_mut().for_each(|v| *v = 0.0);
            b[o] = 0.0;
        }
    }
    (w, b)
}

fn tile(bias: &[f64], rows: usize) -> Vec<f64> {
    (0..rows).flat_map(|_| bias.iter().copied()).collect()
}

impl LayerStep<'_> {
    fn run(&self, r: &[f64]) -> StepResult {
        let layer = self.graph.layer(self.layer);
        let ins = self.trace.inputs(self.layer);
        let x = ins[0];
        let rec = self.trace.record(self.layer);
        let single = |v: Vec<f64>| Ok((vec![v], None));
        match &layer.op {
            Op::Linear(l) => {
                let ws = l.weight.shape();
                let rows = x.numel() / ws[1];
                let (w, b) = masked_dense(&l.weight, l.bias.as_deref(), &l.keep);
                let map = DenseMap { rows, inp: ws[1], out: ws[0] };
                single(through(self.rule, &map, &x.to_f64(), &w, &tile(&b, rows), r)?)
            }
            Op::Conv2d(c) => {
                let rule = self.composite.conv.as_ref().unwrap_or(self.rule);
                let map = conv_map(c, x.shape());
                let (w, b) = masked_dense(&c.weight, c.bias.as_deref(), &c.keep);
                let (oh, ow) = map.out_hw();
                let bias: Vec<f64> = b.iter().flat_map(|&v| std::iter::repeat_n(v, oh * ow)).collect();
                single(through(rule, &map, &x.to_f64(), &w, &bias, r)?)
            }
            Op::Relu | Op::Gelu | Op::Flatten => single(r.to_vec()),
            Op::MaxPool2d(p) => {
                let s = x.shape();
                let os = rec.output.shape();
                let mut out = vec![0.0; x.numel()];
                for (o, src) in max_pool_argmax(x.data(), s[0], s[1], s[2], p.kernel, p.stride, os[1], os[2])
                    .into_iter()
                    .enumerate()
                {
                    out[src] += r[o];
                }
                single(out)
            }
            Op::AvgPool2d(p) => {
                let s = x.shape();
                let map = AvgPoolMap { c: s[0], h: s[1], w: s[2], k: p.kernel, stride: p.stride };
                let zeros = vec![0.0; map.out_len()];
                single(through(self.rule, &map, &x.to_f64(), &map.weight(), &zeros, r)?)
            }
            Op::Add => {
                let n = x.numel();
                let mut a = x.to_f64();
                a.extend(ins[1].to_f64());
                let zeros = vec![0.0; n];
                let mut both = through(self.rule, &AddMap { len: n }, &a, &[1.0], &zeros, r)?;
                let second = both.split_off(n);
                Ok((vec![both, second], None))
            }
            Op::LayerNorm(n) => {
                let norm = rec.norm.as_ref().ok_or_else(|| invalid("layer-norm record missing"))?;
                let d = *x.shape().last().unwrap();
                let xs = x.to_f64();
                let (g, b) = (n.weight.to_f64(), n.bias.to_f64());
                let mut out = vec![0.0; xs.len()];
                for (i, o) in out.iter_mut().enumerate() {
                    let (row, k) = (i / d, i % d);
                    let (mu, inv) = (norm.mean[row], norm.inv_std[row]);
                    let contrib = g[k] * xs[i] * inv;
                    let z = contrib + b[k] - g[k] * mu * inv;
                    if r[i] != 0.0 {
                        *o = contrib * r[i] / (z + DEFAULT_EPSILON * sign0(z));
                    }
                }
                single(out)
            }
            Op::Softmax => {
                let handler = self.composite.softmax.ok_or_else(|| invalid("softmax layer without a handler"))?;
                let n = *x.shape().last().unwrap();
                single(propagate_softmax(handler, &x.to_f64(), &rec.output.to_f64(), r, n))
            }
            Op::Attention(a) => self.attention(a, x, r),
        }
    }

    fn attention(&self, a: &Attention, x: &Tensor, r: &[f64]) -> StepResult {
        let rec = self.trace.record(self.layer);
        let att = rec.attention.as_ref().ok_or_else(|| invalid("attention record missing"))?;
        let handler = self.composite.softmax.ok_or_else(|| invalid("attention layer without a softmax handler"))?;
        let proj = self.composite.projection.as_ref().unwrap_or(self.rule);
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let dh = a.head_dim();
        let lay = HeadLayout { tokens: t, dim: d, head_dim: dh };
        let map = DenseMap { rows: t, inp: d, out: d };
        let bias_of = |b: &Option<std::sync::Arc<Tensor>>| tile(&b.as_ref().map(|b| b.to_f64()).unwrap_or(vec![0.0; d]), t);

        let r_ctx = through(proj, &map, &att.context.to_f64(), &a.o_weight.to_f64(), &bias_of(&a.o_bias), r)?;

        let (q, k, v) = (att.q.to_f64(), att.k.to_f64(), att.v.to_f64());
        let (scores, probs, out) = (att.scores.to_f64(), att.probs.to_f64(), att.heads_out.to_f64());
        let scale = 1.0 / (dh as f64).sqrt();
        let (mut rq, mut rk, mut rv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        let gather = |buf: &[f64], h: usize| -> Vec<f64> {
            (0..t).flat_map(|i| (0..dh).map(move |c| buf[lay.at(i, h, c)])).collect()
        };
        let scatter = |dst: &mut [f64], src: &[f64], h: usize| {
            for i in 0..t {
                for c in 0..dh {
                    dst[lay.at(i, h, c)] += src[i * dh + c];
                }
            }
        };
        for h in 0..a.heads {
            let rh = gather(&r_ctx, h);
            if rh.iter().all(|v| *v == 0.0) {
                continue;
            }
            let sq = lay.sq(h, 0, 0)..lay.sq(h, 0, 0) + t * t;
            let (ah, vh, oh) = (&probs[sq.clone()], gather(&v, h), gather(&out, h));
            if handler == SoftmaxHandler::CpLrp {
                let rvh = rules::propagate_matmul_value_only(ah, &vh, &oh, &rh, t, t, dh, DEFAULT_EPSILON);
                scatter(&mut rv, &rvh, h);
                continue;
            }
            let (ra, rvh) = propagate_matmul_attn(ah, &vh, &oh, &rh, t, t, dh, DEFAULT_EPSILON)?;
            scatter(&mut rv, &rvh, h);
            let rs = propagate_softmax(handler, &scores[sq.clone()], ah, &ra, t);
            // S = (scale · Q) Kᵀ, split between both factors like A·V.
            let qh: Vec<f64> = gather(&q, h).iter().map(|v| v * scale).collect();
            let kh = gather(&k, h);
            let mut kt = vec![0.0; dh * t];
            for j in 0..t {
                for c in 0..dh {
                    kt[c * t + j] = kh[j * dh + c];
                }
            }
            let (rqh, rkt) = propagate_matmul_attn(&qh, &kt, &scores[sq], &rs, t, dh, t, DEFAULT_EPSILON)?;
            let mut rkh = vec![0.0; t * dh];
            for j in 0..t {
                for c in 0..dh {
                    rkh[j * dh + c] = rkt[c * t + j];
                }
            }
            scatter(&mut rq, &rqh, h);
            scatter(&mut rk, &rkh, h);
        }
        let xs = x.to_f64();
        let mut rx = vec![0.0; t * d];
        for (rpart, w, b) in [(&rq, &a.q_weight, &a.q_bias), (&rk, &a.k_weight, &a.k_bias), (&rv, &a.v_weight, &a.v_bias)] {
            if rpart.iter().all(|v| *v == 0.0) {
                continue;
            }
            let contrib = through(proj, &map, &xs, &w.to_f64(), &bias_of(b), rpart)?;
            for (acc, v) in rx.iter_mut().zip(contrib) {
                *acc += v;
            }
        }
        Ok((vec![rx], Some(r_ctx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn stack(kinds: &[&str]) -> Graph {
        // conv layers on [1, 4, 4] keep spatial size; fc layers act on flat vectors.
        let mut b = GraphBuilder::new(vec![1, 4, 4]);
        let mut flat = false;
        for (i, k) in kinds.iter().enumerate() {
            match *k {
                "conv" => {
                    b.push(format!("conv{i}"), Op::conv2d(Tensor::zeros(&[1, 1, 3, 3]), None, 1, 1));
                    b.push(format!("relu{i}"), Op::Relu);
                }
                _ => {
                    if !flat {
                        b.push("flatten", Op::Flatten);
                        flat = true;
                    }
                    let out = if i + 1 == kinds.len() { 2 } else { 16 };
                    b.push(format!("fc{i}"), Op::linear(Tensor::zeros(&[out, 16]), None));
                }
            }
        }
        b.build(2).unwrap()
    }

    fn param_groups(g: &Graph) -> Vec<LayerGroup> {
        let s = split_layer_groups(g);
        (0..g.len()).filter(|&i| g.layer(i).op.is_parameterized()).map(|i| s.of(i)).collect()
    }

    #[test]
    fn vgg_shaped_split() {
        let mut kinds = vec!["conv"; 13];
        kinds.extend(["fc"; 3]);
        let g = stack(&kinds);
        let s = split_layer_groups(&g);
        assert_eq!(s.counts(&g), [3, 7, 3, 3]);
        assert!(s.warning.is_none());
        let groups = param_groups(&g);
        assert_eq!(&groups[..3], &[LayerGroup::Lll; 3]);
        assert_eq!(&groups[10..13], &[LayerGroup::Hll; 3]);
    }

    #[test]
    fn single_hidden_layer_is_middle() {
        let g = stack(&["fc", "fc"]);
        assert_eq!(param_groups(&g), vec![LayerGroup::Mll, LayerGroup::Fcl]);
    }

    #[test]
    fn no_classifier_warns() {
        let mut b = GraphBuilder::new(vec![1, 2, 2]);
        b.push("conv", Op::conv2d(Tensor::zeros(&[1, 1, 2, 2]), None, 1, 0));
        b.push("flatten", Op::Flatten);
        let g = b.build(1).unwrap();
        let s = split_layer_groups(&g);
        assert!(s.warning.is_some());
        assert_eq!(s.counts(&g), [0, 1, 0, 0]);
    }

    #[test]
    fn non_parameterized_layers_follow_predecessor() {
        let g = stack(&["conv", "conv", "conv", "conv", "fc"]);
        let s = split_layer_groups(&g);
        let relu3 = g.layer_index("relu3").unwrap();
        assert_eq!(s.of(relu3), LayerGroup::Hll);
        assert_eq!(s.of(g.layer_index("flatten").unwrap()), LayerGroup::Hll);
    }

    #[test]
    fn one_linear_layer_gives_input_times_weight() {
        let mut b = GraphBuilder::new(vec![2]);
        b.push("fc", Op::linear(Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0]).unwrap(), None));
        let g = b.build(2).unwrap();
        let cfg = CompositeConfig::uniform(Rule::basic(), None, false);
        let r = attribute(&g, &Tensor::vector(vec![1.0, 1.0]), 0, &cfg).unwrap();
        assert_eq!(r.input.data(), &[2.0, -1.0]);
        assert_eq!(r.initial, 1.0);
        assert!(attribute(&g, &Tensor::vector(vec![1.0, 1.0]), 2, &cfg).is_err());
    }
}
