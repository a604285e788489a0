//! Forward evaluation with full activation tracing, and reverse-mode gradients
//! of a selected output with respect to the input and every layer.

use crate::error::{invalid, shape, Error, Result};
use crate::graph::{conv_map, Attention, Graph, Layer, Op, Source};
use crate::tensor::{
    gelu, gelu_grad, softmax_rows, AvgPoolMap, DenseMap, LinearMap, Tensor,
};

/// Attention internals kept for relevance and gradient passes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Projected queries, keys and values, `[tokens, dim]` each.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Scaled scores `Q Kᵀ / √d_head`, `[heads, tokens, tokens]`.
    pub scores: Tensor,
    /// Attention matrix, `[heads, tokens, tokens]`.
    pub probs: Tensor,
    /// Unmasked per-head outputs `A V` concatenated over heads, `[tokens, dim]`.
    pub heads_out: Tensor,
    /// Context after head masking; the input of the output projection.
    pub context: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormRecord {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// Output of the layer; for linear and conv layers this is the pre-activation.
    pub output: Tensor,
    pub attention: Option<AttentionRecord>,
    pub norm: Option<NormRecord>,
}

/// Per-layer activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    input: Tensor,
    sources: Vec<Vec<Source>>,
    layers: Vec<LayerRecord>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("non-empty trace").output
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn record(&self, layer: usize) -> &LayerRecord {
        &self.layers[layer]
    }

    pub fn source(&self, src: Source) -> &Tensor {
        match src {
            Source::Input => &self.input,
            Source::Layer(j) => &self.layers[j].output,
        }
    }

    /// Input tensors of a layer, in source order.
    pub fn inputs(&self, layer: usize) -> Vec<&Tensor> {
        self.sources[layer].iter().map(|&s| self.source(s)).collect()
    }

    pub(crate) fn check_matches(&self, graph: &Graph) -> Result<()> {
        if self.layers.len() != graph.len()
            || self.input.shape() != graph.input_shape()
            || graph
                .layers()
                .iter()
                .zip(&self.sources)
                .zip(&self.layers)
                .enumerate()
                .any(|(i, ((l, s), r))| &l.inputs != s || r.output.shape() != graph.output_shape(i))
        {
            return Err(invalid("activation trace was not produced by this graph"));
        }
        Ok(())
    }
}

/// Evaluate the graph, recording every layer's output.
pub fn forward_trace(graph: &Graph, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    if input.shape() != graph.input_shape() {
        return Err(shape(format!(
            "input shape {:?}, graph expects {:?}",
            input.shape(),
            graph.input_shape()
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite { layer: "<input>".into() });
    }
    let mut trace = ActivationTrace {
        input: input.clone(),
        sources: graph.layers().iter().map(|l| l.inputs.clone()).collect(),
        layers: Vec::with_capacity(graph.len()),
    };
    for (i, layer) in graph.layers().iter().enumerate() {
        let ins: Vec<&Tensor> = layer.inputs.iter().map(|&s| trace.source(s)).collect();
        let record = eval_layer(layer, &ins, graph.output_shape(i))?;
        if !record.output.is_finite() {
            return Err(Error::NonFinite { layer: layer.id.clone() });
        }
        trace.layers.push(record);
    }
    Ok((trace.output().clone(), trace))
}

/// Output of the graph without keeping the trace.
pub fn forward(graph: &Graph, input: &Tensor) -> Result<Tensor> {
    forward_trace(graph, input).map(|(out, _)| out)
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product::<usize>().max(1)
}

pub(crate) fn keep_factor(keep: &Option<std::sync::Arc<Vec<bool>>>, unit: usize) -> f64 {
    match keep {
        Some(k) if !k[unit] => 0.0,
        _ => 1.0,
    }
}

fn plain(output: Tensor) -> LayerRecord {
    LayerRecord { output, attention: None, norm: None }
}

fn eval_layer(layer: &Layer, ins: &[&Tensor], out_shape: &[usize]) -> Result<LayerRecord> {
    let x = ins[0];
    let xs = x.to_f64();
    let rec = match &layer.op {
        Op::Linear(l) => {
            let ws = l.weight.shape();
            let map = DenseMap { rows: rows_of(x.shape()), inp: ws[1], out: ws[0] };
            let mut y = map.apply(&xs, &l.weight.to_f64());
            for (idx, v) in y.iter_mut().enumerate() {
                let o = idx % ws[0];
                if let Some(b) = &l.bias {
                    *v += b.data()[o] as f64;
                }
                *v *= keep_factor(&l.keep, o);
            }
            plain(Tensor::from_f64(out_shape, &y)?)
        }
        Op::Conv2d(c) => {
            let map = conv_map(c, x.shape());
            let mut y = map.apply(&xs, &c.weight.to_f64());
            let per = y.len() / map.c_out;
            for (idx, v) in y.iter_mut().enumerate() {
                let ch = idx / per;
                if let Some(b) = &c.bias {
                    *v += b.data()[ch] as f64;
                }
                *v *= keep_factor(&c.keep, ch);
            }
            plain(Tensor::from_f64(out_shape, &y)?)
        }
        Op::Relu => plain(x.map(|v| v.max(0.0))),
        Op::Gelu => plain(x.map(|v| gelu(v as f64) as f32)),
        Op::MaxPool2d(p) => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut y = vec![0.0f32; c * oh * ow];
            for (o, src) in max_pool_argmax(x.data(), c, h, w, p.kernel, p.stride, oh, ow).into_iter().enumerate() {
                y[o] = x.data()[src];
            }
            plain(Tensor::new(out_shape.to_vec(), y)?)
        }
        Op::AvgPool2d(p) => {
            let s = x.shape();
            let map = AvgPoolMap { c: s[0], h: s[1], w: s[2], k: p.kernel, stride: p.stride };
            plain(Tensor::from_f64(out_shape, &map.apply(&xs, &map.weight()))?)
        }
        Op::Flatten => plain(x.reshape(out_shape)?),
        Op::Add => {
            let y: Vec<f32> = x.data().iter().zip(ins[1].data()).map(|(a, b)| a + b).collect();
            plain(Tensor::new(out_shape.to_vec(), y)?)
        }
        Op::LayerNorm(n) => {
            let d = *x.shape().last().unwrap();
            let rows = xs.len() / d;
            let (g, b) = (n.weight.to_f64(), n.bias.to_f64());
            let mut y = vec![0.0; xs.len()];
            let mut mean = Vec::with_capacity(rows);
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + n.eps as f64).sqrt();
                for k in 0..d {
                    y[r * d + k] = (row[k] - mu) * inv * g[k] + b[k];
                }
                mean.push(mu);
                inv_std.push(inv);
            }
            LayerRecord {
                output: Tensor::from_f64(out_shape, &y)?,
                attention: None,
                norm: Some(NormRecord { mean, inv_std }),
            }
        }
        Op::Attention(a) => eval_attention(a, x)?,
        Op::Softmax => {
            let n = *x.shape().last().unwrap();
            plain(Tensor::from_f64(out_shape, &softmax_rows(&xs, n))?)
        }
    };
    Ok(rec)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn max_pool_argmax(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

pub(crate) fn project(x: &[f64], rows: usize, w: &Tensor, b: &Option<std::sync::Arc<Tensor>>) -> Vec<f64> {
    let d = w.shape()[0];
    let map = DenseMap { rows, inp: w.shape()[1], out: d };
    let mut y = map.apply(x, &w.to_f64());
    if let Some(b) = b {
        for (i, v) in y.iter_mut().enumerate() {
            *v += b.data()[i % d] as f64;
        }
    }
    y
}

/// Per-head helpers over `[tokens, dim]` buffers with heads in contiguous column blocks.
#[derive(Clone, Copy)]
pub(crate) struct HeadLayout {
    pub tokens: usize,
    pub dim: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn at(&self, t: usize, h: usize, c: usize) -> usize {
        t * self.dim + h * self.head_dim + c
    }
    pub fn sq(&self, h: usize, i: usize, j: usize) -> usize {
        (h * self.tokens + i) * self.tokens + j
    }
}

fn eval_attention(a: &Attention, x: &Tensor) -> Result<LayerRecord> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let heads = a.heads;
    let lay = HeadLayout { tokens: t, dim: d, head_dim: a.head_dim() };
    let xs = x.to_f64();
    let q = project(&xs, t, &a.q_weight, &a.q_bias);
    let k = project(&xs, t, &a.k_weight, &a.k_bias);
    let v = project(&xs, t, &a.v_weight, &a.v_bias);
    let scale = 1.0 / (lay.head_dim as f64).sqrt();
    let mut scores = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for c in 0..lay.head_dim {
                    acc += q[lay.at(i, h, c)] * k[lay.at(j, h, c)];
                }
                scores[lay.sq(h, i, j)] = acc * scale;
            }
        }
    }
    let probs = softmax_rows(&scores, t);
    let mut heads_out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            for c in 0..lay.head_dim {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += probs[lay.sq(h, i, j)] * v[lay.at(j, h, c)];
                }
                heads_out[lay.at(i, h, c)] = acc;
            }
        }
    }
    let mut context = heads_out.clone();
    for h in 0..heads {
        if keep_factor(&a.keep, h) == 0.0 {
            for i in 0..t {
                for c in 0..lay.head_dim {
                    context[lay.at(i, h, c)] = 0.0;
                }
            }
        }
    }
    let y = project(&context, t, &a.o_weight, &a.o_bias);
    let sh = [t, d];
    let sq = [heads, t, t];
    Ok(LayerRecord {
        output: Tensor::from_f64(&sh, &y)?,
        attention: Some(AttentionRecord {
            q: Tensor::from_f64(&sh, &q)?,
            k: Tensor::from_f64(&sh, &k)?,
            v: Tensor::from_f64(&sh, &v)?,
            scores: Tensor::from_f64(&sq, &scores)?,
            probs: Tensor::from_f64(&sq, &probs)?,
            heads_out: Tensor::from_f64(&sh, &heads_out)?,
            context: Tensor::from_f64(&sh, &context)?,
        }),
        norm: None,
    })
}

/// Gradients of one scalar output with respect to every intermediate quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// With respect to the graph input.
    pub input: Tensor,
    /// With respect to each layer's output.
    pub outputs: Vec<Tensor>,
    /// With respect to each layer's inputs, in source order.
    pub inputs: Vec<Vec<Tensor>>,
    /// With respect to the attention context (concatenated head outputs) of attention layers.
    pub head_outputs: Vec<Option<Tensor>>,
}

/// Gradient of output `selector` (a logit index) through the traced pass.
pub fn backward_grad(graph: &Graph, trace: &ActivationTrace, selector: usize) -> Result<Gradients> {
    let n = graph.num_classes();
    if selector >= n {
        return Err(invalid(format!("output selector {selector} out of range for {n} outputs")));
    }
    let mut seed = vec![0.0; n];
    seed[selector] = 1.0;
    backward_from(graph, trace, &seed)
}

/// Vector-Jacobian product for an arbitrary cotangent on the graph output.
pub fn backward_from(graph: &Graph, trace: &ActivationTrace, seed: &[f64]) -> Result<Gradients> {
    trace.check_matches(graph)?;
    if seed.len() != graph.num_classes() {
        return Err(shape("output cotangent length differs from class count"));
    }
    let nl = graph.len();
    let mut g_out: Vec<Vec<f64>> = (0..nl).map(|i| vec![0.0; trace.record(i).output.numel()]).collect();
    let mut g_input = vec![0.0; trace.input().numel()];
    g_out[nl - 1].copy_from_slice(seed);
    let mut g_inputs: Vec<Vec<Tensor>> = vec![Vec::new(); nl];
    let mut g_heads: Vec<Option<Tensor>> = vec![None; nl];
    for i in (0..nl).rev() {
        let layer = graph.layer(i);
        let gy = std::mem::take(&mut g_out[i]);
        let (gxs, gh) = vjp_layer(layer, trace, i, &gy)?;
        g_heads[i] = gh;
        for (src, gx) in layer.inputs.iter().zip(&gxs) {
            let dst = match *src {
                Source::Input => &mut g_input,
                Source::Layer(j) => &mut g_out[j],
            };
            for (d, v) in dst.iter_mut().zip(gx) {
                *d += v;
            }
        }
        g_inputs[i] = layer
            .inputs
            .iter()
            .zip(gxs)
            .map(|(&s, gx)| Tensor::from_f64(trace.source(s).shape(), &gx))
            .collect::<Result<_>>()?;
        g_out[i] = gy;
    }
    let outputs = g_out
        .iter()
        .enumerate()
        .map(|(i, g)| Tensor::from_f64(graph.output_shape(i), g))
        .collect::<Result<_>>()?;
    Ok(Gradients {
        input: Tensor::from_f64(graph.input_shape(), &g_input)?,
        outputs,
        inputs: g_inputs,
        head_outputs: g_heads,
    })
}

type Vjp = (Vec<Vec<f64>>, Option<Tensor>);

fn vjp_layer(layer: &Layer, trace: &ActivationTrace, i: usize, gy: &[f64]) -> Result<Vjp> {
    let ins = trace.inputs(i);
    let x = ins[0];
    let rec = trace.record(i);
    let gx = match &layer.op {
        Op::Linear(l) => {
            let ws = l.weight.shape();
            let map = DenseMap { rows: rows_of(x.shape()), inp: ws[1], out: ws[0] };
            let g: Vec<f64> = gy.iter().enumerate().map(|(k, v)| v * keep_factor(&l.keep, k % ws[0])).collect();
            map.apply_t(&g, &l.weight.to_f64())
        }
        Op::Conv2d(c) => {
            let map = conv_map(c, x.shape());
            let per = gy.len() / map.c_out;
            let g: Vec<f64> = gy.iter().enumerate().map(|(k, v)| v * keep_factor(&c.keep, k / per)).collect();
            map.apply_t(&g, &c.weight.to_f64())
        }
        Op::Relu => gy.iter().zip(x.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
        Op::Gelu => gy.iter().zip(x.data()).map(|(g, &v)| g * gelu_grad(v as f64)).collect(),
        Op::MaxPool2d(p) => {
            let s = x.shape();
            let os = rec.output.shape();
            let mut g = vec![0.0; x.numel()];
            for (o, src) in max_pool_argmax(x.data(), s[0], s[1], s[2], p.kernel, p.stride, os[1], os[2])
                .into_iter()
                .enumerate()
            {
                g[src] += gy[o];
            }
            g
        }
        Op::AvgPool2d(p) => {
            let s = x.shape();
            let map = AvgPoolMap { c: s[0], h: s[1], w: s[2], k: p.kernel, stride: p.stride };
            map.apply_t(gy, &map.weight())
        }
        Op::Flatten => gy.to_vec(),
        Op::Add => return Ok((vec![gy.to_vec(), gy.to_vec()], None)),
        Op::LayerNorm(n) => {
            let norm = rec.norm.as_ref().ok_or_else(|| invalid("layer-norm record missing"))?;
            let d = *x.shape().last().unwrap();
            let xs = x.to_f64();
            let g = n.weight.to_f64();
            let mut out = vec![0.0; xs.len()];
            for r in 0..xs.len() / d {
                let (mu, inv) = (norm.mean[r], norm.inv_std[r]);
                let xh: Vec<f64> = (0..d).map(|k| (xs[r * d + k] - mu) * inv).collect();
                let gxh: Vec<f64> = (0..d).map(|k| gy[r * d + k] * g[k]).collect();
                let m1 = gxh.iter().sum::<f64>() / d as f64;
                let m2 = gxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for k in 0..d {
                    out[r * d + k] = inv * (gxh[k] - m1 - xh[k] * m2);
                }
            }
            out
        }
        Op::Attention(a) => {
            let (g, gh) = vjp_attention(a, rec, x, gy)?;
            return Ok((vec![g], Some(gh)));
        }
        Op::Softmax => {
            let s = rec.output.to_f64();
            let n = *x.shape().last().unwrap();
            softmax_vjp(&s, gy, n)
        }
    };
    Ok((vec![gx], None))
}

pub(crate) fn softmax_vjp(s: &[f64], gy: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for r in 0..s.len() / n {
        let row = r * n..(r + 1) * n;
        let dotp: f64 = s[row.clone()].iter().zip(&gy[row.clone()]).map(|(a, b)| a * b).sum();
        for k in row {
            out[k] = s[k] * (gy[k] - dotp);
        }
    }
    out
}

fn vjp_attention(a: &Attention, rec: &LayerRecord, x: &Tensor, gy: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let att = rec.attention.as_ref().ok_or_else(|| invalid("attention record missing"))?;
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let lay = HeadLayout { tokens: t, dim: d, head_dim: a.head_dim() };
    let out_map = DenseMap { rows: t, inp: d, out: d };
    let g_ctx = out_map.apply_t(gy, &a.o_weight.to_f64());
    let (q, k, v, p) = (att.q.to_f64(), att.k.to_f64(), att.v.to_f64(), att.probs.to_f64());
    let scale = 1.0 / (lay.head_dim as f64).sqrt();
    let (mut gq, mut gk, mut gv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
    for h in 0..a.heads {
        let keep = keep_factor(&a.keep, h);
        if keep == 0.0 {
            continue;
        }
        // dA = dO Vᵀ ; dV = Aᵀ dO
        let mut ga = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for c in 0..lay.head_dim {
                    acc += g_ctx[lay.at(i, h, c)] * v[lay.at(j, h, c)];
                }
                ga[i * t + j] = acc;
                for c in 0..lay.head_dim {
                    gv[lay.at(j, h, c)] += p[lay.sq(h, i, j)] * g_ctx[lay.at(i, h, c)];
                }
            }
        }
        let ph = &p[lay.sq(h, 0, 0)..lay.sq(h, 0, 0) + t * t];
        let gs = softmax_vjp(ph, &ga, t);
        for i in 0..t {
            for j in 0..t {
                let g = gs[i * t + j] * scale;
                if g == 0.0 {
                    continue;
                }
                for c in 0..lay.head_dim {
                    gq[lay.at(i, h, c)] += g * k[lay.at(j, h, c)];
                    gk[lay.at(j, h, c)] += g * q[lay.at(i, h, c)];
                }
            }
        }
    }
    let in_map = DenseMap { rows: t, inp: d, out: d };
    let mut gx = in_map.apply_t(&gq, &a.q_weight.to_f64());
    for (gpart, w) in [(&gk, &a.k_weight), (&gv, &a.v_weight)] {
        for (acc, v) in gx.iter_mut().zip(in_map.apply_t(gpart, &w.to_f64())) {
            *acc += v;
        }
    }
    Ok((gx, Tensor::from_f64(&[t, d], &g_ctx)?))
}
