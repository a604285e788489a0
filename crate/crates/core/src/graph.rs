//! Layered computation graphs over a closed set of layer kinds, the prunable
//! components they expose, and the graph rewrites used by pruning
//! (component masking and output-class restriction).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{ConvMap, Tensor};

/// Where a layer reads one of its inputs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Arc<Tensor>,
    pub bias: Option<Arc<Tensor>>,
    /// Keep-flag per output neuron; `None` keeps all.
    pub keep: Option<Arc<Vec<bool>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[c_out, c_in, kh, kw]`
    pub weight: Arc<Tensor>,
    pub bias: Option<Arc<Tensor>>,
    pub stride: usize,
    pub padding: usize,
    /// Keep-flag per output channel.
    pub keep: Option<Arc<Vec<bool>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
    pub eps: f32,
}

/// Multi-head self-attention over a `[tokens, dim]` input:
/// `A = softmax(Q Kᵀ / √d_head)`, `O = A V` per head, then the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q_weight: Arc<Tensor>,
    pub q_bias: Option<Arc<Tensor>>,
    pub k_weight: Arc<Tensor>,
    pub k_bias: Option<Arc<Tensor>>,
    pub v_weight: Arc<Tensor>,
    pub v_bias: Option<Arc<Tensor>>,
    pub o_weight: Arc<Tensor>,
    pub o_bias: Option<Arc<Tensor>>,
    /// Keep-flag per head.
    pub keep: Option<Arc<Vec<bool>>>,
}

impl Attention {
    pub fn dim(&self) -> usize {
        self.q_weight.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu,
    Gelu,
    MaxPool2d(Pool),
    AvgPool2d(Pool),
    Flatten,
    Add,
    LayerNorm(LayerNorm),
    Attention(Attention),
    Softmax,
}

impl Op {
    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Self {
        Op::Linear(Linear { weight: Arc::new(weight), bias: bias.map(Arc::new), keep: None })
    }

    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Op::Conv2d(Conv2d {
            weight: Arc::new(weight),
            bias: bias.map(Arc::new),
            stride,
            padding,
            keep: None,
        })
    }

    pub fn layer_norm(weight: Tensor, bias: Tensor, eps: f32) -> Self {
        Op::LayerNorm(LayerNorm { weight: Arc::new(weight), bias: Arc::new(bias), eps })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Linear(_) => "linear",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::MaxPool2d(_) => "maxpool2d",
            Op::AvgPool2d(_) => "avgpool2d",
            Op::Flatten => "flatten",
            Op::Add => "add",
            Op::LayerNorm(_) => "layernorm",
            Op::Attention(_) => "attention",
            Op::Softmax => "softmax",
        }
    }

    /// Layers with learned weights: the units the layer-group split counts.
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Op::Linear(_) | Op::Conv2d(_) | Op::Attention(_))
    }

    fn arity(&self) -> usize {
        if matches!(self, Op::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<Source>,
}

/// An immutable, validated layered DAG. The last layer produces the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    shapes: Vec<Vec<usize>>,
    class_map: Option<Vec<usize>>,
}

impl Graph {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::with_class_map(layers, input_shape, num_classes, None)
    }

    pub(crate) fn with_class_map(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        num_classes: usize,
        class_map: Option<Vec<usize>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("graph has no layers"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut ids = HashSet::new();
        let mut used = vec![false; layers.len()];
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if !ids.insert(layer.id.as_str()) {
                return Err(invalid(format!("duplicate layer id `{}`", layer.id)));
            }
            if layer.inputs.len() != layer.op.arity() {
                return Err(invalid(format!(
                    "layer `{}` ({}) needs {} inputs, has {}",
                    layer.id,
                    layer.op.kind(),
                    layer.op.arity(),
                    layer.inputs.len()
                )));
            }
            let mut in_shapes = Vec::new();
            for src in &layer.inputs {
                match *src {
                    Source::Input => in_shapes.push(input_shape.clone()),
                    Source::Layer(j) if j < i => {
                        used[j] = true;
                        in_shapes.push(shapes[j].clone());
                    }
                    Source::Layer(j) => {
                        return Err(invalid(format!(
                            "layer `{}` reads from layer #{j}, which does not precede it",
                            layer.id
                        )))
                    }
                }
            }
            let out = infer_shape(layer, &in_shapes)?;
            shapes.push(out);
        }
        if let Some(i) = used[..layers.len() - 1].iter().position(|u| !u) {
            return Err(invalid(format!("layer `{}` output is never consumed", layers[i].id)));
        }
        let last = shapes.last().unwrap();
        if last != &vec![num_classes] {
            return Err(shape(format!("graph output shape {last:?} does not match {num_classes} classes")));
        }
        if let Some(map) = &class_map {
            if map.len() != num_classes {
                return Err(invalid("class map length differs from class count"));
            }
        }
        Ok(Self { layers, input_shape, num_classes, shapes, class_map })
    }

    #[cfg(test)]
    pub(crate) fn unchecked(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Self {
        let shapes = vec![Vec::new(); layers.len()];
        Self { layers, input_shape, num_classes, shapes, class_map: None }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn source_shape(&self, src: Source) -> &[usize] {
        match src {
            Source::Input => &self.input_shape,
            Source::Layer(j) => &self.shapes[j],
        }
    }

    /// Original class index of each output logit, when outputs were restricted.
    pub fn class_map(&self) -> Option<&[usize]> {
        self.class_map.as_deref()
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn contains_softmax(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.op, Op::Softmax | Op::Attention(_)))
    }

    pub fn into_parts(self) -> (Vec<Layer>, Vec<usize>, usize, Option<Vec<usize>>) {
        (self.layers, self.input_shape, self.num_classes, self.class_map)
    }
}

fn infer_shape(layer: &Layer, ins: &[Vec<usize>]) -> Result<Vec<usize>> {
    let x = &ins[0];
    let bad = |msg: String| Err(shape(format!("layer `{}`: {msg}", layer.id)));
    let check_bias = |b: &Option<Arc<Tensor>>, n: usize| -> Result<()> {
        match b {
            Some(b) if b.shape() != [n] => {
                Err(shape(format!("layer `{}`: bias shape {:?}, expected [{n}]", layer.id, b.shape())))
            }
            _ => Ok(()),
        }
    };
    let check_keep = |k: &Option<Arc<Vec<bool>>>, n: usize| -> Result<()> {
        match k {
            Some(k) if k.len() != n => Err(shape(format!("layer `{}`: mask covers {} of {n} units", layer.id, k.len()))),
            _ => Ok(()),
        }
    };
    match &layer.op {
        Op::Linear(l) => {
            let ws = l.weight.shape();
            if ws.len() != 2 || ws[0] == 0 || ws[1] == 0 {
                return bad(format!("linear weight shape {ws:?}"));
            }
            if x.is_empty() || *x.last().unwrap() != ws[1] || x.len() > 2 {
                return bad(format!("input {x:?} incompatible with weight {ws:?}"));
            }
            check_bias(&l.bias, ws[0])?;
            check_keep(&l.keep, ws[0])?;
            let mut out = x.clone();
            *out.last_mut().unwrap() = ws[0];
            Ok(out)
        }
        Op::Conv2d(c) => {
            let ws = c.weight.shape();
            if ws.len() != 4 || ws.contains(&0) {
                return bad(format!("conv weight shape {ws:?}"));
            }
            if x.len() != 3 || x[0] != ws[1] {
                return bad(format!("input {x:?} incompatible with conv weight {ws:?}"));
            }
            if c.stride == 0 || x[1] + 2 * c.padding < ws[2] || x[2] + 2 * c.padding < ws[3] {
                return bad("kernel does not fit input".into());
            }
            check_bias(&c.bias, ws[0])?;
            check_keep(&c.keep, ws[0])?;
            let m = conv_map(c, x);
            let (oh, ow) = m.out_hw();
            Ok(vec![ws[0], oh, ow])
        }
        Op::Relu | Op::Gelu | Op::Softmax => Ok(x.clone()),
        Op::MaxPool2d(p) | Op::AvgPool2d(p) => {
            if x.len() != 3 || p.kernel == 0 || p.stride == 0 || x[1] < p.kernel || x[2] < p.kernel {
                return bad(format!("pooling {p:?} on input {x:?}"));
            }
            Ok(vec![x[0], (x[1] - p.kernel) / p.stride + 1, (x[2] - p.kernel) / p.stride + 1])
        }
        Op::Flatten => Ok(vec![x.iter().product()]),
        Op::Add => {
            if ins[0] != ins[1] {
                return bad(format!("residual add of {:?} and {:?}", ins[0], ins[1]));
            }
            Ok(x.clone())
        }
        Op::LayerNorm(n) => {
            let d = *x.last().unwrap();
            if n.weight.shape() != [d] || n.bias.shape() != [d] || n.eps <= 0.0 {
                return bad("layer-norm parameters do not match last axis".into());
            }
            Ok(x.clone())
        }
        Op::Attention(a) => {
            if x.len() != 2 {
                return bad(format!("attention expects [tokens, dim], got {x:?}"));
            }
            let d = x[1];
            if a.heads == 0 || !d.is_multiple_of(a.heads) {
                return bad(format!("{} heads do not divide dim {d}", a.heads));
            }
            for w in [&a.q_weight, &a.k_weight, &a.v_weight, &a.o_weight] {
                if w.shape() != [d, d] {
                    return bad(format!("projection shape {:?}, expected [{d}, {d}]", w.shape()));
                }
            }
            for b in [&a.q_bias, &a.k_bias, &a.v_bias, &a.o_bias] {
                check_bias(b, d)?;
            }
            check_keep(&a.keep, a.heads)?;
            Ok(x.clone())
        }
    }
}

pub(crate) fn conv_map(c: &Conv2d, input: &[usize]) -> ConvMap {
    let ws = c.weight.shape();
    ConvMap {
        c_in: input[0],
        h: input[1],
        w: input[2],
        c_out: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride: c.stride,
        pad: c.padding,
    }
}

/// Sequential graph construction: each pushed layer reads from the previous one
/// unless explicit sources are given.
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self { input_shape, layers: Vec::new() }
    }

    /// Source of the most recently pushed layer.
    pub fn last(&self) -> Source {
        if self.layers.is_empty() {
            Source::Input
        } else {
            Source::Layer(self.layers.len() - 1)
        }
    }

    pub fn push(&mut self, id: impl Into<String>, op: Op) -> Source {
        let src = self.last();
        self.push_from(id, op, vec![src])
    }

    pub fn push_from(&mut self, id: impl Into<String>, op: Op, inputs: Vec<Source>) -> Source {
        self.layers.push(Layer { id: id.into(), op, inputs });
        self.last()
    }

    pub fn build(self, num_classes: usize) -> Result<Graph> {
        Graph::new(self.layers, self.input_shape, num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    ConvFilter,
    LinearNeuron,
    AttentionHead,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::ConvFilter => "conv_filter",
            ComponentKind::LinearNeuron => "linear_neuron",
            ComponentKind::AttentionHead => "attention_head",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_filter" | "filters" | "filter" => Ok(ComponentKind::ConvFilter),
            "linear_neuron" | "neurons" | "neuron" => Ok(ComponentKind::LinearNeuron),
            "attention_head" | "heads" | "head" => Ok(ComponentKind::AttentionHead),
            other => Err(invalid(format!("unknown component kind `{other}`"))),
        }
    }
}

/// Axes a component's relevance is summed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationAxes {
    /// `(h, w)` of one output channel.
    ChannelMap,
    /// Token axis of a token-wise linear layer (a single value for plain vectors).
    Tokens,
    /// `(query token, head feature)` of one head's output.
    HeadOutput,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub id: usize,
    pub kind: ComponentKind,
    pub layer: usize,
    pub layer_id: String,
    pub index: usize,
    pub axes: AggregationAxes,
}

/// Prunable components of one kind in layer order, then index order.
///
/// Linear neurons are the output units of every linear layer except the one
/// producing the logits.
pub fn enumerate_components(graph: &Graph, kind: ComponentKind) -> Result<Vec<Component>> {
    let mut out = Vec::new();
    let last = graph.output_layer();
    for (li, layer) in graph.layers().iter().enumerate() {
        let (width, axes) = match (&layer.op, kind) {
            (Op::Conv2d(c), ComponentKind::ConvFilter) => (c.weight.shape()[0], AggregationAxes::ChannelMap),
            (Op::Linear(l), ComponentKind::LinearNeuron) if li != last => {
                (l.weight.shape()[0], AggregationAxes::Tokens)
            }
            (Op::Attention(a), ComponentKind::AttentionHead) => (a.heads, AggregationAxes::HeadOutput),
            _ => continue,
        };
        for index in 0..width {
            out.push(Component { id: out.len(), kind, layer: li, layer_id: layer.id.clone(), index, axes });
        }
    }
    if out.is_empty() {
        return Err(Error::MissingComponentKind(kind.to_string()));
    }
    Ok(out)
}

/// Keep-flag for every component of one kind, aligned with [`enumerate_components`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub kind: ComponentKind,
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn keep_all(kind: ComponentKind, count: usize) -> Self {
        Self { kind, keep: vec![true; count] }
    }

    /// Mask dropping the given component ids.
    pub fn dropping(kind: ComponentKind, count: usize, dropped: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::keep_all(kind, count);
        for id in dropped {
            mask.keep[id] = false;
        }
        mask
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// Zero the outputs of every dropped component. Masks compose: a unit dropped
/// by an earlier mask stays dropped.
pub fn apply_mask(graph: &Graph, mask: &PruneMask) -> Result<Graph> {
    let comps = enumerate_components(graph, mask.kind)?;
    if comps.len() != mask.keep.len() {
        return Err(invalid(format!(
            "mask covers {} components, graph has {} of kind {}",
            mask.keep.len(),
            comps.len(),
            mask.kind
        )));
    }
    if mask.keep.iter().all(|k| *k) {
        return Ok(graph.clone());
    }
    let mut layers = graph.layers.clone();
    for (c, &keep) in comps.iter().zip(&mask.keep) {
        if keep {
            continue;
        }
        let slot = match &mut layers[c.layer].op {
            Op::Linear(l) => (&mut l.keep, l.weight.shape()[0]),
            Op::Conv2d(cv) => (&mut cv.keep, cv.weight.shape()[0]),
            Op::Attention(a) => (&mut a.keep, a.heads),
            _ => unreachable!("component on non-prunable layer"),
        };
        let (keep_slot, width) = slot;
        let flags = keep_slot.get_or_insert_with(|| Arc::new(vec![true; width]));
        Arc::make_mut(flags)[c.index] = false;
    }
    Graph::with_class_map(layers, graph.input_shape.clone(), graph.num_classes, graph.class_map.clone())
}

/// Nonempty set of distinct output classes to keep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRestriction {
    classes: Vec<usize>,
}

impl ClassRestriction {
    pub fn new(classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("class restriction is empty"));
        }
        let mut seen = HashSet::new();
        for &c in &classes {
            if c >= num_classes {
                return Err(invalid(format!("class {c} out of range for {num_classes} outputs")));
            }
            if !seen.insert(c) {
                return Err(invalid(format!("class {c} listed twice")));
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Position of an original class in the restricted output, if kept.
    pub fn remap(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Keep only the selected logits (rows of the final linear layer).
pub fn restrict_outputs(graph: &Graph, restriction: &ClassRestriction) -> Result<Graph> {
    let n = graph.num_classes();
    if restriction.classes.iter().any(|&c| c >= n) {
        return Err(invalid("restriction refers to classes outside the graph output"));
    }
    let mut layers = graph.layers.clone();
    let last = layers.len() - 1;
    let Op::Linear(head) = &mut layers[last].op else {
        return Err(invalid("output restriction needs a linear output layer"));
    };
    let inp = head.weight.shape()[1];
    let w = head.weight.data();
    let mut rows = Vec::with_capacity(restriction.classes.len() * inp);
    for &c in &restriction.classes {
        rows.extend_from_slice(&w[c * inp..(c + 1) * inp]);
    }
    head.weight = Arc::new(Tensor::new(vec![restriction.classes.len(), inp], rows)?);
    if let Some(b) = &head.bias {
        let kept = restriction.classes.iter().map(|&c| b.data()[c]).collect();
        head.bias = Some(Arc::new(Tensor::vector(kept)));
    }
    if let Some(keep) = &head.keep {
        let kept = restriction.classes.iter().map(|&c| keep[c]).collect();
        head.keep = Some(Arc::new(kept));
    }
    let original: Vec<usize> = match &graph.class_map {
        Some(map) => restriction.classes.iter().map(|&c| map[c]).collect(),
        None => restriction.classes.clone(),
    };
    Graph::with_class_map(layers, graph.input_shape.clone(), restriction.classes.len(), Some(original))
}
