//! NNIX model files: `NNIX1\n`, a little-endian `u64` header length, a JSON
//! header describing layers, edges and tensors, then raw little-endian `f32`
//! tensor data. Tensor `offset` is in bytes from the start of the data
//! section and `len` counts elements.
//!
//! A `batchnorm` layer is folded into the conv or linear layer feeding it
//! when the file is loaded.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{Attention, Conv2d, Graph, Layer, LayerNorm, Linear, Op, Pool, Source};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"NNIX1\n";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    layers: Vec<LayerEntry>,
    edges: Vec<[String; 2]>,
    input_shape: Vec<usize>,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_map: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: BTreeMap<String, Value>,
    #[serde(default)]
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Serialize a graph. Fails on zero-size tensors.
pub fn save_model(graph: &Graph) -> Result<Vec<u8>> {
    let mut data: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(graph.len());
    let mut edges = Vec::new();
    for layer in graph.layers() {
        let mut tensors = Vec::new();
        let mut put = |name: &str, t: &Tensor| -> Result<()> {
            if t.numel() == 0 {
                return Err(bad(format!("layer `{}`: tensor `{name}` is empty", layer.id)));
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: data.len() as u64,
                len: t.numel() as u64,
            });
            for v in t.data() {
                data.extend(v.to_le_bytes());
            }
            Ok(())
        };
        let mut attrs = BTreeMap::new();
        let keep = |k: &Option<Arc<Vec<bool>>>, attrs: &mut BTreeMap<String, Value>| {
            if let Some(k) = k {
                attrs.insert("keep".into(), json!(k.as_slice()));
            }
        };
        match &layer.op {
            Op::Linear(l) => {
                put("weight", &l.weight)?;
                if let Some(b) = &l.bias {
                    put("bias", b)?;
                }
                keep(&l.keep, &mut attrs);
            }
            Op::Conv2d(c) => {
                put("weight", &c.weight)?;
                if let Some(b) = &c.bias {
                    put("bias", b)?;
                }
                attrs.insert("stride".into(), json!(c.stride));
                attrs.insert("padding".into(), json!(c.padding));
                keep(&c.keep, &mut attrs);
            }
            Op::MaxPool2d(p) | Op::AvgPool2d(p) => {
                attrs.insert("kernel".into(), json!(p.kernel));
                attrs.insert("stride".into(), json!(p.stride));
            }
            Op::LayerNorm(n) => {
                put("weight", &n.weight)?;
                put("bias", &n.bias)?;
                attrs.insert("eps".into(), json!(n.eps));
            }
            Op::Attention(a) => {
                attrs.insert("heads".into(), json!(a.heads));
                keep(&a.keep, &mut attrs);
                for (name, w, b) in [
                    ("q", &a.q_weight, &a.q_bias),
                    ("k", &a.k_weight, &a.k_bias),
                    ("v", &a.v_weight, &a.v_bias),
                    ("o", &a.o_weight, &a.o_bias),
                ] {
                    put(&format!("{name}_weight"), w)?;
                    if let Some(b) = b {
                        put(&format!("{name}_bias"), b)?;
                    }
                }
            }
            Op::Relu | Op::Gelu | Op::Flatten | Op::Add | Op::Softmax => {}
        }
        for src in &layer.inputs {
            let from = match *src {
                Source::Input => "input".to_string(),
                Source::Layer(j) => graph.layer(j).id.clone(),
            };
            edges.push([from, layer.id.clone()]);
        }
        entries.push(LayerEntry { id: layer.id.clone(), kind: layer.op.kind().to_string(), attrs, tensors });
    }
    let header = Header {
        version: VERSION,
        layers: entries,
        edges,
        input_shape: graph.input_shape().to_vec(),
        num_classes: graph.num_classes(),
        class_map: graph.class_map().map(<[usize]>::to_vec),
    };
    let text = serde_json::to_vec(&header)?;
    let mut out = MAGIC.to_vec();
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(data);
    Ok(out)
}

pub fn save_model_to(graph: &Graph, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, save_model(graph)?)?)
}

pub fn load_model_from(path: &Path) -> Result<Graph> {
    load_model(&std::fs::read(path)?)
}

/// Parse and validate a model file.
pub fn load_model(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(bad("missing NNIX1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let hend = 14usize.checked_add(usize::try_from(hlen).map_err(|_| bad("header length overflows"))?);
    let hend = hend.filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[14..hend]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let data = &bytes[hend..];

    let mut inputs: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut consumers: HashMap<&str, usize> = HashMap::new();
    for [src, dst] in &header.edges {
        inputs.entry(dst.as_str()).or_default().push(src.as_str());
        *consumers.entry(src.as_str()).or_default() += 1;
    }

    let mut layers: Vec<Layer> = Vec::with_capacity(header.layers.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for entry in &header.layers {
        let tensors = read_tensors(entry, data)?;
        let srcs = inputs.get(entry.id.as_str()).cloned().unwrap_or_default();
        let resolve = |name: &str| -> Result<Source> {
            if name == "input" {
                return Ok(Source::Input);
            }
            index
                .get(name)
                .map(|&i| Source::Layer(i))
                .ok_or_else(|| bad(format!("layer `{}` reads from unknown or later layer `{name}`", entry.id)))
        };
        if entry.kind == "batchnorm" {
            let [src] = srcs.as_slice() else {
                return Err(bad(format!("batchnorm `{}` needs exactly one input", entry.id)));
            };
            let Source::Layer(target) = resolve(src)? else {
                return Err(bad(format!("batchnorm `{}` must follow a conv or linear layer", entry.id)));
            };
            if consumers.get(src).copied().unwrap_or(0) != 1 {
                return Err(bad(format!("batchnorm `{}`: its input feeds other layers", entry.id)));
            }
            fold_batchnorm(&mut layers[target], &tensors, attr_f64(entry, "eps")?.unwrap_or(1e-5))?;
            index.insert(entry.id.clone(), target);
            continue;
        }
        let sources = srcs.iter().map(|s| resolve(s)).collect::<Result<Vec<_>>>()?;
        let op = build_op(entry, tensors)?;
        index.insert(entry.id.clone(), layers.len());
        layers.push(Layer { id: entry.id.clone(), op, inputs: sources });
    }
    Graph::with_class_map(layers, header.input_shape, header.num_classes, header.class_map)
}

fn read_tensors(entry: &LayerEntry, data: &[u8]) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for t in &entry.tensors {
        let numel: usize = t.shape.iter().product();
        if numel as u64 != t.len || numel == 0 {
            return Err(bad(format!(
                "layer `{}`: tensor `{}` shape {:?} does not match length {}",
                entry.id, t.name, t.shape, t.len
            )));
        }
        let start = usize::try_from(t.offset).map_err(|_| bad("tensor offset overflows"))?;
        let end = start
            .checked_add(numel * 4)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| bad(format!("layer `{}`: tensor `{}` extends past end of data", entry.id, t.name)))?;
        let values: Vec<f32> =
            data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("layer `{}`: tensor `{}` has non-finite values", entry.id, t.name)));
        }
        if out.insert(t.name.clone(), Tensor::new(t.shape.clone(), values)?).is_some() {
            return Err(bad(format!("layer `{}`: duplicate tensor `{}`", entry.id, t.name)));
        }
    }
    Ok(out)
}

fn attr_usize(entry: &LayerEntry, name: &str) -> Result<Option<usize>> {
    match entry.attrs.get(name) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|v| Some(v as usize))
            .ok_or_else(|| bad(format!("layer `{}`: attribute `{name}` must be a non-negative integer", entry.id))),
    }
}

fn attr_f64(entry: &LayerEntry, name: &str) -> Result<Option<f64>> {
    match entry.attrs.get(name) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| bad(format!("layer `{}`: attribute `{name}` must be a number", entry.id))),
    }
}

fn attr_keep(entry: &LayerEntry) -> Result<Option<Arc<Vec<bool>>>> {
    match entry.attrs.get("keep") {
        None => Ok(None),
        Some(v) => serde_json::from_value::<Vec<bool>>(v.clone())
            .map(|k| Some(Arc::new(k)))
            .map_err(|_| bad(format!("layer `{}`: `keep` must be a list of booleans", entry.id))),
    }
}

fn build_op(entry: &LayerEntry, mut tensors: HashMap<String, Tensor>) -> Result<Op> {
    let mut take = |name: &str| tensors.remove(name).map(Arc::new);
    let need = |t: Option<Arc<Tensor>>, name: &str| t.ok_or_else(|| bad(format!("layer `{}`: missing tensor `{name}`", entry.id)));
    let pool = || -> Result<Pool> {
        let kernel = attr_usize(entry, "kernel")?.ok_or_else(|| bad(format!("layer `{}`: missing kernel", entry.id)))?;
        Ok(Pool { kernel, stride: attr_usize(entry, "stride")?.unwrap_or(kernel) })
    };
    let op = match entry.kind.as_str() {
        "linear" => Op::Linear(Linear { weight: need(take("weight"), "weight")?, bias: take("bias"), keep: attr_keep(entry)? }),
        "conv2d" => Op::Conv2d(Conv2d {
            weight: need(take("weight"), "weight")?,
            bias: take("bias"),
            stride: attr_usize(entry, "stride")?.unwrap_or(1),
            padding: attr_usize(entry, "padding")?.unwrap_or(0),
            keep: attr_keep(entry)?,
        }),
        "relu" => Op::Relu,
        "gelu" => Op::Gelu,
        "flatten" => Op::Flatten,
        "add" => Op::Add,
        "softmax" => Op::Softmax,
        "maxpool2d" => Op::MaxPool2d(pool()?),
        "avgpool2d" => Op::AvgPool2d(pool()?),
        "layernorm" => Op::LayerNorm(LayerNorm {
            weight: need(take("weight"), "weight")?,
            bias: need(take("bias"), "bias")?,
            eps: attr_f64(entry, "eps")?.unwrap_or(1e-5) as f32,
        }),
        "attention" => Op::Attention(Attention {
            heads: attr_usize(entry, "heads")?.ok_or_else(|| bad(format!("layer `{}`: missing heads", entry.id)))?,
            q_weight: need(take("q_weight"), "q_weight")?,
            q_bias: take("q_bias"),
            k_weight: need(take("k_weight"), "k_weight")?,
            k_bias: take("k_bias"),
            v_weight: need(take("v_weight"), "v_weight")?,
            v_bias: take("v_bias"),
            o_weight: need(take("o_weight"), "o_weight")?,
            o_bias: take("o_bias"),
            keep: attr_keep(entry)?,
        }),
        other => return Err(bad(format!("layer `{}`: unknown kind `{other}`", entry.id))),
    };
    if let Some(name) = tensors.keys().next() {
        return Err(bad(format!("layer `{}`: unexpected tensor `{name}`", entry.id)));
    }
    Ok(op)
}

/// `w' = w·γ/√(var+eps)`, `b' = (b − mean)·γ/√(var+eps) + β`, per output channel.
fn fold_batchnorm(layer: &mut Layer, t: &HashMap<String, Tensor>, eps: f64) -> Result<()> {
    let get = |n: &str| t.get(n).ok_or_else(|| bad(format!("batchnorm after `{}`: missing `{n}`", layer.id)));
    let (gamma, beta, mean, var) = (get("weight")?, get("bias")?, get("running_mean")?, get("running_var")?);
    let (weight, bias) = match &mut layer.op {
        Op::Linear(l) => (&mut l.weight, &mut l.bias),
        Op::Conv2d(c) => (&mut c.weight, &mut c.bias),
        _ => return Err(bad(format!("batchnorm must follow a conv or linear layer, not `{}`", layer.id))),
    };
    let out = weight.shape()[0];
    if [gamma, beta, mean, var].iter().any(|p| p.shape() != [out]) {
        return Err(bad(format!("batchnorm after `{}`: parameters must have {out} entries", layer.id)));
    }
    let per = weight.numel() / out;
    let mut w = weight.to_f64();
    let b = bias.as_ref().map(|b| b.to_f64()).unwrap_or_else(|| vec![0.0; out]);
    let mut nb = vec![0.0; out];
    for c in 0..out {
        let s = gamma.data()[c] as f64 / (var.data()[c] as f64 + eps).sqrt();
        w[c * per..(c + 1) * per].iter_mut().for_each(|v| *v *= s);
        nb[c] = (b[c] - mean.data()[c] as f64) * s + beta.data()[c] as f64;
    }
    *weight = Arc::new(Tensor::from_f64(weight.shape(), &w)?);
    *bias = Some(Arc::new(Tensor::from_f64(&[out], &nb)?));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = GraphBuilder::new(vec![2]);
        b.push("fc", Op::linear(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), None));
        let bytes = save_model(&b.build(1).unwrap()).unwrap();
        assert!(load_model(&bytes).is_ok());
        assert!(matches!(load_model(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[4] = b'2';
        assert!(load_model(&wrong).is_err());
    }

    #[test]
    fn zero_size_tensor_rejected_at_save() {
        // validated graphs cannot hold empty tensors, so build one unchecked
        let layer = Layer {
            id: "fc".into(),
            op: Op::Linear(Linear { weight: Arc::new(Tensor::zeros(&[0, 2])), bias: None, keep: None }),
            inputs: vec![Source::Input],
        };
        let raw = Graph::unchecked(vec![layer], vec![2], 0);
        assert!(matches!(save_model(&raw), Err(Error::Format(_))));
    }
}
