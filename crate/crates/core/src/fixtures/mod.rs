//! Self-generated models with known structure, for checking pruning end to end.
//!
//! * `planted-cnn`: a trained CNN in which 24 of its 32 filters have all
//!   outgoing weights held at zero.
//! * `planted-vit`: a 4-block, 4-head transformer in which two heads per block
//!   have a zero output projection; labels are the model's own predictions.
//! * `trained-mlp`: a one-hidden-layer MLP trained on Gaussian blobs.
//! * `trained-cnn`: a 10-class CNN trained on noisy class templates.

mod train;

pub use train::{train, Frozen, TrainConfig};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::exec::{forward, forward_trace};
use crate::graph::{enumerate_components, Attention, ComponentKind, Graph, GraphBuilder, Op, Pool};
use crate::nnix::{load_model_from, save_model_to};
use crate::prune::accuracy;
use crate::seed::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    PlantedCnn,
    PlantedVit,
    TrainedMlp,
    TrainedCnn,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 4] =
        [FixtureKind::PlantedCnn, FixtureKind::PlantedVit, FixtureKind::TrainedMlp, FixtureKind::TrainedCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            FixtureKind::PlantedCnn => "planted-cnn",
            FixtureKind::PlantedVit => "planted-vit",
            FixtureKind::TrainedMlp => "trained-mlp",
            FixtureKind::TrainedCnn => "trained-cnn",
        }
    }

    /// Component kind the fixture is built to be pruned by.
    pub fn component_kind(self) -> ComponentKind {
        match self {
            FixtureKind::PlantedCnn | FixtureKind::TrainedCnn => ComponentKind::ConvFilter,
            FixtureKind::PlantedVit => ComponentKind::AttentionHead,
            FixtureKind::TrainedMlp => ComponentKind::LinearNeuron,
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FixtureKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown fixture kind `{s}` (expected one of planted-cnn, planted-vit, trained-mlp, trained-cnn)")))
    }
}

/// What a fixture contains and which components are irrelevant by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: FixtureKind,
    pub seed: u64,
    pub component_kind: ComponentKind,
    pub component_count: usize,
    /// Component ids with all outgoing weights zero.
    pub irrelevant: Vec<usize>,
    pub num_classes: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub graph: Graph,
    pub train: Dataset,
    pub eval: Dataset,
    pub manifest: Manifest,
}

pub const MODEL_FILE: &str = "model.nnix";
pub const TRAIN_FILE: &str = "train.dset";
pub const EVAL_FILE: &str = "eval.dset";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Fixture {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_model_to(&self.graph, &dir.join(MODEL_FILE))?;
        self.train.write_dset(&dir.join(TRAIN_FILE))?;
        self.eval.write_dset(&dir.join(EVAL_FILE))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            graph: load_model_from(&dir.join(MODEL_FILE))?,
            train: Dataset::read_dset(&dir.join(TRAIN_FILE))?,
            eval: Dataset::read_dset(&dir.join(EVAL_FILE))?,
            manifest: serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?,
        })
    }
}

/// Build a fixture deterministically from `seed`.
pub fn make_fixture(kind: FixtureKind, seed: u64) -> Result<Fixture> {
    match kind {
        FixtureKind::PlantedCnn => planted_cnn(seed),
        FixtureKind::PlantedVit => planted_vit(seed),
        FixtureKind::TrainedMlp => trained_mlp(seed, &MlpOptions::default()),
        FixtureKind::TrainedCnn => trained_cnn(seed),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let n = shape.iter().product();
    Tensor::from_f64(shape, &normal_vec(rng, n, (2.0 / fan_in as f64).sqrt())).expect("shape matches")
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// Class means drawn once; samples are mean plus isotropic noise.
struct Blobs {
    means: Vec<Vec<f64>>,
    shape: Vec<usize>,
    noise: f64,
}

impl Blobs {
    fn sample(&self, rng: &mut ChaCha8Rng, per_class: usize) -> Dataset {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let d = Normal::new(0.0, self.noise).expect("valid noise");
        for _ in 0..per_class {
            for (c, m) in self.means.iter().enumerate() {
                let v: Vec<f64> = m.iter().map(|mu| mu + d.sample(rng)).collect();
                samples.push(Tensor::from_f64(&self.shape, &v).expect("shape matches"));
                labels.push(c);
            }
        }
        Dataset::new(samples, labels).expect("consistent samples")
    }
}

/// Smooth class templates on a `[1, h, w]` grid: a few random Gaussian bumps each.
fn templates(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let mut img = vec![0.0; h * w];
            for _ in 0..3 {
                let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                let sign = if rng.random_bool(0.75) { 1.0 } else { -1.0 };
                let width: f64 = rng.random_range(0.8..2.0);
                for y in 0..h {
                    for x in 0..w {
                        let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[y * w + x] += sign * (-r2 / (2.0 * width * width)).exp();
                    }
                }
            }
            img
        })
        .collect()
}

fn cnn_graph(rng: &mut ChaCha8Rng, c1: usize, c2: usize, classes: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(vec![1, 8, 8]);
    b.push("conv1", Op::conv2d(he_tensor(rng, &[c1, 1, 3, 3]), Some(zeros(c1)), 1, 1));
    b.push("relu1", Op::Relu);
    b.push("pool1", Op::MaxPool2d(Pool { kernel: 2, stride: 2 }));
    b.push("conv2", Op::conv2d(he_tensor(rng, &[c2, c1, 3, 3]), Some(zeros(c2)), 1, 1));
    b.push("relu2", Op::Relu);
    b.push("pool2", Op::MaxPool2d(Pool { kernel: 2, stride: 2 }));
    b.push("flatten", Op::Flatten);
    b.push("fc", Op::linear(he_tensor(rng, &[classes, c2 * 4]), Some(zeros(classes))));
    b.build(classes)
}

fn finish(kind: FixtureKind, seed: u64, graph: Graph, train: Dataset, eval: Dataset, train_acc: f64, irrelevant: Vec<usize>) -> Result<Fixture> {
    let component_kind = kind.component_kind();
    let manifest = Manifest {
        kind,
        seed,
        component_kind,
        component_count: enumerate_components(&graph, component_kind)?.len(),
        irrelevant,
        num_classes: graph.num_classes(),
        train_accuracy: train_acc,
        eval_accuracy: accuracy(&graph, &eval)?,
    };
    Ok(Fixture { graph, train, eval, manifest })
}

/// 16 + 16 filters, 12 of each layer with zero outgoing weights.
fn planted_cnn(seed: u64) -> Result<Fixture> {
    const C: usize = 16;
    const IRRELEVANT_PER_LAYER: usize = 12;
    const CLASSES: usize = 4;
    let mut rng = stream_rng(seed, 0);
    let blobs = Blobs { means: templates(&mut rng, CLASSES, 8, 8), shape: vec![1, 8, 8], noise: 0.3 };
    let train_set = blobs.sample(&mut stream_rng(seed, 1), 100);
    let eval_set = blobs.sample(&mut stream_rng(seed, 2), 100);
    let pick = |stream| {
        let mut r = stream_rng(seed, stream);
        let mut idx = rand::seq::index::sample(&mut r, C, IRRELEVANT_PER_LAYER).into_vec();
        idx.sort_unstable();
        idx
    };
    let (dead1, dead2) = (pick(4), pick(5));
    let graph = cnn_graph(&mut stream_rng(seed, 3), C, C, CLASSES)?;
    let conv2 = graph.layer_index("conv2").expect("conv2");
    let fc = graph.layer_index("fc").expect("fc");
    let mut frozen = Frozen::new();
    // conv2 weights [C, C, 3, 3]: zero every input-channel slice of a dead conv1 filter
    let mut m2 = vec![false; C * C * 9];
    for o in 0..C {
        for &i in &dead1 {
            m2[(o * C + i) * 9..(o * C + i + 1) * 9].iter_mut().for_each(|v| *v = true);
        }
    }
    frozen.insert(conv2, m2);
    // fc weights [classes, C*4]: zero the 4 columns of each dead conv2 filter
    let mut mf = vec![false; CLASSES * C * 4];
    for row in 0..CLASSES {
        for &c in &dead2 {
            mf[row * C * 4 + c * 4..row * C * 4 + (c + 1) * 4].iter_mut().for_each(|v| *v = true);
        }
    }
    frozen.insert(fc, mf);
    let cfg = TrainConfig { seed, target_accuracy: 0.95, ..TrainConfig::default() };
    let live = |dead: &[usize]| (0..C).filter(|c| !dead.contains(c)).collect::<Vec<_>>();
    let (live1, live2) = (live(&dead1), live(&dead2));
    // a live filter that never fires after training is irrelevant in fact; redraw the init until none is
    for attempt in 0..PLANTED_ATTEMPTS {
        let init = match attempt {
            0 => graph.clone(),
            _ => cnn_graph(&mut stream_rng(seed, 3 + 100 * attempt), C, C, CLASSES)?,
        };
        let (trained, acc) = train(&init, &train_set, &cfg, &frozen)?;
        let fires = |layer: &str, channels: &[usize]| firing_fraction(&trained, &train_set, layer, channels);
        if fires("relu1", &live1)? >= MIN_FIRING && fires("relu2", &live2)? >= MIN_FIRING {
            let irrelevant = dead1.iter().copied().chain(dead2.iter().map(|i| C + i)).collect();
            return finish(FixtureKind::PlantedCnn, seed, trained, train_set, eval_set, acc, irrelevant);
        }
    }
    Err(invalid(format!("planted-cnn seed {seed}: a live filter stayed silent in every initialization")))
}

const PLANTED_ATTEMPTS: u64 = 8;
/// Share of training samples on which every live filter must be active somewhere.
const MIN_FIRING: f64 = 0.05;

/// Smallest, over `channels`, fraction of samples where that channel of `layer`'s output is positive.
fn firing_fraction(graph: &Graph, data: &Dataset, layer: &str, channels: &[usize]) -> Result<f64> {
    let idx = graph.layer_index(layer).ok_or_else(|| invalid(format!("no layer `{layer}`")))?;
    let mut counts = vec![0usize; channels.len()];
    for x in data.samples() {
        let (_, trace) = forward_trace(graph, x)?;
        let out = &trace.record(idx).output;
        let per = out.data().len() / out.shape()[0];
        for (n, &c) in counts.iter_mut().zip(channels) {
            *n += usize::from(out.data()[c * per..(c + 1) * per].iter().any(|v| *v > 0.0));
        }
    }
    Ok(counts.iter().min().map_or(1.0, |&n| n as f64 / data.len() as f64))
}

fn trained_cnn(seed: u64) -> Result<Fixture> {
    const CLASSES: usize = 10;
    let mut rng = stream_rng(seed, 0);
    let blobs = Blobs { means: templates(&mut rng, CLASSES, 8, 8), shape: vec![1, 8, 8], noise: 0.3 };
    let train_set = blobs.sample(&mut stream_rng(seed, 1), 60);
    let eval_set = blobs.sample(&mut stream_rng(seed, 2), 60);
    let graph = cnn_graph(&mut stream_rng(seed, 3), 8, 16, CLASSES)?;
    let cfg = TrainConfig { seed, target_accuracy: 0.95, ..TrainConfig::default() };
    let (graph, acc) = train(&graph, &train_set, &cfg, &Frozen::new())?;
    finish(FixtureKind::TrainedCnn, seed, graph, train_set, eval_set, acc, Vec::new())
}

/// Shape of the trained MLP fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpOptions {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_eval: usize,
    pub spread: f64,
    pub noise: f64,
    pub target_accuracy: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for MlpOptions {
    fn default() -> Self {
        Self {
            inputs: 8,
            hidden: 8,
            classes: 4,
            per_class_train: 100,
            per_class_eval: 1000,
            spread: 2.0,
            noise: 0.7,
            target_accuracy: 0.95,
            weight_decay: 0.02,
            epochs: 60,
        }
    }
}

pub fn trained_mlp(seed: u64, opt: &MlpOptions) -> Result<Fixture> {
    let mut rng = stream_rng(seed, 0);
    let means = (0..opt.classes).map(|_| normal_vec(&mut rng, opt.inputs, opt.spread)).collect();
    let blobs = Blobs { means, shape: vec![opt.inputs], noise: opt.noise };
    let train_set = blobs.sample(&mut stream_rng(seed, 1), opt.per_class_train);
    let eval_set = blobs.sample(&mut stream_rng(seed, 2), opt.per_class_eval);
    let mut r = stream_rng(seed, 3);
    let mut b = GraphBuilder::new(vec![opt.inputs]);
    b.push("fc1", Op::linear(he_tensor(&mut r, &[opt.hidden, opt.inputs]), Some(zeros(opt.hidden))));
    b.push("relu1", Op::Relu);
    b.push("fc2", Op::linear(he_tensor(&mut r, &[opt.classes, opt.hidden]), Some(zeros(opt.classes))));
    let graph = b.build(opt.classes)?;
    // full-length training with weight decay leaves few redundant hidden units
    let cfg = TrainConfig {
        seed,
        target_accuracy: opt.target_accuracy,
        weight_decay: opt.weight_decay,
        min_epochs: opt.epochs,
        max_epochs: opt.epochs,
        ..TrainConfig::default()
    };
    let (graph, acc) = train(&graph, &train_set, &cfg, &Frozen::new())?;
    finish(FixtureKind::TrainedMlp, seed, graph, train_set, eval_set, acc, Vec::new())
}

fn planted_vit(seed: u64) -> Result<Fixture> {
    const TOKENS: usize = 4;
    const D_IN: usize = 8;
    const D: usize = 16;
    const HEADS: usize = 4;
    const BLOCKS: usize = 4;
    const HIDDEN: usize = 32;
    const CLASSES: usize = 4;
    let mut rng = stream_rng(seed, 0);
    let dense = |rng: &mut ChaCha8Rng, out: usize, inp: usize| {
        Tensor::from_f64(&[out, inp], &normal_vec(rng, out * inp, 1.0 / (inp as f64).sqrt())).expect("shape")
    };
    let small_bias = |rng: &mut ChaCha8Rng, n: usize| Tensor::from_f64(&[n], &normal_vec(rng, n, 0.1)).expect("shape");
    let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape");
    let dh = D / HEADS;
    let mut irrelevant = Vec::new();
    let mut b = GraphBuilder::new(vec![TOKENS, D_IN]);
    b.push("embed", Op::linear(dense(&mut rng, D, D_IN), Some(small_bias(&mut rng, D))));
    for blk in 0..BLOCKS {
        let res = b.last();
        b.push(format!("b{blk}.ln1"), Op::layer_norm(ones(D), zeros(D), 1e-5));
        let mut o = dense(&mut rng, D, D).to_f64();
        let mut dead = rand::seq::index::sample(&mut rng, HEADS, 2).into_vec();
        dead.sort_unstable();
        for &h in &dead {
            for row in 0..D {
                o[row * D + h * dh..row * D + (h + 1) * dh].iter_mut().for_each(|v| *v = 0.0);
            }
            irrelevant.push(blk * HEADS + h);
        }
        let attn = Attention {
            heads: HEADS,
            q_weight: Arc::new(dense(&mut rng, D, D)),
            q_bias: Some(Arc::new(small_bias(&mut rng, D))),
            k_weight: Arc::new(dense(&mut rng, D, D)),
            k_bias: Some(Arc::new(small_bias(&mut rng, D))),
            v_weight: Arc::new(dense(&mut rng, D, D)),
            v_bias: Some(Arc::new(small_bias(&mut rng, D))),
            o_weight: Arc::new(Tensor::from_f64(&[D, D], &o)?),
            o_bias: Some(Arc::new(small_bias(&mut rng, D))),
            keep: None,
        };
        let a = b.push(format!("b{blk}.attn"), Op::Attention(attn));
        let mid = b.push_from(format!("b{blk}.add1"), Op::Add, vec![res, a]);
        b.push(format!("b{blk}.ln2"), Op::layer_norm(ones(D), zeros(D), 1e-5));
        b.push(format!("b{blk}.fc1"), Op::linear(dense(&mut rng, HIDDEN, D), Some(small_bias(&mut rng, HIDDEN))));
        b.push(format!("b{blk}.gelu"), Op::Gelu);
        let f = b.push(format!("b{blk}.fc2"), Op::linear(dense(&mut rng, D, HIDDEN), Some(small_bias(&mut rng, D))));
        b.push_from(format!("b{blk}.add2"), Op::Add, vec![mid, f]);
    }
    b.push("flatten", Op::Flatten);
    let head_w = dense(&mut rng, CLASSES, TOKENS * D);
    b.push("head", Op::linear(head_w.clone(), Some(zeros(CLASSES))));
    let draft = b.build(CLASSES)?;

    // Center the logits so the model's own labels are roughly balanced.
    let input = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |stream: u64, n: usize| -> Vec<Tensor> {
        let mut r = stream_rng(seed, stream);
        (0..n)
            .map(|_| Tensor::from_f64(&[TOKENS, D_IN], &(0..TOKENS * D_IN).map(|_| input.sample(&mut r)).collect::<Vec<_>>()).expect("shape"))
            .collect()
    };
    let mut mean_logit = [0.0; CLASSES];
    let calib = draw(1, 256);
    for x in &calib {
        for (m, v) in mean_logit.iter_mut().zip(forward(&draft, x)?.data()) {
            *m += *v as f64 / calib.len() as f64;
        }
    }
    let (mut layers, shape, classes, _) = draft.into_parts();
    let last = layers.len() - 1;
    layers[last].op = Op::linear(head_w, Some(Tensor::from_f64(&[CLASSES], &mean_logit.iter().map(|m| -m).collect::<Vec<_>>())?));
    let graph = Graph::new(layers, shape, classes)?;
    let label = |xs: Vec<Tensor>| -> Result<Dataset> {
        let labels = xs.iter().map(|x| forward(&graph, x).map(|o| o.argmax())).collect::<Result<_>>()?;
        Dataset::new(xs, labels)
    };
    let (train_set, eval_set) = (label(draw(2, 400))?, label(draw(3, 400))?);
    finish(FixtureKind::PlantedVit, seed, graph.clone(), train_set, eval_set, 1.0, irrelevant)
}
