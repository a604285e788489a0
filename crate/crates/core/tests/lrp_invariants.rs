use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprune::exec::forward;
use relprune::graph::{Attention, Graph, GraphBuilder, Op, Pool};
use relprune::lrp::{attribute, propagate_linear, propagate_softmax, CompositeConfig, Rule, SoftmaxHandler};
use relprune::Tensor;

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect::<Vec<_>>()).unwrap()
}

fn top_logit(graph: &Graph, x: &Tensor) -> (usize, f64) {
    let y = forward(graph, x).unwrap();
    let t = y.argmax();
    (t, y.data()[t] as f64)
}

fn bias_free_cnn(seed: u64) -> Graph {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(vec![2, 8, 8]);
    b.push("conv1", Op::conv2d(rand_tensor(&mut r, &[4, 2, 3, 3], 0.5), None, 1, 1));
    b.push("relu1", Op::Relu);
    b.push("pool1", Op::MaxPool2d(Pool { kernel: 2, stride: 2 }));
    b.push("conv2", Op::conv2d(rand_tensor(&mut r, &[6, 4, 3, 3], 0.4), None, 1, 0));
    b.push("relu2", Op::Relu);
    b.push("pool2", Op::AvgPool2d(Pool { kernel: 2, stride: 2 }));
    b.push("flatten", Op::Flatten);
    b.push("fc", Op::linear(rand_tensor(&mut r, &[3, 6], 0.8), None));
    b.build(3).unwrap()
}

#[test]
fn basic_rule_conserves_through_conv_and_pooling() {
    let g = bias_free_cnn(1);
    let basic = CompositeConfig::uniform(Rule::basic(), None, false);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[2, 8, 8], 1.0);
        let (t, f) = top_logit(&g, &x);
        if f <= 1e-3 {
            continue;
        }
        let tr = attribute(&g, &x, t, &basic).unwrap();
        assert_eq!(tr.initial, f);
        for layer in tr.outputs.iter().chain([&tr.input]) {
            assert!((layer.sum() - f).abs() <= 1e-5 * f.abs().max(1.0), "{} vs {f}", layer.sum());
        }
    }
}

#[test]
fn tiny_epsilon_matches_basic() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut b = GraphBuilder::new(vec![10]);
    b.push("fc1", Op::linear(rand_tensor(&mut r, &[12, 10], 0.6), Some(rand_tensor(&mut r, &[12], 0.2))));
    b.push("relu", Op::Relu);
    b.push("fc2", Op::linear(rand_tensor(&mut r, &[4, 12], 0.6), Some(rand_tensor(&mut r, &[4], 0.2))));
    let g = b.build(4).unwrap();
    let basic = CompositeConfig::uniform(Rule::basic(), None, false);
    let eps = CompositeConfig::uniform(Rule::epsilon(1e-12).unwrap(), None, false);
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[10], 1.0);
        let a = attribute(&g, &x, 1, &basic).unwrap().input.to_f64();
        let e = attribute(&g, &x, 1, &eps).unwrap().input.to_f64();
        let scale = a.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
        for (p, q) in a.iter().zip(&e) {
            assert!((p - q).abs() <= 1e-5 * scale);
        }
    }
}

#[test]
fn alpha_beta_conserves_per_layer() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let ab = Rule::ab21();
    for _ in 0..200 {
        let (n, o) = (r.random_range(4..16), r.random_range(1..6));
        let a: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let w: Vec<f64> = (0..n * o).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let rout: Vec<f64> = (0..o).map(|_| r.random::<f64>()).collect();
        // both signed parts must be present for the row to redistribute everything
        let both = (0..o).all(|j| {
            let c: Vec<f64> = (0..n).map(|i| a[i] * w[j * n + i]).collect();
            c.iter().any(|v| *v > 0.0) && c.iter().any(|v| *v < 0.0)
        });
        if !both {
            continue;
        }
        let rin = propagate_linear(&ab, &a, &w, None, &rout).unwrap();
        assert!((rin.iter().sum::<f64>() - rout.iter().sum::<f64>()).abs() < 1e-9);
    }
}

#[test]
fn z_plus_keeps_positive_relevance_positive() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = r.random_range(2..10);
        let a: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let w: Vec<f64> = (0..n * 3).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let rin = propagate_linear(&Rule::z_plus(), &a, &w, None, &[1.0, 0.5, 2.0]).unwrap();
        assert!(rin.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn cp_lrp_sends_nothing_through_softmax() {
    let x = [0.3, -1.2, 2.0, 0.1];
    let s: Vec<f64> = {
        let e: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    };
    assert_eq!(propagate_softmax(SoftmaxHandler::CpLrp, &x, &s, &[1.0, -0.5, 0.25, 3.0], 4), vec![0.0; 4]);
}

/// With the attention matrix held constant, a bias-free attention layer is
/// linear in its input through the value path alone, so the basic rule
/// conserves exactly; any relevance routed to Q or K would break this.
#[test]
fn cp_lrp_attention_conserves_through_values_only() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let d = 8;
    let mut w = |s| Arc::new(rand_tensor(&mut r, &[d, d], s));
    let attn = Attention {
        heads: 2,
        q_weight: w(0.8),
        q_bias: None,
        k_weight: w(0.8),
        k_bias: None,
        v_weight: w(0.5),
        v_bias: None,
        o_weight: w(0.5),
        o_bias: None,
        keep: None,
    };
    let mut b = GraphBuilder::new(vec![4, d]);
    b.push("attn", Op::Attention(attn));
    b.push("flatten", Op::Flatten);
    b.push("fc", Op::linear(rand_tensor(&mut r, &[3, 4 * d], 0.3), None));
    let g = b.build(3).unwrap();
    let cp = CompositeConfig::uniform(Rule::basic(), Some(SoftmaxHandler::CpLrp), false);
    let dtd = CompositeConfig::uniform(Rule::basic(), Some(SoftmaxHandler::AttnlrpDtd), false);
    let mut differs = false;
    for _ in 0..20 {
        let x = rand_tensor(&mut r, &[4, d], 1.0);
        let (t, f) = top_logit(&g, &x);
        let tr = attribute(&g, &x, t, &cp).unwrap();
        assert!((tr.input.sum() - f).abs() <= 1e-5 * f.abs().max(1.0), "{} vs {f}", tr.input.sum());
        let head = tr.head_outputs[0].as_ref().expect("attention records head relevance");
        assert!((head.sum() - f).abs() <= 1e-5 * f.abs().max(1.0));
        differs |= attribute(&g, &x, t, &dtd).unwrap().input != tr.input;
    }
    assert!(differs, "the softmax handler should matter for attention inputs");
}

#[test]
fn rule_constants_are_validated() {
    assert!(Rule::epsilon(0.0).is_err());
    assert!(Rule::alpha_beta(2.0, 0.0).is_err());
    assert!(Rule::gamma(-1.0).is_err());
    assert!(Rule::gamma(0.0).is_ok());
}

#[test]
fn presets_round_trip_through_json() {
    for name in ["yeom", "faithful-cnn", "faithful-vit", "eps-all", "ours-cnn", "ours-vit-heads", "ours-vit-linear"] {
        let c = CompositeConfig::preset(name).unwrap();
        assert_eq!(CompositeConfig::from_json(&c.to_json()).unwrap(), c, "{name}");
    }
    assert!(CompositeConfig::preset("nope").is_err());
}
