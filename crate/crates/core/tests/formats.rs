use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprune::dataset::Dataset;
use relprune::exec::forward;
use relprune::fixtures::{make_fixture, FixtureKind};
use relprune::graph::{apply_mask, ComponentKind, PruneMask};
use relprune::nnix::{load_model, save_model};
use relprune::{Error, Tensor};
use serde_json::json;

fn nnix_file(header: serde_json::Value, data: &[f32]) -> Vec<u8> {
    let h = serde_json::to_vec(&header).unwrap();
    let mut out = b"NNIX1\n".to_vec();
    out.extend((h.len() as u64).to_le_bytes());
    out.extend(h);
    for v in data {
        out.extend(v.to_le_bytes());
    }
    out
}

#[test]
fn fixtures_round_trip_bit_exactly() {
    for kind in FixtureKind::ALL {
        let f = make_fixture(kind, 3).unwrap();
        let bytes = save_model(&f.graph).unwrap();
        let g = load_model(&bytes).unwrap();
        assert_eq!(g, f.graph, "{kind}");
        assert_eq!(save_model(&g).unwrap(), bytes);
        for x in f.eval.samples().iter().take(8) {
            assert_eq!(forward(&g, x).unwrap(), forward(&f.graph, x).unwrap());
        }
    }
}

#[test]
fn keep_masks_survive_saving() {
    let f = make_fixture(FixtureKind::PlantedCnn, 0).unwrap();
    let masked = apply_mask(&f.graph, &PruneMask::dropping(ComponentKind::ConvFilter, 32, [0, 5, 17])).unwrap();
    assert_eq!(load_model(&save_model(&masked).unwrap()).unwrap(), masked);
}

/// conv(1→2, 3×3, no padding) on a 3×3 input followed by batchnorm, checked
/// against the unfolded computation.
#[test]
fn batchnorm_is_folded_into_preceding_conv() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let w: Vec<f32> = (0..18).map(|_| r.random::<f32>() - 0.5).collect();
    let b = [0.1f32, -0.2];
    let (gamma, beta, mean, var) = ([1.5f32, 0.5], [0.3f32, -0.1], [0.2f32, -0.4], [0.8f32, 2.0]);
    let mut data = w.clone();
    for t in [&b, &gamma, &beta, &mean, &var] {
        data.extend_from_slice(t);
    }
    let t = |name: &str, shape: Vec<usize>, offset: usize, len: usize| json!({"name": name, "shape": shape, "offset": offset, "len": len});
    let header = json!({
        "version": 1,
        "input_shape": [1, 3, 3],
        "num_classes": 2,
        "layers": [
            {"id": "conv", "kind": "conv2d", "attrs": {"stride": 1, "padding": 0},
             "tensors": [t("weight", vec![2, 1, 3, 3], 0, 18), t("bias", vec![2], 72, 2)]},
            {"id": "bn", "kind": "batchnorm", "attrs": {"eps": 1e-5},
             "tensors": [t("weight", vec![2], 80, 2), t("bias", vec![2], 88, 2),
                         t("running_mean", vec![2], 96, 2), t("running_var", vec![2], 104, 2)]},
            {"id": "flatten", "kind": "flatten"}
        ],
        "edges": [["input", "conv"], ["conv", "bn"], ["bn", "flatten"]]
    });
    let g = load_model(&nnix_file(header, &data)).unwrap();
    assert_eq!(g.len(), 2, "batchnorm leaves no layer of its own");
    for _ in 0..10 {
        let x: Vec<f32> = (0..9).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
        let y = forward(&g, &Tensor::new(vec![1, 3, 3], x.clone()).unwrap()).unwrap();
        for c in 0..2 {
            let z: f64 = (0..9).map(|k| w[c * 9 + k] as f64 * x[k] as f64).sum::<f64>() + b[c] as f64;
            let want = (z - mean[c] as f64) / (var[c] as f64 + 1e-5).sqrt() * gamma[c] as f64 + beta[c] as f64;
            assert!((y.data()[c] as f64 - want).abs() < 1e-5, "{} vs {want}", y.data()[c]);
        }
    }
}

#[test]
fn malformed_models_are_rejected() {
    let f = make_fixture(FixtureKind::TrainedMlp, 0).unwrap();
    let good = save_model(&f.graph).unwrap();
    let is_format = |r: relprune::Result<_>| matches!(r, Err(Error::Format(_)));
    assert!(is_format(load_model(&good[..good.len() - 4])));
    assert!(is_format(load_model(&good[..10])));
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(is_format(load_model(&bad_magic)));

    let header = |kind: &str, len: usize| {
        json!({"version": 1, "input_shape": [2], "num_classes": 2,
               "layers": [{"id": "fc", "kind": kind, "tensors": [{"name": "weight", "shape": [2, 2], "offset": 0, "len": len}]}],
               "edges": [["input", "fc"]]})
    };
    assert!(load_model(&nnix_file(header("linear", 4), &[1.0, 0.0, 0.0, 1.0])).is_ok());
    assert!(is_format(load_model(&nnix_file(header("linear", 3), &[1.0, 0.0, 0.0, 1.0]))));
    assert!(is_format(load_model(&nnix_file(header("mystery", 4), &[1.0, 0.0, 0.0, 1.0]))));
    assert!(is_format(load_model(&nnix_file(header("linear", 4), &[1.0, f32::NAN, 0.0, 1.0]))));
    assert!(is_format(load_model(&nnix_file(header("linear", 4), &[1.0, 0.0]))));
}

#[test]
fn datasets_round_trip_and_reject_truncation() {
    let f = make_fixture(FixtureKind::PlantedCnn, 1).unwrap();
    let bytes = f.eval.to_dset_bytes();
    let back = Dataset::from_dset_bytes(&bytes).unwrap();
    assert_eq!(back.samples(), f.eval.samples());
    assert_eq!(back.labels(), f.eval.labels());
    assert!(Dataset::from_dset_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Dataset::from_dset_bytes(b"DSET0").is_err());
}

#[test]
fn fixture_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = make_fixture(FixtureKind::PlantedVit, 2).unwrap();
    f.write(dir.path()).unwrap();
    let back = relprune::fixtures::Fixture::read(dir.path()).unwrap();
    assert_eq!(back.graph, f.graph);
    assert_eq!(back.manifest, f.manifest);
}
