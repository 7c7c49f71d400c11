mod common;

use common::*;
use vptq::hessian::{HessianAccumulator, HessianData};
use vptq::packing::to_bytes;
use vptq::quantizer::*;
use vptq::tensor::save_npy;
use vptq::TensorF32;

/// Three linear layers (16→32→32→8) with ReLU, Hessians from the inputs each
/// layer actually sees.
fn toy_mlp(seed: u64) -> Vec<(String, TensorF32, HessianData)> {
    let mut r = rng(seed);
    let dims = [16, 32, 32, 8];
    let samples = 128;
    let mut x: Vec<f64> = (0..dims[0] * samples).map(|_| gauss(&mut r)).collect();
    let mut layers = Vec::new();
    for l in 0..3 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = random_matrix(&mut r, n_out, n_in);
        let batch = TensorF32::matrix(n_in, samples, x.iter().map(|&v| v as f32).collect()).unwrap();
        let mut acc = HessianAccumulator::new(n_in);
        acc.accumulate(&batch).unwrap();
        let hd = acc.finalize(0.01).unwrap();
        let mut next = vec![0.0; n_out * samples];
        for o in 0..n_out {
            for s in 0..samples {
                let z: f64 = (0..n_in).map(|i| w.at(o, i) as f64 * x[i * samples + s]).sum();
                next[o * samples + s] = z.max(0.0) / (n_in as f64).sqrt();
            }
        }
        x = next;
        layers.push((format!("layer{l}"), w, hd));
    }
    layers
}

fn cfg(k1: usize) -> QuantConfig {
    QuantConfig {
        v1: 2,
        k1,
        ..QuantConfig::default()
    }
}

#[test]
fn larger_codebooks_do_not_raise_proxy_loss() {
    for seed in 0..3 {
        let layers = toy_mlp(seed);
        let mut previous = vec![f64::INFINITY; layers.len()];
        for k1 in [4, 16, 64] {
            let out = quantize_layers(&layers, &cfg(k1), 2).unwrap();
            for (i, o) in out.iter().enumerate() {
                let loss = o.result.as_ref().unwrap().stats.proxy_loss;
                assert!(loss <= previous[i], "seed {seed} {} k1={k1}: {loss} > {}", o.name, previous[i]);
                previous[i] = loss;
            }
        }
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let layers = toy_mlp(9);
    let one = quantize_layers(&layers, &cfg(16), 1).unwrap();
    let four = quantize_layers(&layers, &cfg(16), 4).unwrap();
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a.name, b.name);
        let (a, b) = (a.result.as_ref().unwrap(), b.result.as_ref().unwrap());
        assert_eq!(to_bytes(a).unwrap(), to_bytes(b).unwrap());
    }
}

#[test]
fn manifest_runs_in_order_and_isolates_failures() {
    let layers = toy_mlp(4);
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for (name, w, hd) in &layers {
        save_npy(w, dir.path().join(format!("{name}.w.npy"))).unwrap();
        save_npy(&hd.to_tensor(), dir.path().join(format!("{name}.h.npy"))).unwrap();
        entries.push(serde_json::json!({
            "name": name,
            "weight": format!("{name}.w.npy"),
            "hessian": format!("{name}.h.npy"),
        }));
    }
    entries.insert(1, serde_json::json!({"name": "missing", "weight": "nope.npy", "hessian": "nope.npy"}));
    let manifest_path = dir.path().join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string(&entries).unwrap()).unwrap();

    let manifest = read_manifest(&manifest_path).unwrap();
    let out = quantize_model(&manifest, &cfg(16), 3).unwrap();
    let names: Vec<&str> = out.iter().map(|o| o.name.as_str()).collect();
    assert_eq!(names, ["layer0", "missing", "layer1", "layer2"]);
    assert!(out[1].result.is_err());

    // a single entry equals a direct call; the Hessian went through f32 on disk
    let direct_hd = HessianData::from_tensor(&layers[0].2.to_tensor()).unwrap();
    let direct = quantize_matrix(&layers[0].1, &direct_hd, &cfg(16)).unwrap();
    assert_eq!(out[0].result.as_ref().unwrap(), &direct);
}
