use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::channel::{llr, modulate, sigma_from_snr, transmit};

fn small_config(layers: usize, d: usize, heads: usize) -> DiffMptConfig {
    DiffMptConfig {
        num_layers: layers,
        embed_dim: d,
        ffn_dim: 2 * d,
        num_heads: heads,
        init_seed: 11,
        ..DiffMptConfig::default()
    }
}

fn random_llrs(code: &ParityCheckCode, frames: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames * code.n());
    for _ in 0..frames {
        let c = code.sample_codeword(&mut rng);
        let y = transmit(&modulate(&c), sigma, &mut rng);
        out.extend(llr(&y, sigma));
    }
    out
}

#[test]
fn config_validation() {
    assert!(DiffMptConfig::default().validate().is_ok());
    let bad_heads = DiffMptConfig {
        embed_dim: 10,
        num_heads: 4,
        ..DiffMptConfig::default()
    };
    assert!(matches!(bad_heads.validate(), Err(ModelError::InvalidConfig(_))));
    let bad_lambda = DiffMptConfig {
        lambda_diff_init: 1.0,
        ..DiffMptConfig::default()
    };
    assert!(bad_lambda.validate().is_err());
    let zero = DiffMptConfig {
        num_layers: 0,
        ..DiffMptConfig::default()
    };
    assert!(zero.validate().is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = small_config(2, 32, 4);
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"attention_variant\":\"differential\""));
    let back: DiffMptConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: DiffMptConfig = serde_json::from_str(r#"{"num_layers": 2}"#).unwrap();
    assert_eq!(partial.embed_dim, 128);
    assert!(serde_json::from_str::<DiffMptConfig>(r#"{"layers": 2}"#).is_err());
}

#[test]
fn initial_lambda_and_sharing_layout() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 8, 2)).unwrap();
    assert!((model.lambda_diff(0).unwrap() - 0.5).abs() < 1e-15);
    let [a, b] = model.query_weight_ids(1);
    assert_eq!(a, b);

    let unshared = DiffMpt::new(
        &code,
        DiffMptConfig {
            share_half_iterations: false,
            ..small_config(2, 8, 2)
        },
    )
    .unwrap();
    let [a, b] = unshared.query_weight_ids(1);
    assert_ne!(a, b);
    assert!(unshared.params().len() > model.params().len());

    let plain = DiffMpt::new(
        &code,
        DiffMptConfig {
            attention_variant: AttentionVariant::PlainCross,
            ..small_config(2, 8, 2)
        },
    )
    .unwrap();
    assert_eq!(plain.lambda_diff(0), None);
    assert!(plain.params().iter().all(|p| p.decay));
    assert!(!model.params().by_name("layer0.lambda_raw").unwrap().decay);
}

#[test]
fn same_seed_same_params() {
    let code = ParityCheckCode::hamming74();
    let a = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let b = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    assert_eq!(a.params(), b.params());
    let c = DiffMpt::new(
        &code,
        DiffMptConfig {
            init_seed: 12,
            ..small_config(1, 8, 2)
        },
    )
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn embedding_scales_rows() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let w = &model.params().by_name("bit_embed").unwrap().value;
    let wt = &model.params().by_name("syn_embed").unwrap().value;
    let input = DecoderInput {
        batch: 2,
        abs_llr: vec![0.0, 1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 0.0, 2.0, 4.0, 1.0, 2.0, 2.0, 2.0],
        syndrome: vec![1.0, -1.0, 0.0, -2.0, 2.0, 0.0],
        sign: vec![1.0; 14],
    };
    let mut g = Graph::<f64>::new();
    let b = model.bind(&mut g, false);
    let (phi, psi) = model.embed(&mut g, &b, &input).unwrap();
    let phi = g.value(phi);
    let psi = g.value(psi);
    for c in 0..8 {
        assert_eq!(phi.get(0, c), 0.0);
        assert_eq!(phi.get(1, c), w.get(1, c));
        // Second frame doubles the first frame's magnitudes.
        for i in 0..7 {
            assert_eq!(phi.get(7 + i, c), 2.0 * phi.get(i, c));
        }
        assert_eq!(psi.get(0, c), wt.get(0, c));
        assert_eq!(psi.get(1, c), -wt.get(1, c));
        for j in 0..3 {
            assert_eq!(psi.get(3 + j, c), -2.0 * psi.get(j, c));
        }
    }
    let short = DecoderInput {
        batch: 1,
        abs_llr: vec![1.0; 6],
        syndrome: vec![0.0; 3],
        sign: vec![1.0; 6],
    };
    assert!(model.embed(&mut g, &b, &short).is_err());
}

#[test]
fn inputs_are_clipped() {
    let code = ParityCheckCode::hamming74();
    let graph = TannerGraph::from_h(code.h());
    let llrs = [40.0, -30.0, 20.0, 16.0, -15.5, 30.0, 50.0];
    let input = DecoderInput::from_llrs(&graph, &llrs, 15.0).unwrap();
    assert!(input.abs_llr.iter().all(|&v| v <= 15.0));
    assert!(input.syndrome.iter().all(|&v| v.abs() <= 15.0));
    assert_eq!(input.sign, vec![1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
    assert!(DecoderInput::from_llrs(&graph, &llrs[..5], 15.0).is_err());
}

#[test]
fn masked_pairs_get_zero_weight_and_mass_is_one_minus_lambda() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let frames = 5;
    let input = model.prepare(&random_llrs(&code, frames, 0.8, 3)).unwrap();
    let mut g = Graph::<f64>::new();
    let b = model.bind(&mut g, false);
    let out = model.forward_graph(&mut g, &b, &input).unwrap();
    let h = code.h();
    for layer in &out.layers {
        let lambda = g.value(layer.lambda.unwrap()).item();
        for (half, att) in layer.attention.iter().enumerate() {
            for head in &att.heads {
                let masked = g.value(head.masked);
                let combined = g.value(head.combined);
                for r in 0..masked.rows() {
                    let q = r % if half == 0 { 7 } else { 3 };
                    let mut mass = 0.0;
                    for c in 0..masked.cols() {
                        let allowed = if half == 0 { h.get(c, q) } else { h.get(q, c) } == 1;
                        if !allowed {
                            assert_eq!(masked.get(r, c), 0.0);
                        }
                        mass += combined.get(r, c);
                    }
                    let first: f64 = masked.row(r).iter().sum();
                    assert!((first - 1.0).abs() <= 1e-10);
                    assert!((mass - (1.0 - lambda)).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn zero_inputs_stay_finite() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 8, 2)).unwrap();
    let out = model.infer::<f64>(&[0.0; 14]).unwrap();
    assert_eq!(out.len(), 14);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn untrained_outputs_finite_on_many_frames() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let sigma = sigma_from_snr(2.0, code.rate()).unwrap();
    let out = model.infer::<f64>(&random_llrs(&code, 1000, sigma, 9)).unwrap();
    assert_eq!(out.len(), 7000);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn batched_matches_single_frame() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let llrs = random_llrs(&code, 4, 0.7, 21);
    let batched = model.infer::<f64>(&llrs).unwrap();
    for (f, frame) in llrs.chunks(7).enumerate() {
        let single = model.infer::<f64>(frame).unwrap();
        for i in 0..7 {
            assert!((single[i] - batched[f * 7 + i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_takes_received_values() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let y = [0.9, -1.1, 0.3, 1.2, -0.2, 0.8, 1.0];
    let sigma = 0.7;
    let a = model.forward(&y, sigma).unwrap();
    let b = model.infer::<f64>(&llr(&y, sigma)).unwrap();
    assert_eq!(a, b);
    assert!(model.forward(&y[..6], sigma).is_err());
}

#[test]
fn sign_flip_equivariance_for_even_degree_checks() {
    // Every Hamming(7,4) check has degree 4, so negating y leaves the soft
    // syndrome unchanged and only the output sign flips.
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let llrs = random_llrs(&code, 50, 0.8, 4);
    let neg: Vec<f64> = llrs.iter().map(|v| -v).collect();
    let a = model.infer::<f64>(&llrs).unwrap();
    let b = model.infer::<f64>(&neg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn codeword_independence_of_noise_prediction() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let words = code.codewords();
    for _ in 0..20 {
        let z: Vec<f64> = transmit(&[1.0; 7], 0.8, &mut rng);
        let mut reference: Option<Vec<f64>> = None;
        for w in &words {
            let x = modulate(w);
            let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a * b).collect();
            let l = llr(&y, 0.8);
            let c = model.infer::<f64>(&l).unwrap();
            let zhat: Vec<f64> = c.iter().zip(&y).map(|(c, y)| c * sgn(*y)).collect();
            match &reference {
                None => reference = Some(zhat),
                Some(r) => assert_eq!(r, &zhat),
            }
        }
    }
}

#[test]
fn combiner_identity_configuration_returns_bit_scalars() {
    let code = ParityCheckCode::hamming74();
    let mut model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let n = 7;
    let w = &mut model.params_mut().by_name_mut("out.combiner.w").unwrap().value;
    for r in n..n + 3 {
        for c in 0..n {
            w.set(r, c, 0.0);
        }
    }
    let mut g = Graph::<f64>::new();
    let b = model.bind(&mut g, false);
    let phi_s = g.constant(Matrix::from_vec(2, 7, (0..14).map(|v| v as f64 - 3.5).collect()));
    let psi_s = g.constant(Matrix::from_vec(2, 3, vec![5.0, -2.0, 9.0, 1.0, 1.0, 1.0]));
    let (_, z) = model.combine(&mut g, &b, phi_s, psi_s).unwrap();
    assert_eq!(g.value(z), g.value(phi_s));
}

#[test]
fn combiner_masked_entries_get_zero_gradient() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let input = model.prepare(&random_llrs(&code, 3, 0.8, 5)).unwrap();
    let mut g = Graph::<f64>::new();
    let b = model.bind(&mut g, true);
    let out = model.forward_graph(&mut g, &b, &input).unwrap();
    let loss = g.bce_with_logits(out.c_soft, &[0.0; 21]).unwrap();
    g.backward(loss).unwrap();
    let idx = model.params().index_of("out.combiner.w").unwrap();
    let grad = g.grad(b.var(idx)).unwrap();
    let mask = model.combiner_mask();
    let mut live = 0;
    for r in 0..10 {
        for c in 0..7 {
            if mask.get(r, c) == 0.0 {
                assert_eq!(grad.get(r, c), 0.0);
            } else if grad.get(r, c) != 0.0 {
                live += 1;
            }
        }
    }
    assert!(live > 0);
}

#[test]
fn check_scalar_reaches_only_its_bits_before_final_dense() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let h = code.h();
    for i in 0..7 {
        let mut g = Graph::<f64>::new();
        let b = model.bind(&mut g, false);
        let phi_s = g.constant(Matrix::from_vec(1, 7, vec![0.3; 7]));
        let psi_s = g.param(Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let (combined, _) = model.combine(&mut g, &b, phi_s, psi_s).unwrap();
        let mut pick = Matrix::zeros(1, 7);
        pick.set(0, i, 1.0);
        let pick = g.constant(pick);
        let sel = g.mul(combined, pick).unwrap();
        let root = g.sum(sel);
        g.backward(root).unwrap();
        let grad = g.grad(psi_s).unwrap();
        for j in 0..3 {
            if h.get(j, i) == 0 {
                assert_eq!(grad.get(0, j), 0.0, "bit {i} check {j}");
            } else {
                assert_ne!(grad.get(0, j), 0.0, "bit {i} check {j}");
            }
        }
    }
}

#[test]
fn shared_query_weight_collects_gradient_from_both_halves() {
    let code = ParityCheckCode::hamming74();
    let shared = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let mut split = DiffMpt::new(
        &code,
        DiffMptConfig {
            share_half_iterations: false,
            ..small_config(1, 8, 2)
        },
    )
    .unwrap();
    // Give the unshared model identical weights in both halves.
    for p in split.params_mut().iter_mut() {
        let src = p.name.replace(".half0", "").replace(".half1", "");
        p.value = shared.params().by_name(&src).unwrap().value.clone();
    }
    let input = shared.prepare(&random_llrs(&code, 2, 0.8, 8)).unwrap();
    let run = |model: &DiffMpt| {
        let mut g = Graph::<f64>::new();
        let b = model.bind(&mut g, true);
        let out = model.forward_graph(&mut g, &b, &input).unwrap();
        let root = g.bce_with_logits(out.c_soft, &[0.0; 14]).unwrap();
        g.backward(root).unwrap();
        let ids = model.query_weight_ids(0);
        (
            g.value(out.c_soft).clone(),
            g.grad(b.var(ids[0])).unwrap(),
            g.grad(b.var(ids[1])).unwrap(),
        )
    };
    let (c_shared, g_shared, _) = run(&shared);
    let (c_split, g0, g1) = run(&split);
    assert_eq!(c_shared, c_split);
    assert!(g0.data().iter().any(|&v| v != 0.0));
    assert!(g1.data().iter().any(|&v| v != 0.0));
    for k in 0..g_shared.len() {
        let sum = g0.data()[k] + g1.data()[k];
        assert!((g_shared.data()[k] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
    }
}

#[test]
fn perturbing_shared_query_weight_moves_both_halves() {
    let code = ParityCheckCode::hamming74();
    let base = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let input = base.prepare(&random_llrs(&code, 1, 0.8, 2)).unwrap();
    let layer_out = |model: &DiffMpt| {
        let mut g = Graph::<f64>::new();
        let b = model.bind(&mut g, false);
        let (phi, psi) = model.embed(&mut g, &b, &input).unwrap();
        let out = model.decoder_layer(&mut g, &b, 0, phi, psi, 1).unwrap();
        let att1 = g.value(out.attention[1].out).clone();
        (g.value(out.phi).clone(), att1)
    };
    let (phi0, att0) = layer_out(&base);
    let mut bumped = base.clone();
    let id = bumped.query_weight_ids(0)[0];
    bumped.params_mut().iter_mut().nth(id).unwrap().value.data_mut()[0] += 1e-3;
    let (phi1, att1) = layer_out(&bumped);
    assert!(phi0.data().iter().zip(phi1.data()).any(|(a, b)| a != b));
    assert!(att0.data().iter().zip(att1.data()).any(|(a, b)| a != b));
}

#[test]
fn end_to_end_gradient_check_spc() {
    let code = ParityCheckCode::single_parity_check(3).unwrap();
    let model = DiffMpt::new(&code, small_config(1, 8, 1)).unwrap();
    let input = model.prepare(&random_llrs(&code, 2, 0.8, 31)).unwrap();
    let point: Vec<Matrix<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let targets = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
    let report = grad_check(
        |g, vars| {
            let b = Bound::new(vars.to_vec());
            let out = model.forward_graph(g, &b, &input).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => AutodiffError::InvalidArgument(other.to_string()),
            })?;
            g.bce_with_logits(out.c_soft, &targets)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn lambda_gradient_check() {
    let code = ParityCheckCode::single_parity_check(3).unwrap();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let input = model.prepare(&random_llrs(&code, 2, 0.8, 13)).unwrap();
    let lam = model.params().index_of("layer0.lambda_raw").unwrap();
    let report = grad_check(
        |g, vars| {
            let mut all: Vec<Var> = Vec::new();
            for (i, p) in model.params().iter().enumerate() {
                all.push(if i == lam { vars[0] } else { g.constant(p.value.clone()) });
            }
            let b = Bound::new(all);
            let out = model
                .forward_graph(g, &b, &input)
                .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))?;
            Ok(g.mean(out.c_soft))
        },
        &[Matrix::scalar(0.3)],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact_in_f32() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(2, 16, 4)).unwrap();
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    assert_eq!(&bytes[..5], b"DMPT1");
    let loaded = DiffMpt::read_checkpoint(bytes.as_slice(), &code).unwrap();
    assert_eq!(loaded.config().num_layers, 2);
    let llrs = random_llrs(&code, 20, 0.8, 6);
    let a = model.infer::<f32>(&llrs).unwrap();
    let b = loaded.infer::<f32>(&llrs).unwrap();
    assert_eq!(a, b);
    // A second save of the loaded model reproduces the file byte for byte.
    let mut again = Vec::new();
    loaded.write_checkpoint(&mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn manifest_lists_arrays_without_payload() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    let m = read_manifest(std::io::Cursor::new(&bytes)).unwrap();
    assert_eq!((m.n, m.k, m.layers, m.embed_dim, m.ffn_dim, m.heads), (7, 4, 1, 8, 16, 2));
    assert_eq!(m.flags, 1);
    assert_eq!(m.arrays.len(), model.params().len());
    assert_eq!(m.arrays[0].name, "bit_embed");
    assert_eq!(m.arrays[0].dims, vec![7, 8]);
    let total: usize = m.arrays.iter().map(ManifestEntry::element_count).sum();
    assert_eq!(total, model.params().scalar_count());
}

#[test]
fn checkpoint_header_bytes() {
    let code = ParityCheckCode::single_parity_check(3).unwrap();
    let model = DiffMpt::new(
        &code,
        DiffMptConfig {
            attention_variant: AttentionVariant::PlainCross,
            share_half_iterations: false,
            ..small_config(1, 4, 1)
        },
    )
    .unwrap();
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    let words: Vec<u32> = bytes[5..37]
        .chunks(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    assert_eq!(words, vec![3, 2, 1, 4, 8, 1, 2, model.params().len() as u32]);
    // First array: "bit_embed", rank 2, dims 3x4.
    assert_eq!(u32::from_le_bytes(bytes[37..41].try_into().unwrap()), 9);
    assert_eq!(&bytes[41..50], b"bit_embed");
    assert_eq!(u32::from_le_bytes(bytes[50..54].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[54..58].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[58..62].try_into().unwrap()), 4);
    let first = f32::from_le_bytes(bytes[62..66].try_into().unwrap());
    assert_eq!(first, model.params().get(0).value.get(0, 0) as f32);
}

#[test]
fn checkpoint_errors() {
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();

    let other = ParityCheckCode::single_parity_check(3).unwrap();
    assert!(matches!(
        DiffMpt::read_checkpoint(bytes.as_slice(), &other),
        Err(ModelError::CodeMismatch { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        DiffMpt::read_checkpoint(bad.as_slice(), &code),
        Err(ModelError::Format(_))
    ));
    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(
        DiffMpt::read_checkpoint(truncated, &code),
        Err(ModelError::Format(_))
    ));
}

#[test]
fn save_and_load_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dmpt");
    let code = ParityCheckCode::hamming74();
    let model = DiffMpt::new(&code, small_config(1, 8, 2)).unwrap();
    model.save(&path).unwrap();
    let loaded = DiffMpt::load(&path, &code).unwrap();
    assert_eq!(loaded.params().len(), model.params().len());
    assert!(matches!(
        DiffMpt::load(dir.path().join("missing"), &code),
        Err(ModelError::Io(_))
    ));
}

#[test]
fn variants_run() {
    let code = ParityCheckCode::hamming74();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let llrs: Vec<f64> = (0..21).map(|_| rng.gen_range(-5.0..5.0)).collect();
    for (variant, share) in [
        (AttentionVariant::PlainCross, true),
        (AttentionVariant::Differential, false),
        (AttentionVariant::PlainCross, false),
    ] {
        let model = DiffMpt::new(
            &code,
            DiffMptConfig {
                attention_variant: variant,
                share_half_iterations: share,
                ..small_config(2, 8, 2)
            },
        )
        .unwrap();
        let out = model.infer::<f64>(&llrs).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
