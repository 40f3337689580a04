//! Reference-computation and gradient-integrity checks for the backbone.
//!
//! The reference forward below is an independent straight-line f64
//! implementation (plain nested loops, no tape) used as the oracle for a
//! depth-1 single-head configuration.

use forenvit::backbone::{Backbone, TapSpec, ViTConfig};
use forenvit::numerics::{Mode, Rng, Scalar, Tape, Tensor};

fn get64<E: Scalar>(bb: &Backbone<E>, name: &str) -> Vec<f64> {
    bb.params().get(name).unwrap().to_f64_vec()
}

/// Straight-line reference forward for depth-1, one head, no registers.
/// Returns (final tokens after final norm, pre-norm tokens, attention).
fn reference_forward(bb: &Backbone<f64>, image: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = bb.config().clone();
    assert_eq!(cfg.depth, 1);
    assert_eq!(cfg.heads, 1);
    assert_eq!(cfg.registers, 0);
    assert_eq!(cfg.channels, 1);
    let (p, g, d) = (cfg.patch_size, cfg.grid(), cfg.width);
    let np = cfg.num_patches();
    let t = cfg.tokens();
    let hw = cfg.image_size;
    let pd = cfg.patch_dim();

    let proj_w = get64(bb, "patch/proj_w");
    let proj_b = get64(bb, "patch/proj_b");
    let pos = get64(bb, "patch/pos");
    let cls = get64(bb, "token/cls");

    // patch extraction + projection + position embeddings
    let mut x = vec![0.0f64; t * d];
    x[..d].copy_from_slice(&cls);
    for gy in 0..g {
        for gx in 0..g {
            let row = gy * g + gx;
            let mut pixels = Vec::with_capacity(pd);
            for dy in 0..p {
                for dx in 0..p {
                    pixels.push(image[(gy * p + dy) * hw + gx * p + dx]);
                }
            }
            for j in 0..d {
                let mut acc = proj_b[j];
                for (l, &v) in pixels.iter().enumerate() {
                    acc += v * proj_w[l * d + j];
                }
                x[(1 + row) * d + j] = acc + pos[row * d + j];
            }
        }
    }

    let ln = |x: &[f64], gv: &[f64], bv: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, &v)| gv[j] * (v - mean) * rstd + bv[j])
            .collect()
    };

    // block 1
    let ln1_g = get64(bb, "block01/ln1_g");
    let ln1_b = get64(bb, "block01/ln1_b");
    let qkv_w = get64(bb, "block01/qkv_w");
    let qkv_b = get64(bb, "block01/qkv_b");
    let attn_w = get64(bb, "block01/attn_w");
    let attn_b = get64(bb, "block01/attn_b");

    let mut qkv = vec![0.0f64; t * 3 * d];
    for r in 0..t {
        let h1 = ln(&x[r * d..(r + 1) * d], &ln1_g, &ln1_b);
        for j in 0..3 * d {
            let mut acc = qkv_b[j];
            for l in 0..d {
                acc += h1[l] * qkv_w[l * 3 * d + j];
            }
            qkv[r * 3 * d + j] = acc;
        }
    }
    // single-head attention
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0f64; t * t];
    let mut att_out = vec![0.0f64; t * d];
    for t1 in 0..t {
        let mut scores = vec![0.0f64; t];
        for t2 in 0..t {
            let mut acc = 0.0;
            for j in 0..d {
                acc += qkv[t1 * 3 * d + j] * qkv[t2 * 3 * d + d + j];
            }
            scores[t2] = acc * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for t2 in 0..t {
            attn[t1 * t + t2] = exps[t2] / sum;
        }
        for j in 0..d {
            let mut acc = 0.0;
            for t2 in 0..t {
                acc += attn[t1 * t + t2] * qkv[t2 * 3 * d + 2 * d + j];
            }
            att_out[t1 * d + j] = acc;
        }
    }
    // attention projection + residual
    for r in 0..t {
        let row: Vec<f64> = (0..d)
            .map(|j| {
                let mut acc = attn_b[j];
                for l in 0..d {
                    acc += att_out[r * d + l] * attn_w[l * d + j];
                }
                acc
            })
            .collect();
        for j in 0..d {
            x[r * d + j] += row[j];
        }
    }
    // MLP + residual
    let ln2_g = get64(bb, "block01/ln2_g");
    let ln2_b = get64(bb, "block01/ln2_b");
    let mlp1_w = get64(bb, "block01/mlp1_w");
    let mlp1_b = get64(bb, "block01/mlp1_b");
    let mlp2_w = get64(bb, "block01/mlp2_w");
    let mlp2_b = get64(bb, "block01/mlp2_b");
    let m = cfg.mlp_dim();
    for r in 0..t {
        let h2 = ln(&x[r * d..(r + 1) * d], &ln2_g, &ln2_b);
        let mut hidden = vec![0.0f64; m];
        for j in 0..m {
            let mut acc = mlp1_b[j];
            for l in 0..d {
                acc += h2[l] * mlp1_w[l * m + j];
            }
            // gelu, tanh form
            let u = 0.7978845608028654 * (acc + 0.044715 * acc * acc * acc);
            hidden[j] = 0.5 * acc * (1.0 + u.tanh());
        }
        for j in 0..d {
            let mut acc = mlp2_b[j];
            for l in 0..m {
                acc += hidden[l] * mlp2_w[l * d + j];
            }
            x[r * d + j] += acc;
        }
    }
    let pre_norm = x.clone();
    let fin_g = get64(bb, "final_norm/g");
    let fin_b = get64(bb, "final_norm/b");
    let mut final_tokens = vec![0.0f64; t * d];
    for r in 0..t {
        let row = ln(&x[r * d..(r + 1) * d], &fin_g, &fin_b);
        final_tokens[r * d..(r + 1) * d].copy_from_slice(&row);
    }
    (final_tokens, pre_norm, attn)
}

#[test]
fn depth_one_forward_matches_reference_computation() {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 1,
        width: 4,
        heads: 1,
        registers: 0,
        mlp_ratio: 2.0,
        dropout_rate: 0.0,
    };
    let bb = Backbone::<f64>::init(cfg, &Rng::seeded(31)).unwrap();
    let mut rng = Rng::seeded(77);
    let image: Vec<f64> = (0..64).map(|_| rng.unit_f64()).collect();
    let img = Tensor::<f64>::new(vec![1, 8, 8], image.clone()).unwrap();

    let mut tape = Tape::new();
    let fwd = bb
        .forward(&mut tape, &[img], &TapSpec::of([1]), Mode::Eval, &mut rng)
        .unwrap();
    let got_final = tape.value(fwd.tokens).to_f64_vec();
    let got_pre = tape.value(fwd.pre_norm_tokens).to_f64_vec();
    let got_attn: Vec<f64> = fwd.attention[0].weights.iter().map(|v| v.to_f64()).collect();

    let (want_final, want_pre, want_attn) = reference_forward(&bb, &image);
    for (a, b) in got_final.iter().zip(&want_final) {
        assert!((a - b).abs() < 1e-9, "final {a} vs {b}");
    }
    for (a, b) in got_pre.iter().zip(&want_pre) {
        assert!((a - b).abs() < 1e-9, "pre-norm {a} vs {b}");
    }
    assert_eq!(got_attn.len(), want_attn.len());
    for (a, b) in got_attn.iter().zip(&want_attn) {
        assert!((a - b).abs() < 1e-9, "attention {a} vs {b}");
    }
    // the tap of the final block is the pre-norm output, bitwise
    assert_eq!(fwd.taps[0].0, 1);
    assert!(tape
        .value(fwd.taps[0].1)
        .bit_eq(tape.value(fwd.pre_norm_tokens)));
}

#[test]
fn attention_rows_sum_to_one_for_every_head_and_input() {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        width: 8,
        heads: 2,
        registers: 2,
        mlp_ratio: 2.0,
        dropout_rate: 0.0,
    };
    let bb = Backbone::<f32>::init(cfg, &Rng::seeded(5)).unwrap();
    let mut rng = Rng::seeded(6);
    for trial in 0..10 {
        let image: Vec<f32> = (0..64).map(|_| rng.unit_f64() as f32).collect();
        let img = Tensor::<f32>::new(vec![1, 8, 8], image).unwrap();
        let mut tape = Tape::new();
        let fwd = bb
            .forward(&mut tape, &[img], &TapSpec::none(), Mode::Eval, &mut rng)
            .unwrap();
        let rec = &fwd.attention[0];
        for h in 0..rec.heads {
            for q in 0..rec.tokens {
                let s: f64 = rec.row(h, q).iter().map(|v| v.to_f64()).sum();
                assert!((s - 1.0).abs() < 1e-5, "trial {trial} head {h} row {q}: {s}");
                assert!(rec.row(h, q).iter().all(|v| v.to_f64() >= 0.0));
            }
        }
    }
}

#[test]
fn duplicating_a_batch_entry_reproduces_per_sample_outputs() {
    let bb = Backbone::<f32>::init(ViTConfig::default(), &Rng::seeded(8)).unwrap();
    let mut rng = Rng::seeded(9);
    let image: Vec<f32> = (0..784).map(|_| rng.unit_f64() as f32).collect();
    let img = Tensor::<f32>::new(vec![1, 28, 28], image).unwrap();

    let mut tape1 = Tape::new();
    let single = bb
        .forward(&mut tape1, &[img.clone()], &TapSpec::none(), Mode::Eval, &mut rng)
        .unwrap();
    let mut tape2 = Tape::new();
    let double = bb
        .forward(
            &mut tape2,
            &[img.clone(), img],
            &TapSpec::none(),
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
    let one = tape1.value(single.tokens);
    let two = tape2.value(double.tokens);
    let n = one.numel();
    for s in 0..2 {
        for j in 0..n {
            assert_eq!(
                one.data()[j].to_bits(),
                two.data()[s * n + j].to_bits(),
                "sample {s} element {j}"
            );
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let bb = Backbone::<f32>::init(ViTConfig::default(), &Rng::seeded(10)).unwrap();
    let mut rng = Rng::seeded(11);
    let image: Vec<f32> = (0..784).map(|_| rng.unit_f64() as f32).collect();
    let img = Tensor::<f32>::new(vec![1, 28, 28], image).unwrap();
    let run = |bb: &Backbone<f32>| {
        let mut tape = Tape::new();
        let mut rng = Rng::seeded(0);
        let fwd = bb
            .forward(&mut tape, &[img.clone()], &TapSpec::none(), Mode::Eval, &mut rng)
            .unwrap();
        tape.value(fwd.tokens).clone()
    };
    assert!(run(&bb).bit_eq(&run(&bb)));
}

/// Every parameter gradient of a small two-block ViT with a binary head
/// matches central finite differences at f64 check precision.
#[test]
fn two_block_vit_gradients_match_finite_differences() {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        width: 8,
        heads: 2,
        registers: 2,
        mlp_ratio: 2.0,
        dropout_rate: 0.0,
    };
    let bb = Backbone::<f64>::init(cfg.clone(), &Rng::seeded(41)).unwrap();
    let mut rng = Rng::seeded(42);
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| {
            let px: Vec<f64> = (0..64).map(|_| rng.unit_f64()).collect();
            Tensor::new(vec![1, 8, 8], px).unwrap()
        })
        .collect();
    let labels = [1u8, 0u8];
    let head_w = {
        let data: Vec<f64> = (0..cfg.width).map(|_| rng.normal_f64() * 0.1).collect();
        Tensor::<f64>::new(vec![cfg.width, 1], data).unwrap().with_trainable(true)
    };
    let head_b = Tensor::<f64>::zeros(vec![1]).with_trainable(true);

    let loss_of = |bb: &Backbone<f64>, hw: &Tensor<f64>, hb: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut drop_rng = Rng::seeded(0);
        let fwd = bb
            .forward(&mut tape, &images, &TapSpec::none(), Mode::Eval, &mut drop_rng)
            .unwrap();
        let t = bb.config().tokens();
        let cls_rows: Vec<usize> = (0..2).map(|b| b * t).collect();
        let cls = tape.gather_rows(fwd.pre_norm_tokens, cls_rows).unwrap();
        let wv = tape.param("head/w", hw);
        let bv = tape.param("head/b", hb);
        let logits = tape.linear(cls, wv, bv).unwrap();
        let loss = tape.bce_mean(logits, &labels).unwrap();
        tape.scalar_value(loss)
    };

    // analytic gradients
    let (grads, base_names) = {
        let mut tape = Tape::new();
        let mut drop_rng = Rng::seeded(0);
        let fwd = bb
            .forward(&mut tape, &images, &TapSpec::none(), Mode::Eval, &mut drop_rng)
            .unwrap();
        let t = bb.config().tokens();
        let cls_rows: Vec<usize> = (0..2).map(|b| b * t).collect();
        let cls = tape.gather_rows(fwd.pre_norm_tokens, cls_rows).unwrap();
        let wv = tape.param("head/w", &head_w);
        let bv = tape.param("head/b", &head_b);
        let logits = tape.linear(cls, wv, bv).unwrap();
        let loss = tape.bce_mean(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let names: Vec<String> = bb.params().names().map(|s| s.to_string()).collect();
        (grads, names)
    };

    let h = 1e-5;
    let mut checked = 0usize;
    for name in base_names.iter().chain(["head/w".to_string(), "head/b".to_string()].iter()) {
        let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
        let n = g.numel();
        // spot-check a few entries per parameter to keep runtime sane
        let stride = (n / 5).max(1);
        for j in (0..n).step_by(stride) {
            let perturb = |delta: f64| -> f64 {
                let mut bb2 = bb.clone();
                let mut hw2 = head_w.clone();
                let mut hb2 = head_b.clone();
                match name.as_str() {
                    "head/w" => hw2.data_mut()[j] += delta,
                    "head/b" => hb2.data_mut()[j] += delta,
                    _ => bb2.params_mut().get_mut(name).unwrap().data_mut()[j] += delta,
                }
                loss_of(&bb2, &hw2, &hb2)
            };
            let num = (perturb(h) - perturb(-h)) / (2.0 * h);
            let ana = g.data()[j];
            let denom = 1.0f64.max(ana.abs()).max(num.abs());
            assert!(
                ((ana - num) / denom).abs() < 1e-6,
                "{name}[{j}]: analytic {ana} vs numeric {num}"
            );
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} entries checked");
}
