use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcan_core::nn::params::ModelParams;
use tcan_core::nn::{
    loss_and_grads, model_forward, sequence_loss, tcan_block, Activation, ForwardMode, MaskMode,
    SoftmaxDirection, TcanConfig,
};
use tcan_core::oracle::{compare, finite_difference_gradient, naive_model_forward, naive_tcan_block};
use tcan_core::{Tape, Tensor};

const DIRECTIONS: [SoftmaxDirection; 3] = [
    SoftmaxDirection::Vertical,
    SoftmaxDirection::Horizontal,
    SoftmaxDirection::Mixed,
];
const MASKS: [MaskMode; 2] = [MaskMode::LiteralZero, MaskMode::NegInf];

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> TcanConfig {
    let temporal_attention = rng.gen_bool(0.85);
    TcanConfig {
        vocab_size: rng.gen_range(2..=9),
        d_embed: rng.gen_range(1..=6),
        d_attn: rng.gen_range(1..=5),
        kernel_size: rng.gen_range(1..=4),
        num_levels: rng.gen_range(1..=3),
        blocks_per_level: rng.gen_range(1..=2),
        softmax_direction: DIRECTIONS[rng.gen_range(0..3)],
        mask_mode: MASKS[rng.gen_range(0..2)],
        use_enhanced_residual: temporal_attention && rng.gen_bool(0.5),
        use_values_for_output: rng.gen_bool(0.3),
        temporal_attention,
        activation: if rng.gen_bool(0.7) { Activation::Relu } else { Activation::Gelu },
        dropout: 0.0,
        tie_decoder: rng.gen_bool(0.3),
        seed,
    }
}

#[test]
fn vectorized_model_matches_naive_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_config(&mut rng, seed);
        let t_len = rng.gen_range(1..=12);
        let ids: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let params = ModelParams::init(&cfg).unwrap();
        let fast = model_forward(&ids, &params, &cfg).unwrap().logits;
        let slow: Vec<f64> = naive_model_forward(&ids, &params, &cfg).into_iter().flatten().collect();
        let report = compare(fast.data(), &slow, 1.0);
        assert!(report.max_abs_diff < 1e-9, "seed {seed} {cfg:?}: {report:?}");
        worst = worst.max(report.max_abs_diff);
    }
    assert!(worst < 1e-9);
}

#[test]
fn single_block_matches_naive_block() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = random_config(&mut rng, seed);
        let t_len = rng.gen_range(1..=12);
        let params = ModelParams::init(&cfg).unwrap();
        let s = Tensor::uniform(&[t_len, cfg.d_embed], 1.5, seed).unwrap();
        let level = rng.gen_range(1..=cfg.num_levels);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let (out, _) =
            tcan_block(&mut tape, sv, level, &bound.layers[level - 1], &cfg, ForwardMode::Eval).unwrap();
        let rows: Vec<Vec<f64>> = s.rows().map(<[f64]>::to_vec).collect();
        let naive = naive_tcan_block(&rows, level, &params.layers[level - 1], &cfg);
        let naive: Vec<f64> = naive.into_iter().flatten().collect();
        let report = compare(tape.value(out).data(), &naive, 1.0);
        assert!(report.max_abs_diff < 1e-9, "{cfg:?} {report:?}");
    }
}

fn perturbation_change(cfg: &TcanConfig, ids: &[usize], cut: usize, rng: &mut ChaCha8Rng) -> f64 {
    let params = ModelParams::init(cfg).unwrap();
    let base = model_forward(ids, &params, cfg).unwrap().logits;
    let mut other = ids.to_vec();
    for id in &mut other[cut..] {
        *id = rng.gen_range(0..cfg.vocab_size);
    }
    let moved = model_forward(&other, &params, cfg).unwrap().logits;
    let v = cfg.vocab_size;
    compare(&base.data()[..cut * v], &moved.data()[..cut * v], 1.0).max_abs_diff
}

#[test]
fn row_normalized_models_are_causal_under_every_suffix_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in [2, 3, 7] {
        for levels in [1, 2, 4] {
            for mask in MASKS {
                for er in [false, true] {
                    let cfg = TcanConfig {
                        vocab_size: 11,
                        d_embed: 5,
                        d_attn: 4,
                        kernel_size: k,
                        num_levels: levels,
                        softmax_direction: SoftmaxDirection::Horizontal,
                        mask_mode: mask,
                        use_enhanced_residual: er,
                        seed: k as u64 * 31 + levels as u64,
                        ..TcanConfig::default()
                    };
                    let ids: Vec<usize> = (0..16).map(|_| rng.gen_range(0..11)).collect();
                    for cut in 1..16 {
                        assert_eq!(perturbation_change(&cfg, &ids, cut, &mut rng), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn column_normalized_models_see_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for direction in [SoftmaxDirection::Vertical, SoftmaxDirection::Mixed] {
        for mask in MASKS {
            let cfg = TcanConfig {
                vocab_size: 11,
                d_embed: 5,
                d_attn: 4,
                kernel_size: 2,
                num_levels: 2,
                softmax_direction: direction,
                mask_mode: mask,
                seed: 3,
                ..TcanConfig::default()
            };
            let ids: Vec<usize> = (0..12).map(|_| rng.gen_range(0..11)).collect();
            assert!(perturbation_change(&cfg, &ids, 6, &mut rng) > 0.0);
        }
    }
}

#[test]
fn conv_causality_is_exhaustive_for_small_t() {
    // output[t] is unchanged by any perturbation of input[t+1..]
    for t_len in 1..=16usize {
        for k in 1..=t_len.max(1) {
            for d in 1..=t_len {
                if (k - 1) * d >= t_len {
                    continue;
                }
                let x = Tensor::uniform(&[2, t_len], 1.0, (t_len * 100 + k * 10 + d) as u64).unwrap();
                let w = Tensor::uniform(&[2, 2, k], 1.0, 5).unwrap();
                let run = |x: &Tensor| {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let wv = tape.constant(w.clone());
                    let y = tape.causal_conv1d(xv, wv, d).unwrap();
                    tape.value(y).clone()
                };
                let base = run(&x);
                for cut in 0..t_len - 1 {
                    let mut xp = x.clone();
                    for c in 0..2 {
                        for t in cut + 1..t_len {
                            xp.data_mut()[c * t_len + t] += 3.0 + t as f64;
                        }
                    }
                    let moved = run(&xp);
                    for c in 0..2 {
                        for t in 0..=cut {
                            assert_eq!(base.at2(c, t), moved.at2(c, t));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn embedding_gradient_is_nonzero_and_matches_fd() {
    let cfg = TcanConfig {
        vocab_size: 7,
        d_embed: 6,
        d_attn: 4,
        kernel_size: 2,
        num_levels: 2,
        seed: 2,
        ..TcanConfig::default()
    };
    let params = ModelParams::init(&cfg).unwrap();
    let inputs = [1, 4, 6, 0, 2, 2, 5, 3, 1];
    let targets = [4, 6, 0, 2, 2, 5, 3, 1, 0];
    let (_, grads) = loss_and_grads(&params, &cfg, &inputs, &targets, ForwardMode::Eval).unwrap();
    let emb_grad = &grads[0];
    assert!(emb_grad.iter().all(|g| g.is_finite()));
    assert!(emb_grad.iter().any(|&g| g != 0.0));
    let numeric = finite_difference_gradient(
        |x| {
            let mut p = params.clone();
            p.embedding.data_mut().copy_from_slice(x);
            sequence_loss(&p, &cfg, &inputs, &targets).unwrap()
        },
        params.embedding.data(),
        1e-5,
    );
    let report = compare(emb_grad, &numeric, 1e-6);
    assert!(report.max_rel_diff < 1e-4, "{report:?}");
}

#[test]
fn attention_records_respect_normalization() {
    for direction in DIRECTIONS {
        for mask in MASKS {
            let cfg = TcanConfig {
                vocab_size: 9,
                d_embed: 5,
                d_attn: 3,
                num_levels: 2,
                softmax_direction: direction,
                mask_mode: mask,
                ..TcanConfig::default()
            };
            let params = ModelParams::init(&cfg).unwrap();
            let ids: Vec<usize> = (0..10).map(|i| (i * 4) % 9).collect();
            for rec in model_forward(&ids, &params, &cfg).unwrap().records {
                let n = 10;
                for i in 0..n {
                    for j in i + 1..n {
                        let v = rec.masked.at2(i, j);
                        match mask {
                            MaskMode::LiteralZero => assert_eq!(v, 0.0),
                            MaskMode::NegInf => assert_eq!(v, f64::NEG_INFINITY),
                        }
                    }
                }
                for t in 0..n {
                    let m: f64 = (0..=t).map(|j| rec.weights.at2(t, j)).sum();
                    assert!((rec.importance.data()[t] - m).abs() < 1e-12);
                    assert!(rec.importance.data()[t] >= 0.0);
                }
                let col_sums: Vec<f64> = (0..n).map(|j| (0..n).map(|i| rec.weights.at2(i, j)).sum()).collect();
                let row_sums: Vec<f64> = rec.weights.rows().map(|r| r.iter().sum()).collect();
                match direction {
                    SoftmaxDirection::Vertical => col_sums.iter().for_each(|s| assert!((s - 1.0).abs() < 1e-9)),
                    SoftmaxDirection::Horizontal => row_sums.iter().for_each(|s| assert!((s - 1.0).abs() < 1e-9)),
                    SoftmaxDirection::Mixed => {}
                }
            }
        }
    }
}
