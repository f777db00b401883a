//! Analytic gradients against central finite differences.

use proptest::prelude::*;
use tcan_core::oracle::{compare, finite_difference_gradient};
use tcan_core::{MaskMode, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

/// Builds `sum(op(inputs) * weights)` and checks every input's gradient.
fn check<F>(inputs: &[Tensor], seed: u64, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let scalar = |tape: &mut Tape, vars: &[Var]| {
        let out = op(tape, vars);
        if tape.value(out).numel() == 1 {
            return out;
        }
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::uniform(&shape, 1.0, seed ^ 0xABCD).unwrap());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = scalar(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input reached").to_vec();
        let numeric = finite_difference_gradient(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.constant(Tensor::from_vec(t.shape(), x.to_vec()).unwrap())
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                let loss = scalar(&mut tape, &vars);
                tape.value(loss).item().unwrap()
            },
            input.data(),
            EPS,
        );
        let report = compare(&analytic, &numeric, REL_FLOOR);
        assert!(
            report.max_rel_diff < REL_TOL,
            "input {k}: {report:?}\nanalytic {analytic:?}\nnumeric {numeric:?}"
        );
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, seed).unwrap()
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_grad(m in dim(), n in dim(), p in dim(), seed in any::<u64>()) {
        check(&[rand(&[m, n], seed), rand(&[n, p], seed + 1)], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn transpose_add_mul_scale_grad(m in dim(), n in dim(), seed in any::<u64>()) {
        check(&[rand(&[m, n], seed), rand(&[n, m], seed + 1)], seed, |t, v| {
            let a = t.transpose(v[0]).unwrap();
            let b = t.mul(a, v[1]).unwrap();
            let c = t.add(b, v[1]).unwrap();
            t.scale(c, -1.5).unwrap()
        });
    }

    #[test]
    fn bias_grad(m in dim(), n in dim(), seed in any::<u64>()) {
        check(&[rand(&[m, n], seed), rand(&[n], seed + 1)], seed, |t, v| t.add_row_bias(v[0], v[1]).unwrap());
    }

    #[test]
    fn activation_grads(m in dim(), n in dim(), seed in any::<u64>()) {
        check(&[rand(&[m, n], seed)], seed, |t, v| t.relu(v[0]).unwrap());
        check(&[rand(&[m, n], seed)], seed, |t, v| t.gelu(v[0]).unwrap());
    }

    #[test]
    fn softmax_grad(a in dim(), b in dim(), c in 1usize..=4, axis in 0usize..3, seed in any::<u64>()) {
        let x = Tensor::uniform(&[a, b, c], 3.0, seed).unwrap();
        check(&[x], seed, |t, v| t.softmax(v[0], axis).unwrap());
    }

    #[test]
    fn masked_softmax_grad(n in dim(), axis in 0usize..2, neg_inf in any::<bool>(), seed in any::<u64>()) {
        let mode = if neg_inf { MaskMode::NegInf } else { MaskMode::LiteralZero };
        check(&[rand(&[n, n], seed)], seed, |t, v| {
            let m = t.causal_mask(v[0], mode).unwrap();
            t.softmax(m, axis).unwrap()
        });
    }

    #[test]
    fn conv_grad(c_in in 1usize..=4, c_out in 1usize..=4, t_len in dim(), k in 1usize..=3, d in 1usize..=4, seed in any::<u64>()) {
        check(&[rand(&[c_in, t_len], seed), rand(&[c_out, c_in, k], seed + 1)], seed, |t, v| {
            t.causal_conv1d(v[0], v[1], d).unwrap()
        });
    }

    #[test]
    fn attention_sum_grads(n in dim(), d in dim(), seed in any::<u64>()) {
        check(&[rand(&[n, n], seed), rand(&[n, d], seed + 1)], seed, |t, v| {
            t.causal_weighted_sum(v[0], v[1]).unwrap()
        });
        check(&[rand(&[n, n], seed), rand(&[n, d], seed + 1)], seed, |t, v| {
            let m = t.lower_row_sum(v[0]).unwrap();
            t.scale_rows(v[1], m).unwrap()
        });
    }

    #[test]
    fn gather_and_cross_entropy_grads(v in 2usize..=8, d in dim(), ids in proptest::collection::vec(0usize..8, 1..=8), seed in any::<u64>()) {
        let ids: Vec<usize> = ids.into_iter().map(|i| i % v).collect();
        let ids2 = ids.clone();
        check(&[rand(&[v, d], seed)], seed, move |t, vars| t.gather_rows(vars[0], &ids2).unwrap());
        let targets: Vec<usize> = ids.iter().rev().copied().collect();
        check(&[Tensor::uniform(&[ids.len(), v], 4.0, seed).unwrap()], seed, move |t, vars| {
            t.cross_entropy(vars[0], &targets).unwrap()
        });
    }

    #[test]
    fn shapes_are_a_function_of_input_shapes(m in dim(), n in dim(), p in dim(), k in 1usize..=3, d in 1usize..=3) {
        let mut tape = Tape::new();
        let a = tape.constant(rand(&[m, n], 1));
        let b = tape.constant(rand(&[n, p], 2));
        let kern = tape.constant(rand(&[p, m, k], 3));
        let mm = tape.matmul(a, b).unwrap();
        prop_assert_eq!(tape.value(mm).shape(), &[m, p]);
        let at = tape.transpose(a).unwrap();
        prop_assert_eq!(tape.value(at).shape(), &[n, m]);
        let conv = tape.causal_conv1d(a, kern, d).unwrap();
        prop_assert_eq!(tape.value(conv).shape(), &[p, n]);
        let sq = tape.constant(rand(&[n, n], 4));
        let ws = tape.causal_weighted_sum(sq, at).unwrap();
        prop_assert_eq!(tape.value(ws).shape(), &[n, m]);
        let sm = tape.softmax(mm, 1).unwrap();
        prop_assert_eq!(tape.value(sm).shape(), &[m, p]);
    }

    #[test]
    fn softmax_slices_sum_to_one(a in dim(), b in dim(), axis in 0usize..2, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[a, b], 30.0, seed).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let y = tape.value(y);
        if axis == 1 {
            for row in y.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        } else {
            for j in 0..b {
                let s: f64 = (0..a).map(|i| y.at2(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn matmul_sum_grad_matches_fd_tightly() {
    let a = rand(&[3, 4], 10);
    let b = rand(&[4, 2], 11);
    let mut tape = Tape::new();
    let av = tape.leaf(&a.clone().with_grad());
    let bv = tape.constant(b.clone());
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let numeric = finite_difference_gradient(
        |x| {
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::from_vec(&[3, 4], x.to_vec()).unwrap());
            let bv = tape.constant(b.clone());
            let p = tape.matmul(av, bv).unwrap();
            let s = tape.sum(p).unwrap();
            tape.value(s).item().unwrap()
        },
        a.data(),
        EPS,
    );
    assert!(compare(g.get(av).unwrap(), &numeric, REL_FLOOR).max_rel_diff < 1e-6);
}

#[test]
fn composite_matmul_softmax_cross_entropy() {
    let x = rand(&[5, 3], 20);
    let w = rand(&[3, 6], 21);
    let targets = [0, 5, 2, 2, 1];
    let forward = |tape: &mut Tape, x: Var, w: Var| {
        let h = tape.matmul(x, w).unwrap();
        let p = tape.softmax(h, 1).unwrap();
        tape.cross_entropy(p, &targets).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let wv = tape.leaf(&w.clone().with_grad());
    let loss = forward(&mut tape, xv, wv);
    let g = tape.backward(loss).unwrap();
    let numeric = finite_difference_gradient(
        |d| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(Tensor::from_vec(&[3, 6], d.to_vec()).unwrap());
            let l = forward(&mut tape, xv, wv);
            tape.value(l).item().unwrap()
        },
        w.data(),
        EPS,
    );
    let report = compare(g.get(wv).unwrap(), &numeric, REL_FLOOR);
    assert!(report.max_rel_diff < 1e-5, "{report:?}");
}

#[test]
fn gather_equals_one_hot_matmul() {
    let table = rand(&[6, 4], 30);
    let ids = [3, 0, 5, 3, 1];
    let mut onehot = vec![0.0; ids.len() * 6];
    for (t, &id) in ids.iter().enumerate() {
        onehot[t * 6 + id] = 1.0;
    }
    let mut tape = Tape::new();
    let tv = tape.constant(table);
    let g = tape.gather_rows(tv, &ids).unwrap();
    let oh = tape.constant(Tensor::from_vec(&[5, 6], onehot).unwrap());
    let m = tape.matmul(oh, tv).unwrap();
    assert_eq!(tape.value(g).data(), tape.value(m).data());
}

#[test]
fn gather_gradient_counts_occurrences() {
    let table = rand(&[4, 3], 31).with_grad();
    let ids = [2, 0, 2, 2, 1];
    let mut tape = Tape::new();
    let tv = tape.leaf(&table);
    let g = tape.gather_rows(tv, &ids).unwrap();
    let s = tape.sum(g).unwrap();
    let grads = tape.backward(s).unwrap();
    let expected: Vec<f64> = [1.0, 1.0, 3.0, 0.0]
        .iter()
        .flat_map(|&c| [c; 3])
        .collect();
    assert_eq!(grads.get(tv).unwrap(), expected.as_slice());
}
