//! Analytic tape gradients against central finite differences, plus
//! property checks of the tensor kernels.

use proptest::prelude::*;
use rand::Rng;
use seqforge::rng::seeded;
use seqforge::{Scalar, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
        .with_grad()
}

/// Builds a scalar from the inputs by applying `f` and reducing with a
/// fixed random projection, so every output entry gets a distinct weight.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], record: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = if record { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let mut prng = seeded(77);
        let proj = Tensor::new(&shape, (0..n).map(|_| prng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pv = tape.constant(proj);
        let prod = tape.mul(out, pv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).data()[0] as f64;
        if !record {
            return (value, vec![]);
        }
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(|g| g.iter().map(|&x| x as f64).collect())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs, true);
    let mut probe = inputs.clone();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..probe[ti].numel() {
            let orig = probe[ti].data()[k];
            probe[ti].data_mut()[k] = orig + EPS as Scalar;
            let plus = eval(&probe, false).0;
            probe[ti].data_mut()[k] = orig - EPS as Scalar;
            let minus = eval(&probe, false).0;
            probe[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let denom = grad[k].abs().max(numeric.abs()).max(1e-3);
            let rel = (grad[k] - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "input {ti} entry {k}: analytic {} vs numeric {numeric} (rel {rel:e})",
                grad[k]
            );
        }
    }
}

#[test]
fn matmul_grads() {
    let mut rng = seeded(1);
    check(vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check(vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4])], |t, v| {
        t.matmul_nt(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_grads() {
    let mut rng = seeded(2);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check(vec![a.clone()], |t, v| t.scale(v[0], 0.7).unwrap());
    check(vec![a.clone()], |t, v| t.tanh(v[0]).unwrap());
    check(vec![a.clone()], |t, v| t.sigmoid(v[0]).unwrap());
    check(vec![a, rand_tensor(&mut rng, &[3])], |t, v| t.add_bias(v[0], v[1]).unwrap());
}

#[test]
fn shape_op_grads() {
    let mut rng = seeded(3);
    check(vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 2])], |t, v| {
        t.concat(&[v[0], v[1]], 1).unwrap()
    });
    check(vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[1, 3])], |t, v| {
        t.concat(&[v[0], v[1], v[0]], 0).unwrap()
    });
    check(vec![rand_tensor(&mut rng, &[2, 5, 3])], |t, v| t.slice(v[0], 1, 1, 3).unwrap());
    check(vec![rand_tensor(&mut rng, &[4, 3])], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
    check(vec![rand_tensor(&mut rng, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check(
        vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])],
        |t, v| t.stack_time(&[v[0], v[1], v[2]]).unwrap(),
    );
    check(vec![rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[3, 2])], |t, v| {
        t.select_rows(&[true, false, true], v[0], v[1]).unwrap()
    });
}

#[test]
fn normalization_grads() {
    let mut rng = seeded(4);
    check(vec![rand_tensor(&mut rng, &[3, 4])], |t, v| t.softmax_rows(v[0], None).unwrap());
    let mask = [true, false, true, true, false, true, true, true, true, true, false, false];
    check(vec![rand_tensor(&mut rng, &[3, 4])], |t, v| t.softmax_rows(v[0], Some(&mask)).unwrap());
    check(vec![rand_tensor(&mut rng, &[3, 4])], |t, v| t.log_softmax_rows(v[0]).unwrap());
    check(vec![rand_tensor(&mut rng, &[3, 4])], |t, v| t.nll_loss(v[0], &[1, 0, 3], 0).unwrap());
}

#[test]
fn attention_kernel_grads() {
    let mut rng = seeded(5);
    check(vec![rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 4])], |t, v| {
        t.batch_scores(v[0], v[1]).unwrap()
    });
    check(vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3, 4])], |t, v| {
        t.batch_mix(v[0], v[1]).unwrap()
    });
}

#[test]
fn random_composite_graphs() {
    // tanh(A·B) ⊙ σ(C), softmax, then a fan-out through the same leaf.
    for seed in 0..5 {
        let mut rng = seeded(100 + seed);
        check(
            vec![
                rand_tensor(&mut rng, &[3, 2]),
                rand_tensor(&mut rng, &[2, 4]),
                rand_tensor(&mut rng, &[3, 4]),
            ],
            |t, v| {
                let ab = t.matmul(v[0], v[1]).unwrap();
                let th = t.tanh(ab).unwrap();
                let sg = t.sigmoid(v[2]).unwrap();
                let m = t.mul(th, sg).unwrap();
                let s = t.softmax_rows(m, None).unwrap();
                t.add(s, v[2]).unwrap()
            },
        );
    }
}

#[test]
fn fan_out_equals_sum_of_branches() {
    let mut rng = seeded(6);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let grad_of = |branches: &[bool]| -> Vec<Scalar> {
        let mut tape = Tape::new();
        let vx = tape.param(&x);
        let vw = tape.param(&w);
        let mut terms = Vec::new();
        if branches[0] {
            let a = tape.matmul(vx, vw).unwrap();
            let a = tape.tanh(a).unwrap();
            terms.push(tape.sum(a).unwrap());
        }
        if branches[1] {
            let b = tape.sigmoid(vx).unwrap();
            terms.push(tape.sum(b).unwrap());
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t).unwrap();
        }
        tape.backward(loss).unwrap();
        tape.grad(vx).unwrap().to_vec()
    };
    let both = grad_of(&[true, true]);
    let first = grad_of(&[true, false]);
    let second = grad_of(&[false, true]);
    for ((b, f), s) in both.iter().zip(&first).zip(&second) {
        assert!((b - (f + s)).abs() < 1e-12);
    }
}

fn naive_matmul(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop_exactly(
        m in 1usize..=5, k in 1usize..=5, n in 1usize..=5, seed in any::<u64>()
    ) {
        let mut rng = seeded(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let mut tape = Tape::inference();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let c = tape.matmul(va, vb).unwrap();
        let expected = naive_matmul(a.data(), b.data(), m, k, n);
        prop_assert_eq!(tape.value(c).data(), expected.as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..8), 1..5)
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<Scalar>> = rows
            .into_iter()
            .map(|mut r| { r.resize(width, 0.0); r.into_iter().map(|v| v as Scalar).collect() })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let mut tape = Tape::inference();
        let v = tape.param(&x);
        let s = tape.softmax_rows(v, None).unwrap();
        for i in 0..rows.len() {
            let row = tape.value(s).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let total: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
