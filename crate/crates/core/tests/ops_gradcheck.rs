//! Central-difference checks of every differentiable op, one random input
//! set per seed, plus the tape's accumulation and reset behaviour.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sentio_core::numerics::{finite_diff_check_many, AttnSpec, Coords, Dropout, Graph, Tensor, Var, DEFAULT_EPS};
use sentio_core::Result;

const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights, so every output
/// coordinate reaches the loss with a different coefficient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), &shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    finite_diff_check_many(f, inputs, DEFAULT_EPS, Coords::All).unwrap()
}

#[test]
fn elementwise_and_matrix_ops() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let c = randn(&mut rng, &[3, 4]);
        let bias = randn(&mut rng, &[1, 4]);
        let bt = randn(&mut rng, &[5, 4]);
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, seed)
            })),
            ("matmul_bt", vec![a.clone(), bt.clone()], Box::new(move |g, v| {
                let y = g.matmul_bt(v[0], v[1])?;
                project(g, y, seed)
            })),
            ("transpose", vec![a.clone()], Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, seed)
            })),
            ("add_sub_mul", vec![a.clone(), c.clone()], Box::new(move |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(v[0], v[1])?;
                let y = g.mul(s, d)?;
                project(g, y, seed)
            })),
            ("add_row_scale", vec![a.clone(), bias.clone()], Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                let y = g.scale(y, -1.7)?;
                project(g, y, seed)
            })),
            ("gelu", vec![a.clone()], Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, seed)
            })),
            ("dropout", vec![a.clone()], Box::new(move |g, v| {
                let mut d = Dropout::new(0.3, ChaCha8Rng::seed_from_u64(seed));
                let y = g.dropout(v[0], &mut d)?;
                project(g, y, seed)
            })),
            ("softmax", vec![a.clone()], Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, seed)
            })),
            ("concat_gather", vec![a.clone(), c.clone()], Box::new(move |g, v| {
                let t = g.concat_rows(&[v[0], v[1]])?;
                let y = g.gather_rows(t, &[5, 0, 0, 3, 2])?;
                project(g, y, seed)
            })),
        ];
        for (name, inputs, f) in &cases {
            let err = check(inputs, f.as_ref());
            assert!(err <= TOL, "{name} seed {seed}: {err:e}");
        }
        let err = check(&[a.clone(), b.clone()], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        });
        assert!(err <= 1e-6, "matmul seed {seed}: {err:e}");
    }
}

#[test]
fn normalisation_and_losses() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(&mut rng, &[4, 6]);
        let gamma = randn(&mut rng, &[1, 6]);
        let beta = randn(&mut rng, &[1, 6]);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
        let t2 = targets.clone();
        let err = check(&[x.clone(), gamma.clone(), beta.clone()], &move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, seed)
        });
        assert!(err <= TOL, "layer_norm seed {seed}: {err:e}");
        let err = check(std::slice::from_ref(&x), &move |g, v| g.softmax_cross_entropy(v[0], &t2));
        assert!(err <= 1e-6, "softmax_cross_entropy seed {seed}: {err:e}");
        let (t3, w3) = (targets.clone(), weights.clone());
        let err = check(std::slice::from_ref(&x), &move |g, v| g.cross_entropy(v[0], &t3, &w3));
        assert!(err <= TOL, "cross_entropy seed {seed}: {err:e}");
        let valid = vec![true, false, true, true];
        let err = check(std::slice::from_ref(&x), &move |g, v| {
            let y = g.masked_mean_rows(v[0], 2, 2, &valid)?;
            project(g, y, seed)
        });
        assert!(err <= TOL, "masked_mean_rows seed {seed}: {err:e}");
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
        let err = check(std::slice::from_ref(&x), &move |g, v| g.ccl_loss(v[0], &labels));
        assert!(err <= TOL, "ccl seed {seed}: {err:e}");
    }
}

#[test]
fn attention_with_masks() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (batch, lq, lk, d) = (2, 3, 4, 4);
        let q = randn(&mut rng, &[batch * lq, d]);
        let k = randn(&mut rng, &[batch * lk, d]);
        let v = randn(&mut rng, &[batch * lk, d]);
        let key_valid = vec![true, true, false, true, true, true, true, false];
        let spec = AttnSpec { batch, q_len: lq, k_len: lk, heads: 2, causal: false, key_valid };
        let err = check(&[q.clone(), k.clone(), v.clone()], &move |g, x| {
            let y = g.attention(x[0], x[1], x[2], spec.clone())?;
            project(g, y, seed)
        });
        assert!(err <= TOL, "cross attention seed {seed}: {err:e}");

        let s = randn(&mut rng, &[batch * lk, d]);
        let spec = AttnSpec { batch, q_len: lk, k_len: lk, heads: 2, causal: true, key_valid: vec![true; batch * lk] };
        let err = check(std::slice::from_ref(&s), &move |g, x| {
            let y = g.attention(x[0], x[0], x[0], spec.clone())?;
            project(g, y, seed)
        });
        assert!(err <= TOL, "causal self attention seed {seed}: {err:e}");
    }
}

#[test]
fn composite_chain() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn(&mut rng, &[3, 5]);
        let w = randn(&mut rng, &[5, 4]);
        let gamma = randn(&mut rng, &[1, 4]);
        let beta = randn(&mut rng, &[1, 4]);
        let err = check(&[x, w, gamma, beta], &|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3])?;
            g.softmax_cross_entropy(h, &[0, 3, 1])
        });
        assert!(err <= TOL, "composite seed {seed}: {err:e}");
    }
}

#[test]
fn backward_accumulates_and_resets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.param(randn(&mut rng, &[3, 3]));
    let w = g.constant(randn(&mut rng, &[3, 3]));
    let h = g.matmul(x, w).unwrap();
    let h = g.gelu(h).unwrap();
    let loss = g.sum(h).unwrap();
    g.backward(loss).unwrap();
    let first = g.grad(x).unwrap().to_vec();
    g.backward(loss).unwrap();
    let twice: Vec<f64> = g.grad(x).unwrap().to_vec();
    assert!(first.iter().zip(&twice).all(|(a, b)| 2.0 * a == *b));
    g.zero_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), first.as_slice());
}

#[test]
fn hand_values() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    let ce = g.softmax_cross_entropy(x, &[2]).unwrap();
    assert!((g.scalar(ce) - 0.40761).abs() < 1e-5);
    let flat = g.constant(Tensor::zeros(&[1, 4]));
    let u = g.softmax_cross_entropy(flat, &[1]).unwrap();
    assert!((g.scalar(u) - 4f64.ln()).abs() < 1e-12);
    let sure = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1e6, 0.0]).unwrap());
    let s = g.softmax_cross_entropy(sure, &[1]).unwrap();
    assert!(g.scalar(s).abs() < 1e-12);
    assert!(g.softmax_cross_entropy(sure, &[3]).is_err());
    let m = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let n = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let p = g.matmul(m, n).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
    let err = g.matmul(m, m).unwrap_err().to_string();
    assert!(err.contains("[1, 2]"), "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = randn(&mut rng, &[rows, cols]);
        t.data_mut().iter_mut().for_each(|x| *x *= scale);
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax(x).unwrap();
        for r in 0..rows {
            let total: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_values_stay_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(randn(&mut rng, &[4, 4]));
        let gm = g.constant(randn(&mut rng, &[1, 4]));
        let bt = g.constant(randn(&mut rng, &[1, 4]));
        let h = g.layer_norm(x, gm, bt).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.softmax(h).unwrap();
        prop_assert!(g.value(h).is_finite());
    }
}
