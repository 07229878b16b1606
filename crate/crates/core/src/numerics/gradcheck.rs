use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Which coordinates of each input tensor get a central difference.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per tensor, drawn without replacement.
    Sample { per_tensor: usize, seed: u64 },
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|analytic − central difference| / max(1, |central difference|)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        Coords::All,
    )
}

/// Same check over several input tensors at once (e.g. every model parameter).
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let y0 = g.scalar(y);
    if !y0.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {y0}")));
    }
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                g.constant(t)
            })
            .collect();
        let y = f(&mut g, &vars)?;
        let v = g.scalar(y);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("f at input {which}[{coord}] {delta:+e} = {v}")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = match coords {
            Coords::All => (0..t.numel()).collect(),
            Coords::Sample { per_tensor, seed } if per_tensor < t.numel() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = sample(&mut rng, t.numel(), per_tensor).into_vec();
                v.sort_unstable();
                v
            }
            Coords::Sample { .. } => (0..t.numel()).collect(),
        };
        for c in picks {
            let numeric = (eval(i, c, eps)? - eval(i, c, -eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i][c], numeric));
        }
    }
    Ok(worst)
}
