use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Params, OPTIMIZER_PREFIX};
use crate::numerics::Tensor;

pub type Grads = BTreeMap<String, Vec<f64>>;

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros: Params = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).expect("moments cover every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moments cover every parameter").data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as `opt.m.<name>` and `opt.v.<name>` arrays.
    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("{OPTIMIZER_PREFIX}m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{OPTIMIZER_PREFIX}v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_arrays(lr: f64, t: u64, params: &Params, arrays: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut opt = Adam::new(lr, params);
        opt.t = t;
        for (which, store) in [("m", &mut opt.m), ("v", &mut opt.v)] {
            for (k, slot) in store.iter_mut() {
                let key = format!("{OPTIMIZER_PREFIX}{which}.{k}");
                let a = arrays.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if a.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("{key} has shape {:?}", a.shape())));
                }
                *slot = a.clone();
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p: Params = [("w".to_string(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())].into();
        let mut opt = Adam::new(0.1, &p);
        let g: Grads = [("w".to_string(), vec![3.0, -0.5])].into();
        opt.step(&mut p, &g).unwrap();
        let w = p["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        let back = Adam::from_arrays(0.1, opt.t, &p, &opt.to_arrays()).unwrap();
        assert_eq!(back, opt);
    }

    #[test]
    fn clipping() {
        let mut g: Grads = [("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])].into();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-12 && (g["b"][0] - 0.8).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
