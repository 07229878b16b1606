use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Named parameter tensors, ordered by name.
pub type Params = BTreeMap<String, Tensor>;

const EMBED_STD: f64 = 0.1;

fn push_linear(out: &mut BTreeMap<String, Vec<usize>>, name: &str, fan_in: usize, fan_out: usize) {
    out.insert(format!("{name}.w"), vec![fan_in, fan_out]);
    out.insert(format!("{name}.b"), vec![fan_out]);
}

fn push_norm(out: &mut BTreeMap<String, Vec<usize>>, name: &str, d: usize) {
    out.insert(format!("{name}.g"), vec![d]);
    out.insert(format!("{name}.b"), vec![d]);
}

fn push_attn(out: &mut BTreeMap<String, Vec<usize>>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{name}.{p}"), d, d);
    }
}

/// Every parameter name with its shape.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.model_dim;
    let mut s = BTreeMap::new();
    s.insert("tok_emb".into(), vec![cfg.vocab_size, d]);
    s.insert("data_emb".into(), vec![cfg.num_datasets, d]);
    s.insert("enc.type_emb".into(), vec![3, d]);
    s.insert("enc.pos_emb".into(), vec![cfg.max_len, d]);
    s.insert("dec.pos_emb".into(), vec![cfg.max_len, d]);
    s.insert("mask.acoustic".into(), vec![d]);
    s.insert("mask.visual".into(), vec![d]);
    push_linear(&mut s, "proj.acoustic", cfg.acoustic_dim, d);
    push_linear(&mut s, "proj.visual", cfg.visual_dim, d);
    for i in 0..cfg.layers_enc {
        let p = format!("enc.{i}");
        push_norm(&mut s, &format!("{p}.ln1"), d);
        push_attn(&mut s, &format!("{p}.attn"), d);
        push_norm(&mut s, &format!("{p}.ln2"), d);
        push_linear(&mut s, &format!("{p}.ffn.1"), d, cfg.ffn_dim);
        push_linear(&mut s, &format!("{p}.ffn.2"), cfg.ffn_dim, d);
    }
    push_norm(&mut s, "enc.ln", d);
    for i in 0..cfg.layers_dec {
        let p = format!("dec.{i}");
        push_norm(&mut s, &format!("{p}.ln1"), d);
        push_attn(&mut s, &format!("{p}.self"), d);
        push_norm(&mut s, &format!("{p}.ln2"), d);
        push_attn(&mut s, &format!("{p}.cross"), d);
        push_norm(&mut s, &format!("{p}.ln3"), d);
        push_linear(&mut s, &format!("{p}.ffn.1"), d, cfg.ffn_dim);
        push_linear(&mut s, &format!("{p}.ffn.2"), cfg.ffn_dim, d);
    }
    push_norm(&mut s, "dec.ln", d);
    s
}

/// Seeded initialization: norm gains 1, biases 0, embeddings and mask vectors
/// N(0, 0.1²), linear weights Xavier-normal.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Params::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".g") {
            vec![1.0; n]
        } else if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let std = match shape.as_slice() {
                [fan_in, fan_out] if name.ends_with(".w") => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                _ => EMBED_STD,
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Checks that `params` holds exactly the expected names and shapes.
pub fn check_params(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let want = param_shapes(cfg);
    for (name, shape) in &want {
        match params.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(t) if !t.is_finite() => return Err(Error::Numeric(format!("parameter {name}"))),
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !want.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(())
}
