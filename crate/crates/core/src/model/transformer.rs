use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{check_params, init_params, Params};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{AttnSpec, Dropout, Graph, Tensor, Var};
use crate::prompt::{Modality, PromptSequence, BOS, EOS, MASK, PAD};

/// Parameters bound into one graph.
pub struct Bound {
    cfg: ModelConfig,
    vars: BTreeMap<String, Var>,
}

/// Encoder output for a padded batch laid out as `[batch*len, d]`.
pub struct Encoded {
    pub states: Var,
    /// `[batch, d]` masked mean over non-pad positions.
    pub pooled: Var,
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

/// Inference-side encoder output for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub pooled: Vec<f64>,
}

impl Bound {
    /// Binds `params` as trainable leaves (or constants) in iteration order.
    pub fn new(g: &mut Graph, cfg: &ModelConfig, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { cfg: cfg.clone(), vars }
    }

    /// Binds already-created leaves, in parameter-name order.
    pub fn from_vars(cfg: &ModelConfig, names: &[String], vars: &[Var]) -> Self {
        Bound {
            cfg: cfg.clone(),
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = g.matmul(x, self.var(&format!("{name}.w")))?;
        g.add_row(h, self.var(&format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        g.layer_norm(x, self.var(&format!("{name}.g")), self.var(&format!("{name}.b")))
    }

    fn attention(&self, g: &mut Graph, xq: Var, xkv: Var, name: &str, spec: AttnSpec) -> Result<Var> {
        let q = self.linear(g, xq, &format!("{name}.q"))?;
        let k = self.linear(g, xkv, &format!("{name}.k"))?;
        let v = self.linear(g, xkv, &format!("{name}.v"))?;
        let o = g.attention(q, k, v, spec)?;
        self.linear(g, o, &format!("{name}.o"))
    }

    fn ffn(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{name}.1"))?;
        let h = g.gelu(h)?;
        self.linear(g, h, &format!("{name}.2"))
    }

    fn residual(&self, g: &mut Graph, x: Var, h: Var, drop: &mut Dropout) -> Result<Var> {
        let h = g.dropout(h, drop)?;
        g.add(x, h)
    }

    /// Encodes a batch. Masked tokens become `<mask>`, masked frames the
    /// learned modality mask vector. Each position sums its token or frame
    /// embedding, modality-type, position and dataset embeddings.
    pub fn encode(
        &self,
        g: &mut Graph,
        prompts: &[&PromptSequence],
        plans: Option<&[MaskPlan]>,
        drop: &mut Dropout,
    ) -> Result<Encoded> {
        let cfg = &self.cfg;
        if prompts.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if plans.is_some_and(|p| p.len() != prompts.len()) {
            return Err(Error::Dimension("one mask plan per prompt".into()));
        }
        let len = prompts.iter().map(|p| p.encoder_len()).max().unwrap_or(0);
        if len > cfg.max_len {
            return Err(Error::Contract(format!("encoder length {len} exceeds max_len {}", cfg.max_len)));
        }
        let b = prompts.len();

        let mut parts = vec![self.var("tok_emb")];
        let mut frame_base = [0usize; 2];
        let mut mask_row = [0usize; 2];
        let mut offset = cfg.vocab_size;
        for (slot, m, dim) in [(0, Modality::Acoustic, cfg.acoustic_dim), (1, Modality::Visual, cfg.visual_dim)] {
            let mut rows = 0;
            let mut data = Vec::new();
            for p in prompts {
                if let Some(s) = p.segment(m) {
                    if s.frames.cols() != dim {
                        return Err(Error::Dimension(format!(
                            "{m:?} frames of width {} for a {dim}-wide projection",
                            s.frames.cols()
                        )));
                    }
                    rows += s.frames.rows();
                    data.extend_from_slice(s.frames.data());
                }
            }
            frame_base[slot] = offset;
            if rows > 0 {
                let name = if slot == 0 { "proj.acoustic" } else { "proj.visual" };
                let x = g.constant(Tensor::new(vec![rows, dim], data)?);
                parts.push(self.linear(g, x, name)?);
                offset += rows;
            }
            mask_row[slot] = offset;
            parts.push(self.var(if slot == 0 { "mask.acoustic" } else { "mask.visual" }));
            offset += 1;
        }
        let table = g.concat_rows(&parts)?;

        let mut src = Vec::with_capacity(b * len);
        let mut types = Vec::with_capacity(b * len);
        let mut ds = Vec::with_capacity(b * len);
        let mut valid = Vec::with_capacity(b * len);
        let mut seen_frames = [0usize; 2];
        for (s, p) in prompts.iter().enumerate() {
            let plan = plans.map(|pl| &pl[s]);
            let mut tokens = p.flatten();
            if let Some(plan) = plan {
                for &i in &plan.masked_token_positions {
                    let t = tokens
                        .get_mut(i)
                        .ok_or_else(|| Error::Index(format!("masked position {i} of {}", p.token_len())))?;
                    *t = MASK;
                }
            }
            src.extend_from_slice(&tokens);
            types.extend(std::iter::repeat_n(0, tokens.len()));
            for (slot, m) in [(0, Modality::Acoustic), (1, Modality::Visual)] {
                let Some(seg) = p.segment(m) else { continue };
                let masked = plan.map_or(&[][..], |pl| pl.frames(m));
                for f in 0..seg.frames.rows() {
                    src.push(if masked.binary_search(&f).is_ok() {
                        mask_row[slot]
                    } else {
                        frame_base[slot] + seen_frames[slot] + f
                    });
                    types.push(m.type_index());
                }
                seen_frames[slot] += seg.frames.rows();
            }
            let n = p.encoder_len();
            src.extend(std::iter::repeat_n(PAD, len - n));
            types.extend(std::iter::repeat_n(0, len - n));
            ds.extend(std::iter::repeat_n(p.dataset_index, len));
            valid.extend((0..len).map(|t| t < n));
        }
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();

        let x = g.gather_rows(table, &src)?;
        let t = g.gather_rows(self.var("enc.type_emb"), &types)?;
        let x = g.add(x, t)?;
        let pe = g.gather_rows(self.var("enc.pos_emb"), &pos)?;
        let x = g.add(x, pe)?;
        let de = g.gather_rows(self.var("data_emb"), &ds)?;
        let mut x = g.add(x, de)?;
        x = g.dropout(x, drop)?;

        let spec = AttnSpec { batch: b, q_len: len, k_len: len, heads: cfg.heads, causal: false, key_valid: valid.clone() };
        for i in 0..cfg.layers_enc {
            let p = format!("enc.{i}");
            let h = self.norm(g, x, &format!("{p}.ln1"))?;
            let h = self.attention(g, h, h, &format!("{p}.attn"), spec.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, &format!("{p}.ln2"))?;
            let h = self.ffn(g, h, &format!("{p}.ffn"))?;
            x = self.residual(g, x, h, drop)?;
        }
        let states = self.norm(g, x, "enc.ln")?;
        let pooled = g.masked_mean_rows(states, b, len, &valid)?;
        Ok(Encoded { states, pooled, batch: b, len, valid })
    }

    /// Runs the decoder over per-sample input ids (right-padded) and returns
    /// hidden states `[batch*T, d]` with `T` the longest input.
    pub fn decode(&self, g: &mut Graph, enc: &Encoded, inputs: &[Vec<usize>], drop: &mut Dropout) -> Result<(Var, usize)> {
        let cfg = &self.cfg;
        if inputs.len() != enc.batch {
            return Err(Error::Dimension(format!("{} decoder inputs for batch {}", inputs.len(), enc.batch)));
        }
        let t_len = inputs.iter().map(Vec::len).max().unwrap_or(0);
        if t_len == 0 || inputs.iter().any(Vec::is_empty) {
            return Err(Error::Contract("empty decoder input".into()));
        }
        if t_len > cfg.max_len {
            return Err(Error::Contract(format!("decoder length {t_len} exceeds max_len {}", cfg.max_len)));
        }
        let mut ids = Vec::with_capacity(enc.batch * t_len);
        let mut valid = Vec::with_capacity(enc.batch * t_len);
        for inp in inputs {
            ids.extend_from_slice(inp);
            ids.extend(std::iter::repeat_n(PAD, t_len - inp.len()));
            valid.extend((0..t_len).map(|t| t < inp.len()));
        }
        let pos: Vec<usize> = (0..enc.batch).flat_map(|_| 0..t_len).collect();
        let x = g.gather_rows(self.var("tok_emb"), &ids)?;
        let pe = g.gather_rows(self.var("dec.pos_emb"), &pos)?;
        let mut x = g.add(x, pe)?;
        x = g.dropout(x, drop)?;
        let self_spec = AttnSpec {
            batch: enc.batch,
            q_len: t_len,
            k_len: t_len,
            heads: cfg.heads,
            causal: true,
            key_valid: valid,
        };
        let cross_spec = AttnSpec {
            batch: enc.batch,
            q_len: t_len,
            k_len: enc.len,
            heads: cfg.heads,
            causal: false,
            key_valid: enc.valid.clone(),
        };
        for i in 0..cfg.layers_dec {
            let p = format!("dec.{i}");
            let h = self.norm(g, x, &format!("{p}.ln1"))?;
            let h = self.attention(g, h, h, &format!("{p}.self"), self_spec.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, &format!("{p}.ln2"))?;
            let h = self.attention(g, h, enc.states, &format!("{p}.cross"), cross_spec.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, &format!("{p}.ln3"))?;
            let h = self.ffn(g, h, &format!("{p}.ffn"))?;
            x = self.residual(g, x, h, drop)?;
        }
        Ok((self.norm(g, x, "dec.ln")?, t_len))
    }

    /// Full-vocabulary logits through the tied token embeddings.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        g.matmul_bt(hidden, self.var("tok_emb"))
    }

    /// Logits restricted to the listed token ids, in list order.
    pub fn restricted_logits(&self, g: &mut Graph, hidden: Var, token_ids: &[usize]) -> Result<Var> {
        let rows = g.gather_rows(self.var("tok_emb"), token_ids)?;
        g.matmul_bt(hidden, rows)
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn encode(&self, prompt: &PromptSequence, plan: Option<&MaskPlan>) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.config, &self.params, false);
        let plans = plan.map(|p| std::slice::from_ref(p));
        let enc = bound.encode(&mut g, &[prompt], plans, &mut Dropout::disabled())?;
        Ok(EncoderOutput {
            states: g.value(enc.states).clone(),
            pooled: g.value(enc.pooled).data().to_vec(),
        })
    }

    /// Pooled representations, computed in batches of `chunk`.
    pub fn pooled(&self, prompts: &[PromptSequence], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for batch in prompts.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &self.config, &self.params, false);
            let refs: Vec<&PromptSequence> = batch.iter().collect();
            let enc = bound.encode(&mut g, &refs, None, &mut Dropout::disabled())?;
            let t = g.value(enc.pooled);
            out.extend((0..batch.len()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn generate(&self, prompt: &PromptSequence, max_new: usize) -> Result<Vec<usize>> {
        Ok(self.generate_batch(std::slice::from_ref(prompt), max_new)?.remove(0))
    }

    /// Greedy decoding; argmax ties go to the lowest id. Each output stops
    /// after its first `<eos>` or `max_new` tokens.
    pub fn generate_batch(&self, prompts: &[PromptSequence], max_new: usize) -> Result<Vec<Vec<usize>>> {
        if max_new == 0 {
            return Err(Error::Contract("max_new must be at least 1".into()));
        }
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let max_new = max_new.min(self.config.max_len);
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.config, &self.params, false);
        let refs: Vec<&PromptSequence> = prompts.iter().collect();
        let mut off = Dropout::disabled();
        let enc = bound.encode(&mut g, &refs, None, &mut off)?;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; prompts.len()];
        let mut done = vec![false; prompts.len()];
        for _ in 0..max_new {
            let mark = g.len();
            let (hidden, t) = bound.decode(&mut g, &enc, &seqs, &mut off)?;
            let last: Vec<usize> = (0..prompts.len()).map(|s| s * t + t - 1).collect();
            let h = g.gather_rows(hidden, &last)?;
            let logits = bound.logits(&mut g, h)?;
            let lt = g.value(logits);
            let next: Vec<usize> = (0..prompts.len()).map(|s| argmax(lt.row(s))).collect();
            g.truncate(mark);
            for (s, tok) in next.into_iter().enumerate() {
                let tok = if done[s] { PAD } else { tok };
                seqs[s].push(tok);
                done[s] |= tok == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|mut s| {
                s.remove(0);
                if let Some(e) = s.iter().position(|&t| t == EOS) {
                    s.truncate(e + 1);
                }
                s
            })
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
