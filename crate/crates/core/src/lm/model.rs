use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Array, Graph, NodeId};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, 4 heads, d_model 128, d_ff 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter name with its shape, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gamma"), vec![d]));
            out.push((p("ln1.beta"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}")), vec![d, d]));
            }
            out.push((p("ln2.gamma"), vec![d]));
            out.push((p("ln2.beta"), vec![d]));
            out.push((p("ffn.w1"), vec![d, f]));
            out.push((p("ffn.b1"), vec![f]));
            out.push((p("ffn.w2"), vec![f, d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        out.push(("head.w".to_string(), vec![d, v]));
        out
    }
}

pub type ParamStore = BTreeMap<String, Array>;

/// Low-rank factors for one frozen weight: `W' = W + (alpha/rank)·A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Array,
    pub b: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by the adapted weight's parameter name.
    pub adapters: BTreeMap<String, LoraPair>,
}

impl LoraSet {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(weight: &str) -> String {
        format!("lora.{weight}.a")
    }

    pub fn b_name(weight: &str) -> String {
        format!("lora.{weight}.b")
    }

    /// Names of every trainable factor.
    pub fn parameter_names(&self) -> BTreeSet<String> {
        self.adapters
            .keys()
            .flat_map(|w| [Self::a_name(w), Self::b_name(w)])
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.values().map(|p| p.a.len() + p.b.len()).sum()
    }
}

/// Which leaves get gradients during a forward pass.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    Nothing,
    All,
    Only(BTreeSet<String>),
}

impl Trainable {
    fn wants(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

/// Result of recording a forward pass into a graph.
#[derive(Debug)]
pub struct Forward {
    /// `[total_len, vocab]`, sequences stacked in order.
    pub logits: NodeId,
    /// Row offset of each sequence inside `logits`.
    pub offsets: Vec<usize>,
    /// Leaves created for trainable parameters.
    pub leaves: BTreeMap<String, NodeId>,
}

/// Pre-LN causal transformer with learned positions and an untied head.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lora: Option<LoraSet>,
}

impl Transformer {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gamma") {
                vec![1.0; len]
            } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; len]
            } else {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Array::new(shape, data)?);
        }
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_shapes() {
            match params.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let lora = self.lora.as_ref()?;
            let (weight, which) = rest.rsplit_once('.')?;
            let pair = lora.adapters.get(weight)?;
            return match which {
                "a" => Some(&pair.a),
                "b" => Some(&pair.b),
                _ => None,
            };
        }
        self.params.get(name)
    }

    /// Mutable access to a base parameter or a LoRA factor (`lora.<w>.a|b`).
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let lora = self.lora.as_mut()?;
            let (weight, which) = rest.rsplit_once('.')?;
            let pair = lora.adapters.get_mut(weight)?;
            return match which {
                "a" => Some(&mut pair.a),
                "b" => Some(&mut pair.b),
                _ => None,
            };
        }
        self.params.get_mut(name)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass of several independent sequences.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        seqs: &[&[usize]],
        trainable: &Trainable,
    ) -> Result<Forward> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let cfg = &self.config;
        let mut binder = Binder {
            model: self,
            trainable,
            leaves: BTreeMap::new(),
            bound: BTreeMap::new(),
        };

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        for s in seqs {
            offsets.push(ids.len());
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();

        let tok = binder.weight(g, "tok_emb")?;
        let pos = binder.weight(g, "pos_emb")?;
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let g1 = binder.weight(g, &p("ln1.gamma"))?;
            let b1 = binder.weight(g, &p("ln1.beta"))?;
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let wq = binder.weight(g, &p("attn.wq"))?;
            let wk = binder.weight(g, &p("attn.wk"))?;
            let wv = binder.weight(g, &p("attn.wv"))?;
            let wo = binder.weight(g, &p("attn.wo"))?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;

            let mut seq_outputs = Vec::with_capacity(seqs.len());
            for (&off, &len) in offsets.iter().zip(&lens) {
                let (qs, ks, vs) = if seqs.len() == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_rows(q, off, len)?,
                        g.slice_rows(k, off, len)?,
                        g.slice_rows(v, off, len)?,
                    )
                };
                let mask = causal_mask(len);
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let qh = g.slice_cols(qs, hd * dh, dh)?;
                    let kh = g.slice_cols(ks, hd * dh, dh)?;
                    let vh = g.slice_cols(vs, hd * dh, dh)?;
                    let kt = g.transpose(kh)?;
                    let scores = g.matmul(qh, kt)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let scores = g.masked_fill(scores, &mask, MASK_FILL)?;
                    let att = g.softmax_rows(scores)?;
                    heads.push(g.matmul(att, vh)?);
                }
                seq_outputs.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    g.concat_cols(&heads)?
                });
            }
            let merged = if seq_outputs.len() == 1 {
                seq_outputs[0]
            } else {
                g.concat_rows(&seq_outputs)?
            };
            let attn = g.matmul(merged, wo)?;
            x = g.add(x, attn)?;

            let g2 = binder.weight(g, &p("ln2.gamma"))?;
            let b2 = binder.weight(g, &p("ln2.beta"))?;
            let h2 = g.layer_norm(x, g2, b2, LN_EPS)?;
            let w1 = binder.weight(g, &p("ffn.w1"))?;
            let fb1 = binder.weight(g, &p("ffn.b1"))?;
            let w2 = binder.weight(g, &p("ffn.w2"))?;
            let fb2 = binder.weight(g, &p("ffn.b2"))?;
            let up = g.matmul(h2, w1)?;
            let up = g.add_row(up, fb1)?;
            let act = g.gelu(up);
            let down = g.matmul(act, w2)?;
            let down = g.add_row(down, fb2)?;
            x = g.add(x, down)?;
        }
        let gf = binder.weight(g, "ln_f.gamma")?;
        let bf = binder.weight(g, "ln_f.beta")?;
        let xf = g.layer_norm(x, gf, bf, LN_EPS)?;
        let head = binder.weight(g, "head.w")?;
        let logits = g.matmul(xf, head)?;
        Ok(Forward {
            logits,
            offsets,
            leaves: binder.leaves,
        })
    }

    /// Logits rows `[len, vocab]` for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Array> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, &[tokens], &Trainable::Nothing)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Greedy continuation of `prompt`; stops at EOS (not emitted) or
    /// after `max_new` tokens. Ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + max_new,
                max: self.config.max_seq_len,
            });
        }
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.logits(&seq)?;
            let next = kernels::argmax(logits.row(seq.len() - 1));
            if next == super::Vocab::EOS_ID {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Folds LoRA factors into the dense weights and drops the adapters.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(lora) = self.lora.take() else {
            return Ok(());
        };
        let scale = lora.scale();
        for (name, pair) in &lora.adapters {
            let delta = pair.a.matmul(&pair.b)?;
            let w = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Missing(format!("adapted weight {name}")))?;
            w.axpy(scale, &delta)?;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }
}

fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for i in 0..len {
        for j in i + 1..len {
            mask[i * len + j] = true;
        }
    }
    mask
}

struct Binder<'a> {
    model: &'a Transformer,
    trainable: &'a Trainable,
    leaves: BTreeMap<String, NodeId>,
    bound: BTreeMap<String, NodeId>,
}

impl Binder<'_> {
    fn leaf(&mut self, g: &mut Graph, name: &str, value: &Array) -> NodeId {
        let wants = self.trainable.wants(name);
        let id = g.leaf(value.clone(), wants);
        if wants {
            self.leaves.insert(name.to_string(), id);
        }
        id
    }

    /// Effective weight node, including any LoRA update.
    fn weight(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let base = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
        let mut id = self.leaf(g, name, base);
        if let Some(lora) = &self.model.lora {
            if let Some(pair) = lora.adapters.get(name) {
                let a = self.leaf(g, &LoraSet::a_name(name), &pair.a);
                let b = self.leaf(g, &LoraSet::b_name(name), &pair.b);
                let ab = g.matmul(a, b)?;
                let scaled = g.scale(ab, lora.scale());
                id = g.add(id, scaled)?;
            }
        }
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}
