use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{ModelConfig, Trainable, Transformer};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::tensor::{kernels, Array, Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Cosine decay to `min_lr_ratio · learning_rate` over `steps`.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Final mean corpus CE expected at the end; a warning is logged above it.
    #[serde(default = "default_threshold")]
    pub ce_threshold: f64,
}

fn default_min_lr_ratio() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            warmup_steps: 100,
            min_lr_ratio: default_min_lr_ratio(),
            grad_clip: default_clip(),
            ce_threshold: default_threshold(),
        }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub checkpoint: Checkpoint,
    /// Mean next-token CE of each step's batch.
    pub losses: Vec<f64>,
    /// Mean CE over the scored positions after training.
    pub final_ce: f64,
    /// Mean next-token CE over every position after training.
    pub final_corpus_ce: f64,
    pub below_threshold: bool,
}

/// Mean next-token CE of `seqs` as a graph node, plus the token count.
pub fn next_token_loss(
    model: &Transformer,
    g: &mut Graph,
    seqs: &[&[usize]],
    trainable: &Trainable,
) -> Result<(NodeId, BTreeMap<String, NodeId>, usize)> {
    let fwd = model.forward_graph(g, seqs, trainable)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, &off) in seqs.iter().zip(&fwd.offsets) {
        for j in 0..s.len().saturating_sub(1) {
            rows.push(off + j);
            targets.push(s[j + 1]);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let selected = g.gather(fwd.logits, &rows)?;
    let logp = g.log_softmax_rows(selected)?;
    let picked = g.pick(logp, &targets)?;
    let total = g.sum(picked);
    let loss = g.scale(total, -1.0 / rows.len() as f64);
    Ok((loss, fwd.leaves, rows.len()))
}

/// Mean per-token next-token CE over a corpus, no gradients.
pub fn corpus_ce(model: &Transformer, corpus: &[Vec<usize>]) -> Result<f64> {
    scored_ce(model, corpus, &vec![1; corpus.len()])
}

/// Mean next-token CE over the tokens of `corpus[i]` at positions
/// `>= scored_from[i]`, no gradients.
pub fn scored_ce(model: &Transformer, corpus: &[Vec<usize>], scored_from: &[usize]) -> Result<f64> {
    if scored_from.len() != corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "{} score offsets for {} sequences",
            scored_from.len(),
            corpus.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk, starts) in corpus.chunks(64).zip(scored_from.chunks(64)) {
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &seqs, &Trainable::Nothing)?;
        let logits = g.value(fwd.logits);
        for ((s, &off), &start) in seqs.iter().zip(&fwd.offsets).zip(starts) {
            for j in start.max(1)..s.len() {
                total -= kernels::log_softmax(logits.row(off + j - 1))[s[j]];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(total / count as f64)
}

/// A training loss this many times the first step's loss counts as diverged.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Maximum-likelihood training of a freshly initialized model on `corpus`.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    pretrain_scored(config, corpus, &vec![1; corpus.len()], cfg)
}

/// As [`pretrain`], with the final CE and its threshold check restricted to
/// positions `>= scored_from[i]` of each sequence (for instance the answer
/// of a fact sentence, whose subject tokens are unpredictable).
pub fn pretrain_scored(
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    scored_from: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if scored_from.len() != corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "{} score offsets for {} sequences",
            scored_from.len(),
            corpus.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.learning_rate < 0.0 {
        return Err(Error::InvalidConfig(
            "batch_size must be positive and learning_rate non-negative".into(),
        ));
    }
    let mut model = Transformer::init(config.clone())?;
    for s in corpus {
        model.check_tokens(s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].as_slice());
            cursor += 1;
        }
        let mut g = Graph::new();
        let (loss, leaves, _) = next_token_loss(&model, &mut g, &batch, &Trainable::All)?;
        let value = g.value(loss).item()?;
        let blown_up = losses.first().is_some_and(|&first: &f64| value > DIVERGENCE_FACTOR * first.max(1.0));
        if !value.is_finite() || blown_up {
            return Err(Error::Diverged {
                last_finite_step: step.saturating_sub(1),
            });
        }
        losses.push(value);
        g.backward(loss)?;
        let mut grads: BTreeMap<String, Array> = leaves
            .iter()
            .filter_map(|(name, &id)| g.grad(id).map(|gr| (name.clone(), gr.clone())))
            .collect();
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model, &grads, cfg.lr_at(step))?;
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::debug!("pretrain step {step}: loss {value:.5}");
        }
    }

    let final_ce = scored_ce(&model, corpus, scored_from)?;
    let final_corpus_ce = corpus_ce(&model, corpus)?;
    let below_threshold = final_ce < cfg.ce_threshold;
    if !below_threshold {
        log::warn!(
            "final scored CE {final_ce:.4} is above the threshold {}",
            cfg.ce_threshold
        );
    }
    Ok(PretrainReport {
        checkpoint: Checkpoint::from_model(&model, cfg.steps as u64)?,
        losses,
        final_ce,
        final_corpus_ce,
        below_threshold,
    })
}
