//! Token-level smoothed editing objective.
//!
//! Each answer position gets its own target distribution: the gold token's
//! delta mixed with the model's own top-nσ filtered prediction, falling back to
//! the pure delta whenever the mixture would not rank the gold token first.
//! The per-position loss is the forward KL to that target, floored at ε so
//! that positions already close to their target stop contributing gradient.

mod probe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Array, Graph, NodeId};

pub use probe::{loss_overhead_probe, OverheadRow, OverheadTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub n_sigma: f64,
    pub clip_enabled: bool,
    pub skip_enabled: bool,
    pub filter_enabled: bool,
    pub dynamic_target: bool,
}

impl LossConfig {
    /// ε = 0.01, n = 0.5, λ = 0.1.
    pub fn ftm_defaults() -> Self {
        Self {
            epsilon: 0.01,
            ..Self::lora_defaults()
        }
    }

    /// ε = 0.05, n = 0.5, λ = 0.1.
    pub fn lora_defaults() -> Self {
        Self {
            lambda: 0.1,
            epsilon: 0.05,
            n_sigma: 0.5,
            clip_enabled: true,
            skip_enabled: true,
            filter_enabled: true,
            dynamic_target: true,
        }
    }

    /// The configuration under which the objective is plain CE.
    pub fn ce_equivalent() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 0.0,
            ..Self::lora_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if !(self.n_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "n_sigma {} must be > 0",
                self.n_sigma
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::lora_defaults()
    }
}

/// Top-nσ filtered softmax of one logits row.
///
/// Tokens with `logit <= max - n·σ` (σ the population standard deviation of
/// the row) get probability zero, except the row argmax which always
/// survives. A row with σ = 0 is returned as its plain softmax.
pub fn top_n_sigma_filter(logits: &[f64], n: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(n > 0.0) {
        return Err(Error::InvalidConfig(format!("n_sigma {n} must be > 0")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite logits".into()));
    }
    let len = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / len;
    let var = logits.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Ok(kernels::softmax(logits));
    }
    let best = kernels::argmax(logits);
    let max = logits[best];
    let threshold = max - n * sigma;
    let mut out = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, (&s, o)) in logits.iter().zip(out.iter_mut()).enumerate() {
        if s > threshold || i == best {
            *o = (s - max).exp();
            total += *o;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Mixture,
    Delta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub branch: Branch,
    pub gold: usize,
}

impl TargetDistribution {
    /// `Σ p log p` with `0 log 0 = 0`.
    pub fn neg_entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum()
    }
}

/// `λ·δ_gold + (1-λ)·π_flt`, replaced by `δ_gold` when skipping is enabled and
/// the gold token is not (tied for) the mixture's maximum.
pub fn build_target(pi_flt: &[f64], gold: usize, lambda: f64, skip_enabled: bool) -> TargetDistribution {
    let mut probs: Vec<f64> = pi_flt.iter().map(|p| (1.0 - lambda) * p).collect();
    probs[gold] += lambda;
    let gold_p = probs[gold];
    let gold_on_top = probs.iter().all(|&p| p <= gold_p);
    if skip_enabled && !gold_on_top {
        let mut delta = vec![0.0; pi_flt.len()];
        delta[gold] = 1.0;
        return TargetDistribution {
            probs: delta,
            branch: Branch::Delta,
            gold,
        };
    }
    TargetDistribution {
        probs,
        branch: Branch::Mixture,
        gold,
    }
}

/// Target for one position from the logits that define π_flt.
pub fn target_for_row(flt_logits: &[f64], gold: usize, cfg: &LossConfig) -> Result<TargetDistribution> {
    let pi_flt = if cfg.filter_enabled {
        top_n_sigma_filter(flt_logits, cfg.n_sigma)?
    } else {
        kernels::softmax(flt_logits)
    };
    Ok(build_target(&pi_flt, gold, cfg.lambda, cfg.skip_enabled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLossRecord {
    pub position: usize,
    pub kl: f64,
    pub clipped: bool,
    pub branch: Branch,
    /// `-log π_θ(gold)`, the CE term this position would contribute.
    pub ce_equivalent: f64,
    pub gold_logprob: f64,
}

/// KL from a target to `softmax(logits)` for one row, value only.
pub fn token_kl(target: &TargetDistribution, logits: &[f64]) -> f64 {
    let logp = kernels::log_softmax(logits);
    target
        .probs
        .iter()
        .zip(&logp)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &lp)| t * (t.ln() - lp))
        .sum()
}

fn check_gold(logits: &Array, gold: &[usize]) -> Result<(usize, usize)> {
    let (m, v) = logits.dims2("loss")?;
    if gold.len() != m {
        return Err(Error::InvalidConfig(format!(
            "{} gold tokens for {m} logits rows",
            gold.len()
        )));
    }
    if let Some(&id) = gold.iter().find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange { id, vocab_size: v });
    }
    Ok((m, v))
}

/// Summed CE over positions; returns the scalar node and each gold log-prob.
pub fn ce_loss(g: &mut Graph, logits: NodeId, gold: &[usize]) -> Result<(NodeId, Vec<f64>)> {
    check_gold(g.value(logits), gold)?;
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.pick(logp, gold)?;
    let gold_logprob = g.value(picked).data().to_vec();
    let total = g.sum(picked);
    Ok((g.scale(total, -1.0), gold_logprob))
}

/// Per-position clipped KL terms `[m]` for targets held constant.
///
/// With `clip_enabled` each term is `max(kl, ε)`, whose gradient vanishes
/// whenever `kl <= ε`.
pub fn token_kl_clipped(
    g: &mut Graph,
    logits: NodeId,
    targets: &[TargetDistribution],
    epsilon: f64,
    clip_enabled: bool,
) -> Result<(NodeId, Vec<TokenLossRecord>)> {
    let gold: Vec<usize> = targets.iter().map(|t| t.gold).collect();
    let (m, v) = check_gold(g.value(logits), &gold)?;
    let mut weights = Vec::with_capacity(m * v);
    for t in targets {
        if t.probs.len() != v {
            return Err(Error::InvalidConfig(format!(
                "target over {} tokens for {v}-way logits",
                t.probs.len()
            )));
        }
        weights.extend_from_slice(&t.probs);
    }
    let neg_ent: Vec<f64> = targets.iter().map(TargetDistribution::neg_entropy).collect();

    let logp = g.log_softmax_rows(logits)?;
    let cross = g.row_dot(logp, Array::new(vec![m, v], weights)?)?;
    let neg_cross = g.scale(cross, -1.0);
    let ent = g.constant(Array::vector(neg_ent));
    let kl = g.add(neg_cross, ent)?;
    let terms = if clip_enabled { g.clamp_min(kl, epsilon) } else { kl };

    let kl_values = g.value(kl).data();
    let logp_values = g.value(logp);
    let records = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let lp = logp_values.row(i)[t.gold];
            TokenLossRecord {
                position: i,
                kl: kl_values[i],
                clipped: clip_enabled && kl_values[i] <= epsilon,
                branch: t.branch,
                ce_equivalent: -lp,
                gold_logprob: lp,
            }
        })
        .collect();
    Ok((terms, records))
}

/// Where π_flt comes from for the current step.
#[derive(Clone, Copy, Debug)]
pub enum FilterSource<'a> {
    /// The logits being trained (recomputed every step).
    Current,
    /// Logits of the unedited model for the same contexts.
    Frozen(&'a Array),
}

/// Summed clipped-KL loss over answer positions.
///
/// `logits` holds one row per answer position. The targets are built from
/// plain values, so no gradient flows through them.
pub fn overtone_loss(
    g: &mut Graph,
    logits: NodeId,
    gold: &[usize],
    cfg: &LossConfig,
    source: FilterSource<'_>,
) -> Result<(NodeId, Vec<TokenLossRecord>)> {
    cfg.validate()?;
    let (m, _) = check_gold(g.value(logits), gold)?;
    let flt_logits = if cfg.dynamic_target {
        g.value(logits).clone()
    } else {
        match source {
            FilterSource::Frozen(a) if a.shape() == g.value(logits).shape() => a.clone(),
            FilterSource::Frozen(a) => {
                return Err(Error::InvalidConfig(format!(
                    "frozen logits {:?} do not match {:?}",
                    a.shape(),
                    g.value(logits).shape()
                )))
            }
            FilterSource::Current => {
                return Err(Error::Missing(
                    "frozen pre-edit logits are required when dynamic_target is off".into(),
                ))
            }
        }
    };
    let targets = (0..m)
        .map(|i| target_for_row(flt_logits.row(i), gold[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    let (terms, records) = token_kl_clipped(g, logits, &targets, cfg.epsilon, cfg.clip_enabled)?;
    Ok((g.sum(terms), records))
}

#[cfg(test)]
mod tests;
