//! Knowledge editing by fine-tuning one FFN layer or by low-rank adapters,
//! driven by either plain CE or the smoothed objective.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::{EncodedRequest, Probe};
use crate::error::{Error, Result};
use crate::eval::{answer_logits, gold_ce, underfitting_degree, UdAnchor, UdReference};
use crate::lm::{LoraPair, LoraSet, Trainable, Transformer};
use crate::optim::{Optimizer, OptimizerKind};
use crate::overtone::{ce_loss, overtone_loss, Branch, FilterSource, LossConfig, TokenLossRecord};
use crate::tensor::{Array, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullLayer,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMethod {
    pub kind: MethodKind,
    pub target_layers: Vec<usize>,
    #[serde(default)]
    pub lora_rank: usize,
    #[serde(default)]
    pub lora_alpha: f64,
    /// Weight suffixes adapted in every target layer, e.g. `attn.wq`.
    #[serde(default)]
    pub lora_targets: Vec<String>,
}

const FFN_PARAMS: [&str; 4] = ["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"];

impl EditMethod {
    /// Fine-tunes the FFN of the middle layer.
    pub fn full_layer(n_layers: usize) -> Self {
        Self {
            kind: MethodKind::FullLayer,
            target_layers: vec![n_layers / 2],
            lora_rank: 0,
            lora_alpha: 0.0,
            lora_targets: Vec::new(),
        }
    }

    /// Rank-4 adapters on the FFN matrices of every layer.
    pub fn lora(n_layers: usize) -> Self {
        Self {
            kind: MethodKind::Lora,
            target_layers: (0..n_layers).collect(),
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: vec!["ffn.w1".into(), "ffn.w2".into()],
        }
    }

    /// Dense weights receiving an adapter (lora) or being trained (full layer).
    pub fn target_weights(&self) -> Vec<String> {
        let suffixes: Vec<&str> = match self.kind {
            MethodKind::FullLayer => FFN_PARAMS.to_vec(),
            MethodKind::Lora => self.lora_targets.iter().map(String::as_str).collect(),
        };
        self.target_layers
            .iter()
            .flat_map(|l| suffixes.iter().map(move |s| format!("layers.{l}.{s}")))
            .collect()
    }

    /// Names of the parameters an edit may change.
    pub fn designated_parameters(&self) -> BTreeSet<String> {
        match self.kind {
            MethodKind::FullLayer => self.target_weights().into_iter().collect(),
            MethodKind::Lora => self
                .target_weights()
                .iter()
                .flat_map(|w| [LoraSet::a_name(w), LoraSet::b_name(w)])
                .collect(),
        }
    }

    pub fn validate(&self, model: &Transformer) -> Result<()> {
        let depth = model.config.n_layers;
        if self.target_layers.is_empty() {
            return Err(Error::InvalidConfig("no target layers".into()));
        }
        if let Some(l) = self.target_layers.iter().find(|&&l| l >= depth) {
            return Err(Error::InvalidConfig(format!(
                "target layer {l} outside a {depth}-layer model"
            )));
        }
        if self.kind == MethodKind::Lora {
            if self.lora_targets.is_empty() {
                return Err(Error::InvalidConfig("no lora target matrices".into()));
            }
            if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
                return Err(Error::InvalidConfig(
                    "lora rank and alpha must be positive".into(),
                ));
            }
            for w in self.target_weights() {
                let shape = model
                    .params
                    .get(&w)
                    .ok_or_else(|| Error::InvalidConfig(format!("no weight {w}")))?
                    .shape();
                if shape.len() != 2 {
                    return Err(Error::InvalidConfig(format!("{w} is not a matrix")));
                }
                let limit = shape[0].min(shape[1]);
                if self.lora_rank > limit {
                    return Err(Error::InvalidConfig(format!(
                        "lora rank {} exceeds min dimension {limit} of {w}",
                        self.lora_rank
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Adds fresh adapters: `A ~ N(0, 1/d_in)`, `B = 0`, so the adapted forward
/// equals the base forward until the first update.
pub fn attach_lora(model: &mut Transformer, method: &EditMethod, seed: u64) -> Result<()> {
    if method.kind != MethodKind::Lora {
        return Err(Error::InvalidConfig("attach_lora needs a lora method".into()));
    }
    method.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for w in method.target_weights() {
        let (din, dout) = model.params[&w].dims2("attach_lora")?;
        let normal = Normal::new(0.0, 1.0 / (din as f64).sqrt()).expect("valid std");
        let a: Vec<f64> = (0..din * method.lora_rank).map(|_| normal.sample(&mut rng)).collect();
        adapters.insert(
            w,
            LoraPair {
                a: Array::new(vec![din, method.lora_rank], a)?,
                b: Array::zeros(&[method.lora_rank, dout]),
            },
        );
    }
    model.lora = Some(LoraSet {
        rank: method.lora_rank,
        alpha: method.lora_alpha,
        adapters,
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditLoss {
    Ce,
    Overtone(LossConfig),
}

impl EditLoss {
    pub fn label(&self) -> &'static str {
        match self {
            EditLoss::Ce => "ce",
            EditLoss::Overtone(_) => "overtone",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRunConfig {
    pub method: EditMethod,
    pub loss: EditLoss,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Sequential lora only: fold the adapter into the weights and start a
    /// fresh one before each edit.
    #[serde(default)]
    pub reset_adapters: bool,
    /// Record generality/portability gold CE at every step.
    #[serde(default)]
    pub track_probes: bool,
    #[serde(default)]
    pub ud_anchor: UdAnchor,
}

impl EditRunConfig {
    /// Method defaults with Adam and the method's default objective settings.
    pub fn defaults(method: EditMethod, use_overtone: bool) -> Self {
        let (lr, loss_cfg) = match method.kind {
            MethodKind::Lora => (1e-2, LossConfig::lora_defaults()),
            MethodKind::FullLayer => (5e-3, LossConfig::ftm_defaults()),
        };
        Self {
            method,
            loss: if use_overtone {
                EditLoss::Overtone(loss_cfg)
            } else {
                EditLoss::Ce
            },
            steps: 40,
            learning_rate: lr,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            reset_adapters: false,
            track_probes: false,
            ud_anchor: UdAnchor::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if let EditLoss::Overtone(c) = &self.loss {
            c.validate()?;
        }
        Ok(())
    }
}

/// State of one optimization step, taken before its update is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub tokens: Vec<TokenLossRecord>,
    pub ud: Vec<f64>,
    pub frac_clipped: f64,
    /// Whether the optimizer changed any parameter at this step.
    pub updated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub por_loss: Option<f64>,
}

/// Generality and portability gold CE of the final edited model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalProbes {
    pub gen_loss: Option<f64>,
    pub por_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTrajectory {
    pub steps: Vec<StepRecord>,
    /// Frobenius norm of the change to each layer's effective weights.
    pub delta_norms: BTreeMap<String, f64>,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_probes: Option<FinalProbes>,
}

fn probe_losses(model: &Transformer, request: &EncodedRequest) -> Result<FinalProbes> {
    let gen: Vec<&Probe> = request.generality.iter().collect();
    let por: Vec<&Probe> = request.portability.iter().collect();
    Ok(FinalProbes {
        gen_loss: gold_ce(model, &gen)?,
        por_loss: gold_ce(model, &por)?,
    })
}

fn layer_of(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("layers"), Some(l)) => format!("layers.{l}"),
        (Some(first), _) => first.to_string(),
        _ => name.to_string(),
    }
}

/// Norm of `effective(after) - effective(before)` grouped by layer, over the
/// method's target weights.
fn delta_norms(before: &Transformer, after: &Transformer, method: &EditMethod) -> Result<BTreeMap<String, f64>> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for w in method.target_weights() {
        let eff = |m: &Transformer| -> Result<Array> {
            let mut out = m.params[&w].clone();
            if let Some(lora) = &m.lora {
                if let Some(pair) = lora.adapters.get(&w) {
                    out.axpy(lora.scale(), &pair.a.matmul(&pair.b)?)?;
                }
            }
            Ok(out)
        };
        let (a, b) = (eff(after)?, eff(before)?);
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        *sq.entry(layer_of(&w)).or_default() += s;
    }
    Ok(sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect())
}

/// Edits `model` in place so that the reliability prompt answers the new
/// target. `pre_edit` is the model before this edit; it supplies the UD
/// reference and, for the frozen-target ablation, the filter logits.
pub fn edit_single(
    model: &mut Transformer,
    request: &EncodedRequest,
    cfg: &EditRunConfig,
    pre_edit: &Transformer,
) -> Result<EditTrajectory> {
    cfg.validate()?;
    cfg.method.validate(model)?;
    let probe = &request.reliability;
    let context = probe.context();
    model.check_tokens(&context)?;
    for p in request.probes() {
        model.check_tokens(&p.context())?;
    }
    if cfg.method.kind == MethodKind::Lora && model.lora.is_none() {
        attach_lora(model, &cfg.method, cfg.seed)?;
    }
    let start_state = model.clone();

    let frozen = answer_logits(pre_edit, &[probe])?.remove(0);
    let ud_ref = UdReference::from_logits(&frozen, &probe.answer, cfg.ud_anchor);
    let designated = cfg.method.designated_parameters();
    let trainable = Trainable::Only(designated.clone());
    let rows: Vec<usize> = (0..probe.answer.len()).map(|i| probe.first_answer_row() + i).collect();

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut aborted = false;
    let mut backup: Option<BTreeMap<String, Array>> = None;

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &[&context], &trainable)?;
        let logits = g.gather(fwd.logits, &rows)?;
        let (loss, tokens) = match &cfg.loss {
            EditLoss::Ce => {
                let (loss, lps) = ce_loss(&mut g, logits, &probe.answer)?;
                let tokens = lps
                    .iter()
                    .enumerate()
                    .map(|(i, &lp)| TokenLossRecord {
                        position: i,
                        kl: -lp,
                        clipped: false,
                        branch: Branch::Delta,
                        ce_equivalent: -lp,
                        gold_logprob: lp,
                    })
                    .collect::<Vec<_>>();
                (loss, tokens)
            }
            EditLoss::Overtone(c) => overtone_loss(&mut g, logits, &probe.answer, c, FilterSource::Frozen(&frozen))?,
        };
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            log::warn!("edit aborted at step {step}: loss is not finite");
            if let Some(saved) = backup.take() {
                for (name, v) in saved {
                    *model.param_mut(&name).expect("designated parameter") = v;
                }
            }
            aborted = true;
            break;
        }
        let gold_lp: Vec<f64> = tokens.iter().map(|t| t.gold_logprob).collect();
        let ud = underfitting_degree(Some(&ud_ref), &gold_lp)?;
        let frac_clipped = tokens.iter().filter(|t| t.clipped).count() as f64 / tokens.len() as f64;
        let probes = if cfg.track_probes {
            Some(probe_losses(model, request)?)
        } else {
            None
        };

        g.backward(loss)?;
        let grads: BTreeMap<String, Array> = fwd
            .leaves
            .iter()
            .filter_map(|(name, &id)| g.grad(id).map(|gr| (name.clone(), gr.clone())))
            .collect();
        // a step with an exactly zero gradient is skipped so that momentum
        // cannot move parameters the loss no longer asks to change
        let all_zero = grads.values().all(|gr| gr.data().iter().all(|&x| x == 0.0));
        let updated = !all_zero && cfg.learning_rate > 0.0;
        if updated {
            backup = Some(
                designated
                    .iter()
                    .map(|n| (n.clone(), model.param(n).expect("designated parameter").clone()))
                    .collect(),
            );
            opt.step(model, &grads, cfg.learning_rate)?;
        }
        steps.push(StepRecord {
            step,
            loss: value,
            tokens,
            ud,
            frac_clipped,
            updated,
            gen_loss: probes.and_then(|p| p.gen_loss),
            por_loss: probes.and_then(|p| p.por_loss),
        });
    }

    let final_probes = if cfg.track_probes {
        Some(probe_losses(model, request)?)
    } else {
        None
    };
    Ok(EditTrajectory {
        steps,
        delta_norms: delta_norms(&start_state, model, &cfg.method)?,
        aborted,
        final_probes,
    })
}

/// One edit of a continual sequence: position `index` in the sequence picks
/// the seed offset, and the model state just before the edit is its
/// pre-edit reference.
pub fn edit_next(model: &mut Transformer, request: &EncodedRequest, cfg: &EditRunConfig, index: usize) -> Result<EditTrajectory> {
    if cfg.method.kind == MethodKind::Lora && cfg.reset_adapters && model.lora.is_some() {
        model.merge_lora()?;
    }
    let mut run = cfg.clone();
    run.seed = cfg.seed.wrapping_add(index as u64);
    let pre_edit = model.clone();
    edit_single(model, request, &run, &pre_edit)
}

/// Applies the requests one after another to the same model. Lora edits
/// share one adapter unless `reset_adapters` is set.
pub fn edit_sequential(
    model: &mut Transformer,
    requests: &[EncodedRequest],
    cfg: &EditRunConfig,
) -> Result<Vec<EditTrajectory>> {
    if requests.is_empty() {
        return Err(Error::InvalidRequest("empty request sequence".into()));
    }
    requests
        .iter()
        .enumerate()
        .map(|(index, request)| {
            edit_next(model, request, cfg, index).map_err(|e| Error::EditFailed {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
