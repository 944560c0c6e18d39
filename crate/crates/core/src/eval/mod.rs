//! Edit metrics, the per-token underfitting degree and loss-curve summaries.

use serde::{Deserialize, Serialize};

use crate::bench::{EncodedRequest, Probe};
use crate::error::{Error, Result};
use crate::lm::{Trainable, Transformer};
use crate::tensor::{kernels, Array, Graph};

/// Rows of the model's logits that predict each answer token of each probe,
/// with teacher forcing on the probe's answer. One `[m, V]` array per probe.
pub fn answer_logits(model: &Transformer, probes: &[&Probe]) -> Result<Vec<Array>> {
    if probes.is_empty() {
        return Ok(Vec::new());
    }
    let contexts: Vec<Vec<usize>> = probes.iter().map(|p| p.context()).collect();
    let seqs: Vec<&[usize]> = contexts.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let fwd = model.forward_graph(&mut g, &seqs, &Trainable::Nothing)?;
    let all = g.value(fwd.logits);
    let v = model.config.vocab_size;
    probes
        .iter()
        .zip(&fwd.offsets)
        .map(|(p, &off)| {
            let start = off + p.first_answer_row();
            let m = p.answer.len();
            let mut data = Vec::with_capacity(m * v);
            for i in 0..m {
                data.extend_from_slice(all.row(start + i));
            }
            Ok(Array::new(vec![m, v], data)?)
        })
        .collect()
}

fn match_rate(logits: &Array, expected: &[usize]) -> f64 {
    let hits = expected
        .iter()
        .enumerate()
        .filter(|&(i, &t)| kernels::argmax(logits.row(i)) == t)
        .count();
    hits as f64 / expected.len() as f64
}

/// Teacher-forced fraction of answer positions whose argmax is the gold token.
pub fn token_match_accuracy(model: &Transformer, probe: &Probe) -> Result<f64> {
    if probe.answer.is_empty() {
        return Err(Error::InvalidRequest("empty gold answer".into()));
    }
    let logits = answer_logits(model, &[probe])?;
    Ok(match_rate(&logits[0], &probe.answer))
}

/// Mean over probes of the per-token CE of their gold answers; `None` for no probes.
pub fn gold_ce(model: &Transformer, probes: &[&Probe]) -> Result<Option<f64>> {
    if probes.is_empty() {
        return Ok(None);
    }
    let logits = answer_logits(model, probes)?;
    let total: f64 = probes
        .iter()
        .zip(&logits)
        .map(|(p, l)| {
            let ce: f64 = p
                .answer
                .iter()
                .enumerate()
                .map(|(i, &t)| -kernels::log_softmax(l.row(i))[t])
                .sum();
            ce / p.answer.len() as f64
        })
        .sum();
    Ok(Some(total / probes.len() as f64))
}

/// The unedited model's argmax tokens on each locality probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreEditAnswers {
    pub locality: Vec<Vec<usize>>,
}

impl PreEditAnswers {
    pub fn compute(pre_edit: &Transformer, request: &EncodedRequest) -> Result<Self> {
        let probes: Vec<&Probe> = request.locality.iter().collect();
        let locality = answer_logits(pre_edit, &probes)?
            .iter()
            .map(|l| (0..l.shape()[0]).map(|i| kernels::argmax(l.row(i))).collect())
            .collect();
        Ok(Self { locality })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub rel: usize,
    pub gen: usize,
    pub por: usize,
    pub loc: usize,
}

/// Percentages in `[0, 100]`; `por` is absent when no case had portability probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub gen: f64,
    pub por: Option<f64>,
    pub loc: f64,
    pub avg: f64,
    pub n_cases: CaseCounts,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl MetricsReport {
    fn new(rel: f64, gen: f64, por: Option<f64>, loc: f64, n_cases: CaseCounts) -> Self {
        let mut parts = vec![rel, gen, loc];
        parts.extend(por);
        Self {
            rel,
            gen,
            por,
            loc,
            avg: mean(&parts),
            n_cases,
        }
    }

    /// Mean of each metric over reports; portability over the reports that have it.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Missing("no reports to aggregate".into()));
        }
        let pick = |f: fn(&MetricsReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
        let por: Vec<f64> = reports.iter().filter_map(|r| r.por).collect();
        let n_cases = reports.iter().fold(CaseCounts::default(), |acc, r| CaseCounts {
            rel: acc.rel + r.n_cases.rel,
            gen: acc.gen + r.n_cases.gen,
            por: acc.por + r.n_cases.por,
            loc: acc.loc + r.n_cases.loc,
        });
        Ok(Self::new(
            pick(|r| r.rel),
            pick(|r| r.gen),
            (!por.is_empty()).then(|| mean(&por)),
            pick(|r| r.loc),
            n_cases,
        ))
    }

    pub const CSV_HEADER: &'static str = "run_id,method,loss,T,rel,gen,por,loc,avg,seed";

    pub fn csv_row(&self, run_id: &str, method: &str, loss: &str, steps: usize, seed: u64) -> String {
        let por = self.por.map(|p| format!("{p:.4}")).unwrap_or_default();
        format!(
            "{run_id},{method},{loss},{steps},{:.4},{:.4},{por},{:.4},{:.4},{seed}",
            self.rel, self.gen, self.loc, self.avg
        )
    }
}

/// Rel/Gen/Por against the new answers, Loc against the pre-edit answers.
pub fn evaluate_suite(model: &Transformer, request: &EncodedRequest, pre: &PreEditAnswers) -> Result<MetricsReport> {
    if pre.locality.len() != request.locality.len() {
        return Err(Error::InvalidRequest(format!(
            "{} cached locality answers for {} probes",
            pre.locality.len(),
            request.locality.len()
        )));
    }
    let mut probes: Vec<&Probe> = vec![&request.reliability];
    probes.extend(&request.generality);
    probes.extend(&request.portability);
    probes.extend(&request.locality);
    let logits = answer_logits(model, &probes)?;
    let (ng, np) = (request.generality.len(), request.portability.len());

    let rel = 100.0 * match_rate(&logits[0], &request.reliability.answer);
    let score = |range: std::ops::Range<usize>, expected: &dyn Fn(usize) -> Vec<usize>| -> Vec<f64> {
        range
            .map(|k| 100.0 * match_rate(&logits[k], &expected(k)))
            .collect()
    };
    let gen = score(1..1 + ng, &|k| probes[k].answer.clone());
    let por = score(1 + ng..1 + ng + np, &|k| probes[k].answer.clone());
    let base = 1 + ng + np;
    let loc = score(base..probes.len(), &|k| pre.locality[k - base].clone());
    Ok(MetricsReport::new(
        rel,
        if gen.is_empty() { 0.0 } else { mean(&gen) },
        (!por.is_empty()).then(|| mean(&por)),
        if loc.is_empty() { 100.0 } else { mean(&loc) },
        CaseCounts {
            rel: 1,
            gen: ng,
            por: np,
            loc: request.locality.len(),
        },
    ))
}

/// Which token anchors the pre-edit log-likelihood of the underfitting degree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UdAnchor {
    /// The unedited model's own argmax at each teacher-forced context.
    #[default]
    PreEditGreedy,
    /// The edit target token on both sides.
    EditTarget,
}

/// Cached pre-edit side of the underfitting degree for one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdReference {
    pub anchor: UdAnchor,
    pub anchor_tokens: Vec<usize>,
    pub reference_logprob: Vec<f64>,
}

impl UdReference {
    pub fn new(pre_edit: &Transformer, probe: &Probe, anchor: UdAnchor) -> Result<Self> {
        let logits = answer_logits(pre_edit, &[probe])?.remove(0);
        Ok(Self::from_logits(&logits, &probe.answer, anchor))
    }

    /// From pre-edit answer rows already at hand.
    pub fn from_logits(logits: &Array, gold: &[usize], anchor: UdAnchor) -> Self {
        let mut anchor_tokens = Vec::with_capacity(gold.len());
        let mut reference_logprob = Vec::with_capacity(gold.len());
        for (i, &y) in gold.iter().enumerate() {
            let row = logits.row(i);
            let tok = match anchor {
                UdAnchor::PreEditGreedy => kernels::argmax(row),
                UdAnchor::EditTarget => y,
            };
            anchor_tokens.push(tok);
            reference_logprob.push(kernels::log_softmax(row)[tok]);
        }
        Self {
            anchor,
            anchor_tokens,
            reference_logprob,
        }
    }
}

/// `UD_i = log π_θ0(anchor_i | c_i) - log π_θt(y_i | c_i)`; negative means overfitted.
pub fn underfitting_degree(reference: Option<&UdReference>, current_gold_logprob: &[f64]) -> Result<Vec<f64>> {
    let reference = reference.ok_or_else(|| Error::Missing("no cached pre-edit reference for UD".into()))?;
    if reference.reference_logprob.len() != current_gold_logprob.len() {
        return Err(Error::InvalidRequest(format!(
            "UD reference covers {} positions, got {}",
            reference.reference_logprob.len(),
            current_gold_logprob.len()
        )));
    }
    Ok(reference
        .reference_logprob
        .iter()
        .zip(current_gold_logprob)
        .map(|(r, c)| r - c)
        .collect())
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

mod curves;

pub use curves::{trajectory_summary, CurvePoint, TrajectorySummary};
