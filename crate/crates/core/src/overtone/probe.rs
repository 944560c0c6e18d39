//! Wall-clock cost of the smoothed objective relative to plain CE.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ce_loss, overtone_loss, FilterSource, LossConfig};
use crate::error::{Error, Result};
use crate::tensor::{Array, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub vocab_size: usize,
    /// Seconds per token for CE forward + backward.
    pub ce_time: f64,
    /// Seconds per token for the smoothed objective forward + backward.
    pub overtone_time: f64,
    /// `overtone_time - ce_time`.
    pub extra_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadTable {
    pub rows: Vec<OverheadRow>,
    /// Least-squares slope of `ln extra_time` against `ln |V|`; `None` with
    /// fewer than two rows.
    pub exponent: Option<f64>,
}

const TOKENS: usize = 32;

fn time_per_token<F: FnMut()>(mut run: F, repeats: usize, inner: usize) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..inner {
            run();
        }
        let elapsed = start.elapsed().as_secs_f64() / inner as f64;
        best = best.min(elapsed);
    }
    best / TOKENS as f64
}

/// Times both objectives on random logits for each vocabulary size.
pub fn loss_overhead_probe(vocab_sizes: &[usize], repeats: usize) -> Result<OverheadTable> {
    if vocab_sizes.is_empty() || vocab_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "vocab sizes must be non-empty and strictly ascending".into(),
        ));
    }
    let cfg = LossConfig::lora_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(vocab_sizes.len());
    for &v in vocab_sizes {
        let data: Vec<f64> = (0..TOKENS * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let logits = Array::new(vec![TOKENS, v], data)?;
        let gold: Vec<usize> = (0..TOKENS).map(|_| rng.gen_range(0..v)).collect();
        // keep each measurement around a few milliseconds
        let inner = (4_000_000 / (TOKENS * v)).max(1);

        let ce_time = time_per_token(
            || {
                let mut g = Graph::new();
                let z = g.param(logits.clone());
                let (loss, _) = ce_loss(&mut g, z, &gold).expect("valid shapes");
                g.backward(loss).expect("scalar");
            },
            repeats,
            inner,
        );
        let overtone_time = time_per_token(
            || {
                let mut g = Graph::new();
                let z = g.param(logits.clone());
                let (loss, _) =
                    overtone_loss(&mut g, z, &gold, &cfg, FilterSource::Current).expect("valid shapes");
                g.backward(loss).expect("scalar");
            },
            repeats,
            inner,
        );
        rows.push(OverheadRow {
            vocab_size: v,
            ce_time,
            overtone_time,
            extra_time: overtone_time - ce_time,
        });
    }
    let exponent = fit_exponent(&rows);
    Ok(OverheadTable { rows, exponent })
}

fn fit_exponent(rows: &[OverheadRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| r.extra_time <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.vocab_size as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.extra_time.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_exact_power_law() {
        let rows: Vec<OverheadRow> = [100usize, 200, 400]
            .iter()
            .map(|&v| OverheadRow {
                vocab_size: v,
                ce_time: 0.0,
                overtone_time: 0.0,
                extra_time: 3.0 * (v as f64).powf(1.1),
            })
            .collect();
        assert!((fit_exponent(&rows).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn single_size_gives_one_row() {
        let table = loss_overhead_probe(&[64], 1).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.exponent.is_none());
    }

    #[test]
    fn rejects_unsorted_sizes() {
        assert!(loss_overhead_probe(&[128, 64], 1).is_err());
    }
}
