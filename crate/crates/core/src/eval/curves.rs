use serde::{Deserialize, Serialize};

use crate::editors::EditTrajectory;

/// Mean over runs at one step. The last point is the state after the final
/// update, for which no clip fraction exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub gen_loss: Option<f64>,
    pub por_loss: Option<f64>,
    pub frac_clipped: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub points: Vec<CurvePoint>,
    pub n_runs: usize,
    /// Portability loss first drops below its initial value, then ends above it.
    pub por_dip_then_rise: bool,
    pub por_final_above_initial: bool,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-step generality/portability gold CE averaged over trajectories
/// recorded with probe tracking.
pub fn trajectory_summary(trajs: &[EditTrajectory]) -> TrajectorySummary {
    let len = trajs.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut points: Vec<CurvePoint> = (0..len)
        .map(|s| {
            let at = || trajs.iter().filter_map(move |t| t.steps.get(s));
            CurvePoint {
                step: s,
                gen_loss: mean_of(at().map(|r| r.gen_loss)),
                por_loss: mean_of(at().map(|r| r.por_loss)),
                frac_clipped: mean_of(at().map(|r| Some(r.frac_clipped))),
            }
        })
        .collect();
    if trajs.iter().any(|t| t.final_probes.is_some()) {
        points.push(CurvePoint {
            step: len,
            gen_loss: mean_of(trajs.iter().map(|t| t.final_probes.and_then(|f| f.gen_loss))),
            por_loss: mean_of(trajs.iter().map(|t| t.final_probes.and_then(|f| f.por_loss))),
            frac_clipped: None,
        });
    }
    let por: Vec<f64> = points.iter().filter_map(|p| p.por_loss).collect();
    let (above, dip) = match (por.first(), por.last()) {
        (Some(&first), Some(&last)) => {
            let above = last > first;
            let min = por.iter().copied().fold(f64::INFINITY, f64::min);
            (above, above && min < first)
        }
        _ => (false, false),
    };
    TrajectorySummary {
        points,
        n_runs: trajs.len(),
        por_dip_then_rise: dip,
        por_final_above_initial: above,
    }
}
