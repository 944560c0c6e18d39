use super::{Array, Graph, NodeId, TensorError};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Coordinates where a perturbed evaluation was not finite.
    pub non_finite: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }
}

/// Relative error used throughout: `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn evaluate<F>(f: &F, params: &[Array], want_grad: bool) -> Result<(f64, Vec<Array>), TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| graph.leaf(p.clone(), want_grad))
        .collect();
    let root = f(&mut graph, &ids)?;
    let value = graph.value(root).item()?;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    graph.backward(root)?;
    let grads = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array::zeros(p.shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Central-difference gradient check of a scalar graph function.
///
/// `f` receives fresh leaves for `params` and must return a scalar node.
/// `max_coords` limits how many coordinates are perturbed per parameter
/// (evenly strided); `None` checks every coordinate.
pub fn grad_check<F>(
    f: F,
    params: &[Array],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::InvalidStep(h));
    }
    let (_, analytic) = evaluate(&f, params, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: Vec::new(),
        checked: 0,
    };
    let mut work: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let len = param.len();
        let stride = match max_coords {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for ci in (0..len).step_by(stride) {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = evaluate(&f, &work, false)?.0;
            work[pi].data_mut()[ci] = orig - h;
            let minus = evaluate(&f, &work, false)?.0;
            work[pi].data_mut()[ci] = orig;
            report.checked += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push((pi, ci));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[ci], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}
