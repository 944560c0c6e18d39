//! Single-edit and continual-edit protocols over a request list.

use ovtlab_core::bench::EncodedRequest;
use ovtlab_core::editors::{edit_next, edit_single, EditRunConfig, EditTrajectory};
use ovtlab_core::eval::{evaluate_suite, MetricsReport, PreEditAnswers};
use ovtlab_core::lm::Transformer;
use ovtlab_core::Result;

/// Result of one request. A failed edit carries its error message.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub index: usize,
    pub trajectory: Option<EditTrajectory>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    /// Edited model, kept only when asked for.
    pub model: Option<Transformer>,
}

impl EditOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.trajectory.as_ref().is_some_and(|t| t.aborted)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProtocolOptions {
    /// 1 edits every request from the base model; larger values edit
    /// consecutive groups of that many requests sequentially and evaluate each
    /// group after its last edit.
    pub seq_len: usize,
    pub threads: usize,
    pub keep_models: bool,
}

fn single(base: &Transformer, request: &EncodedRequest, cfg: &EditRunConfig, index: usize, keep: bool) -> EditOutcome {
    let run = || -> Result<(EditTrajectory, MetricsReport, Transformer)> {
        let pre = PreEditAnswers::compute(base, request)?;
        let mut model = base.clone();
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(index as u64);
        let traj = edit_single(&mut model, request, &c, base)?;
        let report = evaluate_suite(&model, request, &pre)?;
        Ok((traj, report, model))
    };
    match run() {
        Ok((t, r, m)) => EditOutcome {
            index,
            trajectory: Some(t),
            report: Some(r),
            error: None,
            model: keep.then_some(m),
        },
        Err(e) => EditOutcome {
            index,
            trajectory: None,
            report: None,
            error: Some(e.to_string()),
            model: None,
        },
    }
}

fn sequence(base: &Transformer, requests: &[EncodedRequest], offset: usize, cfg: &EditRunConfig, keep: bool) -> Vec<EditOutcome> {
    let mut model = base.clone();
    let mut outcomes = Vec::with_capacity(requests.len());
    for (i, request) in requests.iter().enumerate() {
        let (trajectory, error) = match edit_next(&mut model, request, cfg, i) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        outcomes.push(EditOutcome {
            index: offset + i,
            trajectory,
            report: None,
            error,
            model: None,
        });
    }
    for (o, request) in outcomes.iter_mut().zip(requests) {
        let eval = PreEditAnswers::compute(base, request).and_then(|pre| evaluate_suite(&model, request, &pre));
        match eval {
            Ok(r) => o.report = Some(r),
            Err(e) => o.error = Some(e.to_string()),
        }
    }
    if keep {
        if let Some(last) = outcomes.last_mut() {
            last.model = Some(model);
        }
    }
    outcomes
}

/// Runs every request and returns outcomes in request order. Results do not
/// depend on the thread count.
pub fn run_protocol(base: &Transformer, requests: &[EncodedRequest], cfg: &EditRunConfig, opts: ProtocolOptions) -> Vec<EditOutcome> {
    if opts.seq_len > 1 {
        return requests
            .chunks(opts.seq_len)
            .enumerate()
            .flat_map(|(c, chunk)| sequence(base, chunk, c * opts.seq_len, cfg, opts.keep_models))
            .collect();
    }
    let threads = opts.threads.clamp(1, requests.len().max(1));
    if threads == 1 {
        return requests
            .iter()
            .enumerate()
            .map(|(i, r)| single(base, r, cfg, i, opts.keep_models))
            .collect();
    }
    let mut outcomes: Vec<EditOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w..requests.len())
                        .step_by(threads)
                        .map(|i| single(base, &requests[i], cfg, i, opts.keep_models))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("edit worker panicked"))
            .collect()
    });
    outcomes.sort_by_key(|o| o.index);
    outcomes
}

/// Worker count from `OVTLAB_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("OVTLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(available),
        _ => available,
    }
}
