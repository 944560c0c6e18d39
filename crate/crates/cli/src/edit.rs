use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use ovtlab_core::bench::{read_jsonl, EditRequest, EncodedRequest};
use ovtlab_core::editors::{EditLoss, EditMethod, EditRunConfig};
use ovtlab_core::eval::{trajectory_summary, MetricsReport};
use ovtlab_core::lm::{Checkpoint, Transformer, Vocab};
use serde_json::json;

use crate::gen_data::VOCAB_FILE;
use crate::manifest::ManifestBuilder;
use crate::protocol::{run_protocol, thread_budget, EditOutcome, ProtocolOptions};
use crate::{merge_json, read_json_file, EditArgs, Failure, LossArg, MethodArg, RunInputs};

/// Edit settings shared by `edit` and `ablate`. Unset flags fall back to the
/// config file, then to the method defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct EditFlags {
    #[arg(long, value_enum, default_value_t = MethodArg::Lora)]
    pub method: MethodArg,
    /// JSON overlay onto the default edit run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub nsigma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Default for MethodArg {
    fn default() -> Self {
        MethodArg::Lora
    }
}

/// Defaults < config file < flags.
pub fn build_edit_config(flags: &EditFlags, loss: LossArg, n_layers: usize) -> anyhow::Result<EditRunConfig> {
    let method = match flags.method {
        MethodArg::Ftm => EditMethod::full_layer(n_layers),
        MethodArg::Lora => EditMethod::lora(n_layers),
    };
    let defaults = EditRunConfig::defaults(method, loss == LossArg::Overtone);
    let mut value = serde_json::to_value(&defaults)?;
    if let Some(path) = &flags.config {
        let mut patch = read_json_file(path)?;
        // the loss kind is chosen by --loss, the file only tunes it
        if let Some(l) = patch.get_mut("loss").and_then(|l| l.as_object_mut()) {
            l.remove("kind");
        }
        merge_json(&mut value, patch);
    }
    let mut cfg: EditRunConfig = serde_json::from_value(value).context("invalid edit config")?;
    match &mut cfg.loss {
        EditLoss::Overtone(c) => {
            if let Some(v) = flags.lambda {
                c.lambda = v;
            }
            if let Some(v) = flags.epsilon {
                c.epsilon = v;
            }
            if let Some(v) = flags.nsigma {
                c.n_sigma = v;
            }
        }
        EditLoss::Ce => {
            if flags.lambda.is_some() || flags.epsilon.is_some() || flags.nsigma.is_some() {
                log::warn!("--lambda/--epsilon/--nsigma are ignored with --loss ce");
            }
        }
    }
    if let Some(v) = flags.steps {
        cfg.steps = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    cfg.track_probes = true;
    cfg.validate()?;
    Ok(cfg)
}

/// Base model and encoded requests of a run.
pub(crate) struct LoadedInputs {
    pub base: Transformer,
    pub requests: Vec<EncodedRequest>,
    pub files: Vec<PathBuf>,
}

pub(crate) fn load_inputs(inputs: &RunInputs) -> Result<LoadedInputs, Failure> {
    let vocab_path = inputs.vocab.clone().unwrap_or_else(|| {
        inputs
            .requests
            .parent()
            .unwrap_or(Path::new("."))
            .join(VOCAB_FILE)
    });
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let base = Checkpoint::load(&inputs.ckpt)
        .with_context(|| format!("loading {}", inputs.ckpt.display()))?
        .to_model()?;
    if base.config.vocab_size != vocab.len() {
        return Err(Failure::config(anyhow::anyhow!(
            "checkpoint vocabulary of {} does not match {} tokens in {}",
            base.config.vocab_size,
            vocab.len(),
            vocab_path.display()
        )));
    }
    let raw: Vec<EditRequest> = read_jsonl(&inputs.requests)?;
    let end = inputs
        .limit
        .map(|n| inputs.offset + n)
        .unwrap_or(raw.len());
    if inputs.offset >= raw.len() || end > raw.len() {
        return Err(Failure::config(anyhow::anyhow!(
            "requests {}..{end} out of range for {} requests",
            inputs.offset,
            raw.len()
        )));
    }
    let requests = raw[inputs.offset..end]
        .iter()
        .map(|r| EncodedRequest::encode(&vocab, r))
        .collect::<ovtlab_core::Result<Vec<_>>>()?;
    Ok(LoadedInputs {
        base,
        requests,
        files: vec![inputs.ckpt.clone(), inputs.requests.clone(), vocab_path],
    })
}

/// Summary of a finished run directory.
pub(crate) struct RunSummary {
    pub aggregate: Option<MetricsReport>,
    pub failures: usize,
}

/// Runs the protocol and writes trajectories, metrics, curves and the manifest
/// into `dir`.
pub(crate) fn execute_run(
    loaded: &LoadedInputs,
    cfg: &EditRunConfig,
    seq_len: usize,
    save_checkpoints: bool,
    dir: &Path,
    extra_config: serde_json::Value,
) -> Result<RunSummary, Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut config = json!({ "edit": cfg, "seq_len": seq_len });
    merge_json(&mut config, extra_config);
    let mut manifest = ManifestBuilder::new("edit", config, dir);
    for f in &loaded.files {
        manifest.input(f)?;
    }
    let run_id = manifest.run_id();

    let opts = ProtocolOptions {
        seq_len,
        threads: thread_budget(),
        keep_models: save_checkpoints,
    };
    let outcomes = run_protocol(&loaded.base, &loaded.requests, cfg, opts);

    let method = match cfg.method.kind {
        ovtlab_core::editors::MethodKind::FullLayer => "ftm",
        ovtlab_core::editors::MethodKind::Lora => "lora",
    };
    let loss = cfg.loss.label();
    let write = |name: &str, body: String| -> anyhow::Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };

    let mut steps_jsonl = String::new();
    let mut edits_jsonl = String::new();
    let mut metrics_csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for o in &outcomes {
        if let Some(t) = &o.trajectory {
            for s in &t.steps {
                let mut line = serde_json::to_value(s).context("step record")?;
                line["edit"] = json!(o.index);
                steps_jsonl.push_str(&line.to_string());
                steps_jsonl.push('\n');
            }
        }
        let record = json!({
            "edit": o.index,
            "error": o.error,
            "aborted": o.trajectory.as_ref().map(|t| t.aborted),
            "delta_norms": o.trajectory.as_ref().map(|t| &t.delta_norms),
            "final_probes": o.trajectory.as_ref().and_then(|t| t.final_probes),
            "metrics": o.report,
        });
        edits_jsonl.push_str(&record.to_string());
        edits_jsonl.push('\n');
        if let Some(r) = &o.report {
            metrics_csv.push_str(&r.csv_row(&format!("{run_id}:{}", o.index), method, loss, cfg.steps, cfg.seed));
            metrics_csv.push('\n');
        }
    }
    manifest.artifact(&write("trajectories.jsonl", steps_jsonl)?);
    manifest.artifact(&write("edits.jsonl", edits_jsonl)?);
    manifest.artifact(&write("metrics.csv", metrics_csv)?);

    let reports: Vec<MetricsReport> = outcomes.iter().filter_map(|o| o.report.clone()).collect();
    let aggregate = MetricsReport::aggregate(&reports).ok();
    if let Some(agg) = &aggregate {
        let row = agg.csv_row(&run_id, method, loss, cfg.steps, cfg.seed);
        manifest.artifact(&write("aggregate.csv", format!("{}\n{row}\n", MetricsReport::CSV_HEADER))?);
        manifest.artifact(&write(
            "aggregate.json",
            serde_json::to_string_pretty(agg).context("aggregate")? + "\n",
        )?);
    }

    let trajs: Vec<_> = outcomes.iter().filter_map(|o| o.trajectory.clone()).collect();
    let summary = trajectory_summary(&trajs);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut curves = String::from("step,gen_loss,por_loss,frac_clipped\n");
    for p in &summary.points {
        curves.push_str(&format!(
            "{},{},{},{}\n",
            p.step,
            fmt(p.gen_loss),
            fmt(p.por_loss),
            fmt(p.frac_clipped)
        ));
    }
    manifest.artifact(&write("curves.csv", curves)?);

    if save_checkpoints {
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).context("creating checkpoints dir")?;
        for o in &outcomes {
            if let Some(m) = &o.model {
                let mut merged = m.clone();
                merged.merge_lora()?;
                let path = ckpt_dir.join(format!("edit_{}.ckpt", o.index));
                Checkpoint::from_model(&merged, cfg.steps as u64)?.save(&path)?;
                manifest.artifact(&path);
            }
        }
    }
    manifest.finish()?;

    let failures: Vec<&EditOutcome> = outcomes.iter().filter(|o| o.failed()).collect();
    for f in &failures {
        log::warn!(
            "edit {} failed: {}",
            f.index,
            f.error.as_deref().unwrap_or("loss became non-finite")
        );
    }
    Ok(RunSummary {
        aggregate,
        failures: failures.len(),
    })
}

pub fn run(args: &EditArgs) -> Result<(), Failure> {
    let loaded = load_inputs(&args.inputs)?;
    let cfg = build_edit_config(&args.flags, args.loss, loaded.base.config.n_layers).map_err(Failure::config)?;
    let extra = json!({ "offset": args.inputs.offset, "limit": args.inputs.limit });
    let summary = execute_run(&loaded, &cfg, args.seq_len, args.save_checkpoints, &args.inputs.out, extra)?;
    if let Some(a) = &summary.aggregate {
        let por = a.por.map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
        println!(
            "edits {} rel {:.1} gen {:.1} por {por} loc {:.1} avg {:.1}",
            loaded.requests.len(),
            a.rel,
            a.gen,
            a.loc,
            a.avg
        );
    }
    if summary.failures > 0 {
        return Err(Failure::partial(format!(
            "{} of {} edits failed",
            summary.failures,
            loaded.requests.len()
        )));
    }
    Ok(())
}
