use anyhow::Context;
use ovtlab_core::editors::{EditLoss, MethodKind};
use ovtlab_core::overtone::LossConfig;
use serde::Serialize;
use serde_json::json;

use crate::edit::{build_edit_config, execute_run, load_inputs};
use crate::manifest::ManifestBuilder;
use crate::{AblateArgs, Failure, LossArg};

/// One row of the objective ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub label: &'static str,
    pub loss: EditLoss,
}

/// The full objective, each component removed in turn, and plain CE.
pub fn ablation_variants(kind: MethodKind) -> Vec<AblationVariant> {
    let full = match kind {
        MethodKind::FullLayer => LossConfig::ftm_defaults(),
        MethodKind::Lora => LossConfig::lora_defaults(),
    };
    let v = |name, label, loss| AblationVariant { name, label, loss };
    vec![
        v("full", "OVERTONE", EditLoss::Overtone(full)),
        v(
            "wo_clip",
            "w/o clip",
            EditLoss::Overtone(LossConfig { epsilon: 0.0, ..full }),
        ),
        v(
            "wo_dyn",
            "w/o dyn-pi_flt",
            EditLoss::Overtone(LossConfig {
                dynamic_target: false,
                ..full
            }),
        ),
        v(
            "wo_chk",
            "w/o chk-pi_flt",
            EditLoss::Overtone(LossConfig {
                skip_enabled: false,
                ..full
            }),
        ),
        v(
            "wo_flt",
            "w/o flt-pi_flt",
            EditLoss::Overtone(LossConfig {
                filter_enabled: false,
                ..full
            }),
        ),
        v("ce", "CE", EditLoss::Ce),
    ]
}

pub fn run(args: &AblateArgs) -> Result<(), Failure> {
    let loaded = load_inputs(&args.inputs)?;
    let base_cfg = build_edit_config(&args.flags, LossArg::Overtone, loaded.base.config.n_layers).map_err(Failure::config)?;
    let seeds = if args.seeds.is_empty() {
        vec![base_cfg.seed]
    } else {
        args.seeds.clone()
    };
    let variants = ablation_variants(base_cfg.method.kind);
    let out = &args.inputs.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut csv = String::from("variant,label,seed,rel,gen,por,loc,avg,failures\n");
    let mut failures = 0;
    for &seed in &seeds {
        for v in &variants {
            let mut cfg = base_cfg.clone();
            cfg.loss = v.loss.clone();
            cfg.seed = seed;
            let dir = out.join(format!("seed{seed}")).join(v.name);
            let extra = json!({
                "variant": v.name,
                "offset": args.inputs.offset,
                "limit": args.inputs.limit,
            });
            let summary = execute_run(&loaded, &cfg, 1, false, &dir, extra)?;
            failures += summary.failures;
            let cell = |x: Option<f64>| x.map(|x| format!("{x}")).unwrap_or_default();
            let a = summary.aggregate.as_ref();
            csv.push_str(&format!(
                "{},{},{seed},{},{},{},{},{},{}\n",
                v.name,
                v.label,
                cell(a.map(|a| a.rel)),
                cell(a.map(|a| a.gen)),
                cell(a.and_then(|a| a.por)),
                cell(a.map(|a| a.loc)),
                cell(a.map(|a| a.avg)),
                summary.failures
            ));
            if let Some(a) = a {
                println!("seed {seed} {:<16} avg {:.1} loc {:.1}", v.label, a.avg, a.loc);
            }
        }
    }

    let config = json!({ "base": base_cfg, "seeds": seeds, "variants": variants });
    let mut manifest = ManifestBuilder::new("ablate", config.clone(), out);
    for f in &loaded.files {
        manifest.input(f)?;
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv).context("writing ablation.csv")?;
    let cfg_path = out.join("ablation_configs.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).context("config")? + "\n")
        .context("writing ablation_configs.json")?;
    manifest.artifact(&csv_path);
    manifest.artifact(&cfg_path);
    manifest.finish()?;

    if failures > 0 {
        return Err(Failure::partial(format!("{failures} edits failed across the grid")));
    }
    Ok(())
}
