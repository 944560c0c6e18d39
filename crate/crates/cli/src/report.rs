use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ovtlab_core::eval::{median, MetricsReport};
use serde::Serialize;

use crate::manifest::{read_manifest, RunManifest, MANIFEST_FILE};
use crate::{Failure, ReportArgs};

/// Mean and median of one metric over the runs of a group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

impl Stat {
    fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| Self {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            median: median(xs),
            n: xs.len(),
        })
    }
}

/// Runs sharing every setting except the seed.
#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: usize,
    pub method: String,
    pub loss: String,
    pub variant: Option<String>,
    pub steps: Option<u64>,
    pub seq_len: Option<u64>,
    pub seeds: Vec<u64>,
    pub run_dirs: Vec<String>,
    pub rel: Option<Stat>,
    pub gen: Option<Stat>,
    pub por: Option<Stat>,
    pub loc: Option<Stat>,
    pub avg: Option<Stat>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    metrics: MetricsReport,
}

fn find_manifests(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut level = vec![root.to_path_buf()];
    for depth in 0..=2 {
        let mut next = Vec::new();
        for dir in &level {
            let m = dir.join(MANIFEST_FILE);
            if depth > 0 && m.is_file() {
                found.push(m);
            }
            if let Ok(entries) = std::fs::read_dir(dir) {
                next.extend(entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()));
            }
        }
        next.sort();
        level = next;
    }
    found
}

fn load_runs(root: &Path) -> Vec<Run> {
    let mut runs = Vec::new();
    for path in find_manifests(root) {
        let dir = path.parent().expect("manifest has a parent").to_path_buf();
        let manifest = match read_manifest(&path) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {}: {e:#}", path.display());
                continue;
            }
        };
        if manifest.command != "edit" {
            continue;
        }
        let metrics = std::fs::read_to_string(dir.join("aggregate.json"))
            .map_err(anyhow::Error::from)
            .and_then(|t| serde_json::from_str::<MetricsReport>(&t).map_err(anyhow::Error::from));
        match metrics {
            Ok(metrics) => runs.push(Run { dir, manifest, metrics }),
            Err(e) => log::warn!("skipping {}: no readable aggregate.json ({e})", dir.display()),
        }
    }
    runs
}

fn group_key(config: &serde_json::Value) -> String {
    let mut c = config.clone();
    if let Some(edit) = c.get_mut("edit").and_then(|e| e.as_object_mut()) {
        edit.remove("seed");
    }
    c.to_string()
}

/// Mean curve over runs, by step.
fn mean_curve(dirs: &[&Path]) -> String {
    let mut sums: BTreeMap<u64, [(f64, usize); 3]> = BTreeMap::new();
    for dir in dirs {
        let Ok(text) = std::fs::read_to_string(dir.join("curves.csv")) else {
            continue;
        };
        for line in text.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            let Some(step) = cells.first().and_then(|s| s.parse::<u64>().ok()) else {
                continue;
            };
            let slot = sums.entry(step).or_insert([(0.0, 0); 3]);
            for (k, cell) in cells.iter().skip(1).take(3).enumerate() {
                if let Ok(v) = cell.parse::<f64>() {
                    slot[k].0 += v;
                    slot[k].1 += 1;
                }
            }
        }
    }
    let mut out = String::from("step,gen_loss,por_loss,frac_clipped\n");
    for (step, cols) in sums {
        let cell = |(s, n): (f64, usize)| if n > 0 { format!("{}", s / n as f64) } else { String::new() };
        out.push_str(&format!("{step},{},{},{}\n", cell(cols[0]), cell(cols[1]), cell(cols[2])));
    }
    out
}

fn to_csv(groups: &[GroupReport]) -> String {
    let mut out = String::from("group,method,loss,variant,T,seq_len,n_runs");
    for m in ["rel", "gen", "por", "loc", "avg"] {
        out.push_str(&format!(",{m}_mean,{m}_median"));
    }
    out.push('\n');
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for g in groups {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            g.group,
            g.method,
            g.loss,
            g.variant.as_deref().unwrap_or(""),
            opt(g.steps),
            opt(g.seq_len),
            g.run_dirs.len()
        ));
        for s in [&g.rel, &g.gen, &g.por, &g.loc, &g.avg] {
            match s {
                Some(s) => out.push_str(&format!(",{},{}", s.mean, s.median)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn run(args: &ReportArgs) -> Result<(), Failure> {
    let json = match args.out.extension().and_then(|e| e.to_str()) {
        Some("json") => true,
        Some("csv") => false,
        _ => {
            return Err(Failure::config(anyhow::anyhow!(
                "--out must end in .csv or .json: {}",
                args.out.display()
            )))
        }
    };
    let runs = load_runs(&args.runs);
    if runs.is_empty() {
        return Err(Failure::config(anyhow::anyhow!(
            "no edit runs with a readable manifest under {}",
            args.runs.display()
        )));
    }
    let mut grouped: BTreeMap<String, Vec<&Run>> = BTreeMap::new();
    for r in &runs {
        grouped.entry(group_key(&r.manifest.config)).or_default().push(r);
    }

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let stem = args.out.with_extension("");
    let mut groups = Vec::new();
    for (i, members) in grouped.values().enumerate() {
        let config = &members[0].manifest.config;
        let edit = &config["edit"];
        let method = match edit["method"]["kind"].as_str() {
            Some("full_layer") => "ftm".to_string(),
            other => other.unwrap_or("").to_string(),
        };
        let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
            members.iter().filter_map(|r| f(&r.metrics)).collect()
        };
        let group = GroupReport {
            group: i,
            method,
            loss: edit["loss"]["kind"].as_str().unwrap_or("").to_string(),
            variant: config["variant"].as_str().map(String::from),
            steps: edit["steps"].as_u64(),
            seq_len: config["seq_len"].as_u64(),
            seeds: members.iter().filter_map(|r| r.manifest.config["edit"]["seed"].as_u64()).collect(),
            run_dirs: members.iter().map(|r| r.dir.display().to_string()).collect(),
            rel: Stat::of(&collect(&|m| Some(m.rel))),
            gen: Stat::of(&collect(&|m| Some(m.gen))),
            por: Stat::of(&collect(&|m| m.por)),
            loc: Stat::of(&collect(&|m| Some(m.loc))),
            avg: Stat::of(&collect(&|m| Some(m.avg))),
        };
        let dirs: Vec<&Path> = members.iter().map(|r| r.dir.as_path()).collect();
        let curve_path = PathBuf::from(format!("{}_curves_{i}.csv", stem.display()));
        std::fs::write(&curve_path, mean_curve(&dirs)).with_context(|| format!("writing {}", curve_path.display()))?;
        groups.push(group);
    }
    let body = if json {
        serde_json::to_string_pretty(&groups).context("report")? + "\n"
    } else {
        to_csv(&groups)
    };
    std::fs::write(&args.out, body).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} runs in {} groups", runs.len(), groups.len());
    Ok(())
}
