use anyhow::Context;
use ovtlab_core::bench::{encode_sentence, read_jsonl, FactLine};
use ovtlab_core::lm::{pretrain_scored, ModelConfig, PretrainConfig, Vocab};
use serde::{Deserialize, Serialize};

use crate::gen_data::{CORPUS_FILE, VOCAB_FILE};
use crate::manifest::ManifestBuilder;
use crate::{merge_json, read_json_file, Failure, PretrainArgs};

#[derive(Debug, Serialize, Deserialize)]
struct PretrainFile {
    model: ModelConfig,
    train: PretrainConfig,
}

pub fn run(args: &PretrainArgs) -> Result<(), Failure> {
    let vocab = Vocab::load(&args.data.join(VOCAB_FILE))?;
    let lines: Vec<FactLine> = read_jsonl(&args.data.join(CORPUS_FILE))?;
    let mut corpus = Vec::with_capacity(lines.len());
    let mut scored_from = Vec::with_capacity(lines.len());
    for l in &lines {
        let ids = encode_sentence(&vocab, &l.text)?;
        let answer = l.o.split_whitespace().count();
        // score the object tokens and the closing <eos>
        scored_from.push(ids.len() - 1 - answer);
        corpus.push(ids);
    }

    let mut config = serde_json::to_value(PretrainFile {
        model: ModelConfig::desk(vocab.len()),
        train: PretrainConfig::default(),
    })
    .context("default config")?;
    if let Some(path) = &args.config {
        merge_json(&mut config, read_json_file(path).map_err(Failure::config)?);
    }
    let mut file: PretrainFile = serde_json::from_value(config)
        .context("invalid pretrain config")
        .map_err(Failure::config)?;
    file.model.vocab_size = vocab.len();
    if let Some(s) = args.steps {
        file.train.steps = s;
    }
    if let Some(s) = args.seed {
        file.train.seed = s;
    }
    if let Some(lr) = args.lr {
        file.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        file.train.batch_size = b;
    }

    let report = pretrain_scored(&file.model, &corpus, &scored_from, &file.train)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    report.checkpoint.save(&args.out)?;
    let loss_path = args.out.with_extension("loss.csv");
    let mut csv = String::from("step,loss,lr\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l},{}\n", file.train.lr_at(i)));
    }
    std::fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;

    let dir = args.out.parent().unwrap_or(std::path::Path::new("."));
    let mut manifest = ManifestBuilder::new("pretrain", serde_json::to_value(&file).context("config")?, dir);
    manifest.input(&args.data.join(CORPUS_FILE))?;
    manifest.input(&args.data.join(VOCAB_FILE))?;
    manifest.artifact(&args.out);
    manifest.artifact(&loss_path);
    manifest.finish_at(&args.out.with_extension("manifest.json"))?;

    println!(
        "steps {} answer CE {:.4} corpus CE {:.4} parameters {}",
        file.train.steps,
        report.final_ce,
        report.final_corpus_ce,
        report.checkpoint.params.values().map(|a| a.len()).sum::<usize>()
    );
    Ok(())
}
