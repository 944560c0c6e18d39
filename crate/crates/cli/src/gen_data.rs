use std::path::Path;

use anyhow::Context;
use ovtlab_core::bench::{gen_world, requests_from_pool, write_jsonl, WorldConfig};

use crate::manifest::ManifestBuilder;
use crate::{Failure, GenDataArgs};

pub const WORLD_FILE: &str = "world.jsonl";
pub const WORLD_JSON: &str = "world.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REQUESTS_FILE: &str = "requests.jsonl";

fn ensure_empty(dir: &Path, force: bool) -> Result<(), Failure> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(Failure::config(anyhow::anyhow!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn run(args: &GenDataArgs) -> Result<(), Failure> {
    let config = WorldConfig {
        seed: args.seed,
        n_entities: args.entities,
        n_relations: args.relations,
        n_facts: args.facts,
    };
    let world = gen_world(&config)?;
    ensure_empty(&args.out, args.force)?;
    let requests = requests_from_pool(&world, None, args.seed)?;
    let vocab = world.vocab();

    let mut manifest = ManifestBuilder::new("gen-data", serde_json::to_value(&config).context("config")?, &args.out);
    let out = |name: &str| args.out.join(name);
    write_jsonl(&out(WORLD_FILE), &world.fact_lines())?;
    write_jsonl(&out(CORPUS_FILE), &world.corpus_lines())?;
    write_jsonl(&out(REQUESTS_FILE), &requests)?;
    vocab.save(&out(VOCAB_FILE))?;
    std::fs::write(out(WORLD_JSON), serde_json::to_string_pretty(&world).context("world")? + "\n")
        .context("writing world.json")?;
    for name in [WORLD_FILE, WORLD_JSON, CORPUS_FILE, VOCAB_FILE, REQUESTS_FILE] {
        manifest.artifact(&out(name));
    }
    manifest.finish()?;

    println!(
        "entities {} relations {} facts {} corpus sentences {} vocab {} edit requests {}",
        world.entities.len(),
        world.relations.len(),
        world.facts.len(),
        world.corpus_lines().len(),
        vocab.len(),
        requests.len()
    );
    Ok(())
}
