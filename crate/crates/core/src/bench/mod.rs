//! Synthetic knowledge world, pretraining corpus and counterfactual edit
//! requests with reliability, generality, portability and locality suites.

mod request;
mod world;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use request::{make_edit_request, requests_from_pool, EditRequest, EncodedRequest, Probe, PromptAnswer};
pub use world::{
    encode_sentence, gen_world, Composition, EditableFact, Fact, FactLine, KnowledgeWorld, WorldConfig, TEMPLATES,
    TWO_HOP_TEMPLATE,
};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidConfig(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
