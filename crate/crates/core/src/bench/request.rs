use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{EditableFact, Fact, KnowledgeWorld, TEMPLATES};
use crate::error::{Error, Result};
use crate::lm::Vocab;

/// Locality probes per request that share the edited relation.
const SAME_RELATION_LOCALITY: usize = 2;
/// Locality probes per request drawn from any other relation.
const OTHER_LOCALITY: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAnswer {
    pub prompt: String,
    pub answer: String,
}

/// A counterfactual edit and its evaluation suites, as text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub prompt: String,
    pub target_new: String,
    pub target_old: String,
    /// Rephrased prompts whose answer is `target_new`.
    pub generality: Vec<String>,
    pub portability: Vec<PromptAnswer>,
    pub locality: Vec<PromptAnswer>,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub relation: String,
}

/// Token ids of one prompt (with leading `<bos>`) and its answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Probe {
    pub fn encode(vocab: &Vocab, prompt: &str, answer: &str) -> Result<Self> {
        let mut ids = vec![Vocab::BOS_ID];
        ids.extend(vocab.encode(prompt)?);
        let answer = vocab.encode(answer)?;
        if answer.is_empty() {
            return Err(Error::InvalidRequest(format!("empty answer for {prompt:?}")));
        }
        Ok(Self { prompt: ids, answer })
    }

    /// Prompt followed by every answer token but the last: the model input
    /// whose final `answer.len()` rows predict the answer.
    pub fn context(&self) -> Vec<usize> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        ids
    }

    /// Row of `context()` that predicts answer token 0.
    pub fn first_answer_row(&self) -> usize {
        self.prompt.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedRequest {
    pub reliability: Probe,
    pub target_old: Vec<usize>,
    pub generality: Vec<Probe>,
    pub portability: Vec<Probe>,
    pub locality: Vec<Probe>,
}

impl EncodedRequest {
    pub fn encode(vocab: &Vocab, req: &EditRequest) -> Result<Self> {
        if req.target_new == req.target_old {
            return Err(Error::InvalidRequest(format!(
                "new answer equals old answer {:?}",
                req.target_old
            )));
        }
        let reliability = Probe::encode(vocab, &req.prompt, &req.target_new)?;
        Ok(Self {
            target_old: vocab.encode(&req.target_old)?,
            generality: req
                .generality
                .iter()
                .map(|p| Probe::encode(vocab, p, &req.target_new))
                .collect::<Result<_>>()?,
            portability: req
                .portability
                .iter()
                .map(|p| Probe::encode(vocab, &p.prompt, &p.answer))
                .collect::<Result<_>>()?,
            locality: req
                .locality
                .iter()
                .map(|p| Probe::encode(vocab, &p.prompt, &p.answer))
                .collect::<Result<_>>()?,
            reliability,
        })
    }

    pub fn probes(&self) -> impl Iterator<Item = &Probe> {
        std::iter::once(&self.reliability)
            .chain(&self.generality)
            .chain(&self.portability)
            .chain(&self.locality)
    }

    /// Longest model input any probe needs.
    pub fn max_context(&self) -> usize {
        self.probes().map(|p| p.prompt.len() + p.answer.len() - 1).max().unwrap_or(0)
    }
}

/// Builds the edit of `fact` to `new_object` with its four suites.
///
/// Portability is left empty (with a warning) when no two-hop rule applies.
pub fn make_edit_request(world: &KnowledgeWorld, fact: Fact, new_object: usize, seed: u64) -> Result<EditRequest> {
    if world.object_of(fact.subject, fact.relation) != Some(fact.object) {
        return Err(Error::InvalidRequest(format!("{fact:?} is not a world fact")));
    }
    if new_object == fact.object {
        return Err(Error::InvalidRequest(
            "new object equals the current object".into(),
        ));
    }
    if new_object >= world.entities.len() {
        return Err(Error::InvalidRequest(format!("unknown entity {new_object}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |e: usize| world.entities[e].clone();

    let portability: Vec<PromptAnswer> = world
        .compositions_from(fact.relation)
        .filter_map(|rule| {
            world.object_of(new_object, rule.second).map(|answer| PromptAnswer {
                prompt: world.render_two_hop(fact.subject, rule),
                answer: name(answer),
            })
        })
        .collect();
    if portability.is_empty() {
        log::warn!(
            "no two-hop rule applies to the edit of {} / {}; portability is empty",
            world.entities[fact.subject],
            world.relations[fact.relation]
        );
    }

    let others: Vec<&Fact> = world.facts.iter().filter(|f| f.subject != fact.subject).collect();
    let same: Vec<&Fact> = others.iter().copied().filter(|f| f.relation == fact.relation).collect();
    let different: Vec<&Fact> = others.iter().copied().filter(|f| f.relation != fact.relation).collect();
    let mut picked: Vec<&Fact> = same
        .choose_multiple(&mut rng, SAME_RELATION_LOCALITY)
        .copied()
        .collect();
    picked.extend(different.choose_multiple(&mut rng, OTHER_LOCALITY).copied());
    if picked.len() < 2 {
        // small worlds: fall back to any facts about other subjects
        picked = others.choose_multiple(&mut rng, 2).copied().collect();
    }
    if picked.len() < 2 {
        return Err(Error::InfeasibleWorld(
            "fewer than two facts about other subjects for locality".into(),
        ));
    }
    let locality = picked
        .iter()
        .map(|f| PromptAnswer {
            prompt: world.render(0, f.subject, f.relation),
            answer: name(f.object),
        })
        .collect();

    Ok(EditRequest {
        prompt: world.render(0, fact.subject, fact.relation),
        target_new: name(new_object),
        target_old: name(fact.object),
        generality: (1..TEMPLATES.len())
            .map(|t| world.render(t, fact.subject, fact.relation))
            .collect(),
        portability,
        locality,
        subject: name(fact.subject),
        relation: world.relations[fact.relation].clone(),
    })
}

/// Requests for the first `count` editable facts (all when `None`), each with
/// its own derived seed.
pub fn requests_from_pool(world: &KnowledgeWorld, count: Option<usize>, seed: u64) -> Result<Vec<EditRequest>> {
    let pool: &[EditableFact] = match count {
        Some(n) if n > world.edit_pool.len() => {
            return Err(Error::InfeasibleWorld(format!(
                "{n} requests asked but only {} editable facts with distinct subjects",
                world.edit_pool.len()
            )))
        }
        Some(n) => &world.edit_pool[..n],
        None => &world.edit_pool,
    };
    pool.iter()
        .enumerate()
        .map(|(i, e)| make_edit_request(world, e.fact, e.new_object, seed.wrapping_add(i as u64)))
        .collect()
}
