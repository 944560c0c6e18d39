use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Vocab;

const RELATION_WORDS: [&str; 12] = [
    "leader", "spouse", "mentor", "rival", "friend", "employer", "doctor", "neighbor", "lawyer",
    "landlord", "partner", "coach",
];

const TEMPLATE_WORDS: [&str; 6] = ["the", "of", "is", "'s", "who", "?"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Surface forms of a one-hop question; `{r}` is the relation word, `{s}` the
/// subject name. Index 0 is the edit prompt, the others are rephrasings.
pub const TEMPLATES: [&str; 3] = ["the {r} of {s} is", "{s} 's {r} is", "who is the {r} of {s} ?"];

/// Surface form of a two-hop question through relations `{r1}` then `{r2}`.
pub const TWO_HOP_TEMPLATE: &str = "the {r2} of the {r1} of {s} is";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 100,
            n_relations: 8,
            n_facts: 400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Two-hop rule: the object of `first` is looked up under `second`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub first: usize,
    pub second: usize,
}

/// A world fact paired with the counterfactual object it will be edited to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditableFact {
    pub fact: Fact,
    pub new_object: usize,
}

/// One line of the world or corpus files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactLine {
    pub s: String,
    pub r: String,
    pub o: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeWorld {
    pub config: WorldConfig,
    /// Each entity name is two words: a given name and a family name.
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub facts: Vec<Fact>,
    pub compositions: Vec<Composition>,
    /// Facts with distinct subjects, those with a usable two-hop chain first.
    pub edit_pool: Vec<EditableFact>,
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char;
    let v = VOWELS[rng.gen_range(0..VOWELS.len())] as char;
    format!("{c}{v}")
}

fn word_pool(rng: &mut ChaCha8Rng, n: usize, shape: impl Fn(&mut ChaCha8Rng) -> String, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = shape(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn relation_name(r: usize) -> String {
    RELATION_WORDS
        .get(r)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("rel{r}"))
}

/// Builds a world deterministically from its configuration.
pub fn gen_world(config: &WorldConfig) -> Result<KnowledgeWorld> {
    let WorldConfig {
        seed,
        n_entities,
        n_relations,
        n_facts,
    } = *config;
    if n_entities < 2 || n_relations == 0 {
        return Err(Error::InfeasibleWorld(
            "need at least 2 entities and 1 relation".into(),
        ));
    }
    let capacity = n_entities * n_relations;
    if n_facts == 0 || n_facts > capacity {
        return Err(Error::InfeasibleWorld(format!(
            "n_facts {n_facts} must be in 1..={capacity} (n_entities × n_relations)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut taken: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    let relations: Vec<String> = (0..n_relations).map(relation_name).collect();
    taken.extend(relations.iter().cloned());
    let side = ((n_entities as f64).sqrt().ceil() as usize + 2).max(2);
    let given = word_pool(&mut rng, side, |r| format!("{}{}", syllable(r), CONSONANTS[r.gen_range(0..CONSONANTS.len())] as char), &mut taken);
    let family = word_pool(&mut rng, side, |r| format!("{}{}", syllable(r), syllable(r)), &mut taken);
    let mut pairs: Vec<(usize, usize)> = (0..side).flat_map(|i| (0..side).map(move |j| (i, j))).collect();
    pairs.shuffle(&mut rng);
    let entities: Vec<String> = pairs[..n_entities]
        .iter()
        .map(|&(i, j)| format!("{} {}", given[i], family[j]))
        .collect();

    let mut slots: Vec<(usize, usize)> = (0..n_entities)
        .flat_map(|s| (0..n_relations).map(move |r| (s, r)))
        .collect();
    slots.shuffle(&mut rng);
    let mut facts: Vec<Fact> = slots[..n_facts]
        .iter()
        .map(|&(subject, relation)| {
            let mut object = rng.gen_range(0..n_entities - 1);
            if object >= subject {
                object += 1;
            }
            Fact {
                subject,
                relation,
                object,
            }
        })
        .collect();
    facts.sort();

    let compositions: Vec<Composition> = if n_relations >= 2 {
        (0..n_relations)
            .map(|r| Composition {
                first: r,
                second: (r + 1) % n_relations,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut world = KnowledgeWorld {
        config: config.clone(),
        entities,
        relations,
        facts,
        compositions,
        edit_pool: Vec::new(),
    };
    world.edit_pool = build_edit_pool(&world, &mut rng);
    Ok(world)
}

fn build_edit_pool(world: &KnowledgeWorld, rng: &mut ChaCha8Rng) -> Vec<EditableFact> {
    let index = world.index();
    let mut range: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for f in &world.facts {
        range.entry(f.relation).or_default().insert(f.object);
    }
    let mut order: Vec<Fact> = world.facts.clone();
    order.shuffle(rng);

    let mut used_subjects = BTreeSet::new();
    let mut chained = Vec::new();
    let mut plain = Vec::new();
    for fact in order {
        if used_subjects.contains(&fact.subject) {
            continue;
        }
        let candidates: Vec<usize> = range[&fact.relation]
            .iter()
            .copied()
            .filter(|&o| o != fact.object && o != fact.subject)
            .collect();
        let with_chain: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&o| {
                world.compositions_from(fact.relation).any(|c| {
                    match (index.get(&(fact.object, c.second)), index.get(&(o, c.second))) {
                        (Some(old), Some(new)) => old != new,
                        (None, Some(_)) => true,
                        _ => false,
                    }
                })
            })
            .collect();
        if let Some(&new_object) = with_chain.choose(rng) {
            chained.push(EditableFact { fact, new_object });
        } else if let Some(&new_object) = candidates.choose(rng) {
            plain.push(EditableFact { fact, new_object });
        } else {
            continue;
        }
        used_subjects.insert(fact.subject);
    }
    chained.extend(plain);
    chained
}

impl KnowledgeWorld {
    /// `(subject, relation) -> object`.
    pub fn index(&self) -> BTreeMap<(usize, usize), usize> {
        self.facts
            .iter()
            .map(|f| ((f.subject, f.relation), f.object))
            .collect()
    }

    pub fn object_of(&self, subject: usize, relation: usize) -> Option<usize> {
        self.facts
            .binary_search_by(|f| (f.subject, f.relation).cmp(&(subject, relation)))
            .ok()
            .map(|i| self.facts[i].object)
    }

    pub fn compositions_from(&self, relation: usize) -> impl Iterator<Item = &Composition> {
        self.compositions.iter().filter(move |c| c.first == relation)
    }

    /// Prompt text for a one-hop question in template `template`.
    pub fn render(&self, template: usize, subject: usize, relation: usize) -> String {
        TEMPLATES[template]
            .replace("{r}", &self.relations[relation])
            .replace("{s}", &self.entities[subject])
    }

    pub fn render_two_hop(&self, subject: usize, rule: &Composition) -> String {
        TWO_HOP_TEMPLATE
            .replace("{r2}", &self.relations[rule.second])
            .replace("{r1}", &self.relations[rule.first])
            .replace("{s}", &self.entities[subject])
    }

    fn line(&self, f: &Fact, template: usize) -> FactLine {
        FactLine {
            s: self.entities[f.subject].clone(),
            r: self.relations[f.relation].clone(),
            o: self.entities[f.object].clone(),
            text: format!(
                "{} {}",
                self.render(template, f.subject, f.relation),
                self.entities[f.object]
            ),
        }
    }

    /// One line per fact, rendered with the first template.
    pub fn fact_lines(&self) -> Vec<FactLine> {
        self.facts.iter().map(|f| self.line(f, 0)).collect()
    }

    /// Every fact in every template.
    pub fn corpus_lines(&self) -> Vec<FactLine> {
        self.facts
            .iter()
            .flat_map(|f| (0..TEMPLATES.len()).map(move |t| (f, t)))
            .map(|(f, t)| self.line(f, t))
            .collect()
    }

    /// Template words, relation words, then name words in order of first use.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(self.relations.iter().cloned());
        words.extend(
            self.entities
                .iter()
                .flat_map(|e| e.split_whitespace().map(str::to_string)),
        );
        Vocab::new(words)
    }
}

/// `<bos> text <eos>` as token ids.
pub fn encode_sentence(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![Vocab::BOS_ID];
    ids.extend(vocab.encode(text)?);
    ids.push(Vocab::EOS_ID);
    Ok(ids)
}
