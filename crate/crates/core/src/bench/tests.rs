use std::collections::BTreeSet;

use super::*;
use crate::lm::Vocab;

fn default_world() -> KnowledgeWorld {
    gen_world(&WorldConfig::default()).unwrap()
}

#[test]
fn same_seed_same_world() {
    assert_eq!(default_world(), default_world());
    let other = gen_world(&WorldConfig {
        seed: 1,
        ..WorldConfig::default()
    })
    .unwrap();
    assert_ne!(default_world().facts, other.facts);
}

#[test]
fn single_fact_corpus() {
    let w = gen_world(&WorldConfig {
        seed: 3,
        n_entities: 5,
        n_relations: 2,
        n_facts: 1,
    })
    .unwrap();
    assert_eq!(w.corpus_lines().len(), TEMPLATES.len());
    assert_eq!(w.fact_lines().len(), 1);
}

#[test]
fn infeasible_sizes_name_the_bound() {
    let err = gen_world(&WorldConfig {
        seed: 0,
        n_entities: 10,
        n_relations: 3,
        n_facts: 31,
    })
    .unwrap_err();
    assert!(err.to_string().contains("30"), "{err}");
    assert!(gen_world(&WorldConfig {
        n_facts: 0,
        ..WorldConfig::default()
    })
    .is_err());
}

#[test]
fn world_shape() {
    let w = default_world();
    assert_eq!(w.entities.len(), 100);
    assert_eq!(w.relations.len(), 8);
    assert_eq!(w.facts.len(), 400);
    assert_eq!(w.entities.iter().collect::<BTreeSet<_>>().len(), 100);
    let slots: BTreeSet<_> = w.facts.iter().map(|f| (f.subject, f.relation)).collect();
    assert_eq!(slots.len(), 400, "facts must be functional");
    assert!(w.facts.iter().all(|f| f.subject != f.object));
    assert_eq!(w.corpus_lines().len(), 1200);
}

#[test]
fn vocab_covers_corpus_and_fits_context() {
    let w = default_world();
    let vocab = w.vocab();
    for line in w.corpus_lines() {
        let ids = encode_sentence(&vocab, &line.text).unwrap();
        assert!(ids.len() <= 16, "{}", line.text);
    }
    for req in requests_from_pool(&w, None, 0).unwrap() {
        let enc = EncodedRequest::encode(&vocab, &req).unwrap();
        assert!(enc.max_context() <= 16);
    }
}

#[test]
fn edit_pool_has_distinct_subjects_and_real_counterfactuals() {
    let w = default_world();
    assert!(w.edit_pool.len() >= 60, "pool of {}", w.edit_pool.len());
    let subjects: BTreeSet<_> = w.edit_pool.iter().map(|e| e.fact.subject).collect();
    assert_eq!(subjects.len(), w.edit_pool.len());
    for e in &w.edit_pool {
        assert_ne!(e.new_object, e.fact.object);
        assert!(w.facts.contains(&e.fact));
        // the counterfactual is drawn from the relation's range
        assert!(w
            .facts
            .iter()
            .any(|f| f.relation == e.fact.relation && f.object == e.new_object));
    }
}

#[test]
fn two_hop_answers_follow_the_chain() {
    let w = default_world();
    let find = |s: &str, r: &str| -> Option<String> {
        w.fact_lines()
            .into_iter()
            .find(|l| l.s == s && l.r == r)
            .map(|l| l.o)
    };
    let mut checked = 0;
    for req in requests_from_pool(&w, None, 0).unwrap() {
        for p in &req.portability {
            // "the r2 of the r1 of S is"
            let words: Vec<&str> = p.prompt.split_whitespace().collect();
            let r2 = words[1];
            assert_eq!(words[4], req.relation);
            assert_eq!(find(&req.target_new, r2).as_deref(), Some(p.answer.as_str()));
            let old = find(&req.target_old, r2);
            assert_ne!(old.as_deref(), Some(p.answer.as_str()));
            checked += 1;
        }
    }
    assert!(checked >= 50);
}

#[test]
fn suites_respect_their_invariants() {
    let w = default_world();
    for req in requests_from_pool(&w, None, 7).unwrap() {
        assert_ne!(req.target_new, req.target_old);
        assert!(req.generality.len() >= 2);
        assert!(!req.generality.contains(&req.prompt));
        assert!(req.locality.len() >= 2);
        for loc in &req.locality {
            assert!(!loc.prompt.contains(&req.subject), "{} in {}", req.subject, loc.prompt);
            assert!(w.fact_lines().iter().any(|l| l.text == format!("{} {}", loc.prompt, loc.answer)));
        }
    }
}

#[test]
fn concrete_composition() {
    let w = default_world();
    let e = w.edit_pool[0];
    let rule = w.compositions_from(e.fact.relation).next().unwrap();
    let req = make_edit_request(&w, e.fact, e.new_object, 0).unwrap();
    let expected = w.object_of(e.new_object, rule.second).unwrap();
    assert_eq!(req.portability[0].answer, w.entities[expected]);
    assert_eq!(
        req.portability[0].prompt,
        format!(
            "the {} of the {} of {} is",
            w.relations[rule.second], w.relations[rule.first], w.entities[e.fact.subject]
        )
    );
}

#[test]
fn unchanged_object_rejected() {
    let w = default_world();
    let f = w.facts[0];
    assert!(matches!(
        make_edit_request(&w, f, f.object, 0),
        Err(crate::Error::InvalidRequest(_))
    ));
    let mut req = make_edit_request(&w, f, (f.object + 1) % 100, 0).unwrap();
    req.target_new = req.target_old.clone();
    assert!(EncodedRequest::encode(&w.vocab(), &req).is_err());
}

#[test]
fn single_relation_has_no_portability() {
    let w = gen_world(&WorldConfig {
        seed: 2,
        n_entities: 20,
        n_relations: 1,
        n_facts: 15,
    })
    .unwrap();
    let req = requests_from_pool(&w, Some(1), 0).unwrap().remove(0);
    assert!(req.portability.is_empty());
}

#[test]
fn probe_context_layout() {
    let w = default_world();
    let vocab = w.vocab();
    let req = requests_from_pool(&w, Some(1), 0).unwrap().remove(0);
    let enc = EncodedRequest::encode(&vocab, &req).unwrap();
    let p = &enc.reliability;
    assert_eq!(p.prompt[0], Vocab::BOS_ID);
    assert_eq!(p.answer.len(), 2);
    let ctx = p.context();
    assert_eq!(ctx.len(), p.prompt.len() + 1);
    assert_eq!(ctx[p.first_answer_row() + 1], p.answer[0]);
}

#[test]
fn jsonl_round_trip() {
    let dir = tempdir();
    let w = default_world();
    let reqs = requests_from_pool(&w, Some(5), 0).unwrap();
    let path = dir.join("requests.jsonl");
    write_jsonl(&path, &reqs).unwrap();
    let back: Vec<EditRequest> = read_jsonl(&path).unwrap();
    assert_eq!(back, reqs);
    let line = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["prompt", "target_new", "target_old", "generality", "portability", "locality"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("ovtlab-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn random_worlds_keep_their_invariants(
        seed in 0u64..1000,
        n_entities in 6usize..60,
        n_relations in 2usize..8,
        fill in 0.2f64..0.9,
    ) {
        let n_facts = ((n_entities * n_relations) as f64 * fill).max(1.0) as usize;
        let cfg = WorldConfig { seed, n_entities, n_relations, n_facts };
        let Ok(w) = gen_world(&cfg) else {
            return Err(proptest::test_runner::TestCaseError::reject("infeasible world"));
        };
        let slots: BTreeSet<_> = w.facts.iter().map(|f| (f.subject, f.relation)).collect();
        proptest::prop_assert_eq!(slots.len(), w.facts.len());
        let subjects: BTreeSet<_> = w.edit_pool.iter().map(|e| e.fact.subject).collect();
        proptest::prop_assert_eq!(subjects.len(), w.edit_pool.len());
        let vocab = w.vocab();
        let Ok(requests) = requests_from_pool(&w, None, seed) else {
            return Err(proptest::test_runner::TestCaseError::reject("too sparse for suites"));
        };
        for req in requests {
            let enc = EncodedRequest::encode(&vocab, &req).unwrap();
            proptest::prop_assert!(enc.max_context() <= 16);
            proptest::prop_assert_ne!(&req.target_new, &req.target_old);
            proptest::prop_assert!(!req.generality.contains(&req.prompt));
            for loc in &req.locality {
                proptest::prop_assert!(!loc.prompt.contains(&req.subject));
            }
            for p in &req.portability {
                // the first hop lands on the new object, which is a subject of the second relation
                let words: Vec<&str> = p.prompt.split_whitespace().collect();
                let r2 = words[1];
                let hop = w.fact_lines().into_iter().find(|l| l.s == req.target_new && l.r == r2);
                proptest::prop_assert_eq!(hop.map(|l| l.o), Some(p.answer.clone()));
            }
        }
    }
}
