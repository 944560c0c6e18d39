//! End-to-end checks on a small world that a tiny model memorizes.

use std::sync::OnceLock;

use ovtlab_core::bench::{encode_sentence, gen_world, requests_from_pool, EncodedRequest, KnowledgeWorld, Probe, WorldConfig};
use ovtlab_core::editors::{edit_single, EditLoss, EditMethod, EditRunConfig};
use ovtlab_core::eval::{evaluate_suite, gold_ce, std_dev, token_match_accuracy, trajectory_summary, PreEditAnswers};
use ovtlab_core::lm::{pretrain_scored, ModelConfig, PretrainConfig, Transformer, Vocab};

struct Fixture {
    world: KnowledgeWorld,
    vocab: Vocab,
    model: Transformer,
    requests: Vec<EncodedRequest>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let world = gen_world(&WorldConfig {
            seed: 1,
            n_entities: 20,
            n_relations: 3,
            n_facts: 40,
        })
        .unwrap();
        let vocab = world.vocab();
        let mut corpus = Vec::new();
        let mut scored_from = Vec::new();
        for line in world.corpus_lines() {
            let ids = encode_sentence(&vocab, &line.text).unwrap();
            scored_from.push(ids.len() - 1 - line.o.split_whitespace().count());
            corpus.push(ids);
        }
        let config = ModelConfig {
            d_model: 64,
            d_ff: 128,
            ..ModelConfig::desk(vocab.len())
        };
        let train = PretrainConfig {
            steps: 1500,
            ..PretrainConfig::default()
        };
        let report = pretrain_scored(&config, &corpus, &scored_from, &train).unwrap();
        let model = report.checkpoint.to_model().unwrap();
        let requests = requests_from_pool(&world, Some(8), 0)
            .unwrap()
            .iter()
            .map(|r| EncodedRequest::encode(&vocab, r).unwrap())
            .collect();
        Fixture {
            world,
            vocab,
            model,
            requests,
        }
    })
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
}

#[test]
fn memorized_facts_score_full_accuracy() {
    let fx = fixture();
    let mut perfect = 0;
    for fact in &fx.world.facts {
        let prompt = fx.world.render(0, fact.subject, fact.relation);
        let answer = &fx.world.entities[fact.object];
        let probe = Probe::encode(&fx.vocab, &prompt, answer).unwrap();
        if token_match_accuracy(&fx.model, &probe).unwrap() == 1.0 {
            perfect += 1;
        }
    }
    assert_eq!(perfect, fx.world.facts.len(), "memorized {perfect} of {}", fx.world.facts.len());
}

#[test]
fn locality_gold_matches_pretrained_answers() {
    let fx = fixture();
    for req in &fx.requests {
        for probe in &req.locality {
            let logits = fx.model.logits(&probe.context()).unwrap();
            let greedy: Vec<usize> = (0..probe.answer.len())
                .map(|i| argmax(logits.row(probe.first_answer_row() + i)))
                .collect();
            assert_eq!(greedy, probe.answer);
        }
        let pre = PreEditAnswers::compute(&fx.model, req).unwrap();
        let report = evaluate_suite(&fx.model, req, &pre).unwrap();
        assert_eq!(report.loc, 100.0);
        assert!(report.rel < 100.0, "the counterfactual is not already known");
    }
}

fn ce_full_layer(steps: usize) -> EditRunConfig {
    let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(2), false);
    cfg.steps = steps;
    cfg.track_probes = true;
    cfg
}

#[test]
fn ce_edit_makes_the_new_answer_greedy() {
    let fx = fixture();
    for req in &fx.requests[..3] {
        let mut model = fx.model.clone();
        edit_single(&mut model, req, &ce_full_layer(40), &fx.model).unwrap();
        let probe = &req.reliability;
        let decoded = model.greedy_decode(&probe.prompt, probe.answer.len()).unwrap();
        assert_eq!(decoded, probe.answer);
    }
}

#[test]
fn ce_editing_spreads_underfitting_across_tokens() {
    let fx = fixture();
    let mut ud = Vec::new();
    for req in &fx.requests {
        let mut model = fx.model.clone();
        let traj = edit_single(&mut model, req, &ce_full_layer(40), &fx.model).unwrap();
        ud.extend(&traj.steps.last().unwrap().ud);
    }
    let sd = std_dev(&ud);
    assert!(sd > 0.1, "UD spread {sd}");
}

#[test]
fn curves_start_at_pre_edit_losses() {
    let fx = fixture();
    let req = &fx.requests[0];
    let mut model = fx.model.clone();
    let traj = edit_single(&mut model, req, &ce_full_layer(5), &fx.model).unwrap();
    let summary = trajectory_summary(&[traj]);
    let first = &summary.points[0];
    let gen: Vec<&Probe> = req.generality.iter().collect();
    let por: Vec<&Probe> = req.portability.iter().collect();
    assert_eq!(first.step, 0);
    assert!((first.gen_loss.unwrap() - gold_ce(&fx.model, &gen).unwrap().unwrap()).abs() < 1e-12);
    assert!((first.por_loss.unwrap() - gold_ce(&fx.model, &por).unwrap().unwrap()).abs() < 1e-12);
}

#[test]
fn smoothed_objective_preserves_more_locality_than_ce() {
    let fx = fixture();
    let mut loc = [0.0, 0.0];
    for (k, overtone) in [false, true].into_iter().enumerate() {
        let cfg = EditRunConfig::defaults(EditMethod::lora(2), overtone);
        assert_eq!(cfg.loss == EditLoss::Ce, !overtone);
        for req in &fx.requests {
            let pre = PreEditAnswers::compute(&fx.model, req).unwrap();
            let mut model = fx.model.clone();
            edit_single(&mut model, req, &cfg, &fx.model).unwrap();
            loc[k] += evaluate_suite(&model, req, &pre).unwrap().loc;
        }
    }
    assert!(loc[1] >= loc[0], "locality CE {} vs smoothed {}", loc[0], loc[1]);
}
