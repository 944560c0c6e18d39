use super::*;
use crate::bench::{gen_world, requests_from_pool, WorldConfig};
use crate::lm::{ModelConfig, Vocab};
use crate::optim::OptimizerKind;

fn setup() -> (Transformer, Vec<EncodedRequest>) {
    let w = gen_world(&WorldConfig {
        seed: 1,
        n_entities: 20,
        n_relations: 3,
        n_facts: 40,
    })
    .unwrap();
    let vocab = w.vocab();
    let model = Transformer::init(ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 16,
        seed: 0,
    })
    .unwrap();
    let reqs = requests_from_pool(&w, Some(3), 0)
        .unwrap()
        .iter()
        .map(|r| EncodedRequest::encode(&vocab, r).unwrap())
        .collect();
    (model, reqs)
}

fn lora_cfg(overtone: bool) -> EditRunConfig {
    let mut cfg = EditRunConfig::defaults(EditMethod::lora(2), overtone);
    cfg.steps = 5;
    cfg
}

#[test]
fn fresh_adapter_is_a_no_op() {
    let (base, reqs) = setup();
    let mut adapted = base.clone();
    attach_lora(&mut adapted, &EditMethod::lora(2), 3).unwrap();
    let ctx = reqs[0].reliability.context();
    assert_eq!(base.logits(&ctx).unwrap(), adapted.logits(&ctx).unwrap());
}

#[test]
fn adapter_parameter_count() {
    let cfg = ModelConfig::desk(50);
    let mut model = Transformer::init(cfg).unwrap();
    let method = EditMethod {
        kind: MethodKind::Lora,
        target_layers: vec![0, 1],
        lora_rank: 4,
        lora_alpha: 8.0,
        lora_targets: ["attn.wq", "attn.wk", "attn.wv", "attn.wo"].map(String::from).to_vec(),
    };
    attach_lora(&mut model, &method, 0).unwrap();
    // 8 adapted 128x128 matrices, each with 4·(128 + 128) factors
    assert_eq!(model.lora.as_ref().unwrap().trainable_count(), 8 * 4 * (128 + 128));
}

#[test]
fn oversized_rank_and_bad_layers_rejected() {
    let (mut model, _) = setup();
    let mut method = EditMethod::lora(2);
    method.lora_rank = 17;
    assert!(matches!(attach_lora(&mut model, &method, 0), Err(Error::InvalidConfig(_))));
    let mut method = EditMethod::full_layer(2);
    method.target_layers = vec![2];
    assert!(method.validate(&model).is_err());
    assert!(attach_lora(&mut model, &EditMethod::full_layer(2), 0).is_err());
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let (base, reqs) = setup();
    let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(2), false);
    cfg.steps = 1;
    cfg.learning_rate = 0.0;
    let mut model = base.clone();
    let traj = edit_single(&mut model, &reqs[0], &cfg, &base).unwrap();
    assert_eq!(model, base);
    assert_eq!(traj.steps.len(), 1);
    assert!(traj.delta_norms.values().all(|&d| d == 0.0));
}

#[test]
fn only_designated_parameters_move() {
    let (base, reqs) = setup();
    let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(2), true);
    cfg.steps = 5;
    let mut model = base.clone();
    edit_single(&mut model, &reqs[0], &cfg, &base).unwrap();
    let designated = cfg.method.designated_parameters();
    assert_eq!(designated.len(), 4);
    for (name, value) in &model.params {
        if designated.contains(name) {
            assert_ne!(value, &base.params[name], "{name} did not move");
        } else {
            assert_eq!(value, &base.params[name], "{name} moved");
        }
    }

    let mut model = base.clone();
    edit_single(&mut model, &reqs[0], &lora_cfg(false), &base).unwrap();
    assert_eq!(model.params, base.params);
    assert!(model.lora.is_some());
}

#[test]
fn identical_seeds_identical_trajectories() {
    let (base, reqs) = setup();
    let cfg = lora_cfg(true);
    let run = || {
        let mut m = base.clone();
        let t = edit_single(&mut m, &reqs[1], &cfg, &base).unwrap();
        (m, t)
    };
    assert_eq!(run(), run());
}

#[test]
fn trajectory_layout() {
    let (base, reqs) = setup();
    let mut cfg = lora_cfg(true);
    cfg.track_probes = true;
    let mut m = base.clone();
    let t = edit_single(&mut m, &reqs[0], &cfg, &base).unwrap();
    assert_eq!(t.steps.len(), 5);
    assert!(!t.aborted);
    let m_ans = reqs[0].reliability.answer.len();
    for (i, s) in t.steps.iter().enumerate() {
        assert_eq!(s.step, i);
        assert_eq!(s.tokens.len(), m_ans);
        assert_eq!(s.ud.len(), m_ans);
        assert!(s.gen_loss.is_some() && s.por_loss.is_some());
    }
    assert!(t.final_probes.is_some());
    assert_eq!(t.delta_norms.len(), 2);
    let line = serde_json::to_string(&t.steps[0]).unwrap();
    assert!(line.contains("\"frac_clipped\""));
}

#[test]
fn step_zero_ud_vanishes_where_greedy_equals_gold() {
    let (base, reqs) = setup();
    let mut req = reqs[0].clone();
    // make the gold answer the pre-edit greedy tokens, one at a time
    let mut ctx = req.reliability.prompt.clone();
    for i in 0..req.reliability.answer.len() {
        let logits = base.logits(&ctx).unwrap();
        let t = crate::tensor::kernels::argmax(logits.row(ctx.len() - 1));
        req.reliability.answer[i] = t;
        ctx.push(t);
    }
    let mut m = base.clone();
    let t = edit_single(&mut m, &req, &lora_cfg(false), &base).unwrap();
    assert!(t.steps[0].ud.iter().all(|&u| u.abs() < 1e-12), "{:?}", t.steps[0].ud);
}

#[test]
fn clipped_edit_stops_moving() {
    let (base, reqs) = setup();
    let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(2), true);
    if let EditLoss::Overtone(c) = &mut cfg.loss {
        // every position is already within ε of its target
        c.epsilon = 1e6;
    }
    cfg.steps = 4;
    let mut m = base.clone();
    let t = edit_single(&mut m, &reqs[0], &cfg, &base).unwrap();
    assert!(t.steps.iter().all(|s| s.frac_clipped == 1.0 && !s.updated));
    assert_eq!(m, base);
}

#[test]
fn non_finite_loss_aborts_with_last_finite_state() {
    let (base, reqs) = setup();
    let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(2), false);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 1e300;
    cfg.steps = 10;
    let mut m = base.clone();
    let t = edit_single(&mut m, &reqs[0], &cfg, &base).unwrap();
    assert!(t.aborted);
    assert!(t.steps.len() < 10);
    assert!(m.params.values().all(|a| a.all_finite()));
}

#[test]
fn invalid_run_configs_rejected() {
    let (base, reqs) = setup();
    let mut cfg = lora_cfg(false);
    cfg.steps = 0;
    assert!(edit_single(&mut base.clone(), &reqs[0], &cfg, &base).is_err());
    let mut cfg = lora_cfg(false);
    cfg.learning_rate = f64::NAN;
    assert!(edit_single(&mut base.clone(), &reqs[0], &cfg, &base).is_err());
    let mut long = reqs[0].clone();
    long.reliability.prompt = vec![Vocab::BOS_ID; 20];
    assert!(edit_single(&mut base.clone(), &long, &lora_cfg(false), &base).is_err());
}

#[test]
fn sequence_of_one_matches_single_edit() {
    let (base, reqs) = setup();
    let cfg = lora_cfg(true);
    let mut a = base.clone();
    let single = edit_single(&mut a, &reqs[0], &cfg, &base).unwrap();
    let mut b = base.clone();
    let seq = edit_sequential(&mut b, &reqs[..1], &cfg).unwrap();
    assert_eq!(seq, vec![single]);
    assert_eq!(a, b);
    assert!(edit_sequential(&mut b, &[], &cfg).is_err());
}

#[test]
fn sequential_lora_keeps_one_adapter() {
    let (base, reqs) = setup();
    let cfg = lora_cfg(false);
    let mut m = base.clone();
    let trajs = edit_sequential(&mut m, &reqs, &cfg).unwrap();
    assert_eq!(trajs.len(), 3);
    assert_eq!(m.params, base.params, "dense weights untouched");
    let adapters = &m.lora.as_ref().unwrap().adapters;
    assert_eq!(adapters.len(), 4);

    let mut reset = cfg.clone();
    reset.reset_adapters = true;
    let mut r = base.clone();
    edit_sequential(&mut r, &reqs, &reset).unwrap();
    // earlier adapters were folded into the dense weights
    assert_ne!(r.params, base.params);
    assert!(r.lora.is_some());
}

#[test]
fn sequential_errors_carry_the_index() {
    let (base, mut reqs) = setup();
    reqs[1].reliability.prompt = vec![Vocab::BOS_ID; 20];
    let err = edit_sequential(&mut base.clone(), &reqs, &lora_cfg(false)).unwrap_err();
    assert!(matches!(err, Error::EditFailed { index: 1, .. }), "{err}");
}

#[test]
fn run_config_json_round_trip() {
    let cfg = EditRunConfig::defaults(EditMethod::lora(2), true);
    let json = serde_json::to_value(&cfg).unwrap();
    assert_eq!(json["loss"]["kind"], "overtone");
    assert_eq!(json["loss"]["epsilon"], 0.05);
    assert_eq!(json["method"]["kind"], "lora");
    let back: EditRunConfig = serde_json::from_value(json).unwrap();
    assert_eq!(back, cfg);
    let ce = EditRunConfig::defaults(EditMethod::full_layer(2), false);
    assert_eq!(serde_json::to_value(&ce).unwrap()["loss"]["kind"], "ce");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]
    #[test]
    fn edits_touch_only_designated_parameters(req in 0usize..3, seed in 0u64..100, overtone in proptest::bool::ANY, layer in 0usize..2) {
        let (base, reqs) = setup();
        let mut cfg = EditRunConfig::defaults(EditMethod::full_layer(layer), overtone);
        cfg.steps = 3;
        cfg.seed = seed;
        let mut model = base.clone();
        edit_single(&mut model, &reqs[req], &cfg, &base).unwrap();
        let designated = cfg.method.designated_parameters();
        for (name, value) in &model.params {
            if !designated.contains(name) {
                proptest::prop_assert_eq!(value, &base.params[name], "{} moved", name);
            }
        }
    }
}
