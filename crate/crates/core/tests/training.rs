mod common;

use std::collections::BTreeMap;

use pgode::diffcore::{Tape, Tensor};
use pgode::evalkit;
use pgode::objectives::Variant;
use pgode::simkit::{Split, TrajectorySample};
use pgode::trainer::{self, adam_step, clip_by_norm, AdamState, Batch, Model, TrainConfig, TrainState, XiStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state(cfg: TrainConfig, train: &[TrajectorySample]) -> TrainState {
    TrainState::new(Model::new(cfg, XiStats::fit(train)).unwrap())
}

fn batch(model: &Model, samples: &[TrajectorySample]) -> Batch {
    let refs: Vec<&TrajectorySample> = samples.iter().collect();
    model.prepare(&refs, model.cfg.prediction_length).unwrap()
}

fn noise(b: &Batch, d: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![b.graphs.n_objects, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn max_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().map(|(k, t)| t.max_abs_diff(&b[k])).fold(0.0, f64::max)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 0);
    let cfg = TrainConfig { lr: 0.0, ..common::tiny_config() };
    let mut st = state(cfg, &data.train);
    let before = st.model.store.clone();
    let m = trainer::train_epoch(&mut st, &data.train).unwrap();
    assert_eq!(m.batches, 2);
    assert_eq!(st.model.store, before);
    assert_eq!(st.epoch, 1);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 1);
    let mut st = state(common::tiny_config(), &data.train);
    let b1 = batch(&st.model, &data.train[..4]);
    let b2 = batch(&st.model, &data.train[4..]);
    let d = st.model.cfg.d;
    st.step(&b1, &noise(&b1, d, 1)).unwrap();
    st.epoch = 3;

    let path = tmp.path().join("state.ckpt");
    st.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed.epoch, 3);
    assert_eq!(resumed.model_opt.step, st.model_opt.step);
    assert_eq!(resumed.critic_opt.step, st.critic_opt.step);

    let a = st.step(&b2, &noise(&b2, d, 2)).unwrap();
    let b = resumed.step(&b2, &noise(&b2, d, 2)).unwrap();
    assert!((a.loss - b.loss).abs() <= 1e-12);
    assert!(max_diff(st.model.store.as_map(), resumed.model.store.as_map()) <= 1e-12);
    assert!(max_diff(&st.model_opt.m, &resumed.model_opt.m) <= 1e-12);
    assert!(max_diff(&st.critic_opt.v, &resumed.critic_opt.v) <= 1e-12);
}

#[test]
fn critic_ascent_does_not_lower_its_objective() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 2);
    let mut model = Model::new(common::tiny_config(), XiStats::fit(&data.train)).unwrap();
    let b = batch(&model, &data.train);
    let eps = noise(&b, model.cfg.d, 5);
    let dis_value = |m: &Model| {
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape, true).unwrap();
        let f = m.forward(&mut tape, &p, &b, Some(&eps), true).unwrap();
        let dis = f.dis.unwrap();
        let v = tape.value(dis).item().unwrap();
        let g: BTreeMap<_, _> = tape
            .backward(dis)
            .unwrap()
            .into_map()
            .into_iter()
            .filter(|(k, _)| Model::is_critic_param(k))
            .collect();
        (v, g)
    };
    let (before, grads) = dis_value(&model);
    assert!(!grads.is_empty());
    let frozen: Vec<_> = model.store.iter().filter(|(k, _)| !Model::is_critic_param(k)).map(|(k, t)| (k.clone(), t.clone())).collect();
    let mut opt = AdamState::default();
    adam_step(&mut model.store, &grads, &mut opt, 1e-4, [0.9, 0.999], 1e-8, -1.0).unwrap();
    let (after, _) = dis_value(&model);
    assert!(after >= before, "{after} < {before}");
    assert!(frozen.iter().all(|(k, t)| model.store.get(k) == Some(t)));
}

#[test]
fn step_updates_follow_parameter_roles() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 3);
    for variant in [Variant::Full, Variant::NoDisentangle, Variant::NoSystem, Variant::NoPrototypes] {
        let cfg = TrainConfig { flags: variant.flags(), ..common::tiny_config() };
        let mut st = state(cfg, &data.train);
        let b = batch(&st.model, &data.train[..4]);
        let eps = noise(&b, st.model.cfg.d, 9);
        let before = st.model.store.clone();

        // critic part of the step computed by hand from the same pass
        let mut tape = Tape::new();
        let p = before.bind(&mut tape, true).unwrap();
        let f = st.model.forward(&mut tape, &p, &b, Some(&eps), true).unwrap();
        let mut critic: BTreeMap<_, _> = tape
            .backward(f.total)
            .unwrap()
            .into_map()
            .into_iter()
            .filter(|(k, _)| Model::is_critic_param(k))
            .collect();
        drop(tape);
        let mut expect = before.clone();
        let cfg = st.model.cfg.clone();
        clip_by_norm(&mut critic, cfg.grad_clip);
        adam_step(&mut expect, &critic, &mut AdamState::default(), cfg.lr, cfg.betas, cfg.adam_eps, -1.0).unwrap();

        st.step(&b, &eps).unwrap();
        let changed = |prefix: &str| {
            st.model
                .store
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .any(|(k, t)| before.get(k) != Some(t))
        };
        for (k, t) in st.model.store.iter().filter(|(k, _)| Model::is_critic_param(k)) {
            if variant == Variant::NoDisentangle {
                assert_eq!(before.get(k), Some(t), "{variant:?} {k}");
            } else {
                assert_eq!(expect.get(k), Some(t), "{variant:?} {k}");
            }
        }
        assert!(changed("dec."), "{variant:?}");
        assert!(changed("enc.obj."), "{variant:?}");
        assert_eq!(changed("critic.sys."), variant != Variant::NoSystem, "{variant:?}");
        assert_eq!(changed("critic.dis."), variant != Variant::NoDisentangle, "{variant:?}");
    }
}

#[test]
fn fit_is_deterministic_and_gates_stay_on_the_simplex() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 4);
    let a = trainer::fit(common::tiny_config(), &data.train, &data.val).unwrap();
    let b = trainer::fit(common::tiny_config(), &data.train, &data.val).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.store, b.best.store);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|m| m.val_mse_q.is_some_and(|v| v.is_finite())));
    assert!((1..=2).contains(&a.best_epoch));

    for g in a.best.gates(&data.test_ood).unwrap() {
        assert_eq!(g.shape(), &[3, 2]);
        for r in 0..3 {
            assert!((g.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(g.row(r).iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn saved_model_predicts_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 5);
    let cfg = TrainConfig { epochs: 1, ..common::tiny_config() };
    let out = trainer::fit(cfg, &data.train, &data.val).unwrap();
    let path = tmp.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.cfg, out.best.cfg);
    let p1 = out.best.predict(&data.test_id, 8).unwrap();
    let p2 = back.predict(&data.test_id, 8).unwrap();
    assert_eq!(p1, p2);
    assert_eq!((p1.len(), p1[0].len(), p1[0][0].len()), (4, 3, 8));
    assert!(back.predict(&data.test_id, 13).is_err());
}

#[test]
fn report_covers_splits_and_lengths() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 6);
    let model = Model::new(common::tiny_config(), XiStats::fit(&data.train)).unwrap();
    let r = evalkit::mse_report(&model, &[(Split::TestId, &data.test_id), (Split::TestOod, &data.test_ood)], &[4, 8]).unwrap();
    let h = r.in_hundredths();
    for split in [Split::TestId, Split::TestOod] {
        for len in [4, 8] {
            let v = r.get(split, len).unwrap();
            assert!(v.q >= 0.0 && v.v >= 0.0);
            assert!(((v.qx + v.qy) / 2.0 - v.q).abs() < 1e-12);
            assert!((h.get(split, len).unwrap().q - 100.0 * v.q).abs() < 1e-9);
        }
    }
    assert!(r.get(Split::Val, 4).is_none());
    assert!((evalkit::position_mse(&model, &data.test_id, 4).unwrap() - r.get(Split::TestId, 4).unwrap().q).abs() < 1e-12);
}

#[test]
fn config_rejects_unknown_fields_and_short_sequences() {
    let text = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#).is_err());
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);

    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 7);
    let cfg = TrainConfig { prediction_length: 13, ..common::tiny_config() };
    assert!(trainer::fit(cfg, &data.train, &data.val).is_err());
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { d: 7, ..TrainConfig::default() }.validate().is_err());
}
