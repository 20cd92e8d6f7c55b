use std::sync::Arc;

use eim_core::approximator::AdamConfig;
use eim_core::expert::DatasetConfig;
use eim_core::netlist::{generate_synthetic, SynthConfig};
use eim_core::reward::{
    extract_reward, iq_objective, policy_from_q, pref_loss, reward_accuracy, soft_value, top1_hit,
    train_eim_d, train_eim_p, CachedState, DemoSample, PrefSample, ValidationCache,
};
use eim_core::{
    Arch, ExpertDataset, Netlist, OptimizerState, PlacementState, QMapModel, RewardKind,
    RewardModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn design() -> Arc<Netlist> {
    Arc::new(generate_synthetic(&SynthConfig::default(), 1).unwrap())
}

fn dataset(count: usize) -> ExpertDataset {
    ExpertDataset::build(
        design(),
        &DatasetConfig {
            count,
            seed: 7,
            ..DatasetConfig::default()
        },
    )
    .unwrap()
}

fn legal_count(s: &PlacementState) -> usize {
    s.legal_actions().unwrap().len()
}

#[test]
fn zero_model_reward_is_minus_gamma_log_legal() {
    let ds = dataset(3);
    let rm = RewardModel::new(
        RewardKind::Demonstration,
        QMapModel::zeros(Arch::q_map(16, 8)),
        0.9,
        0.0,
    );
    for (traj, states) in ds.trajectories.iter().zip(ds.replay_states().unwrap()) {
        for (t, &a) in traj.actions.iter().enumerate() {
            let next = &states[t + 1];
            let want = if next.is_done() {
                0.0
            } else {
                -0.9 * (legal_count(next) as f64).ln()
            };
            let got = extract_reward(&rm, &states[t], a, next).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn constant_shift_moves_reward_by_one_minus_gamma() {
    let ds = dataset(2);
    let arch = Arch::q_map(16, 8);
    let base = QMapModel::init(arch, 3);
    let mut shifted = base.clone();
    let k = 2.5;
    let b2 = arch.param_count() - arch.outputs;
    for p in &mut shifted.params[b2..] {
        *p += k;
    }
    let gamma = 0.9;
    let a = RewardModel::new(RewardKind::Demonstration, base, gamma, 0.0);
    let b = RewardModel::new(RewardKind::Demonstration, shifted, gamma, 0.0);
    let states = ds.replay_states().unwrap();
    for (traj, states) in ds.trajectories.iter().zip(&states) {
        for (t, &act) in traj.actions.iter().enumerate() {
            let (s, next) = (&states[t], &states[t + 1]);
            let diff = extract_reward(&b, s, act, next).unwrap()
                - extract_reward(&a, s, act, next).unwrap();
            let want = if next.is_done() { k } else { (1.0 - gamma) * k };
            assert!((diff - want).abs() < 1e-9, "{diff} vs {want}");
        }
    }
}

#[test]
fn iq_objective_closed_form_at_zero() {
    let ds = dataset(3);
    let states = ds.replay_states().unwrap();
    let cached: Vec<Vec<CachedState>> = states
        .iter()
        .map(|t| t.iter().map(|s| CachedState::new(s).unwrap()).collect())
        .collect();
    let mut batch = Vec::new();
    let mut want_r = 0.0;
    for (traj, (cs, ss)) in ds.trajectories.iter().zip(cached.iter().zip(&states)) {
        for (t, &a) in traj.actions.iter().enumerate() {
            batch.push(DemoSample {
                state: &cs[t],
                action: a,
                next: &cs[t + 1],
            });
            if !ss[t + 1].is_done() {
                want_r -= 0.99 * (legal_count(&ss[t + 1]) as f64).ln();
            }
        }
    }
    want_r /= batch.len() as f64;
    let initial: Vec<&CachedState> = cached.iter().map(|c| &c[0]).collect();
    let want_v0 = (legal_count(&states[0][0]) as f64).ln();
    let want = -(want_r - 0.01 * want_v0);
    let rm = RewardModel::new(
        RewardKind::Demonstration,
        QMapModel::zeros(Arch::q_map(16, 4)),
        0.99,
        0.0,
    );
    let (loss, _) = iq_objective(&rm, &batch, &initial).unwrap();
    assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
}

#[test]
fn soft_value_and_policy_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        // Multiples of 1/8 keep the shifted values exact.
        let q: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-64..64) as f64 / 8.0)
            .collect();
        let mut legal: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        legal[rng.gen_range(0..n)] = true;
        let k = rng.gen_range(-16..16) as f64;
        let shifted: Vec<f64> = q.iter().map(|v| v + k).collect();
        let v = soft_value(&q, &legal).unwrap();
        let vs = soft_value(&shifted, &legal).unwrap();
        assert!((vs - (v + k)).abs() <= 1e-12 * (1.0 + v.abs() + k.abs()));

        let p = policy_from_q(&q, &legal).unwrap();
        let ps = policy_from_q(&shifted, &legal).unwrap();
        let argmax =
            |p: &[f64]| (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        assert_eq!(argmax(&p), argmax(&ps));
        let qa = (0..n)
            .filter(|&i| legal[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if q[b] >= q[i] => Some(b),
                _ => Some(i),
            })
            .unwrap();
        assert_eq!(argmax(&p), qa);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().zip(&legal).all(|(&x, &l)| l || x == 0.0));
    }
}

#[test]
fn strict_tie_rule() {
    assert!(top1_hit(&[1.0, 0.0, 0.5]));
    assert!(!top1_hit(&[1.0, 1.0, 0.5]));
    assert!(!top1_hit(&[0.0, 0.0, 0.0]));
    assert!(top1_hit(&[0.0]));
}

#[test]
fn constant_and_indicator_models() {
    let ds = dataset(10);
    let states = ds.replay_states().unwrap();
    let arch = Arch::q_map(16, 4);
    let b2 = arch.param_count() - arch.outputs;

    let mut constant = QMapModel::zeros(arch);
    constant.params[b2..].iter_mut().for_each(|p| *p = 0.7);
    let rm = RewardModel::new(RewardKind::Preference, constant, 0.99, 0.0);
    assert_eq!(reward_accuracy(&rm, &states, &ds.validation).unwrap(), 0.0);

    // Every trajectory starts from the same empty canvas, so a bias-only
    // network can single out one first move.
    let first =
        eim_core::expert::build_validation_set(&ds.netlist, &ds.trajectories, 15, 1).unwrap();
    let at_reset: Vec<_> = first.into_iter().filter(|v| v.step == 0).collect();
    let target = at_reset[0].expert;
    let subset: Vec<_> = at_reset
        .into_iter()
        .filter(|v| v.expert == target)
        .collect();
    let mut indicator = QMapModel::zeros(arch);
    indicator.params[b2 + target.0] = 1.0;
    let rm = RewardModel::new(RewardKind::Preference, indicator, 0.99, 0.0);
    assert_eq!(reward_accuracy(&rm, &states, &subset).unwrap(), 1.0);
}

#[test]
fn random_baseline_is_deterministic_and_near_chance() {
    let ds = dataset(50);
    let states = ds.replay_states().unwrap();
    let all = eim_core::expert::build_validation_set(&ds.netlist, &ds.trajectories, 15, 7).unwrap();
    let cache = ValidationCache::build(&states, &all, RewardKind::Preference).unwrap();
    let arch = Arch::q_map(16, 32);
    let a = cache
        .random_baseline(RewardKind::Preference, arch, 0.99, 1)
        .unwrap();
    let b = cache
        .random_baseline(RewardKind::Preference, arch, 0.99, 1)
        .unwrap();
    assert_eq!(a, b);
    let n = all.len() as f64;
    let p = 1.0 / 16.0;
    assert!((a - p).abs() <= 4.0 * (p * (1.0 - p) / n).sqrt(), "{a}");
}

fn small_cfg(alpha: f64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden: 16,
        alpha,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

/// Mean |r| over the chosen and rejected actions after full-batch descent on
/// the preference loss.
fn trained_reward_scale(ds: &ExpertDataset, alpha: f64) -> f64 {
    let states = ds.replay_states().unwrap();
    let cached: Vec<Vec<CachedState>> = states
        .iter()
        .map(|t| t.iter().map(|s| CachedState::new(s).unwrap()).collect())
        .collect();
    let batch: Vec<PrefSample> = ds
        .preferences
        .iter()
        .map(|p| PrefSample {
            state: &cached[p.traj][p.step],
            chosen: p.chosen,
            rejected: p.rejected,
        })
        .collect();
    let mut rm = RewardModel::new(
        RewardKind::Preference,
        QMapModel::init(Arch::q_map(16, 16), 4),
        0.99,
        alpha,
    );
    let mut opt = OptimizerState::new(
        rm.model.params.len(),
        AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    );
    for _ in 0..150 {
        let (_, grad) = pref_loss(&rm, &batch, alpha).unwrap();
        opt.step(&mut rm.model, &grad);
    }
    let mut total = 0.0;
    for b in &batch {
        let out = rm.model.forward(&b.state.features).unwrap();
        total += out[b.chosen.0].abs() + out[b.rejected.0].abs();
    }
    total / (2 * batch.len()) as f64
}

#[test]
fn regularizer_shrinks_rewards() {
    let ds = dataset(4);
    let free = trained_reward_scale(&ds, 0.0);
    let reg = trained_reward_scale(&ds, 0.1);
    assert!(reg < free, "{reg} vs {free}");
    assert!(free > 1.0);
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let ds = dataset(5);
    let cfg = small_cfg(1e-3);
    let a = train_eim_p(&ds, &cfg, |_| {}).unwrap();
    let b = eim_core::exec::sequential(|| train_eim_p(&ds, &cfg, |_| {}).unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let d1 = train_eim_d(&ds, &cfg, |_| {}).unwrap();
    let d2 = eim_core::exec::sequential(|| train_eim_d(&ds, &cfg, |_| {}).unwrap());
    assert_eq!(d1.log, d2.log);
    assert_eq!(d1.model, d2.model);
}

#[test]
fn zero_epochs_keep_the_initial_model() {
    let ds = dataset(5);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg(1e-3)
    };
    let out = train_eim_p(&ds, &cfg, |_| {}).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.log.len(), 1);
    assert_eq!(
        out.model.model,
        QMapModel::init(Arch::q_map(16, 16), out.model.model.init_seed)
    );
}
