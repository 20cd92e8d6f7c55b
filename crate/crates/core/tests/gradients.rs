//! Analytic gradients against central finite differences, plus independent
//! checks of the network arithmetic and the optimizer.

use std::sync::Arc;

use eim_core::approximator::{finite_diff_check, AdamConfig};
use eim_core::expert::{decompose_layout, generate_expert_layout};
use eim_core::netlist::{generate_synthetic, SynthConfig};
use eim_core::policy::{ppo_loss, PpoSample};
use eim_core::reward::{iq_objective, pref_loss, CachedState, DemoSample, PrefSample};
use eim_core::{
    Arch, Netlist, OptimizerState, PlacementState, PolicyModel, PpoConfig, QMapModel, RewardKind,
    RewardModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn small_design(seed: u64) -> Arc<Netlist> {
    let cfg = SynthConfig {
        grid_n: 6,
        macro_count: 4,
        min_size: 1,
        max_size: 2,
        net_count: 5,
        min_degree: 2,
        max_degree: 3,
        terminal_prob: 0.5,
    };
    Arc::new(generate_synthetic(&cfg, seed).unwrap())
}

/// All states of a few expert trajectories.
fn expert_states(d: &Arc<Netlist>) -> Vec<(Vec<PlacementState>, Vec<eim_core::Action>)> {
    (0..3)
        .map(|s| {
            let t = decompose_layout(d, &generate_expert_layout(d, s).unwrap()).unwrap();
            (t.states(d).unwrap(), t.actions)
        })
        .collect()
}

#[test]
fn pref_loss_gradient() {
    let d = small_design(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cached = Vec::new();
    let mut pairs = Vec::new();
    for (states, actions) in expert_states(&d) {
        for (s, &a) in states.iter().zip(&actions) {
            let legal = s.legal_actions().unwrap();
            let r = legal[rng.gen_range(0..legal.len())];
            if r != a {
                cached.push(CachedState::new(s).unwrap());
                pairs.push((a, r));
            }
        }
    }
    let batch: Vec<PrefSample> = cached
        .iter()
        .zip(&pairs)
        .map(|(c, &(chosen, rejected))| PrefSample {
            state: c,
            chosen,
            rejected,
        })
        .collect();
    for seed in 0..3 {
        let rm = RewardModel::new(
            RewardKind::Preference,
            QMapModel::init(Arch::q_map(6, 8), seed),
            0.99,
            0.05,
        );
        let err = finite_diff_check(
            &rm.model,
            |m| {
                let probe = RewardModel::new(RewardKind::Preference, m.clone(), 0.99, 0.05);
                pref_loss(&probe, &batch, 0.05).unwrap()
            },
            PROBES,
            H,
            seed,
        );
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn iq_objective_gradient() {
    let d = small_design(2);
    let trajs = expert_states(&d);
    let cached: Vec<Vec<CachedState>> = trajs
        .iter()
        .map(|(states, _)| {
            states
                .iter()
                .map(|s| CachedState::new(s).unwrap())
                .collect()
        })
        .collect();
    let mut batch = Vec::new();
    for ((_, actions), cs) in trajs.iter().zip(&cached) {
        for (t, &a) in actions.iter().enumerate() {
            batch.push(DemoSample {
                state: &cs[t],
                action: a,
                next: &cs[t + 1],
            });
        }
    }
    let initial: Vec<&CachedState> = cached.iter().map(|c| &c[0]).collect();
    for seed in 0..3 {
        let model = QMapModel::init(Arch::q_map(6, 8), 10 + seed);
        let err = finite_diff_check(
            &model,
            |m| {
                let rm = RewardModel::new(RewardKind::Demonstration, m.clone(), 0.9, 0.1);
                iq_objective(&rm, &batch, &initial).unwrap()
            },
            PROBES,
            H,
            seed,
        );
        assert!(err < TOL, "relative error {err}");
    }
}

#[test]
fn ppo_loss_gradient() {
    let d = small_design(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PolicyModel::init(6, 8, 4);
    let mut states = Vec::new();
    for _ in 0..4 {
        let mut s = PlacementState::reset(d.clone());
        while !s.is_done() {
            let legal = s.legal_actions().unwrap();
            let a = legal[rng.gen_range(0..legal.len())];
            states.push((CachedState::new(&s).unwrap(), a));
            s.step_in_place(a).unwrap();
        }
    }
    // Old log-probabilities are current ones plus noise, so some ratios clip.
    let extras: Vec<(f64, f64, f64)> = states
        .iter()
        .map(|(cs, a)| {
            let logits = p.actor.forward(&cs.features).unwrap();
            let v = eim_core::reward::soft_value(&logits, &cs.legal).unwrap();
            let lp = logits[a.0] - v;
            (
                lp + rng.gen_range(-0.4..0.4),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-5.0..5.0),
            )
        })
        .collect();
    let samples: Vec<PpoSample> = states
        .iter()
        .zip(&extras)
        .map(|((cs, a), &(old, adv, ret))| PpoSample {
            features: &cs.features,
            legal: &cs.legal,
            action: *a,
            old_log_prob: old,
            advantage: adv,
            ret,
        })
        .collect();
    let cfg = PpoConfig::default();
    let (parts, _, _) = ppo_loss(&p, &samples, &cfg).unwrap();
    assert!(parts.clip_fraction > 0.0 && parts.clip_fraction < 1.0);

    let actor_err = finite_diff_check(
        &p.actor,
        |m| {
            let mut q = p.clone();
            q.actor = m.clone();
            let (parts, ga, _) = ppo_loss(&q, &samples, &cfg).unwrap();
            (parts.total, ga)
        },
        PROBES,
        H,
        5,
    );
    assert!(actor_err < TOL, "actor relative error {actor_err}");
    let critic_err = finite_diff_check(
        &p.critic,
        |m| {
            let mut q = p.clone();
            q.critic = m.clone();
            let (parts, _, gc) = ppo_loss(&q, &samples, &cfg).unwrap();
            (parts.total, gc)
        },
        PROBES,
        H,
        6,
    );
    assert!(critic_err < TOL, "critic relative error {critic_err}");
}

#[test]
fn backward_matches_finite_differences_for_random_out_grads() {
    let arch = Arch::q_map(5, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let model = QMapModel::init(arch, trial);
        let x: Vec<f64> = (0..arch.input_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let g: Vec<f64> = (0..arch.outputs)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let err = finite_diff_check(
            &model,
            |m| {
                let out = m.forward(&x).unwrap();
                let loss = out.iter().zip(&g).map(|(o, g)| o * g).sum();
                (loss, m.backward(&x, &g).unwrap())
            },
            1,
            H,
            trial,
        );
        assert!(err < TOL, "trial {trial}: relative error {err}");
    }
}

/// Straight-line reimplementation over the documented parameter layout.
fn reference_forward(m: &QMapModel, x: &[f64]) -> Vec<f64> {
    let d = m.arch.input_dim();
    let h = m.arch.hidden;
    let o = m.arch.outputs;
    let p = &m.params;
    let mut hidden = vec![0.0; h];
    for (j, hv) in hidden.iter_mut().enumerate() {
        let mut s = p[h * d + j];
        for i in 0..d {
            s += p[j * d + i] * x[i];
        }
        *hv = s.tanh();
    }
    let w2 = h * d + h;
    let b2 = w2 + o * h;
    (0..o)
        .map(|c| p[b2 + c] + (0..h).map(|j| p[w2 + c * h + j] * hidden[j]).sum::<f64>())
        .collect()
}

#[test]
fn forward_matches_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (i, arch) in [Arch::q_map(4, 5), Arch::scalar(6, 9), Arch::q_map(8, 16)]
        .into_iter()
        .enumerate()
    {
        let mut model = QMapModel::init(arch, i as u64);
        for p in model.params.iter_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        assert_eq!(
            model.params.len(),
            arch.hidden * arch.input_dim()
                + arch.hidden
                + arch.outputs * arch.hidden
                + arch.outputs
        );
        for _ in 0..10 {
            let x: Vec<f64> = (0..arch.input_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let got = model.forward(&x).unwrap();
            let want = reference_forward(&model, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }
}

/// Direct per-cell convolution with explicit bounds checks.
fn reference_conv_forward(m: &QMapModel, x: &[f64], k: usize) -> Vec<f64> {
    let n = m.arch.grid_n as isize;
    let cells = (n * n) as usize;
    let (c_in, h) = (m.arch.channels, m.arch.hidden);
    let per = c_in * k * k;
    let p = &m.params;
    let r = (k / 2) as isize;
    (0..cells)
        .map(|cell| {
            let (px, py) = ((cell as isize) % n, (cell as isize) / n);
            let mut out = p[h * per + 2 * h];
            for j in 0..h {
                let mut z = p[h * per + j];
                for c in 0..c_in {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (ix, iy) = (px + dx as isize - r, py + dy as isize - r);
                            if ix < 0 || iy < 0 || ix >= n || iy >= n {
                                continue;
                            }
                            z += p[j * per + (c * k + dy) * k + dx]
                                * x[c * cells + (iy * n + ix) as usize];
                        }
                    }
                }
                out += p[h * per + h + j] * z.tanh();
            }
            out
        })
        .collect()
}

#[test]
fn conv_forward_matches_reference_and_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (i, (n, h, k)) in [(4, 3, 3), (6, 5, 5), (5, 2, 7), (3, 4, 9)]
        .into_iter()
        .enumerate()
    {
        let arch = Arch::conv_map(n, h, k);
        let model = QMapModel::init(arch, i as u64);
        assert_eq!(model.params.len(), h * 6 * k * k + 2 * h + 1);
        for _ in 0..5 {
            let x: Vec<f64> = (0..arch.input_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let got = model.forward(&x).unwrap();
            for (g, w) in got.iter().zip(reference_conv_forward(&model, &x, k)) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            let g: Vec<f64> = (0..arch.outputs)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let err = finite_diff_check(
                &model,
                |m| {
                    let out = m.forward(&x).unwrap();
                    (
                        out.iter().zip(&g).map(|(o, g)| o * g).sum(),
                        m.backward(&x, &g).unwrap(),
                    )
                },
                PROBES,
                H,
                i as u64,
            );
            assert!(err < TOL, "relative error {err}");
        }
    }
}

#[test]
fn conv_losses_match_finite_differences() {
    let d = small_design(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trajs = expert_states(&d);
    let cached: Vec<Vec<CachedState>> = trajs
        .iter()
        .map(|(states, _)| {
            states
                .iter()
                .map(|s| CachedState::new(s).unwrap())
                .collect()
        })
        .collect();
    let mut demos = Vec::new();
    let mut prefs = Vec::new();
    for ((states, actions), cs) in trajs.iter().zip(&cached) {
        for (t, &a) in actions.iter().enumerate() {
            demos.push(DemoSample {
                state: &cs[t],
                action: a,
                next: &cs[t + 1],
            });
            let legal = states[t].legal_actions().unwrap();
            let r = legal[rng.gen_range(0..legal.len())];
            if r != a {
                prefs.push(PrefSample {
                    state: &cs[t],
                    chosen: a,
                    rejected: r,
                });
            }
        }
    }
    let initial: Vec<&CachedState> = cached.iter().map(|c| &c[0]).collect();
    let model = QMapModel::init(Arch::conv_map(6, 4, 5), 3);
    let err = finite_diff_check(
        &model,
        |m| {
            let rm = RewardModel::new(RewardKind::Demonstration, m.clone(), 0.9, 0.1);
            iq_objective(&rm, &demos, &initial).unwrap()
        },
        PROBES,
        H,
        1,
    );
    assert!(err < TOL, "iq relative error {err}");
    let err = finite_diff_check(
        &model,
        |m| {
            let rm = RewardModel::new(RewardKind::Preference, m.clone(), 0.99, 0.05);
            pref_loss(&rm, &prefs, 0.05).unwrap()
        },
        PROBES,
        H,
        2,
    );
    assert!(err < TOL, "pref relative error {err}");
}

#[test]
fn adam_minimizes_a_quadratic() {
    let arch = Arch {
        grid_n: 1,
        channels: 3,
        hidden: 2,
        outputs: 1,
        activation: Default::default(),
        encoder: Default::default(),
    };
    let mut model = QMapModel::zeros(arch);
    let target: Vec<f64> = (0..model.params.len())
        .map(|i| i as f64 * 0.3 - 1.0)
        .collect();
    let mut opt = OptimizerState::new(
        model.params.len(),
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );
    for _ in 0..3000 {
        let grad: Vec<f64> = model
            .params
            .iter()
            .zip(&target)
            .map(|(p, t)| 2.0 * (p - t))
            .collect();
        opt.step(&mut model, &grad);
    }
    assert_eq!(opt.step_count, 3000);
    for (p, t) in model.params.iter().zip(&target) {
        assert!((p - t).abs() < 1e-3, "{p} vs {t}");
    }
}

#[test]
fn xavier_init_statistics() {
    let arch = Arch::q_map(8, 32);
    let d = arch.input_dim();
    let a = (6.0 / (d + arch.hidden) as f64).sqrt();
    let mut all = Vec::new();
    for seed in 0..10 {
        let m = QMapModel::init(arch, seed);
        let w1 = &m.params[..arch.hidden * d];
        assert!(w1.iter().all(|w| w.abs() <= a));
        assert!(m.params[arch.hidden * d..arch.hidden * d + arch.hidden]
            .iter()
            .all(|&b| b == 0.0));
        all.extend_from_slice(w1);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sigma = a / (3.0 * n).sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    let var = all.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    assert!((var - a * a / 3.0).abs() < 0.02 * a * a / 3.0);
}
