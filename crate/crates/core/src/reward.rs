//! Reward models learned from expert data.
//!
//! Demonstration-based models treat the network output as a soft Q map and
//! read rewards off it as `r(s, a, s') = Q(s, a) - γ·V*(s')`, where `V*` is the
//! log-sum-exp of Q over legal actions. Preference-based models read the output
//! directly as `r(s, a)` and are fit with a pairwise logistic loss.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{
    AdamConfig, Arch, Checkpoint, Encoder, ModelError, OptimizerState, QMapModel,
};
use crate::env::{Action, EnvError, PlacementState};
use crate::exec;
use crate::expert::{ExpertDataset, ExpertError, ValidationTuple};
use crate::netlist::Netlist;
use crate::rng;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("no legal action in a non-terminal state")]
    NoLegalAction,
    #[error("s' is not the successor of (s, a)")]
    TransitionMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset has no {0}")]
    EmptyDataset(&'static str),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("model grid {model} does not match design grid {design}")]
    GridMismatch { model: usize, design: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

/// `log Σ exp q` over legal entries, shifted by the max for stability.
pub fn soft_value(q: &[f64], legal: &[bool]) -> Result<f64, RewardError> {
    let max = q
        .iter()
        .zip(legal)
        .filter(|(_, &l)| l)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(RewardError::NoLegalAction);
    }
    let sum: f64 = q
        .iter()
        .zip(legal)
        .filter(|(_, &l)| l)
        .map(|(v, _)| (v - max).exp())
        .sum();
    Ok(max + sum.ln())
}

/// Softmax of `q` restricted to legal entries; illegal entries get 0.
pub fn policy_from_q(q: &[f64], legal: &[bool]) -> Result<Vec<f64>, RewardError> {
    let v = soft_value(q, legal)?;
    Ok(q.iter()
        .zip(legal)
        .map(|(x, &l)| if l { (x - v).exp() } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Demonstration,
    Preference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub model: QMapModel,
    /// Discount used by reward extraction (demonstration models).
    pub gamma: f64,
    pub alpha: f64,
}

/// Features of a state plus its legal mask. Terminal states carry neither.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedState {
    pub features: Vec<f64>,
    pub legal: Vec<bool>,
}

impl CachedState {
    pub fn new(s: &PlacementState) -> Result<Self, EnvError> {
        if s.is_done() {
            return Ok(Self::terminal());
        }
        let f = s.feature_maps()?;
        Ok(Self {
            legal: f.legal(),
            features: f.flatten(),
        })
    }

    pub fn terminal() -> Self {
        Self {
            features: Vec::new(),
            legal: Vec::new(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.features.is_empty()
    }
}

impl RewardModel {
    pub fn new(kind: RewardKind, model: QMapModel, gamma: f64, alpha: f64) -> Self {
        Self {
            kind,
            model,
            gamma,
            alpha,
        }
    }

    pub fn check_grid(&self, netlist: &Netlist) -> Result<(), RewardError> {
        if self.model.arch.grid_n != netlist.grid_n {
            return Err(RewardError::GridMismatch {
                model: self.model.arch.grid_n,
                design: netlist.grid_n,
            });
        }
        Ok(())
    }

    /// `V*(s)`, with 0 for terminal states.
    pub fn cached_value(&self, s: &CachedState) -> Result<f64, RewardError> {
        if s.is_terminal() {
            return Ok(0.0);
        }
        soft_value(&self.model.forward(&s.features)?, &s.legal)
    }

    pub fn state_value(&self, s: &PlacementState) -> Result<f64, RewardError> {
        self.cached_value(&CachedState::new(s)?)
    }

    /// Reward of each candidate action at `s`.
    ///
    /// Preference models use `out[a]`; demonstration models use
    /// `Q(s, a) - γ·V*(step(s, a))`. `successors`, when given, holds the
    /// cached successor of each action.
    pub fn score_cached(
        &self,
        s: &CachedState,
        actions: &[Action],
        successors: Option<&[CachedState]>,
    ) -> Result<Vec<f64>, RewardError> {
        let out = self.model.forward(&s.features)?;
        match self.kind {
            RewardKind::Preference => Ok(actions.iter().map(|a| out[a.0]).collect()),
            RewardKind::Demonstration => {
                let succ = successors.expect("demonstration scoring needs successors");
                actions
                    .iter()
                    .zip(succ)
                    .map(|(a, next)| Ok(out[a.0] - self.gamma * self.cached_value(next)?))
                    .collect()
            }
        }
    }

    /// Per-step reward for taking `a` at `s` and landing in `s_next`.
    pub fn reward(
        &self,
        s: &PlacementState,
        a: Action,
        s_next: &PlacementState,
    ) -> Result<f64, RewardError> {
        match self.kind {
            RewardKind::Demonstration => extract_reward(self, s, a, s_next),
            RewardKind::Preference => Ok(self.model.forward(&CachedState::new(s)?.features)?[a.0]),
        }
    }

    pub fn to_checkpoint(&self) -> RewardCheckpoint {
        RewardCheckpoint {
            model: self.model.to_checkpoint(),
            kind: self.kind,
            gamma: self.gamma,
            alpha: self.alpha,
        }
    }

    pub fn from_checkpoint(ck: &RewardCheckpoint) -> Result<Self, ModelError> {
        Ok(Self::new(
            ck.kind,
            QMapModel::from_checkpoint(&ck.model)?,
            ck.gamma,
            ck.alpha,
        ))
    }
}

/// Approximator checkpoint plus reward metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCheckpoint {
    #[serde(flatten)]
    pub model: Checkpoint,
    pub kind: RewardKind,
    pub gamma: f64,
    pub alpha: f64,
}

/// `Q(s, a) - γ·V*(s')` for a deterministic transition; terminal `s'` has `V* = 0`.
pub fn extract_reward(
    rm: &RewardModel,
    s: &PlacementState,
    a: Action,
    s_next: &PlacementState,
) -> Result<f64, RewardError> {
    let (expected, _) = s.step(a)?;
    if expected != *s_next {
        return Err(RewardError::TransitionMismatch);
    }
    let q = rm.model.forward(&CachedState::new(s)?.features)?;
    Ok(q[a.0] - rm.gamma * rm.state_value(s_next)?)
}

/// One expert transition with cached endpoint features.
#[derive(Debug, Clone, Copy)]
pub struct DemoSample<'a> {
    pub state: &'a CachedState,
    pub action: Action,
    pub next: &'a CachedState,
}

/// One preference tuple with cached state features.
#[derive(Debug, Clone, Copy)]
pub struct PrefSample<'a> {
    pub state: &'a CachedState,
    pub chosen: Action,
    pub rejected: Action,
}

fn split_loss(mut acc: Vec<f64>) -> (f64, Vec<f64>) {
    let loss = acc.pop().expect("loss slot");
    (loss, acc)
}

/// Offline soft-Q inverse RL loss and its gradient.
///
/// `loss = -[ mean_b (r_b - α·r_b²) - (1-γ)·mean_i V*(s0_i) ]` with
/// `r_b = Q(s_b, a_b) - γ·V*(s'_b)`. Minimizing the loss maximizes the objective.
pub fn iq_objective(
    rm: &RewardModel,
    batch: &[DemoSample<'_>],
    initial_states: &[&CachedState],
) -> Result<(f64, Vec<f64>), RewardError> {
    if batch.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let dim = rm.model.params.len();
    let (gamma, alpha) = (rm.gamma, rm.alpha);
    let nb = batch.len() as f64;
    let ni = initial_states.len().max(1) as f64;
    let failed = std::sync::atomic::AtomicBool::new(false);
    let acc = exec::sum_into(batch.len() + initial_states.len(), dim + 1, |i, buf| {
        let (grad, loss) = buf.split_at_mut(dim);
        let model = &rm.model;
        if i < batch.len() {
            let b = &batch[i];
            let act = model
                .forward_cached(&b.state.features)
                .expect("feature shape");
            let q_sa = act.out[b.action.0];
            let (v_next, next_act) = if b.next.is_terminal() {
                (0.0, None)
            } else {
                let na = model
                    .forward_cached(&b.next.features)
                    .expect("feature shape");
                match soft_value(&na.out, &b.next.legal) {
                    Ok(v) => (v, Some(na)),
                    Err(_) => {
                        failed.store(true, std::sync::atomic::Ordering::Relaxed);
                        return;
                    }
                }
            };
            let r = q_sa - gamma * v_next;
            loss[0] -= (r - alpha * r * r) / nb;
            let g = -(1.0 - 2.0 * alpha * r) / nb;
            model.accumulate_backward(&b.state.features, &act.hidden, &[(b.action.0, g)], grad);
            if let Some(na) = next_act {
                let og: Vec<(usize, f64)> = na
                    .out
                    .iter()
                    .zip(&b.next.legal)
                    .enumerate()
                    .filter(|(_, (_, &l))| l)
                    .map(|(c, (q, _))| (c, -gamma * (q - v_next).exp() * g))
                    .collect();
                model.accumulate_backward(&b.next.features, &na.hidden, &og, grad);
            }
        } else {
            let s0 = initial_states[i - batch.len()];
            let act = model.forward_cached(&s0.features).expect("feature shape");
            let Ok(v0) = soft_value(&act.out, &s0.legal) else {
                failed.store(true, std::sync::atomic::Ordering::Relaxed);
                return;
            };
            let w = (1.0 - gamma) / ni;
            loss[0] += w * v0;
            let og: Vec<(usize, f64)> = act
                .out
                .iter()
                .zip(&s0.legal)
                .enumerate()
                .filter(|(_, (_, &l))| l)
                .map(|(c, (q, _))| (c, w * (q - v0).exp()))
                .collect();
            model.accumulate_backward(&s0.features, &act.hidden, &og, grad);
        }
    });
    if failed.into_inner() {
        return Err(RewardError::NoLegalAction);
    }
    Ok(split_loss(acc))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise logistic loss with an L2 penalty on the rewards:
/// `-mean log σ(r_c - r_r) + α·mean(r_c² + r_r²)`.
pub fn pref_loss(
    rm: &RewardModel,
    batch: &[PrefSample<'_>],
    alpha: f64,
) -> Result<(f64, Vec<f64>), RewardError> {
    if batch.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let dim = rm.model.params.len();
    let nb = batch.len() as f64;
    let acc = exec::sum_into(batch.len(), dim + 1, |i, buf| {
        let (grad, loss) = buf.split_at_mut(dim);
        let b = &batch[i];
        let act = rm
            .model
            .forward_cached(&b.state.features)
            .expect("feature shape");
        let (rc, rr) = (act.out[b.chosen.0], act.out[b.rejected.0]);
        let z = rc - rr;
        loss[0] += (softplus(-z) + alpha * (rc * rc + rr * rr)) / nb;
        let s = sigmoid(-z);
        let og = [
            (b.chosen.0, (-s + 2.0 * alpha * rc) / nb),
            (b.rejected.0, (s + 2.0 * alpha * rr) / nb),
        ];
        rm.model
            .accumulate_backward(&b.state.features, &act.hidden, &og, grad);
    });
    Ok(split_loss(acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Validation accuracy is measured every this many epochs and at the last epoch.
    pub eval_every: usize,
    pub hidden: usize,
    pub encoder: Encoder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            alpha: 1e-3,
            gamma: 0.99,
            seed: 0,
            eval_every: 1,
            hidden: 256,
            encoder: Encoder::Dense,
        }
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation accuracy (earliest on ties).
    pub model: RewardModel,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub log: Vec<EpochLog>,
}

/// Validation tuples with everything scoring needs precomputed.
pub struct ValidationCache {
    items: Vec<ValidationItem>,
}

struct ValidationItem {
    state: CachedState,
    /// Expert action first, then distractors.
    actions: Vec<Action>,
    successors: Option<Vec<CachedState>>,
}

impl ValidationCache {
    /// `states[traj][step]` must hold the replayed dataset states.
    pub fn build(
        states: &[Vec<PlacementState>],
        validation: &[ValidationTuple],
        kind: RewardKind,
    ) -> Result<Self, RewardError> {
        let items = exec::map(validation, |v| -> Result<ValidationItem, RewardError> {
            let s = states
                .get(v.traj)
                .and_then(|t| t.get(v.step))
                .ok_or(ExpertError::Replay {
                    traj: v.traj,
                    reason: format!("no state at step {}", v.step),
                })?;
            let mut actions = vec![v.expert];
            actions.extend(&v.distractors);
            let successors = match kind {
                RewardKind::Preference => None,
                RewardKind::Demonstration => Some(
                    actions
                        .iter()
                        .map(|&a| Ok(CachedState::new(&s.step(a)?.0)?))
                        .collect::<Result<Vec<_>, RewardError>>()?,
                ),
            };
            Ok(ValidationItem {
                state: CachedState::new(s)?,
                actions,
                successors,
            })
        });
        Ok(Self {
            items: items.into_iter().collect::<Result<_, _>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Fraction of tuples whose expert action strictly outscores every distractor.
    pub fn accuracy(&self, rm: &RewardModel) -> Result<f64, RewardError> {
        if self.items.is_empty() {
            return Err(RewardError::EmptyValidation);
        }
        let hits = exec::map(&self.items, |it| -> Result<bool, RewardError> {
            let scores = rm.score_cached(&it.state, &it.actions, it.successors.as_deref())?;
            Ok(top1_hit(&scores))
        });
        let mut count = 0usize;
        for h in hits {
            count += usize::from(h?);
        }
        Ok(count as f64 / self.items.len() as f64)
    }

    /// Accuracy of untrained models with a fresh initialization per tuple.
    ///
    /// One fixed network scores the recurring expert cells the same way in
    /// every tuple, so its hits are correlated. Independent draws make each
    /// tuple a Bernoulli trial with success probability `1/(k+1)` for `k`
    /// distractors.
    pub fn random_baseline(
        &self,
        kind: RewardKind,
        arch: Arch,
        gamma: f64,
        seed: u64,
    ) -> Result<f64, RewardError> {
        if self.items.is_empty() {
            return Err(RewardError::EmptyValidation);
        }
        let hits = exec::map_range(self.items.len(), |i| -> Result<bool, RewardError> {
            let it = &self.items[i];
            let model = QMapModel::init(arch, rng::derive(seed, &[0xBA5E, i as u64]));
            let rm = RewardModel::new(kind, model, gamma, 0.0);
            let scores = rm.score_cached(&it.state, &it.actions, it.successors.as_deref())?;
            Ok(top1_hit(&scores))
        });
        let mut count = 0usize;
        for h in hits {
            count += usize::from(h?);
        }
        Ok(count as f64 / self.items.len() as f64)
    }
}

/// Whether `scores[0]` (the expert) is strictly above every other entry. Ties
/// count as misses.
pub fn top1_hit(scores: &[f64]) -> bool {
    scores[1..].iter().all(|&d| scores[0] > d)
}

/// Top-1 reward accuracy of `rm` on `validation`.
pub fn reward_accuracy(
    rm: &RewardModel,
    states: &[Vec<PlacementState>],
    validation: &[ValidationTuple],
) -> Result<f64, RewardError> {
    if validation.is_empty() {
        return Err(RewardError::EmptyValidation);
    }
    ValidationCache::build(states, validation, rm.kind)?.accuracy(rm)
}

fn cache_states(states: &[Vec<PlacementState>]) -> Result<Vec<Vec<CachedState>>, RewardError> {
    exec::map(states, |traj| {
        traj.iter()
            .map(|s| Ok(CachedState::new(s)?))
            .collect::<Result<Vec<_>, RewardError>>()
    })
    .into_iter()
    .collect()
}

/// Shared minibatch loop: shuffles `n` sample indices each epoch, applies
/// `loss_fn` per batch, evaluates, and keeps the best checkpoint.
fn train_loop<F>(
    mut rm: RewardModel,
    n: usize,
    cfg: &TrainConfig,
    val: &ValidationCache,
    mut on_epoch: impl FnMut(&EpochLog),
    loss_fn: F,
) -> Result<TrainOutcome, RewardError>
where
    F: Fn(&RewardModel, &[usize]) -> Result<(f64, Vec<f64>), RewardError>,
{
    let mut opt = OptimizerState::new(
        rm.model.params.len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let first = EpochLog {
        epoch: 0,
        loss: None,
        val_accuracy: Some(val.accuracy(&rm)?),
    };
    on_epoch(&first);
    let mut best = (rm.clone(), 0, first.val_accuracy.expect("set"));
    let mut log = vec![first];
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(cfg.seed, &[0xB47C, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(batch) {
            let (loss, grad) = loss_fn(&rm, idx)?;
            opt.step(&mut rm.model, &grad);
            total += loss;
            batches += 1;
        }
        let evaluate = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let val_accuracy = if evaluate {
            Some(val.accuracy(&rm)?)
        } else {
            None
        };
        if let Some(acc) = val_accuracy {
            if acc > best.2 {
                best = (rm.clone(), epoch, acc);
            }
        }
        let entry = EpochLog {
            epoch,
            loss: Some(total / batches.max(1) as f64),
            val_accuracy,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_accuracy: best.2,
        log,
    })
}

fn init_reward_model(netlist: &Arc<Netlist>, kind: RewardKind, cfg: &TrainConfig) -> RewardModel {
    RewardModel::new(
        kind,
        QMapModel::init(
            Arch {
                encoder: cfg.encoder,
                ..Arch::q_map(netlist.grid_n, cfg.hidden)
            },
            cfg.seed,
        ),
        cfg.gamma,
        cfg.alpha,
    )
}

/// Learns a demonstration reward model by minibatch descent on [`iq_objective`].
pub fn train_eim_d(
    ds: &ExpertDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, RewardError> {
    let train: Vec<usize> = ds.train_trajectories().map(|t| t.id).collect();
    if train.is_empty() {
        return Err(RewardError::EmptyDataset("training trajectories"));
    }
    let states = ds.replay_states()?;
    let cached = cache_states(&states)?;
    let samples: Vec<(usize, usize)> = train
        .iter()
        .flat_map(|&t| (0..ds.trajectories[t].len()).map(move |k| (t, k)))
        .collect();
    let initial = [&cached[train[0]][0]];
    let val = ValidationCache::build(&states, &ds.validation, RewardKind::Demonstration)?;
    let rm = init_reward_model(&ds.netlist, RewardKind::Demonstration, cfg);
    train_loop(rm, samples.len(), cfg, &val, on_epoch, |rm, idx| {
        let batch: Vec<DemoSample<'_>> = idx
            .iter()
            .map(|&i| {
                let (t, k) = samples[i];
                DemoSample {
                    state: &cached[t][k],
                    action: ds.trajectories[t].actions[k],
                    next: &cached[t][k + 1],
                }
            })
            .collect();
        iq_objective(rm, &batch, &initial)
    })
}

/// Learns a preference reward model by minibatch descent on [`pref_loss`].
pub fn train_eim_p(
    ds: &ExpertDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, RewardError> {
    if ds.preferences.is_empty() {
        return Err(RewardError::EmptyDataset("preference tuples"));
    }
    let states = ds.replay_states()?;
    let cached = cache_states(&states)?;
    let val = ValidationCache::build(&states, &ds.validation, RewardKind::Preference)?;
    let rm = init_reward_model(&ds.netlist, RewardKind::Preference, cfg);
    train_loop(rm, ds.preferences.len(), cfg, &val, on_epoch, |rm, idx| {
        let batch: Vec<PrefSample<'_>> = idx
            .iter()
            .map(|&i| {
                let p = &ds.preferences[i];
                PrefSample {
                    state: &cached[p.traj][p.step],
                    chosen: p.chosen,
                    rejected: p.rejected,
                }
            })
            .collect();
        pref_loss(rm, &batch, rm.alpha)
    })
}
