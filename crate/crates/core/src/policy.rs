//! Masked-grid PPO placement policy.
//!
//! The actor maps state features to one logit per cell; illegal cells are
//! masked out before the softmax. The critic is the same network shape with a
//! scalar head. Per-step rewards come from a [`RewardSource`].

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{AdamConfig, Arch, Checkpoint, ModelError, OptimizerState, QMapModel};
use crate::env::{dense_hpwl_reward, Action, EnvError, Layout, PlacementState};
use crate::exec;
use crate::netlist::Netlist;
use crate::reward::{policy_from_q, soft_value, CachedState, RewardError, RewardKind, RewardModel};
use crate::rng;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no legal action in a non-terminal state")]
    NoLegalAction,
    #[error("stale batch: replayed log-probability differs by {diff:e}")]
    StaleBatch { diff: f64 },
    #[error("no successful episodes in the batch")]
    EmptyBatch,
    #[error("policy grid {policy} does not match design grid {design}")]
    GridMismatch { policy: usize, design: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub actor: QMapModel,
    /// Same network shape as the actor with a scalar output.
    pub critic: QMapModel,
}

impl PolicyModel {
    pub fn init(grid_n: usize, hidden: usize, seed: u64) -> Self {
        Self {
            actor: QMapModel::init(Arch::q_map(grid_n, hidden), rng::derive(seed, &[0xAC7])),
            critic: QMapModel::init(Arch::scalar(grid_n, hidden), rng::derive(seed, &[0xC71])),
        }
    }

    /// Zero actor: uniform over legal cells.
    pub fn uniform(grid_n: usize, hidden: usize) -> Self {
        Self {
            actor: QMapModel::zeros(Arch::q_map(grid_n, hidden)),
            critic: QMapModel::zeros(Arch::scalar(grid_n, hidden)),
        }
    }

    pub fn grid_n(&self) -> usize {
        self.actor.arch.grid_n
    }

    fn check_grid(&self, netlist: &Netlist) -> Result<(), PolicyError> {
        if self.grid_n() != netlist.grid_n {
            return Err(PolicyError::GridMismatch {
                policy: self.grid_n(),
                design: netlist.grid_n,
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            actor: self.actor.to_checkpoint(),
            critic: self.critic.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Self, ModelError> {
        Ok(Self {
            actor: QMapModel::from_checkpoint(&ck.actor)?,
            critic: QMapModel::from_checkpoint(&ck.critic)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub actor: Checkpoint,
    pub critic: Checkpoint,
}

fn map_no_legal(e: RewardError) -> PolicyError {
    match e {
        RewardError::NoLegalAction => PolicyError::NoLegalAction,
        other => PolicyError::Reward(other),
    }
}

/// Action probabilities at `s`; zero on illegal cells.
pub fn policy_distribution(p: &PolicyModel, s: &PlacementState) -> Result<Vec<f64>, PolicyError> {
    let cs = CachedState::new(s)?;
    if cs.is_terminal() {
        return Err(PolicyError::NoLegalAction);
    }
    policy_from_q(&p.actor.forward(&cs.features)?, &cs.legal).map_err(map_no_legal)
}

/// Where per-step rewards come from.
#[derive(Debug, Clone)]
pub enum RewardSource {
    /// Negative HPWL increase per step.
    Hpwl,
    /// A learned reward model; its kind selects the extraction rule.
    Learned(RewardModel),
}

impl RewardSource {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSource::Hpwl => "hpwl",
            RewardSource::Learned(rm) => match rm.kind {
                RewardKind::Demonstration => "eim_d",
                RewardKind::Preference => "eim_p",
            },
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, RewardSource::Learned(_))
    }

    fn reward(
        &self,
        s: &PlacementState,
        cs: &CachedState,
        a: Action,
        next: &PlacementState,
        next_cs: &CachedState,
    ) -> Result<f64, PolicyError> {
        Ok(match self {
            RewardSource::Hpwl => dense_hpwl_reward(s, a, next),
            RewardSource::Learned(rm) => {
                let q = rm.model.forward(&cs.features)?[a.0];
                match rm.kind {
                    RewardKind::Preference => q,
                    RewardKind::Demonstration => q - rm.gamma * rm.cached_value(next_cs)?,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs_per_update: usize,
    pub rollout_episodes: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub total_updates: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Standardize rewards with running statistics. `None` means "only for
    /// learned rewards".
    pub reward_standardize: Option<bool>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs_per_update: 4,
            rollout_episodes: 16,
            minibatch_size: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            total_updates: 200,
            seed: 0,
            hidden: 256,
            reward_standardize: None,
        }
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }

    /// Folds `x` into the statistics, then standardizes it.
    pub fn standardize(&mut self, x: f64) -> f64 {
        self.update(x);
        (x - self.mean) / self.std().max(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub features: Vec<f64>,
    pub legal: Vec<bool>,
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    /// Reward used for learning (standardized when enabled).
    pub reward: f64,
    pub raw_reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub layout: Layout,
    pub final_hpwl: f64,
    pub boundary_fraction: f64,
    pub failed: bool,
}

impl EpisodeRecord {
    pub fn raw_return(&self) -> f64 {
        self.steps.iter().map(|s| s.raw_reward).sum()
    }
}

fn log_softmax_at(logits: &[f64], legal: &[bool], a: Action) -> Result<f64, PolicyError> {
    Ok(logits[a.0] - soft_value(logits, legal).map_err(map_no_legal)?)
}

fn run_episode(
    p: &PolicyModel,
    netlist: &Arc<Netlist>,
    source: &RewardSource,
    seed: u64,
) -> Result<EpisodeRecord, PolicyError> {
    let mut rng = rng::rng(seed);
    let mut s = PlacementState::reset(netlist.clone());
    let mut cs = CachedState::new(&s)?;
    let mut steps = Vec::with_capacity(netlist.macros.len());
    let mut failed = false;
    while !s.is_done() {
        if !cs.legal.iter().any(|&l| l) {
            failed = true;
            break;
        }
        let logits = p.actor.forward(&cs.features)?;
        let probs = policy_from_q(&logits, &cs.legal).map_err(map_no_legal)?;
        let a = Action(
            WeightedIndex::new(&probs)
                .expect("masked softmax has positive mass")
                .sample(&mut rng),
        );
        let log_prob = log_softmax_at(&logits, &cs.legal, a)?;
        let value = p.critic.forward(&cs.features)?[0];
        let (next, done) = s.step(a)?;
        let next_cs = CachedState::new(&next)?;
        let raw = source.reward(&s, &cs, a, &next, &next_cs)?;
        steps.push(StepRecord {
            features: std::mem::take(&mut cs.features),
            legal: std::mem::take(&mut cs.legal),
            action: a,
            log_prob,
            value,
            reward: raw,
            raw_reward: raw,
            done,
        });
        s = next;
        cs = next_cs;
    }
    Ok(EpisodeRecord {
        steps,
        layout: s.to_layout(),
        final_hpwl: s.hpwl(),
        boundary_fraction: s.boundary_fraction(),
        failed,
    })
}

/// Runs `count` episodes in parallel, episode `i` seeded from `(seed, i)`.
///
/// When `stats` is given, rewards are standardized afterwards in episode order
/// so the result does not depend on scheduling.
pub fn collect_rollouts(
    p: &PolicyModel,
    netlist: &Arc<Netlist>,
    source: &RewardSource,
    count: usize,
    seed: u64,
    stats: Option<&mut RunningStats>,
) -> Result<Vec<EpisodeRecord>, PolicyError> {
    p.check_grid(netlist)?;
    if let RewardSource::Learned(rm) = source {
        rm.check_grid(netlist)?;
    }
    let mut episodes = exec::map_range(count, |i| {
        run_episode(p, netlist, source, rng::derive(seed, &[0xE915, i as u64]))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    if let Some(stats) = stats {
        for ep in episodes.iter_mut().filter(|e| !e.failed) {
            for st in &mut ep.steps {
                st.reward = stats.standardize(st.raw_reward);
            }
        }
    }
    Ok(episodes)
}

/// Generalized advantage estimates and returns for one episode.
pub fn gae_advantages(ep: &EpisodeRecord, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = ep.steps.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let st = &ep.steps[t];
        let live = if st.done { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            ep.steps[t + 1].value
        } else {
            0.0
        };
        let delta = st.reward + gamma * next_value * live - st.value;
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
    }
    let ret = adv
        .iter()
        .zip(&ep.steps)
        .map(|(a, s)| a + s.value)
        .collect();
    (adv, ret)
}

/// Rescales to mean 0 and standard deviation 1, dividing by at least 1e-8.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / std.max(1e-8);
    }
}

/// One flattened training sample.
#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub features: &'a [f64],
    pub legal: &'a [bool],
    pub action: Action,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate + value + entropy loss, with actor and critic gradients.
///
/// `total = -mean min(ρA, clip(ρ)A) + c_v·mean (V - R)² - c_e·mean H(π)`.
pub fn ppo_loss(
    p: &PolicyModel,
    samples: &[PpoSample<'_>],
    cfg: &PpoConfig,
) -> Result<(LossParts, Vec<f64>, Vec<f64>), PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let na = p.actor.params.len();
    let nc = p.critic.params.len();
    let nb = samples.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    // Slots after the gradients: policy, value, entropy, clipped count.
    let acc = exec::sum_into(samples.len(), na + nc + 4, |i, buf| {
        let (actor_g, rest) = buf.split_at_mut(na);
        let (critic_g, parts) = rest.split_at_mut(nc);
        let s = &samples[i];
        let act = p.actor.forward_cached(s.features).expect("feature shape");
        let v_logits = soft_value(&act.out, s.legal).expect("legal action recorded");
        let logp: Vec<f64> = act.out.iter().map(|z| z - v_logits).collect();
        let ratio = (logp[s.action.0] - s.old_log_prob).exp();
        let surr1 = ratio * s.advantage;
        let surr2 = ratio.clamp(lo, hi) * s.advantage;
        parts[0] -= surr1.min(surr2) / nb;
        let unclipped = surr1 <= surr2;
        if !unclipped {
            parts[3] += 1.0 / nb;
        }
        let entropy: f64 = logp
            .iter()
            .zip(s.legal)
            .filter(|(_, &l)| l)
            .map(|(lp, _)| -lp.exp() * lp)
            .sum();
        parts[2] += entropy / nb;

        let mut og = Vec::new();
        for (c, (&lp, &l)) in logp.iter().zip(s.legal).enumerate() {
            if !l {
                continue;
            }
            let pi = lp.exp();
            let mut g = cfg.entropy_coef * pi * (lp + entropy);
            if unclipped {
                let onehot = if c == s.action.0 { 1.0 } else { 0.0 };
                g -= s.advantage * ratio * (onehot - pi);
            }
            if g != 0.0 {
                og.push((c, g / nb));
            }
        }
        p.actor
            .accumulate_backward(s.features, &act.hidden, &og, actor_g);

        let crit = p.critic.forward_cached(s.features).expect("feature shape");
        let diff = crit.out[0] - s.ret;
        parts[1] += cfg.value_coef * diff * diff / nb;
        let gv = 2.0 * cfg.value_coef * diff / nb;
        p.critic
            .accumulate_backward(s.features, &crit.hidden, &[(0, gv)], critic_g);
    });
    let parts = LossParts {
        policy: acc[na + nc],
        value: acc[na + nc + 1],
        entropy: acc[na + nc + 2],
        clip_fraction: acc[na + nc + 3],
        total: acc[na + nc] + acc[na + nc + 1] - cfg.entropy_coef * acc[na + nc + 2],
    };
    Ok((parts, acc[..na].to_vec(), acc[na..na + nc].to_vec()))
}

/// Adam state for both networks.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    pub actor: OptimizerState,
    pub critic: OptimizerState,
}

impl PpoOptimizer {
    pub fn new(p: &PolicyModel, lr: f64) -> Self {
        let hyper = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        Self {
            actor: OptimizerState::new(p.actor.params.len(), hyper),
            critic: OptimizerState::new(p.critic.params.len(), hyper),
        }
    }
}

/// Runs `epochs_per_update` shuffled minibatch passes over a rollout batch.
///
/// Failed episodes are skipped. Before the first step the stored
/// log-probabilities are replayed under `p`; a mismatch above 1e-6 means the
/// batch was not collected by this policy.
pub fn ppo_update(
    p: &mut PolicyModel,
    opt: &mut PpoOptimizer,
    batch: &[EpisodeRecord],
    cfg: &PpoConfig,
    shuffle_seed: u64,
) -> Result<LossParts, PolicyError> {
    let mut samples = Vec::new();
    let mut advantages = Vec::new();
    for ep in batch.iter().filter(|e| !e.failed) {
        let (adv, ret) = gae_advantages(ep, cfg.gamma, cfg.gae_lambda);
        for ((st, a), r) in ep.steps.iter().zip(adv).zip(ret) {
            advantages.push(a);
            samples.push(PpoSample {
                features: &st.features,
                legal: &st.legal,
                action: st.action,
                old_log_prob: st.log_prob,
                advantage: 0.0,
                ret: r,
            });
        }
    }
    if samples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    normalize_advantages(&mut advantages);
    for (s, a) in samples.iter_mut().zip(advantages) {
        s.advantage = a;
    }

    let replay = exec::map(&samples, |s| -> Result<f64, PolicyError> {
        let logits = p.actor.forward(s.features)?;
        Ok((log_softmax_at(&logits, s.legal, s.action)? - s.old_log_prob).abs())
    });
    let mut worst: f64 = 0.0;
    for d in replay {
        worst = worst.max(d?);
    }
    if worst > 1e-6 {
        return Err(PolicyError::StaleBatch { diff: worst });
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last = LossParts::default();
    let mb = cfg.minibatch_size.max(1);
    for epoch in 0..cfg.epochs_per_update {
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(shuffle_seed, &[epoch as u64]));
        for idx in order.chunks(mb) {
            let chunk: Vec<PpoSample<'_>> = idx.iter().map(|&i| samples[i]).collect();
            let (parts, ga, gc) = ppo_loss(p, &chunk, cfg)?;
            opt.actor.step(&mut p.actor, &ga);
            opt.critic.step(&mut p.critic, &gc);
            last = parts;
        }
    }
    Ok(last)
}

/// One line of the PPO metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub mean_return: f64,
    pub mean_hpwl: f64,
    pub boundary_fraction: f64,
    pub failures: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub policy: PolicyModel,
    pub log: Vec<UpdateLog>,
    pub reward_stats: RunningStats,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Full PPO training run; a pure function of its inputs.
pub fn train_ppo(
    netlist: &Arc<Netlist>,
    source: &RewardSource,
    cfg: &PpoConfig,
    mut on_update: impl FnMut(&UpdateLog),
) -> Result<PpoOutcome, PolicyError> {
    let mut policy = PolicyModel::init(netlist.grid_n, cfg.hidden, cfg.seed);
    let mut opt = PpoOptimizer::new(&policy, cfg.lr);
    let standardize = cfg.reward_standardize.unwrap_or(source.is_learned());
    let mut stats = RunningStats::default();
    let mut log = Vec::with_capacity(cfg.total_updates);
    for u in 0..cfg.total_updates {
        let episodes = collect_rollouts(
            &policy,
            netlist,
            source,
            cfg.rollout_episodes,
            rng::derive(cfg.seed, &[0x2011, u as u64]),
            standardize.then_some(&mut stats),
        )?;
        let ok = || episodes.iter().filter(|e| !e.failed);
        let loss = ppo_update(
            &mut policy,
            &mut opt,
            &episodes,
            cfg,
            rng::derive(cfg.seed, &[0x5F1E, u as u64]),
        )?;
        let entry = UpdateLog {
            update: u + 1,
            mean_return: mean(ok().map(EpisodeRecord::raw_return)),
            mean_hpwl: mean(ok().map(|e| e.final_hpwl)),
            boundary_fraction: mean(ok().map(|e| e.boundary_fraction)),
            failures: episodes.iter().filter(|e| e.failed).count(),
            loss,
        };
        on_update(&entry);
        log.push(entry);
    }
    Ok(PpoOutcome {
        policy,
        log,
        reward_stats: stats,
    })
}

/// Summary statistics over evaluated layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub episodes: usize,
    pub failures: usize,
    pub mean_hpwl: f64,
    pub std_hpwl: f64,
    /// Fraction of macros whose footprint touches the canvas edge.
    pub periphery_occupancy: f64,
    pub std_periphery_occupancy: f64,
    /// Mean episode sum of the dense wirelength reward.
    pub mean_reward: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

fn report_from(states: &[PlacementState], episodes: usize) -> PolicyReport {
    let hpwl: Vec<f64> = states.iter().map(PlacementState::hpwl).collect();
    let frac: Vec<f64> = states
        .iter()
        .map(PlacementState::boundary_fraction)
        .collect();
    let (mean_hpwl, std_hpwl) = mean_std(&hpwl);
    let (po, po_std) = mean_std(&frac);
    PolicyReport {
        episodes,
        failures: episodes - states.len(),
        mean_hpwl,
        std_hpwl,
        periphery_occupancy: po,
        std_periphery_occupancy: po_std,
        mean_reward: -mean_hpwl,
    }
}

/// Samples `episodes` placements from `p` and summarizes them.
pub fn evaluate_policy(
    p: &PolicyModel,
    netlist: &Arc<Netlist>,
    episodes: usize,
    seed: u64,
) -> Result<PolicyReport, PolicyError> {
    let eps = collect_rollouts(p, netlist, &RewardSource::Hpwl, episodes, seed, None)?;
    let finals = eps
        .iter()
        .filter(|e| !e.failed)
        .map(|e| e.layout.replay(netlist.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from(&finals, episodes))
}

/// Summarizes complete layouts (for example expert layouts).
pub fn evaluate_layouts(
    netlist: &Arc<Netlist>,
    layouts: &[Layout],
) -> Result<PolicyReport, PolicyError> {
    let finals = layouts
        .iter()
        .map(|l| l.replay(netlist.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from(&finals, layouts.len()))
}
