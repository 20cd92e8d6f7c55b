//! Synthetic expert layouts and the datasets derived from them.
//!
//! A final layout becomes a demonstration by replaying its macros in placement
//! order. Each expert step also yields preference tuples (expert action over a
//! random legal action) and validation tuples (expert action among `m` random
//! legal actions). Records refer to states by `(trajectory id, step)`, and
//! states are rebuilt by replay.

use std::sync::Arc;

use log::warn;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvError, Layout, PlacementState};
use crate::exec;
use crate::netlist::Netlist;
use crate::rng;

/// Probability that the expert takes its second-best candidate at a step.
pub const JITTER_PROB: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("no legal position for macro {macro_id} at step {step}")]
    Infeasible { step: usize, macro_id: usize },
    #[error("layout step {step} places macro {found}, but the placement order expects {expected}")]
    OrderMismatch {
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("layout places {found} of {expected} macros")]
    Incomplete { expected: usize, found: usize },
    #[error("layout prefix is not reachable at step {step}: {source}")]
    IllegalIntermediate { step: usize, source: EnvError },
    #[error("layout is for design {found}, expected {expected}")]
    DesignMismatch { expected: String, found: String },
    #[error("trajectory {traj} does not replay: {reason}")]
    Replay { traj: usize, reason: String },
    #[error("malformed dataset line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Anchor distance from the canvas edge of a `w`×`h` footprint at `(x, y)`.
fn edge_depth(x: usize, y: usize, w: usize, h: usize, n: usize) -> usize {
    x.min(y).min(n - x - w).min(n - y - h)
}

/// Manhattan distance from a footprint to the nearest canvas corner.
fn corner_distance(x: usize, y: usize, w: usize, h: usize, n: usize) -> usize {
    x.min(n - x - w) + y.min(n - y - h)
}

/// Periphery-first, wirelength-greedy expert.
///
/// At each step the candidates are the legal cells whose footprint lies in the
/// outermost ring that still admits the macro. Among them the expert takes the
/// smallest HPWL increase. Ties go to the footprint nearest a canvas corner and
/// then to a seeded random draw. With probability [`JITTER_PROB`] it takes the
/// runner-up instead.
pub fn generate_expert_layout(netlist: &Arc<Netlist>, seed: u64) -> Result<Layout, ExpertError> {
    let mut rng = rng::rng_for(seed, &[0xE4E7]);
    let mut s = PlacementState::reset(netlist.clone());
    let n = netlist.grid_n;
    while let Some(m) = s.current_macro() {
        let (w, h, macro_id) = (m.width, m.height, m.id);
        let raw = s.raw_wire_deltas()?;
        let legal: Vec<(usize, f64)> = raw
            .iter()
            .enumerate()
            .filter_map(|(c, r)| r.map(|d| (c, d)))
            .collect();
        let Some(ring) = legal
            .iter()
            .map(|&(c, _)| edge_depth(c % n, c / n, w, h, n))
            .min()
        else {
            return Err(ExpertError::Infeasible {
                step: s.cursor(),
                macro_id,
            });
        };
        let mut candidates: Vec<(f64, usize, u64, usize)> = legal
            .into_iter()
            .filter(|&(c, _)| edge_depth(c % n, c / n, w, h, n) == ring)
            .map(|(c, d)| {
                (
                    d,
                    corner_distance(c % n, c / n, w, h, n),
                    rng.gen::<u64>(),
                    c,
                )
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let pick = if candidates.len() > 1 && rng.gen_bool(JITTER_PROB) {
            1
        } else {
            0
        };
        s.step_in_place(Action(candidates[pick].3))?;
    }
    Ok(s.to_layout())
}

/// Digest view of one `(s, a, s')` transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionDigest {
    pub state: String,
    pub action: Action,
    pub next_state: String,
}

/// Step-wise demonstration of one expert layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub design: String,
    pub actions: Vec<Action>,
    pub transitions: Vec<TransitionDigest>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Replays all `len + 1` states, checking every digest on the way.
    pub fn states(&self, netlist: &Arc<Netlist>) -> Result<Vec<PlacementState>, ExpertError> {
        let fail = |reason: String| ExpertError::Replay {
            traj: self.id,
            reason,
        };
        if self.transitions.len() != self.actions.len() {
            return Err(fail("transition and action counts differ".into()));
        }
        let mut states = Vec::with_capacity(self.len() + 1);
        let mut s = PlacementState::reset(netlist.clone());
        for (t, (a, tr)) in self.actions.iter().zip(&self.transitions).enumerate() {
            if tr.state != s.digest() || tr.action != *a {
                return Err(fail(format!("state digest mismatch at step {t}")));
            }
            let (next, _) = s.step(*a).map_err(|e| fail(format!("step {t}: {e}")))?;
            if tr.next_state != next.digest() {
                return Err(fail(format!("next-state digest mismatch at step {t}")));
            }
            states.push(std::mem::replace(&mut s, next));
        }
        states.push(s);
        Ok(states)
    }

    pub fn to_layout(&self, netlist: &Arc<Netlist>) -> Result<Layout, ExpertError> {
        Ok(self.states(netlist)?.pop().expect("nonempty").to_layout())
    }
}

/// Turns a complete layout into a trajectory with id 0.
pub fn decompose_layout(
    netlist: &Arc<Netlist>,
    layout: &Layout,
) -> Result<Trajectory, ExpertError> {
    if layout.netlist != netlist.name {
        return Err(ExpertError::DesignMismatch {
            expected: netlist.name.clone(),
            found: layout.netlist.clone(),
        });
    }
    if layout.placements.len() != netlist.macros.len() {
        return Err(ExpertError::Incomplete {
            expected: netlist.macros.len(),
            found: layout.placements.len(),
        });
    }
    let n = netlist.grid_n;
    let mut s = PlacementState::reset(netlist.clone());
    let mut actions = Vec::with_capacity(layout.placements.len());
    let mut transitions = Vec::with_capacity(layout.placements.len());
    for (step, &[id, x, y]) in layout.placements.iter().enumerate() {
        let expected = s.order()[step];
        if id != expected {
            return Err(ExpertError::OrderMismatch {
                step,
                expected,
                found: id,
            });
        }
        let a = if x < n && y < n {
            Action::from_xy(x, y, n)
        } else {
            Action(n * n)
        };
        let state = s.digest();
        s.step_in_place(a)
            .map_err(|source| ExpertError::IllegalIntermediate { step, source })?;
        actions.push(a);
        transitions.push(TransitionDigest {
            state,
            action: a,
            next_state: s.digest(),
        });
    }
    Ok(Trajectory {
        id: 0,
        design: netlist.name.clone(),
        actions,
        transitions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub traj: usize,
    pub step: usize,
    pub chosen: Action,
    pub rejected: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationTuple {
    pub traj: usize,
    pub step: usize,
    pub expert: Action,
    pub distractors: Vec<Action>,
}

/// Draws up to `k` distinct legal actions other than `exclude`.
fn sample_others(
    s: &PlacementState,
    exclude: Action,
    k: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<Action>, EnvError> {
    let others: Vec<Action> = s
        .legal_actions()?
        .into_iter()
        .filter(|&a| a != exclude)
        .collect();
    let k = k.min(others.len());
    Ok(sample(rng, others.len(), k)
        .into_iter()
        .map(|i| others[i])
        .collect())
}

/// Up to `k_per_step` preference tuples per step, rejected actions drawn
/// without replacement. Steps with a single legal action yield nothing.
pub fn assign_preferences(
    netlist: &Arc<Netlist>,
    traj: &Trajectory,
    k_per_step: usize,
    seed: u64,
) -> Result<Vec<PreferenceTuple>, ExpertError> {
    let states = traj.states(netlist)?;
    let mut out = Vec::new();
    for (t, &chosen) in traj.actions.iter().enumerate() {
        let mut rng = rng::rng_for(seed, &[traj.id as u64, t as u64]);
        for rejected in sample_others(&states[t], chosen, k_per_step, &mut rng)? {
            out.push(PreferenceTuple {
                traj: traj.id,
                step: t,
                chosen,
                rejected,
            });
        }
    }
    Ok(out)
}

/// One validation tuple per transition, with `min(m, legal - 1)` distractors.
pub fn build_validation_set(
    netlist: &Arc<Netlist>,
    trajs: &[Trajectory],
    m: usize,
    seed: u64,
) -> Result<Vec<ValidationTuple>, ExpertError> {
    let per_traj = exec::map(trajs, |traj| -> Result<Vec<ValidationTuple>, ExpertError> {
        let states = traj.states(netlist)?;
        traj.actions
            .iter()
            .enumerate()
            .map(|(t, &expert)| {
                let mut rng = rng::rng_for(seed, &[traj.id as u64, t as u64, 0x7A1]);
                Ok(ValidationTuple {
                    traj: traj.id,
                    step: t,
                    expert,
                    distractors: sample_others(&states[t], expert, m, &mut rng)?,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for v in per_traj {
        out.extend(v?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of expert layouts.
    pub count: usize,
    pub seed: u64,
    /// Distractors per validation tuple.
    pub m: usize,
    pub k_per_step: usize,
    /// Leading fraction of layouts (by seed index) used for training.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 50,
            seed: 0,
            m: 15,
            k_per_step: 1,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Expert trajectories of one design plus the records derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub netlist: Arc<Netlist>,
    /// Trajectory `i` has id `i`.
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub preferences: Vec<PreferenceTuple>,
    pub validation: Vec<ValidationTuple>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Trajectory {
        split: Split,
        #[serde(flatten)]
        traj: Trajectory,
    },
    Preference(PreferenceTuple),
    Validation(ValidationTuple),
}

impl ExpertDataset {
    /// Generates `cfg.count` expert layouts and the derived records.
    ///
    /// Layout `i` uses a seed derived from `(cfg.seed, i)`. The first
    /// `floor(train_fraction * count)` layouts (at least one) train; the rest
    /// validate. With a single layout it serves both splits.
    pub fn build(netlist: Arc<Netlist>, cfg: &DatasetConfig) -> Result<Self, ExpertError> {
        let layouts = exec::map_range(cfg.count, |i| {
            generate_expert_layout(&netlist, rng::derive(cfg.seed, &[0x1A70, i as u64]))
        });
        let mut trajectories = Vec::with_capacity(cfg.count);
        for (i, layout) in layouts.into_iter().enumerate() {
            let mut traj = decompose_layout(&netlist, &layout?)?;
            traj.id = i;
            trajectories.push(traj);
        }
        let n_train =
            ((cfg.train_fraction * cfg.count as f64).floor() as usize).clamp(1, cfg.count.max(1));
        let splits: Vec<Split> = (0..cfg.count)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else {
                    Split::Validation
                }
            })
            .collect();
        let train: Vec<Trajectory> = trajectories[..n_train.min(cfg.count)].to_vec();
        let mut held: Vec<Trajectory> = trajectories[n_train.min(cfg.count)..].to_vec();
        if held.is_empty() && !train.is_empty() {
            warn!(
                "only {} layout(s); validating on the training layouts",
                train.len()
            );
            held = train.clone();
        }

        let pref_seed = rng::derive(cfg.seed, &[0x9BEF]);
        let prefs = exec::map(&train, |t| {
            assign_preferences(&netlist, t, cfg.k_per_step, pref_seed)
        });
        let mut preferences = Vec::new();
        for p in prefs {
            preferences.extend(p?);
        }
        let validation =
            build_validation_set(&netlist, &held, cfg.m, rng::derive(cfg.seed, &[0x7A11]))?;
        Ok(Self {
            netlist,
            trajectories,
            splits,
            preferences,
            validation,
        })
    }

    pub fn train_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(t, _)| t)
    }

    pub fn validation_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == Split::Validation)
            .map(|(t, _)| t)
    }

    /// Replayed states for every trajectory, indexed by trajectory id.
    pub fn replay_states(&self) -> Result<Vec<Vec<PlacementState>>, ExpertError> {
        exec::map(&self.trajectories, |t| t.states(&self.netlist))
            .into_iter()
            .collect()
    }

    /// JSON-lines: trajectories, then preferences, then validation tuples.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("record serialization"));
            out.push('\n');
        };
        for (traj, &split) in self.trajectories.iter().zip(&self.splits) {
            push(&Record::Trajectory {
                split,
                traj: traj.clone(),
            });
        }
        for p in &self.preferences {
            push(&Record::Preference(p.clone()));
        }
        for v in &self.validation {
            push(&Record::Validation(v.clone()));
        }
        out
    }

    /// Parses a dataset file and checks every record against replayed states.
    pub fn from_jsonl(netlist: Arc<Netlist>, text: &str) -> Result<Self, ExpertError> {
        let mut trajectories = Vec::new();
        let mut splits = Vec::new();
        let mut preferences = Vec::new();
        let mut validation = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| ExpertError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            match record {
                Record::Trajectory { split, traj } => {
                    if traj.id != trajectories.len() {
                        return Err(ExpertError::Format {
                            line: i + 1,
                            message: format!("trajectory ids must be consecutive; got {}", traj.id),
                        });
                    }
                    if traj.design != netlist.name {
                        return Err(ExpertError::DesignMismatch {
                            expected: netlist.name.clone(),
                            found: traj.design,
                        });
                    }
                    trajectories.push(traj);
                    splits.push(split);
                }
                Record::Preference(p) => preferences.push(p),
                Record::Validation(v) => validation.push(v),
            }
        }
        let ds = Self {
            netlist,
            trajectories,
            splits,
            preferences,
            validation,
        };
        ds.check_records()?;
        Ok(ds)
    }

    /// Every record action must be legal at its replayed state.
    pub fn check_records(&self) -> Result<(), ExpertError> {
        let states = self.replay_states()?;
        let legal_at = |traj: usize, step: usize| -> Result<Vec<bool>, ExpertError> {
            let s = states
                .get(traj)
                .and_then(|v| v.get(step))
                .filter(|s| !s.is_done())
                .ok_or_else(|| ExpertError::Replay {
                    traj,
                    reason: format!("no state at step {step}"),
                })?;
            Ok(s.position_mask()?)
        };
        let bad = |traj: usize, reason: &str| ExpertError::Replay {
            traj,
            reason: reason.into(),
        };
        for p in &self.preferences {
            let legal = legal_at(p.traj, p.step)?;
            let expert = self.trajectories[p.traj].actions[p.step];
            if p.chosen != expert
                || p.chosen == p.rejected
                || !legal.get(p.rejected.0).copied().unwrap_or(false)
            {
                return Err(bad(p.traj, "invalid preference tuple"));
            }
        }
        for v in &self.validation {
            let legal = legal_at(v.traj, v.step)?;
            let expert = self.trajectories[v.traj].actions[v.step];
            let mut seen = v.distractors.clone();
            seen.sort_unstable();
            seen.dedup();
            if v.expert != expert
                || seen.len() != v.distractors.len()
                || v.distractors
                    .iter()
                    .any(|&a| a == expert || !legal.get(a.0).copied().unwrap_or(false))
            {
                return Err(bad(v.traj, "invalid validation tuple"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::{generate_synthetic, Macro, SynthConfig};

    fn single_macro(n: usize, w: usize, h: usize) -> Arc<Netlist> {
        Arc::new(Netlist {
            name: "single".into(),
            grid_n: n,
            macros: vec![Macro {
                id: 0,
                width: w,
                height: h,
                pins: vec![Macro::center_pin(w, h)],
            }],
            nets: vec![],
        })
    }

    #[test]
    fn single_macro_hugs_boundary() {
        let d = single_macro(8, 2, 2);
        for seed in 0..20 {
            let layout = generate_expert_layout(&d, seed).unwrap();
            let [_, x, y] = layout.placements[0];
            assert!(x == 0 || y == 0 || x + 2 == 8 || y + 2 == 8);
        }
    }

    #[test]
    fn expert_is_deterministic() {
        let d = Arc::new(generate_synthetic(&SynthConfig::default(), 3).unwrap());
        assert_eq!(
            generate_expert_layout(&d, 11).unwrap(),
            generate_expert_layout(&d, 11).unwrap()
        );
    }

    #[test]
    fn one_macro_trajectory() {
        let d = single_macro(8, 2, 2);
        let layout = generate_expert_layout(&d, 0).unwrap();
        let traj = decompose_layout(&d, &layout).unwrap();
        assert_eq!(traj.len(), 1);
        let states = traj.states(&d).unwrap();
        assert_eq!(states[0], PlacementState::reset(d.clone()));
        assert_eq!(traj.to_layout(&d).unwrap(), layout);
    }

    #[test]
    fn overlapping_layout_rejected() {
        let d = Arc::new(Netlist {
            name: "two".into(),
            grid_n: 8,
            macros: (0..2)
                .map(|id| Macro {
                    id,
                    width: 2,
                    height: 2,
                    pins: vec![Macro::center_pin(2, 2)],
                })
                .collect(),
            nets: vec![],
        });
        let layout = Layout {
            netlist: "two".into(),
            grid_n: 8,
            placements: vec![[0, 0, 0], [1, 1, 1]],
        };
        assert!(matches!(
            decompose_layout(&d, &layout),
            Err(ExpertError::IllegalIntermediate { step: 1, .. })
        ));
        let swapped = Layout {
            placements: vec![[1, 0, 0], [0, 4, 4]],
            ..layout
        };
        assert!(matches!(
            decompose_layout(&d, &swapped),
            Err(ExpertError::OrderMismatch { step: 0, .. })
        ));
    }

    #[test]
    fn preference_caps() {
        // 4x4 grid, one 2x2 macro: 9 legal cells at step 0.
        let d = single_macro(4, 2, 2);
        let traj = decompose_layout(&d, &generate_expert_layout(&d, 0).unwrap()).unwrap();
        for seed in 0..50 {
            let p = assign_preferences(&d, &traj, 1, seed).unwrap();
            assert_eq!(p.len(), 1);
            assert_ne!(p[0].rejected, p[0].chosen);
            assert!(PlacementState::reset(d.clone()).position_mask().unwrap()[p[0].rejected.0]);
        }
        // 3 legal cells, k = 3: two tuples.
        let d3 = Arc::new(Netlist {
            name: "three".into(),
            grid_n: 3,
            macros: vec![Macro {
                id: 0,
                width: 3,
                height: 1,
                pins: vec![Macro::center_pin(3, 1)],
            }],
            nets: vec![],
        });
        let traj = decompose_layout(&d3, &generate_expert_layout(&d3, 0).unwrap()).unwrap();
        let p = assign_preferences(&d3, &traj, 3, 0).unwrap();
        assert_eq!(p.len(), 2);
        assert_ne!(p[0].rejected, p[1].rejected);
        // Exactly one legal cell: nothing.
        let d1 = single_macro(2, 2, 2);
        let traj = decompose_layout(&d1, &generate_expert_layout(&d1, 0).unwrap()).unwrap();
        assert!(assign_preferences(&d1, &traj, 1, 0).unwrap().is_empty());
    }

    #[test]
    fn validation_cap_rule() {
        // 3x3 grid, 2x2 macro: 4 legal cells, so 3 distractors.
        let d = single_macro(3, 2, 2);
        let traj = decompose_layout(&d, &generate_expert_layout(&d, 0).unwrap()).unwrap();
        let v = build_validation_set(&d, &[traj], 15, 0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].distractors.len(), 3);
    }

    #[test]
    fn dataset_counts_and_jsonl_roundtrip() {
        let d = Arc::new(generate_synthetic(&SynthConfig::default(), 5).unwrap());
        let cfg = DatasetConfig {
            count: 5,
            seed: 3,
            ..DatasetConfig::default()
        };
        let ds = ExpertDataset::build(d.clone(), &cfg).unwrap();
        assert_eq!(ds.train_trajectories().count(), 4);
        assert_eq!(ds.validation.len(), d.macros.len());
        let back = ExpertDataset::from_jsonl(d, &ds.to_jsonl()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn single_layout_validates_on_itself() {
        let d = Arc::new(generate_synthetic(&SynthConfig::default(), 5).unwrap());
        let cfg = DatasetConfig {
            count: 1,
            ..DatasetConfig::default()
        };
        let ds = ExpertDataset::build(d, &cfg).unwrap();
        assert_eq!(ds.splits, vec![Split::Train]);
        assert_eq!(ds.validation.len(), 12);
        assert!(ds.validation.iter().all(|v| v.traj == 0));
    }

    #[test]
    fn tampered_record_rejected() {
        let d = Arc::new(generate_synthetic(&SynthConfig::default(), 5).unwrap());
        let cfg = DatasetConfig {
            count: 2,
            ..DatasetConfig::default()
        };
        let mut ds = ExpertDataset::build(d.clone(), &cfg).unwrap();
        ds.preferences[0].rejected = ds.preferences[0].chosen;
        assert!(ExpertDataset::from_jsonl(d, &ds.to_jsonl()).is_err());
    }
}
