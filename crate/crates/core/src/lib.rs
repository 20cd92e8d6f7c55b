//! Expert-imitation reward learning for grid-based macro placement.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`netlist`] describes a placement instance and can synthesize seeded designs.
//! 2. [`env`] is the step-wise placement MDP with position, wire and view masks.
//! 3. [`expert`] produces periphery-biased expert layouts and turns them into
//!    demonstrations, preference tuples and validation tuples.
//! 4. [`reward`] learns reward models from demonstrations (soft-Q inverse RL) or
//!    preferences (pairwise logistic loss) on top of the [`approximator`].
//! 5. [`policy`] trains a masked PPO placement policy against a learned or
//!    wirelength reward.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every reduction
//! has a fixed order, so results do not depend on the thread count.

pub mod approximator;
pub mod env;
pub mod exec;
pub mod expert;
pub mod netlist;
pub mod policy;
pub mod reward;
pub mod rng;

pub use approximator::{Arch, Encoder, OptimizerState, QMapModel};
pub use env::{Action, FeatureMaps, Layout, PlacementState};
pub use expert::{ExpertDataset, PreferenceTuple, Trajectory, ValidationTuple};
pub use netlist::{Macro, Net, Netlist, PinOffset, SynthConfig};
pub use policy::{PolicyModel, PpoConfig, RewardSource};
pub use reward::{RewardKind, RewardModel, TrainConfig};
