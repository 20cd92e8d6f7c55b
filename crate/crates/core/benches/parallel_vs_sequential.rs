use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eim_core::exec;
use eim_core::expert::DatasetConfig;
use eim_core::netlist::{generate_synthetic, SynthConfig};
use eim_core::policy::collect_rollouts;
use eim_core::reward::{pref_loss, CachedState, PrefSample, ValidationCache};
use eim_core::{
    Arch, ExpertDataset, PolicyModel, QMapModel, RewardKind, RewardModel, RewardSource,
};

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        exec::sequential(f)
    }
}

fn benches(c: &mut Criterion) {
    let netlist = Arc::new(generate_synthetic(&SynthConfig::default(), 1).unwrap());
    let ds = ExpertDataset::build(
        netlist.clone(),
        &DatasetConfig {
            count: 20,
            seed: 7,
            k_per_step: 4,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
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
    let rm = RewardModel::new(
        RewardKind::Preference,
        QMapModel::init(Arch::q_map(netlist.grid_n, 128), 0),
        0.99,
        1e-3,
    );
    let val = ValidationCache::build(&states, &ds.validation, RewardKind::Preference).unwrap();
    let policy = PolicyModel::init(netlist.grid_n, 64, 0);

    for (name, parallel) in [("parallel", true), ("sequential", false)] {
        let mut g = c.benchmark_group("rollouts");
        g.sample_size(10);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(parallel, || {
                    collect_rollouts(&policy, &netlist, &RewardSource::Hpwl, 32, 0, None).unwrap()
                })
            })
        });
        g.finish();

        let mut g = c.benchmark_group("pref_loss_gradient");
        g.sample_size(10);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(parallel, || pref_loss(&rm, &batch, 1e-3).unwrap()))
        });
        g.finish();

        let mut g = c.benchmark_group("validation_accuracy");
        g.sample_size(10);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(parallel, || val.accuracy(&rm).unwrap()))
        });
        g.finish();
    }
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
