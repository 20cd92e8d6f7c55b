use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use eim_core::expert::{build_validation_set, ExpertDataset};
use eim_core::netlist::{generate_synthetic, parse_netlist, serialize_netlist};
use eim_core::policy::{
    evaluate_layouts, evaluate_policy, train_ppo, PolicyCheckpoint, PolicyReport,
};
use eim_core::reward::{reward_accuracy, train_eim_d, train_eim_p, RewardCheckpoint};
use eim_core::{Encoder, Layout, Netlist, PolicyModel, RewardKind, RewardModel, RewardSource};
use log::warn;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::svg::render_layout;
use crate::{
    Cli, Command, EncoderArg, EvalPolicyArgs, EvalRewardArgs, GenDesignArgs, GenExpertArgs, Method,
    RenderArgs, RewardArg, SplitArg, TrainPolicyArgs, TrainRewardArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::GenDesign(a) => gen_design(cli, &mut cfg, a),
        Command::GenExpert(a) => gen_expert(cli, &mut cfg, a),
        Command::TrainReward(a) => train_reward(cli, &mut cfg, a),
        Command::EvalReward(a) => eval_reward(cli, &mut cfg, a),
        Command::TrainPolicy(a) => train_policy(cli, &mut cfg, a),
        Command::EvalPolicy(a) => eval_policy(cli, &mut cfg, a),
        Command::Render(a) => render(a),
    }
}

fn set<T: Clone>(dst: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *dst = v.clone();
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable") + "\n"
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_netlist(path: &Path) -> Result<Arc<Netlist>> {
    let n = parse_netlist(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    Ok(Arc::new(n))
}

fn load_dataset(netlist: &Arc<Netlist>, path: &Path) -> Result<ExpertDataset> {
    let ds = ExpertDataset::from_jsonl(netlist.clone(), &read(path)?)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(ds)
}

fn load_reward(path: &Path) -> Result<RewardModel> {
    let ck: RewardCheckpoint = serde_json::from_str(&read(path)?)
        .with_context(|| format!("parsing reward checkpoint {}", path.display()))?;
    Ok(RewardModel::from_checkpoint(&ck)?)
}

/// Appends JSON lines to a file, flushing each one.
struct JsonLines(fs::File);

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn push<T: Serialize>(&mut self, v: &T) -> std::io::Result<()> {
        self.0.write_all(to_line(v).as_bytes())
    }
}

fn run_dir(cfg: &RunConfig, flag: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = flag.clone().unwrap_or_else(|| cfg.out_root().join(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn emit(cli: &Cli, human: String, value: serde_json::Value) {
    if cli.json {
        println!("{value}");
    } else {
        println!("{human}");
    }
}

fn gen_design(cli: &Cli, cfg: &mut RunConfig, a: &GenDesignArgs) -> Result<()> {
    let d = &mut cfg.design;
    set(&mut d.grid_n, &a.grid);
    set(&mut d.macro_count, &a.macros);
    set(&mut d.net_count, &a.nets);
    set(&mut d.min_size, &a.min_size);
    set(&mut d.max_size, &a.max_size);
    set(&mut d.min_degree, &a.min_degree);
    set(&mut d.max_degree, &a.max_degree);
    set(&mut d.terminal_prob, &a.terminal_prob);
    set(&mut cfg.design_seed, &a.seed);
    let n = generate_synthetic(&cfg.design, cfg.design_seed)?;
    write(&a.output, &serialize_netlist(&n))?;
    emit(
        cli,
        format!(
            "{}: {} macros, {} nets, density {:.3} -> {}",
            n.name,
            n.macros.len(),
            n.nets.len(),
            n.density(),
            a.output.display()
        ),
        json!({
            "name": n.name,
            "grid_n": n.grid_n,
            "macros": n.macros.len(),
            "nets": n.nets.len(),
            "density": n.density(),
        }),
    );
    Ok(())
}

fn gen_expert(cli: &Cli, cfg: &mut RunConfig, a: &GenExpertArgs) -> Result<()> {
    let netlist = load_netlist(&a.netlist)?;
    let e = &mut cfg.expert;
    set(&mut e.count, &a.count);
    set(&mut e.m, &a.m);
    set(&mut e.k_per_step, &a.k);
    set(&mut e.train_fraction, &a.train_fraction);
    set(&mut e.seed, &a.seed);
    let ds = ExpertDataset::build(netlist.clone(), &cfg.expert)?;
    let dir = run_dir(cfg, &a.out, "expert")?;

    let mut files = Vec::with_capacity(ds.trajectories.len());
    for t in &ds.trajectories {
        let name = format!("{:03}.layout.json", t.id);
        write(
            &dir.join("layouts").join(&name),
            &t.to_layout(&netlist)?.to_json(),
        )?;
        files.push(name);
    }
    write(&dir.join("dataset.eimset.jsonl"), &ds.to_jsonl())?;
    let n_train = ds.train_trajectories().count();
    let manifest = json!({
        "design": netlist.name,
        "layouts": files,
        "train_layouts": n_train,
        "validation_layouts": ds.trajectories.len() - n_train,
        "preferences": ds.preferences.len(),
        "validation_tuples": ds.validation.len(),
    });
    write(&dir.join("manifest.json"), &to_pretty(&manifest))?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    emit(
        cli,
        format!(
            "{} layouts ({} train), {} preference tuples, {} validation tuples -> {}",
            ds.trajectories.len(),
            n_train,
            ds.preferences.len(),
            ds.validation.len(),
            dir.display()
        ),
        manifest,
    );
    Ok(())
}

fn train_reward(cli: &Cli, cfg: &mut RunConfig, a: &TrainRewardArgs) -> Result<()> {
    let t = &mut cfg.train;
    set(&mut t.epochs, &a.epochs);
    set(&mut t.batch_size, &a.batch_size);
    set(&mut t.lr, &a.lr);
    set(&mut t.alpha, &a.alpha);
    set(&mut t.gamma, &a.gamma);
    set(&mut t.hidden, &a.hidden);
    set(&mut t.eval_every, &a.eval_every);
    set(&mut t.seed, &a.seed);
    match (a.encoder, a.kernel) {
        (Some(EncoderArg::Dense), Some(_)) => bail!("--kernel applies to the conv encoder only"),
        (Some(EncoderArg::Dense), None) => t.encoder = Encoder::Dense,
        (Some(EncoderArg::Conv), k) => {
            t.encoder = Encoder::Conv {
                kernel: k.unwrap_or(5),
            }
        }
        (None, Some(kernel)) => t.encoder = Encoder::Conv { kernel },
        (None, None) => {}
    }
    if let Encoder::Conv { kernel } = t.encoder {
        if kernel % 2 == 0 {
            bail!("conv kernel width must be odd, got {kernel}");
        }
    }
    let netlist = load_netlist(&a.netlist)?;
    let ds = load_dataset(&netlist, &a.dataset)?;
    let (label, default_dir) = match a.method {
        Method::Demo => ("eim_d", "reward-demo"),
        Method::Pref => ("eim_p", "reward-pref"),
    };
    if a.method == Method::Pref && ds.preferences.is_empty() {
        bail!("dataset {} has no preference records", a.dataset.display());
    }
    let dir = run_dir(cfg, &a.out, default_dir)?;
    write(&dir.join("config.json"), &cfg.to_json())?;

    let mut metrics = JsonLines::create(&dir.join("metrics.jsonl"))?;
    let mut timing = JsonLines::create(&dir.join("timing.jsonl"))?;
    let mut io_err = None;
    let start = Instant::now();
    let on_epoch = |e: &eim_core::reward::EpochLog| {
        let r = metrics.push(e).and_then(|_| {
            timing.push(&json!({"epoch": e.epoch, "wall_ms": start.elapsed().as_millis() as u64}))
        });
        if let Err(err) = r {
            io_err.get_or_insert(err);
        }
    };
    let out = match a.method {
        Method::Demo => train_eim_d(&ds, &cfg.train, on_epoch)?,
        Method::Pref => train_eim_p(&ds, &cfg.train, on_epoch)?,
    };
    if let Some(err) = io_err {
        return Err(err).context("writing metrics");
    }
    write(
        &dir.join("reward.ckpt.json"),
        &to_line(&out.model.to_checkpoint()),
    )?;
    let report = json!({
        "method": label,
        "design": netlist.name,
        "best_epoch": out.best_epoch,
        "val_accuracy": out.best_accuracy,
        "validation_tuples": ds.validation.len(),
    });
    write(&dir.join("report.json"), &to_pretty(&report))?;
    emit(
        cli,
        format!(
            "{label}: validation accuracy {:.4} at epoch {} -> {}",
            out.best_accuracy,
            out.best_epoch,
            dir.display()
        ),
        report,
    );
    Ok(())
}

fn eval_reward(cli: &Cli, cfg: &mut RunConfig, a: &EvalRewardArgs) -> Result<()> {
    set(&mut cfg.expert.m, &a.m);
    set(&mut cfg.expert.seed, &a.seed);
    let rm = load_reward(&a.checkpoint)?;
    let netlist = load_netlist(&a.netlist)?;
    rm.check_grid(&netlist)?;
    let ds = load_dataset(&netlist, &a.dataset)?;
    let states = ds.replay_states()?;
    let (split, validation) = match a.split {
        SplitArg::Validation => ("validation", ds.validation.clone()),
        SplitArg::All => (
            "all",
            build_validation_set(&netlist, &ds.trajectories, cfg.expert.m, cfg.expert.seed)?,
        ),
    };
    let accuracy = reward_accuracy(&rm, &states, &validation)?;
    let chance = validation
        .iter()
        .map(|v| 1.0 / (v.distractors.len() + 1) as f64)
        .sum::<f64>()
        / validation.len() as f64;
    let kind = match rm.kind {
        RewardKind::Demonstration => "eim_d",
        RewardKind::Preference => "eim_p",
    };
    let report = json!({
        "kind": kind,
        "design": netlist.name,
        "split": split,
        "tuples": validation.len(),
        "accuracy": accuracy,
        "chance": chance,
    });
    let dir = run_dir(cfg, &a.out, "eval-reward")?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    write(&dir.join("report.json"), &to_pretty(&report))?;
    emit(
        cli,
        format!(
            "{kind} on {} ({split}, {} tuples): accuracy {accuracy:.4} (chance {chance:.4})",
            netlist.name,
            validation.len()
        ),
        report,
    );
    Ok(())
}

fn policy_summary(subject: &str, r: &PolicyReport) -> String {
    format!(
        "{subject}: mean HPWL {:.3} (std {:.3}), periphery {:.3}, failures {}/{}",
        r.mean_hpwl, r.std_hpwl, r.periphery_occupancy, r.failures, r.episodes
    )
}

fn train_policy(cli: &Cli, cfg: &mut RunConfig, a: &TrainPolicyArgs) -> Result<()> {
    let p = &mut cfg.ppo;
    set(&mut p.total_updates, &a.updates);
    set(&mut p.rollout_episodes, &a.episodes);
    set(&mut p.minibatch_size, &a.minibatch_size);
    set(&mut p.hidden, &a.hidden);
    set(&mut p.lr, &a.lr);
    set(&mut p.gamma, &a.gamma);
    set(&mut p.gae_lambda, &a.gae_lambda);
    set(&mut p.clip, &a.clip);
    set(&mut p.entropy_coef, &a.entropy_coef);
    set(&mut p.seed, &a.seed);
    if a.standardize.is_some() {
        p.reward_standardize = a.standardize;
    }
    set(&mut cfg.eval.episodes, &a.eval_episodes);
    set(&mut cfg.eval.seed, &a.eval_seed);
    let netlist = load_netlist(&a.netlist)?;
    let source = match a.reward {
        RewardArg::Hpwl => {
            if a.reward_checkpoint.is_some() {
                warn!("--reward hpwl ignores --reward-checkpoint");
            }
            RewardSource::Hpwl
        }
        RewardArg::EimD | RewardArg::EimP => {
            let path = a
                .reward_checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("a learned reward needs --reward-checkpoint"))?;
            let rm = load_reward(path)?;
            let want = if a.reward == RewardArg::EimD {
                RewardKind::Demonstration
            } else {
                RewardKind::Preference
            };
            if rm.kind != want {
                bail!(
                    "{} holds a {:?} reward, which does not match the requested source",
                    path.display(),
                    rm.kind
                );
            }
            rm.check_grid(&netlist)?;
            RewardSource::Learned(rm)
        }
    };
    let dir = run_dir(cfg, &a.out, &format!("policy-{}", source.name()))?;
    write(&dir.join("config.json"), &cfg.to_json())?;

    let mut metrics = JsonLines::create(&dir.join("metrics.jsonl"))?;
    let mut timing = JsonLines::create(&dir.join("timing.jsonl"))?;
    let mut io_err = None;
    let start = Instant::now();
    let out = train_ppo(&netlist, &source, &cfg.ppo, |u| {
        let r = metrics.push(u).and_then(|_| {
            timing.push(&json!({"update": u.update, "wall_ms": start.elapsed().as_millis() as u64}))
        });
        if let Err(err) = r {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = io_err {
        return Err(err).context("writing metrics");
    }
    write(
        &dir.join("policy.ckpt.json"),
        &to_line(&out.policy.to_checkpoint()),
    )?;
    let report = evaluate_policy(&out.policy, &netlist, cfg.eval.episodes, cfg.eval.seed)?;
    let value = json!({"reward": source.name(), "report": report, "config": cfg});
    write(&dir.join("report.json"), &to_pretty(&value))?;
    emit(cli, policy_summary(source.name(), &report), value);
    Ok(())
}

fn read_layouts(dir: &Path) -> Result<Vec<Layout>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".layout.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .layout.json files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| Layout::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display())))
        .collect()
}

fn eval_policy(cli: &Cli, cfg: &mut RunConfig, a: &EvalPolicyArgs) -> Result<()> {
    set(&mut cfg.eval.episodes, &a.episodes);
    set(&mut cfg.eval.seed, &a.seed);
    let netlist = load_netlist(&a.netlist)?;
    let (subject, report) = if let Some(path) = &a.checkpoint {
        let ck: PolicyCheckpoint = serde_json::from_str(&read(path)?)
            .with_context(|| format!("parsing policy checkpoint {}", path.display()))?;
        let p = PolicyModel::from_checkpoint(&ck)?;
        (
            "policy",
            evaluate_policy(&p, &netlist, cfg.eval.episodes, cfg.eval.seed)?,
        )
    } else if let Some(dir) = &a.layouts {
        ("layouts", evaluate_layouts(&netlist, &read_layouts(dir)?)?)
    } else {
        let p = PolicyModel::uniform(netlist.grid_n, 1);
        (
            "uniform",
            evaluate_policy(&p, &netlist, cfg.eval.episodes, cfg.eval.seed)?,
        )
    };
    let value = json!({"subject": subject, "report": report, "config": cfg});
    let dir = run_dir(cfg, &a.out, "eval-policy")?;
    write(&dir.join("report.json"), &to_pretty(&value))?;
    emit(cli, policy_summary(subject, &report), value);
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let netlist = load_netlist(&a.netlist)?;
    let layout = Layout::from_json(&read(&a.layout)?)
        .with_context(|| format!("parsing {}", a.layout.display()))?;
    if layout.netlist != netlist.name {
        bail!(
            "layout is for design {}, not {}",
            layout.netlist,
            netlist.name
        );
    }
    layout
        .replay(netlist.clone())
        .with_context(|| format!("in {}", a.layout.display()))?;
    write(&a.output, &render_layout(&netlist, &layout))
}
