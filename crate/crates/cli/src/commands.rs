use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latentplan::env::MultiPendulumEnv;
use latentplan::model::AnyModel;
use latentplan::planner::{MpcPolicy, Policy, TrueDynamics};
use latentplan::theory::{check_bound, offset_latent, random_instance, BoundReport, DiscreteMdp};
use latentplan::trainer::{
    collect_random, env_config_hash, episode_seed, evaluate, sidecar_path, train_offline, train_online, EvalStats,
    NoiseProcess, ReplayDataset,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::{write_json, write_text, RunManifest, VERSION};
use crate::{report, Cli, Command, Failure, InstanceKind, ModelArgs};

pub const DATASET_FILE: &str = "dataset.lrpd";
pub const MODEL_FILE: &str = "model.lrpc";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "eval_summary.json";
pub const RETURNS_FILE: &str = "eval_returns.csv";
pub const BOUNDS_FILE: &str = "bound_reports.jsonl";

/// Contents of `eval_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub n_pendulums: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mean: f64,
    pub std: f64,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(n) = cli.pendulums {
        cfg.env.n_pendulums = n;
    }
    let out_given = cli.out.is_some();
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    let wall_clock = cli.wall_clock;
    match cli.command {
        Command::Collect { steps } => {
            if let Some(steps) = steps {
                cfg.collect.steps = steps;
            }
            collect(cfg)
        }
        Command::TrainOffline { data, epochs, model } => {
            if let Some(epochs) = epochs {
                cfg.offline.epochs = epochs;
            }
            apply_model_args(&mut cfg, &model);
            train_offline_cmd(cfg, &data, wall_clock)
        }
        Command::TrainOnline { iterations, seeds, model } => {
            if let Some(n) = iterations {
                cfg.online.n_iterations = n;
            }
            apply_model_args(&mut cfg, &model);
            if seeds.is_empty() {
                return train_online_cmd(cfg, wall_clock);
            }
            let root = cfg.output.dir.clone();
            for seed in seeds {
                let mut run = cfg.clone();
                run.apply_seed(seed);
                run.output.dir = root.join(format!("seed-{seed}"));
                train_online_cmd(run, wall_clock)?;
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            oracle: _,
            episodes,
        } => {
            if let Some(n) = episodes {
                cfg.output.eval_episodes = n;
            }
            eval_cmd(cfg, checkpoint.as_deref())
        }
        Command::VerifyTheorem {
            instances,
            horizon,
            kind,
            delta,
            max_states,
            max_actions,
        } => {
            let opts = TheoremOptions {
                instances,
                horizon,
                kind,
                delta,
                max_states,
                max_actions,
            };
            verify_theorem(&cfg, &opts, out_given.then_some(cfg.output.dir.as_path()))
        }
        Command::Report { runs } => {
            let out = if out_given { cfg.output.dir.clone() } else { runs.clone() };
            report::report(&runs, &out)
        }
    }
}

fn apply_model_args(cfg: &mut ExperimentConfig, args: &ModelArgs) {
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(d_z) = args.d_z {
        cfg.model.d_z = d_z;
    }
}

fn manifest(command: &str, cfg: &ExperimentConfig, method: &str) -> RunManifest {
    RunManifest {
        command: command.into(),
        version: VERSION.into(),
        seed: cfg.output.seed,
        method: method.into(),
        config: cfg.clone(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        started_at: crate::manifest::now(),
    }
}

fn outputs(names: &[(&str, &str)]) -> BTreeMap<String, PathBuf> {
    names.iter().map(|(k, v)| (k.to_string(), PathBuf::from(v))).collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string(value).map_err(|e| Failure::Other(e.to_string()))?);
    Ok(())
}

fn collect(cfg: ExperimentConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let mut m = manifest("collect", &cfg, "ou_noise");
    let sidecar = sidecar_path(Path::new(DATASET_FILE));
    m.outputs = outputs(&[("dataset", DATASET_FILE), ("dataset_metadata", &sidecar.to_string_lossy())]);
    let run = m.begin(&cfg.output.dir)?;
    let path = run.path(DATASET_FILE);
    let result = (|| {
        let mut env = MultiPendulumEnv::new(cfg.env)?;
        let mut noise = NoiseProcess::for_env(&cfg.env, cfg.output.seed);
        let data = collect_random(&mut env, cfg.collect.steps, &mut noise)?;
        data.save(&path)?;
        Ok::<_, latentplan::Error>(data)
    })()
    .map_err(Failure::from);
    let data = run.finish(result)?;
    print_json(&serde_json::json!({
        "dataset": path,
        "records": data.len(),
        "episodes": data.episode_count(),
    }))
}

fn load_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<ReplayDataset, Failure> {
    if !path.exists() {
        return Err(Failure::Io(format!("{}: dataset not found", path.display())));
    }
    let data = ReplayDataset::load(path).map_err(Failure::from)?;
    if data.d_s() != cfg.env.obs_dim() || data.d_a() != cfg.env.action_dim() {
        return Err(Failure::Validation(format!(
            "dataset has {} state dimensions, environment with {} pendulums has {}",
            data.d_s(),
            cfg.env.n_pendulums,
            cfg.env.obs_dim()
        )));
    }
    let expected = env_config_hash(&cfg.env);
    if data.metadata.env_config_hash != expected {
        return Err(Failure::Validation(format!(
            "dataset was recorded under environment config {}, current config is {expected}",
            data.metadata.env_config_hash
        )));
    }
    Ok(data)
}

fn train_offline_cmd(cfg: ExperimentConfig, data_path: &Path, wall_clock: bool) -> Result<(), Failure> {
    cfg.validate()?;
    let data = load_dataset(&cfg, data_path)?;
    let mut model = cfg.build_model()?;
    let mut m = manifest("train-offline", &cfg, cfg.model.variant.as_str());
    m.inputs.insert("dataset".into(), data_path.to_path_buf());
    m.outputs = outputs(&[("checkpoint", MODEL_FILE), ("train_log", LOG_FILE)]);
    let run = m.begin(&cfg.output.dir)?;
    let (model_path, log_path) = (run.path(MODEL_FILE), run.path(LOG_FILE));
    let result = (|| {
        let log = train_offline(&mut model, &data, &cfg.offline)?;
        model.save(&model_path)?;
        Ok::<_, latentplan::Error>(log)
    })()
    .map_err(Failure::from)
    .and_then(|log| {
        write_text(&log_path, &log.to_csv(wall_clock))?;
        Ok(log)
    });
    let log = run.finish(result)?;
    print_json(&serde_json::json!({
        "checkpoint": model_path,
        "train_log": log_path,
        "rows": log.records.len(),
        "final_eval_loss_10step": log.last().map(|r| r.eval_loss_10step),
    }))
}

fn train_online_cmd(cfg: ExperimentConfig, wall_clock: bool) -> Result<(), Failure> {
    cfg.validate()?;
    let mut model = cfg.build_model()?;
    let mut m = manifest("train-online", &cfg, cfg.model.variant.as_str());
    m.outputs = outputs(&[("checkpoint", MODEL_FILE), ("train_log", LOG_FILE), ("dataset", DATASET_FILE)]);
    let run = m.begin(&cfg.output.dir)?;
    let (model_path, log_path, data_path) = (run.path(MODEL_FILE), run.path(LOG_FILE), run.path(DATASET_FILE));
    let result = (|| {
        let mut env = MultiPendulumEnv::new(cfg.env)?;
        let outcome = train_online(&mut env, &mut model, &cfg.planner, &cfg.online)?;
        model.save(&model_path)?;
        outcome.dataset.save(&data_path)?;
        Ok::<_, latentplan::Error>(outcome.log)
    })()
    .map_err(Failure::from)
    .and_then(|log| {
        write_text(&log_path, &log.to_csv(wall_clock))?;
        Ok(log)
    });
    let log = run.finish(result)?;
    let last = log.last();
    print_json(&serde_json::json!({
        "checkpoint": model_path,
        "train_log": log_path,
        "env_steps": last.map(|r| r.env_steps),
        "final_eval_return": log.records.iter().rev().find_map(|r| r.eval_return),
    }))
}

fn eval_cmd(mut cfg: ExperimentConfig, checkpoint: Option<&Path>) -> Result<(), Failure> {
    cfg.validate()?;
    let model = match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Io(format!("{}: checkpoint not found", path.display())));
            }
            let model = AnyModel::load(path).map_err(Failure::from)?;
            cfg.check_model(&model)?;
            cfg.model.variant = model.variant();
            cfg.model.d_z = model.latent().d_z();
            Some(model)
        }
        None => None,
    };
    let method = model.as_ref().map_or("oracle", |m| m.variant().as_str());
    let mut m = manifest("eval", &cfg, method);
    if let Some(path) = checkpoint {
        m.inputs.insert("checkpoint".into(), path.to_path_buf());
    }
    m.outputs = outputs(&[("summary", SUMMARY_FILE), ("returns", RETURNS_FILE)]);
    let run = m.begin(&cfg.output.dir)?;
    let (episodes, seed) = (cfg.output.eval_episodes, cfg.output.seed);
    let result = (|| {
        let mut policy: Box<dyn Policy + '_> = match &model {
            Some(model) => Box::new(MpcPolicy::new(model.latent(), cfg.planner.clone())?),
            None => Box::new(MpcPolicy::new(TrueDynamics::new(cfg.env), cfg.planner.clone())?),
        };
        evaluate(&cfg.env, policy.as_mut(), episodes, seed)
    })()
    .map_err(Failure::from)
    .and_then(|stats| {
        let summary = write_eval(&run.dir, method, &cfg, &stats)?;
        Ok(summary)
    });
    let summary = run.finish(result)?;
    print_json(&summary)
}

fn write_eval(dir: &Path, method: &str, cfg: &ExperimentConfig, stats: &EvalStats) -> Result<EvalSummary, Failure> {
    let summary = EvalSummary {
        method: method.into(),
        n_pendulums: cfg.env.n_pendulums,
        episodes: stats.returns.len(),
        seed: cfg.output.seed,
        mean: stats.mean,
        std: stats.std,
    };
    let mut csv = String::from("episode,episode_seed,return\n");
    for (i, r) in stats.returns.iter().enumerate() {
        writeln!(csv, "{i},{},{r}", episode_seed(cfg.output.seed, i)).expect("writing to a String");
    }
    write_text(&dir.join(RETURNS_FILE), &csv)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub struct TheoremOptions {
    pub instances: usize,
    pub horizon: usize,
    pub kind: InstanceKind,
    pub delta: f64,
    pub max_states: usize,
    pub max_actions: usize,
}

#[derive(Serialize)]
struct BoundLine<'a> {
    instance: usize,
    kind: &'a str,
    cs_bound_holds: bool,
    #[serde(flatten)]
    report: &'a BoundReport,
}

fn theorem_instance(rng: &mut ChaCha8Rng, o: &TheoremOptions) -> latentplan::Result<BoundReport> {
    let random_mdp = |rng: &mut ChaCha8Rng, gamma: Option<f64>| {
        let ns = rng.random_range(2..=o.max_states);
        let na = rng.random_range(2..=o.max_actions);
        let gamma = gamma.unwrap_or_else(|| rng.random_range(0.5..=1.0));
        DiscreteMdp::random(rng, ns, na, gamma)
    };
    match o.kind {
        InstanceKind::Random => {
            let inst = random_instance(rng, o.max_states, o.max_actions, o.horizon)?;
            check_bound(&inst.mdp, &inst.latent, inst.horizon, inst.descriptor())
        }
        InstanceKind::Identity => {
            let mdp = random_mdp(rng, None)?;
            let desc = format!("|S|={} |A|={} H={} gamma={} identity", mdp.n_states, mdp.n_actions, o.horizon, mdp.gamma);
            check_bound(&mdp, &mdp.exact_latent(), o.horizon, desc)
        }
        InstanceKind::Offset => {
            let mdp = random_mdp(rng, Some(1.0))?;
            let desc = format!("|S|={} |A|={} H={} gamma=1 offset delta={}", mdp.n_states, mdp.n_actions, o.horizon, o.delta);
            check_bound(&mdp, &offset_latent(&mdp, o.delta), o.horizon, desc)
        }
    }
}

fn verify_theorem(cfg: &ExperimentConfig, o: &TheoremOptions, out: Option<&Path>) -> Result<(), Failure> {
    if o.instances == 0 || o.horizon == 0 {
        return Err(Failure::Validation("--instances and --horizon must be >= 1".into()));
    }
    if o.max_states < 2 || o.max_actions < 2 {
        return Err(Failure::Validation("--max-states and --max-actions must be >= 2".into()));
    }
    if !o.delta.is_finite() {
        return Err(Failure::Validation("--delta must be finite".into()));
    }
    let kind = match o.kind {
        InstanceKind::Random => "random",
        InstanceKind::Identity => "identity",
        InstanceKind::Offset => "offset",
    };
    let run = match out {
        Some(dir) => {
            let mut m = manifest("verify-theorem", cfg, kind);
            m.outputs = outputs(&[("reports", BOUNDS_FILE)]);
            Some(m.begin(dir)?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.output.seed);
    let result = (|| {
        let mut lines = String::new();
        let mut failures = 0;
        for i in 0..o.instances {
            let report = theorem_instance(&mut rng, o)?;
            let holds = report.cs_bound_holds();
            failures += usize::from(!holds);
            let line = BoundLine {
                instance: i,
                kind,
                cs_bound_holds: holds,
                report: &report,
            };
            let text = serde_json::to_string(&line).map_err(|e| Failure::Other(e.to_string()))?;
            println!("{text}");
            lines.push_str(&text);
            lines.push('\n');
        }
        if let Some(run) = &run {
            write_text(&run.path(BOUNDS_FILE), &lines)?;
        }
        if failures > 0 {
            return Err(Failure::Bound(format!("{failures} of {} instances exceed the H * epsilon bounds", o.instances)));
        }
        Ok(())
    })();
    match run {
        Some(run) => run.finish(result),
        None => result,
    }
}
