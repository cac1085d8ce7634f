//! The four subcommands. Each is a plain function over a validated
//! [`RunConfig`] so tests can drive them without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedprompt::backbone::{init_prompt_gaussian, init_prompt_word};
use fedprompt::data::{
    build_federated, build_global_eval, dataset_stats, generate_universe, kl_heterogeneity, Category,
    FederatedDataset, Split,
};
use fedprompt::federated::train;
use fedprompt::numerics::SeededRng;
use fedprompt::personalize::run_suite;
use fedprompt::{FrozenBackbone, Prompt, SuiteResult, TrainResult};
use serde::Serialize;

use crate::config::{ConfigError, PromptInit, RunConfig};
use crate::io::{fmt_f64, read_dataset, read_prompt, write_csv, write_dataset, write_jsonl, write_prompt, DatasetMeta};

pub const CONFIG_ECHO: &str = "config_echo.toml";
pub const TELEMETRY: &str = "telemetry.csv";
pub const PROMPT_INIT: &str = "prompt_init.bin";
pub const PROMPT_BEST: &str = "prompt_best.bin";
pub const PROMPT_FINAL: &str = "prompt_final.bin";
pub const BEST_VAL_SCORE: &str = "best_val_score";
pub const CURVE: &str = "curve.csv";
pub const PER_CLIENT: &str = "per_client.jsonl";
pub const MODEL_AVERAGING: &str = "model_averaging.csv";
pub const GENIE: &str = "genie.csv";
pub const LEADERBOARD: &str = "leaderboard.csv";

fn root_rng(cfg: &RunConfig) -> SeededRng {
    SeededRng::new(cfg.seed)
}

pub fn backbone(cfg: &RunConfig) -> Result<FrozenBackbone> {
    Ok(FrozenBackbone::init(&mut root_rng(cfg).substream("backbone"), cfg.backbone)?)
}

fn meta(cfg: &RunConfig) -> DatasetMeta {
    DatasetMeta {
        seed: cfg.seed,
        universe_seed: data_rng(cfg).seed(),
        backbone: cfg.backbone,
        dataset: cfg.dataset,
    }
}

fn data_rng(cfg: &RunConfig) -> SeededRng {
    root_rng(cfg).substream("data")
}

pub fn build_dataset(cfg: &RunConfig, b: &FrozenBackbone) -> Result<FederatedDataset> {
    let root = root_rng(cfg);
    let u = generate_universe(&mut root.substream("universe"), cfg.dataset.universe, cfg.backbone.e)?;
    Ok(build_federated(&data_rng(cfg), &u, b, &cfg.dataset)?.dataset)
}

/// Writes `instances.jsonl`, `dataset.json`, `stats.csv`, `kl.csv` and
/// `kl_clients.csv` into `dir`.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<FederatedDataset> {
    let b = backbone(cfg)?;
    let d = build_dataset(cfg, &b)?;
    write_dataset(dir, &d, &meta(cfg))?;

    let partition = d.heterogeneity.name();
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut stats_rows = vec![];
    for split in splits {
        let s = dataset_stats(d.split(split)).with_context(|| format!("{} split", split_name(split)))?;
        stats_rows.push(vec![
            partition.to_string(),
            split_name(split).to_string(),
            s.n_clients.to_string(),
            fmt_f64(s.instances.mean),
            fmt_f64(s.instances.std),
            fmt_f64(s.tasks.mean),
            fmt_f64(s.tasks.std),
            fmt_f64(s.task_types.mean),
            fmt_f64(s.task_types.std),
        ]);
    }
    write_csv(
        &dir.join("stats.csv"),
        &[
            "partition",
            "split",
            "n_clients",
            "instances_per_client_mean",
            "instances_per_client_std",
            "tasks_per_client_mean",
            "tasks_per_client_std",
            "types_per_client_mean",
            "types_per_client_std",
        ],
        stats_rows,
    )?;

    let (mut summary, mut per_client) = (vec![], vec![]);
    for split in splits {
        for cat in [Category::Task, Category::TaskType] {
            let select = move |x: &fedprompt::backbone::Instance| cat.of(x);
            let r = kl_heterogeneity(d.split(split), select, cfg.kl_eps)?;
            let key = [partition.to_string(), split_name(split).to_string(), cat.name().to_string()];
            summary.push([key.to_vec(), vec![r.per_client.len().to_string(), fmt_f64(r.mean)]].concat());
            for (id, kl) in r.per_client {
                per_client.push([key.to_vec(), vec![id.to_string(), fmt_f64(kl)]].concat());
            }
        }
    }
    write_csv(&dir.join("kl.csv"), &["partition", "split", "category", "n_clients", "mean_kl"], summary)?;
    write_csv(&dir.join("kl_clients.csv"), &["partition", "split", "category", "client_id", "kl"], per_client)?;
    log::info!("wrote dataset to {}", dir.display());
    Ok(d)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Loads a generated dataset and checks it was generated from `cfg`.
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<FederatedDataset> {
    let (m, d) = read_dataset(dir)?;
    let want = meta(cfg);
    if m != want {
        let mut diffs = vec![];
        if m.seed != want.seed {
            diffs.push("seed");
        }
        if m.backbone != want.backbone {
            diffs.push("backbone");
        }
        if m.dataset != want.dataset {
            diffs.push("dataset");
        }
        return Err(ConfigError(format!(
            "dataset in {} was generated with a different {}; rerun gen-data",
            dir.display(),
            diffs.join(", ")
        ))
        .into());
    }
    Ok(d)
}

pub fn run_dir(runs: &Path, cfg: &RunConfig) -> PathBuf {
    runs.join(&cfg.run_name)
}

pub fn init_prompt(cfg: &RunConfig, b: &FrozenBackbone) -> Result<Prompt> {
    let mut rng = root_rng(cfg).substream("init");
    Ok(match cfg.init {
        PromptInit::Gaussian { std } => init_prompt_gaussian(&mut rng, &cfg.backbone, std),
        PromptInit::Word => init_prompt_word(&mut rng, b)?,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Stage one into `out` (created if missing).
pub fn train_into(cfg: &RunConfig, d: &FederatedDataset, out: &Path) -> Result<TrainResult> {
    let b = backbone(cfg)?;
    let root = root_rng(cfg);
    let gval = build_global_eval(&d.val_clients, cfg.global_val_size, &mut root.substream("global_val"))?;
    let init = init_prompt(cfg, &b)?;
    let res = train(&b, &d.train_clients, init.clone(), &cfg.federated, &gval, cfg.metric, &root.substream("train"))?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    write_csv(
        &out.join(TELEMETRY),
        &["round", "prompt_norm", "mean_grad_norm", "delta_norm", "val_score"],
        res.reports.iter().map(|r| {
            vec![
                r.round.to_string(),
                fmt_f64(r.prompt_norm),
                fmt_f64(r.mean_client_grad_norm),
                fmt_f64(r.delta_norm),
                opt(r.val_score),
            ]
        }),
    )?;
    write_prompt(&out.join(PROMPT_INIT), &init)?;
    write_prompt(&out.join(PROMPT_BEST), &res.best_prompt)?;
    write_prompt(&out.join(PROMPT_FINAL), &res.final_prompt)?;
    fs::write(out.join(BEST_VAL_SCORE), format!("{}\n", fmt_f64(res.best_val_score)))
        .with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "trained {} rounds: val {} -> best {} (round {})",
        cfg.federated.rounds,
        res.init_val_score,
        res.best_val_score,
        res.best_round
    );
    Ok(res)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, runs: &Path) -> Result<TrainResult> {
    let d = load_dataset(cfg, data)?;
    train_into(cfg, &d, &run_dir(runs, cfg))
}

#[derive(Serialize)]
struct ClientRecord<'a> {
    client_id: u32,
    points: &'a [fedprompt::eval::TrajectoryPoint],
}

/// Stage two from `run/prompt_best.bin`; outputs go next to it.
pub fn personalize_from(cfg: &RunConfig, d: &FederatedDataset, run: &Path) -> Result<SuiteResult> {
    let b = backbone(cfg)?;
    let p_glob = read_prompt(&run.join(PROMPT_BEST))?;
    if p_glob.shape() != cfg.backbone.prompt_shape() {
        return Err(ConfigError(format!(
            "prompt in {} is {:?}, config expects {:?}",
            run.display(),
            p_glob.shape(),
            cfg.backbone.prompt_shape()
        ))
        .into());
    }
    let root = root_rng(cfg);
    let geval = build_global_eval(&d.test_clients, cfg.global_eval_size, &mut root.substream("global_eval"))?;
    let n = cfg.personalize_clients.unwrap_or(d.test_clients.len()).min(d.test_clients.len());
    let suite = run_suite(
        &b,
        &p_glob,
        &d.test_clients[..n],
        &geval,
        &cfg.personalize,
        &cfg.alpha_grid,
        cfg.metric,
        &root.substream("personalize"),
    )?;

    write_csv(
        &run.join(CURVE),
        &["epoch", "mean_local", "mean_global", "p10_local", "p90_local", "p10_global", "p90_global"],
        suite.curve.points.iter().map(|p| {
            vec![
                p.epoch.to_string(),
                fmt_f64(p.mean_local),
                fmt_f64(p.mean_global),
                fmt_f64(p.p10_local),
                fmt_f64(p.p90_local),
                fmt_f64(p.p10_global),
                fmt_f64(p.p90_global),
            ]
        }),
    )?;
    write_jsonl(
        &run.join(PER_CLIENT),
        suite.trajectories.iter().map(|t| ClientRecord { client_id: t.client_id, points: &t.points }),
    )?;
    write_csv(
        &run.join(MODEL_AVERAGING),
        &["alpha", "mean_local", "mean_global"],
        suite
            .model_averaging
            .iter()
            .map(|a| vec![fmt_f64(a.alpha), fmt_f64(a.mean_local), fmt_f64(a.mean_global)]),
    )?;
    let mut genie_rows = vec![];
    for g in &suite.genie {
        for (set, s) in [("local", g.local), ("global", g.global)] {
            genie_rows.push(vec![
                g.client_id.to_string(),
                set.to_string(),
                fmt_f64(s.global_prompt),
                fmt_f64(s.personal_prompt),
                fmt_f64(s.genie),
            ]);
        }
    }
    write_csv(&run.join(GENIE), &["client_id", "set", "global_prompt", "personal_prompt", "genie"], genie_rows)?;
    log::info!("personalized {n} clients into {}", run.display());
    Ok(suite)
}

pub fn cmd_personalize(cfg: &RunConfig, data: &Path, run: &Path) -> Result<SuiteResult> {
    let d = load_dataset(cfg, data)?;
    personalize_from(cfg, &d, run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub server_lr: f64,
    pub client_lr: f64,
    /// `(best_val_score, best_round)` or the failure message.
    pub outcome: std::result::Result<(f64, usize), String>,
}

/// Trains every `server_lr × client_lr` cell into `runs/<run_name>/cells/NNN`
/// and writes `leaderboard.csv`, best first. Failed cells are listed last.
pub fn cmd_sweep(cfg: &RunConfig, data: &Path, runs: &Path) -> Result<Vec<SweepCell>> {
    let grid = &cfg.sweep;
    if grid.server_lr.is_empty() || grid.client_lr.is_empty() {
        return Err(ConfigError("sweep grids must be nonempty".into()).into());
    }
    let d = load_dataset(cfg, data)?;
    let out = run_dir(runs, cfg);
    let mut cells = vec![];
    for &server_lr in &grid.server_lr {
        for &client_lr in &grid.client_lr {
            let index = cells.len();
            let mut cell_cfg = cfg.clone();
            cell_cfg.federated.server_opt = cell_cfg.federated.server_opt.with_lr(server_lr);
            cell_cfg.federated.client_opt = cell_cfg.federated.client_opt.with_lr(client_lr);
            let dir = out.join("cells").join(format!("{index:03}"));
            let outcome = cell_cfg
                .validate()
                .map_err(anyhow::Error::from)
                .and_then(|()| train_into(&cell_cfg, &d, &dir))
                .map(|r| (r.best_val_score, r.best_round))
                .map_err(|e| {
                    log::warn!("sweep cell {index} failed: {e:#}");
                    format!("{e:#}")
                });
            cells.push(SweepCell { index, server_lr, client_lr, outcome });
        }
    }
    let mut ranked: Vec<&SweepCell> = cells.iter().collect();
    // Stable: equal scores keep grid order; failures sort after successes.
    ranked.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y.0.total_cmp(&x.0),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(
        &out.join(LEADERBOARD),
        &["rank", "cell", "server_lr", "client_lr", "best_val_score", "best_round", "status", "error"],
        ranked.iter().enumerate().map(|(rank, c)| {
            let (score, round, status, err) = match &c.outcome {
                Ok((s, r)) => (fmt_f64(*s), r.to_string(), "ok", String::new()),
                Err(e) => (String::new(), String::new(), "failed", e.clone()),
            };
            vec![
                (rank + 1).to_string(),
                format!("{:03}", c.index),
                fmt_f64(c.server_lr),
                fmt_f64(c.client_lr),
                score,
                round,
                status.to_string(),
                err,
            ]
        }),
    )?;
    Ok(cells)
}
