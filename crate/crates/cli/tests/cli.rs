use std::fs;
use std::path::Path;
use std::process::Command;

use fedprompt_cli::commands::{
    build_dataset, backbone, cmd_personalize, cmd_sweep, cmd_train, gen_data, init_prompt, run_dir,
};
use fedprompt_cli::io::{encode_prompt, read_dataset, read_prompt};
use fedprompt_cli::RunConfig;
use tempfile::TempDir;

fn small(rounds: usize, epochs: usize) -> RunConfig {
    let mut c = RunConfig { run_name: "t".into(), seed: 3, ..Default::default() };
    c.federated.rounds = rounds;
    c.personalize.epochs = epochs;
    c.personalize_clients = Some(4);
    c
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn dataset_files_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(1, 1);
    let d = gen_data(&cfg, tmp.path()).unwrap();
    let (meta, back) = read_dataset(tmp.path()).unwrap();
    assert_eq!(back, d);
    assert_eq!(meta.seed, cfg.seed);
    assert_eq!(d, build_dataset(&cfg, &backbone(&cfg).unwrap()).unwrap());

    let first = fs::read(tmp.path().join("instances.jsonl")).unwrap();
    gen_data(&cfg, tmp.path()).unwrap();
    assert_eq!(fs::read(tmp.path().join("instances.jsonl")).unwrap(), first);

    let stats = lines(&tmp.path().join("stats.csv"));
    assert_eq!(
        stats[0],
        "partition,split,n_clients,instances_per_client_mean,instances_per_client_std,tasks_per_client_mean,\
         tasks_per_client_std,types_per_client_mean,types_per_client_std"
    );
    assert_eq!(stats.len(), 4);
    assert!(stats[1].starts_with("high,train,"));
}

#[test]
fn zero_rounds_saves_the_init_prompt() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(0, 0);
    gen_data(&cfg, &tmp.path().join("data")).unwrap();
    cmd_train(&cfg, &tmp.path().join("data"), tmp.path()).unwrap();
    let run = run_dir(tmp.path(), &cfg);
    let init = init_prompt(&cfg, &backbone(&cfg).unwrap()).unwrap();
    assert_eq!(fs::read(run.join("prompt_best.bin")).unwrap(), encode_prompt(&init));
    assert_eq!(lines(&run.join("telemetry.csv")).len(), 1);

    cmd_personalize(&cfg, &tmp.path().join("data"), &run).unwrap();
    assert_eq!(lines(&run.join("curve.csv")).len(), 2, "header plus epoch 0");
}

#[test]
fn train_and_personalize_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(7, 3);
    let data = tmp.path().join("data");
    gen_data(&cfg, &data).unwrap();
    let res = cmd_train(&cfg, &data, tmp.path()).unwrap();
    let run = run_dir(tmp.path(), &cfg);

    let telemetry = lines(&run.join("telemetry.csv"));
    assert_eq!(telemetry[0], "round,prompt_norm,mean_grad_norm,delta_norm,val_score");
    assert_eq!(telemetry.len(), 1 + 7);
    let best: f64 = fs::read_to_string(run.join("best_val_score")).unwrap().trim().parse().unwrap();
    assert_eq!(best, res.best_val_score);
    assert_eq!(read_prompt(&run.join("prompt_final.bin")).unwrap(), res.final_prompt);
    let echo = RunConfig::from_toml(&fs::read_to_string(run.join("config_echo.toml")).unwrap()).unwrap();
    assert_eq!(echo, cfg);

    let suite = cmd_personalize(&cfg, &data, &run).unwrap();
    let curve = lines(&run.join("curve.csv"));
    assert_eq!(curve.len(), 1 + 4);
    let averaging = lines(&run.join("model_averaging.csv"));
    assert_eq!(averaging.len(), 1 + 11);
    // α = 0 is the global prompt, i.e. the epoch-0 row.
    let epoch0: Vec<&str> = curve[1].split(',').collect();
    let alpha0: Vec<&str> = averaging[1].split(',').collect();
    assert_eq!((alpha0[0], alpha0[1], alpha0[2]), ("0", epoch0[1], epoch0[2]));
    assert_eq!(lines(&run.join("per_client.jsonl")).len(), 4);
    assert_eq!(lines(&run.join("genie.csv")).len(), 1 + 2 * 4);
    assert_eq!(suite.trajectories.len(), 4);
}

#[test]
fn mismatched_dataset_is_rejected_before_training() {
    let tmp = TempDir::new().unwrap();
    let cfg = small(2, 1);
    gen_data(&cfg, tmp.path()).unwrap();
    let mut other = cfg.clone();
    other.dataset.per_task += 1;
    let err = cmd_train(&other, tmp.path(), &tmp.path().join("runs")).unwrap_err();
    assert_eq!(fedprompt_cli::exit_code(&err), 1);
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn sweep_ranks_cells_and_records_failures() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small(4, 1);
    let data = tmp.path().join("data");
    gen_data(&cfg, &data).unwrap();

    // Single point: identical to a plain train run.
    cfg.sweep.server_lr = vec![0.1];
    cfg.sweep.client_lr = vec![0.1];
    cmd_sweep(&cfg, &data, &tmp.path().join("sweep")).unwrap();
    cmd_train(&cfg, &data, &tmp.path().join("plain")).unwrap();
    let cell = tmp.path().join("sweep/t/cells/000");
    for f in ["telemetry.csv", "prompt_best.bin", "prompt_final.bin", "best_val_score", "config_echo.toml"] {
        assert_eq!(fs::read(cell.join(f)).unwrap(), fs::read(tmp.path().join("plain/t").join(f)).unwrap(), "{f}");
    }

    cfg.sweep.server_lr = vec![0.01, -1.0, 0.1, 1.0];
    let cells = cmd_sweep(&cfg, &data, &tmp.path().join("grid")).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells[1].outcome.is_err());
    let board = lines(&tmp.path().join("grid/t/leaderboard.csv"));
    assert_eq!(board.len(), 5);
    let scores: Vec<f64> = board[1..4].iter().map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(board[4].contains(",failed,"));
}

fn fedprompt(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedprompt")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(fedprompt(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(fedprompt(dir, &["--version"]).status.code(), Some(0));
    assert_eq!(fedprompt(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedprompt(dir, &["--config", "missing.toml", "gen-data"]).status.code(), Some(1));
    fs::write(dir.join("bad.toml"), "[federated]\nrounds = \"many\"\n").unwrap();
    assert_eq!(fedprompt(dir, &["--config", "bad.toml", "gen-data"]).status.code(), Some(1));
    // No dataset on disk: a runtime error.
    assert_eq!(fedprompt(dir, &["train", "--data", "nowhere"]).status.code(), Some(2));

    fs::write(dir.join("c.toml"), "run_name = \"x\"\n[federated]\nrounds = 2\n").unwrap();
    let ok = fedprompt(dir, &["--config", "c.toml", "--seed", "9", "gen-data", ]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let meta = fs::read_to_string(dir.join("data/dataset.json")).unwrap();
    assert!(meta.contains("\"seed\": 9"));
    // Missing trained prompt.
    let out = fedprompt(dir, &["--config", "c.toml", "--seed", "9", "personalize"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prompt_best.bin"));
}
