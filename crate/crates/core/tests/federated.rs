mod common;

use std::time::Instant;

use common::{bits, dist, toy};
use fedprompt::backbone::Example;
use fedprompt::data::ClientDataset;
use fedprompt::eval::Metric;
use fedprompt::federated::{
    client_update, fedavg_round, train, Algorithm, FedConfig, LocalTraining, Trainer,
};
use fedprompt::numerics::{shuffle, SeededRng};
use fedprompt::optim::{AdamConfig, OptimizerConfig, SgdConfig};
use fedprompt::{AdamState, Matrix, OptimizerState};

fn fed(algorithm: Algorithm) -> FedConfig {
    FedConfig {
        algorithm,
        rounds: 10,
        clients_per_round: 4,
        local_steps: 3,
        client_batch: 4,
        eval_every: 5,
        ..Default::default()
    }
}

#[test]
fn fedavg_one_sgd_step_at_unit_lr_is_fedsgd() {
    let start = Instant::now();
    for seed in 0..3 {
        let t = toy(seed);
        let rng = SeededRng::new(100 + seed);
        let avg_cfg = FedConfig {
            local_steps: 1,
            client_opt: OptimizerConfig::Sgd(SgdConfig { lr: 1.0 }),
            ..fed(Algorithm::FedavgSgd)
        };
        let sgd_cfg = FedConfig { local_steps: 1, ..fed(Algorithm::Fedsgd) };
        let mut a = Trainer::new(&t.b, &t.data.train_clients, t.init.clone(), avg_cfg, &rng).unwrap();
        let mut s = Trainer::new(&t.b, &t.data.train_clients, t.init.clone(), sgd_cfg, &rng).unwrap();
        for round in 1..=10 {
            a.step().unwrap();
            s.step().unwrap();
            let d = dist(a.prompt().matrix(), s.prompt().matrix());
            assert!(d < 1e-9, "seed {seed} round {round}: distance {d:e}");
        }
        assert!(dist(a.prompt().matrix(), t.init.matrix()) > 1e-3, "trajectory must move");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn aggregation_ignores_client_order() {
    let t = toy(1);
    let local = LocalTraining {
        optimizer: OptimizerConfig::Adam(AdamConfig::with_lr(0.05)),
        steps: 3,
        batch_size: 4,
    };
    let rng = SeededRng::new(9);
    let mut reference = None;
    let mut order: Vec<&ClientDataset> = t.data.train_clients.iter().take(6).collect();
    let mut shuffler = SeededRng::new(5);
    for _ in 0..6 {
        shuffle(&mut shuffler, &mut order);
        let mut p = t.init.clone();
        let mut server = OptimizerConfig::Adam(AdamConfig::with_lr(0.1)).fresh(p.shape()).unwrap();
        fedavg_round(&t.b, &mut server, &mut p, &order, &local, 1, &rng).unwrap();
        match &reference {
            None => reference = Some(p),
            Some(r) => assert!(dist(r.matrix(), p.matrix()) <= 1e-12),
        }
    }
}

#[test]
fn telemetry_delta_norm_matches_stored_prompts() {
    for alg in [Algorithm::FedavgAdam, Algorithm::Fedsgd, Algorithm::Centralized] {
        let t = toy(2);
        let mut cfg = fed(alg);
        if alg.is_fedsgd() {
            cfg.local_steps = 1;
        }
        let mut tr = Trainer::new(&t.b, &t.data.train_clients, t.init.clone(), cfg, &SeededRng::new(3)).unwrap();
        let mut prev = t.init.clone();
        for _ in 0..8 {
            let r = tr.step().unwrap();
            let d = dist(tr.prompt().matrix(), prev.matrix());
            assert!((r.delta_norm - d).abs() <= 1e-12, "{alg:?}: {} vs {d}", r.delta_norm);
            assert!((r.prompt_norm - tr.prompt().matrix().frobenius_norm()).abs() <= 1e-12);
            prev = tr.prompt().clone();
        }
    }
}

fn poison(state: &mut Option<OptimizerState>, shape: (usize, usize)) {
    let mut adam = AdamState::fresh(AdamConfig::with_lr(3.0), shape).unwrap();
    let (m, v, t) = adam.raw_parts_mut();
    *m = Matrix::from_fn(shape.0, shape.1, |i, j| 1e3 * (i as f64 - j as f64));
    *v = Matrix::from_fn(shape.0, shape.1, |_, _| 7.0);
    *t = 999;
    *state = Some(OptimizerState::Adam(adam));
}

#[test]
fn client_state_never_survives_a_round() {
    for alg in [Algorithm::FedavgAdam, Algorithm::FedavgSgd] {
        let t = toy(4);
        let mut cfg = fed(alg);
        if alg == Algorithm::FedavgSgd {
            cfg.client_opt = OptimizerConfig::Sgd(SgdConfig { lr: 0.5 });
        }
        let rng = SeededRng::new(8);
        let clients = &t.data.train_clients;
        let mut clean = Trainer::new(&t.b, clients, t.init.clone(), cfg, &rng).unwrap();
        let mut dirty = Trainer::new(&t.b, clients, t.init.clone(), cfg, &rng).unwrap();
        let shape = t.init.shape();
        let local = LocalTraining { optimizer: cfg.client_opt, steps: 5, batch_size: 2 };
        for round in 1..=6 {
            clean.step().unwrap();
            for i in 0..clients.len() {
                poison(dirty.client_scratch_mut(i), shape);
            }
            // Out-of-band client work between rounds must not leak in either.
            for c in clients {
                client_update(&t.b, dirty.prompt(), c, &local, SeededRng::new(round)).unwrap();
            }
            dirty.step().unwrap();
            assert_eq!(bits(clean.prompt().matrix()), bits(dirty.prompt().matrix()), "{alg:?} round {round}");
        }
    }
}

#[test]
fn zero_rounds_returns_the_initial_prompt() {
    let t = toy(5);
    let cfg = FedConfig { rounds: 0, ..fed(Algorithm::FedavgAdam) };
    let val: Vec<_> = t.data.val_clients.iter().flat_map(|c| c.eval.clone()).collect();
    let r = train(&t.b, &t.data.train_clients, t.init.clone(), &cfg, &val, Metric::default(), &SeededRng::new(1)).unwrap();
    assert_eq!(r.best_prompt, t.init);
    assert_eq!(r.final_prompt, t.init);
    assert_eq!(r.best_round, 0);
    assert!(r.reports.is_empty());
    assert_eq!(r.best_val_score, r.init_val_score);
}

#[test]
fn train_reports_every_round_and_keeps_best() {
    let t = toy(6);
    let cfg = FedConfig { rounds: 12, eval_every: 5, ..fed(Algorithm::FedavgAdam) };
    let val: Vec<_> = t.data.val_clients.iter().flat_map(|c| c.eval.clone()).collect();
    let r = train(&t.b, &t.data.train_clients, t.init.clone(), &cfg, &val, Metric::default(), &SeededRng::new(1)).unwrap();
    assert_eq!(r.reports.len(), 12);
    let evaluated: Vec<usize> = r.reports.iter().filter(|x| x.val_score.is_some()).map(|x| x.round).collect();
    assert_eq!(evaluated, vec![5, 10, 12]);
    let best = r.reports.iter().filter_map(|x| x.val_score).fold(r.init_val_score, f64::max);
    assert_eq!(r.best_val_score, best);
    let again = train(&t.b, &t.data.train_clients, t.init.clone(), &cfg, &val, Metric::default(), &SeededRng::new(1)).unwrap();
    assert_eq!(r, again);
}

#[test]
fn single_adam_step_closed_form() {
    let t = toy(7);
    let client = &t.data.train_clients[0];
    let n = client.train.len();
    let lr = 0.1;
    let local = LocalTraining {
        optimizer: OptimizerConfig::Adam(AdamConfig::with_lr(lr)),
        steps: 1,
        batch_size: n,
    };
    let u = client_update(&t.b, &t.init, client, &local, SeededRng::new(2)).unwrap();
    // A full batch is the whole training set, in some order.
    let batch: Vec<Example> = client.train.iter().map(|x| x.example()).collect();
    let g = t.b.grad_prompt(&t.init, &batch).unwrap();
    let expected = g.map(|x| -lr * x / (x.abs() + 1e-8));
    assert!(dist(&u.delta, &expected) < 1e-12);
    assert!((u.mean_grad_norm - g.frobenius_norm()).abs() < 1e-12);
}

#[test]
fn full_scale_defaults() {
    assert_eq!(FedConfig::full_scale(Algorithm::FedavgAdam).rounds, 300);
    assert_eq!(FedConfig::full_scale(Algorithm::Fedsgd).rounds, 4800);
}
