#![allow(dead_code)]

use fedprompt::backbone::{init_prompt_gaussian, BackboneDims};
use fedprompt::data::{build_federated, generate_universe, DatasetConfig, FederatedDataset, UniverseConfig};
use fedprompt::numerics::SeededRng;
use fedprompt::{FrozenBackbone, Matrix, Prompt};

pub const DIMS: BackboneDims = BackboneDims { e: 8, v: 16, h: 8, t_max: 4, l_max: 6, k: 3 };

pub struct Toy {
    pub b: FrozenBackbone,
    pub data: FederatedDataset,
    pub init: Prompt,
}

/// Six training clients (two types, high heterogeneity), two validation
/// and two test clients.
pub fn toy_with(seed: u64, dims: BackboneDims) -> Toy {
    let root = SeededRng::new(seed);
    let b = FrozenBackbone::init(&mut root.substream("backbone"), dims).unwrap();
    let cfg = DatasetConfig {
        universe: UniverseConfig { num_types: 4, tasks_per_type: 3, t_gen: 2, ..Default::default() },
        per_task: 12,
        input_len: 4,
        chunk_size: 18,
        ..Default::default()
    };
    let u = generate_universe(&mut root.substream("universe"), cfg.universe, dims.e).unwrap();
    let data = build_federated(&root.substream("data"), &u, &b, &cfg).unwrap().dataset;
    let init = init_prompt_gaussian(&mut root.substream("init"), &dims, 0.5);
    Toy { b, data, init }
}

pub fn toy(seed: u64) -> Toy {
    toy_with(seed, DIMS)
}

pub fn dist(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}

pub fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|x| x.to_bits()).collect()
}
