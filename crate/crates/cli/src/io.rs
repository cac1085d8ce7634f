//! On-disk formats: prompt matrices, dataset JSONL, CSV reports.
//!
//! Prompt files are little-endian: the 8 magic bytes `FPPROMPT`, a `u32`
//! format version (1), `u64` rows, `u64` columns, then `rows * cols` `f64`
//! values in row-major order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fedprompt::backbone::{BackboneDims, Instance, TokenId};
use fedprompt::data::{ClientDataset, DatasetConfig, FederatedDataset, Heterogeneity, Split};
use fedprompt::{Matrix, Prompt};
use serde::{Deserialize, Serialize};

pub const PROMPT_MAGIC: &[u8; 8] = b"FPPROMPT";
pub const PROMPT_VERSION: u32 = 1;

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const META_FILE: &str = "dataset.json";

pub fn encode_prompt(p: &Prompt) -> Vec<u8> {
    let m = p.matrix();
    let mut buf = Vec::with_capacity(28 + 8 * m.as_slice().len());
    buf.extend_from_slice(PROMPT_MAGIC);
    buf.extend_from_slice(&PROMPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_prompt(bytes: &[u8]) -> Result<Prompt> {
    let header = 8 + 4 + 8 + 8;
    if bytes.len() < header || &bytes[..8] != PROMPT_MAGIC {
        bail!("not a prompt file (bad magic)");
    }
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != PROMPT_VERSION {
        bail!("unsupported prompt file version {version}");
    }
    let (rows, cols) = (u64_at(12) as usize, u64_at(20) as usize);
    let n = rows.checked_mul(cols).ok_or_else(|| anyhow!("prompt dims overflow"))?;
    if bytes.len() != header + 8 * n {
        bail!("prompt file is {} bytes, expected {} for {rows}x{cols}", bytes.len(), header + 8 * n);
    }
    let data = (0..n).map(|i| f64::from_le_bytes(bytes[header + 8 * i..header + 8 * i + 8].try_into().unwrap()));
    Ok(Prompt::new(Matrix::from_vec(rows, cols, data.collect())?)?)
}

pub fn write_prompt(path: &Path, p: &Prompt) -> Result<()> {
    fs::write(path, encode_prompt(p)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_prompt(path: &Path) -> Result<Prompt> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    decode_prompt(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// What a dataset directory was generated from; checked before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    /// Seed of the stream the dataset itself was drawn from.
    pub universe_seed: u64,
    pub backbone: BackboneDims,
    pub dataset: DatasetConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub client_id: u32,
    pub split: Split,
    pub role: Role,
    pub input: Vec<TokenId>,
    pub targets: Vec<Vec<TokenId>>,
    pub task: u32,
    pub task_type: u32,
}

pub fn dataset_records(d: &FederatedDataset) -> impl Iterator<Item = InstanceRecord> + '_ {
    d.all_clients().flat_map(|(split, c)| {
        let tagged = c.train.iter().map(|x| (Role::Train, x)).chain(c.eval.iter().map(|x| (Role::Eval, x)));
        tagged.map(move |(role, x)| InstanceRecord {
            client_id: c.client_id,
            split,
            role,
            input: x.input.clone(),
            targets: x.targets.clone(),
            task: x.task_id,
            task_type: x.task_type_id,
        })
    })
}

pub fn write_dataset(dir: &Path, d: &FederatedDataset, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(INSTANCES_FILE);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for r in dataset_records(d) {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)? + "\n";
    fs::write(&meta_path, text).with_context(|| format!("writing {}", meta_path.display()))
}

/// Rebuilds clients from JSONL records, keeping first-appearance order.
pub fn dataset_from_records(
    records: impl IntoIterator<Item = InstanceRecord>,
    heterogeneity: Heterogeneity,
    universe_seed: u64,
) -> Result<FederatedDataset> {
    let mut d = FederatedDataset {
        train_clients: vec![],
        val_clients: vec![],
        test_clients: vec![],
        heterogeneity,
        universe_seed,
    };
    for r in records {
        let clients = d.split_mut(r.split);
        let client = match clients.last_mut() {
            Some(c) if c.client_id == r.client_id => c,
            _ => {
                if clients.iter().any(|c| c.client_id == r.client_id) {
                    bail!("records of client {} are not contiguous", r.client_id);
                }
                clients.push(ClientDataset { client_id: r.client_id, train: vec![], eval: vec![] });
                clients.last_mut().unwrap()
            }
        };
        let inst = Instance {
            input: r.input,
            targets: r.targets,
            task_id: r.task,
            task_type_id: r.task_type,
        };
        match r.role {
            Role::Train => client.train.push(inst),
            Role::Eval => client.eval.push(inst),
        }
    }
    Ok(d)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, FederatedDataset)> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).with_context(|| format!("parsing {}", meta_path.display()))?;
    let path = dir.join(INSTANCES_FILE);
    let file = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: InstanceRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        records.push(r);
    }
    let d = dataset_from_records(records, meta.dataset.heterogeneity, meta.universe_seed)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok((meta, d))
}

/// Round-trippable float formatting for CSV cells.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).with_context(ctx)?;
    w.write_record(header).with_context(ctx)?;
    for row in rows {
        w.write_record(&row).with_context(ctx)?;
    }
    w.flush().with_context(ctx)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn prompt_bytes_round_trip(rows in 1..6usize, cols in 1..6usize, seed in any::<u64>()) {
            let mut rng = fedprompt::numerics::SeededRng::new(seed);
            let m: Matrix = fedprompt::numerics::gaussian_matrix(&mut rng, rows, cols, 3.0);
            let p = Prompt::new(m).unwrap();
            let back = decode_prompt(&encode_prompt(&p)).unwrap();
            prop_assert_eq!(back.shape(), p.shape());
            for (a, b) in back.matrix().as_slice().iter().zip(p.matrix().as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn prompt_layout() {
        let p = Prompt::new(Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let b = encode_prompt(&p);
        assert_eq!(&b[..8], b"FPPROMPT");
        assert_eq!(b[8..12], 1u32.to_le_bytes());
        assert_eq!(b[12..20], 1u64.to_le_bytes());
        assert_eq!(b[20..28], 2u64.to_le_bytes());
        assert_eq!(b[28..36], 1.0f64.to_le_bytes());
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn corrupt_prompt_rejected() {
        let p = Prompt::new(Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let mut b = encode_prompt(&p);
        assert!(decode_prompt(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_prompt(&b).is_err());
        let mut b = encode_prompt(&p);
        b[8] = 9;
        assert!(decode_prompt(&b).is_err());
    }

    #[test]
    fn interleaved_client_records_rejected() {
        let rec = |client_id| InstanceRecord {
            client_id,
            split: Split::Train,
            role: Role::Train,
            input: vec![1],
            targets: vec![vec![0]],
            task: 0,
            task_type: 0,
        };
        assert!(dataset_from_records([rec(0), rec(1), rec(0)], Heterogeneity::High, 0).is_err());
    }

    #[test]
    fn fmt_round_trips() {
        for x in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
