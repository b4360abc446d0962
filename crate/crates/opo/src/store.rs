//! On-disk layouts: dataset directories, model checkpoints and DA weights.
//!
//! A dataset directory holds `manifest.txt` (`split<TAB>image<TAB>theta` per
//! instance), one tensor file per image and cost vector, `dataset.txt` with
//! the generating configuration and `config.hash`, the SHA-256 of
//! `dataset.txt`. A checkpoint directory holds `model.txt`, one tensor file
//! per parameter and `index.txt` (`name<TAB>file` per parameter).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use opo_core::datagen::{DatasetConfig, DatasetSplit, Instance, Split};
use opo_core::model::{ModelConfig, ModelParams};
use opo_core::Tensor;
use sha2::{Digest, Sha256};

use crate::format::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET_DESC: &str = "dataset.txt";
pub const HASH_FILE: &str = "config.hash";
pub const INDEX: &str = "index.txt";
pub const MODEL_DESC: &str = "model.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn describe_dataset(cfg: &DatasetConfig) -> String {
    format!(
        "k = {}\nnum_classes = {}\ntrain = {}\nval = {}\ntest = {}\nseed = {}\n",
        cfg.k, cfg.num_classes, cfg.train, cfg.val, cfg.test, cfg.seed
    )
}

fn split_from_name(name: &str) -> Option<Split> {
    Split::ALL.into_iter().find(|s| s.name() == name)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("missing or unreadable file {}", path.display()))
}

/// Parses `key = value` lines into pairs, skipping blanks.
fn pairs(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn field<T: std::str::FromStr>(pairs: &[(String, String)], key: &str, file: &Path) -> Result<T> {
    let raw = pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| anyhow!("{}: missing `{key}`", file.display()))?;
    raw.parse()
        .map_err(|_| anyhow!("{}: bad value `{raw}` for `{key}`", file.display()))
}

/// Whether `dir` already holds a complete dataset generated from `cfg`.
pub fn dataset_up_to_date(dir: &Path, cfg: &DatasetConfig) -> bool {
    let expected = sha256_hex(describe_dataset(cfg).as_bytes());
    let Ok(stored) = fs::read_to_string(dir.join(HASH_FILE)) else {
        return false;
    };
    if stored.trim() != expected {
        return false;
    }
    let Ok(manifest) = fs::read_to_string(dir.join(MANIFEST)) else {
        return false;
    };
    manifest
        .lines()
        .flat_map(|l| l.split('\t').skip(1))
        .all(|f| dir.join(f).is_file())
}

/// Writes every instance of `data`, the manifest and the config hash.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig, data: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = String::new();
    for split in Split::ALL {
        for (i, inst) in data.get(split).iter().enumerate() {
            let image = format!("{}_{i:05}_image.opot", split.name());
            let theta = format!("{}_{i:05}_theta.opot", split.name());
            write_tensor(&dir.join(&image), &inst.image)?;
            write_tensor(&dir.join(&theta), &inst.theta)?;
            let _ = writeln!(manifest, "{}\t{image}\t{theta}", split.name());
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    let desc = describe_dataset(cfg);
    fs::write(dir.join(DATASET_DESC), &desc)?;
    fs::write(dir.join(HASH_FILE), format!("{}\n", sha256_hex(desc.as_bytes())))?;
    Ok(())
}

/// Loads a dataset directory. Instances carry no terrain grid; the split
/// seed comes from `dataset.txt` when present and is 0 otherwise.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join(MANIFEST);
    let manifest = read_to_string(&manifest_path).context("run the `dataset` command first")?;
    let seed = fs::read_to_string(dir.join(DATASET_DESC))
        .ok()
        .and_then(|t| field(&pairs(&t), "seed", &dir.join(DATASET_DESC)).ok())
        .unwrap_or(0);
    let mut data = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (n, line) in manifest.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let [split, image, theta] = cols[..] else {
            bail!("{}:{}: expected three tab-separated columns", manifest_path.display(), n + 1);
        };
        let split = split_from_name(split)
            .ok_or_else(|| anyhow!("{}:{}: unknown split `{split}`", manifest_path.display(), n + 1))?;
        let inst = Instance {
            image: read_tensor(&dir.join(image))?,
            theta: read_tensor(&dir.join(theta))?,
            grid: None,
        };
        if inst.image.rank() != 3 || inst.theta.numel() != inst.k() * inst.k() {
            bail!("{}: image and cost shapes disagree", dir.join(image).display());
        }
        match split {
            Split::Train => data.train.push(inst),
            Split::Val => data.val.push(inst),
            Split::Test => data.test.push(inst),
        }
    }
    Ok(data)
}

fn describe_model(cfg: &ModelConfig) -> String {
    format!(
        "k = {}\nd_model = {}\nblocks = {}\nheads = {}\nmlp_ratio = {}\nmix_width = {}\nflatten_class_token = {}\n",
        cfg.k, cfg.d_model, cfg.blocks, cfg.heads, cfg.mlp_ratio, cfg.mix_width, cfg.flatten_class_token
    )
}

pub fn write_checkpoint(dir: &Path, params: &ModelParams) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let file = format!("{name}.opot");
        write_tensor(&dir.join(&file), t)?;
        let _ = writeln!(index, "{name}\t{file}");
    }
    fs::write(dir.join(INDEX), index)?;
    fs::write(dir.join(MODEL_DESC), describe_model(params.config()))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<ModelParams> {
    let desc_path = dir.join(MODEL_DESC);
    let p = pairs(&read_to_string(&desc_path).context("no checkpoint here; run `pretrain` first")?);
    let cfg = ModelConfig {
        k: field(&p, "k", &desc_path)?,
        d_model: field(&p, "d_model", &desc_path)?,
        blocks: field(&p, "blocks", &desc_path)?,
        heads: field(&p, "heads", &desc_path)?,
        mlp_ratio: field(&p, "mlp_ratio", &desc_path)?,
        mix_width: field(&p, "mix_width", &desc_path)?,
        flatten_class_token: field(&p, "flatten_class_token", &desc_path)?,
    };
    let index_path = dir.join(INDEX);
    let mut named = Vec::new();
    for (n, line) in read_to_string(&index_path)?.lines().enumerate() {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected `name<TAB>file`", index_path.display(), n + 1))?;
        named.push((name.to_string(), read_tensor(&dir.join(file))?));
    }
    Ok(ModelParams::from_named(cfg, named)?)
}

pub fn write_vector(path: &Path, v: &[f32]) -> Result<()> {
    Ok(write_tensor(path, &Tensor::from_vec(v.to_vec()))?)
}

pub fn read_vector(path: &Path) -> Result<Vec<f32>> {
    let t = read_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(t.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use opo_core::datagen::generate_dataset;

    #[test]
    fn dataset_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            k: 2,
            num_classes: 3,
            train: 3,
            val: 1,
            test: 1,
            seed: 5,
        };
        let data = generate_dataset(&cfg).unwrap();
        assert!(!dataset_up_to_date(dir.path(), &cfg));
        write_dataset(dir.path(), &cfg, &data).unwrap();
        assert!(dataset_up_to_date(dir.path(), &cfg));
        assert!(!dataset_up_to_date(dir.path(), &DatasetConfig { seed: 6, ..cfg }));
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.seed, 5);
        for split in Split::ALL {
            let (a, b) = (data.get(split), back.get(split));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.image, y.image);
                assert_eq!(x.theta, y.theta);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ..ModelConfig::new(2)
        };
        let params = ModelParams::init(cfg, 3).unwrap();
        write_checkpoint(dir.path(), &params).unwrap();
        assert_eq!(read_checkpoint(dir.path()).unwrap(), params);
        let err = read_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert!(format!("{err:#}").contains("model.txt"), "{err:#}");
    }
}
