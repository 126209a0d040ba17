//! Run configuration: a flat key=value file, `--set` overrides, and a
//! registry of every known key with its default and owning module.
//!
//! Unknown keys are errors. The effective configuration is echoed into
//! every output directory so a run can be reproduced from its artifacts
//! alone; output directories are named by the config hash, never by time.

use agewave_core::kvconfig::KvBlock;
use agewave_core::trainer::{LambdaMode, TrainConfig};
use agewave_core::wavelet::WaveletFamily;
use agewave_core::AgeGroup;
use anyhow::{anyhow, bail, Context, Result};
use std::path::{Path, PathBuf};

pub struct KeySpec {
    pub key: &'static str,
    pub owner: &'static str,
    /// None = no silent default; the command errors if the key is needed
    /// but absent.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "data_dir", owner: "dataset", default: None, help: "dataset directory (dataset.cfg + manifest.csv + images/)" },
    KeySpec { key: "resolution", owner: "dataset", default: None, help: "square image size, power of two; required for synth, derived from data elsewhere" },
    KeySpec { key: "n_per_cell", owner: "dataset", default: Some("50"), help: "synthetic samples per (attribute, age-group) cell" },
    KeySpec { key: "label_flip_prob", owner: "dataset", default: Some("0"), help: "probability of flipping a synthetic manifest label" },
    KeySpec { key: "attributes", owner: "dataset", default: None, help: "attribute schema, e.g. gender:circle|square,race:A|B (transform only)" },
    KeySpec { key: "attribute_values", owner: "dataset", default: None, help: "comma-separated attribute values for transform inputs, e.g. circle,A" },
    KeySpec { key: "target_group", owner: "trainer", default: Some("51+"), help: "age group to translate 30- inputs into (31-40, 41-50, 51+)" },
    KeySpec { key: "iterations", owner: "trainer", default: Some("1000"), help: "training iterations" },
    KeySpec { key: "batch_size", owner: "trainer", default: Some("16"), help: "samples per batch" },
    KeySpec { key: "lr", owner: "trainer", default: Some("1e-4"), help: "Adam learning rate" },
    KeySpec { key: "pixel_critic_period", owner: "trainer", default: Some("5"), help: "apply the pixel critic every N iterations" },
    KeySpec { key: "checkpoint_every", owner: "trainer", default: Some("0"), help: "checkpoint every N iterations (0 = final only)" },
    KeySpec { key: "adam_beta1", owner: "trainer", default: Some("0.5"), help: "Adam first-moment decay" },
    KeySpec { key: "adam_beta2", owner: "trainer", default: Some("0.999"), help: "Adam second-moment decay" },
    KeySpec { key: "adam_epsilon", owner: "trainer", default: Some("1e-8"), help: "Adam epsilon" },
    KeySpec { key: "use_fae", owner: "networks", default: Some("true"), help: "embed attribute vectors in both networks (ablation: false)" },
    KeySpec { key: "use_wpt", owner: "networks", default: Some("true"), help: "wavelet front end in the discriminator (ablation: false)" },
    KeySpec { key: "base_channels", owner: "networks", default: Some("32"), help: "generator encoder width" },
    KeySpec { key: "pathway_channels", owner: "networks", default: Some("32"), help: "discriminator pathway width" },
    KeySpec { key: "num_residual_blocks", owner: "networks", default: Some("4"), help: "bottleneck residual blocks" },
    KeySpec { key: "wpt_levels", owner: "networks", default: Some("1;2;3"), help: "decomposition levels feeding discriminator pathways" },
    KeySpec { key: "wavelet_family", owner: "wavelet", default: Some("haar"), help: "haar or db2 (db2: standalone transform only)" },
    KeySpec { key: "levels", owner: "wavelet", default: Some("3"), help: "decomposition depth for the wpt command" },
    KeySpec { key: "lambda_mode", owner: "objectives", default: Some("auto"), help: "auto (warm-up scaled) or fixed critic weights" },
    KeySpec { key: "lambda_pix", owner: "objectives", default: Some("0.1"), help: "pixel critic weight when lambda_mode=fixed" },
    KeySpec { key: "lambda_id", owner: "objectives", default: Some("0.1"), help: "identity critic weight when lambda_mode=fixed" },
    KeySpec { key: "warmup_iters", owner: "objectives", default: Some("50"), help: "warm-up window for lambda auto-scaling" },
    KeySpec { key: "id_encoder_seed", owner: "objectives", default: Some("7"), help: "seed of the frozen identity encoder" },
    KeySpec { key: "eval_samples", owner: "eval", default: Some("64"), help: "young samples used for evaluation metrics" },
    KeySpec { key: "write_grid", owner: "eval", default: Some("true"), help: "write an input|output comparison image during eval" },
    KeySpec { key: "seed", owner: "cli", default: Some("0"), help: "master seed; every command is deterministic given it" },
];

/// Help block listing every key with default and owner.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (set in --config file or via --set key=value):\n");
    for k in KEYS {
        let default = k.default.map_or("(required)".to_string(), |d| format!("default {d}"));
        out.push_str(&format!("  {:<22} [{:<10}] {:<16} {}\n", k.key, k.owner, default, k.help));
    }
    out
}

/// Effective configuration for one invocation.
pub struct RunConfig {
    values: KvBlock,
}

impl RunConfig {
    pub fn build(config_file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut values = match config_file {
            Some(p) => KvBlock::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => KvBlock::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got '{s}'"))?;
            values.set(k.trim(), v.trim());
        }
        if let Some(seed) = seed {
            values.set("seed", seed);
        }
        for key in values.keys() {
            if !KEYS.iter().any(|k| k.key == key) {
                bail!("unknown config key '{key}' (see --help for the key table)");
            }
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.values.get(key) {
            return Some(v.to_string());
        }
        KEYS.iter()
            .find(|k| k.key == key)
            .and_then(|k| k.default)
            .map(|s| s.to_string())
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get(key).ok_or_else(|| {
            anyhow!("missing required config key '{key}'; set it explicitly with --set {key}=...")
        })
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.require(key)?;
        s.parse::<T>()
            .map_err(|_| anyhow!("config key '{key}': cannot parse '{s}'"))
    }

    pub fn parsed_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| anyhow!("config key '{key}': cannot parse '{s}'")),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        let s = self.require(key)?;
        match s.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(anyhow!("config key '{key}': expected a boolean, got '{other}'")),
        }
    }

    /// Every key with its effective value (defaults included); this is
    /// what gets echoed and hashed.
    pub fn effective(&self) -> KvBlock {
        let mut out = KvBlock::new();
        for k in KEYS {
            if let Some(v) = self.get(k.key) {
                out.set(k.key, v);
            }
        }
        out
    }

    pub fn hash_hex(&self) -> String {
        self.effective().hash_hex()
    }

    /// Resolve the output directory: explicit --out, or a hash-named
    /// directory under ./runs. Creates it and echoes the config inside.
    pub fn resolve_out_dir(&self, out: Option<&Path>, command: &str) -> Result<PathBuf> {
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from("runs").join(format!("{command}-{}", self.hash_hex())),
        };
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        self.effective()
            .save(&dir.join("config.cfg"))
            .context("echoing effective config")?;
        Ok(dir)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let lambda = match self.require("lambda_mode")?.as_str() {
            "auto" => LambdaMode::Auto {
                warmup_iters: self.parsed("warmup_iters")?,
            },
            "fixed" => LambdaMode::Fixed {
                lambda_pix: self.parsed("lambda_pix")?,
                lambda_id: self.parsed("lambda_id")?,
            },
            other => bail!("lambda_mode must be auto or fixed, got '{other}'"),
        };
        let levels_str = self.require("wpt_levels")?;
        let wpt_levels = levels_str
            .split([';', ','])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| anyhow!("bad wpt level '{s}'")))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainConfig {
            target_group: AgeGroup::parse(&self.require("target_group")?)?,
            iterations: self.parsed("iterations")?,
            batch_size: self.parsed("batch_size")?,
            learning_rate: self.parsed("lr")?,
            pixel_critic_period: self.parsed("pixel_critic_period")?,
            seed: self.parsed("seed")?,
            use_fae: self.flag("use_fae")?,
            use_wpt: self.flag("use_wpt")?,
            lambda,
            checkpoint_every: self.parsed("checkpoint_every")?,
            base_channels: self.parsed("base_channels")?,
            pathway_channels: self.parsed("pathway_channels")?,
            num_residual_blocks: self.parsed("num_residual_blocks")?,
            wpt_levels,
            wavelet_family: WaveletFamily::parse(&self.require("wavelet_family")?)?,
            adam_beta1: self.parsed("adam_beta1")?,
            adam_beta2: self.parsed("adam_beta2")?,
            adam_epsilon: self.parsed("adam_epsilon")?,
            id_encoder_seed: self.parsed("id_encoder_seed")?,
        })
    }
}
