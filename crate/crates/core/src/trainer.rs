//! Alternating adversarial training: the discriminator steps every
//! iteration, the pixel critic enters the generator objective every
//! `pixel_critic_period` iterations, and the identity critic runs every
//! generator step.
//!
//! Runs are deterministic given the config seed, and a checkpoint resumes
//! bitwise: 100 iterations + resume + 100 equals 200 straight.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, ModelKind};
use crate::dataset::{AgeGroup, BatchStream, Dataset, PairingPolicy};
use crate::error::{CoreError, Result};
use crate::kvconfig::KvBlock;
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::objectives::{self, auto_scale_lambdas, FrozenEncoder, IdentityEncoder, LossWeights, WarmupStats};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::wavelet::WaveletFamily;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// Train with zero critic weights for `warmup_iters` iterations, then
    /// fix both weights from the observed loss magnitudes.
    Auto { warmup_iters: u64 },
    Fixed { lambda_pix: f64, lambda_id: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub target_group: AgeGroup,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pixel_critic_period: u64,
    pub seed: u64,
    pub use_fae: bool,
    pub use_wpt: bool,
    pub lambda: LambdaMode,
    /// Checkpoint every N iterations (0 = final checkpoint only).
    pub checkpoint_every: u64,
    pub base_channels: usize,
    pub pathway_channels: usize,
    pub num_residual_blocks: usize,
    pub wpt_levels: Vec<usize>,
    pub wavelet_family: WaveletFamily,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub id_encoder_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_group: AgeGroup::G51Plus,
            iterations: 1000,
            batch_size: 16,
            learning_rate: 1e-4,
            pixel_critic_period: 5,
            seed: 0,
            use_fae: true,
            use_wpt: true,
            lambda: LambdaMode::Auto { warmup_iters: 50 },
            checkpoint_every: 0,
            base_channels: 32,
            pathway_channels: 32,
            num_residual_blocks: 4,
            wpt_levels: vec![1, 2, 3],
            wavelet_family: WaveletFamily::Haar,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            id_encoder_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_critic_period == 0 {
            return Err(CoreError::Config("pixel_critic_period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.target_group == AgeGroup::Under30 {
            return Err(CoreError::Config(
                "target group must be one of 31-40, 41-50, 51+".into(),
            ));
        }
        if let LambdaMode::Auto { warmup_iters } = self.lambda {
            if warmup_iters == 0 {
                return Err(CoreError::Config("warmup_iters must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn generator_config(&self, resolution: usize, p: usize) -> GeneratorConfig {
        GeneratorConfig {
            resolution,
            base_channels: self.base_channels,
            num_residual_blocks: self.num_residual_blocks,
            attribute_dim: p,
            use_attribute_embedding: self.use_fae,
        }
    }

    fn discriminator_config(&self, resolution: usize, p: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution,
            wpt_levels: self.wpt_levels.clone(),
            pathway_channels: self.pathway_channels,
            attribute_dim: p,
            use_wpt: self.use_wpt,
            use_attribute_embedding: self.use_fae,
            wavelet_family: self.wavelet_family,
        }
    }

    pub fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set("target_group", self.target_group.label());
        kv.set("iterations", self.iterations);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", f64_hex(self.learning_rate));
        kv.set("pixel_critic_period", self.pixel_critic_period);
        kv.set("seed", self.seed);
        kv.set("use_fae", self.use_fae);
        kv.set("use_wpt", self.use_wpt);
        match self.lambda {
            LambdaMode::Auto { warmup_iters } => {
                kv.set("lambda_mode", "auto");
                kv.set("warmup_iters", warmup_iters);
            }
            LambdaMode::Fixed { lambda_pix, lambda_id } => {
                kv.set("lambda_mode", "fixed");
                kv.set("lambda_pix", f64_hex(lambda_pix));
                kv.set("lambda_id", f64_hex(lambda_id));
            }
        }
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("base_channels", self.base_channels);
        kv.set("pathway_channels", self.pathway_channels);
        kv.set("num_residual_blocks", self.num_residual_blocks);
        kv.set(
            "wpt_levels",
            self.wpt_levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        kv.set("wavelet_family", self.wavelet_family.name());
        kv.set("adam_beta1", f64_hex(self.adam_beta1));
        kv.set("adam_beta2", f64_hex(self.adam_beta2));
        kv.set("adam_epsilon", f64_hex(self.adam_epsilon));
        kv.set("id_encoder_seed", self.id_encoder_seed);
        kv
    }

    pub fn from_kv(kv: &KvBlock) -> Result<Self> {
        let lambda = match kv.require("lambda_mode")? {
            "auto" => LambdaMode::Auto {
                warmup_iters: kv.require_parsed("warmup_iters")?,
            },
            "fixed" => LambdaMode::Fixed {
                lambda_pix: hex_f64(kv.require("lambda_pix")?)?,
                lambda_id: hex_f64(kv.require("lambda_id")?)?,
            },
            other => return Err(CoreError::Config(format!("unknown lambda_mode '{other}'"))),
        };
        let levels_str = kv.require("wpt_levels")?;
        let wpt_levels = if levels_str.is_empty() {
            Vec::new()
        } else {
            levels_str
                .split(';')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| CoreError::Config(format!("bad wpt level '{s}'")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(TrainConfig {
            target_group: AgeGroup::parse(kv.require("target_group")?)?,
            iterations: kv.require_parsed("iterations")?,
            batch_size: kv.require_parsed("batch_size")?,
            learning_rate: hex_f64(kv.require("learning_rate")?)?,
            pixel_critic_period: kv.require_parsed("pixel_critic_period")?,
            seed: kv.require_parsed("seed")?,
            use_fae: kv.require_parsed("use_fae")?,
            use_wpt: kv.require_parsed("use_wpt")?,
            lambda,
            checkpoint_every: kv.require_parsed("checkpoint_every")?,
            base_channels: kv.require_parsed("base_channels")?,
            pathway_channels: kv.require_parsed("pathway_channels")?,
            num_residual_blocks: kv.require_parsed("num_residual_blocks")?,
            wpt_levels,
            wavelet_family: WaveletFamily::parse(kv.require("wavelet_family")?)?,
            adam_beta1: hex_f64(kv.require("adam_beta1")?)?,
            adam_beta2: hex_f64(kv.require("adam_beta2")?)?,
            adam_epsilon: hex_f64(kv.require("adam_epsilon")?)?,
            id_encoder_seed: kv.require_parsed("id_encoder_seed")?,
        })
    }
}

/// Exact f64 serialization via the bit pattern.
fn f64_hex(v: f64) -> String {
    format!("0x{:016x}", v.to_bits())
}

fn hex_f64(s: &str) -> Result<f64> {
    let hex = s
        .strip_prefix("0x")
        .ok_or_else(|| CoreError::Config(format!("expected 0x-prefixed bits, got '{s}'")))?;
    u64::from_str_radix(hex, 16)
        .map(f64::from_bits)
        .map_err(|_| CoreError::Config(format!("bad f64 bits '{s}'")))
}

/// Per-iteration loss values; `l_g` is the objective actually optimized
/// that iteration (the pixel term enters only on cadence iterations).
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_g: f64,
    pub l_gan_g: f64,
    pub l_pix: f64,
    pub l_id: f64,
    pub l_d: f64,
    pub pix_applied: bool,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iteration,L_G,L_GAN_G,L_pix,L_id,L_D";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.iteration, self.l_g, self.l_gan_g, self.l_pix, self.l_id, self.l_d
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct WarmupAccum {
    count: u64,
    sum_gan: f64,
    sum_pix: f64,
    sum_id: f64,
}

impl WarmupAccum {
    fn stats(&self) -> WarmupStats {
        let n = self.count.max(1) as f64;
        WarmupStats {
            mean_gan_g: self.sum_gan / n,
            mean_pix: self.sum_pix / n,
            mean_id: self.sum_id / n,
        }
    }
}

/// Live training state. Training math runs at f32.
pub struct Trainer {
    pub config: TrainConfig,
    pub iteration: u64,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub encoder: IdentityEncoder<f32>,
    pub weights: LossWeights,
    adam_g: AdamState<f32>,
    adam_d: AdamState<f32>,
    warmup: Option<WarmupAccum>,
    stream: BatchStream,
    last_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub generator_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub records: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let p = dataset.schema.dim();
        let generator = Generator::<f32>::new(
            config.generator_config(dataset.resolution, p),
            derive_seed(config.seed, 1),
        )?;
        let discriminator = Discriminator::<f32>::new(
            config.discriminator_config(dataset.resolution, p),
            derive_seed(config.seed, 2),
        )?;
        let encoder = IdentityEncoder::<f32>::new(config.id_encoder_seed);
        let adam_g = AdamState::new(
            &generator.params,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        );
        let adam_d = AdamState::new(
            &discriminator.params,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        );
        let stream = BatchStream::new(
            dataset,
            PairingPolicy {
                target_group: config.target_group,
                match_attributes: config.use_fae,
            },
            config.batch_size,
            derive_seed(config.seed, 3),
        )?;
        let (weights, warmup) = match config.lambda {
            LambdaMode::Auto { .. } => (
                LossWeights {
                    lambda_pix: 0.0,
                    lambda_id: 0.0,
                    auto_scale: true,
                },
                Some(WarmupAccum::default()),
            ),
            LambdaMode::Fixed { lambda_pix, lambda_id } => {
                (LossWeights::fixed(lambda_pix, lambda_id)?, None)
            }
        };
        Ok(Trainer {
            config,
            iteration: 0,
            generator,
            discriminator,
            encoder,
            weights,
            adam_g,
            adam_d,
            warmup,
            stream,
            last_checkpoint: None,
        })
    }

    /// One alternating step: discriminator first, then generator.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossRecord> {
        self.iteration += 1;
        let triple = self.stream.next_triple();
        let (x_young, a_young) = dataset.gather::<f32>(&triple.young)?;
        let (x_old, a_old) = dataset.gather::<f32>(&triple.old_positive)?;
        let (x_neg, a_neg) = dataset.gather::<f32>(&triple.young_negative)?;

        // discriminator step; the generator is bound frozen and its output
        // detached, so no gradient reaches it
        let l_d = {
            let mut g = crate::autodiff::Graph::<f32>::new();
            let gb = self.generator.bind(&mut g, false);
            let db = self.discriminator.bind(&mut g, true);
            let xv = g.constant(x_young.clone());
            let fake = self.generator.forward(&mut g, &gb, xv, &a_young)?;
            let fake = g.detach(fake);
            let ov = g.constant(x_old);
            let nv = g.constant(x_neg);
            let d_old = self.discriminator.forward(&mut g, &db, ov, &a_old)?;
            let d_fake = self.discriminator.forward(&mut g, &db, fake, &a_young)?;
            let d_young = self.discriminator.forward(&mut g, &db, nv, &a_neg)?;
            let loss = objectives::loss_gan_d(&mut g, d_old, d_fake, d_young);
            let value = g.value(loss).item()? as f64;
            self.check_finite("L_D", value)?;
            g.backward(loss)?;
            let grads = db.grads(&g);
            self.adam_d.step(&mut self.discriminator.params, &grads)?;
            value
        };

        // generator step against the frozen discriminator
        let pix_applied = self.iteration % self.config.pixel_critic_period == 0;
        let (l_g, l_gan_g, l_pix, l_id) = {
            let mut g = crate::autodiff::Graph::<f32>::new();
            let gb = self.generator.bind(&mut g, true);
            let db = self.discriminator.bind(&mut g, false);
            let eb = self.encoder.bind(&mut g);
            let xv = g.constant(x_young);
            let fake = self.generator.forward(&mut g, &gb, xv, &a_young)?;
            let d_fake = self.discriminator.forward(&mut g, &db, fake, &a_young)?;
            let gan = objectives::loss_gan_g(&mut g, d_fake);
            let pix = objectives::loss_pix(&mut g, fake, xv)?;
            let id = objectives::loss_id(&mut g, fake, xv, &self.encoder, &eb)?;
            let in_warmup = self.warmup.is_some();
            let total = objectives::total_loss_g(
                &mut g,
                gan,
                (pix_applied && !in_warmup).then_some(pix),
                (!in_warmup).then_some(id),
                &self.weights,
            );
            let values = (
                g.value(total).item()? as f64,
                g.value(gan).item()? as f64,
                g.value(pix).item()? as f64,
                g.value(id).item()? as f64,
            );
            self.check_finite("L_G", values.0)?;
            g.backward(total)?;
            let grads = gb.grads(&g);
            self.adam_g.step(&mut self.generator.params, &grads)?;
            values
        };

        if let Some(w) = &mut self.warmup {
            w.count += 1;
            w.sum_gan += l_gan_g;
            w.sum_pix += l_pix;
            w.sum_id += l_id;
            if let LambdaMode::Auto { warmup_iters } = self.config.lambda {
                if w.count >= warmup_iters {
                    self.weights = auto_scale_lambdas(&w.stats())?;
                    self.warmup = None;
                }
            }
        }

        Ok(LossRecord {
            iteration: self.iteration,
            l_g,
            l_gan_g,
            l_pix,
            l_id,
            l_d,
            pix_applied,
        })
    }

    fn check_finite(&self, what: &str, value: f64) -> Result<()> {
        if value.is_finite() {
            return Ok(());
        }
        let last = self
            .last_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into());
        Err(CoreError::Training(format!(
            "{what} is {value} at iteration {}; last good checkpoint: {last}",
            self.iteration
        )))
    }

    /// Run to `config.iterations`, writing the loss CSV and checkpoints
    /// under `out_dir`.
    pub fn run(&mut self, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir)?;
        let csv_path = out_dir.join("losses.csv");
        let mut csv = std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&csv_path)?,
        );
        if self.iteration == 0 {
            writeln!(csv, "{}", LossRecord::CSV_HEADER)?;
        }
        let mut records = Vec::new();
        while self.iteration < self.config.iterations {
            let record = self.train_step(dataset)?;
            writeln!(csv, "{}", record.csv_row())?;
            records.push(record);
            if self.config.checkpoint_every > 0
                && record.iteration % self.config.checkpoint_every == 0
                && record.iteration < self.config.iterations
            {
                let path = out_dir.join(format!("state-{:06}.agwc", record.iteration));
                self.save_checkpoint(&path, dataset)?;
                self.last_checkpoint = Some(path);
            }
        }
        csv.flush()?;
        let final_checkpoint = out_dir.join("state-final.agwc");
        self.save_checkpoint(&final_checkpoint, dataset)?;
        self.last_checkpoint = Some(final_checkpoint.clone());
        let generator_checkpoint = out_dir.join("generator.agwc");
        self.generator.save(&generator_checkpoint)?;
        Ok(TrainOutcome {
            final_checkpoint,
            generator_checkpoint,
            loss_csv: csv_path,
            records,
        })
    }

    /// Serialize the complete resumable state.
    pub fn save_checkpoint(&self, path: &Path, dataset: &Dataset) -> Result<()> {
        let mut kv = self.config.to_kv();
        kv.set("state.iteration", self.iteration);
        kv.set("state.lambda_pix", f64_hex(self.weights.lambda_pix));
        kv.set("state.lambda_id", f64_hex(self.weights.lambda_id));
        kv.set("state.lambda_auto", self.weights.auto_scale);
        kv.set("state.adam_g_step", self.adam_g.step);
        kv.set("state.adam_d_step", self.adam_d.step);
        kv.set("state.resolution", dataset.resolution);
        kv.set("state.attributes", dataset.schema.to_spec_string());
        kv.set("state.dataset_len", dataset.samples.len());
        if let Some(w) = &self.warmup {
            kv.set("state.warmup_count", w.count);
            kv.set("state.warmup_sum_gan", f64_hex(w.sum_gan));
            kv.set("state.warmup_sum_pix", f64_hex(w.sum_pix));
            kv.set("state.warmup_sum_id", f64_hex(w.sum_id));
        }

        let mut tensors = ParamSet::<f32>::new();
        copy_params(&mut tensors, "g.", &self.generator.params)?;
        copy_params(&mut tensors, "d.", &self.discriminator.params)?;
        copy_moments(&mut tensors, "adam_g.", &self.adam_g, &self.generator.params)?;
        copy_moments(&mut tensors, "adam_d.", &self.adam_d, &self.discriminator.params)?;
        checkpoint::save(path, ModelKind::TrainState, &kv, &tensors)
    }

    /// Restore from a training checkpoint; the batch stream is replayed to
    /// the checkpointed iteration so batches continue exactly where the
    /// original run would have.
    pub fn resume(path: &Path, dataset: &Dataset) -> Result<Trainer> {
        let ck = checkpoint::load::<f32>(path)?;
        if ck.kind != ModelKind::TrainState {
            return Err(CoreError::Format {
                path: path.display().to_string(),
                detail: format!("expected a training checkpoint, found {:?}", ck.kind),
            });
        }
        let config = TrainConfig::from_kv(&ck.config)?;
        let resolution: usize = ck.config.require_parsed("state.resolution")?;
        let schema_str = ck.config.require("state.attributes")?;
        let dataset_len: usize = ck.config.require_parsed("state.dataset_len")?;
        if dataset.resolution != resolution
            || dataset.schema.to_spec_string() != schema_str
            || dataset.samples.len() != dataset_len
        {
            return Err(CoreError::Data(format!(
                "dataset does not match the checkpointed run \
                 (resolution {} vs {resolution}, {} vs {dataset_len} samples)",
                dataset.resolution,
                dataset.samples.len()
            )));
        }

        let mut trainer = Trainer::new(config, dataset)?;
        let iteration: u64 = ck.config.require_parsed("state.iteration")?;

        restore_params(&mut trainer.generator.params, "g.", &ck.tensors, path)?;
        restore_params(&mut trainer.discriminator.params, "d.", &ck.tensors, path)?;
        let g_step: u64 = ck.config.require_parsed("state.adam_g_step")?;
        let d_step: u64 = ck.config.require_parsed("state.adam_d_step")?;
        restore_moments(&mut trainer.adam_g, g_step, "adam_g.", &ck.tensors, &trainer.generator.params, path)?;
        restore_moments(&mut trainer.adam_d, d_step, "adam_d.", &ck.tensors, &trainer.discriminator.params, path)?;

        trainer.weights = LossWeights {
            lambda_pix: hex_f64(ck.config.require("state.lambda_pix")?)?,
            lambda_id: hex_f64(ck.config.require("state.lambda_id")?)?,
            auto_scale: ck.config.require_parsed("state.lambda_auto")?,
        };
        trainer.warmup = match ck.config.get("state.warmup_count") {
            Some(_) => Some(WarmupAccum {
                count: ck.config.require_parsed("state.warmup_count")?,
                sum_gan: hex_f64(ck.config.require("state.warmup_sum_gan")?)?,
                sum_pix: hex_f64(ck.config.require("state.warmup_sum_pix")?)?,
                sum_id: hex_f64(ck.config.require("state.warmup_sum_id")?)?,
            }),
            None => None,
        };
        trainer.iteration = iteration;
        trainer.stream.skip(iteration);
        trainer.last_checkpoint = Some(path.to_path_buf());
        Ok(trainer)
    }
}

fn copy_params(dst: &mut ParamSet<f32>, prefix: &str, src: &ParamSet<f32>) -> Result<()> {
    for (name, t) in src.iter() {
        dst.insert(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(())
}

fn copy_moments(
    dst: &mut ParamSet<f32>,
    prefix: &str,
    adam: &AdamState<f32>,
    params: &ParamSet<f32>,
) -> Result<()> {
    let (first, second) = adam.moments();
    for (i, (name, t)) in params.iter().enumerate() {
        dst.insert(
            format!("{prefix}m.{name}"),
            Tensor::new(t.shape().to_vec(), first[i].clone())?,
        )?;
        dst.insert(
            format!("{prefix}v.{name}"),
            Tensor::new(t.shape().to_vec(), second[i].clone())?,
        )?;
    }
    Ok(())
}

fn restore_params(
    dst: &mut ParamSet<f32>,
    prefix: &str,
    loaded: &ParamSet<f32>,
    path: &Path,
) -> Result<()> {
    for i in 0..dst.len() {
        let name = format!("{prefix}{}", dst.name_at(i));
        let t = loaded.get(&name).ok_or_else(|| CoreError::Format {
            path: path.display().to_string(),
            detail: format!("missing tensor '{name}'"),
        })?;
        if t.shape() != dst.tensor_at(i).shape() {
            return Err(CoreError::Format {
                path: path.display().to_string(),
                detail: format!("tensor '{name}' shape mismatch"),
            });
        }
        *dst.tensor_at_mut(i) = t.clone();
    }
    Ok(())
}

fn restore_moments(
    adam: &mut AdamState<f32>,
    step: u64,
    prefix: &str,
    loaded: &ParamSet<f32>,
    params: &ParamSet<f32>,
    path: &Path,
) -> Result<()> {
    let mut first = Vec::with_capacity(params.len());
    let mut second = Vec::with_capacity(params.len());
    for (name, _) in params.iter() {
        for (tag, out) in [("m", &mut first), ("v", &mut second)] {
            let key = format!("{prefix}{tag}.{name}");
            let t = loaded.get(&key).ok_or_else(|| CoreError::Format {
                path: path.display().to_string(),
                detail: format!("missing tensor '{key}'"),
            })?;
            out.push(t.data().to_vec());
        }
    }
    adam.restore(step, first, second)
}

/// Train from scratch (convenience wrapper).
pub fn train(config: TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run(dataset, out_dir)
}
