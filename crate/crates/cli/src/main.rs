//! `agewave`: single entry point for dataset generation, training,
//! inference, transform inspection, gradient verification, evaluation,
//! and the ablation grid.

mod config;

use std::path::{Path, PathBuf};

use agewave_core::checkpoint::{self, ModelKind};
use agewave_core::dataset::{generate_synthetic, Dataset, SyntheticAgingSpec};
use agewave_core::eval::{self, EvalReport};
use agewave_core::imageio;
use agewave_core::objectives::IdentityEncoder;
use agewave_core::trainer::Trainer;
use agewave_core::wavelet::{wpt_forward, WaveletFamily, WaveletFilterPair};
use agewave_core::{AgeGroup, Generator};
use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "agewave", version, about = "Attribute-aware aging translation with a wavelet-packet discriminator")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key (repeatable): --set key=value.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,

    /// Master seed (overrides the seed config key).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: runs/<command>-<config hash>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic aging dataset.
    Synth,
    /// Train one age mapping on a dataset directory.
    Train,
    /// Run a trained generator over input images.
    Transform {
        /// Generator checkpoint (generator.agwc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input images (PPM/PGM/PNG).
        images: Vec<PathBuf>,
    },
    /// Decompose an image and write subband images plus raw tensors.
    Wpt {
        image: PathBuf,
    },
    /// Verify every differentiable op and loss against finite differences.
    Gradcheck,
    /// Evaluate trained checkpoints on a dataset.
    Eval {
        /// Training-state or generator checkpoints (repeatable).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Train and evaluate all four ablation cells.
    Ablate,
}

fn main() {
    use clap::FromArgMatches;
    let matches = Cli::command().after_help(config::keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("agewave: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::build(cli.config.as_deref(), &cli.sets, cli.seed)?;
    match cli.command {
        Command::Synth => cmd_synth(&rc, cli.out.as_deref()),
        Command::Train => cmd_train(&rc, cli.out.as_deref()),
        Command::Transform { checkpoint, images } => {
            cmd_transform(&rc, cli.out.as_deref(), &checkpoint, &images)
        }
        Command::Wpt { image } => cmd_wpt(&rc, cli.out.as_deref(), &image),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Eval { checkpoints } => cmd_eval(&rc, cli.out.as_deref(), &checkpoints),
        Command::Ablate => cmd_ablate(&rc, cli.out.as_deref()),
    }
}

fn cmd_synth(rc: &RunConfig, out: Option<&Path>) -> Result<()> {
    let resolution: usize = rc
        .parsed_opt("resolution")?
        .ok_or_else(|| anyhow!("synth needs an explicit resolution (--set resolution=64)"))?;
    let spec = SyntheticAgingSpec {
        resolution,
        label_flip_prob: rc.parsed("label_flip_prob")?,
        ..Default::default()
    };
    let n_per_cell: usize = rc.parsed("n_per_cell")?;
    let seed: u64 = rc.parsed("seed")?;
    let out_dir = rc.resolve_out_dir(out, "synth")?;
    let dataset = generate_synthetic(&spec, n_per_cell, seed)?;
    dataset.write_to_dir(&out_dir)?;
    println!(
        "wrote {} samples at {}x{} to {}",
        dataset.samples.len(),
        resolution,
        resolution,
        out_dir.display()
    );
    Ok(())
}

fn load_dataset(rc: &RunConfig) -> Result<Dataset> {
    let dir = rc.require("data_dir")?;
    Dataset::load(Path::new(&dir)).with_context(|| format!("loading dataset from {dir}"))
}

fn cmd_train(rc: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(rc)?;
    let config = rc.train_config()?;
    let out_dir = rc.resolve_out_dir(out, "train")?;
    let mut trainer = Trainer::new(config, &dataset)?;
    let outcome = trainer.run(&dataset, &out_dir)?;
    let last = outcome.records.last();
    println!(
        "trained {} iterations (target {}); final L_G {:.4} L_D {:.4}",
        trainer.iteration,
        trainer.config.target_group.label(),
        last.map_or(f64::NAN, |r| r.l_g),
        last.map_or(f64::NAN, |r| r.l_d),
    );
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("generator:  {}", outcome.generator_checkpoint.display());
    println!("losses:     {}", outcome.loss_csv.display());
    Ok(())
}

fn cmd_transform(
    rc: &RunConfig,
    out: Option<&Path>,
    checkpoint: &Path,
    images: &[PathBuf],
) -> Result<()> {
    if images.is_empty() {
        bail!("transform needs at least one input image");
    }
    let generator = Generator::<f32>::load(checkpoint)?;
    let resolution = generator.config.resolution;
    let schema_spec = rc.require("attributes")?;
    let schema = agewave_core::AttributeSchema::parse(&schema_spec)?;
    if schema.dim() != generator.config.attribute_dim {
        bail!(
            "attribute schema dimension {} does not match the checkpoint's p = {}",
            schema.dim(),
            generator.config.attribute_dim
        );
    }
    let values_str = rc.require("attribute_values")?;
    let values: Vec<&str> = values_str.split(',').map(|s| s.trim()).collect();
    let alpha = schema.encode(&values)?;
    let out_dir = rc.resolve_out_dir(out, "transform")?;

    for path in images {
        let rgb = imageio::decode_image(path)?;
        let rgb = imageio::resize_bilinear(&rgb, resolution, resolution);
        let tensor = imageio::to_tensor::<f32>(&rgb)
            .reshape(vec![1, 3, resolution, resolution])?;
        let aged = generator.generate(&tensor, std::slice::from_ref(&alpha))?;
        let aged = aged.reshape(vec![3, resolution, resolution])?;
        let out_img = imageio::from_tensor(&aged)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into());
        let out_path = out_dir.join(format!("{stem}_aged.ppm"));
        imageio::write_ppm(&out_path, &out_img)?;
        println!("{} -> {}", path.display(), out_path.display());
    }
    Ok(())
}

fn cmd_wpt(rc: &RunConfig, out: Option<&Path>, image: &Path) -> Result<()> {
    let levels: usize = rc.parsed("levels")?;
    let family = WaveletFamily::parse(&rc.require("wavelet_family")?)?;
    let filters = WaveletFilterPair::new(family);
    let rgb = imageio::decode_image(image)?;
    let tensor = imageio::to_tensor::<f32>(&rgb);
    let s = tensor.shape().to_vec();
    let as4 = tensor.reshape(vec![1, s[0], s[1], s[2]])?;
    let packets = wpt_forward(&as4, levels, &filters)?;
    let out_dir = rc.resolve_out_dir(out, "wpt")?;

    let mut written = 0usize;
    for packet in &packets {
        for (band_idx, band) in packet.subbands.iter().enumerate() {
            let bs = band.shape().to_vec();
            let (h, w) = (bs[2], bs[3]);
            // channel-mean of the subband as a grayscale rendering
            let mut plane = vec![0.0f32; h * w];
            for c in 0..bs[1] {
                for (i, slot) in plane.iter_mut().enumerate() {
                    *slot += band.data()[(c * h * w) + i] / bs[1] as f32;
                }
            }
            let bytes = imageio::normalize_plane_to_bytes(&plane);
            let stem = format!("level{}_band{:03}", packet.level, band_idx);
            imageio::write_pgm(&out_dir.join(format!("{stem}.pgm")), w, h, &bytes)?;
            band.save(&out_dir.join(format!("{stem}.agwt")))?;
            written += 1;
        }
    }
    println!(
        "decomposed {} to level {levels} ({} subbands) in {}",
        image.display(),
        written,
        out_dir.display()
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let seeds = agewave_core::gradcheck::default_seeds();
    let reports = agewave_core::gradcheck::run_all(&seeds);
    let mut failures = 0;
    println!("{:<26} {:>14} {:>8}", "op", "max rel err", "status");
    for r in &reports {
        println!(
            "{:<26} {:>14.3e} {:>8}",
            r.name,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} gradient check(s) exceeded tolerance");
    }
    println!("all {} checks passed over {} seeds", reports.len(), seeds.len());
    Ok(())
}

/// A checkpoint for evaluation: either a full training state (carries its
/// own target group) or a bare generator (target group from config).
fn load_for_eval(
    path: &Path,
    dataset: &Dataset,
    rc: &RunConfig,
) -> Result<(Generator<f32>, AgeGroup, u64)> {
    let ck = checkpoint::load::<f32>(path)?;
    match ck.kind {
        ModelKind::TrainState => {
            let trainer = Trainer::resume(path, dataset)?;
            let group = trainer.config.target_group;
            let seed = trainer.config.seed;
            Ok((trainer.generator, group, seed))
        }
        ModelKind::Generator => {
            let generator = Generator::<f32>::load(path)?;
            let group = AgeGroup::parse(&rc.require("target_group")?)?;
            Ok((generator, group, rc.parsed("seed")?))
        }
        ModelKind::Discriminator => {
            bail!("{} is a discriminator checkpoint; evaluation needs a generator or training state", path.display())
        }
    }
}

fn cmd_eval(rc: &RunConfig, out: Option<&Path>, checkpoints: &[PathBuf]) -> Result<()> {
    let dataset = load_dataset(rc)?;
    let n_eval: usize = rc.parsed("eval_samples")?;
    let encoder = IdentityEncoder::<f32>::new(rc.parsed("id_encoder_seed")?);
    let out_dir = rc.resolve_out_dir(out, "eval")?;

    let mut reports = Vec::new();
    let mut generators = Vec::new();
    for path in checkpoints {
        let (generator, group, seed) = load_for_eval(path, &dataset, rc)?;
        let report = eval::evaluate(
            &generator,
            &dataset,
            group,
            &encoder,
            n_eval,
            seed,
            "single",
            &rc.hash_hex(),
        )?;
        reports.push(report);
        generators.push((group, generator));
    }

    let mut csv = String::from(EvalReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out_dir.join("eval.csv"), csv)?;
    let table = EvalReport::text_table(&reports);
    std::fs::write(out_dir.join("eval.txt"), &table)?;
    print!("{table}");

    if rc.flag("write_grid")? {
        write_comparison_grid(&dataset, &generators, rc, &out_dir)?;
    }
    println!("reports in {}", out_dir.display());
    Ok(())
}

/// Rows of input | aged outputs, one column per checkpoint.
fn write_comparison_grid(
    dataset: &Dataset,
    generators: &[(AgeGroup, Generator<f32>)],
    rc: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    let seed: u64 = rc.parsed("seed")?;
    let rows = eval::pick_eval_samples(dataset, 4, seed);
    if rows.is_empty() {
        return Ok(());
    }
    let r = dataset.resolution;
    let mut tiles = Vec::new();
    for &i in &rows {
        let s = &dataset.samples[i];
        tiles.push(s.image.clone());
        for (_, generator) in generators {
            let input = s.image.clone().reshape(vec![1, 3, r, r])?;
            let aged = generator.generate(&input, std::slice::from_ref(&s.attributes))?;
            tiles.push(aged.reshape(vec![3, r, r])?);
        }
    }
    let grid = eval::render_grid(&tiles, 1 + generators.len())?;
    imageio::write_ppm(&out_dir.join("comparison.ppm"), &grid)?;
    Ok(())
}

fn cmd_ablate(rc: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(rc)?;
    let base = rc.train_config()?;
    let n_eval: usize = rc.parsed("eval_samples")?;
    let out_dir = rc.resolve_out_dir(out, "ablate")?;
    let outcome = eval::run_ablation_grid(&dataset, &base, n_eval, &out_dir)?;
    print!("{}", EvalReport::text_table(&outcome.reports));
    println!("grid reports in {}", out_dir.display());
    Ok(())
}
