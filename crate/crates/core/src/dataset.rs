//! Dataset ingestion, age-group binning, the unpaired training batch
//! policy, and a deterministic synthetic dataset for desk-scale runs.
//!
//! The synthetic generator stands in for full-scale face corpora: images
//! carry two categorical attributes (a shape acting as the gender column
//! and a hue acting as the race column) plus an aging texture whose
//! amplitude grows with age group, so age is recoverable from frequency
//! content and attributes are recoverable by a closed-form oracle.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attributes::{AttributeSchema, AttributeVector};
use crate::error::{CoreError, Result};
use crate::imageio::{self, RgbImage};
use crate::kvconfig::KvBlock;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Scalar, Tensor};

/// Age bins: 30-, 31-40, 41-50, 51+.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgeGroup {
    Under30,
    G31To40,
    G41To50,
    G51Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [
        AgeGroup::Under30,
        AgeGroup::G31To40,
        AgeGroup::G41To50,
        AgeGroup::G51Plus,
    ];

    /// The three translation targets learned from the youngest group.
    pub const TARGETS: [AgeGroup; 3] = [AgeGroup::G31To40, AgeGroup::G41To50, AgeGroup::G51Plus];

    pub fn from_age(age: u32) -> Result<AgeGroup> {
        match age {
            0..=30 => Ok(AgeGroup::Under30),
            31..=40 => Ok(AgeGroup::G31To40),
            41..=50 => Ok(AgeGroup::G41To50),
            51..=120 => Ok(AgeGroup::G51Plus),
            _ => Err(CoreError::Data(format!(
                "age {age} outside the valid range 0-120"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Under30 => "30-",
            AgeGroup::G31To40 => "31-40",
            AgeGroup::G41To50 => "41-50",
            AgeGroup::G51Plus => "51+",
        }
    }

    pub fn parse(s: &str) -> Result<AgeGroup> {
        match s {
            "30-" | "under30" | "Under30" => Ok(AgeGroup::Under30),
            "31-40" | "g31_40" => Ok(AgeGroup::G31To40),
            "41-50" | "g41_50" => Ok(AgeGroup::G41To50),
            "51+" | "g51plus" => Ok(AgeGroup::G51Plus),
            other => Err(CoreError::Config(format!("unknown age group '{other}'"))),
        }
    }

    /// Index into per-group tables (0 = youngest).
    pub fn index(self) -> usize {
        match self {
            AgeGroup::Under30 => 0,
            AgeGroup::G31To40 => 1,
            AgeGroup::G41To50 => 2,
            AgeGroup::G51Plus => 3,
        }
    }
}

/// One training record: image in [-1, 1], one-hot attributes, age bin.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub attributes: AttributeVector,
    pub age_group: AgeGroup,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub schema: AttributeSchema,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn group_indices(&self, group: AgeGroup) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.age_group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stack the given sample indices into ([N,3,H,W] image tensor, attribute batch).
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<AttributeVector>)> {
        if indices.is_empty() {
            return Err(CoreError::InvalidArgument("empty batch".into()));
        }
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        let mut attrs = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.image.data().iter().map(|&v| crate::tensor::fl::<T>(v as f64)));
            attrs.push(s.attributes.clone());
        }
        let images = Tensor::new(vec![indices.len(), 3, r, r], data)?;
        Ok((images, attrs))
    }

    /// Write images (binary PPM), manifest.csv, and dataset.cfg so the
    /// directory can be loaded back with [`Dataset::load`].
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images)?;
        let mut manifest = String::new();
        manifest.push_str("filename,age");
        for g in self.schema.groups() {
            manifest.push(',');
            manifest.push_str(&g.name);
        }
        manifest.push('\n');
        for s in &self.samples {
            let filename = format!("{}.ppm", s.id);
            let rgb = imageio::from_tensor(&s.image)?;
            imageio::write_ppm(&images.join(&filename), &rgb)?;
            let age = representative_age(s.age_group);
            let values = self.schema.decode(&s.attributes)?;
            manifest.push_str(&filename);
            manifest.push_str(&format!(",{age}"));
            for v in values {
                manifest.push(',');
                manifest.push_str(v);
            }
            manifest.push('\n');
        }
        std::fs::write(dir.join("manifest.csv"), manifest)?;

        let mut cfg = KvBlock::new();
        cfg.set("resolution", self.resolution);
        cfg.set("attributes", self.schema.to_spec_string());
        cfg.save(&dir.join("dataset.cfg"))?;
        Ok(())
    }

    /// Load a dataset directory written by [`Dataset::write_to_dir`] (or
    /// laid out the same way by hand): dataset.cfg, manifest.csv, images/.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let cfg = KvBlock::load(&dir.join("dataset.cfg"))?;
        let resolution: usize = cfg.require_parsed("resolution")?;
        let schema = match cfg.get("attributes") {
            Some(spec) => Some(AttributeSchema::parse(spec)?),
            None => None,
        };
        load_manifest(&dir.join("images"), &dir.join("manifest.csv"), resolution, schema)
    }
}

/// A stable age used when serializing group membership back to a manifest.
fn representative_age(group: AgeGroup) -> u32 {
    match group {
        AgeGroup::Under30 => 25,
        AgeGroup::G31To40 => 35,
        AgeGroup::G41To50 => 45,
        AgeGroup::G51Plus => 60,
    }
}

struct ManifestRow {
    filename: String,
    age: u32,
    values: Vec<String>,
}

/// Parse and validate a manifest, decode and resize every image, and bin
/// ages into groups. Image decoding fans out over worker threads; the
/// `AGEWAVE_THREADS` environment variable caps the worker count.
pub fn load_manifest(
    image_dir: &Path,
    manifest_path: &Path,
    resolution: usize,
    schema: Option<AttributeSchema>,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        CoreError::Data(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let columns: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    if columns.len() < 2 || columns[0] != "filename" || columns[1] != "age" {
        return Err(CoreError::Data(format!(
            "manifest header must start with 'filename,age', got '{header}'"
        )));
    }
    let attr_names: Vec<String> = columns[2..].iter().map(|c| c.to_string()).collect();

    let mut rows = Vec::new();
    for (lineno, raw) in lines.enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() != columns.len() {
            return Err(CoreError::Data(format!(
                "manifest line {}: expected {} fields, got {}",
                lineno + 2,
                columns.len(),
                fields.len()
            )));
        }
        let age: u32 = fields[1].parse().map_err(|_| {
            CoreError::Data(format!("manifest line {}: bad age '{}'", lineno + 2, fields[1]))
        })?;
        AgeGroup::from_age(age)?;
        rows.push(ManifestRow {
            filename: fields[0].to_string(),
            age,
            values: fields[2..].iter().map(|s| s.to_string()).collect(),
        });
    }

    // Schema: declared, or derived as sorted distinct values per column.
    let schema = match schema {
        Some(s) => {
            if s.groups().len() != attr_names.len() {
                return Err(CoreError::Data(format!(
                    "declared schema has {} groups but manifest has {} attribute columns",
                    s.groups().len(),
                    attr_names.len()
                )));
            }
            for (group, column) in s.groups().iter().zip(&attr_names) {
                if &group.name != column {
                    return Err(CoreError::Data(format!(
                        "schema group '{}' does not match manifest column '{column}'",
                        group.name
                    )));
                }
            }
            s
        }
        None => {
            if rows.is_empty() {
                // no data to derive a schema from; an empty manifest still
                // loads as an empty dataset
                AttributeSchema::parse("none:a|b")?
            } else {
                let mut groups = Vec::new();
                for (i, name) in attr_names.iter().enumerate() {
                    let mut values: Vec<String> =
                        rows.iter().map(|r| r.values[i].clone()).collect();
                    values.sort();
                    values.dedup();
                    if values.len() < 2 {
                        values.push(format!("__other_{name}"));
                    }
                    groups.push(crate::attributes::AttributeGroup {
                        name: name.clone(),
                        values,
                    });
                }
                AttributeSchema::new(groups)?
            }
        }
    };

    if rows.is_empty() {
        return Ok(Dataset {
            resolution,
            schema,
            samples: Vec::new(),
        });
    }

    // Decode rows in parallel, preserving manifest order.
    let workers = loader_threads().min(rows.len()).max(1);
    let mut slots: Vec<Option<Result<TrainingSample>>> = Vec::new();
    slots.resize_with(rows.len(), || None);
    let chunk = rows.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, (rows_chunk, slots_chunk)) in
            rows.chunks(chunk).zip(slots.chunks_mut(chunk)).enumerate()
        {
            let schema = &schema;
            let _ = w;
            scope.spawn(move || {
                for (row, slot) in rows_chunk.iter().zip(slots_chunk.iter_mut()) {
                    *slot = Some(decode_row(image_dir, row, resolution, schema));
                }
            });
        }
    });
    let mut samples = Vec::with_capacity(rows.len());
    for slot in slots {
        samples.push(slot.expect("worker filled every slot")?);
    }
    Ok(Dataset {
        resolution,
        schema,
        samples,
    })
}

fn decode_row(
    image_dir: &Path,
    row: &ManifestRow,
    resolution: usize,
    schema: &AttributeSchema,
) -> Result<TrainingSample> {
    let path = image_dir.join(&row.filename);
    if !path.exists() {
        return Err(CoreError::Data(format!(
            "image file missing: {}",
            path.display()
        )));
    }
    let rgb = imageio::decode_image(&path)?;
    let rgb = imageio::resize_bilinear(&rgb, resolution, resolution);
    let values: Vec<&str> = row.values.iter().map(|v| v.as_str()).collect();
    let attributes = schema.encode(&values)?;
    Ok(TrainingSample {
        id: row
            .filename
            .rsplit_once('.')
            .map(|(stem, _)| stem.to_string())
            .unwrap_or_else(|| row.filename.clone()),
        image: imageio::to_tensor(&rgb),
        attributes,
        age_group: AgeGroup::from_age(row.age)?,
    })
}

fn loader_threads() -> usize {
    if let Ok(v) = std::env::var("AGEWAVE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(4))
        .unwrap_or(1)
}

/// How positive samples are drawn for the discriminator: generic aged
/// faces, attribute-matched to the input when `match_attributes` is on.
#[derive(Clone, Copy, Debug)]
pub struct PairingPolicy {
    pub target_group: AgeGroup,
    pub match_attributes: bool,
}

/// One training triple of index batches into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchTriple {
    /// Young inputs (with their own attribute vectors).
    pub young: Vec<usize>,
    /// Aged positives, attribute-matched to `young` when the policy says so.
    pub old_positive: Vec<usize>,
    /// Young negatives.
    pub young_negative: Vec<usize>,
}

#[derive(Debug)]
struct ShuffledPool {
    indices: Vec<usize>,
    cursor: usize,
}

impl ShuffledPool {
    fn new(indices: Vec<usize>, rng: &mut Rng) -> Self {
        let mut pool = ShuffledPool { indices, cursor: 0 };
        rng.shuffle(&mut pool.indices);
        pool
    }

    fn draw(&mut self, rng: &mut Rng) -> usize {
        if self.cursor >= self.indices.len() {
            rng.shuffle(&mut self.indices);
            self.cursor = 0;
        }
        let v = self.indices[self.cursor];
        self.cursor += 1;
        v
    }
}

/// Deterministic stream of training triples. Epoch-shuffled per pool;
/// identical seeds give identical batch sequences, and the stream can be
/// fast-forwarded to reproduce any point of a previous run.
#[derive(Debug)]
pub struct BatchStream {
    batch_size: usize,
    policy: PairingPolicy,
    rng: Rng,
    young: ShuffledPool,
    negatives: ShuffledPool,
    /// When matching: one pool per attribute cell of the target group.
    old_by_cell: BTreeMap<String, ShuffledPool>,
    /// When not matching: every target-group sample in one pool.
    old_any: Option<ShuffledPool>,
    /// Attribute cell per sample index (young side lookup).
    cell_of: Vec<String>,
}

impl BatchStream {
    pub fn new(dataset: &Dataset, policy: PairingPolicy, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if policy.target_group == AgeGroup::Under30 {
            return Err(CoreError::InvalidArgument(
                "target group must be one of the three older groups".into(),
            ));
        }
        let young_idx = dataset.group_indices(AgeGroup::Under30);
        if young_idx.is_empty() {
            return Err(CoreError::Data(
                "group 30- is empty after filtering; nothing to translate from".into(),
            ));
        }
        let old_idx = dataset.group_indices(policy.target_group);
        if old_idx.is_empty() {
            return Err(CoreError::Data(format!(
                "group {} is empty after filtering; nothing to train against",
                policy.target_group.label()
            )));
        }

        let cell_of: Vec<String> = dataset
            .samples
            .iter()
            .map(|s| s.attributes.cell_key())
            .collect();

        let mut rng = Rng::new(seed);
        let young = ShuffledPool::new(young_idx.clone(), &mut rng);
        let negatives = ShuffledPool::new(young_idx.clone(), &mut rng);

        let mut old_by_cell = BTreeMap::new();
        let mut old_any = None;
        if policy.match_attributes {
            let mut cells: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for &i in &old_idx {
                cells.entry(cell_of[i].clone()).or_default().push(i);
            }
            // every attribute cell on the young side must have positives
            for &i in &young_idx {
                if !cells.contains_key(&cell_of[i]) {
                    let desc = dataset
                        .schema
                        .decode(&dataset.samples[i].attributes)
                        .map(|vs| {
                            dataset
                                .schema
                                .groups()
                                .iter()
                                .zip(vs)
                                .map(|(g, v)| format!("{}={v}", g.name))
                                .collect::<Vec<_>>()
                                .join(",")
                        })
                        .unwrap_or_else(|_| cell_of[i].clone());
                    return Err(CoreError::Data(format!(
                        "no {} sample with attributes {desc}; the attribute cell is starved",
                        policy.target_group.label()
                    )));
                }
            }
            for (key, indices) in cells {
                old_by_cell.insert(key, ShuffledPool::new(indices, &mut rng));
            }
        } else {
            old_any = Some(ShuffledPool::new(old_idx, &mut rng));
        }

        Ok(BatchStream {
            batch_size,
            policy,
            rng,
            young,
            negatives,
            old_by_cell,
            old_any,
            cell_of,
        })
    }

    pub fn next_triple(&mut self) -> BatchTriple {
        let mut young = Vec::with_capacity(self.batch_size);
        let mut old_positive = Vec::with_capacity(self.batch_size);
        let mut young_negative = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let y = self.young.draw(&mut self.rng);
            let o = if self.policy.match_attributes {
                let pool = self
                    .old_by_cell
                    .get_mut(&self.cell_of[y])
                    .expect("validated at construction");
                pool.draw(&mut self.rng)
            } else {
                self.old_any
                    .as_mut()
                    .expect("uniform pool present")
                    .draw(&mut self.rng)
            };
            young.push(y);
            old_positive.push(o);
            young_negative.push(self.negatives.draw(&mut self.rng));
        }
        BatchTriple {
            young,
            old_positive,
            young_negative,
        }
    }

    /// Advance past `n` triples without materializing them (resume path).
    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            let _ = self.next_triple();
        }
    }
}

/// Parameters of the synthetic aging dataset.
#[derive(Clone, Debug)]
pub struct SyntheticAgingSpec {
    pub resolution: usize,
    /// High-frequency texture amplitude per age group, youngest first;
    /// must be strictly increasing for the age statistic to be monotone.
    pub texture_amplitude: [f64; 4],
    /// Probability that a manifest label is flipped to a wrong value
    /// (label noise knob; images are untouched).
    pub label_flip_prob: f64,
}

impl Default for SyntheticAgingSpec {
    fn default() -> Self {
        SyntheticAgingSpec {
            resolution: 64,
            texture_amplitude: [0.0, 0.10, 0.20, 0.26],
            label_flip_prob: 0.0,
        }
    }
}

impl SyntheticAgingSpec {
    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema::parse("gender:circle|square,race:A|B").expect("fixed schema")
    }
}

// Palette chosen so the aging texture never clips: strongest channel
// 0.70 + 0.03 brightness jitter + 0.26 peak amplitude = 0.99, weakest
// 0.36 - 0.29 = 0.07.
const FG_STRONG: f64 = 0.70;
const FG_MID: f64 = 0.50;
const FG_WEAK: f64 = 0.36;
const BG_GRAY: f64 = 0.15;

/// Deterministically generate a dataset balanced over every
/// (attribute-cell, age-group) combination.
pub fn generate_synthetic(spec: &SyntheticAgingSpec, n_per_cell: usize, seed: u64) -> Result<Dataset> {
    if spec.resolution < 16 || !spec.resolution.is_power_of_two() {
        return Err(CoreError::InvalidArgument(format!(
            "synthetic resolution must be a power of two >= 16, got {}",
            spec.resolution
        )));
    }
    for w in spec.texture_amplitude.windows(2) {
        if w[1] <= w[0] {
            return Err(CoreError::InvalidArgument(
                "texture amplitudes must strictly increase with age group".into(),
            ));
        }
    }
    let schema = spec.schema();
    let mut samples = Vec::new();
    let mut counter = 0u64;
    for shape in ["circle", "square"] {
        for hue in ["A", "B"] {
            for group in AgeGroup::ALL {
                for i in 0..n_per_cell {
                    let sample_seed = derive_seed(seed, counter);
                    counter += 1;
                    let mut rng = Rng::new(sample_seed);
                    let image = render_synthetic_image(spec, shape, hue, group, &mut rng);
                    let mut values = vec![shape, hue];
                    // optional label noise: flip one attribute in the record
                    if spec.label_flip_prob > 0.0 && rng.next_f64() < spec.label_flip_prob {
                        let which = rng.next_below(2);
                        values[which] = match (which, values[which]) {
                            (0, "circle") => "square",
                            (0, _) => "circle",
                            (_, "A") => "B",
                            (_, _) => "A",
                        };
                    }
                    let attributes = schema.encode(&values)?;
                    samples.push(TrainingSample {
                        id: format!("synth_{shape}_{hue}_{}_{i:04}", group.index()),
                        image,
                        attributes,
                        age_group: group,
                    });
                }
            }
        }
    }
    Ok(Dataset {
        resolution: spec.resolution,
        schema,
        samples,
    })
}

/// Render one sample to a byte image and convert to a [-1,1] tensor, so
/// in-memory data and on-disk PPMs are bit-identical.
fn render_synthetic_image(
    spec: &SyntheticAgingSpec,
    shape: &str,
    hue: &str,
    group: AgeGroup,
    rng: &mut Rng,
) -> Tensor<f32> {
    let r = spec.resolution;
    let rf = r as f64;
    let amplitude = spec.texture_amplitude[group.index()];

    let radius = 0.32 * rf * (1.0 + 0.03 * rng.uniform(-1.0, 1.0));
    let jitter = rf / 64.0;
    let cx = rf / 2.0 + rng.uniform(-jitter, jitter);
    let cy = rf / 2.0 + rng.uniform(-jitter, jitter);
    let brightness = 0.03 * rng.uniform(-1.0, 1.0);
    let fg = if hue == "A" {
        [FG_STRONG + brightness, FG_MID + brightness, FG_WEAK + brightness]
    } else {
        [FG_WEAK + brightness, FG_MID + brightness, FG_STRONG + brightness]
    };
    let bg = BG_GRAY + 0.02 * rng.uniform(-1.0, 1.0);

    // texture phases: sign flip for the alternating-row component, integer
    // shifts for the slower waves so per-component energy is unchanged
    let s1 = if rng.next_below(2) == 0 { 1.0 } else { -1.0 };
    let p2 = rng.next_below(4) as f64 * std::f64::consts::FRAC_PI_2;
    let p3 = rng.next_below(8) as f64 * std::f64::consts::FRAC_PI_4;

    let mut pixels = vec![0u8; r * r * 3];
    for y in 0..r {
        for x in 0..r {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                "circle" => (dx * dx + dy * dy).sqrt() <= radius,
                _ => dx.abs().max(dy.abs()) <= radius,
            };
            let texture = if inside {
                amplitude
                    * (0.6 * s1 * (std::f64::consts::PI * y as f64).cos()
                        + 0.3 * (std::f64::consts::PI * y as f64 / 2.0 + p2).cos()
                        + 0.1 * (std::f64::consts::PI * (x + y) as f64 / 4.0 + p3).cos())
            } else {
                0.0
            };
            for c in 0..3 {
                let v = if inside { fg[c] + texture } else { bg };
                pixels[(y * r + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let rgb = RgbImage::new(r, r, pixels).expect("synthetic buffer");
    imageio::to_tensor(&rgb)
}

/// Rule-based attribute classifier, exact on clean synthetic images and
/// robust to the global brightness drift trained generators introduce.
///
/// The background level is estimated as the median of max(red, blue)
/// over a border ring the shape never reaches; foreground pixels are
/// those clearing that estimate by a fixed margin. The shape is read
/// from the covered area relative to the nominal radius, the hue from
/// the red-minus-blue sign over the foreground.
pub fn classify_synthetic_attributes(image: &Tensor<f32>) -> Result<Vec<&'static str>> {
    let s = image.shape();
    let (h, w) = match s.len() {
        3 if s[0] == 3 => (s[1], s[2]),
        4 if s[0] == 1 && s[1] == 3 => (s[2], s[3]),
        _ => {
            return Err(CoreError::ShapeMismatch {
                op: "classify_synthetic_attributes",
                detail: format!("expected [3,H,W] or [1,3,H,W], got {s:?}"),
            })
        }
    };
    let plane = h * w;
    let offset = image.numel() - 3 * plane;
    let data = &image.data()[offset..];
    let strongest = |i: usize| data[i].max(data[2 * plane + i]);

    let ring = 2usize.min(h / 4);
    let mut border: Vec<f32> = (0..plane)
        .filter(|i| {
            let (y, x) = (i / w, i % w);
            y < ring || y >= h - ring || x < ring || x >= w - ring
        })
        .map(strongest)
        .collect();
    border.sort_by(|a, b| a.total_cmp(b));
    let background = border[border.len() / 2];
    // 0.20 of the [0,1] pixel range, i.e. 0.40 in tensor units
    let fg_threshold = background + 0.40;

    let mut fg_count = 0usize;
    let mut red_minus_blue = 0.0f64;
    for i in 0..plane {
        if strongest(i) > fg_threshold {
            fg_count += 1;
            red_minus_blue += (data[i] - data[2 * plane + i]) as f64;
        }
    }
    if fg_count == 0 {
        return Err(CoreError::Data(
            "no foreground found; image is not classifiable".into(),
        ));
    }
    let nominal_r = 0.32 * w as f64;
    // circle area ~= pi r^2, square ~= 4 r^2; split the gap
    let area_threshold = 3.55 * nominal_r * nominal_r;
    let shape = if (fg_count as f64) < area_threshold {
        "circle"
    } else {
        "square"
    };
    let hue = if red_minus_blue >= 0.0 { "A" } else { "B" };
    Ok(vec![shape, hue])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_matches_the_group_boundaries() {
        assert_eq!(AgeGroup::from_age(30).unwrap(), AgeGroup::Under30);
        assert_eq!(AgeGroup::from_age(31).unwrap(), AgeGroup::G31To40);
        assert_eq!(AgeGroup::from_age(51).unwrap(), AgeGroup::G51Plus);
    }

    #[test]
    fn binning_is_total_and_disjoint_over_valid_ages() {
        for age in 0..=120u32 {
            let group = AgeGroup::from_age(age).unwrap();
            let count = AgeGroup::ALL
                .iter()
                .filter(|&&g| g == group)
                .count();
            assert_eq!(count, 1);
        }
        assert!(AgeGroup::from_age(121).is_err());
        assert!(AgeGroup::from_age(200).is_err());
    }

    fn tiny_synthetic() -> Dataset {
        generate_synthetic(
            &SyntheticAgingSpec {
                resolution: 16,
                ..Default::default()
            },
            3,
            7,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let ds = tiny_synthetic();
        assert_eq!(ds.samples.len(), 2 * 2 * 4 * 3);
        let ds2 = tiny_synthetic();
        for (a, b) in ds.samples.iter().zip(&ds2.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image.data(), b.image.data());
        }
        // and a different seed gives different images
        let ds3 = generate_synthetic(
            &SyntheticAgingSpec {
                resolution: 16,
                ..Default::default()
            },
            3,
            8,
        )
        .unwrap();
        assert!(ds.samples[0].image.data() != ds3.samples[0].image.data());
    }

    #[test]
    fn oracle_is_exact_on_clean_images() {
        let spec = SyntheticAgingSpec {
            resolution: 32,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 8, 123).unwrap();
        for s in &ds.samples {
            let got = classify_synthetic_attributes(&s.image).unwrap();
            let want = ds.schema.decode(&s.attributes).unwrap();
            assert_eq!(got, want, "sample {}", s.id);
        }
    }

    #[test]
    fn oracle_is_exact_at_64() {
        let ds = generate_synthetic(&SyntheticAgingSpec::default(), 4, 99).unwrap();
        for s in &ds.samples {
            let got = classify_synthetic_attributes(&s.image).unwrap();
            let want = ds.schema.decode(&s.attributes).unwrap();
            assert_eq!(got, want, "sample {}", s.id);
        }
    }

    #[test]
    fn label_flips_change_labels_not_images() {
        let spec = SyntheticAgingSpec {
            resolution: 16,
            label_flip_prob: 1.0,
            ..Default::default()
        };
        let noisy = generate_synthetic(&spec, 4, 5).unwrap();
        let mut mismatches = 0;
        for s in &noisy.samples {
            let detected = classify_synthetic_attributes(&s.image).unwrap();
            let labeled = noisy.schema.decode(&s.attributes).unwrap();
            if detected != labeled {
                mismatches += 1;
            }
        }
        assert_eq!(mismatches, noisy.samples.len());
    }

    #[test]
    fn batch_stream_is_deterministic_and_matched() {
        let ds = tiny_synthetic();
        let policy = PairingPolicy {
            target_group: AgeGroup::G51Plus,
            match_attributes: true,
        };
        let mut a = BatchStream::new(&ds, policy, 16, 3).unwrap();
        let mut b = BatchStream::new(&ds, policy, 16, 3).unwrap();
        for _ in 0..5 {
            let ta = a.next_triple();
            let tb = b.next_triple();
            assert_eq!(ta, tb);
            assert_eq!(ta.young.len(), 16);
            assert_eq!(ta.old_positive.len(), 16);
            assert_eq!(ta.young_negative.len(), 16);
            for (&y, &o) in ta.young.iter().zip(&ta.old_positive) {
                assert_eq!(
                    ds.samples[y].attributes, ds.samples[o].attributes,
                    "positive must match input attributes exactly"
                );
                assert_eq!(ds.samples[o].age_group, AgeGroup::G51Plus);
                assert_eq!(ds.samples[y].age_group, AgeGroup::Under30);
            }
        }
    }

    #[test]
    fn batch_stream_skip_reproduces_state() {
        let ds = tiny_synthetic();
        let policy = PairingPolicy {
            target_group: AgeGroup::G31To40,
            match_attributes: true,
        };
        let mut full = BatchStream::new(&ds, policy, 4, 11).unwrap();
        for _ in 0..7 {
            full.next_triple();
        }
        let expected = full.next_triple();

        let mut resumed = BatchStream::new(&ds, policy, 4, 11).unwrap();
        resumed.skip(7);
        assert_eq!(resumed.next_triple(), expected);
    }

    #[test]
    fn starved_attribute_cell_is_reported() {
        let mut ds = tiny_synthetic();
        // remove every old sample with square/B so that cell starves
        let squares_b: Vec<String> = ds
            .samples
            .iter()
            .filter(|s| {
                s.age_group == AgeGroup::G51Plus
                    && ds.schema.decode(&s.attributes).unwrap() == vec!["square", "B"]
            })
            .map(|s| s.id.clone())
            .collect();
        ds.samples.retain(|s| !squares_b.contains(&s.id));
        let policy = PairingPolicy {
            target_group: AgeGroup::G51Plus,
            match_attributes: true,
        };
        let err = BatchStream::new(&ds, policy, 4, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gender=square") && msg.contains("race=B"), "{msg}");
    }

    #[test]
    fn empty_group_is_an_error() {
        let mut ds = tiny_synthetic();
        ds.samples.retain(|s| s.age_group != AgeGroup::G41To50);
        let policy = PairingPolicy {
            target_group: AgeGroup::G41To50,
            match_attributes: false,
        };
        let err = BatchStream::new(&ds, policy, 4, 1).unwrap_err();
        assert!(err.to_string().contains("41-50"), "{err}");
    }

    #[test]
    fn roundtrip_through_directory_is_bit_exact() {
        let ds = tiny_synthetic();
        let dir = std::env::temp_dir().join(format!("agewave-ds-{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        ds.write_to_dir(&dir).unwrap();
        let back = Dataset::load(&dir).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        assert_eq!(back.schema, ds.schema);
        // order is manifest order, which matches generation order
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.age_group, b.age_group);
            assert_eq!(a.attributes, b.attributes);
            assert_eq!(a.image.data(), b.image.data(), "pixels must roundtrip exactly");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_manifest_loads_as_empty_dataset() {
        let dir = std::env::temp_dir().join(format!("agewave-empty-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::write(dir.join("manifest.csv"), "filename,age,gender\n").unwrap();
        let ds = load_manifest(&dir.join("images"), &dir.join("manifest.csv"), 16, None).unwrap();
        assert!(ds.samples.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_of_range_age_is_rejected() {
        let dir = std::env::temp_dir().join(format!("agewave-age-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::write(dir.join("manifest.csv"), "filename,age,gender\nx.ppm,200,m\n").unwrap();
        let err =
            load_manifest(&dir.join("images"), &dir.join("manifest.csv"), 16, None).unwrap_err();
        assert!(err.to_string().contains("200"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_image_error_names_the_file() {
        let dir = std::env::temp_dir().join(format!("agewave-miss-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::write(dir.join("manifest.csv"), "filename,age,gender\nghost.ppm,25,m\n").unwrap();
        let err =
            load_manifest(&dir.join("images"), &dir.join("manifest.csv"), 16, None).unwrap_err();
        assert!(err.to_string().contains("ghost.ppm"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}

