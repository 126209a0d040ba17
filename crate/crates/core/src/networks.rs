//! The aging generator and the wavelet-pathway discriminator.
//!
//! Generator: hourglass encoder/decoder with residual bottleneck blocks.
//! The attribute code is tiled and concatenated to the last bottleneck
//! blob, the decoder maps back to image space, and the input image is
//! added before a final tanh, so the network models the aging residual
//! rather than the whole face.
//!
//! Discriminator: one convolutional pathway per wavelet decomposition
//! level (the transform itself runs as a frozen stride-2^k convolution),
//! attribute code concatenated after each pathway's entry block, pathway
//! outputs fused by channel concatenation into a single patch label map.
//! No sigmoid: the adversarial objective is least-squares.

use std::path::Path;

use crate::attributes::AttributeVector;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{self, ModelKind};
use crate::error::{CoreError, Result};
use crate::kvconfig::KvBlock;
use crate::params::{Binding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{fl, Scalar, Tensor};
use crate::wavelet::{wpt_as_conv, WaveletFamily, WaveletFilterPair};

/// Weight init: zero-mean Gaussian, std 0.02; biases zero; norm scale one.
const WEIGHT_STD: f64 = 0.02;
/// Leaky slope used in the discriminator.
const LEAKY_SLOPE: f64 = 0.2;
/// Encoder downsampling stages; the fusion map is resolution / 2^3.
const ENCODER_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub attribute_dim: usize,
    pub use_attribute_embedding: bool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return Err(CoreError::Config(format!(
                "generator resolution must be a power of two >= 16, got {}",
                self.resolution
            )));
        }
        if self.base_channels == 0 {
            return Err(CoreError::Config("base_channels must be positive".into()));
        }
        if self.num_residual_blocks < 1 {
            return Err(CoreError::Config("num_residual_blocks must be >= 1".into()));
        }
        if self.attribute_dim == 0 {
            return Err(CoreError::Config("attribute_dim must be positive".into()));
        }
        Ok(())
    }

    /// Channel count entering the decoder.
    pub fn bottleneck_channels(&self) -> usize {
        let base = 4 * self.base_channels;
        if self.use_attribute_embedding {
            base + self.attribute_dim
        } else {
            base
        }
    }

    fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set("resolution", self.resolution);
        kv.set("base_channels", self.base_channels);
        kv.set("num_residual_blocks", self.num_residual_blocks);
        kv.set("attribute_dim", self.attribute_dim);
        kv.set("use_attribute_embedding", self.use_attribute_embedding);
        kv
    }

    fn from_kv(kv: &KvBlock) -> Result<Self> {
        Ok(GeneratorConfig {
            resolution: kv.require_parsed("resolution")?,
            base_channels: kv.require_parsed("base_channels")?,
            num_residual_blocks: kv.require_parsed("num_residual_blocks")?,
            attribute_dim: kv.require_parsed("attribute_dim")?,
            use_attribute_embedding: kv.require_parsed("use_attribute_embedding")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Wavelet decomposition levels feeding pathways; level 0 is the raw
    /// image pathway. Used when `use_wpt` is on.
    pub wpt_levels: Vec<usize>,
    pub pathway_channels: usize,
    pub attribute_dim: usize,
    pub use_wpt: bool,
    pub use_attribute_embedding: bool,
    pub wavelet_family: WaveletFamily,
}

impl DiscriminatorConfig {
    /// Pathways actually built: the configured levels with WPT on, the
    /// raw image alone with WPT off.
    pub fn effective_levels(&self) -> Vec<usize> {
        if self.use_wpt {
            self.wpt_levels.clone()
        } else {
            vec![0]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return Err(CoreError::Config(format!(
                "discriminator resolution must be a power of two >= 16, got {}",
                self.resolution
            )));
        }
        if self.pathway_channels == 0 {
            return Err(CoreError::Config("pathway_channels must be positive".into()));
        }
        if self.attribute_dim == 0 {
            return Err(CoreError::Config("attribute_dim must be positive".into()));
        }
        let levels = self.effective_levels();
        if levels.is_empty() {
            return Err(CoreError::Config(
                "at least one discriminator pathway must be enabled".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &levels {
            if l > ENCODER_STAGES {
                return Err(CoreError::Config(format!(
                    "wpt level {l} unsupported: pathways downsample at most {ENCODER_STAGES} times"
                )));
            }
            if !seen.insert(l) {
                return Err(CoreError::Config(format!("duplicate wpt level {l}")));
            }
        }
        if self.use_wpt && self.wavelet_family != WaveletFamily::Haar {
            return Err(CoreError::Config(
                "the in-network transform embeds as a convolution for haar only".into(),
            ));
        }
        Ok(())
    }

    fn to_kv(&self) -> KvBlock {
        let mut kv = KvBlock::new();
        kv.set("resolution", self.resolution);
        kv.set(
            "wpt_levels",
            self.wpt_levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        kv.set("pathway_channels", self.pathway_channels);
        kv.set("attribute_dim", self.attribute_dim);
        kv.set("use_wpt", self.use_wpt);
        kv.set("use_attribute_embedding", self.use_attribute_embedding);
        kv.set("wavelet_family", self.wavelet_family.name());
        kv
    }

    fn from_kv(kv: &KvBlock) -> Result<Self> {
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
        Ok(DiscriminatorConfig {
            resolution: kv.require_parsed("resolution")?,
            wpt_levels,
            pathway_channels: kv.require_parsed("pathway_channels")?,
            attribute_dim: kv.require_parsed("attribute_dim")?,
            use_wpt: kv.require_parsed("use_wpt")?,
            use_attribute_embedding: kv.require_parsed("use_attribute_embedding")?,
            wavelet_family: WaveletFamily::parse(kv.require("wavelet_family")?)?,
        })
    }
}

enum Activation {
    Relu,
    Leaky,
    None,
}

/// Shared layer construction: conv kernels get Gaussian init, biases and
/// norm shifts zero, norm scales one.
fn add_conv_layer(
    params: &mut ParamSet<impl Scalar>,
    rng: &mut Rng,
    name: &str,
    shape: [usize; 4],
    normed: bool,
    norm_channels: usize,
) -> Result<()> {
    params.insert(format!("{name}.weight"), Tensor::randn(&shape, WEIGHT_STD, rng))?;
    params.insert(format!("{name}.bias"), Tensor::zeros(&[norm_channels]))?;
    if normed {
        params.insert(format!("{name}.norm.gamma"), Tensor::filled(&[norm_channels], fl(1.0)))?;
        params.insert(format!("{name}.norm.beta"), Tensor::zeros(&[norm_channels]))?;
    }
    Ok(())
}

struct LayerRef<'a, T> {
    params: &'a ParamSet<T>,
    binding: &'a Binding,
}

impl<'a, T: Scalar> LayerRef<'a, T> {
    fn var(&self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from model"));
        self.binding.var(idx)
    }

    fn conv_block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        name: &str,
        stride: usize,
        pad: usize,
        normed: bool,
        act: Activation,
    ) -> Result<Var> {
        let mut y = g.conv2d(x, self.var(&format!("{name}.weight")), stride, pad)?;
        y = g.channel_bias(y, self.var(&format!("{name}.bias")))?;
        if normed {
            y = g.instance_norm(
                y,
                self.var(&format!("{name}.norm.gamma")),
                self.var(&format!("{name}.norm.beta")),
            )?;
        }
        Ok(match act {
            Activation::Relu => g.relu(y),
            Activation::Leaky => g.leaky_relu(y, fl(LEAKY_SLOPE)),
            Activation::None => y,
        })
    }

    fn deconv_block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        name: &str,
        normed: bool,
        act: Activation,
    ) -> Result<Var> {
        let mut y = g.conv2d_transpose(x, self.var(&format!("{name}.weight")), 2, 1)?;
        y = g.channel_bias(y, self.var(&format!("{name}.bias")))?;
        if normed {
            y = g.instance_norm(
                y,
                self.var(&format!("{name}.norm.gamma")),
                self.var(&format!("{name}.norm.beta")),
            )?;
        }
        Ok(match act {
            Activation::Relu => g.relu(y),
            Activation::Leaky => g.leaky_relu(y, fl(LEAKY_SLOPE)),
            Activation::None => y,
        })
    }
}

/// Stack a batch of attribute vectors and tile them to [N, p, h, w].
fn tiled_attributes<T: Scalar>(
    g: &mut Graph<T>,
    attrs: &[AttributeVector],
    expected_dim: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    for a in attrs {
        if a.dim() != expected_dim {
            return Err(CoreError::ShapeMismatch {
                op: "attribute embedding",
                detail: format!(
                    "attribute vector length {} does not match configured p = {expected_dim}",
                    a.dim()
                ),
            });
        }
    }
    let stacked = AttributeVector::stack_batch::<T>(attrs)?;
    let leaf = g.constant(stacked);
    g.tile_spatial(leaf, h, w)
}

pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let b = config.base_channels;
        let mut params = ParamSet::new();
        add_conv_layer(&mut params, &mut rng, "enc1", [b, 3, 3, 3], true, b)?;
        add_conv_layer(&mut params, &mut rng, "enc2", [2 * b, b, 3, 3], true, 2 * b)?;
        add_conv_layer(&mut params, &mut rng, "enc3", [4 * b, 2 * b, 3, 3], true, 4 * b)?;
        for i in 1..=config.num_residual_blocks {
            add_conv_layer(&mut params, &mut rng, &format!("res{i}.conv1"), [4 * b, 4 * b, 3, 3], true, 4 * b)?;
            add_conv_layer(&mut params, &mut rng, &format!("res{i}.conv2"), [4 * b, 4 * b, 3, 3], true, 4 * b)?;
        }
        let dec_in = config.bottleneck_channels();
        // transpose kernels are [C_in, C_out, kh, kw]
        add_conv_layer(&mut params, &mut rng, "dec1", [dec_in, 2 * b, 4, 4], true, 2 * b)?;
        add_conv_layer(&mut params, &mut rng, "dec2", [2 * b, b, 4, 4], true, b)?;
        add_conv_layer(&mut params, &mut rng, "dec3", [b, 3, 4, 4], false, 3)?;
        Ok(Generator { config, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_scalars()
    }

    /// Zero the final decoder layer so the network is exactly the
    /// identity-through-tanh map at initialization.
    pub fn zero_output_layer(&mut self) {
        for name in ["dec3.weight", "dec3.bias"] {
            let t = self.params.get_mut(name).expect("decoder output layer");
            for v in t.data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Forward pass on a bound graph. `x` is [N,3,R,R] in [-1,1]; one
    /// attribute vector per batch row.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        attrs: &[AttributeVector],
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(CoreError::ShapeMismatch {
                op: "generator_forward",
                detail: format!("expected [N,3,{r},{r}], got {shape:?}"),
            });
        }
        if attrs.len() != shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "generator_forward",
                detail: format!("{} attribute vectors for batch of {}", attrs.len(), shape[0]),
            });
        }
        let layers = LayerRef {
            params: &self.params,
            binding,
        };

        let mut h = layers.conv_block(g, x, "enc1", 2, 1, true, Activation::Relu)?;
        h = layers.conv_block(g, h, "enc2", 2, 1, true, Activation::Relu)?;
        h = layers.conv_block(g, h, "enc3", 2, 1, true, Activation::Relu)?;
        for i in 1..=self.config.num_residual_blocks {
            let inner = layers.conv_block(g, h, &format!("res{i}.conv1"), 1, 1, true, Activation::Relu)?;
            let inner = layers.conv_block(g, inner, &format!("res{i}.conv2"), 1, 1, true, Activation::None)?;
            h = g.add(h, inner)?;
        }
        if self.config.use_attribute_embedding {
            let spatial = r >> ENCODER_STAGES;
            let tiled = tiled_attributes(g, attrs, self.config.attribute_dim, spatial, spatial)?;
            h = g.concat(&[h, tiled], 1)?;
        }
        h = layers.deconv_block(g, h, "dec1", true, Activation::Relu)?;
        h = layers.deconv_block(g, h, "dec2", true, Activation::Relu)?;
        let residual = layers.deconv_block(g, h, "dec3", false, Activation::None)?;
        let summed = g.add(x, residual)?;
        Ok(g.tanh(summed))
    }

    /// Gradient-free inference.
    pub fn generate(&self, images: &Tensor<T>, attrs: &[AttributeVector]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &binding, x, attrs)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Generator, &self.config.to_kv(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        if ck.kind != ModelKind::Generator {
            return Err(CoreError::Format {
                path: path.display().to_string(),
                detail: format!("expected a generator checkpoint, found {:?}", ck.kind),
            });
        }
        let config = GeneratorConfig::from_kv(&ck.config)?;
        let template = Generator::<T>::new(config.clone(), 0)?;
        let params = take_params_like(&template.params, ck.tensors, path)?;
        Ok(Generator { config, params })
    }
}

pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
    /// Frozen transform kernels per pathway level (level, kernel).
    wpt_kernels: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let pc = config.pathway_channels;
        let p = config.attribute_dim;
        let mut params = ParamSet::new();
        let levels = config.effective_levels();
        let filters = WaveletFilterPair::new(config.wavelet_family);

        let mut wpt_kernels = Vec::new();
        for &level in &levels {
            let in_ch = if level == 0 {
                3
            } else {
                wpt_kernels.push((level, wpt_as_conv::<T>(level, &filters, 3)?));
                3 * 4usize.pow(level as u32)
            };
            add_conv_layer(&mut params, &mut rng, &format!("path{level}.entry"), [pc, in_ch, 3, 3], true, pc)?;
            let mut ch = if config.use_attribute_embedding { pc + p } else { pc };
            for j in 1..=(ENCODER_STAGES - level) {
                add_conv_layer(&mut params, &mut rng, &format!("path{level}.down{j}"), [pc, ch, 3, 3], true, pc)?;
                ch = pc;
            }
            add_conv_layer(&mut params, &mut rng, &format!("path{level}.tail"), [pc, ch, 3, 3], true, pc)?;
        }
        add_conv_layer(&mut params, &mut rng, "fuse", [1, pc * levels.len(), 3, 3], false, 1)?;
        Ok(Discriminator {
            config,
            params,
            wpt_kernels,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        self.params.bind(g, trainable)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_scalars()
    }

    /// The frozen transform kernels, per pathway level.
    pub fn wpt_kernels(&self) -> &[(usize, Tensor<T>)] {
        &self.wpt_kernels
    }

    /// Patch label map [N, 1, R/8, R/8]; unbounded reals.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        attrs: &[AttributeVector],
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(CoreError::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!("expected [N,3,{r},{r}], got {shape:?}"),
            });
        }
        if attrs.len() != shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!("{} attribute vectors for batch of {}", attrs.len(), shape[0]),
            });
        }
        let layers = LayerRef {
            params: &self.params,
            binding,
        };
        let levels = self.config.effective_levels();
        let mut pathway_outputs = Vec::with_capacity(levels.len());
        for &level in &levels {
            let input = if level == 0 {
                x
            } else {
                let kernel = self
                    .wpt_kernels
                    .iter()
                    .find(|(l, _)| *l == level)
                    .map(|(_, k)| k.clone())
                    .expect("kernel prepared at construction");
                let k = g.constant(kernel);
                g.conv2d(x, k, 1 << level, 0)?
            };
            let mut h = layers.conv_block(g, input, &format!("path{level}.entry"), 1, 1, true, Activation::Leaky)?;
            if self.config.use_attribute_embedding {
                let hs = g.shape(h).to_vec();
                let tiled = tiled_attributes(g, attrs, self.config.attribute_dim, hs[2], hs[3])?;
                h = g.concat(&[h, tiled], 1)?;
            }
            for j in 1..=(ENCODER_STAGES - level) {
                h = layers.conv_block(g, h, &format!("path{level}.down{j}"), 2, 1, true, Activation::Leaky)?;
            }
            h = layers.conv_block(g, h, &format!("path{level}.tail"), 1, 1, true, Activation::Leaky)?;
            pathway_outputs.push(h);
        }
        let fused = if pathway_outputs.len() == 1 {
            pathway_outputs[0]
        } else {
            g.concat(&pathway_outputs, 1)?
        };
        layers.conv_block(g, fused, "fuse", 1, 1, false, Activation::None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Discriminator, &self.config.to_kv(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        if ck.kind != ModelKind::Discriminator {
            return Err(CoreError::Format {
                path: path.display().to_string(),
                detail: format!("expected a discriminator checkpoint, found {:?}", ck.kind),
            });
        }
        let config = DiscriminatorConfig::from_kv(&ck.config)?;
        let template = Discriminator::<T>::new(config.clone(), 0)?;
        let params = take_params_like(&template.params, ck.tensors, path)?;
        Ok(Discriminator {
            config,
            params,
            wpt_kernels: template.wpt_kernels,
        })
    }
}

/// Check that a loaded tensor table carries exactly the expected names and
/// shapes, and reorder it to the template's entry order.
fn take_params_like<T: Scalar>(
    template: &ParamSet<T>,
    mut loaded: ParamSet<T>,
    path: &Path,
) -> Result<ParamSet<T>> {
    let err = |detail: String| CoreError::Format {
        path: path.display().to_string(),
        detail,
    };
    if loaded.len() != template.len() {
        return Err(err(format!(
            "checkpoint has {} tensors, model needs {}",
            loaded.len(),
            template.len()
        )));
    }
    let mut out = ParamSet::new();
    for (name, expect) in template.iter() {
        let t = loaded
            .get_mut(name)
            .ok_or_else(|| err(format!("missing tensor '{name}'")))?;
        if t.shape() != expect.shape() {
            return Err(err(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                expect.shape()
            )));
        }
        out.insert(name, t.clone())?;
    }
    Ok(out)
}
