//! The full training objective stack.
//!
//! Least-squares adversarial losses over patch label maps (all-ones
//! target for real aged faces; zeros for generated faces and for real
//! young faces, which count as negatives so the discriminator learns the
//! aging effect itself), a pixel critic, an identity critic in the
//! feature space of a frozen encoder, and the warm-up rule that picks the
//! critic weights.

use crate::autodiff::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::params::{Binding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{fl, Scalar, Tensor};

/// Critic weights. With `auto_scale` they are computed once from warm-up
/// statistics and frozen for the rest of the run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_id: f64,
    pub auto_scale: bool,
}

impl LossWeights {
    pub fn fixed(lambda_pix: f64, lambda_id: f64) -> Result<Self> {
        if lambda_pix < 0.0 || lambda_id < 0.0 {
            return Err(CoreError::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(LossWeights {
            lambda_pix,
            lambda_id,
            auto_scale: false,
        })
    }
}

/// Generator adversarial term: mean over batch and label-map positions of
/// (D(G(x, a), a) - 1)^2.
pub fn loss_gan_g<T: Scalar>(g: &mut Graph<T>, d_out_fake: Var) -> Var {
    let shifted = g.add_scalar(d_out_fake, -T::one());
    let sq = g.square(shifted);
    g.mean_all(sq)
}

/// Discriminator objective, three terms: real aged faces pushed to one,
/// generated faces and real young faces pushed to zero.
pub fn loss_gan_d<T: Scalar>(
    g: &mut Graph<T>,
    d_real_old: Var,
    d_fake: Var,
    d_real_young: Var,
) -> Var {
    let old_shift = g.add_scalar(d_real_old, -T::one());
    let old_sq = g.square(old_shift);
    let old_term = g.mean_all(old_sq);

    let fake_sq = g.square(d_fake);
    let fake_term = g.mean_all(fake_sq);

    let young_sq = g.square(d_real_young);
    let young_term = g.mean_all(young_sq);

    let partial = g.add(old_term, fake_term).expect("scalar add");
    g.add(partial, young_term).expect("scalar add")
}

/// Pixel critic: squared Frobenius distance per sample, averaged over the
/// batch.
pub fn loss_pix<T: Scalar>(g: &mut Graph<T>, generated: Var, input: Var) -> Result<Var> {
    let shape = g.shape(generated).to_vec();
    if shape != g.shape(input) {
        return Err(CoreError::ShapeMismatch {
            op: "loss_pix",
            detail: format!("generated {shape:?} vs input {:?}", g.shape(input)),
        });
    }
    let batch = shape.first().copied().unwrap_or(1);
    let total = g.frobenius_sq(generated, input)?;
    Ok(g.mul_scalar(total, fl(1.0 / batch as f64)))
}

/// A frozen feature map usable as the identity critic's descriptor.
/// Implementations never expose trainable parameters to the graph, so
/// gradient flows through them but never into them. Any pretrained
/// descriptor can be plugged in behind this surface.
pub trait FrozenEncoder<T: Scalar> {
    /// Insert the (non-trainable) weights into a graph.
    fn bind(&self, g: &mut Graph<T>) -> Binding;

    /// Feature map of an [N,3,H,W] image batch.
    fn features(&self, g: &mut Graph<T>, binding: &Binding, x: Var) -> Result<Var>;

    /// Features of a plain tensor, outside any training graph.
    fn features_of(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let x = g.constant(images.clone());
        let f = self.features(&mut g, &binding, x)?;
        Ok(g.value(f).clone())
    }
}

/// Default frozen descriptor standing in for a pretrained face network:
/// four stride-2 convolutions with fixed-seed random weights.
pub struct IdentityEncoder<T> {
    pub seed: u64,
    params: ParamSet<T>,
}

/// Feature widths of the default encoder.
const ID_CHANNELS: [usize; 4] = [8, 16, 32, 32];

impl<T: Scalar> IdentityEncoder<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (i, &c_out) in ID_CHANNELS.iter().enumerate() {
            params
                .insert(
                    format!("phi{i}.weight"),
                    Tensor::randn(&[c_out, c_in, 3, 3], (2.0 / (9.0 * c_in as f64)).sqrt(), &mut rng),
                )
                .expect("fresh name");
            c_in = c_out;
        }
        IdentityEncoder { seed, params }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Scalar> FrozenEncoder<T> for IdentityEncoder<T> {
    fn bind(&self, g: &mut Graph<T>) -> Binding {
        self.params.bind(g, false)
    }

    fn features(&self, g: &mut Graph<T>, binding: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..ID_CHANNELS.len() {
            let w = binding.var(
                self.params
                    .index_of(&format!("phi{i}.weight"))
                    .expect("encoder layer"),
            );
            h = g.conv2d(h, w, 2, 1)?;
            h = g.leaky_relu(h, fl(0.2));
        }
        Ok(h)
    }
}

/// Identity critic: squared Frobenius distance between frozen-encoder
/// features of the generated and input images, batch-averaged. Gradient
/// flows only toward the generator.
pub fn loss_id<T: Scalar>(
    g: &mut Graph<T>,
    generated: Var,
    input: Var,
    encoder: &impl FrozenEncoder<T>,
    encoder_binding: &Binding,
) -> Result<Var> {
    let batch = g.shape(generated).first().copied().unwrap_or(1);
    let f_gen = encoder.features(g, encoder_binding, generated)?;
    let f_in = encoder.features(g, encoder_binding, input)?;
    let total = g.frobenius_sq(f_gen, f_in)?;
    Ok(g.mul_scalar(total, fl(1.0 / batch as f64)))
}

/// L_G = gan + lambda_pix * pix + lambda_id * id; L_D = gan_d. The
/// pixel/identity terms are optional so the trainer can honor the pixel
/// critic cadence.
pub fn total_loss_g<T: Scalar>(
    g: &mut Graph<T>,
    gan_g: Var,
    pix: Option<Var>,
    id: Option<Var>,
    weights: &LossWeights,
) -> Var {
    let mut total = gan_g;
    if let Some(pix) = pix {
        let weighted = g.mul_scalar(pix, fl(weights.lambda_pix));
        total = g.add(total, weighted).expect("scalar add");
    }
    if let Some(id) = id {
        let weighted = g.mul_scalar(id, fl(weights.lambda_id));
        total = g.add(total, weighted).expect("scalar add");
    }
    total
}

/// Mean loss magnitudes observed over the warm-up window.
#[derive(Clone, Copy, Debug, Default)]
pub struct WarmupStats {
    pub mean_gan_g: f64,
    pub mean_pix: f64,
    pub mean_id: f64,
}

/// Order-of-magnitude rule: scale each critic to match the adversarial
/// term, then divide by ten so the adversarial loss dominates.
pub fn auto_scale_lambdas(stats: &WarmupStats) -> Result<LossWeights> {
    for (name, v) in [
        ("gan", stats.mean_gan_g),
        ("pix", stats.mean_pix),
        ("id", stats.mean_id),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "warm-up magnitude for {name} is {v}; run a longer warm-up before scaling"
            )));
        }
    }
    Ok(LossWeights {
        lambda_pix: stats.mean_gan_g / stats.mean_pix / 10.0,
        lambda_id: stats.mean_gan_g / stats.mean_id / 10.0,
        auto_scale: true,
    })
}

/// Tabular least-squares discriminator on a finite support: closed-form
/// per-point optimum of the three-term objective.
pub fn optimal_discriminator_closed_form(p_old: &[f64], p_fake: &[f64], p_young: &[f64]) -> Vec<f64> {
    p_old
        .iter()
        .zip(p_fake)
        .zip(p_young)
        .map(|((&o, &f), &y)| if o + f + y > 0.0 { o / (o + f + y) } else { 0.0 })
        .collect()
}
