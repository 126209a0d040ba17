//! Central finite-difference verification of every differentiable
//! operation and every loss term.
//!
//! The numeric side rebuilds the forward pass from scratch around each
//! perturbed element and never touches the reverse sweep, so it stays an
//! independent oracle for `backward`. Everything here runs at f64; the
//! stated tolerance is not attainable at f32.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::networks::{Generator, GeneratorConfig};
use crate::objectives::{self, FrozenEncoder, IdentityEncoder, LossWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PERTURBATION: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// How a case's leaf tensors are initialized.
#[derive(Clone, Copy)]
enum Init {
    /// Uniform in [-1, 1].
    Uniform,
    /// Magnitude in [0.2, 1.2] with random sign; keeps values away from
    /// the relu kink so the finite difference is meaningful.
    AwayFromZero,
    /// Uniform in [0.5, 1.5]; for scale-like parameters.
    Positive,
}

fn make_tensor(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| match init {
            Init::Uniform => rng.uniform(-1.0, 1.0),
            Init::AwayFromZero => {
                let mag = rng.uniform(0.2, 1.2);
                if rng.next_below(2) == 0 {
                    mag
                } else {
                    -mag
                }
            }
            Init::Positive => rng.uniform(0.5, 1.5),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("case shape")
}

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var], &mut Rng) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Init)>,
    build: Box<BuildFn>,
}

/// Relative error with a floor on the denominator: near-zero gradients
/// are compared against a scale set by the loss magnitude, since central
/// differences of a loss of size f carry ~f * 1e-16 / (2 eps) of plain
/// floating-point noise.
fn relative_error(a: f64, n: f64, loss_scale: f64) -> f64 {
    let floor = 1e-6 * loss_scale.abs().max(1.0);
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn run_case(case: &Case, seeds: &[u64]) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    for &seed in seeds {
        let mut init_rng = Rng::new(seed);
        let tensors: Vec<Tensor<f64>> = case
            .inputs
            .iter()
            .map(|(shape, init)| make_tensor(shape, *init, &mut init_rng))
            .collect();

        // analytic gradients
        let mut g = Graph::new();
        let leaves: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let mut aux_rng = Rng::new(seed ^ 0xA0A0_A0A0);
        let loss = (case.build)(&mut g, &leaves, &mut aux_rng).expect("case builds");
        g.backward(loss).expect("case backward");
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default())
            .collect();

        // numeric forward-only evaluation
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let leaves: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
            let mut aux_rng = Rng::new(seed ^ 0xA0A0_A0A0);
            let loss = (case.build)(&mut g, &leaves, &mut aux_rng).expect("case builds");
            g.value(loss).item().expect("scalar loss")
        };
        let loss_scale = eval(&tensors);

        for (i, tensor) in tensors.iter().enumerate() {
            if analytic[i].is_empty() {
                continue;
            }
            for j in 0..tensor.numel() {
                let mut plus = tensors.to_vec();
                plus[i].data_mut()[j] += PERTURBATION;
                let mut minus = tensors.to_vec();
                minus[i].data_mut()[j] -= PERTURBATION;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * PERTURBATION);
                let rel = relative_error(analytic[i][j], numeric, loss_scale);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    GradCheckReport {
        name: case.name.to_string(),
        max_rel_err: max_rel,
        passed: max_rel < TOLERANCE,
    }
}

fn cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();

    // a random projection makes map-valued outputs scalar without the
    // cancellation a plain sum can hide
    fn project(g: &mut Graph<f64>, v: Var, rng: &mut Rng) -> Var {
        let shape = g.shape(v).to_vec();
        let proj = g.constant(make_tensor(&shape, Init::Uniform, rng));
        let prod = g.mul(v, proj).expect("projection shapes");
        g.sum_all(prod)
    }

    cases.push(Case {
        name: "add",
        inputs: vec![(vec![3, 4], Init::Uniform), (vec![3, 4], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.add(v[0], v[1])?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "sub",
        inputs: vec![(vec![3, 4], Init::Uniform), (vec![3, 4], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.sub(v[0], v[1])?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "mul",
        inputs: vec![(vec![3, 4], Init::Uniform), (vec![3, 4], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.mul(v[0], v[1])?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "add_scalar",
        inputs: vec![(vec![6], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.add_scalar(v[0], 0.37);
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "mul_scalar",
        inputs: vec![(vec![6], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.mul_scalar(v[0], -1.81);
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![(vec![4, 4], Init::AwayFromZero)],
        build: Box::new(|g, v, rng| {
            let s = g.relu(v[0]);
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "leaky_relu",
        inputs: vec![(vec![4, 4], Init::AwayFromZero)],
        build: Box::new(|g, v, rng| {
            let s = g.leaky_relu(v[0], 0.2);
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "tanh",
        inputs: vec![(vec![4, 4], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.tanh(v[0]);
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "conv2d",
        inputs: vec![
            (vec![2, 2, 5, 5], Init::Uniform),
            (vec![3, 2, 3, 3], Init::Uniform),
        ],
        build: Box::new(|g, v, rng| {
            let s = g.conv2d(v[0], v[1], 2, 1)?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "conv2d_stride1",
        inputs: vec![
            (vec![1, 2, 4, 4], Init::Uniform),
            (vec![2, 2, 3, 3], Init::Uniform),
        ],
        build: Box::new(|g, v, rng| {
            let s = g.conv2d(v[0], v[1], 1, 0)?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "conv2d_transpose",
        inputs: vec![
            (vec![2, 3, 3, 3], Init::Uniform),
            (vec![3, 2, 4, 4], Init::Uniform),
        ],
        build: Box::new(|g, v, rng| {
            let s = g.conv2d_transpose(v[0], v[1], 2, 1)?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "channel_bias",
        inputs: vec![(vec![2, 3, 4, 4], Init::Uniform), (vec![3], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.channel_bias(v[0], v[1])?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "instance_norm",
        inputs: vec![
            (vec![2, 3, 4, 4], Init::Uniform),
            (vec![3], Init::Positive),
            (vec![3], Init::Uniform),
        ],
        build: Box::new(|g, v, rng| {
            let s = g.instance_norm(v[0], v[1], v[2])?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "concat",
        inputs: vec![
            (vec![2, 2, 3, 3], Init::Uniform),
            (vec![2, 3, 3, 3], Init::Uniform),
        ],
        build: Box::new(|g, v, rng| {
            let s = g.concat(&[v[0], v[1]], 1)?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "tile_spatial",
        inputs: vec![(vec![2, 3], Init::Uniform)],
        build: Box::new(|g, v, rng| {
            let s = g.tile_spatial(v[0], 4, 4)?;
            Ok(project(g, s, rng))
        }),
    });
    cases.push(Case {
        name: "sum_all",
        inputs: vec![(vec![3, 5], Init::Uniform)],
        build: Box::new(|g, v, _| Ok(g.sum_all(v[0]))),
    });
    cases.push(Case {
        name: "mean_all",
        inputs: vec![(vec![3, 5], Init::Uniform)],
        build: Box::new(|g, v, _| Ok(g.mean_all(v[0]))),
    });
    cases.push(Case {
        name: "frobenius_sq",
        inputs: vec![(vec![2, 6], Init::Uniform), (vec![2, 6], Init::Uniform)],
        build: Box::new(|g, v, _| g.frobenius_sq(v[0], v[1])),
    });
    cases.push(Case {
        name: "composite_conv_relu_sum",
        inputs: vec![
            (vec![1, 2, 6, 6], Init::Uniform),
            (vec![3, 2, 3, 3], Init::Uniform),
        ],
        build: Box::new(|g, v, _| {
            let c = g.conv2d(v[0], v[1], 1, 1)?;
            let r = g.relu(c);
            Ok(g.sum_all(r))
        }),
    });

    // loss terms, differentiated w.r.t. the network outputs they consume
    cases.push(Case {
        name: "loss_gan_g",
        inputs: vec![(vec![2, 1, 3, 3], Init::Uniform)],
        build: Box::new(|g, v, _| Ok(objectives::loss_gan_g(g, v[0]))),
    });
    cases.push(Case {
        name: "loss_gan_d",
        inputs: vec![
            (vec![2, 1, 3, 3], Init::Uniform),
            (vec![2, 1, 3, 3], Init::Uniform),
            (vec![2, 1, 3, 3], Init::Uniform),
        ],
        build: Box::new(|g, v, _| Ok(objectives::loss_gan_d(g, v[0], v[1], v[2]))),
    });
    cases.push(Case {
        name: "loss_pix",
        inputs: vec![
            (vec![2, 3, 4, 4], Init::Uniform),
            (vec![2, 3, 4, 4], Init::Uniform),
        ],
        build: Box::new(|g, v, _| objectives::loss_pix(g, v[0], v[1])),
    });
    cases.push(Case {
        name: "loss_id",
        inputs: vec![
            (vec![1, 3, 16, 16], Init::Uniform),
            (vec![1, 3, 16, 16], Init::Uniform),
        ],
        build: Box::new(|g, v, _| {
            let encoder = IdentityEncoder::<f64>::new(99);
            let eb = encoder.bind(g);
            objectives::loss_id(g, v[0], v[1], &encoder, &eb)
        }),
    });
    cases.push(Case {
        name: "loss_total_g",
        inputs: vec![
            (vec![1, 3, 16, 16], Init::Uniform),
            (vec![1, 3, 16, 16], Init::Uniform),
            (vec![1, 1, 2, 2], Init::Uniform),
        ],
        build: Box::new(|g, v, _| {
            let encoder = IdentityEncoder::<f64>::new(99);
            let eb = encoder.bind(g);
            let gan = objectives::loss_gan_g(g, v[2]);
            let pix = objectives::loss_pix(g, v[0], v[1])?;
            let id = objectives::loss_id(g, v[0], v[1], &encoder, &eb)?;
            let w = LossWeights::fixed(0.3, 0.7).expect("weights");
            Ok(objectives::total_loss_g(g, gan, Some(pix), Some(id), &w))
        }),
    });
    // a miniature generator end to end: pixel loss against the input.
    // Weights are scaled well above the training init so activations sit
    // far from the instance-norm epsilon floor, where finite differences
    // lose accuracy.
    cases.push(Case {
        name: "generator_pix_chain",
        inputs: vec![(vec![1, 3, 16, 16], Init::Uniform)],
        build: Box::new(|g, v, _| {
            let mut gen = Generator::<f64>::new(
                GeneratorConfig {
                    resolution: 16,
                    base_channels: 2,
                    num_residual_blocks: 1,
                    attribute_dim: 2,
                    use_attribute_embedding: false,
                },
                1234,
            )?;
            for i in 0..gen.params.len() {
                if gen.params.name_at(i).ends_with(".weight") {
                    for w in gen.params.tensor_at_mut(i).data_mut() {
                        *w *= 15.0;
                    }
                }
            }
            let binding = gen.bind(g, false);
            let scaled = g.tanh(v[0]); // keep inputs inside (-1,1)
            let out = gen.forward(g, &binding, scaled, &dummy_attrs(1))?;
            objectives::loss_pix(g, out, scaled)
        }),
    });
    cases
}

fn dummy_attrs(n: usize) -> Vec<crate::attributes::AttributeVector> {
    let schema = crate::attributes::AttributeSchema::parse("g:a|b").expect("schema");
    (0..n).map(|_| schema.encode(&["a"]).expect("encode")).collect()
}

/// Run the whole suite over the given seeds (one report per op).
pub fn run_all(seeds: &[u64]) -> Vec<GradCheckReport> {
    cases().iter().map(|c| run_case(c, seeds)).collect()
}

/// Default seed set for the acceptance gate.
pub fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}
