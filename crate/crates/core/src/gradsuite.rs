//! The 64-bit gradient-check suite.
//!
//! Every tape operation is checked against central finite differences on
//! random inputs for five seeds. The end-to-end check builds a tiny network
//! (width 8, two fusion layers, both prompt generators), runs a two-frame
//! sequence with gradients flowing through the state, and compares the
//! gradient of the total loss with respect to sampled coordinates of every
//! parameter tensor.

use crate::error::Result;
use crate::geometry::BBox;
use crate::head::{total_loss, LossConfig};
use crate::image::Image;
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::prompts::PromptMode;
use crate::rng::Rng;
use crate::tensor::{grad_check, grad_check_at, Tape, Tensor, Var};

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// The network loss is a long f64 reduction; a larger step keeps the
/// finite-difference rounding error well below the tolerance.
const END_TO_END_STEP: f64 = 1e-4;
const PERTURB_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Contracts `out` with fixed random weights into a scalar.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = tape.constant(randn(tape.shape(out), &mut rng))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;
type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Vec<usize>, Unary)> {
    vec![
        ("affine", vec![3, 4], |t, a| t.affine(a, 1.7, -0.3)),
        ("scale", vec![3, 4], |t, a| t.scale(a, -2.5)),
        ("gelu", vec![3, 4], |t, a| t.gelu(a)),
        ("sigmoid", vec![3, 4], |t, a| t.sigmoid(a)),
        ("exp", vec![3, 4], |t, a| t.exp(a)),
        ("log", vec![3, 4], |t, a| {
            let sq = t.mul(a, a)?;
            let pos = t.affine(sq, 1.0, 0.5)?;
            t.log(pos)
        }),
        ("abs", vec![3, 4], |t, a| t.abs(a)),
        ("clamp", vec![3, 4], |t, a| t.clamp(a, -0.5, 0.5)),
        ("reshape", vec![3, 4], |t, a| t.reshape(a, [2, 6])),
        ("transpose", vec![3, 4], |t, a| t.transpose(a)),
        ("softmax_rows", vec![3, 5], |t, a| t.softmax_rows(a)),
        ("mean_rows", vec![5, 3], |t, a| t.mean_rows(a)),
        ("slice_rows", vec![5, 3], |t, a| t.slice_rows(a, 1, 3)),
        ("slice_cols", vec![3, 5], |t, a| t.slice_cols(a, 2, 2)),
        ("split_rows", vec![5, 3], |t, a| {
            let parts = t.split_rows(a, &[2, 3])?;
            let s = t.scale(parts[1], 3.0)?;
            t.concat_rows(&[s, parts[0]])
        }),
        ("sum", vec![3, 4], |t, a| {
            let sq = t.mul(a, a)?;
            t.sum(sq)
        }),
        ("mean", vec![3, 4], |t, a| {
            let e = t.exp(a)?;
            t.mean(e)
        }),
        ("add_all", vec![3, 4], |t, a| {
            let b = t.gelu(a)?;
            let c = t.sigmoid(a)?;
            t.add_all(&[a, b, c])
        }),
    ]
}

fn binary_ops() -> Vec<(&'static str, Vec<usize>, Vec<usize>, Binary)> {
    vec![
        ("matmul", vec![3, 4], vec![4, 2], |t, a, b| t.matmul(a, b)),
        ("add", vec![3, 4], vec![3, 4], |t, a, b| t.add(a, b)),
        ("sub", vec![3, 4], vec![3, 4], |t, a, b| t.sub(a, b)),
        ("mul", vec![3, 4], vec![3, 4], |t, a, b| t.mul(a, b)),
        ("div", vec![3, 4], vec![3, 4], |t, a, b| {
            let shifted = t.affine(b, 0.2, 3.0)?;
            t.div(a, shifted)
        }),
        ("maximum", vec![3, 4], vec![3, 4], |t, a, b| t.maximum(a, b)),
        ("minimum", vec![3, 4], vec![3, 4], |t, a, b| t.minimum(a, b)),
        ("add_row", vec![3, 4], vec![4], |t, a, b| t.add_row(a, b)),
        ("concat_rows", vec![2, 3], vec![4, 3], |t, a, b| {
            t.concat_rows(&[a, b])
        }),
        ("concat_cols", vec![2, 3], vec![2, 5], |t, a, b| {
            t.concat_cols(&[a, b])
        }),
    ]
}

/// Checks one operation per seed; binary ops are checked with respect to
/// each operand in turn and report the worse of the two.
pub fn check_ops() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shape, op) in unary_ops() {
        for seed in SEEDS {
            let mut rng = Rng::new(seed);
            let x = randn(&shape, &mut rng);
            let err = grad_check(
                |t, v| {
                    let y = op(t, v)?;
                    project(t, y, seed)
                },
                &x,
                STEP,
            )?;
            out.push(CheckResult {
                name: name.into(),
                seed,
                rel_err: err,
                tolerance: OP_TOLERANCE,
            });
        }
    }
    for (name, sa, sb, op) in binary_ops() {
        for seed in SEEDS {
            let mut rng = Rng::new(seed);
            let a = randn(&sa, &mut rng);
            let b = randn(&sb, &mut rng);
            let ea = grad_check(
                |t, v| {
                    let other = t.constant(b.clone())?;
                    let y = op(t, v, other)?;
                    project(t, y, seed)
                },
                &a,
                STEP,
            )?;
            let eb = grad_check(
                |t, v| {
                    let other = t.constant(a.clone())?;
                    let y = op(t, other, v)?;
                    project(t, y, seed)
                },
                &b,
                STEP,
            )?;
            out.push(CheckResult {
                name: name.into(),
                seed,
                rel_err: ea.max(eb),
                tolerance: OP_TOLERANCE,
            });
        }
    }
    for seed in SEEDS {
        let mut rng = Rng::new(seed);
        let x = randn(&[4, 6], &mut rng);
        let gamma = randn(&[6], &mut rng);
        let beta = randn(&[6], &mut rng);
        let ln = |which: usize| {
            let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
            move |t: &mut Tape<f64>, v: Var| -> Result<Var> {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let vals = [&x, &gamma, &beta];
                let vars: Vec<Var> = (0..3)
                    .map(|i| match args[i] {
                        Some(v) => Ok(v),
                        None => t.constant(vals[i].clone()),
                    })
                    .collect::<Result<_>>()?;
                let y = t.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                project(t, y, seed)
            }
        };
        let err = grad_check(ln(0), &x, STEP)?
            .max(grad_check(ln(1), &gamma, STEP)?)
            .max(grad_check(ln(2), &beta, STEP)?);
        out.push(CheckResult {
            name: "layer_norm".into(),
            seed,
            rel_err: err,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// The tiny configuration used by the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        depth: 2,
        state_depth: 1,
        template_size: 32,
        search_size: 64,
        prompts: PromptMode::Both,
        detach_state: false,
        ..ModelConfig::default()
    }
}

fn random_image(size: usize, rng: &mut Rng) -> Image {
    let data = (0..3 * size * size)
        .map(|_| rng.uniform(0.0, 1.0) as f32)
        .collect();
    Image::new(size, size, data).expect("valid image")
}

/// Moves every parameter away from its initialization so attention maps
/// are far from uniform and no gradient is vanishingly small.
fn perturb(model: &mut Model<f64>, std: f64, rng: &mut Rng) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

/// Sum of the total loss over a two-frame sequence.
fn sequence_loss(
    model: &Model<f64>,
    tape: &mut Tape<f64>,
    p: &Bound,
    template: &Image,
    frames: &[(Image, BBox)],
) -> Result<Var> {
    let cfg = LossConfig::default();
    let mut ctx = model.net.begin_video(tape, p, template, 0)?;
    let mut losses = Vec::with_capacity(frames.len());
    for (img, gt) in frames {
        let out = model
            .net
            .step(tape, p, &mut ctx, img, model.config().detach_state)?;
        losses.push(total_loss(tape, &out.head, gt, &cfg)?.total);
    }
    tape.add_all(&losses)
}

/// End-to-end check of the total loss over a two-frame sequence, with
/// `coords_per_param` sampled coordinates of every parameter tensor.
/// Returns the worst relative error per parameter tensor.
pub fn check_end_to_end(seed: u64, coords_per_param: usize) -> Result<Vec<CheckResult>> {
    check_end_to_end_with_step(seed, coords_per_param, END_TO_END_STEP)
}

pub fn check_end_to_end_with_step(
    seed: u64,
    coords_per_param: usize,
    step: f64,
) -> Result<Vec<CheckResult>> {
    let mut model = Model::<f64>::new(tiny_config(), seed)?;
    let cfg = model.config().clone();
    let mut rng = Rng::new(seed).fork(17);
    perturb(&mut model, PERTURB_STD, &mut rng);
    let template = random_image(cfg.template_size, &mut rng);
    let frames: Vec<(Image, BBox)> = (0..2)
        .map(|_| {
            let img = random_image(cfg.search_size, &mut rng);
            let w = rng.uniform(0.15, 0.4);
            let h = rng.uniform(0.15, 0.4);
            let cx = rng.uniform(0.3, 0.7);
            let cy = rng.uniform(0.3, 0.7);
            (img, BBox::from_center(cx, cy, w, h))
        })
        .collect();

    let mut out = Vec::new();
    for (id, param) in model.params.iter() {
        let n = param.value.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            rng.choose_distinct(n, coords_per_param)
        };
        let err = grad_check_at(
            |tape, leaf| {
                let vars = model
                    .params
                    .iter()
                    .map(|(other, p)| {
                        if other == id {
                            Ok(leaf)
                        } else {
                            tape.constant(p.value.clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                sequence_loss(&model, tape, &Bound::from_vars(vars), &template, &frames)
            },
            &param.value,
            step,
            &coords,
        )?;
        out.push(CheckResult {
            name: param.name.clone(),
            seed,
            rel_err: err,
            tolerance: END_TO_END_TOLERANCE,
        });
    }
    Ok(out)
}

/// Full suite: all ops and the end-to-end check, five seeds each.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut out = check_ops()?;
    for seed in SEEDS {
        out.extend(check_end_to_end(seed, 4)?);
    }
    Ok(out)
}
