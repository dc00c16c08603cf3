//! Central finite-difference checks of reverse-mode gradients, in f64.
//!
//! Every check scalarizes the outputs with a fixed random projection
//! `L = Σ ⟨r_i, y_i⟩` and compares `∂L/∂x` against
//! `(L(x + h) − L(x − h)) / 2h` with `h = 1e-5 · max(1, |x|)`.

use std::collections::BTreeMap;

use crate::config::{ScheduleConfig, TcveConfig};
use crate::diffusion::ldm_loss;
use crate::error::{invalid, Result};
use crate::model::TcveModel;
use crate::nn::scaled_dot_product_attention;
use crate::params::{Binding, ParamBuilder, ParamStore};
use crate::rng::RngState;
use crate::spatial::{f_spa, NoHook, SpatialUnet, SpatialUnetConfig, StageId};
use crate::stu::{temporal_attention, Stu, StuAblation, StuGeometry};
use crate::stubs::encode_text;
use crate::temporal::{f_tem, TemporalUnet, TemporalUnetConfig};
use crate::tensor::{concat, conv1d, conv2d, conv3d, group_norm, linear, matmul, repeat_interleave, resize_linear_axis};
use crate::tensor::{resize_trilinear, softmax, Tensor};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Denominator floor, so gradients that are zero up to rounding compare
/// by absolute error.
pub const REL_FLOOR: f64 = 1e-4;
const STEP: f64 = 1e-5;

type InputFn<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
type ParamFn<'a> = &'a dyn Fn(&Binding<'_, f64>) -> Result<Vec<Tensor<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    /// Coordinate with the largest error, as `input[index]`.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn step(x: f64) -> f64 {
    STEP * x.abs().max(1.0)
}

fn project(outputs: &[Tensor<f64>], dirs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let mut total: Option<Tensor<f64>> = None;
    for (y, r) in outputs.iter().zip(dirs) {
        let term = y.mul(r)?.sum();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid("gradcheck: function returned no outputs"))
}

fn directions(outputs: &[Tensor<f64>], rng: &mut RngState) -> Vec<Tensor<f64>> {
    outputs
        .iter()
        .map(|y| rng.normal_tensor::<f64>(y.shape()).scale(1.0 / (y.numel() as f64).sqrt()))
        .collect()
}

/// Up to `limit` distinct indices below `n`, in increasing order.
fn sample_indices(n: usize, limit: usize, rng: &mut RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > limit {
        for i in 0..limit {
            let j = rng.range_inclusive(i, n - 1);
            idx.swap(i, j);
        }
        idx.truncate(limit);
        idx.sort_unstable();
    }
    idx
}

struct Tracker {
    worst: f64,
    at: String,
    count: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            worst: 0.0,
            at: String::new(),
            count: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.count += 1;
        if e > self.worst || e.is_nan() {
            self.worst = e;
            self.at = at();
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> GradCheck {
        GradCheck {
            name: name.to_string(),
            max_rel_err: self.worst,
            tolerance,
            coordinates: self.count,
            worst: self.at,
        }
    }
}

/// Checks the gradient of `f` with respect to each of `inputs`, at no
/// more than `limit` coordinates per input.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    f: InputFn<'_>,
    tolerance: f64,
    limit: usize,
    rng: &mut RngState,
) -> Result<GradCheck> {
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|x| Tensor::from_vec(x.shape(), x.to_vec()).map(Tensor::requires_grad))
        .collect::<Result<_>>()?;
    let outputs = f(&leaves)?;
    let dirs = directions(&outputs, rng);
    project(&outputs, &dirs)?.backward()?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> { project(&f(xs)?, &dirs)?.item() };
    let mut tracker = Tracker::new();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in sample_indices(leaf.numel(), limit, rng) {
            let base = inputs[i].data()[j];
            let h = step(base);
            let probe = |v: f64| -> Result<f64> {
                let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = xs[i].to_vec();
                data[j] = v;
                xs[i] = Tensor::from_vec(inputs[i].shape(), data)?;
                eval(&xs)
            };
            let numeric = (probe(base + h)? - probe(base - h)?) / (2.0 * h);
            tracker.record(analytic[j], numeric, || format!("input{i}[{j}]"));
        }
    }
    Ok(tracker.finish(name, tolerance))
}

/// Copy of `store` with every tensor trainable, so a tracked binding
/// yields gradients for all of them.
pub fn all_trainable(store: &ParamStore<f64>) -> Result<ParamStore<f64>> {
    let mut out = ParamStore::new();
    for p in store.iter() {
        out.insert(&p.name, &p.shape, p.data.to_vec(), true)?;
    }
    Ok(out)
}

/// Checks parameter gradients of `f`, at `per_tensor` coordinates of every
/// tensor in `store`.
pub fn check_params(
    name: &str,
    store: &ParamStore<f64>,
    f: ParamFn<'_>,
    tolerance: f64,
    per_tensor: usize,
    rng: &mut RngState,
) -> Result<GradCheck> {
    let store = all_trainable(store)?;
    let (dirs, grads): (Vec<Tensor<f64>>, BTreeMap<String, Vec<f64>>) = {
        let bind = store.bind(true);
        let outputs = f(&bind)?;
        let dirs = directions(&outputs, rng);
        project(&outputs, &dirs)?.backward()?;
        (dirs, bind.grads())
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> { project(&f(&s.bind(false))?, &dirs)?.item() };
    let mut tracker = Tracker::new();
    let mut probe_store = store.clone();
    for p in store.iter() {
        let analytic = &grads[&p.name];
        for j in sample_indices(p.numel(), per_tensor, rng) {
            let base = p.data[j];
            let h = step(base);
            probe_store.data_mut(&p.name)?[j] = base + h;
            let plus = eval(&probe_store)?;
            probe_store.data_mut(&p.name)?[j] = base - h;
            let minus = eval(&probe_store)?;
            probe_store.data_mut(&p.name)?[j] = base;
            tracker.record(analytic[j], (plus - minus) / (2.0 * h), || format!("{}[{j}]", p.name));
        }
    }
    Ok(tracker.finish(name, tolerance))
}

/// Adds `N(0, std²)` noise to every tensor whose name starts with one of
/// `prefixes`, moving zero- and Dirac-initialized weights off their
/// special points.
pub fn jitter(store: &mut ParamStore<f64>, prefixes: &[&str], std: f64, rng: &mut RngState) -> Result<()> {
    let names: Vec<String> = store
        .iter()
        .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        for v in store.data_mut(&name)?.iter_mut() {
            *v += std * rng.normal();
        }
    }
    Ok(())
}

type SuiteFn = fn(&mut RngState) -> Result<Vec<GradCheck>>;

pub struct Suite {
    pub name: &'static str,
    pub composite: bool,
    run: SuiteFn,
}

impl Suite {
    pub fn run(&self, seed: u64) -> Result<Vec<GradCheck>> {
        (self.run)(&mut RngState::new(seed).split(fnv(self.name)))
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub const SUITES: &[Suite] = &[
    Suite { name: "elementwise", composite: false, run: elementwise },
    Suite { name: "reduction", composite: false, run: reduction },
    Suite { name: "layout", composite: false, run: layout },
    Suite { name: "matmul", composite: false, run: matmul_suite },
    Suite { name: "softmax", composite: false, run: softmax_suite },
    Suite { name: "norm", composite: false, run: norm_suite },
    Suite { name: "conv", composite: false, run: conv_suite },
    Suite { name: "resize", composite: false, run: resize_suite },
    Suite { name: "attention", composite: false, run: attention_suite },
    Suite { name: "composite", composite: true, run: composite_suite },
    Suite { name: "spatial-unet", composite: true, run: spatial_suite },
    Suite { name: "temporal-unet", composite: true, run: temporal_suite },
    Suite { name: "stu", composite: true, run: stu_suite },
    Suite { name: "joint-denoiser", composite: true, run: joint_suite },
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

/// Runs every suite, or only `module` when given.
pub fn run_suites(module: Option<&str>, seed: u64) -> Result<Vec<GradCheck>> {
    let chosen: Vec<&Suite> = match module {
        None => SUITES.iter().collect(),
        Some(m) => {
            let s = SUITES.iter().find(|s| s.name == m).ok_or_else(|| {
                invalid(format!("unknown gradcheck module `{m}` (known: {})", suite_names().join(", ")))
            })?;
            vec![s]
        }
    };
    let mut out = Vec::new();
    for s in chosen {
        out.extend(s.run(seed)?);
    }
    Ok(out)
}

const LIMIT: usize = 48;

fn rand(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

fn op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    rng: &mut RngState,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    check_inputs(name, &inputs, &|xs| Ok(vec![f(xs)?]), OP_TOLERANCE, LIMIT, rng)
}

fn elementwise(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let mut v = Vec::new();
    let ab = |rng: &mut RngState| vec![rand(rng, &[2, 1, 3]), rand(rng, &[4, 3])];
    let i = ab(rng);
    v.push(op("add", i, rng, |x| x[0].add(&x[1]))?);
    let i = ab(rng);
    v.push(op("sub", i, rng, |x| x[0].sub(&x[1]))?);
    let i = ab(rng);
    v.push(op("mul", i, rng, |x| x[0].mul(&x[1]))?);
    let i = vec![rand(rng, &[3, 4])];
    v.push(op("scale", i, rng, |x| Ok(x[0].scale(-1.7)))?);
    let i = vec![rand(rng, &[3, 4])];
    v.push(op("add_scalar", i, rng, |x| Ok(x[0].add_scalar(0.3)))?);
    let i = vec![rand(rng, &[3, 4])];
    v.push(op("square", i, rng, |x| Ok(x[0].square()))?);
    let i = vec![rand(rng, &[3, 4]).scale(3.0)];
    v.push(op("sigmoid", i, rng, |x| Ok(x[0].sigmoid()))?);
    let i = vec![rand(rng, &[3, 4]).scale(3.0)];
    v.push(op("silu", i, rng, |x| Ok(x[0].silu()))?);
    Ok(v)
}

fn reduction(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let i = vec![rand(rng, &[3, 5])];
    let a = op("sum", i, rng, |x| Ok(x[0].square().sum()))?;
    let i = vec![rand(rng, &[3, 5])];
    let b = op("mean", i, rng, |x| Ok(x[0].square().mean()))?;
    Ok(vec![a, b])
}

fn layout(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let mut v = Vec::new();
    let i = vec![rand(rng, &[2, 3, 4])];
    v.push(op("reshape", i, rng, |x| x[0].reshape(&[6, 4]))?);
    let i = vec![rand(rng, &[2, 3, 4, 5])];
    v.push(op("permute", i, rng, |x| x[0].permute(&[2, 0, 3, 1]))?);
    let i = vec![rand(rng, &[2, 3, 4])];
    v.push(op("transpose_last", i, rng, |x| x[0].transpose_last())?);
    let i = vec![rand(rng, &[2, 3, 4]), rand(rng, &[2, 1, 4])];
    v.push(op("concat", i, rng, |x| concat(x, 1))?);
    let i = vec![rand(rng, &[2, 3, 4])];
    v.push(op("f_spa", i.into_iter().map(|t| t.reshape(&[1, 2, 3, 2, 2])).collect::<Result<_>>()?, rng, |x| f_spa(&x[0]))?);
    let i = vec![rand(rng, &[1, 2, 3, 2, 2])];
    v.push(op("f_tem", i, rng, |x| f_tem(&x[0]))?);
    Ok(v)
}

fn matmul_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let i = vec![rand(rng, &[3, 4]), rand(rng, &[4, 2])];
    let a = op("matmul", i, rng, |x| matmul(&x[0], &x[1]))?;
    let i = vec![rand(rng, &[2, 3, 4]), rand(rng, &[2, 4, 5])];
    let b = op("matmul_batched", i, rng, |x| matmul(&x[0], &x[1]))?;
    let i = vec![rand(rng, &[5, 3]), rand(rng, &[4, 3]), rand(rng, &[4])];
    let c = op("linear", i, rng, |x| linear(&x[0], &x[1], Some(&x[2])))?;
    Ok(vec![a, b, c])
}

fn softmax_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let i = vec![rand(rng, &[3, 4, 5]).scale(2.0)];
    let a = op("softmax_mid", i, rng, |x| softmax(&x[0], 1))?;
    let i = vec![rand(rng, &[3, 4, 5]).scale(2.0)];
    let b = op("softmax_last", i, rng, |x| softmax(&x[0], 2))?;
    Ok(vec![a, b])
}

fn norm_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let i = vec![rand(rng, &[2, 4, 3, 3]).add_scalar(0.5), rand(rng, &[4]), rand(rng, &[4])];
    let a = op("group_norm", i, rng, |x| group_norm(&x[0], 2, &x[1], &x[2]))?;
    let i = vec![rand(rng, &[2, 6, 5]), rand(rng, &[6]), rand(rng, &[6])];
    let b = op("group_norm_1d", i, rng, |x| group_norm(&x[0], 3, &x[1], &x[2]))?;
    Ok(vec![a, b])
}

fn conv_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let mut v = Vec::new();
    let i = vec![rand(rng, &[2, 3, 7]), rand(rng, &[4, 3, 3]), rand(rng, &[4])];
    v.push(op("conv1d", i, rng, |x| conv1d(&x[0], &x[1], Some(&x[2]), 1, 1))?);
    let i = vec![rand(rng, &[2, 3, 8]), rand(rng, &[4, 3, 3]), rand(rng, &[4])];
    v.push(op("conv1d_stride2", i, rng, |x| conv1d(&x[0], &x[1], Some(&x[2]), 2, 1))?);
    let i = vec![rand(rng, &[2, 2, 5, 5]), rand(rng, &[3, 2, 3, 3]), rand(rng, &[3])];
    v.push(op("conv2d", i, rng, |x| conv2d(&x[0], &x[1], Some(&x[2]), 1, 1))?);
    let i = vec![rand(rng, &[1, 2, 6, 6]), rand(rng, &[3, 2, 3, 3])];
    v.push(op("conv2d_stride2", i, rng, |x| conv2d(&x[0], &x[1], None, 2, 1))?);
    let i = vec![rand(rng, &[1, 2, 3, 4, 4]), rand(rng, &[2, 2, 3, 3, 3]), rand(rng, &[2])];
    v.push(op("conv3d", i, rng, |x| conv3d(&x[0], &x[1], Some(&x[2]), 1, 1))?);
    Ok(v)
}

fn resize_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let mut v = Vec::new();
    let i = vec![rand(rng, &[2, 3, 4])];
    v.push(op("resize_up", i, rng, |x| resize_linear_axis(&x[0], 2, 7))?);
    let i = vec![rand(rng, &[2, 6, 3])];
    v.push(op("resize_down", i, rng, |x| resize_linear_axis(&x[0], 1, 4))?);
    let i = vec![rand(rng, &[1, 2, 2, 3, 3])];
    v.push(op("resize_trilinear", i, rng, |x| resize_trilinear(&x[0], 4, 2, 5))?);
    let i = vec![rand(rng, &[2, 3, 2])];
    v.push(op("repeat_interleave", i, rng, |x| repeat_interleave(&x[0], 2, 3))?);
    Ok(v)
}

fn attention_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let i = vec![rand(rng, &[2, 3, 4]), rand(rng, &[2, 5, 4]), rand(rng, &[2, 5, 3])];
    let a = op("scaled_dot_product_attention", i, rng, |x| scaled_dot_product_attention(&x[0], &x[1], &x[2]))?;
    let i = vec![rand(rng, &[1, 3, 4, 2, 2]), rand(rng, &[3, 3]), rand(rng, &[3, 3]), rand(rng, &[3, 3])];
    let b = op("temporal_attention", i, rng, |x| temporal_attention(&x[0], &x[1], &x[2], &x[3]))?;
    Ok(vec![a, b])
}

/// conv → group norm → SiLU → self-attention over pixels.
fn composite_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let inputs = vec![
        rand(rng, &[2, 3, 4, 4]),
        rand(rng, &[4, 3, 3, 3]).scale(0.5),
        rand(rng, &[4]),
        rand(rng, &[4]).add_scalar(1.0),
        rand(rng, &[4]),
    ];
    let f = |x: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> {
        let h = conv2d(&x[0], &x[1], Some(&x[2]), 1, 1)?;
        let h = group_norm(&h, 2, &x[3], &x[4])?.silu();
        let tokens = h.reshape(&[2, 4, 16])?.transpose_last()?;
        Ok(vec![scaled_dot_product_attention(&tokens, &tokens, &tokens)?])
    };
    Ok(vec![check_inputs("conv_norm_attention", &inputs, &f, COMPOSITE_TOLERANCE, LIMIT, rng)?])
}

/// Two-level configuration small enough for per-tensor probing.
pub fn tiny_config() -> TcveConfig {
    TcveConfig {
        spatial: SpatialUnetConfig {
            channel_schedule: vec![4, 8],
            text_dim: 8,
            time_dim: 8,
            ..SpatialUnetConfig::default()
        },
        temporal: TemporalUnetConfig {
            time_dim: 8,
            ..TemporalUnetConfig::default()
        },
        schedule: ScheduleConfig {
            timesteps: 100,
            ddim_steps: 10,
        },
        ..TcveConfig::default()
    }
}

const PER_TENSOR: usize = 2;

fn spatial_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let cfg = tiny_config().spatial;
    let mut store = ParamStore::new();
    let unet = SpatialUnet::new(&mut ParamBuilder::new(&mut store, rng.split(1), false, "spatial"), &cfg)?;
    let z = rand(rng, &[2, 12, 4, 4]);
    let prompt = encode_text("a small red kite", cfg.text_dim).to_tensor::<f64>();
    let f = |bind: &Binding<'_, f64>| -> Result<Vec<Tensor<f64>>> {
        let (out, feats) = unet.forward(bind, &z, 17, &prompt, &NoHook)?;
        Ok(std::iter::once(out).chain(feats.into_iter().map(|(_, t)| t)).collect())
    };
    Ok(vec![check_params("spatial_unet_params", &store, &f, COMPOSITE_TOLERANCE, PER_TENSOR, rng)?])
}

fn temporal_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let cfg = tiny_config().temporal;
    let mut store = ParamStore::new();
    let unet = TemporalUnet::new(&mut ParamBuilder::new(&mut store, rng.split(1), true, "temporal"), &cfg, 6)?;
    let x = rand(rng, &[3, 6, 4]);
    let f = |bind: &Binding<'_, f64>| -> Result<Vec<Tensor<f64>>> {
        Ok(unet.forward(bind, &x, 33)?.into_iter().map(|(_, t)| t).collect())
    };
    Ok(vec![check_params("temporal_unet_params", &store, &f, COMPOSITE_TOLERANCE, PER_TENSOR, rng)?])
}

fn stu_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let mut store = ParamStore::new();
    let geometry = StuGeometry {
        temporal_channels: 3,
        spatial_channels: 4,
    };
    let unit = Stu::new(
        &mut ParamBuilder::new(&mut store, rng.split(1), true, "stu"),
        StageId::Down(0),
        geometry,
        0.5,
        StuAblation::default(),
    )?;
    jitter(&mut store, &["stu."], 0.2, rng)?;
    let x_spa = rand(rng, &[4, 4, 2, 2]);
    let x_tem = rand(rng, &[4, 3, 2]);
    let f = |bind: &Binding<'_, f64>| -> Result<Vec<Tensor<f64>>> { Ok(vec![unit.forward(bind, &x_spa, &x_tem, (1, 2, 2))?]) };
    Ok(vec![check_params("stu_params", &store, &f, COMPOSITE_TOLERANCE, 4, rng)?])
}

/// The joint denoiser under the training loss, with the zero-initialized
/// value projections and Dirac kernels perturbed so every branch is live.
fn joint_suite(rng: &mut RngState) -> Result<Vec<GradCheck>> {
    let cfg = tiny_config();
    let mut model = TcveModel::<f64>::new(&cfg, 5)?;
    jitter(&mut model.params, &["stu.", "temporal."], 0.05, rng)?;
    let z0 = rand(rng, &[1, 12, 4, 4, 4]);
    let prompt = encode_text("a small red kite", cfg.spatial.text_dim);
    let sched = cfg.schedule.build()?;
    let loss_rng = rng.split(2);
    let model = &model;
    let f = |bind: &Binding<'_, f64>| -> Result<Vec<Tensor<f64>>> {
        let denoiser = |z: &Tensor<f64>, t: usize, p: &_| model.denoise(bind, z, t, p);
        Ok(vec![ldm_loss(&denoiser, &z0, &prompt, &mut loss_rng.clone(), &sched)?.loss])
    };
    Ok(vec![check_params("joint_denoiser_loss", &model.params, &f, COMPOSITE_TOLERANCE, PER_TENSOR, rng)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
        // detach hides the quadratic term from autograd, so the analytic
        // gradient is off by 2x.
        let f = |xs: &[Tensor<f64>]| -> Result<Vec<Tensor<f64>>> { Ok(vec![xs[0].mul(&xs[0].detach())?]) };
        let r = check_inputs("broken", &[x], &f, OP_TOLERANCE, 8, &mut RngState::new(0)).unwrap();
        assert!(!r.passed(), "{r:?}");
    }

    #[test]
    fn unknown_module_rejected() {
        assert!(run_suites(Some("nope"), 0).is_err());
    }

    #[test]
    fn op_suites_pass() {
        for s in SUITES.iter().filter(|s| !s.composite) {
            for r in s.run(0).unwrap() {
                assert!(r.passed(), "{r:?}");
            }
        }
    }
}
