//! Synthetic multi-task fine-tuning at desk scale.
//!
//! A two-layer network `f(x) = W₂·relu(W₁·x)` without biases is pretrained
//! at random and fine-tuned with full-batch gradient descent on
//! `½·Σ_n ‖f(x_n) − y_n‖²`. Every iteration's parameters and layer-2 inputs
//! (the post-rectifier activations) are kept so input drift and the
//! span of the task vector can be measured exactly.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType, TensorData};
use crate::diagnostics::{input_consistency, ConsistencyReport, ParamMap, Reconstructor};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

pub const L1: &str = "l1.weight";
pub const L2: &str = "l2.weight";

// Independent ChaCha streams so a shared numeric seed never reuses draws.
const PRETRAIN_STREAM: u64 = 0;
const TASK_STREAM: u64 = 1;
const MATCHED_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
}

impl SynthDims {
    pub fn new(d_in: usize, d_h: usize, d_out: usize) -> Result<Self> {
        let d = Self { d_in, d_h, d_out };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in < 2 || self.d_h < 2 || self.d_out < 2 {
            return Err(Error::Config(format!("synthetic dims must all be >= 2, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for SynthDims {
    fn default() -> Self {
        Self { d_in: 8, d_h: 16, d_out: 4 }
    }
}

/// Both weight matrices of the two-layer network.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub l1: Matrix,
    pub l2: Matrix,
}

impl SynthParams {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let p = Self {
            l1: ckpt.matrix(L1)?,
            l2: ckpt.matrix(L2)?,
        };
        if p.l2.cols() != p.l1.rows() {
            return Err(Error::Dimension {
                op: "synthetic network",
                left: vec![p.l1.rows(), p.l1.cols()],
                right: vec![p.l2.rows(), p.l2.cols()],
            });
        }
        Ok(p)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(L1, TensorData::from_matrix(&self.l1, DType::F64));
        c.insert(L2, TensorData::from_matrix(&self.l2, DType::F64));
        c
    }

    pub fn to_map(&self) -> ParamMap {
        ParamMap::from([(L1.to_string(), self.l1.clone()), (L2.to_string(), self.l2.clone())])
    }

    pub fn dims(&self) -> SynthDims {
        SynthDims {
            d_in: self.l1.cols(),
            d_h: self.l1.rows(),
            d_out: self.l2.rows(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            l1: self.l1.sub(&other.l1)?,
            l2: self.l2.sub(&other.l2)?,
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            l1: Matrix::zeros(self.l1.rows(), self.l1.cols()),
            l2: Matrix::zeros(self.l2.rows(), self.l2.cols()),
        }
    }

    fn add_scaled(&mut self, other: &Self, c: f64) -> Result<()> {
        self.l1.add_scaled(&other.l1, c)?;
        self.l2.add_scaled(&other.l2, c)
    }

    fn norm(&self) -> f64 {
        (self.l1.frobenius_norm_sq() + self.l2.frobenius_norm_sq()).sqrt()
    }

    fn max_abs(&self) -> f64 {
        self.l1.max_abs().max(self.l2.max_abs())
    }
}

/// Deterministic random initialization: `W₁ ~ N(0, 2/d_in)`, `W₂ ~ N(0, 1/d_h)`.
pub fn pretrain(seed: u64, dims: SynthDims) -> Result<Checkpoint> {
    dims.validate()?;
    let mut r = rng(seed, PRETRAIN_STREAM);
    let l1 = gaussian(&mut r, dims.d_h, dims.d_in, (2.0 / dims.d_in as f64).sqrt());
    let l2 = gaussian(&mut r, dims.d_out, dims.d_h, (1.0 / dims.d_h as f64).sqrt());
    Ok(SynthParams { l1, l2 }.to_checkpoint())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOptions {
    pub samples: usize,
    /// Number of dominant input directions.
    pub subspace_rank: usize,
    /// Scale of the remaining input directions relative to the dominant ones.
    pub noise: f64,
    pub input_scale: f64,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            subspace_rank: 3,
            noise: 0.1,
            input_scale: 1.0,
        }
    }
}

/// One regression task: inputs concentrated near a task-specific rotated
/// subspace, targets from a random linear teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub seed: u64,
    pub dims: SynthDims,
    /// One sample per row, `N × d_in`.
    pub inputs: Matrix,
    /// `N × d_out`.
    pub targets: Matrix,
}

/// Rows form an orthonormal basis (modified Gram-Schmidt on Gaussian rows).
pub(crate) fn random_orthogonal(r: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut q = gaussian(r, n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let d: f64 = (0..n).map(|k| q.get(i, k) * q.get(j, k)).sum();
            for k in 0..n {
                q.set(i, k, q.get(i, k) - d * q.get(j, k));
            }
        }
        let norm = q.row_vector(i).norm();
        for k in 0..n {
            q.set(i, k, q.get(i, k) / norm);
        }
    }
    q
}

impl SynthTask {
    pub fn generate(seed: u64, dims: SynthDims, opts: &TaskOptions) -> Result<Self> {
        dims.validate()?;
        if opts.samples < dims.d_in {
            return Err(Error::Config(format!(
                "need at least d_in = {} samples, got {}",
                dims.d_in, opts.samples
            )));
        }
        if opts.subspace_rank == 0 || opts.subspace_rank > dims.d_in {
            return Err(Error::Config(format!("subspace rank must be in 1..={}", dims.d_in)));
        }
        if !(opts.noise >= 0.0 && opts.input_scale > 0.0) {
            return Err(Error::Config("noise must be >= 0 and input scale > 0".into()));
        }
        let mut r = rng(seed, TASK_STREAM);
        let rotation = random_orthogonal(&mut r, dims.d_in);
        let teacher = gaussian(&mut r, dims.d_out, dims.d_in, (1.0 / opts.subspace_rank as f64).sqrt());
        let coords = Matrix::from_fn(opts.samples, dims.d_in, |_, j| {
            let s = if j < opts.subspace_rank { 1.0 } else { opts.noise };
            opts.input_scale * s * r.sample::<f64, _>(StandardNormal)
        });
        let inputs = coords.matmul(&rotation)?;
        let targets = inputs.matmul_transposed(&teacher)?;
        Ok(Self {
            seed,
            dims,
            inputs,
            targets,
        })
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn input_vectors(&self) -> Vec<Vector> {
        (0..self.samples()).map(|n| self.inputs.row_vector(n)).collect()
    }
}

/// Post-rectifier activations, one sample per row.
pub fn hidden(params: &SynthParams, inputs: &Matrix) -> Result<Matrix> {
    let mut h = inputs.matmul_transposed(&params.l1)?;
    h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(h)
}

pub fn loss(params: &SynthParams, task: &SynthTask) -> Result<f64> {
    let out = hidden(params, &task.inputs)?.matmul_transposed(&params.l2)?;
    Ok(0.5 * out.sub(&task.targets)?.frobenius_norm_sq())
}

/// Loss and analytic gradient.
pub fn loss_and_gradient(params: &SynthParams, task: &SynthTask) -> Result<(f64, SynthParams)> {
    let pre = task.inputs.matmul_transposed(&params.l1)?;
    let mut h = pre.clone();
    h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let resid = h.matmul_transposed(&params.l2)?.sub(&task.targets)?;
    let loss = 0.5 * resid.frobenius_norm_sq();
    let g2 = resid.transpose().matmul(&h)?;
    let mut dh = resid.matmul(&params.l2)?;
    for (d, z) in dh.data_mut().iter_mut().zip(pre.data()) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let g1 = dh.transpose().matmul(&task.inputs)?;
    Ok((loss, SynthParams { l1: g1, l2: g2 }))
}

pub const GRADIENT_CHECK_STEP: f64 = 1e-6;
pub const GRADIENT_CHECK_TOLERANCE: f64 = 1e-6;

fn entry(p: &mut SynthParams, layer: usize, k: usize) -> &mut f64 {
    if layer == 0 {
        &mut p.l1.data_mut()[k]
    } else {
        &mut p.l2.data_mut()[k]
    }
}

/// True when moving `W₁[i, k]` by `±h` flips the sign of some sample's
/// pre-activation, i.e. the loss has a kink inside the stencil.
fn stencil_crosses_kink(pre: &Matrix, inputs: &Matrix, i: usize, k: usize, h: f64) -> bool {
    (0..inputs.rows()).any(|n| pre.get(n, i).abs() <= h * inputs.get(n, k).abs())
}

/// Relative error between the analytic gradient and central differences.
/// Layer-1 coordinates whose stencil crosses a rectifier kink are skipped,
/// since the difference quotient is not a derivative estimate there.
pub fn gradient_check(params: &SynthParams, task: &SynthTask, h: f64) -> Result<f64> {
    let (_, g) = loss_and_gradient(params, task)?;
    let pre = task.inputs.matmul_transposed(&params.l1)?;
    let d_in = params.l1.cols();
    let mut p = params.clone();
    let mut err = 0.0;
    for layer in 0..2 {
        let n = if layer == 0 { p.l1.data().len() } else { p.l2.data().len() };
        for k in 0..n {
            if layer == 0 && stencil_crosses_kink(&pre, &task.inputs, k / d_in, k % d_in, h) {
                continue;
            }
            let orig = *entry(&mut p, layer, k);
            *entry(&mut p, layer, k) = orig + h;
            let up = loss(&p, task)?;
            *entry(&mut p, layer, k) = orig - h;
            let down = loss(&p, task)?;
            *entry(&mut p, layer, k) = orig;
            let fd = (up - down) / (2.0 * h);
            let an = if layer == 0 { g.l1.data()[k] } else { g.l2.data()[k] };
            err += (fd - an).powi(2);
        }
    }
    Ok(err.sqrt() / g.norm().max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    /// Learning rate of every iteration; its length is the iteration count.
    pub etas: Vec<f64>,
    /// Compare analytic and finite-difference gradients before the first step.
    pub gradient_check: bool,
}

impl FineTuneConfig {
    pub fn constant(eta: f64, iterations: usize) -> Self {
        Self {
            etas: vec![eta; iterations],
            gradient_check: true,
        }
    }

    pub fn iterations(&self) -> usize {
        self.etas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() {
            return Err(Error::Config("fine-tuning needs at least one iteration".into()));
        }
        if let Some(t) = self.etas.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(format!("learning rate at iteration {t} must be finite and >= 0")));
        }
        Ok(())
    }
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self::constant(1e-3, 100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrace {
    pub etas: Vec<f64>,
    /// Loss at `θᵗ` for `t = 0..=T`.
    pub losses: Vec<f64>,
    /// `θᵗ` for `t = 0..=T`.
    pub params: Vec<SynthParams>,
    /// Layer-2 inputs at `θᵗ`, `N × d_h`, for `t = 0..=T`.
    pub layer2_inputs: Vec<Matrix>,
    /// `Σ_t −η_t·∇L(θᵗ⁻¹)`.
    pub accumulated: SynthParams,
}

impl SynthTrace {
    pub fn iterations(&self) -> usize {
        self.etas.len()
    }

    /// `θᵀ − θ⁰`.
    pub fn task_vector(&self) -> Result<SynthParams> {
        self.params[self.iterations()].sub(&self.params[0])
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.losses[self.iterations()]
    }

    fn inputs_at(&self, t: usize) -> Vec<Vector> {
        let m = &self.layer2_inputs[t];
        (0..m.rows()).map(|n| m.row_vector(n)).collect()
    }
}

/// Full-batch gradient descent from `pretrained` on `task`.
pub fn finetune(
    pretrained: &Checkpoint,
    task: &SynthTask,
    cfg: &FineTuneConfig,
) -> Result<(Checkpoint, SynthTrace)> {
    cfg.validate()?;
    let mut params = SynthParams::from_checkpoint(pretrained)?;
    if params.dims() != task.dims {
        return Err(Error::Config(format!(
            "network dims {:?} do not match task dims {:?}",
            params.dims(),
            task.dims
        )));
    }
    if cfg.gradient_check {
        let relative = gradient_check(&params, task, GRADIENT_CHECK_STEP)?;
        if !(relative <= GRADIENT_CHECK_TOLERANCE) {
            return Err(Error::GradientCheck { relative });
        }
    }
    let diverged = |iteration| Error::Divergence {
        iteration,
        hint: "reduce the fine-tuning learning rate",
    };
    let t_max = cfg.iterations();
    let mut trace = SynthTrace {
        etas: cfg.etas.clone(),
        losses: Vec::with_capacity(t_max + 1),
        params: Vec::with_capacity(t_max + 1),
        layer2_inputs: Vec::with_capacity(t_max + 1),
        accumulated: params.zeros_like(),
    };
    for (t, &eta) in cfg.etas.iter().enumerate() {
        let (l, g) = loss_and_gradient(&params, task)?;
        if !l.is_finite() {
            return Err(diverged(t));
        }
        trace.losses.push(l);
        trace.layer2_inputs.push(hidden(&params, &task.inputs)?);
        trace.params.push(params.clone());
        params.add_scaled(&g, -eta)?;
        trace.accumulated.add_scaled(&g, -eta)?;
    }
    let l = loss(&params, task)?;
    if !l.is_finite() || !params.max_abs().is_finite() {
        return Err(diverged(t_max));
    }
    trace.losses.push(l);
    trace.layer2_inputs.push(hidden(&params, &task.inputs)?);
    trace.params.push(params.clone());
    Ok((params.to_checkpoint(), trace))
}

fn live_pairs(a: Vec<Vector>, b: Vec<Vector>) -> (Vec<Vector>, Vec<Vector>, usize) {
    let (mut xa, mut xb, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (p, q) in a.into_iter().zip(b) {
        if p.norm() == 0.0 || q.norm() == 0.0 {
            skipped += 1;
        } else {
            xa.push(p);
            xb.push(q);
        }
    }
    (xa, xb, skipped)
}

/// Input drift of the layer-2 inputs between the first and last iterate.
/// Samples whose activations are all zero at either end carry no direction
/// and are left out; `samples` counts those kept.
pub fn verify_lemma1(trace: &SynthTrace) -> Result<ConsistencyReport> {
    let (pre, exp, _) = live_pairs(trace.inputs_at(0), trace.inputs_at(trace.iterations()));
    if pre.is_empty() {
        return Err(Error::DegenerateSample { index: 0 });
    }
    input_consistency(&pre, &exp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationResidual {
    pub iteration: usize,
    pub median_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop1Report {
    /// Relative residual of each final layer-2 input against the rows of
    /// the layer-2 task vector.
    pub task_vector_residuals: Vec<f64>,
    /// The same against a Gaussian matrix with per-row mean and std matched
    /// to the task vector.
    pub random_residuals: Vec<f64>,
    pub median_task_vector: f64,
    pub median_random: f64,
    /// Samples with all-zero activations, which have no residual.
    pub skipped: usize,
    /// Median residual of earlier iterates' inputs against the same task
    /// vector. Reported only.
    pub intermediate: Vec<IterationResidual>,
}

impl Prop1Report {
    pub fn task_vector_wins(&self) -> bool {
        self.median_task_vector < self.median_random
    }
}

/// Same shape as `m`; row `k` drawn from `N(mean_k, std_k²)` of row `k` of `m`
/// (unbiased std).
pub fn matched_gaussian(m: &Matrix, seed: u64) -> Matrix {
    let mut r = rng(seed, MATCHED_STREAM);
    let c = m.cols() as f64;
    let stats: Vec<(f64, f64)> = (0..m.rows())
        .map(|k| {
            let row = m.row(k);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c - 1.0).max(1.0);
            (mean, var.sqrt())
        })
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |k, _| {
        stats[k].0 + stats[k].1 * r.sample::<f64, _>(StandardNormal)
    })
}

fn residuals(rec: &Reconstructor, xs: &[Vector]) -> Result<Vec<f64>> {
    xs.iter().map(|x| Ok(rec.reconstruct(x)?.relative_residual)).collect()
}

/// How well the layer-2 task-vector rows reconstruct the layer-2 inputs,
/// against a matched random baseline.
pub fn verify_prop1(trace: &SynthTrace, seed: u64) -> Result<Prop1Report> {
    let tau = trace.task_vector()?.l2;
    if tau.rows() < 2 {
        return Err(Error::Config("layer-2 task vector needs at least 2 rows".into()));
    }
    let live = |t: usize| -> Vec<Vector> { trace.inputs_at(t).into_iter().filter(|x| x.norm() > 0.0).collect() };
    let t_max = trace.iterations();
    let finals = live(t_max);
    if finals.is_empty() {
        return Err(Error::DegenerateSample { index: 0 });
    }
    let rec = Reconstructor::new(&tau)?;
    let rand_rec = Reconstructor::new(&matched_gaussian(&tau, seed))?;
    let task_vector_residuals = residuals(&rec, &finals)?;
    let random_residuals = residuals(&rand_rec, &finals)?;
    let stride = (t_max / 10).max(1);
    let intermediate = (0..t_max)
        .step_by(stride)
        .map(|t| {
            Ok(IterationResidual {
                iteration: t,
                median_residual: median(&residuals(&rec, &live(t))?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Prop1Report {
        median_task_vector: median(&task_vector_residuals),
        median_random: median(&random_residuals),
        skipped: trace.layer2_inputs[t_max].rows() - finals.len(),
        task_vector_residuals,
        random_residuals,
        intermediate,
    })
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Median; `NaN` for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 50.0)
}

/// Linear interpolation between closest ranks; `NaN` for an empty slice.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let s = sorted(xs);
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 100.0) / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Setup shared by the single-task verification runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub dims: SynthDims,
    pub task: TaskOptions,
    pub finetune: FineTuneConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            dims: SynthDims::default(),
            task: TaskOptions::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub trace: SynthTrace,
    pub lemma1: ConsistencyReport,
    pub prop1: Prop1Report,
}

impl SeedRun {
    pub fn loss_ratio(&self) -> f64 {
        self.trace.final_loss() / self.trace.initial_loss()
    }
}

/// Pretrains, fine-tunes and checks one seed.
pub fn run_seed(seed: u64, cfg: &HarnessConfig) -> Result<SeedRun> {
    let pretrained = pretrain(seed, cfg.dims)?;
    let task = SynthTask::generate(seed, cfg.dims, &cfg.task)?;
    let (_, trace) = finetune(&pretrained, &task, &cfg.finetune)?;
    Ok(SeedRun {
        seed,
        lemma1: verify_lemma1(&trace)?,
        prop1: verify_prop1(&trace, seed)?,
        trace,
    })
}

/// Seeds used to calibrate the drift threshold; disjoint from the seeds the
/// verification runs use.
pub const CALIBRATION_SEEDS: std::ops::Range<u64> = 1000..1050;
/// Seeds of the verification runs.
pub const VERIFY_SEEDS: std::ops::Range<u64> = 0..20;
pub const CALIBRATION_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub config: HarnessConfig,
    pub percentile: f64,
    pub seeds: Vec<u64>,
    pub delta_direction: Vec<f64>,
    pub loss_ratio: Vec<f64>,
    /// `percentile` of `delta_direction`.
    pub threshold: f64,
}

pub fn calibrate(seeds: &[u64], cfg: &HarnessConfig, pct: f64) -> Result<Calibration> {
    let runs: Vec<SeedRun> = seeds.iter().map(|&s| run_seed(s, cfg)).collect::<Result<_>>()?;
    let delta_direction: Vec<f64> = runs.iter().map(|r| r.lemma1.delta_direction).collect();
    Ok(Calibration {
        config: cfg.clone(),
        percentile: pct,
        seeds: seeds.to_vec(),
        threshold: percentile(&delta_direction, pct),
        loss_ratio: runs.iter().map(SeedRun::loss_ratio).collect(),
        delta_direction,
    })
}

/// The calibration shipped with the crate (`fixtures/synth_calibration.json`).
pub fn bundled_calibration() -> Result<Calibration> {
    Ok(serde_json::from_str(include_str!("../fixtures/synth_calibration.json"))?)
}

/// One line of a JSON-lines trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Learning rate of the step leaving this iterate; absent for the last.
    pub eta: Option<f64>,
    pub loss: f64,
    pub samples: usize,
    pub width: usize,
    /// Layer-2 inputs, sample-major.
    pub layer2_inputs: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

pub fn write_trace_jsonl(trace: &SynthTrace, mut out: impl Write) -> Result<()> {
    for t in 0..=trace.iterations() {
        let h = &trace.layer2_inputs[t];
        let rec = TraceRecord {
            iteration: t,
            eta: trace.etas.get(t).copied(),
            loss: trace.losses[t],
            samples: h.rows(),
            width: h.cols(),
            layer2_inputs: h.data().to_vec(),
            l1: trace.params[t].l1.data().to_vec(),
            l2: trace.params[t].l2.data().to_vec(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl(input: impl BufRead) -> Result<Vec<TraceRecord>> {
    input
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Several tasks fine-tuned from one pretrained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub tasks: usize,
    pub dims: SynthDims,
    pub task: TaskOptions,
    pub finetune: FineTuneConfig,
}

/// Four tasks with rank-2 input subspaces in 24 dimensions, so tasks are
/// distinct but not orthogonal. With heavily overlapping subspaces (e.g.
/// four rank-3 tasks in 8 dimensions) no single merge keeps every task and
/// plain averaging interferes least.
impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            tasks: 4,
            dims: SynthDims { d_in: 24, d_h: 32, d_out: 4 },
            task: TaskOptions {
                samples: 64,
                subspace_rank: 2,
                noise: 0.05,
                input_scale: 1.0,
            },
            finetune: FineTuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskFamily {
    pub seed: u64,
    pub pretrained: Checkpoint,
    pub tasks: Vec<SynthTask>,
    pub experts: Vec<Checkpoint>,
}

impl TaskFamily {
    pub fn theta(&self) -> Result<ParamMap> {
        Ok(SynthParams::from_checkpoint(&self.pretrained)?.to_map())
    }

    pub fn task_vectors(&self) -> Result<Vec<ParamMap>> {
        let theta = SynthParams::from_checkpoint(&self.pretrained)?;
        self.experts
            .iter()
            .map(|e| Ok(SynthParams::from_checkpoint(e)?.sub(&theta)?.to_map()))
            .collect()
    }
}

fn task_seed(family_seed: u64, task: usize) -> u64 {
    family_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(task as u64 + 1)
}

pub fn task_family(seed: u64, cfg: &FamilyConfig) -> Result<TaskFamily> {
    if cfg.tasks == 0 {
        return Err(Error::Config("task family needs at least one task".into()));
    }
    let pretrained = pretrain(seed, cfg.dims)?;
    let tasks: Vec<SynthTask> = (0..cfg.tasks)
        .map(|i| SynthTask::generate(task_seed(seed, i), cfg.dims, &cfg.task))
        .collect::<Result<_>>()?;
    let experts = tasks
        .iter()
        .map(|t| Ok(finetune(&pretrained, t, &cfg.finetune)?.0))
        .collect::<Result<_>>()?;
    Ok(TaskFamily {
        seed,
        pretrained,
        tasks,
        experts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::reconstruct_input;

    fn small() -> (Checkpoint, SynthTask) {
        let dims = SynthDims::new(4, 8, 2).unwrap();
        let task = SynthTask::generate(7, dims, &TaskOptions { samples: 16, ..TaskOptions::default() }).unwrap();
        (pretrain(7, dims).unwrap(), task)
    }

    #[test]
    fn pretrain_shapes_and_determinism() {
        let dims = SynthDims::new(4, 8, 2).unwrap();
        let a = pretrain(1, dims).unwrap();
        assert_eq!(a.get(L1).unwrap().shape, vec![8, 4]);
        assert_eq!(a.get(L2).unwrap().shape, vec![2, 8]);
        assert_eq!(a.to_bytes().unwrap(), pretrain(1, dims).unwrap().to_bytes().unwrap());
        assert_ne!(a.to_bytes().unwrap(), pretrain(2, dims).unwrap().to_bytes().unwrap());
        assert!(SynthDims::new(1, 8, 2).is_err());
    }

    #[test]
    fn task_invariants() {
        let dims = SynthDims::default();
        let short = TaskOptions { samples: 4, ..TaskOptions::default() };
        assert!(SynthTask::generate(0, dims, &short).is_err());
        let t = SynthTask::generate(0, dims, &TaskOptions::default()).unwrap();
        assert_eq!(t.inputs.shape(), (64, 8));
        assert_eq!(t.targets.shape(), (64, 4));
        // Inputs span the input space.
        assert!(crate::tensor::Cholesky::factor(&t.inputs.gram()).is_ok());
    }

    #[test]
    fn orthogonal_rows() {
        let q = random_orthogonal(&mut rng(3, 9), 6);
        let g = q.matmul_transposed(&q).unwrap();
        assert!(g.sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let (p, task) = small();
        let params = SynthParams::from_checkpoint(&p).unwrap();
        assert!(gradient_check(&params, &task, GRADIENT_CHECK_STEP).unwrap() <= GRADIENT_CHECK_TOLERANCE);
    }

    #[test]
    fn zero_schedule_keeps_pretrained() {
        let (p, task) = small();
        let (e, trace) = finetune(&p, &task, &FineTuneConfig::constant(0.0, 5)).unwrap();
        assert_eq!(e, p);
        let tau = trace.task_vector().unwrap();
        assert_eq!(tau.max_abs(), 0.0);
        let r = verify_lemma1(&trace).unwrap();
        assert_eq!(r.delta_magnitude, 0.0);
        assert!(r.delta_direction.abs() < 1e-15);
    }

    #[test]
    fn one_step_is_negative_scaled_gradient() {
        let (p, task) = small();
        let eta = 1e-3;
        let (_, trace) = finetune(&p, &task, &FineTuneConfig::constant(eta, 1)).unwrap();
        let (_, g) = loss_and_gradient(&SynthParams::from_checkpoint(&p).unwrap(), &task).unwrap();
        let tau = trace.task_vector().unwrap();
        let mut diff = tau.clone();
        diff.add_scaled(&g, eta).unwrap();
        assert!(diff.max_abs() <= 1e-15 * (1.0 + trace.params[0].max_abs()));
    }

    #[test]
    fn accumulated_updates_equal_task_vector() {
        let (p, task) = small();
        let cfg = FineTuneConfig {
            etas: (0..50).map(|t| 1e-3 / (1.0 + t as f64)).collect(),
            gradient_check: true,
        };
        let (_, trace) = finetune(&p, &task, &cfg).unwrap();
        let diff = trace.task_vector().unwrap().sub(&trace.accumulated).unwrap();
        assert!(diff.max_abs() <= 1e-9);
        assert_eq!(trace.losses.len(), 51);
        assert_eq!(trace.layer2_inputs.len(), 51);
    }

    #[test]
    fn finetune_is_deterministic() {
        let (p, task) = small();
        let (a, ta) = finetune(&p, &task, &FineTuneConfig::default()).unwrap();
        let (b, tb) = finetune(&p, &task, &FineTuneConfig::default()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(ta, tb);
    }

    #[test]
    fn huge_rate_diverges() {
        let (p, task) = small();
        let err = finetune(&p, &task, &FineTuneConfig::constant(1e6, 50)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(FineTuneConfig::constant(1e-3, 0).validate().is_err());
        assert!(FineTuneConfig::constant(-1.0, 3).validate().is_err());
    }

    #[test]
    fn default_config_halves_the_loss() {
        for seed in 0..5 {
            let run = run_seed(seed, &HarnessConfig::default()).unwrap();
            assert!(run.loss_ratio() < 0.5, "seed {seed}: {}", run.loss_ratio());
        }
    }

    #[test]
    fn long_training_fits_an_easy_task() {
        let dims = SynthDims::new(2, 16, 2).unwrap();
        let opts = TaskOptions {
            samples: 32,
            subspace_rank: 2,
            ..TaskOptions::default()
        };
        let task = SynthTask::generate(11, dims, &opts).unwrap();
        let (_, trace) = finetune(&pretrain(11, dims).unwrap(), &task, &FineTuneConfig::constant(5e-3, 3000)).unwrap();
        assert!(trace.final_loss() < 1e-2 * trace.initial_loss(), "{:?}", trace.final_loss() / trace.initial_loss());
    }

    #[test]
    fn longer_training_drifts_more() {
        let cfg = HarnessConfig::default();
        let doubled = HarnessConfig {
            finetune: FineTuneConfig::constant(2e-3, 200),
            ..cfg.clone()
        };
        let base: Vec<f64> = (0..10).map(|s| run_seed(s, &cfg).unwrap().lemma1.delta_direction).collect();
        let more: Vec<f64> = (0..10).map(|s| run_seed(s, &doubled).unwrap().lemma1.delta_direction).collect();
        assert!(median(&more) >= median(&base));
    }

    #[test]
    fn prop1_reconstruction_examples() {
        // Exact membership and the orthogonal one-row case, through the
        // same reconstruction used by the report.
        let tau = Matrix::from_rows(&[[1.0, 2.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]]);
        let x = Vector::from(vec![2.0, 3.0, -1.0, 2.0]);
        assert!(reconstruct_input(&tau, &x).unwrap().relative_residual <= 1e-8);
        let one = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]);
        let r = reconstruct_input(&one, &Vector::from(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(r.relative_residual, 1.0);
    }

    #[test]
    fn matched_gaussian_matches_row_statistics() {
        let m = Matrix::from_fn(2, 4000, |i, j| if i == 0 { (j % 7) as f64 } else { -3.0 + 0.01 * (j % 5) as f64 });
        let g = matched_gaussian(&m, 1);
        for k in 0..2 {
            let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
            assert!((mean(g.row(k)) - mean(m.row(k))).abs() < 0.1);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&xs), 2.5);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 100.0), 4.0);
        assert!((percentile(&xs, 95.0) - 3.85).abs() < 1e-12);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let (p, task) = small();
        let (_, trace) = finetune(&p, &task, &FineTuneConfig::constant(1e-3, 3)).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&trace, &mut buf).unwrap();
        let recs = read_trace_jsonl(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3].eta, None);
        assert_eq!(recs[2].layer2_inputs, trace.layer2_inputs[2].data());
        assert_eq!(recs[1].l2, trace.params[1].l2.data());
    }

    #[test]
    fn family_experts_differ_from_pretrained() {
        let cfg = FamilyConfig::default();
        let fam = task_family(3, &cfg).unwrap();
        assert_eq!(fam.experts.len(), 4);
        let taus = fam.task_vectors().unwrap();
        assert!(taus.iter().all(|t| t[L1].max_abs() > 0.0 && t[L2].max_abs() > 0.0));
        assert_ne!(fam.tasks[0].inputs, fam.tasks[1].inputs);
    }

    #[test]
    fn bundled_calibration_matches_regeneration() {
        let seeds: Vec<u64> = CALIBRATION_SEEDS.collect();
        let fresh = calibrate(&seeds, &HarnessConfig::default(), CALIBRATION_PERCENTILE).unwrap();
        if std::env::var_os("WUDI_REGENERATE_FIXTURES").is_some() {
            let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/synth_calibration.json");
            std::fs::write(path, serde_json::to_string_pretty(&fresh).unwrap() + "\n").unwrap();
            return;
        }
        assert_eq!(bundled_calibration().unwrap(), fresh);
    }
}
