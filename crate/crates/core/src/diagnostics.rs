//! Interference and input-subspace diagnostics.
//!
//! None of these need the merge solver; they take explicit layer inputs and
//! measure how well task-vector rows explain them, how far inputs drift
//! during fine-tuning, and how far a merged network's activations are from
//! an expert's.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{cosine, Cholesky, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// Mean of `1 − cos(x_exp, x_pre)`, in `[0, 2]`.
    pub delta_direction: f64,
    /// Mean of `|‖x_exp‖ − ‖x_pre‖| / ‖x_pre‖`.
    pub delta_magnitude: f64,
    pub samples: usize,
}

pub fn input_consistency(x_pre: &[Vector], x_exp: &[Vector]) -> Result<ConsistencyReport> {
    if x_pre.len() != x_exp.len() {
        return Err(Error::Dimension {
            op: "input consistency",
            left: vec![x_pre.len()],
            right: vec![x_exp.len()],
        });
    }
    if x_pre.is_empty() {
        return Err(Error::Config("input consistency needs at least one sample".into()));
    }
    let (mut dir, mut mag) = (0.0, 0.0);
    for (index, (p, e)) in x_pre.iter().zip(x_exp).enumerate() {
        let np = p.norm();
        if np == 0.0 || e.norm() == 0.0 {
            return Err(Error::DegenerateSample { index });
        }
        dir += 1.0 - cosine(e, p)?;
        mag += (e.norm() - np).abs() / np;
    }
    let n = x_pre.len() as f64;
    Ok(ConsistencyReport {
        delta_direction: dir / n,
        delta_magnitude: mag / n,
        samples: x_pre.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionResult {
    /// One coefficient per row of the basis.
    pub coefficients: Vector,
    /// `x − basisᵀ·α`.
    pub residual: Vector,
    pub relative_residual: f64,
}

/// Relative diagonal jitter added to the row Gram `τ·τᵀ` before factoring,
/// scaled by `trace(τ·τᵀ)/K`.
pub const GRAM_JITTER: f64 = 1e-12;

/// Least-squares reconstruction of inputs from the rows of a fixed basis,
/// with the normal equations factored once.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    basis: Matrix,
    factor: Option<Cholesky>,
}

impl Reconstructor {
    pub fn new(basis: &Matrix) -> Result<Self> {
        Self::with_jitter(basis, GRAM_JITTER)
    }

    pub fn with_jitter(basis: &Matrix, jitter: f64) -> Result<Self> {
        let mut gram = basis.matmul_transposed(basis)?;
        let k = basis.rows();
        let trace = gram.trace();
        let factor = if trace > 0.0 {
            let j = jitter * trace / k as f64;
            for i in 0..k {
                gram.set(i, i, gram.get(i, i) + j);
            }
            Some(Cholesky::factor(&gram)?)
        } else {
            None
        };
        Ok(Self {
            basis: basis.clone(),
            factor,
        })
    }

    pub fn reconstruct(&self, x: &Vector) -> Result<ReconstructionResult> {
        let xn = x.norm();
        if x.len() != self.basis.cols() {
            return Err(Error::Dimension {
                op: "reconstruct input",
                left: vec![self.basis.rows(), self.basis.cols()],
                right: vec![x.len()],
            });
        }
        if xn == 0.0 {
            return Err(Error::DegenerateSample { index: 0 });
        }
        let coefficients = match &self.factor {
            None => Vector::zeros(self.basis.rows()),
            Some(f) => {
                let rhs = self.basis.matvec(x)?;
                let rhs = Matrix::new(1, rhs.len(), rhs.into_vec())?;
                Vector::from(f.solve_right(&rhs)?.into_data())
            }
        };
        let residual = x.sub(&self.basis.transpose_matvec(&coefficients)?)?;
        let relative_residual = residual.norm() / xn;
        Ok(ReconstructionResult {
            coefficients,
            residual,
            relative_residual,
        })
    }
}

/// Reconstructs `x ≈ τᵀ·α` from the rows of `tau`.
pub fn reconstruct_input(tau: &Matrix, x: &Vector) -> Result<ReconstructionResult> {
    Reconstructor::new(tau)?.reconstruct(x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckResult {
    /// Mean of `‖δ·x‖²` over the samples.
    pub lhs: f64,
    /// Mean of `Σ_k α_k² + 1`.
    pub omega1: f64,
    /// Mean of `(Σ_k α_k² + 1)·‖ε(x)‖²`.
    pub omega2: f64,
    /// `ω¹·‖δ·τᵀ‖_F² + ω²·‖δ‖_F²`.
    pub rhs: f64,
    pub satisfied: bool,
}

/// Evaluates both sides of the interference upper bound with the
/// reconstruction constants measured on `samples`.
pub fn check_theorem1(tau: &Matrix, delta: &Matrix, samples: &[Vector]) -> Result<BoundCheckResult> {
    if delta.cols() != tau.cols() {
        return Err(Error::Dimension {
            op: "interference bound",
            left: vec![tau.rows(), tau.cols()],
            right: vec![delta.rows(), delta.cols()],
        });
    }
    if samples.is_empty() {
        return Err(Error::Config("bound check needs at least one sample".into()));
    }
    let rec = Reconstructor::new(tau)?;
    let (mut lhs, mut omega1, mut omega2) = (0.0, 0.0, 0.0);
    for (index, x) in samples.iter().enumerate() {
        let r = rec.reconstruct(x).map_err(|e| match e {
            Error::DegenerateSample { .. } => Error::DegenerateSample { index },
            e => e,
        })?;
        lhs += delta.matvec(x)?.norm_sq();
        let a = r.coefficients.norm_sq() + 1.0;
        omega1 += a;
        omega2 += a * r.residual.norm_sq();
    }
    let n = samples.len() as f64;
    let (lhs, omega1, omega2) = (lhs / n, omega1 / n, omega2 / n);
    let rhs = omega1 * delta.matmul_transposed(tau)?.frobenius_norm_sq()
        + omega2 * delta.frobenius_norm_sq();
    Ok(BoundCheckResult {
        lhs,
        omega1,
        omega2,
        rhs,
        satisfied: lhs <= rhs * (1.0 + 1e-9),
    })
}

pub type ParamMap = BTreeMap<String, Matrix>;

/// A feed-forward stack of linear layers that can report every layer's
/// output for an input.
pub trait LayerStack {
    /// Linear layer names, input to output.
    fn layers(&self) -> &[String];

    /// Output of each linear layer (length = depth).
    fn forward(&self, params: &ParamMap, x: &Vector) -> Result<Vec<Vector>>;
}

/// Linear layers with an elementwise rectifier between consecutive layers.
/// The output at depth `d` is the linear output of layer `d`, before the
/// rectifier.
#[derive(Debug, Clone)]
pub struct ReluMlp {
    layers: Vec<String>,
}

impl ReluMlp {
    pub fn new(layers: Vec<String>) -> Self {
        Self { layers }
    }
}

impl LayerStack for ReluMlp {
    fn layers(&self) -> &[String] {
        &self.layers
    }

    fn forward(&self, params: &ParamMap, x: &Vector) -> Result<Vec<Vector>> {
        let mut outs: Vec<Vector> = Vec::with_capacity(self.layers.len());
        for (d, name) in self.layers.iter().enumerate() {
            let w = params.get(name).ok_or_else(|| Error::Integrity {
                tensor: name.clone(),
                message: "layer missing from parameter set".into(),
            })?;
            let y = match outs.last() {
                None => w.matvec(x),
                Some(prev) => w.matvec(&prev.map(|v| v.max(0.0))),
            }
            .map_err(|e| e.in_layer(self.layers[d].clone()))?;
            outs.push(y);
        }
        Ok(outs)
    }
}

/// `θ + τ` over the layers of `theta`; layers absent from `tau` keep `θ`.
pub fn offset_params(theta: &ParamMap, tau: &ParamMap) -> Result<ParamMap> {
    theta
        .iter()
        .map(|(name, w)| {
            let p = match tau.get(name) {
                Some(t) => w.add(t).map_err(|e| e.in_layer(name.clone()))?,
                None => w.clone(),
            };
            Ok((name.clone(), p))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthError {
    pub layer: String,
    pub relative_error: f64,
}

/// Mean over samples of `‖f_d(x; θ+τ_m) − f_d(x; θ+τ_i)‖ / ‖f_d(x; θ+τ_i)‖`
/// for every depth `d`.
pub fn relative_interference(
    stack: &dyn LayerStack,
    theta: &ParamMap,
    tau_m: &ParamMap,
    tau_i: &ParamMap,
    samples: &[Vector],
) -> Result<Vec<DepthError>> {
    if samples.is_empty() {
        return Err(Error::Config("relative interference needs at least one sample".into()));
    }
    let merged = offset_params(theta, tau_m)?;
    let expert = offset_params(theta, tau_i)?;
    let depth = stack.layers().len();
    let mut sums = vec![0.0; depth];
    for (index, x) in samples.iter().enumerate() {
        let ym = stack.forward(&merged, x)?;
        let ye = stack.forward(&expert, x)?;
        for d in 0..depth {
            let reference = ye[d].norm();
            if reference == 0.0 {
                return Err(Error::DegenerateSample { index });
            }
            sums[d] += ym[d].sub(&ye[d])?.norm() / reference;
        }
    }
    let n = samples.len() as f64;
    Ok(stack
        .layers()
        .iter()
        .zip(sums)
        .map(|(layer, s)| DepthError {
            layer: layer.clone(),
            relative_error: s / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskInterference {
    pub task: usize,
    pub samples: usize,
    pub per_depth: Vec<DepthError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceReport {
    pub tasks: Vec<TaskInterference>,
}

impl InterferenceReport {
    /// Mean over tasks of the relative error at the last layer.
    pub fn mean_final(&self) -> f64 {
        let finals: Vec<f64> = self
            .tasks
            .iter()
            .filter_map(|t| t.per_depth.last().map(|d| d.relative_error))
            .collect();
        finals.iter().sum::<f64>() / finals.len().max(1) as f64
    }

    /// Mean over tasks at each depth.
    pub fn mean_per_depth(&self) -> Vec<f64> {
        let depth = self.tasks.first().map_or(0, |t| t.per_depth.len());
        (0..depth)
            .map(|d| {
                self.tasks.iter().map(|t| t.per_depth[d].relative_error).sum::<f64>()
                    / self.tasks.len() as f64
            })
            .collect()
    }
}

/// Relative interference of one merged task vector against every expert,
/// each evaluated on its own task's samples.
pub fn interference_report(
    stack: &dyn LayerStack,
    theta: &ParamMap,
    tau_m: &ParamMap,
    expert_taus: &[ParamMap],
    task_samples: &[Vec<Vector>],
) -> Result<InterferenceReport> {
    if expert_taus.len() != task_samples.len() {
        return Err(Error::Dimension {
            op: "interference report",
            left: vec![expert_taus.len()],
            right: vec![task_samples.len()],
        });
    }
    let tasks = expert_taus
        .iter()
        .zip(task_samples)
        .enumerate()
        .map(|(task, (tau_i, samples))| {
            Ok(TaskInterference {
                task,
                samples: samples.len(),
                per_depth: relative_interference(stack, theta, tau_m, tau_i, samples)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InterferenceReport { tasks })
}
