//! Per-layer solvers for the merged task vector.
//!
//! The objective for one linear layer is
//!
//! ```text
//! L(τ_m) = Σ_i w_i · ‖(τ_m − τ_i) · S_iᵀ‖_F²
//! ```
//!
//! where `S_i = τ_i` (the full task-vector subspace) unless an ablation
//! swaps in a surrogate basis, and `w_i = 1/‖τ_i‖_F²` when balanced.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{matmul, solve_spd, Matrix};

#[derive(Debug, Clone)]
pub struct LayerProblem {
    taus: Vec<Matrix>,
    weights: Vec<f64>,
    balanced: bool,
}

impl LayerProblem {
    /// Balanced weights are `1/‖τ_i‖_F²`; an all-zero task vector gets weight
    /// zero since its loss term vanishes identically.
    pub fn new(taus: Vec<Matrix>, balanced: bool) -> Result<Self> {
        let first = taus
            .first()
            .ok_or_else(|| Error::Config("layer problem needs at least one task vector".into()))?;
        if let Some(bad) = taus.iter().find(|t| t.shape() != first.shape()) {
            return Err(dim_err("layer problem", first.shape(), bad.shape()));
        }
        let weights = taus
            .iter()
            .map(|t| {
                if !balanced {
                    return 1.0;
                }
                let n = t.frobenius_norm_sq();
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            taus,
            weights,
            balanced,
        })
    }

    pub fn taus(&self) -> &[Matrix] {
        &self.taus
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    pub fn shape(&self) -> (usize, usize) {
        self.taus[0].shape()
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Algorithm initialization `Σ_i τ_i`.
    pub fn task_sum(&self) -> Matrix {
        let mut sum = Matrix::zeros(self.shape().0, self.shape().1);
        for t in &self.taus {
            sum.add_scaled(t, 1.0).expect("shapes checked at construction");
        }
        sum
    }

    fn check(&self, tau_m: &Matrix) -> Result<()> {
        if tau_m.shape() != self.shape() {
            return Err(dim_err("layer loss", self.shape(), tau_m.shape()));
        }
        Ok(())
    }
}

/// A differentiable scalar objective over one layer's merged task vector.
pub trait Objective {
    fn shape(&self) -> (usize, usize);

    /// Loss and gradient at `x`, computed together.
    fn evaluate(&self, x: &Matrix) -> Result<(f64, Matrix)>;
}

/// Loss and gradient of `Σ_i w_i ‖(x − τ_i)·S_iᵀ‖²`.
///
/// Uses `D_i·(S_iᵀS_i)` when the basis Gram is the smaller product and
/// `(D_i·S_iᵀ)·S_i` otherwise. Either way `D_i = x − τ_i` is formed first,
/// so the gradient is exactly zero wherever `x = τ_i` for every weighted
/// task.
fn interference(
    x: &Matrix,
    targets: &[Matrix],
    bases: &[Matrix],
    grams: Option<&[Matrix]>,
    weights: &[f64],
) -> Result<(f64, Matrix)> {
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for (i, (tau, basis)) in targets.iter().zip(bases).enumerate() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let d = x.sub(tau)?;
        match grams {
            Some(g) => {
                let dg = matmul(&d, &g[i])?;
                loss += w * dg.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>();
                grad.add_scaled(&dg, 2.0 * w)?;
            }
            None => {
                let r = d.matmul_transposed(basis)?;
                loss += w * r.frobenius_norm_sq();
                grad.add_scaled(&matmul(&r, basis)?, 2.0 * w)?;
            }
        }
    }
    Ok((loss, grad))
}

fn use_gram(basis_rows: usize, cols: usize, out_rows: usize) -> bool {
    // Gram route costs out_rows·cols² per step, the direct route
    // 2·out_rows·basis_rows·cols; the Gram also needs cols² memory per task.
    cols <= 2 * basis_rows && cols <= 1024 && out_rows > 0
}

impl Objective for LayerProblem {
    fn shape(&self) -> (usize, usize) {
        LayerProblem::shape(self)
    }

    fn evaluate(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        self.check(x)?;
        interference(x, &self.taus, &self.taus, None, &self.weights)
    }
}

/// `Σ_i w_i ‖(τ_m − τ_i)·τ_iᵀ‖_F²`.
pub fn loss(problem: &LayerProblem, tau_m: &Matrix) -> Result<f64> {
    problem.check(tau_m)?;
    let mut total = 0.0;
    for (tau, w) in problem.taus.iter().zip(&problem.weights) {
        let r = tau_m.sub(tau)?.matmul_transposed(tau)?;
        total += w * r.frobenius_norm_sq();
    }
    Ok(total)
}

/// `Σ_i 2·w_i·((τ_m − τ_i)·τ_iᵀ)·τ_i`.
pub fn loss_gradient(problem: &LayerProblem, tau_m: &Matrix) -> Result<Matrix> {
    problem.check(tau_m)?;
    let mut grad = Matrix::zeros(tau_m.rows(), tau_m.cols());
    for (tau, w) in problem.taus.iter().zip(&problem.weights) {
        let r = tau_m.sub(tau)?.matmul_transposed(tau)?;
        grad.add_scaled(&matmul(&r, tau)?, 2.0 * w)?;
    }
    Ok(grad)
}

/// Gradient of the ridge-regularized objective
/// `Σ_i w_i (‖(τ_m − τ_i)τ_iᵀ‖² + ω‖τ_m − τ_i‖²)`.
pub fn regularized_gradient(problem: &LayerProblem, tau_m: &Matrix, omega: f64) -> Result<Matrix> {
    let mut grad = loss_gradient(problem, tau_m)?;
    if omega != 0.0 {
        for (tau, w) in problem.taus.iter().zip(&problem.weights) {
            grad.add_scaled(&tau_m.sub(tau)?, 2.0 * w * omega)?;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            step: 0,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam step on `param`.
    pub fn update(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.first_moment.shape() {
            return Err(dim_err("adam", param.shape(), grad.shape()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (k, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    /// Loss before each update; one entry per step.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub final_gradient_norm: f64,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl SolveTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }
}

const DIVERGENCE_HINT: &str = "lower the learning rate";

/// Adam descent on `objective` from `init`.
pub fn solve_gd_objective(
    objective: &dyn Objective,
    init: Matrix,
    steps: usize,
    lr: f64,
) -> Result<(Matrix, SolveTrace)> {
    if steps < 1 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let start = Instant::now();
    let (rows, cols) = objective.shape();
    let mut x = init;
    let mut adam = AdamState::new(rows, cols);
    let mut losses = Vec::with_capacity(steps);
    for iteration in 0..steps {
        let (l, g) = objective.evaluate(&x)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                iteration,
                hint: DIVERGENCE_HINT,
            });
        }
        losses.push(l);
        adam.update(&mut x, &g, lr)?;
    }
    let (final_loss, g) = objective.evaluate(&x)?;
    if !final_loss.is_finite() || !x.is_finite() {
        return Err(Error::Divergence {
            iteration: steps,
            hint: DIVERGENCE_HINT,
        });
    }
    Ok((
        x,
        SolveTrace {
            losses,
            final_loss,
            final_gradient_norm: g.frobenius_norm(),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Objective with precomputed per-task Grams, used by the iterative solver
/// on layers where `d_in` is small relative to `d_out`.
struct GramObjective<'a> {
    problem: &'a LayerProblem,
    bases: &'a [Matrix],
    grams: Option<Vec<Matrix>>,
}

impl<'a> GramObjective<'a> {
    fn new(problem: &'a LayerProblem, bases: &'a [Matrix]) -> Self {
        let (rows, cols) = problem.shape();
        let gram_cheaper = bases.iter().all(|b| use_gram(b.rows(), cols, rows));
        let grams = gram_cheaper.then(|| bases.iter().map(Matrix::gram).collect());
        Self {
            problem,
            bases,
            grams,
        }
    }
}

impl Objective for GramObjective<'_> {
    fn shape(&self) -> (usize, usize) {
        self.problem.shape()
    }

    fn evaluate(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        self.problem.check(x)?;
        interference(
            x,
            &self.problem.taus,
            self.bases,
            self.grams.as_deref(),
            &self.problem.weights,
        )
    }
}

/// Iterative solver: `steps` Adam updates from `Σ_i τ_i`.
pub fn solve_gd(problem: &LayerProblem, steps: usize, lr: f64) -> Result<(Matrix, SolveTrace)> {
    let objective = GramObjective::new(problem, &problem.taus);
    solve_gd_objective(&objective, problem.task_sum(), steps, lr)
}

/// `(A, B)` of the stationarity condition `τ_m·A = B`:
/// `A = Σ_i w_i (τ_iᵀτ_i + ωI)`, `B = Σ_i w_i τ_i (τ_iᵀτ_i + ωI)`.
pub fn closed_form_system(problem: &LayerProblem, omega: f64) -> Result<(Matrix, Matrix)> {
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::Config(format!("omega must be non-negative, got {omega}")));
    }
    let (rows, cols) = problem.shape();
    let mut a = Matrix::zeros(cols, cols);
    let mut b = Matrix::zeros(rows, cols);
    for (tau, &w) in problem.taus.iter().zip(&problem.weights) {
        if w == 0.0 {
            continue;
        }
        let mut g = tau.gram();
        for k in 0..cols {
            g.set(k, k, g.get(k, k) + omega);
        }
        b.add_scaled(&matmul(tau, &g)?, w)?;
        a.add_scaled(&g, w)?;
    }
    Ok((a, b))
}

/// Ridge closed form `τ_m = B·A⁻¹`. With a single task the minimizer is that
/// task's vector, returned as-is.
pub fn solve_closed_form(problem: &LayerProblem, omega: f64) -> Result<Matrix> {
    let (a, b) = closed_form_system(problem, omega)?;
    if problem.len() == 1 {
        return Ok(problem.taus[0].clone());
    }
    solve_spd(&a, &b).map_err(|e| match e {
        Error::Singular { pivot } => Error::SingularGram { pivot },
        e => e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Average,
    TaskArithmetic,
}

/// Weight averaging `(1/N)·Σ τ_i` or task arithmetic `λ·Σ τ_i`.
pub fn solve_baseline(taus: &[Matrix], method: Baseline, lambda: f64) -> Result<Matrix> {
    let first = taus
        .first()
        .ok_or_else(|| Error::Config("baseline needs at least one task vector".into()))?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for t in taus {
        sum.add_scaled(t, 1.0)?;
    }
    Ok(match method {
        Baseline::Average => {
            let n = taus.len() as f64;
            Matrix::new(sum.rows(), sum.cols(), sum.data().iter().map(|v| v / n).collect())?
        }
        Baseline::TaskArithmetic => {
            if !(lambda > 0.0) {
                return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
            }
            sum.scale(lambda)
        }
    })
}

/// Basis used in place of each `τ_i` on the right of the interference term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum SubspaceVariant {
    Full,
    /// Entries drawn from `N(mean(τ_i), std(τ_i)²)`, same shape as `τ_i`.
    RandomGaussian,
    /// A random subset of `τ_i`'s rows, kept in ascending row order.
    RowSubset { fraction: f64 },
}

fn mean_std(m: &Matrix) -> (f64, f64) {
    let n = m.data().len();
    let mean = m.data().iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Surrogate bases for every task; deterministic given `seed`.
pub fn ablation_bases(
    problem: &LayerProblem,
    variant: SubspaceVariant,
    seed: u64,
) -> Result<Vec<Matrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    problem
        .taus
        .iter()
        .map(|tau| match variant {
            SubspaceVariant::Full => Ok(tau.clone()),
            SubspaceVariant::RandomGaussian => {
                let (mean, std) = mean_std(tau);
                let normal = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("gaussian basis: {e}")))?;
                Ok(Matrix::from_fn(tau.rows(), tau.cols(), |_, _| normal.sample(&mut rng)))
            }
            SubspaceVariant::RowSubset { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "row-subset fraction must lie in (0, 1], got {fraction}"
                    )));
                }
                let k = (fraction * tau.rows() as f64).round() as usize;
                if k == 0 {
                    return Err(Error::DegenerateSubset);
                }
                let mut rows = sample(&mut rng, tau.rows(), k).into_vec();
                rows.sort_unstable();
                Ok(tau.permute_rows(&rows))
            }
        })
        .collect()
}

/// Interference loss with each `τ_iᵀ` replaced by a surrogate basis.
pub struct SubspaceObjective<'a> {
    problem: &'a LayerProblem,
    bases: Vec<Matrix>,
}

impl<'a> SubspaceObjective<'a> {
    pub fn new(problem: &'a LayerProblem, variant: SubspaceVariant, seed: u64) -> Result<Self> {
        Ok(Self {
            problem,
            bases: ablation_bases(problem, variant, seed)?,
        })
    }

    pub fn bases(&self) -> &[Matrix] {
        &self.bases
    }

    pub fn solve_gd(&self, steps: usize, lr: f64) -> Result<(Matrix, SolveTrace)> {
        let objective = GramObjective::new(self.problem, &self.bases);
        solve_gd_objective(&objective, self.problem.task_sum(), steps, lr)
    }
}

impl Objective for SubspaceObjective<'_> {
    fn shape(&self) -> (usize, usize) {
        self.problem.shape()
    }

    fn evaluate(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        self.problem.check(x)?;
        interference(x, &self.problem.taus, &self.bases, None, &self.problem.weights)
    }
}

pub fn ablation_loss(
    problem: &LayerProblem,
    tau_m: &Matrix,
    variant: SubspaceVariant,
    seed: u64,
) -> Result<f64> {
    Ok(SubspaceObjective::new(problem, variant, seed)?.evaluate(tau_m)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v])
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn loss_examples() {
        let single = LayerProblem::new(vec![row(&[1.0, 2.0])], true).unwrap();
        assert_eq!(loss(&single, &row(&[1.0, 2.0])).unwrap(), 0.0);

        let orth = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[0.0, 1.0])], true).unwrap();
        assert_eq!(loss(&orth, &row(&[1.0, 1.0])).unwrap(), 0.0);

        let opposed = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[-1.0, 0.0])], false).unwrap();
        assert_eq!(loss(&opposed, &row(&[0.0, 0.0])).unwrap(), 2.0);

        assert!(loss(&opposed, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gradient_examples() {
        let orth = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[0.0, 1.0])], true).unwrap();
        assert!(loss_gradient(&orth, &row(&[1.0, 1.0])).unwrap().max_abs() <= 1e-12);

        // Δ = [1, 0] is orthogonal to τ₁ = [0, 1].
        let p = LayerProblem::new(vec![row(&[0.0, 1.0])], true).unwrap();
        let g = loss_gradient(&p, &row(&[1.0, 1.0])).unwrap();
        assert_eq!(g, row(&[0.0, 0.0]));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let taus: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 3, 4)).collect();
        let p = LayerProblem::new(taus, true).unwrap();
        let x = random(&mut rng, 3, 4);
        let g = loss_gradient(&p, &x).unwrap();
        let h = 1e-5;
        let fd = Matrix::from_fn(3, 4, |i, j| {
            let mut plus = x.clone();
            plus.set(i, j, x.get(i, j) + h);
            let mut minus = x.clone();
            minus.set(i, j, x.get(i, j) - h);
            (loss(&p, &plus).unwrap() - loss(&p, &minus).unwrap()) / (2.0 * h)
        });
        assert!(fd.sub(&g).unwrap().frobenius_norm() <= 1e-6 * g.frobenius_norm());
    }

    #[test]
    fn fast_paths_agree_with_literal_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (r, c) in [(6, 3), (3, 6), (4, 4)] {
            let taus: Vec<Matrix> = (0..3).map(|_| random(&mut rng, r, c)).collect();
            let p = LayerProblem::new(taus, true).unwrap();
            let x = random(&mut rng, r, c);
            let fast = GramObjective::new(&p, p.taus());
            let (l, g) = fast.evaluate(&x).unwrap();
            let l0 = loss(&p, &x).unwrap();
            let g0 = loss_gradient(&p, &x).unwrap();
            assert!((l - l0).abs() <= 1e-12 * l0);
            assert!(g.sub(&g0).unwrap().frobenius_norm() <= 1e-12 * g0.frobenius_norm());
        }
    }

    #[test]
    fn balanced_weights_normalize_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let taus: Vec<Matrix> = (0..4).map(|k| random(&mut rng, 2, 3).scale(k as f64 + 0.5)).collect();
        let p = LayerProblem::new(taus.clone(), true).unwrap();
        for (t, w) in p.taus().iter().zip(p.weights()) {
            assert!((w * t.frobenius_norm_sq() - 1.0).abs() <= 1e-10);
        }
        let u = LayerProblem::new(taus, false).unwrap();
        assert!(u.weights().iter().all(|&w| w == 1.0));
        assert!(LayerProblem::new(vec![], true).is_err());
        assert!(LayerProblem::new(vec![Matrix::zeros(1, 2), Matrix::zeros(2, 1)], true).is_err());
    }

    #[test]
    fn gd_examples() {
        let tau = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.0, 0.0, 3.0]]);
        let p = LayerProblem::new(vec![tau.clone()], true).unwrap();
        let (x, trace) = solve_gd(&p, 50, 1e-2).unwrap();
        assert_eq!(x, tau);
        assert_eq!(trace.losses.len(), 50);
        assert_eq!(trace.final_loss, 0.0);

        let opposed = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[-1.0, 0.0])], false).unwrap();
        let (x, trace) = solve_gd(&opposed, 10, 1e-2).unwrap();
        assert_eq!(x, row(&[0.0, 0.0]));
        assert!(trace.losses.iter().all(|&l| l == 2.0));

        assert!(solve_gd(&opposed, 0, 1e-2).is_err());
        assert!(solve_gd(&opposed, 1, 0.0).is_err());
    }

    #[test]
    fn gd_reports_divergence() {
        let p = LayerProblem::new(vec![row(&[1e200, 1e200]), row(&[-1e200, 1e200])], false).unwrap();
        match solve_gd(&p, 5, 1e-2) {
            Err(Error::Divergence { iteration: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn closed_form_examples() {
        let orth = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[0.0, 1.0])], true).unwrap();
        let x = solve_closed_form(&orth, 0.0).unwrap();
        assert!(x.sub(&row(&[1.0, 1.0])).unwrap().max_abs() <= 1e-12);

        // Balanced weights of {[1,0],[1,1]} are {1, 1/2}.
        let p = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[1.0, 1.0])], true).unwrap();
        assert_eq!(p.weights(), &[1.0, 0.5]);
        let (a, b) = closed_form_system(&p, 0.0).unwrap();
        assert_eq!(a, Matrix::from_rows(&[[1.5, 0.5], [0.5, 0.5]]));
        assert_eq!(b, row(&[2.0, 1.0]));
        let x = solve_closed_form(&p, 0.0).unwrap();
        assert!(x.sub(&row(&[1.0, 1.0])).unwrap().max_abs() <= 1e-12);

        let opposed = LayerProblem::new(vec![row(&[1.0, 0.0]), row(&[-1.0, 0.0])], true).unwrap();
        let err = solve_closed_form(&opposed, 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularGram { .. }));
        assert!(err.to_string().contains("omega"));
        assert!(solve_closed_form(&opposed, 1e-6).is_ok());
    }

    #[test]
    fn closed_form_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let taus: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 4, 6)).collect();
        let p = LayerProblem::new(taus, true).unwrap();
        for omega in [0.0, 1e-3, 1.0] {
            let x = solve_closed_form(&p, omega).unwrap();
            let (_, b) = closed_form_system(&p, omega).unwrap();
            let g = regularized_gradient(&p, &x, omega).unwrap();
            assert!(g.frobenius_norm() <= 1e-8 * (1.0 + b.frobenius_norm()));
        }
    }

    #[test]
    fn baseline_examples() {
        let a = solve_baseline(&[row(&[2.0, 0.0]), row(&[0.0, 2.0])], Baseline::Average, 0.0).unwrap();
        assert_eq!(a, row(&[1.0, 1.0]));
        let t = solve_baseline(&[row(&[1.0, 0.0]), row(&[0.0, 1.0])], Baseline::TaskArithmetic, 0.3)
            .unwrap();
        assert_eq!(t, row(&[0.3, 0.3]));
        let one = row(&[0.1, 0.7]);
        assert_eq!(solve_baseline(&[one.clone()], Baseline::Average, 0.0).unwrap(), one);
        assert!(solve_baseline(&[one], Baseline::TaskArithmetic, 0.0).is_err());
    }

    #[test]
    fn ablation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let taus: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 4, 5)).collect();
        let p = LayerProblem::new(taus, true).unwrap();
        let x = random(&mut rng, 4, 5);
        let full = ablation_loss(&p, &x, SubspaceVariant::RowSubset { fraction: 1.0 }, 7).unwrap();
        assert_eq!(full, loss(&p, &x).unwrap());
        assert_eq!(ablation_loss(&p, &x, SubspaceVariant::Full, 0).unwrap(), loss(&p, &x).unwrap());

        let constant = LayerProblem::new(vec![Matrix::from_rows(&[[2.0, 2.0], [2.0, 2.0]])], true).unwrap();
        let bases = ablation_bases(&constant, SubspaceVariant::RandomGaussian, 3).unwrap();
        assert!(bases[0].data().iter().all(|&v| v == 2.0));

        assert!(matches!(
            ablation_loss(&p, &x, SubspaceVariant::RowSubset { fraction: 0.05 }, 1),
            Err(Error::DegenerateSubset)
        ));
        assert!(ablation_loss(&p, &x, SubspaceVariant::RowSubset { fraction: 1.5 }, 1).is_err());

        let sub = ablation_bases(&p, SubspaceVariant::RowSubset { fraction: 0.5 }, 9).unwrap();
        assert!(sub.iter().all(|b| b.rows() == 2));
    }

    #[test]
    fn ablation_golden_values() {
        let p = LayerProblem::new(
            vec![
                Matrix::from_rows(&[[1.0, -0.5, 0.25], [0.0, 2.0, -1.0]]),
                Matrix::from_rows(&[[0.5, 0.5, 0.5], [-1.0, 0.0, 1.5]]),
            ],
            true,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0, 1.0], [-1.0, 1.0, 0.0]]);
        let g = ablation_loss(&p, &x, SubspaceVariant::RandomGaussian, 42).unwrap();
        let s = ablation_loss(&p, &x, SubspaceVariant::RowSubset { fraction: 0.5 }, 42).unwrap();
        assert_eq!(g, ablation_loss(&p, &x, SubspaceVariant::RandomGaussian, 42).unwrap());
        assert_eq!(g.to_bits(), GOLDEN_GAUSSIAN.to_bits(), "{g:?}");
        assert_eq!(s.to_bits(), GOLDEN_SUBSET.to_bits(), "{s:?}");
    }

    // Recorded from the first run with seed 42.
    const GOLDEN_GAUSSIAN: f64 = 2.978083257038737;
    const GOLDEN_SUBSET: f64 = 1.291769801980198;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(1, 2);
        let mut p = row(&[1.0, 1.0]);
        adam.update(&mut p, &row(&[3.0, -0.5]), 0.1).unwrap();
        // Bias-corrected first step is lr·sign(g) up to ε.
        assert!((p.get(0, 0) - 0.9).abs() < 1e-8);
        assert!((p.get(0, 1) - 1.1).abs() < 1e-7);
        assert_eq!(adam.step, 1);
    }

    fn instance(seed: u64, r: usize, c: usize, n: usize) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let k = rng.random_range(0.1..3.0);
                random(&mut rng, r, c).scale(k)
            })
            .collect()
    }

    fn ridge(problem: &LayerProblem, x: &Matrix) -> f64 {
        problem
            .taus()
            .iter()
            .zip(problem.weights())
            .map(|(t, w)| w * x.sub(t).unwrap().frobenius_norm_sq())
            .sum()
    }

    proptest::proptest! {
        // The solution norm itself is not monotone in ω (the ridge pulls
        // towards each τ_i, not towards zero), so the tradeoff is checked
        // instead: the data term grows and the ridge term shrinks.
        #[test]
        fn regularization_trades_loss_for_ridge(seed in 0u64..10_000, r in 1usize..5, c in 2usize..6, extra in 0usize..3) {
            let p = LayerProblem::new(instance(seed, r, c, c.div_ceil(r) + extra), true).unwrap();
            let mut prev: Option<(f64, f64)> = None;
            for omega in [1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0, 100.0] {
                let x = solve_closed_form(&p, omega).unwrap();
                let (l, q) = (loss(&p, &x).unwrap(), ridge(&p, &x));
                if let Some((pl, pq)) = prev {
                    proptest::prop_assert!(l >= pl - 1e-9 * (1.0 + pl));
                    proptest::prop_assert!(q <= pq + 1e-9 * (1.0 + pq));
                }
                prev = Some((l, q));
            }
        }

        #[test]
        fn equal_norms_make_weighting_irrelevant(seed in 0u64..10_000, r in 1usize..5, c in 2usize..6, extra in 0usize..3) {
            let taus: Vec<Matrix> = instance(seed, r, c, c.div_ceil(r) + extra)
                .into_iter()
                .map(|t| { let n = t.frobenius_norm(); t.scale(2.5 / n) })
                .collect();
            let a = solve_closed_form(&LayerProblem::new(taus.clone(), true).unwrap(), 0.0).unwrap();
            let b = solve_closed_form(&LayerProblem::new(taus, false).unwrap(), 0.0).unwrap();
            proptest::prop_assert!(a.sub(&b).unwrap().frobenius_norm() <= 1e-8 * (1.0 + b.frobenius_norm()));
        }

        #[test]
        fn gd_ends_below_its_start(seed in 0u64..10_000, r in 1usize..6, c in 1usize..8, n in 1usize..5) {
            let p = LayerProblem::new(instance(seed, r, c, n), true).unwrap();
            // Default step count, with the step size scaled to entries of order one.
            let (_, trace) = solve_gd(&p, 300, 1e-3).unwrap();
            proptest::prop_assert_eq!(trace.losses.len(), 300);
            proptest::prop_assert!(trace.final_loss <= trace.initial_loss());
        }
    }
}
