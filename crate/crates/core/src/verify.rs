//! Self-check suite behind `wudi verify`: solver optimality and symmetry
//! properties, the interference bound, the synthetic fine-tuning checks and
//! checkpoint fidelity, each on freshly drawn random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, DType, TensorData};
use crate::diagnostics::check_theorem1;
use crate::error::{Error, Result};
use crate::experiment::{compare_methods, GdSettings};
use crate::merge::merge;
use crate::solver::{
    closed_form_system, loss, loss_gradient, regularized_gradient, solve_closed_form, solve_gd,
    LayerProblem,
};
use crate::synth::{self, median, task_family, FamilyConfig, HarnessConfig};
use crate::task_vector::{MergeConfig, Method};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn taus(rng: &mut ChaCha8Rng, n: usize, r: usize, c: usize) -> Vec<Matrix> {
    (0..n).map(|_| gaussian(rng, r, c)).collect()
}

fn rel(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE))
}

type Check = (bool, String);

fn gradient() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, c, n) = (rng.random_range(1..=16), rng.random_range(1..=32), rng.random_range(1..=5));
        let p = LayerProblem::new(taus(&mut rng, n, r, c), true)?;
        let mut x = gaussian(&mut rng, r, c);
        let g = loss_gradient(&p, &x)?;
        let mut fd = Matrix::zeros(r, c);
        for k in 0..r * c {
            let orig = x.data()[k];
            x.data_mut()[k] = orig + h;
            let up = loss(&p, &x)?;
            x.data_mut()[k] = orig - h;
            let down = loss(&p, &x)?;
            x.data_mut()[k] = orig;
            fd.data_mut()[k] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel(&fd, &g)?);
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} over 100 instances")))
}

fn stationarity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r, c): (usize, usize) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let n = rng.random_range(c.div_ceil(r)..=c.div_ceil(r) + 3);
        let p = LayerProblem::new(taus(&mut rng, n, r, c), true)?;
        for omega in [1e-6, 1e-2, 1.0] {
            let x = solve_closed_form(&p, omega)?;
            let (_, b) = closed_form_system(&p, omega)?;
            let g = regularized_gradient(&p, &x, omega)?;
            worst = worst.max(g.frobenius_norm() / (1.0 + b.frobenius_norm()));
        }
    }
    Ok((worst <= 1e-8, format!("max scaled residual {worst:.2e}")))
}

fn hand_fixtures() -> Result<Check> {
    let row = |v: [f64; 2]| Matrix::from_rows(&[v]);
    let a = solve_closed_form(&LayerProblem::new(vec![row([1.0, 0.0]), row([0.0, 1.0])], true)?, 0.0)?;
    let b = solve_closed_form(&LayerProblem::new(vec![row([1.0, 0.0]), row([1.0, 1.0])], true)?, 0.0)?;
    let err = rel(&a, &row([1.0, 1.0]))?.max(rel(&b, &row([1.0, 1.0]))?);
    let singular = matches!(
        solve_closed_form(&LayerProblem::new(vec![row([1.0, 0.0]), row([-1.0, 0.0])], false)?, 0.0)
            .map_err(|e| e.root().to_string()),
        Err(ref m) if m.contains("omega")
    );
    Ok((err <= 1e-12 && singular, format!("max error {err:.1e}, rank-deficient rejected: {singular}")))
}

fn gd_matches_closed_form() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = LayerProblem::new(taus(&mut rng, 3, 4, 6), true)?;
        let (gd, _) = solve_gd(&p, 2000, 1e-2)?;
        worst = worst.max(rel(&gd, &solve_closed_form(&p, 1e-8)?)?);
    }
    Ok((worst <= 1e-2, format!("max relative gap {worst:.2e} over 20 instances")))
}

fn equivariance() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut scale, mut perm_cf, mut perm_gd, mut orth): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..50 {
        let (r, c): (usize, usize) = (rng.random_range(2..=5), rng.random_range(2..=6));
        let n = rng.random_range(c.div_ceil(r)..=c.div_ceil(r) + 2);
        let ts = taus(&mut rng, n, r, c);
        let p = LayerProblem::new(ts.clone(), true)?;
        let base = solve_closed_form(&p, 0.0)?;

        let k = rng.random_range(0.1..10.0);
        let scaled = LayerProblem::new(ts.iter().map(|t| t.scale(k)).collect(), true)?;
        scale = scale.max(rel(&solve_closed_form(&scaled, 0.0)?, &base.scale(k))?);

        let mut perm: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = LayerProblem::new(ts.iter().map(|t| t.permute_rows(&perm)).collect(), true)?;
        perm_cf = perm_cf.max(rel(&solve_closed_form(&permuted, 0.0)?, &base.permute_rows(&perm))?);
        let (g0, _) = solve_gd(&p, 200, 1e-2)?;
        let (g1, _) = solve_gd(&permuted, 200, 1e-2)?;
        perm_gd = perm_gd.max(rel(&g1, &g0.permute_rows(&perm))?);

        let q = synth::random_orthogonal(&mut rng, c);
        let rotated = LayerProblem::new(ts.iter().map(|t| t.matmul(&q)).collect::<Result<_>>()?, true)?;
        orth = orth.max(rel(&solve_closed_form(&rotated, 0.0)?, &base.matmul(&q)?)?);
    }
    let ok = scale <= 1e-9 && perm_cf <= 1e-12 && perm_gd <= 1e-6 && orth <= 1e-8;
    Ok((
        ok,
        format!("scale {scale:.1e}, permutation {perm_cf:.1e}/{perm_gd:.1e} (cfs/gd), orthogonal {orth:.1e}"),
    ))
}

fn bound() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut violations = 0;
    for _ in 0..200 {
        let (k, d, o, s) = (
            rng.random_range(1..=6),
            rng.random_range(2..=12),
            rng.random_range(1..=6),
            rng.random_range(1..=16),
        );
        let tau = gaussian(&mut rng, k, d);
        let delta = gaussian(&mut rng, o, d);
        let samples: Vec<Vector> = (0..s).map(|_| gaussian(&mut rng, 1, d).row_vector(0)).collect();
        if !check_theorem1(&tau, &delta, &samples)?.satisfied {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} violations in 200 instances")))
}

fn synthetic_finetuning() -> Result<Check> {
    let cal = synth::bundled_calibration()?;
    let cfg = HarnessConfig::default();
    if cal.config != cfg {
        return Err(Error::Config("bundled calibration was made with a different harness config".into()));
    }
    let runs: Vec<_> = synth::VERIFY_SEEDS.map(|s| synth::run_seed(s, &cfg)).collect::<Result<_>>()?;
    let dd = median(&runs.iter().map(|r| r.lemma1.delta_direction).collect::<Vec<_>>());
    let wins = runs.iter().filter(|r| r.prop1.task_vector_wins()).count();
    Ok((
        dd < cal.threshold && wins >= 18,
        format!("median drift {dd:.4} (threshold {:.4}); task-vector residual lower in {wins}/20", cal.threshold),
    ))
}

fn interference() -> Result<Check> {
    let cfg = FamilyConfig::default();
    let (mut ta, mut avg) = (0, 0);
    for seed in 0..20 {
        let c = compare_methods(&task_family(seed, &cfg)?, GdSettings::default())?;
        ta += c.beats_task_arithmetic() as usize;
        avg += c.beats_average() as usize;
    }
    Ok((ta >= 18 && avg >= 18, format!("lower than task arithmetic in {ta}/20, than averaging in {avg}/20")))
}

fn layer_ckpt(w: &Matrix, bias: &[f64]) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    c.insert("block.weight", TensorData::from_matrix(w, DType::F32).rounded());
    c.insert("block.bias", TensorData::new(DType::F32, vec![bias.len()], bias.to_vec())?.rounded());
    Ok(c)
}

fn single_expert() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let p = layer_ckpt(&gaussian(&mut rng, 4, 6), &[0.0; 4])?;
    let e = layer_ckpt(&gaussian(&mut rng, 4, 6), &[1.0; 4])?;
    let mut bad = Vec::new();
    for method in [Method::WudiGd, Method::WudiCfs, Method::Average, Method::TaskArith] {
        let cfg = MergeConfig {
            method,
            lambda: 1.0,
            ..MergeConfig::default()
        };
        let (m, _) = merge(&p, std::slice::from_ref(&e), &cfg)?;
        let m = Checkpoint::from_bytes(&m.to_bytes()?)?;
        if m.get("block.weight") != e.get("block.weight") {
            bad.push(method.as_str());
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "all methods".into() } else { format!("differs: {bad:?}") }))
}

fn threads() -> Result<Check> {
    let fam = task_family(7, &FamilyConfig::default())?;
    let run = |t| -> Result<Vec<u8>> {
        let cfg = MergeConfig {
            threads: t,
            ..MergeConfig::default()
        };
        merge(&fam.pretrained, &fam.experts, &cfg)?.0.to_bytes()
    };
    let same = run(1)? == run(8)?;
    Ok((same, format!("threads 1 vs 8 identical: {same}")))
}

fn checkpoint_io() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut c = Checkpoint::new();
    c.insert("a", TensorData::from_matrix(&gaussian(&mut rng, 5, 7), DType::F64));
    c.insert("b", TensorData::from_matrix(&gaussian(&mut rng, 3, 2), DType::F32).rounded());
    let bytes = c.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    let round_trip = back == c && back.to_bytes()? == bytes;
    let finite: Vec<f64> = (0..=u16::MAX)
        .map(|b| f64::from(half::f16::from_bits(b)))
        .filter(|v| v.is_finite())
        .collect();
    let mut h = Checkpoint::new();
    h.insert("h", TensorData::new(DType::F16, vec![finite.len()], finite.clone())?);
    let h_back = Checkpoint::from_bytes(&h.to_bytes()?)?;
    let f16_ok = h_back.get("h").map(|t| &t.values) == Some(&finite);
    Ok((round_trip && f16_ok, format!("f32/f64 round trip {round_trip}, {} finite f16 patterns {f16_ok}", finite.len())))
}

type CheckFn = fn() -> Result<Check>;

pub const CHECKS: [(&str, CheckFn); 11] = [
    ("loss gradient matches central differences", gradient),
    ("closed form is stationary", stationarity),
    ("hand-derived instances", hand_fixtures),
    ("gradient descent reaches closed form", gd_matches_closed_form),
    ("scale, permutation and rotation equivariance", equivariance),
    ("interference upper bound", bound),
    ("synthetic input drift and task-vector span", synthetic_finetuning),
    ("merge lowers interference", interference),
    ("single expert reproduced", single_expert),
    ("thread count does not change output", threads),
    ("checkpoint round trip", checkpoint_io),
];

pub fn run_check(id: usize) -> CheckOutcome {
    let (name, f) = CHECKS[id - 1];
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    (1..=CHECKS.len()).map(run_check).collect()
}
