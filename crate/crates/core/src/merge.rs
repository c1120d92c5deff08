//! End-to-end merge: task vectors per eligible layer, one solve per layer,
//! assembly into a checkpoint, and a machine-readable report.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{validate_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::solver::{self, Baseline, LayerProblem};
use crate::task_vector::{
    assemble_merged, classify_layers, extract_lora_task_vector, extract_task_vector, ExcludedTensor,
    LayerClassification, LoraSuffixes,
    MergeConfig, Method, TaskVector,
};
use crate::tensor::Matrix;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub shape: [usize; 2],
    /// Interference loss at `Σ_i τ_i`.
    pub initial_loss: f64,
    /// Interference loss at the merged task vector.
    pub final_loss: f64,
    pub merged_norm: f64,
    pub task_norms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_gradient_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_layer_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub schema: u32,
    pub method: Method,
    pub config: MergeConfig,
    pub experts: usize,
    /// Canonical (lexicographic) layer order.
    pub layers: Vec<LayerReport>,
    pub excluded: Vec<ExcludedTensor>,
    /// Wall-clock measurements; the only non-deterministic part of a report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl MergeReport {
    pub fn without_timing(mut self) -> Self {
        self.timing = None;
        self
    }

    pub fn layer(&self, name: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Solves one layer with the configured method.
pub fn solve_layer(name: &str, taus: Vec<Matrix>, cfg: &MergeConfig) -> Result<(Matrix, LayerReport)> {
    let problem = LayerProblem::new(taus, cfg.balanced).map_err(|e| e.in_layer(name))?;
    let (rows, cols) = problem.shape();
    let mut gradient_norm = None;
    let mut trace = None;
    let all_zero = problem.taus().iter().all(|t| t.max_abs() == 0.0);
    let merged = if all_zero {
        Matrix::zeros(rows, cols)
    } else {
        match cfg.method {
            Method::WudiGd => {
                let (m, t) = solver::solve_gd(&problem, cfg.steps, cfg.learning_rate)
                    .map_err(|e| e.in_layer(name))?;
                gradient_norm = Some(t.final_gradient_norm);
                trace = Some(t.losses);
                m
            }
            Method::WudiCfs => {
                solver::solve_closed_form(&problem, cfg.omega).map_err(|e| e.in_layer(name))?
            }
            Method::Average => solver::solve_baseline(problem.taus(), Baseline::Average, cfg.lambda)?,
            Method::TaskArith => {
                solver::solve_baseline(problem.taus(), Baseline::TaskArithmetic, cfg.lambda)
                    .map_err(|e| e.in_layer(name))?
            }
        }
    };
    let report = LayerReport {
        name: name.to_string(),
        shape: [rows, cols],
        initial_loss: solver::loss(&problem, &problem.task_sum())?,
        final_loss: solver::loss(&problem, &merged)?,
        merged_norm: merged.frobenius_norm(),
        task_norms: problem.taus().iter().map(Matrix::frobenius_norm).collect(),
        final_gradient_norm: gradient_norm,
        loss_trace: trace,
    };
    Ok((merged, report))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Merges precomputed task vectors. `taus` must share the eligible layer set
/// of `classification`.
pub fn merge_task_vectors(
    pretrained: &Checkpoint,
    classification: &LayerClassification,
    taus: &[TaskVector],
    cfg: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    cfg.validate()?;
    if taus.is_empty() {
        return Err(Error::Config("no experts to merge".into()));
    }
    let start = Instant::now();
    for tv in taus {
        if tv.layers.len() != classification.eligible.len()
            || !classification.eligible.iter().all(|n| tv.layers.contains_key(n))
        {
            return Err(Error::Incompatible(format!(
                "task vector {} does not cover the eligible layer set",
                tv.source_id
            )));
        }
    }

    let solved: Vec<(Matrix, LayerReport, f64)> = pool(cfg.threads)?.install(|| {
        classification
            .eligible
            .par_iter()
            .map(|name| {
                let t0 = Instant::now();
                let layer_taus = taus.iter().map(|tv| tv.layers[name].clone()).collect();
                let (m, r) = solve_layer(name, layer_taus, cfg)?;
                Ok((m, r, t0.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()
    })?;

    let mut merged = TaskVector {
        layers: BTreeMap::new(),
        passthrough: BTreeMap::new(),
        source_id: usize::MAX,
    };
    let mut layers = Vec::with_capacity(solved.len());
    let mut per_layer_seconds = BTreeMap::new();
    for (m, r, secs) in solved {
        merged.layers.insert(r.name.clone(), m);
        per_layer_seconds.insert(r.name.clone(), secs);
        layers.push(r);
    }
    let checkpoint = assemble_merged(pretrained, &merged, cfg, taus)?;
    let report = MergeReport {
        schema: REPORT_SCHEMA,
        method: cfg.method,
        config: cfg.clone(),
        experts: taus.len(),
        layers,
        excluded: classification.excluded.clone(),
        timing: Some(Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            per_layer_seconds,
        }),
    };
    Ok((checkpoint, report))
}

pub fn extract_all(
    pretrained: &Checkpoint,
    experts: &[Checkpoint],
    classification: &LayerClassification,
    threads: usize,
) -> Result<Vec<TaskVector>> {
    pool(threads)?.install(|| {
        experts
            .par_iter()
            .enumerate()
            .map(|(i, e)| extract_task_vector(pretrained, e, classification, i))
            .collect()
    })
}

/// Full pipeline from checkpoints.
pub fn merge(
    pretrained: &Checkpoint,
    experts: &[Checkpoint],
    cfg: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    cfg.validate()?;
    validate_compatible(pretrained, experts).into_result()?;
    let classification = classify_layers(pretrained, cfg)?;
    let taus = extract_all(pretrained, experts, &classification, cfg.threads)?;
    merge_task_vectors(pretrained, &classification, &taus, cfg)
}

/// Full pipeline from low-rank adapter checkpoints.
pub fn merge_lora(
    pretrained: &Checkpoint,
    adapters: &[Checkpoint],
    cfg: &MergeConfig,
    suffixes: &LoraSuffixes,
) -> Result<(Checkpoint, MergeReport)> {
    cfg.validate()?;
    let classification = classify_layers(pretrained, cfg)?;
    let taus: Vec<TaskVector> = pool(cfg.threads)?.install(|| {
        adapters
            .par_iter()
            .enumerate()
            .map(|(i, a)| extract_lora_task_vector(pretrained, a, &classification, suffixes, i))
            .collect::<Result<_>>()
    })?;
    merge_task_vectors(pretrained, &classification, &taus, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{DType, TensorData};

    fn ckpt(w: Matrix, bias: &[f64]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("layer.weight", TensorData::from_matrix(&w, DType::F64));
        c.insert("layer.bias", TensorData::new(DType::F64, vec![bias.len()], bias.to_vec()).unwrap());
        c
    }

    #[test]
    fn one_expert_reproduces_expert_for_every_method() {
        let p = ckpt(Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]]), &[0.0, 0.0]);
        let e = ckpt(Matrix::from_rows(&[[1.5, 2.0, 2.0], [0.25, 1.0, -1.0]]), &[1.0, 0.0]);
        for method in [Method::WudiGd, Method::WudiCfs, Method::Average, Method::TaskArith] {
            let cfg = MergeConfig {
                method,
                lambda: 1.0,
                ..MergeConfig::default()
            };
            let (m, report) = merge(&p, std::slice::from_ref(&e), &cfg).unwrap();
            assert_eq!(m.get("layer.weight"), e.get("layer.weight"), "{method:?}");
            // Default policy keeps pretrained biases.
            assert_eq!(m.get("layer.bias"), p.get("layer.bias"));
            assert_eq!(report.layers[0].final_loss, 0.0);
        }
    }

    #[test]
    fn disjoint_row_spans_sum() {
        let p = ckpt(Matrix::zeros(2, 4), &[0.0, 0.0]);
        let a = ckpt(Matrix::from_rows(&[[1.0, 2.0, 0.0, 0.0], [0.5, -1.0, 0.0, 0.0]]), &[0.0, 0.0]);
        let b = ckpt(Matrix::from_rows(&[[0.0, 0.0, 3.0, 1.0], [0.0, 0.0, -2.0, 1.0]]), &[0.0, 0.0]);
        let sum = Matrix::from_rows(&[[1.0, 2.0, 3.0, 1.0], [0.5, -1.0, -2.0, 1.0]]);
        for method in [Method::WudiGd, Method::WudiCfs] {
            let cfg = MergeConfig {
                method,
                omega: 1e-9,
                ..MergeConfig::default()
            };
            let (m, report) = merge(&p, &[a.clone(), b.clone()], &cfg).unwrap();
            let got = m.matrix("layer.weight").unwrap();
            assert!(got.sub(&sum).unwrap().max_abs() <= 1e-6, "{method:?}: {got:?}");
            assert!(report.layers[0].final_loss <= 1e-12);
        }
    }

    #[test]
    fn incompatible_experts_rejected() {
        let p = ckpt(Matrix::zeros(2, 2), &[0.0, 0.0]);
        let e = ckpt(Matrix::zeros(2, 3), &[0.0, 0.0]);
        assert!(matches!(
            merge(&p, &[e], &MergeConfig::default()),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn singular_closed_form_names_layer() {
        let mut p2 = Checkpoint::new();
        p2.insert("layer.weight", TensorData::from_matrix(&Matrix::zeros(2, 2), DType::F64));
        let a = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        let b = Matrix::from_rows(&[[-1.0, 0.0], [-1.0, 0.0]]);
        let mk = |m: &Matrix| {
            let mut c = Checkpoint::new();
            c.insert("layer.weight", TensorData::from_matrix(m, DType::F64));
            c
        };
        let cfg = MergeConfig {
            method: Method::WudiCfs,
            ..MergeConfig::default()
        };
        let err = merge(&p2, &[mk(&a), mk(&b)], &cfg).unwrap_err();
        assert_eq!(err.layer(), Some("layer.weight"));
        assert!(matches!(err.root(), Error::SingularGram { .. }));
        assert_eq!(err.module(), "solver");
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let layers: Vec<String> = (0..6).map(|i| format!("blocks.{i}.weight")).collect();
        let mk = |seed: u64| {
            let mut c = Checkpoint::new();
            for (k, name) in layers.iter().enumerate() {
                let m = Matrix::from_fn(3, 4, |i, j| {
                    (((seed * 31 + k as u64 * 7 + i as u64 * 5 + j as u64) % 17) as f64 - 8.0) / 8.0
                });
                c.insert(name.clone(), TensorData::from_matrix(&m, DType::F32));
            }
            c
        };
        let p = mk(0);
        let experts = [mk(1), mk(2), mk(3)];
        let run = |threads| {
            let cfg = MergeConfig {
                threads,
                steps: 40,
                learning_rate: 1e-2,
                ..MergeConfig::default()
            };
            let (m, r) = merge(&p, &experts, &cfg).unwrap();
            (m.to_bytes().unwrap(), serde_json::to_string(&r.without_timing()).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
