//! Merging experiments on synthetic task families: interference of each
//! merge method, and the loss-variant ablations.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{interference_report, InterferenceReport, ParamMap, ReluMlp};
use crate::error::Result;
use crate::merge;
use crate::solver::{LayerProblem, SubspaceObjective, SubspaceVariant};
use crate::synth::{SynthParams, TaskFamily, L1, L2};
use crate::task_vector::{MergeConfig, Method};

fn network() -> ReluMlp {
    ReluMlp::new(vec![L1.to_string(), L2.to_string()])
}

/// Relative interference of `tau_m` against every expert of the family, each
/// on its own task's inputs.
pub fn family_interference(family: &TaskFamily, tau_m: &ParamMap) -> Result<InterferenceReport> {
    let samples: Vec<_> = family.tasks.iter().map(|t| t.input_vectors()).collect();
    interference_report(&network(), &family.theta()?, tau_m, &family.task_vectors()?, &samples)
}

/// Optimizer settings for gradient-descent merging on a synthetic family.
/// The full-model step size (1e-5 per Adam step) barely moves entries of
/// the size seen here, so these runs use a larger rate and more steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdSettings {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for GdSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    pub final_interference: f64,
    pub report: InterferenceReport,
}

/// Merges the family with `cfg` through the checkpoint pipeline and measures
/// interference of the resulting task vector.
pub fn merged_interference(family: &TaskFamily, cfg: &MergeConfig) -> Result<MethodResult> {
    let (merged, _) = merge::merge(&family.pretrained, &family.experts, cfg)?;
    let tau_m = SynthParams::from_checkpoint(&merged)?
        .sub(&SynthParams::from_checkpoint(&family.pretrained)?)?
        .to_map();
    let report = family_interference(family, &tau_m)?;
    Ok(MethodResult {
        method: cfg.method.as_str().to_string(),
        final_interference: report.mean_final(),
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodComparison {
    pub seed: u64,
    pub wudi_gd: MethodResult,
    pub task_arithmetic: MethodResult,
    pub average: MethodResult,
}

impl MethodComparison {
    pub fn beats_task_arithmetic(&self) -> bool {
        self.wudi_gd.final_interference < self.task_arithmetic.final_interference
    }

    pub fn beats_average(&self) -> bool {
        self.wudi_gd.final_interference < self.average.final_interference
    }
}

/// WUDI gradient descent against task arithmetic (λ = 1) and averaging.
pub fn compare_methods(family: &TaskFamily, gd: GdSettings) -> Result<MethodComparison> {
    let base = MergeConfig::default();
    let run = |method, lambda| {
        merged_interference(
            family,
            &MergeConfig {
                method,
                lambda,
                steps: gd.steps,
                learning_rate: gd.learning_rate,
                ..base.clone()
            },
        )
    };
    Ok(MethodComparison {
        seed: family.seed,
        wudi_gd: run(Method::WudiGd, 1.0)?,
        task_arithmetic: run(Method::TaskArith, 1.0)?,
        average: run(Method::Average, 1.0)?,
    })
}

/// One loss variant of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub subspace: SubspaceVariant,
    pub balanced: bool,
}

impl AblationVariant {
    pub fn label(&self) -> String {
        let base = match self.subspace {
            SubspaceVariant::Full => "task-vector".to_string(),
            SubspaceVariant::RandomGaussian => "gaussian".to_string(),
            SubspaceVariant::RowSubset { fraction } => format!("row-subset-{fraction}"),
        };
        if self.balanced {
            base
        } else {
            format!("{base}-unbalanced")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub variant: String,
    pub final_interference: f64,
    pub per_depth: Vec<f64>,
}

/// Solves every layer with each loss variant and measures interference.
pub fn ablate(
    family: &TaskFamily,
    variants: &[AblationVariant],
    gd: GdSettings,
    seed: u64,
) -> Result<Vec<AblationResult>> {
    let taus = family.task_vectors()?;
    variants
        .iter()
        .map(|v| {
            let mut tau_m = ParamMap::new();
            for layer in [L1, L2] {
                let layer_taus = taus.iter().map(|t| t[layer].clone()).collect();
                let problem = LayerProblem::new(layer_taus, v.balanced).map_err(|e| e.in_layer(layer))?;
                let (m, _) = SubspaceObjective::new(&problem, v.subspace, seed)
                    .and_then(|o| o.solve_gd(gd.steps, gd.learning_rate))
                    .map_err(|e| e.in_layer(layer))?;
                tau_m.insert(layer.to_string(), m);
            }
            let report = family_interference(family, &tau_m)?;
            Ok(AblationResult {
                variant: v.label(),
                final_interference: report.mean_final(),
                per_depth: report.mean_per_depth(),
            })
        })
        .collect()
}
