//! Task vectors (expert minus pretrained), LoRA densification, layer
//! eligibility and assembly of the merged checkpoint.

use std::collections::BTreeMap;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType, TensorData};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NonlinearPolicy {
    #[default]
    Pretrained,
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    WudiGd,
    WudiCfs,
    Average,
    TaskArith,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::WudiGd => "wudi-gd",
            Method::WudiCfs => "wudi-cfs",
            Method::Average => "average",
            Method::TaskArith => "task-arith",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: Method,
    /// Rescaling coefficient in `θ + ε·τ_m`.
    pub epsilon: f64,
    /// Task-arithmetic coefficient.
    pub lambda: f64,
    /// Ridge coefficient of the closed-form solver.
    pub omega: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight each task's loss term by `1/‖τ_i‖_F²`.
    pub balanced: bool,
    pub nonlinear_policy: NonlinearPolicy,
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    /// Worker count for layer solves. Never affects results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: Method::WudiGd,
            epsilon: 1.0,
            lambda: 0.3,
            omega: 0.0,
            steps: 300,
            learning_rate: 1e-5,
            balanced: true,
            nonlinear_policy: NonlinearPolicy::Pretrained,
            include: vec!["*".into()],
            exclude: vec!["*embed*".into(), "*position*".into()],
            threads: 1,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 2.0) {
            return bad(format!("epsilon must lie in (0, 2], got {}", self.epsilon));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be non-negative, got {}", self.omega));
        }
        if self.method == Method::TaskArith && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.threads < 1 {
            return bad("threads must be at least 1".into());
        }
        self.patterns()?;
        Ok(())
    }

    fn patterns(&self) -> Result<(Vec<Pattern>, Vec<Pattern>)> {
        let compile = |ps: &[String]| {
            ps.iter()
                .map(|p| Pattern::new(p).map_err(|e| Error::Config(format!("pattern {p:?}: {e}"))))
                .collect::<Result<Vec<_>>>()
        };
        Ok((compile(&self.include)?, compile(&self.exclude)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    RankNot2,
    PatternExcluded,
    DimensionBelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedTensor {
    pub name: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerClassification {
    pub eligible: Vec<String>,
    pub excluded: Vec<ExcludedTensor>,
}

impl LayerClassification {
    pub fn is_eligible(&self, name: &str) -> bool {
        self.eligible.binary_search_by(|n| n.as_str().cmp(name)).is_ok()
    }
}

/// Minimum extent of both matrix dimensions for a tensor to be merged by
/// the solver.
pub const MIN_LAYER_DIM: usize = 2;

pub fn classify_layers(pretrained: &Checkpoint, cfg: &MergeConfig) -> Result<LayerClassification> {
    let (include, exclude) = cfg.patterns()?;
    let mut out = LayerClassification::default();
    for (name, t) in pretrained.iter() {
        let reason = if t.rank() != 2 {
            Some(ExclusionReason::RankNot2)
        } else if !include.iter().any(|p| p.matches(name)) || exclude.iter().any(|p| p.matches(name))
        {
            Some(ExclusionReason::PatternExcluded)
        } else if t.shape.iter().min().copied().unwrap_or(0) < MIN_LAYER_DIM {
            Some(ExclusionReason::DimensionBelowThreshold)
        } else {
            None
        };
        match reason {
            None => out.eligible.push(name.clone()),
            Some(reason) => out.excluded.push(ExcludedTensor {
                name: name.clone(),
                reason,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    /// Per-layer deltas of merge-eligible linear layers.
    pub layers: BTreeMap<String, Matrix>,
    /// Deltas of every other tensor, carried for the non-linear policy.
    pub passthrough: BTreeMap<String, TensorData>,
    pub source_id: usize,
}

impl TaskVector {
    /// Dumps the task vector as a checkpoint (deltas stored in `dtype`).
    pub fn to_checkpoint(&self, dtype: DType) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, m) in &self.layers {
            c.insert(name.clone(), TensorData::from_matrix(m, dtype));
        }
        for (name, t) in &self.passthrough {
            c.insert(
                name.clone(),
                TensorData {
                    dtype,
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                },
            );
        }
        c
    }
}

fn missing(name: &str) -> Error {
    Error::Integrity {
        tensor: name.to_string(),
        message: "missing from expert checkpoint".into(),
    }
}

fn delta(pre: &TensorData, exp: &TensorData, name: &str) -> Result<TensorData> {
    if pre.shape != exp.shape {
        return Err(Error::Dimension {
            op: "task vector",
            left: pre.shape.clone(),
            right: exp.shape.clone(),
        }
        .in_layer(name));
    }
    Ok(TensorData {
        dtype: pre.dtype,
        shape: pre.shape.clone(),
        values: exp.values.iter().zip(&pre.values).map(|(e, p)| e - p).collect(),
    })
}

pub fn extract_task_vector(
    pretrained: &Checkpoint,
    expert: &Checkpoint,
    classification: &LayerClassification,
    source_id: usize,
) -> Result<TaskVector> {
    let mut tv = TaskVector {
        layers: BTreeMap::new(),
        passthrough: BTreeMap::new(),
        source_id,
    };
    for (name, pre) in pretrained.iter() {
        let exp = expert.get(name).ok_or_else(|| missing(name))?;
        let d = delta(pre, exp, name)?;
        if classification.is_eligible(name) {
            tv.layers.insert(name.clone(), d.matrix().expect("eligible layers have rank 2"));
        } else {
            tv.passthrough.insert(name.clone(), d);
        }
    }
    Ok(tv)
}

/// Densifies a low-rank adapter pair: `τ = B·A`.
pub fn restore_lora(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul(b, a)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraSuffixes {
    pub a: String,
    pub b: String,
}

impl Default for LoraSuffixes {
    fn default() -> Self {
        Self {
            a: ".lora_A".into(),
            b: ".lora_B".into(),
        }
    }
}

/// Task vector of an adapter checkpoint. For pretrained layer `L` the
/// adapter holds `L<a-suffix>` (r × d_in) and `L<b-suffix>` (d_out × r);
/// layers without a pair get a zero delta. Adapter tensors named like a
/// pretrained tensor are treated as fully fine-tuned parameters.
pub fn extract_lora_task_vector(
    pretrained: &Checkpoint,
    adapter: &Checkpoint,
    classification: &LayerClassification,
    suffixes: &LoraSuffixes,
    source_id: usize,
) -> Result<TaskVector> {
    let mut tv = TaskVector {
        layers: BTreeMap::new(),
        passthrough: BTreeMap::new(),
        source_id,
    };
    let mut used = std::collections::BTreeSet::new();
    for (name, pre) in pretrained.iter() {
        let a_name = format!("{name}{}", suffixes.a);
        let b_name = format!("{name}{}", suffixes.b);
        let d = match (adapter.get(&a_name), adapter.get(&b_name)) {
            (Some(_), Some(_)) => {
                let tau = restore_lora(&adapter.matrix(&a_name)?, &adapter.matrix(&b_name)?)
                    .map_err(|e| e.in_layer(name.clone()))?;
                if vec![tau.rows(), tau.cols()] != pre.shape {
                    return Err(Error::Dimension {
                        op: "lora restore",
                        left: pre.shape.clone(),
                        right: vec![tau.rows(), tau.cols()],
                    }
                    .in_layer(name.clone()));
                }
                used.insert(a_name);
                used.insert(b_name);
                TensorData::from_matrix(&tau, pre.dtype)
            }
            (None, None) => match adapter.get(name) {
                Some(exp) => {
                    used.insert(name.clone());
                    delta(pre, exp, name)?
                }
                None => TensorData {
                    dtype: pre.dtype,
                    shape: pre.shape.clone(),
                    values: vec![0.0; pre.numel()],
                },
            },
            (Some(_), None) => return Err(missing(&b_name)),
            (None, Some(_)) => return Err(missing(&a_name)),
        };
        if classification.is_eligible(name) {
            tv.layers.insert(name.clone(), d.matrix().expect("eligible layers have rank 2"));
        } else {
            tv.passthrough.insert(name.clone(), d);
        }
    }
    if let Some(stray) = adapter.names().find(|n| !used.contains(*n)) {
        return Err(Error::Integrity {
            tensor: stray.to_string(),
            message: "adapter tensor matches no pretrained tensor".into(),
        });
    }
    Ok(tv)
}

/// `θ_m = θ + ε·τ_m` on merged layers; other tensors follow the non-linear
/// policy. Values are rounded to each pretrained tensor's dtype.
pub fn assemble_merged(
    pretrained: &Checkpoint,
    tau_m: &TaskVector,
    cfg: &MergeConfig,
    expert_taus: &[TaskVector],
) -> Result<Checkpoint> {
    if let Some(stray) = tau_m.layers.keys().find(|n| !pretrained.contains(n)) {
        return Err(Error::Integrity {
            tensor: stray.clone(),
            message: "merged layer absent from pretrained checkpoint".into(),
        });
    }
    let eps = cfg.epsilon;
    let mut out = Checkpoint::new();
    out.metadata = pretrained.metadata.clone();
    for (name, pre) in pretrained.iter() {
        let values = if let Some(tau) = tau_m.layers.get(name) {
            if vec![tau.rows(), tau.cols()] != pre.shape {
                return Err(Error::Dimension {
                    op: "assemble",
                    left: pre.shape.clone(),
                    right: vec![tau.rows(), tau.cols()],
                }
                .in_layer(name.clone()));
            }
            pre.values
                .iter()
                .zip(tau.data())
                .map(|(p, t)| p + eps * t)
                .collect()
        } else {
            let deltas: Vec<&TensorData> = expert_taus
                .iter()
                .filter_map(|tv| tv.passthrough.get(name))
                .collect();
            for d in &deltas {
                if d.shape != pre.shape {
                    return Err(Error::Dimension {
                        op: "assemble",
                        left: pre.shape.clone(),
                        right: d.shape.clone(),
                    }
                    .in_layer(name.clone()));
                }
            }
            let scale = match cfg.nonlinear_policy {
                NonlinearPolicy::Pretrained => None,
                _ if deltas.is_empty() => None,
                NonlinearPolicy::Mean => Some(1.0 / deltas.len() as f64),
                NonlinearPolicy::Sum => Some(1.0),
            };
            match scale {
                None => pre.values.clone(),
                Some(s) => {
                    let mut sum = vec![0.0; pre.numel()];
                    for d in &deltas {
                        for (acc, v) in sum.iter_mut().zip(&d.values) {
                            *acc += v;
                        }
                    }
                    pre.values
                        .iter()
                        .zip(&sum)
                        .map(|(p, d)| if s == 1.0 { p + eps * d } else { p + eps * (d * s) })
                        .collect()
                }
            }
        };
        let t = TensorData {
            dtype: pre.dtype,
            shape: pre.shape.clone(),
            values,
        };
        out.insert(name.clone(), t.rounded());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dtype: DType, shape: &[usize], v: &[f64]) -> TensorData {
        TensorData::new(dtype, shape.to_vec(), v.to_vec()).unwrap()
    }

    fn pretrained() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("ln.weight", t(DType::F32, &[2], &[1.0, 1.0]));
        c.insert("attn.qkv.weight", t(DType::F32, &[2, 2], &[1.0, 1.0, 0.0, 0.0]));
        c.insert("token_embedding.weight", t(DType::F32, &[3, 2], &[0.0; 6]));
        c.insert("head.weight", t(DType::F32, &[1, 2], &[0.0; 2]));
        c
    }

    #[test]
    fn classification_reasons() {
        let mut c = pretrained();
        c.insert("big.attn.qkv.weight", t(DType::F32, &[768, 768], &vec![0.0; 768 * 768]));
        let cls = classify_layers(&c, &MergeConfig::default()).unwrap();
        assert_eq!(cls.eligible, vec!["attn.qkv.weight", "big.attn.qkv.weight"]);
        let reason = |n: &str| cls.excluded.iter().find(|e| e.name == n).unwrap().reason;
        assert_eq!(reason("ln.weight"), ExclusionReason::RankNot2);
        assert_eq!(reason("token_embedding.weight"), ExclusionReason::PatternExcluded);
        assert_eq!(reason("head.weight"), ExclusionReason::DimensionBelowThreshold);
        // Partition.
        assert_eq!(cls.eligible.len() + cls.excluded.len(), c.len());
        assert!(cls.excluded.iter().all(|e| !cls.is_eligible(&e.name)));
    }

    #[test]
    fn include_patterns_restrict() {
        let cfg = MergeConfig {
            include: vec!["*.mlp.*".into()],
            ..MergeConfig::default()
        };
        let cls = classify_layers(&pretrained(), &cfg).unwrap();
        assert!(cls.eligible.is_empty());
        let bad = MergeConfig {
            exclude: vec!["[".into()],
            ..MergeConfig::default()
        };
        assert!(matches!(classify_layers(&pretrained(), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn extract_examples() {
        let p = pretrained();
        let cls = classify_layers(&p, &MergeConfig::default()).unwrap();
        let same = extract_task_vector(&p, &p, &cls, 0).unwrap();
        assert!(same.layers.values().all(|m| m.max_abs() == 0.0));

        let mut e = p.clone();
        e.insert("attn.qkv.weight", t(DType::F32, &[2, 2], &[2.0, 0.0, 0.0, 0.0]));
        let tv = extract_task_vector(&p, &e, &cls, 3).unwrap();
        assert_eq!(tv.layers["attn.qkv.weight"], Matrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]));
        assert_eq!(tv.source_id, 3);
        assert!(tv.passthrough.contains_key("ln.weight"));

        let mut short = p.clone();
        short = short.remap_names(&[crate::checkpoint::RemapRule {
            from: "ln.".into(),
            to: "norm.".into(),
        }]);
        assert!(matches!(
            extract_task_vector(&p, &short, &cls, 0),
            Err(Error::Integrity { .. })
        ));
    }

    #[test]
    fn extract_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Checkpoint::new();
        let mut e = Checkpoint::new();
        let vals = |rng: &mut ChaCha8Rng| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (pv, ev) = (vals(&mut rng), vals(&mut rng));
        p.insert("w", t(DType::F64, &[3, 4], &pv));
        e.insert("w", t(DType::F64, &[3, 4], &ev));
        let cls = classify_layers(&p, &MergeConfig::default()).unwrap();
        let tv = extract_task_vector(&p, &e, &cls, 0).unwrap();
        for k in 0..12 {
            assert_eq!(tv.layers["w"].data()[k], ev[k] - pv[k]);
        }
    }

    #[test]
    fn lora_examples() {
        let b = Matrix::from_rows(&[[1.0], [0.0]]);
        let a = Matrix::from_rows(&[[2.0, 3.0]]);
        assert_eq!(restore_lora(&a, &b).unwrap(), Matrix::from_rows(&[[2.0, 3.0], [0.0, 0.0]]));
        assert_eq!(
            restore_lora(&Matrix::zeros(1, 2), &b).unwrap(),
            Matrix::zeros(2, 2)
        );
        assert!(restore_lora(&Matrix::zeros(2, 2), &b).is_err());
    }

    #[test]
    fn lora_random_pair_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Matrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let got = restore_lora(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..6 {
                let s: f64 = (0..4).map(|k| b.get(i, k) * a.get(k, j)).sum();
                assert!((got.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lora_rank_is_bounded() {
        // A rank-2 pair densified into a 5x5 matrix: Gaussian elimination
        // leaves no pivot above tolerance after the second.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Matrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let a = Matrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let m = restore_lora(&a, &b).unwrap();
        assert_eq!(numerical_rank(&m, 1e-8), 2);
    }

    fn numerical_rank(m: &Matrix, tol: f64) -> usize {
        let mut a = m.clone();
        let scale = a.max_abs();
        let mut rank = 0;
        let mut used = vec![false; a.rows()];
        for c in 0..a.cols() {
            let Some(p) = (0..a.rows())
                .filter(|&r| !used[r])
                .max_by(|&x, &y| a.get(x, c).abs().total_cmp(&a.get(y, c).abs()))
            else {
                break;
            };
            if a.get(p, c).abs() <= tol * scale {
                continue;
            }
            used[p] = true;
            rank += 1;
            for r in 0..a.rows() {
                if r != p {
                    let f = a.get(r, c) / a.get(p, c);
                    for k in 0..a.cols() {
                        let v = a.get(r, k) - f * a.get(p, k);
                        a.set(r, k, v);
                    }
                }
            }
        }
        rank
    }

    #[test]
    fn lora_task_vector_from_adapter() {
        let p = pretrained();
        let cls = classify_layers(&p, &MergeConfig::default()).unwrap();
        let mut adapter = Checkpoint::new();
        adapter.insert("attn.qkv.weight.lora_A", t(DType::F32, &[1, 2], &[2.0, 3.0]));
        adapter.insert("attn.qkv.weight.lora_B", t(DType::F32, &[2, 1], &[1.0, 0.0]));
        adapter.insert("ln.weight", t(DType::F32, &[2], &[1.5, 1.0]));
        let tv = extract_lora_task_vector(&p, &adapter, &cls, &LoraSuffixes::default(), 0).unwrap();
        assert_eq!(tv.layers["attn.qkv.weight"], Matrix::from_rows(&[[2.0, 3.0], [0.0, 0.0]]));
        assert_eq!(tv.passthrough["ln.weight"].values, vec![0.5, 0.0]);
        assert!(tv.passthrough["head.weight"].values.iter().all(|&v| v == 0.0));

        let mut broken = adapter.clone();
        broken.insert("stray.lora_A", t(DType::F32, &[1, 2], &[0.0, 0.0]));
        assert!(extract_lora_task_vector(&p, &broken, &cls, &LoraSuffixes::default(), 0).is_err());
    }

    #[test]
    fn assemble_examples() {
        let mut p = Checkpoint::new();
        p.insert("w", t(DType::F64, &[1, 1], &[2.0]));
        p.insert("b", t(DType::F64, &[1], &[0.0]));
        let mut tau = TaskVector {
            layers: BTreeMap::from([("w".to_string(), Matrix::zeros(1, 1))]),
            passthrough: BTreeMap::new(),
            source_id: 0,
        };
        let cfg = MergeConfig::default();
        assert_eq!(assemble_merged(&p, &tau, &cfg, &[]).unwrap(), p);

        tau.layers.insert("w".into(), Matrix::from_rows(&[[2.0]]));
        let half = MergeConfig {
            epsilon: 0.5,
            ..MergeConfig::default()
        };
        assert_eq!(assemble_merged(&p, &tau, &half, &[]).unwrap().get("w").unwrap().values, vec![3.0]);

        let expert = |d: f64| TaskVector {
            layers: BTreeMap::new(),
            passthrough: BTreeMap::from([("b".to_string(), t(DType::F64, &[1], &[d]))]),
            source_id: 0,
        };
        let mean = MergeConfig {
            nonlinear_policy: NonlinearPolicy::Mean,
            ..MergeConfig::default()
        };
        let m = assemble_merged(&p, &tau, &mean, &[expert(1.0), expert(3.0)]).unwrap();
        assert_eq!(m.get("b").unwrap().values, vec![2.0]);
        let sum = MergeConfig {
            nonlinear_policy: NonlinearPolicy::Sum,
            ..MergeConfig::default()
        };
        let m = assemble_merged(&p, &tau, &sum, &[expert(1.0), expert(3.0)]).unwrap();
        assert_eq!(m.get("b").unwrap().values, vec![4.0]);
        let m = assemble_merged(&p, &tau, &cfg, &[expert(1.0), expert(3.0)]).unwrap();
        assert_eq!(m.get("b").unwrap().values, vec![0.0]);

        tau.layers.insert("w".into(), Matrix::zeros(2, 1));
        assert!(assemble_merged(&p, &tau, &cfg, &[]).is_err());
    }

    #[test]
    fn extract_then_assemble_reproduces_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Checkpoint::new();
        let mut e = Checkpoint::new();
        for (name, shape) in [("a.weight", vec![4, 3]), ("a.bias", vec![4]), ("embed", vec![5, 2])] {
            let n: usize = shape.iter().product();
            let draw = |rng: &mut ChaCha8Rng| {
                (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect::<Vec<_>>()
            };
            p.insert(name, t(DType::F32, &shape, &draw(&mut rng)));
            e.insert(name, t(DType::F32, &shape, &draw(&mut rng)));
        }
        let cfg = MergeConfig {
            nonlinear_policy: NonlinearPolicy::Sum,
            ..MergeConfig::default()
        };
        let cls = classify_layers(&p, &cfg).unwrap();
        let tv = extract_task_vector(&p, &e, &cls, 0).unwrap();
        let merged = assemble_merged(&p, &tv, &cfg, std::slice::from_ref(&tv)).unwrap();
        let bytes = crate::checkpoint::Checkpoint::from_bytes(&merged.to_bytes().unwrap()).unwrap();
        assert_eq!(bytes, e);
    }

    #[test]
    fn config_validation() {
        assert!(MergeConfig::default().validate().is_ok());
        for cfg in [
            MergeConfig { steps: 0, ..Default::default() },
            MergeConfig { learning_rate: 0.0, ..Default::default() },
            MergeConfig { epsilon: 0.0, ..Default::default() },
            MergeConfig { epsilon: 2.5, ..Default::default() },
            MergeConfig { omega: -1.0, ..Default::default() },
            MergeConfig { method: Method::TaskArith, lambda: 0.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
