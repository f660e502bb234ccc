//! Integrated-gradients attribution over atom features, aggregated per atom,
//! and comparison of attributions across contexts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::MolGraph;
use crate::nestmodel::{ContextTuple, GraphBatch, Mode, ModelError, NestModel};
use crate::tensor::{Tape, Tensor, TensorError};

pub const MIN_STEPS: usize = 8;
pub const DEFAULT_STEPS: usize = 50;
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("integrated gradients needs at least {MIN_STEPS} steps, got {0}")]
    StepsTooFew(usize),
    #[error("attribution vector for context {0} is all zeros")]
    ZeroVector(usize),
    #[error("need at least {0} inputs")]
    TooFewInputs(usize),
    #[error("input and baseline shapes differ")]
    Shape,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Sum of absolute feature attributions per atom.
    pub atom_importance: Vec<f64>,
    /// Signed attributions, atoms x features, row-major.
    pub feature_attributions: Vec<f64>,
    pub features: usize,
    pub steps: usize,
    pub baseline: String,
    pub aggregation: String,
    pub output: f64,
    pub baseline_output: f64,
    /// |Σ attributions − (f(x) − f(x'))|.
    pub residual: f64,
}

impl AttributionResult {
    /// Residual as a fraction of |f(x) − f(x')|.
    pub fn relative_residual(&self) -> f64 {
        self.residual / (self.output - self.baseline_output).abs()
    }
}

/// Gradient oracle: maps a batch of inputs to (value, gradient) pairs.
pub type GradFn<'a> = dyn FnMut(&[Tensor]) -> Result<Vec<(f64, Vec<f64>)>, AttributionError> + 'a;

/// Integrated gradients of `f` from `baseline` to `x` with the midpoint rule
/// at α = (k − ½)/steps.
pub fn integrated_gradients_with(
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    f: &mut GradFn<'_>,
) -> Result<AttributionResult, AttributionError> {
    if steps < MIN_STEPS {
        return Err(AttributionError::StepsTooFew(steps));
    }
    if x.shape() != baseline.shape() {
        return Err(AttributionError::Shape);
    }
    let (rows, cols) = (x.rows(), x.cols());
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0; x.len()];
    let alphas: Vec<f64> = (1..=steps).map(|k| (k as f64 - 0.5) / steps as f64).collect();
    for chunk in alphas.chunks(CHUNK) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|&a| {
                let d = baseline.data().iter().zip(&diff).map(|(b, d)| b + a * d).collect();
                Tensor::matrix(rows, cols, d)
            })
            .collect::<Result<_, _>>()?;
        for (_, g) in f(&inputs)? {
            for (s, v) in acc.iter_mut().zip(&g) {
                *s += v;
            }
        }
    }
    let ends = f(&[x.clone(), baseline.clone()])?;
    let (output, baseline_output) = (ends[0].0, ends[1].0);
    let feature_attributions: Vec<f64> = acc.iter().zip(&diff).map(|(g, d)| d * g / steps as f64).collect();
    let total: f64 = feature_attributions.iter().sum();
    let atom_importance = (0..rows)
        .map(|r| feature_attributions[r * cols..(r + 1) * cols].iter().map(|v| v.abs()).sum())
        .collect();
    Ok(AttributionResult {
        atom_importance,
        feature_attributions,
        features: cols,
        steps,
        baseline: "zero-features".into(),
        aggregation: "l1".into(),
        output,
        baseline_output,
        residual: (total - (output - baseline_output)).abs(),
    })
}

/// Model output (logit or value) and its gradient with respect to the atom
/// feature rows, for several feature matrices on one graph topology.
fn model_gradients(
    model: &NestModel,
    graph: &MolGraph,
    context: ContextTuple,
    task: usize,
    inputs: &[Tensor],
) -> Result<Vec<(f64, Vec<f64>)>, AttributionError> {
    let k = inputs.len();
    let graphs = vec![graph; k];
    let batch = GraphBatch::new(&graphs)?;
    let mut data = Vec::with_capacity(inputs.iter().map(Tensor::len).sum());
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    let n = graph.num_atoms();
    let cols = inputs[0].cols();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(n * k, cols, data)?, true);
    let out = model.forward_features(&mut tape, &batch, x, &vec![context; k], &vec![task; k], Mode::Eval)?;
    let values = tape.value(out).data().to_vec();
    let total = tape.sum(out, None)?;
    tape.backward(total)?;
    let g = tape.grad(x).expect("input leaf requires grad");
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, g[i * n * cols..(i + 1) * n * cols].to_vec()))
        .collect())
}

/// Integrated gradients of the model output for `graph` under `context` on
/// head `task`, from an all-zero atom-feature baseline.
pub fn integrated_gradients(
    model: &NestModel,
    graph: &MolGraph,
    context: ContextTuple,
    task: &str,
    steps: usize,
) -> Result<AttributionResult, AttributionError> {
    if steps < MIN_STEPS {
        return Err(AttributionError::StepsTooFew(steps));
    }
    model.check_context(context)?;
    let t = model.task_index(task)?;
    let x = GraphBatch::new(&[graph])?.atom_features().clone();
    let baseline = Tensor::zeros(x.rows(), x.cols());
    integrated_gradients_with(&x, &baseline, steps, &mut |inputs| model_gradients(model, graph, context, t, inputs))
}

/// Cosine similarity with exact 1.0 for identical vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    dot / (na * nb).sqrt()
}

/// Pairwise cosine similarity of per-atom importances across contexts.
pub fn attribution_similarity(
    model: &NestModel,
    graph: &MolGraph,
    contexts: &[ContextTuple],
    task: &str,
    steps: usize,
) -> Result<Vec<Vec<f64>>, AttributionError> {
    if contexts.len() < 2 {
        return Err(AttributionError::TooFewInputs(2));
    }
    let mut vecs = Vec::with_capacity(contexts.len());
    for (i, &c) in contexts.iter().enumerate() {
        let r = integrated_gradients(model, graph, c, task, steps)?;
        if r.atom_importance.iter().all(|&v| v == 0.0) {
            return Err(AttributionError::ZeroVector(i));
        }
        vecs.push(r.atom_importance);
    }
    Ok(vecs.iter().map(|a| vecs.iter().map(|b| cosine(a, b)).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionStatsRow {
    pub label: String,
    pub n_atoms: usize,
    pub mean: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Atom indices by decreasing importance (ties: lower index first).
    pub top_atoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionStats {
    pub rows: Vec<AttributionStatsRow>,
    /// Statistics over all atoms of all molecules.
    pub pooled: AttributionStatsRow,
}

fn stats_row(label: &str, imp: &[f64], top: usize) -> AttributionStatsRow {
    let n = imp.len() as f64;
    let mean = imp.iter().sum::<f64>() / n;
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut order: Vec<usize> = (0..imp.len()).collect();
    order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
    order.truncate(top);
    AttributionStatsRow {
        label: label.to_string(),
        n_atoms: imp.len(),
        mean,
        max: imp.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: var.sqrt(),
        top_atoms: order,
    }
}

/// Mean, max and standard deviation of atom importance per molecule and
/// pooled; `None` for empty input.
pub fn attribution_stats(results: &[(String, AttributionResult)], top: usize) -> Option<AttributionStats> {
    let results: Vec<_> = results.iter().filter(|(_, r)| !r.atom_importance.is_empty()).collect();
    if results.is_empty() {
        return None;
    }
    let rows = results.iter().map(|(l, r)| stats_row(l, &r.atom_importance, top)).collect();
    let all: Vec<f64> = results.iter().flat_map(|(_, r)| r.atom_importance.iter().copied()).collect();
    let mut pooled = stats_row("all", &all, 0);
    pooled.top_atoms.clear();
    Some(AttributionStats { rows, pooled })
}
