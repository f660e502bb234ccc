use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable array tagged with the optimizer group it belongs to.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: String,
    /// False for fixed arrays that live with the model but are never updated.
    pub trainable: bool,
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, group: &str, value: Tensor) -> Result<ParamId, TensorError> {
        self.insert(name, group, value, true)
    }

    /// Registers an array that receives gradients but is skipped by the optimizer.
    pub fn add_frozen(&mut self, name: &str, group: &str, value: Tensor) -> Result<ParamId, TensorError> {
        self.insert(name, group, value, false)
    }

    fn insert(&mut self, name: &str, group: &str, value: Tensor, trainable: bool) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Parameter(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            trainable,
            value: Arc::new(value),
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access to a parameter's data; copies only if a live tape
    /// still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let old = &self.params[id.0].value;
        if old.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Sets every gradient to a zero array of the parameter's size.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            let n = p.value.len();
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => p.grad = Some(vec![0.0; n]),
            }
        }
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        let n = p.value.len();
        let slot = p.grad.get_or_insert_with(|| vec![0.0; n]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    /// Number of scalar entries, optionally restricted to groups with the
    /// given prefix.
    pub fn count(&self, group_prefix: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|p| group_prefix.map_or(true, |g| p.group.starts_with(g)))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales all gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for p in &mut self.params {
                if let Some(g) = &mut p.grad {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Overwrites parameters by name; every stored parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, arrays: &[(String, Tensor)]) -> Result<(), TensorError> {
        let map: BTreeMap<&str, &Tensor> = arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let t = map
                .get(name.as_str())
                .ok_or_else(|| TensorError::Parameter(format!("missing array {name}")))?;
            self.set_value(ParamId(i), (*t).clone())?;
        }
        Ok(())
    }

    /// Overwrites the parameters whose names appear in `arrays` and returns
    /// how many were loaded. Shapes must agree.
    pub fn load_matching(&mut self, arrays: &[(String, Tensor)]) -> Result<usize, TensorError> {
        let mut n = 0;
        for (name, t) in arrays {
            if let Some(id) = self.id(name) {
                self.set_value(id, t.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// AdamW hyperparameters and moments. Groups absent from `group_lr` use `lr`;
/// a group rate of exactly zero leaves its parameters bitwise untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Multiplier applied to every group rate, e.g. from a schedule.
    pub lr_scale: f64,
    pub group_lr: BTreeMap<String, f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            lr_scale: 1.0,
            group_lr: BTreeMap::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_group_lr(mut self, group: &str, lr: f64) -> OptimizerState {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    /// Rate for a parameter group; the longest matching prefix wins so that
    /// "context" can cover "context.l1" unless the latter is set explicitly.
    pub fn rate_for(&self, group: &str) -> f64 {
        let mut best: Option<(&str, f64)> = None;
        for (g, &lr) in &self.group_lr {
            let matches = group == g || (group.starts_with(g.as_str()) && group[g.len()..].starts_with('.'));
            if matches && best.map_or(true, |(b, _)| g.len() > b.len()) {
                best = Some((g, lr));
            }
        }
        best.map_or(self.lr, |(_, lr)| lr)
    }
}

/// One decoupled-weight-decay Adam update over every parameter with a
/// non-zero rate.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<(), TensorError> {
    if state.first.len() != store.len() {
        state.first = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.second = state.first.clone();
    }
    for p in &store.params {
        if p.trainable && p.grad.is_none() && state.rate_for(&p.group) != 0.0 {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in store.params.iter_mut().enumerate() {
        let lr = state.rate_for(&p.group) * state.lr_scale;
        if lr == 0.0 || !p.trainable {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above");
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let w = Arc::make_mut(&mut p.value).data_mut();
        for j in 0..w.len() {
            w[j] -= lr * state.weight_decay * w[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            w[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, TensorError> {
    if total == 0 || step > total {
        return Err(TensorError::Parameter(format!(
            "cosine schedule needs 0 <= step <= total and total > 0 (step {step}, total {total})"
        )));
    }
    let frac = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
