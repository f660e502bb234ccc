//! Message-passing encoder, hierarchical context tables, context fusion and
//! per-task heads.

mod batch;
mod forward;

pub use batch::GraphBatch;
pub use forward::{Mode, Sample};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::one_way_anova_f;
use crate::molgraph::{MolGraph, ATOM_FEATURES, BOND_FEATURES};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, ParamId, ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("molecule has no atoms")]
    EmptyMolecule,
    #[error("{level} id {id} out of range (capacity {capacity})")]
    IdOutOfRange { level: &'static str, id: usize, capacity: usize },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionVariant {
    None,
    ConcatFrozen,
    ConcatTrained,
    Additive,
    Multiplicative,
    #[serde(rename = "FiLM")]
    Film,
    Hypernetwork,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 7] = [
        FusionVariant::None,
        FusionVariant::ConcatFrozen,
        FusionVariant::ConcatTrained,
        FusionVariant::Additive,
        FusionVariant::Multiplicative,
        FusionVariant::Film,
        FusionVariant::Hypernetwork,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::None => "None",
            FusionVariant::ConcatFrozen => "ConcatFrozen",
            FusionVariant::ConcatTrained => "ConcatTrained",
            FusionVariant::Additive => "Additive",
            FusionVariant::Multiplicative => "Multiplicative",
            FusionVariant::Film => "FiLM",
            FusionVariant::Hypernetwork => "Hypernetwork",
        }
    }

    pub fn parse(s: &str) -> Option<FusionVariant> {
        FusionVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
}

/// Program, assay and round ids; 0 is the generic row at every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct ContextTuple {
    pub program: usize,
    pub assay: usize,
    pub round: usize,
}

impl ContextTuple {
    pub fn new(program: usize, assay: usize, round: usize) -> ContextTuple {
        ContextTuple { program, assay, round }
    }

    pub fn generic() -> ContextTuple {
        ContextTuple::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub atom_features: usize,
    pub bond_features: usize,
    pub hidden: usize,
    pub mp_layers: usize,
    pub l1_dim: usize,
    pub l2_dim: usize,
    pub l3_dim: usize,
    pub l1_capacity: usize,
    pub l2_capacity: usize,
    pub l3_capacity: usize,
    pub film_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    /// Per-sample standardization with learned scale/shift after each head
    /// hidden layer.
    pub head_norm: bool,
    pub hyper_rank: usize,
    pub fusion: FusionVariant,
    pub tasks: Vec<TaskSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            atom_features: ATOM_FEATURES,
            bond_features: BOND_FEATURES,
            hidden: 256,
            mp_layers: 6,
            l1_dim: 128,
            l2_dim: 64,
            l3_dim: 32,
            l1_capacity: 64,
            l2_capacity: 16,
            l3_capacity: 64,
            film_hidden: 256,
            head_hidden: vec![256, 128],
            dropout: 0.1,
            head_norm: true,
            hyper_rank: 16,
            fusion: FusionVariant::Film,
            tasks: vec![TaskSpec {
                id: "default".into(),
                kind: TaskKind::Classification,
            }],
        }
    }
}

impl ModelConfig {
    /// Small dimensions for quick experiments on one CPU core.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            hidden: 32,
            mp_layers: 3,
            l1_dim: 16,
            l2_dim: 8,
            l3_dim: 4,
            film_hidden: 32,
            head_hidden: vec![32, 16],
            hyper_rank: 4,
            ..ModelConfig::default()
        }
    }

    pub fn mol_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn context_dim(&self) -> usize {
        self.l1_dim + self.l2_dim + self.l3_dim
    }

    pub fn with_tasks(mut self, tasks: Vec<TaskSpec>) -> ModelConfig {
        self.tasks = tasks;
        self
    }

    pub fn with_fusion(mut self, fusion: FusionVariant) -> ModelConfig {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("atom_features", self.atom_features),
            ("bond_features", self.bond_features),
            ("hidden", self.hidden),
            ("mp_layers", self.mp_layers),
            ("l1_dim", self.l1_dim),
            ("l2_dim", self.l2_dim),
            ("l3_dim", self.l3_dim),
            ("l1_capacity", self.l1_capacity),
            ("l2_capacity", self.l2_capacity),
            ("l3_capacity", self.l3_capacity),
            ("film_hidden", self.film_hidden),
            ("hyper_rank", self.hyper_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.head_hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::Config("head hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if self.tasks.is_empty() {
            return Err(ModelError::Config("at least one task is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(&t.id) {
                return Err(ModelError::Config(format!("duplicate task {}", t.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct MpLayer {
    pub msg_h: ParamId,
    pub msg_e: Linear,
    pub gate_in: Linear,
    pub gate_zr: ParamId,
    pub gate_n: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) enum FusionParams {
    None,
    Concat(Linear),
    Film { gamma: Option<Mlp2>, beta: Option<Mlp2> },
    Hyper { u: Linear, v: Linear, bias: Linear },
}

#[derive(Debug, Clone)]
pub(crate) struct HeadLayer {
    pub lin: Linear,
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub hidden: Vec<HeadLayer>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: Linear,
    pub layers: Vec<MpLayer>,
    pub tables: [ParamId; 3],
    pub proj: Linear,
    pub fusion: FusionParams,
    pub heads: Vec<Head>,
}

/// FNV-1a over the parameter name; keeps each array's initial values
/// independent of which other arrays exist.
fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn array(&mut self, name: &str, group: &str, rows: usize, cols: usize, init: Init, trainable: bool) -> Result<ParamId, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(name));
        let data: Vec<f64> = match init {
            Init::Uniform(a) => (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
            Init::Normal(sd) => {
                let n = Normal::new(0.0, sd).expect("positive sd");
                (0..rows * cols).map(|_| n.sample(&mut rng)).collect()
            }
            Init::Const(v) => vec![v; rows * cols],
        };
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(if trainable {
            self.store.add(name, group, t)?
        } else {
            self.store.add_frozen(name, group, t)?
        })
    }

    fn linear(&mut self, name: &str, group: &str, fan_in: usize, fan_out: usize) -> Result<Linear, ModelError> {
        let a = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: self.array(&format!("{name}.w"), group, fan_in, fan_out, Init::Uniform(a), true)?,
            b: self.array(&format!("{name}.b"), group, 1, fan_out, Init::Uniform(a), true)?,
        })
    }

    /// Linear layer whose weights start at zero and whose bias is constant.
    fn linear_const(&mut self, name: &str, group: &str, fan_in: usize, fan_out: usize, bias: f64) -> Result<Linear, ModelError> {
        Ok(Linear {
            w: self.array(&format!("{name}.w"), group, fan_in, fan_out, Init::Const(0.0), true)?,
            b: self.array(&format!("{name}.b"), group, 1, fan_out, Init::Const(bias), true)?,
        })
    }

    fn film_mlp(&mut self, name: &str, c: usize, hidden: usize, out: usize, bias: f64) -> Result<Mlp2, ModelError> {
        Ok(Mlp2 {
            l1: self.linear(&format!("{name}.l1"), "film", c, hidden)?,
            l2: self.linear_const(&format!("{name}.l2"), "film", hidden, out, bias)?,
        })
    }
}

/// Parameters plus the configuration that determines their layout.
#[derive(Debug, Clone)]
pub struct NestModel {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) layout: Layout,
    task_index: BTreeMap<String, usize>,
}

/// Per-context summary of the modulation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmContextStats {
    pub context: ContextTuple,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmStatistics {
    pub contexts: Vec<FilmContextStats>,
    /// One-way ANOVA F of per-context γ means grouped by family label.
    pub family_f: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl NestModel {
    /// Draws every array from a seed-derived stream named after the array.
    pub fn init(config: ModelConfig, seed: u64) -> Result<NestModel, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            seed,
        };
        let d = config.hidden;
        let input = b.linear("encoder.input", "backbone", config.atom_features, d)?;
        let mut layers = Vec::with_capacity(config.mp_layers);
        let a = 1.0 / (d as f64).sqrt();
        for t in 0..config.mp_layers {
            let p = format!("encoder.mp{t}");
            layers.push(MpLayer {
                msg_h: b.array(&format!("{p}.msg_h"), "backbone", d, d, Init::Uniform(1.0 / ((d + config.bond_features) as f64).sqrt()), true)?,
                msg_e: b.linear(&format!("{p}.msg_e"), "backbone", config.bond_features, d)?,
                gate_in: b.linear(&format!("{p}.gate_in"), "backbone", d, 3 * d)?,
                gate_zr: b.array(&format!("{p}.gate_zr"), "backbone", d, 2 * d, Init::Uniform(a), true)?,
                gate_n: b.array(&format!("{p}.gate_n"), "backbone", d, d, Init::Uniform(a), true)?,
            });
        }
        let tables = [
            b.array("context.l1", "context.l1", config.l1_capacity, config.l1_dim, Init::Normal(0.02), true)?,
            b.array("context.l2", "context.l2", config.l2_capacity, config.l2_dim, Init::Normal(0.02), true)?,
            b.array("context.l3", "context.l3", config.l3_capacity, config.l3_dim, Init::Normal(0.02), true)?,
        ];
        let c = config.context_dim();
        let proj = b.linear("context.proj", "context.proj", c, c)?;
        let m = config.mol_dim();
        let fh = config.film_hidden;
        let fusion = match config.fusion {
            FusionVariant::None => FusionParams::None,
            FusionVariant::ConcatFrozen => {
                let a = 1.0 / ((m + c) as f64).sqrt();
                FusionParams::Concat(Linear {
                    w: b.array("fusion.concat.w", "film", m + c, m, Init::Uniform(a), false)?,
                    b: b.array("fusion.concat.b", "film", 1, m, Init::Uniform(a), false)?,
                })
            }
            FusionVariant::ConcatTrained => FusionParams::Concat(b.linear("fusion.concat", "film", m + c, m)?),
            FusionVariant::Additive => FusionParams::Film {
                gamma: None,
                beta: Some(b.film_mlp("fusion.beta", c, fh, m, 0.0)?),
            },
            FusionVariant::Multiplicative => FusionParams::Film {
                gamma: Some(b.film_mlp("fusion.gamma", c, fh, m, 1.0)?),
                beta: None,
            },
            FusionVariant::Film => FusionParams::Film {
                gamma: Some(b.film_mlp("fusion.gamma", c, fh, m, 1.0)?),
                beta: Some(b.film_mlp("fusion.beta", c, fh, m, 0.0)?),
            },
            FusionVariant::Hypernetwork => {
                let r = config.hyper_rank;
                FusionParams::Hyper {
                    u: b.linear("fusion.hyper_u", "film", c, m * r)?,
                    v: b.linear_const("fusion.hyper_v", "film", c, m * r, 0.0)?,
                    bias: b.linear_const("fusion.hyper_bias", "film", c, m, 0.0)?,
                }
            }
        };
        let mut heads = Vec::with_capacity(config.tasks.len());
        for task in &config.tasks {
            let mut hidden = Vec::new();
            let mut fan_in = m;
            for (i, &h) in config.head_hidden.iter().enumerate() {
                let p = format!("head.{}.h{i}", task.id);
                hidden.push(HeadLayer {
                    lin: b.linear(&p, "heads", fan_in, h)?,
                    scale: b.array(&format!("{p}.scale"), "heads", 1, h, Init::Const(1.0), true)?,
                    shift: b.array(&format!("{p}.shift"), "heads", 1, h, Init::Const(0.0), true)?,
                });
                fan_in = h;
            }
            let out = b.linear(&format!("head.{}.out", task.id), "heads", fan_in, 1)?;
            heads.push(Head { hidden, out });
        }
        let task_index = config.tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        Ok(NestModel {
            config,
            params,
            layout: Layout {
                input,
                layers,
                tables,
                proj,
                fusion,
                heads,
            },
            task_index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count(None)
    }

    /// Scalar counts per parameter group.
    pub fn param_counts_by_group(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for id in self.params.ids() {
            let p = self.params.get(id);
            *out.entry(p.group.clone()).or_insert(0) += p.value().len();
        }
        out
    }

    pub fn task_index(&self, task: &str) -> Result<usize, ModelError> {
        self.task_index
            .get(task)
            .copied()
            .ok_or_else(|| ModelError::UnknownTask(task.to_string()))
    }

    pub fn task(&self, index: usize) -> &TaskSpec {
        &self.config.tasks[index]
    }

    pub fn check_context(&self, c: ContextTuple) -> Result<(), ModelError> {
        let cfg = &self.config;
        for (level, id, capacity) in [
            ("program", c.program, cfg.l1_capacity),
            ("assay", c.assay, cfg.l2_capacity),
            ("round", c.round, cfg.l3_capacity),
        ] {
            if id >= capacity {
                return Err(ModelError::IdOutOfRange { level, id, capacity });
            }
        }
        Ok(())
    }

    /// The 2·hidden molecule representation (mean pool then max pool).
    pub fn encode_molecule(&self, m: &MolGraph) -> Result<Vec<f64>, ModelError> {
        let batch = GraphBatch::new(&[m])?;
        let mut tape = Tape::inference();
        let x = tape.constant(batch.atom_features().clone());
        let h = self.encode(&mut tape, &batch, x)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Projected context vector W_c [e_p ‖ e_a ‖ e_r] + b_c.
    pub fn embed_context(&self, c: ContextTuple) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::inference();
        let v = self.context_vectors(&mut tape, &[c])?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Applies the configured fusion to explicit vectors.
    pub fn fuse(&self, h_mol: &[f64], c_vec: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::inference();
        let h = tape.constant(Tensor::row(h_mol.to_vec()));
        let c = tape.constant(Tensor::row(c_vec.to_vec()));
        let out = self.fuse_vars(&mut tape, h, c)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Logit (classification) or value (regression) in evaluation mode.
    pub fn predict(&self, m: &MolGraph, c: ContextTuple, task: &str) -> Result<f64, ModelError> {
        let t = self.task_index(task)?;
        Ok(self.predict_batch(&[Sample { graph: m, context: c, task: t }])?[0])
    }

    /// Evaluation-mode outputs for many samples, processed in chunks.
    pub fn predict_batch(&self, samples: &[Sample]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let mut tape = Tape::inference();
            let y = self.forward(&mut tape, chunk, Mode::Eval)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    /// γ(c) and β(c) for one context; identity parts for variants without them.
    pub fn modulation(&self, c: ContextTuple) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let m = self.config.mol_dim();
        let mut tape = Tape::inference();
        let cv = self.context_vectors(&mut tape, &[c])?;
        let (gamma, beta) = match &self.layout.fusion {
            FusionParams::Film { gamma, beta } => {
                let g = match gamma {
                    Some(mlp) => {
                        let v = self.mlp2(&mut tape, mlp, cv)?;
                        tape.value(v).data().to_vec()
                    }
                    None => vec![1.0; m],
                };
                let b = match beta {
                    Some(mlp) => {
                        let v = self.mlp2(&mut tape, mlp, cv)?;
                        tape.value(v).data().to_vec()
                    }
                    None => vec![0.0; m],
                };
                (g, b)
            }
            _ => (vec![1.0; m], vec![0.0; m]),
        };
        Ok((gamma, beta))
    }

    /// Mean and standard deviation of γ(c), β(c) over their dimensions for
    /// each context, plus the ANOVA F of γ means across `families`.
    pub fn film_statistics(&self, contexts: &[ContextTuple], families: Option<&[usize]>) -> Result<FilmStatistics, ModelError> {
        let mut stats = Vec::with_capacity(contexts.len());
        for &c in contexts {
            let (g, b) = self.modulation(c)?;
            let (gamma_mean, gamma_std) = mean_std(&g);
            let (beta_mean, beta_std) = mean_std(&b);
            stats.push(FilmContextStats {
                context: c,
                gamma_mean,
                gamma_std,
                beta_mean,
                beta_std,
            });
        }
        let family_f = match families {
            Some(labels) if labels.len() == contexts.len() => {
                let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (s, &l) in stats.iter().zip(labels) {
                    groups.entry(l).or_default().push(s.gamma_mean);
                }
                let groups: Vec<Vec<f64>> = groups.into_values().collect();
                one_way_anova_f(&groups)
            }
            _ => None,
        };
        Ok(FilmStatistics { contexts: stats, family_f })
    }

    /// Copies arrays whose names exist in `other` (e.g. a pretrained backbone
    /// and heads into a model with a different fusion variant).
    pub fn load_matching_from(&mut self, other: &NestModel) -> Result<usize, ModelError> {
        Ok(self.params.load_matching(&other.params.named_values())?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: serde_json::json!({
                "kind": "nestmodel",
                "config": self.config,
                "param_count": self.param_count(),
            }),
            arrays: self.params.named_values(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<NestModel, ModelError> {
        let config: ModelConfig = serde_json::from_value(ck.manifest["config"].clone())
            .map_err(|e| ModelError::Config(format!("checkpoint manifest: {e}")))?;
        let mut model = NestModel::init(config, 0)?;
        model.params.load_named(&ck.arrays)?;
        Ok(model)
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<(), ModelError> {
        Ok(write_checkpoint(w, &self.to_checkpoint())?)
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<NestModel, ModelError> {
        NestModel::from_checkpoint(&read_checkpoint(r)?)
    }
}
