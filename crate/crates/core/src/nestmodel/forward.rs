use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::molgraph::MolGraph;
use crate::tensor::{Tape, Tensor, Var};

use super::{ContextTuple, FusionParams, GraphBatch, Head, Linear, Mlp2, ModelError, NestModel};

/// One molecule with the context and task it is scored under.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub graph: &'a MolGraph,
    pub context: ContextTuple,
    pub task: usize,
}

/// Dropout is applied only in training mode, drawing masks from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl NestModel {
    pub(crate) fn linear(&self, tape: &mut Tape, l: &Linear, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(self.params(), l.w);
        let y = tape.matmul(x, w)?;
        let b = tape.param(self.params(), l.b);
        Ok(tape.add(y, b)?)
    }

    pub(crate) fn mlp2(&self, tape: &mut Tape, mlp: &Mlp2, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(tape, &mlp.l1, x)?;
        let h = tape.relu(h)?;
        self.linear(tape, &mlp.l2, h)
    }

    /// Message passing over a batch; `x` holds the atom feature rows so that
    /// callers can differentiate with respect to them.
    pub fn encode(&self, tape: &mut Tape, batch: &GraphBatch, x: Var) -> Result<Var, ModelError> {
        let d = self.config().hidden;
        let n = batch.num_nodes();
        let h0 = self.linear(tape, &self.layout.input, x)?;
        let mut h = tape.relu(h0)?;
        let edges = batch.edge_features().map(|e| tape.constant(e.clone()));
        for layer in &self.layout.layers {
            // m_v = sum_u (W_h h_u + W_e e_uv + b)
            let m = match edges {
                Some(e) => {
                    let wh = tape.param(self.params(), layer.msg_h);
                    let hu = tape.matmul(h, wh)?;
                    let hu = tape.gather_rows(hu, batch.src())?;
                    let me = self.linear(tape, &layer.msg_e, e)?;
                    let msg = tape.add(hu, me)?;
                    tape.scatter_add_rows(msg, batch.dst(), n)?
                }
                None => tape.constant(Tensor::zeros(n, d)),
            };
            let gi = self.linear(tape, &layer.gate_in, m)?;
            let uzr = tape.param(self.params(), layer.gate_zr);
            let gh = tape.matmul(h, uzr)?;
            let zi = tape.slice(gi, 1, 0, d)?;
            let zh = tape.slice(gh, 1, 0, d)?;
            let z = tape.add(zi, zh)?;
            let z = tape.sigmoid(z)?;
            let ri = tape.slice(gi, 1, d, d)?;
            let rh = tape.slice(gh, 1, d, d)?;
            let r = tape.add(ri, rh)?;
            let r = tape.sigmoid(r)?;
            let ni = tape.slice(gi, 1, 2 * d, d)?;
            let rhp = tape.mul(r, h)?;
            let un = tape.param(self.params(), layer.gate_n);
            let nh = tape.matmul(rhp, un)?;
            let cand = tape.add(ni, nh)?;
            let cand = tape.tanh(cand)?;
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = tape.sub(h, cand)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(cand, zd)?;
        }
        let sum = tape.scatter_add_rows(h, batch.node_graph(), batch.num_graphs())?;
        let inv = tape.constant(batch.inv_counts().clone());
        let mean = tape.mul(sum, inv)?;
        let max = tape.segment_max(h, batch.node_graph(), batch.num_graphs())?;
        Ok(tape.concat(&[mean, max], 1)?)
    }

    /// Projected context vectors, one row per context.
    pub fn context_vectors(&self, tape: &mut Tape, contexts: &[ContextTuple]) -> Result<Var, ModelError> {
        for &c in contexts {
            self.check_context(c)?;
        }
        let [t1, t2, t3] = self.layout.tables;
        let mut parts = Vec::with_capacity(3);
        for (table, ids) in [
            (t1, contexts.iter().map(|c| c.program).collect::<Vec<_>>()),
            (t2, contexts.iter().map(|c| c.assay).collect()),
            (t3, contexts.iter().map(|c| c.round).collect()),
        ] {
            let t = tape.param(self.params(), table);
            parts.push(tape.gather_rows(t, &ids)?);
        }
        let e = tape.concat(&parts, 1)?;
        self.linear(tape, &self.layout.proj, e)
    }

    pub fn fuse_vars(&self, tape: &mut Tape, h: Var, c: Var) -> Result<Var, ModelError> {
        match &self.layout.fusion {
            FusionParams::None => Ok(h),
            FusionParams::Concat(lin) => {
                let hc = tape.concat(&[h, c], 1)?;
                self.linear(tape, lin, hc)
            }
            FusionParams::Film { gamma, beta } => {
                let mut out = h;
                if let Some(g) = gamma {
                    let g = self.mlp2(tape, g, c)?;
                    out = tape.mul(g, out)?;
                }
                if let Some(b) = beta {
                    let b = self.mlp2(tape, b, c)?;
                    out = tape.add(out, b)?;
                }
                Ok(out)
            }
            FusionParams::Hyper { u, v, bias } => {
                // h + (h U(c)) V(c)^T + b(c) with rank-r factors generated per sample
                let m = self.config().mol_dim();
                let uc = self.linear(tape, u, c)?;
                let vc = self.linear(tape, v, c)?;
                let mut out = h;
                for k in 0..self.config().hyper_rank {
                    let uk = tape.slice(uc, 1, k * m, m)?;
                    let hu = tape.mul(h, uk)?;
                    let s = tape.sum(hu, Some(1))?;
                    let vk = tape.slice(vc, 1, k * m, m)?;
                    let term = tape.mul(s, vk)?;
                    out = tape.add(out, term)?;
                }
                let b = self.linear(tape, bias, c)?;
                Ok(tape.add(out, b)?)
            }
        }
    }

    fn head(&self, tape: &mut Tape, head: &Head, x: Var, mode: &mut Mode) -> Result<Var, ModelError> {
        let cfg = self.config();
        let mut h = x;
        for layer in &head.hidden {
            h = self.linear(tape, &layer.lin, h)?;
            if cfg.head_norm {
                let mu = tape.mean(h, Some(1))?;
                let centered = tape.sub(h, mu)?;
                let sq = tape.pow(centered, 2.0)?;
                let var = tape.mean(sq, Some(1))?;
                let var = tape.add_scalar(var, 1e-5)?;
                let inv = tape.pow(var, -0.5)?;
                let norm = tape.mul(centered, inv)?;
                let scale = tape.param(self.params(), layer.scale);
                let norm = tape.mul(norm, scale)?;
                let shift = tape.param(self.params(), layer.shift);
                h = tape.add(norm, shift)?;
            }
            h = tape.relu(h)?;
            if let Mode::Train(rng) = mode {
                if cfg.dropout > 0.0 {
                    let shape = tape.shape(h).to_vec();
                    let keep = 1.0 - cfg.dropout;
                    let mask: Vec<f64> = (0..shape[0] * shape[1])
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mask = tape.constant(Tensor::matrix(shape[0], shape[1], mask)?);
                    h = tape.mul(h, mask)?;
                }
            }
        }
        self.linear(tape, &head.out, h)
    }

    /// Routes each row of `h_mod` through its task head; returns a column.
    pub fn heads(&self, tape: &mut Tape, h_mod: Var, tasks: &[usize], mut mode: Mode) -> Result<Var, ModelError> {
        let b = tasks.len();
        for &t in tasks {
            if t >= self.layout.heads.len() {
                return Err(ModelError::UnknownTask(format!("#{t}")));
            }
        }
        if tasks.iter().all(|&t| t == tasks[0]) {
            return self.head(tape, &self.layout.heads[tasks[0]], h_mod, &mut mode);
        }
        let mut out: Option<Var> = None;
        for (t, head) in self.layout.heads.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&i| tasks[i] == t).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(h_mod, &rows)?;
            let y = self.head(tape, head, sub, &mut mode)?;
            let y = tape.scatter_add_rows(y, &rows, b)?;
            out = Some(match out {
                Some(o) => tape.add(o, y)?,
                None => y,
            });
        }
        Ok(out.expect("non-empty batch"))
    }

    /// Full model on explicit atom-feature rows.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        x: Var,
        contexts: &[ContextTuple],
        tasks: &[usize],
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let h = self.encode(tape, batch, x)?;
        let c = self.context_vectors(tape, contexts)?;
        let fused = self.fuse_vars(tape, h, c)?;
        self.heads(tape, fused, tasks, mode)
    }

    /// Outputs for a batch of samples as a column (batch x 1).
    pub fn forward(&self, tape: &mut Tape, samples: &[Sample], mode: Mode) -> Result<Var, ModelError> {
        let graphs: Vec<&MolGraph> = samples.iter().map(|s| s.graph).collect();
        let batch = GraphBatch::new(&graphs)?;
        let contexts: Vec<ContextTuple> = samples.iter().map(|s| s.context).collect();
        let tasks: Vec<usize> = samples.iter().map(|s| s.task).collect();
        let x = tape.constant(batch.atom_features().clone());
        self.forward_features(tape, &batch, x, &contexts, &tasks, mode)
    }
}
