use crate::molgraph::MolGraph;
use crate::tensor::Tensor;

use super::ModelError;

/// Disjoint union of several molecular graphs with directed edges in both
/// directions for every bond.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    atoms: Tensor,
    edges: Option<Tensor>,
    src: Vec<usize>,
    dst: Vec<usize>,
    node_graph: Vec<usize>,
    inv_counts: Tensor,
    graphs: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolGraph]) -> Result<GraphBatch, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::Config("empty graph batch".into()));
        }
        let af = graphs[0].atom_features().len() / graphs[0].num_atoms().max(1);
        let mut atoms = Vec::new();
        let mut edges = Vec::new();
        let (mut src, mut dst, mut node_graph) = (Vec::new(), Vec::new(), Vec::new());
        let mut inv = Vec::with_capacity(graphs.len());
        let mut bf = 0;
        let mut offset = 0;
        for (g, m) in graphs.iter().enumerate() {
            let n = m.num_atoms();
            if n == 0 {
                return Err(ModelError::EmptyMolecule);
            }
            atoms.extend_from_slice(m.atom_features());
            node_graph.extend(std::iter::repeat(g).take(n));
            inv.push(1.0 / n as f64);
            for (i, bond) in m.bonds().iter().enumerate() {
                let row = m.bond_feature_row(i);
                bf = row.len();
                for (a, b) in [(bond.begin, bond.end), (bond.end, bond.begin)] {
                    src.push(offset + a);
                    dst.push(offset + b);
                    edges.extend_from_slice(row);
                }
            }
            offset += n;
        }
        let edges = if src.is_empty() {
            None
        } else {
            Some(Tensor::matrix(src.len(), bf, edges)?)
        };
        Ok(GraphBatch {
            atoms: Tensor::matrix(offset, af, atoms)?,
            edges,
            src,
            dst,
            node_graph,
            inv_counts: Tensor::matrix(graphs.len(), 1, inv)?,
            graphs: graphs.len(),
        })
    }

    pub fn atom_features(&self) -> &Tensor {
        &self.atoms
    }

    pub fn edge_features(&self) -> Option<&Tensor> {
        self.edges.as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.graphs
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    pub fn node_graph(&self) -> &[usize] {
        &self.node_graph
    }

    pub(crate) fn inv_counts(&self) -> &Tensor {
        &self.inv_counts
    }
}
