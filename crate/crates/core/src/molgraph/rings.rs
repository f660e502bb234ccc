use std::collections::VecDeque;

use super::BondSpec;

pub(crate) struct RingInfo {
    pub bond_in_ring: Vec<bool>,
    pub atom_in_ring: Vec<bool>,
    pub atom_ring_sizes: Vec<u8>,
}

impl RingInfo {
    /// A bond is in a ring iff its endpoints stay connected without it; the
    /// smallest ring through the bond is that shortest path plus the bond.
    pub fn compute(n: usize, bonds: &[BondSpec], adjacency: &[Vec<(usize, usize)>]) -> RingInfo {
        let mut bond_in_ring = vec![false; bonds.len()];
        let mut atom_in_ring = vec![false; n];
        let mut atom_ring_sizes = vec![0u8; n];
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for (bi, b) in bonds.iter().enumerate() {
            dist.iter_mut().for_each(|d| *d = usize::MAX);
            queue.clear();
            dist[b.begin] = 0;
            queue.push_back(b.begin);
            while let Some(v) = queue.pop_front() {
                if v == b.end {
                    break;
                }
                for &(u, e) in &adjacency[v] {
                    if e != bi && dist[u] == usize::MAX {
                        dist[u] = dist[v] + 1;
                        queue.push_back(u);
                    }
                }
            }
            if dist[b.end] != usize::MAX {
                let size = dist[b.end] + 1;
                bond_in_ring[bi] = true;
                atom_in_ring[b.begin] = true;
                atom_in_ring[b.end] = true;
                if (3..=8).contains(&size) {
                    let bit = 1u8 << (size - 3);
                    atom_ring_sizes[b.begin] |= bit;
                    atom_ring_sizes[b.end] |= bit;
                }
            }
        }
        RingInfo {
            bond_in_ring,
            atom_in_ring,
            atom_ring_sizes,
        }
    }
}
