//! Dependency graph from the sparse component and signed `z` from the
//! low-rank component.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries of `|z|` at or below this are treated as zero when assigning signs.
pub const Z_FLOOR: f64 = 1e-8;

/// How the edge threshold `T` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    Absolute(f64),
    /// Fraction of the largest off-diagonal `|Ŝ_ij|`.
    Relative(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Relative(0.25)
    }
}

impl ThresholdRule {
    /// Resolves the rule to an absolute threshold. `floor` guards against
    /// declaring edges on entries that are zero up to solver tolerance.
    pub fn resolve(&self, s_hat: &DMatrix<f64>, floor: f64) -> f64 {
        match *self {
            ThresholdRule::Absolute(t) => t,
            ThresholdRule::Relative(frac) => {
                let n = s_hat.nrows();
                let mut max_off = 0.0f64;
                for i in 0..n {
                    for j in (i + 1)..n {
                        max_off = max_off.max(s_hat[(i, j)].abs());
                    }
                }
                (frac * max_off).max(floor)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyStructure {
    pub num_sources: usize,
    /// Dependent pairs `(i, j)` with `i < j`.
    pub edges: BTreeSet<(usize, usize)>,
    /// Pairs assumed conditionally independent given the label.
    pub mask: BTreeSet<(usize, usize)>,
    pub threshold: f64,
}

impl DependencyStructure {
    /// Structure built from an explicit edge list; the mask is its complement.
    pub fn from_edges(num_sources: usize, edges: impl IntoIterator<Item = (usize, usize)>, threshold: f64) -> Self {
        let edges: BTreeSet<_> = edges.into_iter().map(|(i, j)| (i.min(j), i.max(j))).filter(|(i, j)| i != j).collect();
        let mask = all_pairs(num_sources).filter(|p| !edges.contains(p)).collect();
        Self { num_sources, edges, mask, threshold }
    }

    /// No dependencies at all.
    pub fn independent(num_sources: usize) -> Self {
        Self::from_edges(num_sources, std::iter::empty(), 0.0)
    }

    /// Connected-component id of every source in the dependency graph,
    /// numbered in order of first appearance.
    pub fn component_ids(&self) -> Vec<usize> {
        let adjacency = adjacency(self.num_sources, self.edges.iter().copied());
        label_components(self.num_sources, &adjacency, |_| true)
    }
}

fn all_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| ((i + 1)..m).map(move |j| (i, j)))
}

fn adjacency(m: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m];
    for (i, j) in pairs {
        adj[i].push(j);
        adj[j].push(i);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

fn label_components(m: usize, adj: &[Vec<usize>], include: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut ids = vec![usize::MAX; m];
    let mut next = 0;
    for start in 0..m {
        if ids[start] != usize::MAX || !include(start) {
            continue;
        }
        ids[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if ids[v] == usize::MAX && include(v) {
                    ids[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    ids
}

/// Edges are the pairs with `|Ŝ_ij| > t`; the mask is the complement.
pub fn edges_from_sparse(s_hat: &DMatrix<f64>, t: f64) -> DependencyStructure {
    let m = s_hat.nrows();
    let edges: Vec<_> = all_pairs(m).filter(|&(i, j)| s_hat[(i, j)].abs() > t).collect();
    DependencyStructure::from_edges(m, edges, t)
}

/// `sqrt(diag(L̂))`, clipping small negative diagonal entries to zero.
pub fn recover_abs_z(l_hat: &DMatrix<f64>) -> DVector<f64> {
    l_hat.diagonal().map(|d| d.max(0.0).sqrt())
}

/// Assigns signs to `abs_z` from the masked entries of `Σ̂_O⁻¹`, where
/// `(Σ_O⁻¹)_ij = −z_i z_j` off the dependency graph.
///
/// Fails with [`Error::SignAmbiguity`] when the active sources do not form a
/// single connected consistency graph; [`break_symmetry_by_component`] is the
/// fallback.
pub fn break_symmetry(
    abs_z: &DVector<f64>,
    k_inv: &DMatrix<f64>,
    structure: &DependencyStructure,
) -> Result<DVector<f64>> {
    let (z, components) = propagate_signs(abs_z, k_inv, structure);
    if components.len() > 1 {
        return Err(Error::SignAmbiguity { components });
    }
    Ok(z)
}

/// Sign assignment that fixes the orientation of each connected component
/// independently with the better-than-random rule.
pub fn break_symmetry_by_component(
    abs_z: &DVector<f64>,
    k_inv: &DMatrix<f64>,
    structure: &DependencyStructure,
) -> DVector<f64> {
    propagate_signs(abs_z, k_inv, structure).0
}

fn propagate_signs(
    abs_z: &DVector<f64>,
    k_inv: &DMatrix<f64>,
    structure: &DependencyStructure,
) -> (DVector<f64>, Vec<Vec<usize>>) {
    let m = abs_z.len();
    let active = |i: usize| abs_z[i] > Z_FLOOR;
    let pairs = structure.mask.iter().copied().filter(|&(i, j)| active(i) && active(j) && k_inv[(i, j)] != 0.0);
    let adj = adjacency(m, pairs);

    // Components, each traversed breadth-first from its largest |z| entry.
    let ids = label_components(m, &adj, active);
    let num_components = ids.iter().filter(|&&c| c != usize::MAX).max().map_or(0, |c| c + 1);
    let mut components = vec![Vec::new(); num_components];
    for (i, &c) in ids.iter().enumerate() {
        if c != usize::MAX {
            components[c].push(i);
        }
    }

    let mut sign = vec![1.0f64; m];
    for members in &components {
        let seed = members.iter().copied().fold(members[0], |best, i| if abs_z[i] > abs_z[best] { i } else { best });
        let mut visited = vec![false; m];
        visited[seed] = true;
        let mut queue = VecDeque::from([seed]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    sign[v] = if k_inv[(u, v)] < 0.0 { sign[u] } else { -sign[u] };
                    queue.push_back(v);
                }
            }
        }
        // Better-than-random: most sources agree with the label.
        let positives = members.iter().filter(|&&i| sign[i] > 0.0).count();
        let negatives = members.len() - positives;
        let weighted: f64 = members.iter().map(|&i| sign[i] * abs_z[i]).sum();
        if negatives > positives || (negatives == positives && weighted < 0.0) {
            for &i in members {
                sign[i] = -sign[i];
            }
        }
    }

    let z = DVector::from_fn(m, |i, _| sign[i] * abs_z[i]);
    (z, components)
}
