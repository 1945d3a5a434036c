//! Constructions of run collections: a generic one driven by a set of
//! centers with disjoint Markov boundaries, one specialized to directed
//! paths, and a trivial singleton cover for single-source problems.

use thiserror::Error;

use crate::dag::{Dag, DagError, VertexId, VertexSet};
use crate::model::Assignment;
use crate::runs::{build_spanning_tree, Run, RunCollection, RunError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BuildError {
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("built an ill-formed run {encoding}")]
    IllFormedRun { encoding: String },
    #[error("graph is not a directed path")]
    NotAPath,
    #[error("path on {n} vertices is too short for {n_mp} independent vertices (needs {needed})")]
    PathTooShort { n: usize, n_mp: usize, needed: usize },
    #[error("the path construction needs at least 2 independent vertices per run, got {0}")]
    PathNeedsTwo(usize),
}

/// Independent vertices each oracle call needs for `k` sources: `3k - 3`,
/// but never fewer than 2.
pub fn default_n_mp(k: usize) -> usize {
    (3 * k).saturating_sub(3).max(2)
}

fn checked(g: &Dag, independent: VertexSet, template: &Assignment) -> Result<Run, BuildError> {
    ensure_well_formed(Run::new(g, independent, template)?)
}

fn ensure_well_formed(run: Run) -> Result<Run, BuildError> {
    if !run.is_well_formed() {
        return Err(BuildError::IllFormedRun { encoding: run.encode() });
    }
    Ok(run)
}

/// Sets the bits of `mask` (little-endian over `set`) on top of `base`.
fn with_mask(base: &Assignment, set: &VertexSet, mask: usize) -> Assignment {
    let mut a = base.clone();
    for (i, v) in set.iter().enumerate() {
        a.set(v, ((mask >> i) & 1) as u8);
    }
    a
}

/// Generic construction around `n_mp` centers of depth at most `3 n_mp`.
///
/// Centers are never bottoms, so every run conditions them on their whole
/// boundary and any two runs agreeing on a center's boundary align there.
///
/// 1. The default central run on the centers with every conditioning
///    vertex at 0.
/// 2. For each center, one run per nonzero assignment of its boundary,
///    everything else at the default.
/// 3. For each other vertex `Y`, runs on the centers plus `Y` (dropping the
///    center whose boundary holds `Y`, if any), one per assignment of
///    `Pa(Y)`, everything else at 0. `Y` is the only bottom candidate, so it
///    is conditioned on its parents unless that would be unsound.
///
/// The alignment tree is rooted at the default central run.
pub fn build_generic(g: &Dag, n_mp: usize) -> Result<RunCollection, BuildError> {
    let centers = g.find_centers(n_mp, 3 * n_mp)?;
    let zeros = Assignment::from_bits(&vec![0; g.n()]);
    let none = VertexSet::new();
    let central = |template: &Assignment| {
        Run::with_bottom_candidates(g, centers.clone(), &none, template)
            .map_err(BuildError::from)
            .and_then(ensure_well_formed)
    };
    let mut runs = vec![central(&zeros)?];

    for x in &centers {
        let swept = g.mb(x);
        for mask in 1..(1usize << swept.len()) {
            runs.push(central(&with_mask(&zeros, swept, mask))?);
        }
    }

    for y in g.vertices().filter(|&y| !centers.contains(y)) {
        let mut independent = centers.clone();
        if let Some(x) = centers.iter().find(|&x| g.mb(x).contains(y)) {
            independent.remove(x);
        }
        independent.insert(y);
        let parents = g.pa(y);
        let candidate = VertexSet::singleton(y);
        for mask in 0..(1usize << parents.len()) {
            let template = with_mask(&zeros, parents, mask);
            runs.push(ensure_well_formed(Run::with_bottom_candidates(g, independent.clone(), &candidate, &template)?)?);
        }
    }

    Ok(build_spanning_tree(g, runs, 0)?)
}

/// Upper bound on the size of [`build_generic`]'s output:
/// `1 + n_mp 2^γ + n 2^{Δ_in}`.
pub fn generic_size_bound(g: &Dag, n_mp: usize) -> usize {
    1 + n_mp * (1usize << g.gamma()) + g.n() * (1usize << g.max_in_degree())
}

/// Construction for a directed path `V1 -> ... -> Vn` with `n >= 2 n_mp`.
///
/// Vertices are named by their position along the path. The runs are, in
/// order: EVEN, ODD, LINK; EVEN with the conditioned `V_i` flipped to 1 for
/// odd `i < 2 n_mp`; ODD with `V_i` flipped for even `i <= 2 n_mp` (the
/// last of these conditions nothing new and repeats ODD); then
/// `TAIL^0[V_i]`, `TAIL^1[V_i]` for `i > 2 n_mp`. The tree is rooted at
/// EVEN.
pub fn build_path(g: &Dag, n_mp: usize) -> Result<RunCollection, BuildError> {
    let order = g.path_order().ok_or(BuildError::NotAPath)?;
    let n = g.n();
    if n_mp < 2 {
        return Err(BuildError::PathNeedsTwo(n_mp));
    }
    if n < 2 * n_mp {
        return Err(BuildError::PathTooShort { n, n_mp, needed: 2 * n_mp });
    }
    // 1-based position to vertex.
    let p = |i: usize| order[i - 1];
    let set = |idx: &mut dyn Iterator<Item = usize>| -> VertexSet { idx.map(p).collect() };
    let zeros_on = |s: &VertexSet| Assignment::constant(n, s, 0);

    let odd_i = set(&mut (1..2 * n_mp).step_by(2));
    let even_i = set(&mut (2..=2 * n_mp).step_by(2));
    let odd_c = set(&mut (2..2 * n_mp - 1).step_by(2));
    let even_c = odd_i.clone();
    let mut link_i = even_i.clone();
    link_i.remove(p(2));
    link_i.insert(p(1));
    let mut link_c = odd_i.clone();
    link_c.remove(p(1));
    link_c.insert(p(2));

    let even_t = zeros_on(&even_c);
    let odd_t = zeros_on(&odd_c);
    let mut runs = vec![
        checked(g, even_i.clone(), &even_t)?,
        checked(g, odd_i.clone(), &odd_t)?,
        checked(g, link_i, &zeros_on(&link_c))?,
    ];
    for i in (1..2 * n_mp).step_by(2) {
        runs.push(checked(g, even_i.clone(), &even_t.clone().with(p(i), 1))?);
    }
    for i in (2..=2 * n_mp).step_by(2) {
        runs.push(checked(g, odd_i.clone(), &odd_t.clone().with(p(i), 1))?);
    }
    let tail_base = set(&mut (1..2 * n_mp - 2).step_by(2));
    for i in 2 * n_mp + 1..=n {
        let mut independent = tail_base.clone();
        independent.insert(p(i));
        for b in 0..=1u8 {
            runs.push(checked(g, independent.clone(), &odd_t.clone().with(p(i - 1), b))?);
        }
    }
    Ok(build_spanning_tree(g, runs, 0)?)
}

/// Number of runs [`build_path`] emits.
pub fn path_size(n: usize, n_mp: usize) -> usize {
    3 + 2 * n_mp + 2 * (n - 2 * n_mp)
}

/// One singleton run per vertex and parent assignment, with no alignment
/// tree. Every vertex is a bottom of its own run, so this covers any graph,
/// but it only identifies single-source models.
pub fn build_singletons(g: &Dag) -> Result<RunCollection, BuildError> {
    let zeros = Assignment::from_bits(&vec![0; g.n()]);
    let mut runs = Vec::new();
    for v in g.vertices() {
        let parents = g.pa(v);
        for mask in 0..(1usize << parents.len()) {
            runs.push(checked(g, VertexSet::singleton(v), &with_mask(&zeros, parents, mask))?);
        }
    }
    Ok(RunCollection::unaligned(runs))
}

/// Vertices of `g` sorted by position along the path; helper for callers
/// that name path vertices by position.
pub fn path_vertex(g: &Dag, position: usize) -> Option<VertexId> {
    g.path_order().and_then(|o| o.get(position.checked_sub(1)?).copied())
}
