//! Runs: an independent set plus an assignment to its conditioning set.
//!
//! Conditioning a mixture on the boundary of every non-bottom member of
//! `I` (and on the parents of the bottom members) makes the members of `I`
//! independent within each source, so the conditioned distribution is a
//! mixture of product distributions over `I`.
//!
//! # Bottom refinement
//!
//! A bottom `B` is only conditioned on its parents, and the oracle's output
//! for it equals `P_u(B | pa(B))` only if none of `B`'s descendants are
//! conditioned on or sit in `I`. Bottoms start from a candidate set (by
//! default the deepest members of `I`); candidates violating that are
//! demoted to ordinary members (their whole boundary is conditioned on)
//! until a fixpoint is reached. Childless members are always bottoms: their
//! boundary is their parent set, so both readings coincide.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::dag::{Dag, DagError, VertexId, VertexSet};
use crate::model::Assignment;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("a run needs at least one independent vertex")]
    EmptyIndependentSet,
    #[error("bad run encoding {encoding:?}: {reason}")]
    BadEncoding { encoding: String, reason: String },
    #[error("runs {unreached:?} cannot be aligned to the root run")]
    NotAlignable { unreached: Vec<usize> },
    #[error("run index {index} out of range for {len} runs")]
    BadRunIndex { index: usize, len: usize },
}

/// `⋃ Mb(I) over non-bottom members ∪ ⋃ Pa(B) over bottom members`, with
/// bottoms taken as the deepest members of `i`. Overlap with `i` is kept, it
/// marks the run as ill-formed.
pub fn conditioning_set(g: &Dag, i: &VertexSet) -> Result<VertexSet, DagError> {
    let bottoms = g.bottom_vertices(i)?;
    Ok(conditioning_for(g, i, &bottoms))
}

fn conditioning_for(g: &Dag, i: &VertexSet, bottoms: &VertexSet) -> VertexSet {
    let mut c = VertexSet::new();
    for v in i {
        let part = if bottoms.contains(v) { g.pa(v) } else { g.mb(v) };
        c = c.union(part);
    }
    c
}

/// Deepest members of `i` minus those demoted by the refinement described
/// in the module docs.
pub fn effective_bottoms(g: &Dag, i: &VertexSet) -> Result<VertexSet, DagError> {
    let deepest = g.bottom_vertices(i)?;
    Ok(demote(g, i, &deepest))
}

/// Fixpoint of the demotion rule starting from `candidates ∩ i` plus the
/// childless members of `i`.
pub fn demote(g: &Dag, i: &VertexSet, candidates: &VertexSet) -> VertexSet {
    let mut bottoms: VertexSet = i.iter().filter(|&v| candidates.contains(v) || g.ch(v).is_empty()).collect();
    loop {
        let c = conditioning_for(g, i, &bottoms);
        let watched = c.union(i);
        let demote: Vec<VertexId> = bottoms
            .iter()
            .filter(|&b| !g.descendants(&VertexSet::singleton(b)).expect("valid").is_disjoint(&watched))
            .collect();
        if demote.is_empty() {
            return bottoms;
        }
        for b in demote {
            bottoms.remove(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Run {
    independent: VertexSet,
    bottom: VertexSet,
    conditioning: VertexSet,
    assignment: Assignment,
}

impl Run {
    /// Run on `independent` whose conditioning values are read from
    /// `template`. Template entries outside the conditioning set are
    /// ignored; missing entries leave the run ill-formed.
    pub fn new(g: &Dag, independent: VertexSet, template: &Assignment) -> Result<Run, RunError> {
        g.check_set(&independent)?;
        let deepest = g.bottom_vertices(&independent)?;
        Run::with_bottom_candidates(g, independent, &deepest, template)
    }

    /// Like [`Run::new`], with bottoms drawn from `candidates` instead of
    /// the deepest members.
    pub fn with_bottom_candidates(
        g: &Dag,
        independent: VertexSet,
        candidates: &VertexSet,
        template: &Assignment,
    ) -> Result<Run, RunError> {
        if independent.is_empty() {
            return Err(RunError::EmptyIndependentSet);
        }
        g.check_set(&independent)?;
        let bottom = demote(g, &independent, candidates);
        let conditioning = conditioning_for(g, &independent, &bottom);
        let mut assignment = Assignment::empty(g.n());
        for v in conditioning.difference(&independent).iter() {
            if let Some(b) = template.get(v) {
                assignment.set(v, b);
            }
        }
        Ok(Run { independent, bottom, conditioning, assignment })
    }

    /// Parses the one-character-per-vertex encoding: `*` independent,
    /// `0`/`1` conditioned, `-` untouched. Members none of whose children
    /// are conditioned or independent are read as bottoms.
    pub fn parse(g: &Dag, encoding: &str) -> Result<Run, RunError> {
        let bad = |reason: String| RunError::BadEncoding { encoding: encoding.to_string(), reason };
        let chars: Vec<char> = encoding.trim().chars().collect();
        if chars.len() != g.n() {
            return Err(bad(format!("{} characters for {} vertices", chars.len(), g.n())));
        }
        let mut independent = VertexSet::new();
        let mut template = Assignment::empty(g.n());
        for (i, ch) in chars.iter().enumerate() {
            match ch {
                '*' => {
                    independent.insert(VertexId(i));
                }
                '0' => template.set(VertexId(i), 0),
                '1' => template.set(VertexId(i), 1),
                '-' => {}
                other => return Err(bad(format!("unexpected character {other:?}"))),
            }
        }
        // A bottom never has a conditioned or independent child.
        let watched = template.assigned().union(&independent);
        let candidates: VertexSet = independent.iter().filter(|&x| g.ch(x).is_disjoint(&watched)).collect();
        let run = Run::with_bottom_candidates(g, independent, &candidates, &template)?;
        if let Some(v) = template.assigned().iter().find(|v| !run.conditioning.contains(*v)) {
            return Err(bad(format!("{v} is assigned but not in the conditioning set")));
        }
        Ok(run)
    }

    pub fn encode(&self) -> String {
        (0..self.assignment.n())
            .map(|i| {
                let v = VertexId(i);
                if self.independent.contains(v) {
                    '*'
                } else {
                    match self.assignment.get(v) {
                        Some(0) => '0',
                        Some(_) => '1',
                        None => '-',
                    }
                }
            })
            .collect()
    }

    pub fn independent(&self) -> &VertexSet {
        &self.independent
    }

    pub fn bottom(&self) -> &VertexSet {
        &self.bottom
    }

    pub fn conditioning(&self) -> &VertexSet {
        &self.conditioning
    }

    /// The conditioning event `mcond` of the run.
    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn is_bottom(&self, v: VertexId) -> bool {
        self.bottom.contains(v)
    }

    /// Independent and conditioning sets are disjoint and every
    /// conditioning vertex is assigned.
    pub fn is_well_formed(&self) -> bool {
        self.independent.is_disjoint(&self.conditioning)
            && self.conditioning.iter().all(|v| self.assignment.get(v).is_some())
    }

    pub fn is_n_independent(&self, n_mp: usize) -> bool {
        self.independent.len() >= n_mp
    }

    /// What the oracle output for `x` is conditioned on: `Pa(x)` for a
    /// bottom member, `Mb(x)` otherwise.
    pub fn effective_conditioning<'g>(&self, g: &'g Dag, x: VertexId) -> &'g VertexSet {
        if self.is_bottom(x) {
            g.pa(x)
        } else {
            g.mb(x)
        }
    }

    /// Mask of the run's values on `Pa(v)`.
    pub fn parent_mask(&self, g: &Dag, v: VertexId) -> Option<usize> {
        self.assignment.mask(g.pa(v))
    }

    /// Row of `v` in oracle outputs for this run.
    pub fn row_of(&self, v: VertexId) -> Option<usize> {
        self.independent.position(v)
    }
}

impl fmt::Display for Run {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// Members `x` of both independent sets with the same role in both runs and
/// identical values on the conditioning that role sees.
pub fn alignment_variables(g: &Dag, a: &Run, b: &Run) -> VertexSet {
    a.independent
        .iter()
        .filter(|&x| {
            b.independent.contains(x)
                && a.is_bottom(x) == b.is_bottom(x)
                && a.assignment.agrees_on(&b.assignment, a.effective_conditioning(g, x))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEdge {
    pub parent: usize,
    pub child: usize,
    /// Every structural alignment variable of the pair.
    pub candidates: VertexSet,
    /// Smallest candidate; alignment falls back to the others if needed.
    pub variable: VertexId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunCollection {
    runs: Vec<Run>,
    /// Edges in BFS discovery order, so parents precede children.
    tree: Vec<TreeEdge>,
    root: usize,
}

impl RunCollection {
    /// Collection without an alignment tree. Only meaningful for a single
    /// source or a single run, where no alignment is needed.
    pub fn unaligned(runs: Vec<Run>) -> RunCollection {
        RunCollection { runs, tree: Vec::new(), root: 0 }
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn tree(&self) -> &[TreeEdge] {
        &self.tree
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// The tree reaches every run.
    pub fn is_spanning(&self) -> bool {
        let mut seen = vec![false; self.runs.len()];
        if let Some(r) = seen.get_mut(self.root) {
            *r = true;
        }
        for e in &self.tree {
            if !seen[e.parent] || std::mem::replace(&mut seen[e.child], true) {
                return false;
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Text dump: one encoding per line, a blank line, then one
    /// `parent child variable` line per tree edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            out.push_str(&r.encode());
            out.push('\n');
        }
        out.push('\n');
        for e in &self.tree {
            out.push_str(&format!("{} {} {}\n", e.parent, e.child, e.variable.0));
        }
        out
    }
}

/// BFS over the alignability graph from `root`. Neighbors are visited in
/// index order and each edge records all candidates.
pub fn build_spanning_tree(g: &Dag, runs: Vec<Run>, root: usize) -> Result<RunCollection, RunError> {
    if root >= runs.len() {
        return Err(RunError::BadRunIndex { index: root, len: runs.len() });
    }
    // Runs containing each vertex, to avoid comparing every pair.
    let mut by_vertex: Vec<Vec<usize>> = vec![Vec::new(); g.n()];
    for (i, r) in runs.iter().enumerate() {
        for v in r.independent() {
            by_vertex[v.0].push(i);
        }
    }
    let mut seen = vec![false; runs.len()];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    let mut tree = Vec::with_capacity(runs.len().saturating_sub(1));
    while let Some(p) = queue.pop_front() {
        let mut near: Vec<usize> =
            runs[p].independent().iter().flat_map(|v| by_vertex[v.0].iter().copied()).filter(|&c| !seen[c]).collect();
        near.sort_unstable();
        near.dedup();
        for c in near {
            let candidates = alignment_variables(g, &runs[p], &runs[c]);
            if let Some(variable) = candidates.first() {
                seen[c] = true;
                queue.push_back(c);
                tree.push(TreeEdge { parent: p, child: c, candidates, variable });
            }
        }
    }
    let unreached: Vec<usize> = (0..runs.len()).filter(|&i| !seen[i]).collect();
    if !unreached.is_empty() {
        return Err(RunError::NotAlignable { unreached });
    }
    Ok(RunCollection { runs, tree, root })
}

/// One appearance of a vertex in a run's independent set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occurrence {
    pub run: usize,
    pub bottom: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Bottom,
    NonBottom,
}

/// For every vertex and parent mask, the runs where the vertex is
/// independent with that parent assignment, in collection order.
#[derive(Debug, Clone)]
pub struct CoveragePlan {
    occurrences: Vec<Vec<Vec<Occurrence>>>,
}

impl CoveragePlan {
    pub fn new(g: &Dag, coll: &RunCollection) -> CoveragePlan {
        let mut occurrences: Vec<Vec<Vec<Occurrence>>> =
            g.vertices().map(|v| vec![Vec::new(); 1 << g.pa(v).len()]).collect();
        for (idx, r) in coll.runs().iter().enumerate() {
            if !r.is_well_formed() {
                continue;
            }
            for v in r.independent() {
                let mask = r.parent_mask(g, v).expect("parents are conditioned in a well-formed run");
                occurrences[v.0][mask].push(Occurrence { run: idx, bottom: r.is_bottom(v) });
            }
        }
        CoveragePlan { occurrences }
    }

    pub fn occurrences(&self, v: VertexId, mask: usize) -> &[Occurrence] {
        &self.occurrences[v.0][mask]
    }

    pub fn masks(&self, v: VertexId) -> usize {
        self.occurrences[v.0].len()
    }

    /// Occurrence that supplies the parameter: the first bottom occurrence
    /// if there is one, else the first occurrence.
    pub fn provider(&self, v: VertexId, mask: usize) -> Option<Occurrence> {
        let occ = &self.occurrences[v.0][mask];
        occ.iter().find(|o| o.bottom).or_else(|| occ.first()).copied()
    }

    pub fn covers(&self, v: VertexId) -> bool {
        self.occurrences[v.0].iter().all(|o| !o.is_empty())
    }

    /// Parent masks of `v` no run covers.
    pub fn gaps(&self, v: VertexId) -> Vec<usize> {
        (0..self.masks(v)).filter(|&m| self.occurrences[v.0][m].is_empty()).collect()
    }

    /// A role whose occurrences alone cover every parent mask, preferring
    /// bottom occurrences.
    pub fn role(&self, v: VertexId) -> Option<Role> {
        let all = |bottom: bool| self.occurrences[v.0].iter().all(|o| o.iter().any(|x| x.bottom == bottom));
        if all(true) {
            Some(Role::Bottom)
        } else if all(false) {
            Some(Role::NonBottom)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub passed: bool,
    pub witnesses: Vec<String>,
}

impl Check {
    fn from_witnesses(witnesses: Vec<String>) -> Check {
        Check { passed: witnesses.is_empty(), witnesses }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoodnessReport {
    pub well_formed: Check,
    pub alignable: Check,
    pub independent: Check,
    pub coverage: Check,
    /// No vertex is a bottom member in one run and an ordinary member in
    /// another.
    pub bottom_consistency: Check,
    pub depth: Check,
}

impl GoodnessReport {
    pub fn all_passed(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.passed)
    }

    pub fn checks(&self) -> [(&'static str, &Check); 6] {
        [
            ("well_formed", &self.well_formed),
            ("alignable", &self.alignable),
            ("independent", &self.independent),
            ("coverage", &self.coverage),
            ("bottom_consistency", &self.bottom_consistency),
            ("depth", &self.depth),
        ]
    }
}

pub fn default_depth_cap(n_mp: usize) -> usize {
    3 * n_mp
}

pub fn is_good_collection(g: &Dag, coll: &RunCollection, n_mp: usize, depth_cap: usize) -> GoodnessReport {
    let runs = coll.runs();
    let well_formed = Check::from_witnesses(
        runs.iter().enumerate().filter(|(_, r)| !r.is_well_formed()).map(|(i, r)| format!("run {i} {r}")).collect(),
    );

    let mut align_w = Vec::new();
    if runs.len() > 1 && !coll.is_spanning() {
        align_w.push("alignment tree does not span every run".to_string());
    }
    for e in coll.tree() {
        if !alignment_variables(g, &runs[e.parent], &runs[e.child]).contains(e.variable) {
            align_w.push(format!("edge {}-{} at {} is not structural", e.parent, e.child, e.variable));
        }
    }
    let alignable = Check::from_witnesses(align_w);

    let independent = Check::from_witnesses(
        runs.iter()
            .enumerate()
            .filter(|(_, r)| !r.is_n_independent(n_mp))
            .map(|(i, r)| format!("run {i} {r} has {} < {n_mp} independent vertices", r.independent().len()))
            .collect(),
    );

    let plan = CoveragePlan::new(g, coll);
    let mut cov_w = Vec::new();
    for v in g.vertices() {
        for m in plan.gaps(v) {
            cov_w.push(format!("{v} uncovered for parent mask {m}"));
        }
    }

    let mut bottom_seen = vec![false; g.n()];
    let mut other_seen = vec![false; g.n()];
    let mut depth_w = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        for v in r.independent() {
            if r.is_bottom(v) {
                bottom_seen[v.0] = true;
            } else {
                other_seen[v.0] = true;
                if g.dep(v) > depth_cap {
                    depth_w.push(format!("{v} at depth {} is non-bottom in run {i}", g.dep(v)));
                }
            }
        }
    }
    let role_w = g
        .vertices()
        .filter(|v| bottom_seen[v.0] && other_seen[v.0])
        .map(|v| format!("{v} is a bottom in one run and an ordinary member in another"))
        .collect();

    GoodnessReport {
        well_formed,
        alignable,
        independent,
        coverage: Check::from_witnesses(cov_w),
        bottom_consistency: Check::from_witnesses(role_w),
        depth: Check::from_witnesses(depth_w),
    }
}
