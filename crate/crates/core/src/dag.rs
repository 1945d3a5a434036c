//! Directed acyclic graphs over binary observables and the structural
//! queries the reduction needs: parents, children, Markov boundaries,
//! depth, bottom vertices and center selection.
//!
//! A [`Dag`] is immutable once built. Topological order, boundaries and
//! depths are computed eagerly in [`Dag::new`].

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expansions the exhaustive center search may spend.
pub const CENTER_SEARCH_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("vertex index {index} out of range for a graph on {n} vertices")]
    BadVertexIndex { index: usize, n: usize },
    #[error("edge list contains a directed cycle: {}", fmt_cycle(.cycle))]
    CycleDetected { cycle: Vec<VertexId> },
    #[error("duplicate edge {parent} -> {child}")]
    DuplicateEdge { parent: VertexId, child: VertexId },
    #[error("found only {found} of {requested} centers with disjoint Markov boundaries")]
    NotEnoughCenters { found: usize, requested: usize },
}

fn fmt_cycle(cycle: &[VertexId]) -> String {
    cycle.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" -> ")
}

/// Index of a vertex, `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId(pub usize);

impl VertexId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl From<usize> for VertexId {
    fn from(i: usize) -> Self {
        VertexId(i)
    }
}

/// Sorted, duplicate-free set of vertices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexSet(Vec<VertexId>);

impl VertexSet {
    pub fn new() -> Self {
        VertexSet(Vec::new())
    }

    pub fn singleton(v: VertexId) -> Self {
        VertexSet(vec![v])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, v: VertexId) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    /// Position of `v` in ascending order, if present.
    pub fn position(&self, v: VertexId) -> Option<usize> {
        self.0.binary_search(&v).ok()
    }

    pub fn insert(&mut self, v: VertexId) -> bool {
        match self.0.binary_search(&v) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, v);
                true
            }
        }
    }

    pub fn remove(&mut self, v: VertexId) -> bool {
        match self.0.binary_search(&v) {
            Ok(pos) => {
                self.0.remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = VertexId> + ExactSizeIterator + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[VertexId] {
        &self.0
    }

    pub fn first(&self) -> Option<VertexId> {
        self.0.first().copied()
    }

    pub fn union(&self, other: &VertexSet) -> VertexSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => {
                    out.push(self.0[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.0[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(self.0[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        VertexSet(out)
    }

    pub fn intersection(&self, other: &VertexSet) -> VertexSet {
        VertexSet(self.iter().filter(|v| other.contains(*v)).collect())
    }

    pub fn difference(&self, other: &VertexSet) -> VertexSet {
        VertexSet(self.iter().filter(|v| !other.contains(*v)).collect())
    }

    pub fn is_disjoint(&self, other: &VertexSet) -> bool {
        self.iter().all(|v| !other.contains(v))
    }

    pub fn is_subset(&self, other: &VertexSet) -> bool {
        self.iter().all(|v| other.contains(v))
    }
}

impl FromIterator<VertexId> for VertexSet {
    fn from_iter<T: IntoIterator<Item = VertexId>>(iter: T) -> Self {
        let mut v: Vec<VertexId> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        VertexSet(v)
    }
}

impl<'a> IntoIterator for &'a VertexSet {
    type Item = VertexId;
    type IntoIter = std::iter::Copied<std::slice::Iter<'a, VertexId>>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter().copied()
    }
}

impl fmt::Display for VertexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, v) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

/// Shorthand for building a [`VertexSet`] from raw indices.
pub fn vset<I: IntoIterator<Item = usize>>(indices: I) -> VertexSet {
    indices.into_iter().map(VertexId).collect()
}

/// On-disk graph description: `{"n": 3, "edges": [[0, 1], [1, 2]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagFile {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct Dag {
    n: usize,
    edges: Vec<(VertexId, VertexId)>,
    parents: Vec<VertexSet>,
    children: Vec<VertexSet>,
    boundary: Vec<VertexSet>,
    depth: Vec<usize>,
    topo: Vec<VertexId>,
}

impl Dag {
    /// Validates the edge list and builds the graph with all cached structure.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Dag, DagError> {
        let mut parents = vec![VertexSet::new(); n];
        let mut children = vec![VertexSet::new(); n];
        let mut edge_list = Vec::with_capacity(edges.len());
        for &(p, c) in edges {
            for idx in [p, c] {
                if idx >= n {
                    return Err(DagError::BadVertexIndex { index: idx, n });
                }
            }
            let (p, c) = (VertexId(p), VertexId(c));
            if p == c {
                return Err(DagError::CycleDetected { cycle: vec![p, p] });
            }
            if !children[p.0].insert(c) {
                return Err(DagError::DuplicateEdge { parent: p, child: c });
            }
            parents[c.0].insert(p);
            edge_list.push((p, c));
        }
        edge_list.sort_unstable();

        let topo = topological_order(n, &parents, &children)?;

        let boundary = (0..n)
            .map(|v| {
                let v = VertexId(v);
                let mut mb = parents[v.0].union(&children[v.0]);
                for c in &children[v.0] {
                    mb = mb.union(&parents[c.0]);
                }
                mb.remove(v);
                mb
            })
            .collect();

        // Multi-source BFS from every root.
        let mut depth = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for v in 0..n {
            if parents[v].is_empty() {
                depth[v] = 0;
                queue.push_back(v);
            }
        }
        while let Some(v) = queue.pop_front() {
            for c in &children[v] {
                if depth[c.0] == usize::MAX {
                    depth[c.0] = depth[v] + 1;
                    queue.push_back(c.0);
                }
            }
        }

        Ok(Dag { n, edges: edge_list, parents, children, boundary, depth, topo })
    }

    pub fn from_file(file: &DagFile) -> Result<Dag, DagError> {
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        Dag::new(file.n, &edges)
    }

    pub fn to_file(&self) -> DagFile {
        DagFile { n: self.n, edges: self.edges.iter().map(|&(p, c)| [p.0, c.0]).collect() }
    }

    /// Graph on `n` vertices with no edges.
    pub fn empty(n: usize) -> Dag {
        Dag::new(n, &[]).expect("an edgeless graph is acyclic")
    }

    /// Directed path `0 -> 1 -> ... -> n-1`.
    pub fn chain(n: usize) -> Dag {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Dag::new(n, &edges).expect("a chain is acyclic")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> {
        (0..self.n).map(VertexId)
    }

    pub fn edges(&self) -> &[(VertexId, VertexId)] {
        &self.edges
    }

    pub fn topological_order(&self) -> &[VertexId] {
        &self.topo
    }

    pub fn check(&self, v: VertexId) -> Result<(), DagError> {
        if v.0 < self.n {
            Ok(())
        } else {
            Err(DagError::BadVertexIndex { index: v.0, n: self.n })
        }
    }

    pub fn parents(&self, v: VertexId) -> Result<&VertexSet, DagError> {
        self.check(v)?;
        Ok(&self.parents[v.0])
    }

    pub fn children(&self, v: VertexId) -> Result<&VertexSet, DagError> {
        self.check(v)?;
        Ok(&self.children[v.0])
    }

    /// `Pa(V) ∪ Ch(V) ∪ Pa(Ch(V)) \ {V}`.
    pub fn markov_boundary(&self, v: VertexId) -> Result<&VertexSet, DagError> {
        self.check(v)?;
        Ok(&self.boundary[v.0])
    }

    /// Markov boundary without the children.
    pub fn top_set(&self, v: VertexId) -> Result<VertexSet, DagError> {
        self.check(v)?;
        Ok(self.boundary[v.0].difference(&self.children[v.0]))
    }

    /// Shortest directed path length from any root; roots have depth 0.
    pub fn depth(&self, v: VertexId) -> Result<usize, DagError> {
        self.check(v)?;
        Ok(self.depth[v.0])
    }

    // Unchecked accessors for callers that already hold valid ids.
    pub(crate) fn pa(&self, v: VertexId) -> &VertexSet {
        &self.parents[v.0]
    }

    pub(crate) fn ch(&self, v: VertexId) -> &VertexSet {
        &self.children[v.0]
    }

    pub(crate) fn mb(&self, v: VertexId) -> &VertexSet {
        &self.boundary[v.0]
    }

    pub(crate) fn dep(&self, v: VertexId) -> usize {
        self.depth[v.0]
    }

    pub fn check_set(&self, s: &VertexSet) -> Result<(), DagError> {
        s.iter().try_for_each(|v| self.check(v))
    }

    /// Proper ancestors of the members of `s`, excluding `s` itself.
    pub fn ancestors(&self, s: &VertexSet) -> Result<VertexSet, DagError> {
        self.check_set(s)?;
        Ok(self.reach(s, &self.parents).difference(s))
    }

    /// Proper descendants of the members of `s`, excluding `s` itself.
    pub fn descendants(&self, s: &VertexSet) -> Result<VertexSet, DagError> {
        self.check_set(s)?;
        Ok(self.reach(s, &self.children).difference(s))
    }

    fn reach(&self, s: &VertexSet, adjacency: &[VertexSet]) -> VertexSet {
        let mut seen = vec![false; self.n];
        let mut stack: Vec<VertexId> = s.iter().collect();
        for v in s {
            seen[v.0] = true;
        }
        while let Some(v) = stack.pop() {
            for w in &adjacency[v.0] {
                if !seen[w.0] {
                    seen[w.0] = true;
                    stack.push(w);
                }
            }
        }
        (0..self.n).filter(|&i| seen[i]).map(VertexId).collect()
    }

    /// Largest Markov boundary size over all vertices.
    pub fn gamma(&self) -> usize {
        self.boundary.iter().map(VertexSet::len).max().unwrap_or(0)
    }

    pub fn max_in_degree(&self) -> usize {
        self.parents.iter().map(VertexSet::len).max().unwrap_or(0)
    }

    pub fn max_out_degree(&self) -> usize {
        self.children.iter().map(VertexSet::len).max().unwrap_or(0)
    }

    /// Maximum degree of the undirected skeleton.
    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|v| self.parents[v].len() + self.children[v].len()).max().unwrap_or(0)
    }

    /// Members of `i` with maximal depth among `i`.
    pub fn bottom_vertices(&self, i: &VertexSet) -> Result<VertexSet, DagError> {
        self.check_set(i)?;
        let Some(max) = i.iter().map(|v| self.depth[v.0]).max() else {
            return Ok(VertexSet::new());
        };
        Ok(i.iter().filter(|v| self.depth[v.0] == max).collect())
    }

    /// Centers: `count` vertices of depth at most `max_depth` whose closed
    /// Markov boundaries `{X} ∪ Mb(X)` are pairwise disjoint.
    ///
    /// Greedy first: repeatedly take the shallowest remaining vertex (ties to
    /// the smaller id) and drop every vertex in conflict with it, i.e.
    /// `Mb(Y) ∪ Mb(Mb(Y))`. If that falls short, a depth-first search over
    /// the same conflict relation (in the same order) looks for a full set,
    /// giving up after [`CENTER_SEARCH_BUDGET`] expansions.
    pub fn find_centers(&self, count: usize, max_depth: usize) -> Result<VertexSet, DagError> {
        let mut pool: Vec<VertexId> = self.vertices().filter(|v| self.depth[v.0] <= max_depth).collect();
        pool.sort_by_key(|v| (self.depth[v.0], *v));

        let mut removed = vec![false; self.n];
        let mut greedy = Vec::new();
        for &y in &pool {
            if greedy.len() == count {
                break;
            }
            if !removed[y.0] {
                greedy.push(y);
                self.mark_conflicts(y, &mut removed);
            }
        }
        if greedy.len() == count {
            return Ok(greedy.into_iter().collect());
        }

        let mut chosen = Vec::with_capacity(count);
        let mut budget = CENTER_SEARCH_BUDGET;
        if self.search_centers(&pool, 0, count, &mut chosen, &mut budget) {
            return Ok(chosen.into_iter().collect());
        }
        Err(DagError::NotEnoughCenters { found: greedy.len(), requested: count })
    }

    fn mark_conflicts(&self, y: VertexId, removed: &mut [bool]) {
        removed[y.0] = true;
        for w in self.mb(y) {
            removed[w.0] = true;
            for z in self.mb(w) {
                removed[z.0] = true;
            }
        }
    }

    fn conflicts(&self, a: VertexId, b: VertexId) -> bool {
        a == b || self.mb(a).contains(b) || !self.mb(a).is_disjoint(self.mb(b))
    }

    fn search_centers(
        &self,
        pool: &[VertexId],
        from: usize,
        count: usize,
        chosen: &mut Vec<VertexId>,
        budget: &mut usize,
    ) -> bool {
        if chosen.len() == count {
            return true;
        }
        for i in from..pool.len() {
            if pool.len() - i < count - chosen.len() || *budget == 0 {
                return false;
            }
            *budget -= 1;
            let y = pool[i];
            if chosen.iter().any(|&c| self.conflicts(c, y)) {
                continue;
            }
            chosen.push(y);
            if self.search_centers(pool, i + 1, count, chosen, budget) {
                return true;
            }
            chosen.pop();
        }
        false
    }

    /// Vertices in path order when the graph is a single directed path
    /// covering every vertex.
    pub fn path_order(&self) -> Option<Vec<VertexId>> {
        if self.n == 0 || self.edges.len() + 1 != self.n {
            return None;
        }
        if self.parents.iter().any(|p| p.len() > 1) || self.children.iter().any(|c| c.len() > 1) {
            return None;
        }
        let start = self.vertices().find(|v| self.parents[v.0].is_empty())?;
        let mut order = vec![start];
        let mut cur = start;
        while let Some(next) = self.children[cur.0].first() {
            order.push(next);
            cur = next;
        }
        (order.len() == self.n).then_some(order)
    }

    /// Same vertex set with extra edges; fails if the result has a cycle.
    pub fn with_extra_edges(&self, extra: &[(usize, usize)]) -> Result<Dag, DagError> {
        let mut edges: Vec<(usize, usize)> = self.edges.iter().map(|&(p, c)| (p.0, c.0)).collect();
        edges.extend_from_slice(extra);
        Dag::new(self.n, &edges)
    }
}

fn topological_order(n: usize, parents: &[VertexSet], children: &[VertexSet]) -> Result<Vec<VertexId>, DagError> {
    // Kahn's algorithm with a min-heap so ties resolve to the smaller id.
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut indeg: Vec<usize> = parents.iter().map(VertexSet::len).collect();
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(VertexId(v));
        for c in &children[v] {
            indeg[c.0] -= 1;
            if indeg[c.0] == 0 {
                heap.push(Reverse(c.0));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every unprocessed vertex has an unprocessed parent; walking parents
    // from any of them must revisit a vertex.
    let start = (0..n).find(|&v| indeg[v] > 0).expect("some vertex left unprocessed");
    let mut pos = vec![usize::MAX; n];
    let mut walk = Vec::new();
    let mut cur = start;
    while pos[cur] == usize::MAX {
        pos[cur] = walk.len();
        walk.push(VertexId(cur));
        cur = parents[cur].iter().find(|p| indeg[p.0] > 0).expect("unprocessed vertex has an unprocessed parent").0;
    }
    let mut cycle: Vec<VertexId> = walk[pos[cur]..].to_vec();
    cycle.reverse();
    cycle.push(cycle[0]);
    Err(DagError::CycleDetected { cycle })
}
