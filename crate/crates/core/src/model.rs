//! Mixtures of Bayesian network distributions over binary vertices.
//!
//! Every source shares the DAG; each has its own CPTs. Probabilities of
//! partial events are computed by brute-force enumeration over the free
//! ancestors of the event, which is exact and cheap at the sizes the
//! identification pipeline targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, DagError, VertexId, VertexSet};
use crate::perm;

/// CPT entries and weights are kept inside `[FLOOR, 1 - FLOOR]`.
pub const POSITIVITY_FLOOR: f64 = 1e-9;

/// Enumeration refuses events with more free ancestors than this.
pub const MAX_FREE_VERTICES: usize = 25;

const GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("assignment leaves {missing} unassigned")]
    PartialAssignment { missing: VertexId },
    #[error("conditioning event has probability zero")]
    ZeroConditioningProbability,
    #[error("enumeration over {free} free vertices exceeds the limit of {limit}")]
    TooManyFreeVertices { free: usize, limit: usize },
    #[error("{vertex} is fixed by both the target and the evidence")]
    OverlappingAssignments { vertex: VertexId },
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("invalid CPT for {vertex}: {reason}")]
    InvalidCpt { vertex: VertexId, reason: String },
    #[error("no separated draw for {vertex} after {attempts} attempts")]
    GenerationTimeout { vertex: VertexId, attempts: usize },
    #[error("assignment covers {got} vertices but the graph has {n}")]
    SizeMismatch { got: usize, n: usize },
    #[error("models disagree in shape: {0}")]
    ShapeMismatch(String),
}

/// Partial map from vertices to bits, stored densely over all `n` vertices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Assignment {
    values: Vec<Option<u8>>,
}

impl Assignment {
    pub fn empty(n: usize) -> Self {
        Assignment { values: vec![None; n] }
    }

    /// Total assignment from a bit vector.
    pub fn from_bits(bits: &[u8]) -> Self {
        Assignment { values: bits.iter().map(|&b| Some(b)).collect() }
    }

    pub fn from_pairs<I: IntoIterator<Item = (VertexId, u8)>>(n: usize, pairs: I) -> Self {
        let mut a = Assignment::empty(n);
        for (v, b) in pairs {
            a.set(v, b);
        }
        a
    }

    /// Every member of `set` fixed to `bit`.
    pub fn constant(n: usize, set: &VertexSet, bit: u8) -> Self {
        Assignment::from_pairs(n, set.iter().map(|v| (v, bit)))
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, v: VertexId) -> Option<u8> {
        self.values.get(v.0).copied().flatten()
    }

    pub fn set(&mut self, v: VertexId, bit: u8) {
        debug_assert!(bit <= 1, "bits are 0 or 1");
        self.values[v.0] = Some(bit);
    }

    pub fn clear(&mut self, v: VertexId) {
        self.values[v.0] = None;
    }

    pub fn with(mut self, v: VertexId, bit: u8) -> Self {
        self.set(v, bit);
        self
    }

    pub fn is_total(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }

    pub fn assigned(&self) -> VertexSet {
        self.values.iter().enumerate().filter(|(_, b)| b.is_some()).map(|(i, _)| VertexId(i)).collect()
    }

    pub fn restrict(&self, set: &VertexSet) -> Assignment {
        let mut out = Assignment::empty(self.n());
        for v in set {
            if let Some(b) = self.get(v) {
                out.set(v, b);
            }
        }
        out
    }

    /// Little-endian index of the values on `order`; `None` if any is unset.
    pub fn mask(&self, order: &VertexSet) -> Option<usize> {
        let mut m = 0;
        for (i, v) in order.iter().enumerate() {
            m |= (self.get(v)? as usize) << i;
        }
        Some(m)
    }

    /// Both assignments fix every member of `set`, to the same values.
    pub fn agrees_on(&self, other: &Assignment, set: &VertexSet) -> bool {
        set.iter().all(|v| matches!((self.get(v), other.get(v)), (Some(a), Some(b)) if a == b))
    }

    /// Union of two assignments; fails on the first conflicting vertex.
    pub fn merged(&self, other: &Assignment) -> Result<Assignment, VertexId> {
        let mut out = self.clone();
        for (i, b) in other.values.iter().enumerate() {
            if let Some(b) = *b {
                match out.values[i] {
                    Some(a) if a != b => return Err(VertexId(i)),
                    _ => out.values[i] = Some(b),
                }
            }
        }
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VertexId, u8)> + '_ {
        self.values.iter().enumerate().filter_map(|(i, b)| b.map(|b| (VertexId(i), b)))
    }
}

/// `P(vertex = 1 | parents)` for every parent assignment, indexed by the
/// little-endian parent mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub vertex: VertexId,
    pub parents: VertexSet,
    pub table: Vec<f64>,
}

impl Cpt {
    pub fn parents(&self) -> &VertexSet {
        &self.parents
    }

    #[inline]
    pub fn p1(&self, mask: usize) -> f64 {
        self.table[mask]
    }

    #[inline]
    pub fn prob(&self, value: u8, mask: usize) -> f64 {
        if value == 1 {
            self.table[mask]
        } else {
            1.0 - self.table[mask]
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureModel {
    dag: Dag,
    k: usize,
    cpts: Vec<Vec<Cpt>>,
    weights: Vec<f64>,
}

impl MixtureModel {
    /// Builds a model from `tables[u][v][mask] = P_u(v = 1 | mask)`.
    ///
    /// Entries are clamped into `[POSITIVITY_FLOOR, 1 - POSITIVITY_FLOOR]`;
    /// weights must be positive and sum to one within `1e-9`. Weights are
    /// stored as given so that saving and reloading is lossless.
    pub fn new(dag: Dag, tables: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self, ModelError> {
        let k = weights.len();
        if k == 0 {
            return Err(ModelError::InvalidWeights("at least one source is required".into()));
        }
        if tables.len() != k {
            return Err(ModelError::ShapeMismatch(format!("{} weight entries but {} CPT sets", k, tables.len())));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidWeights(format!("{weights:?} (sum {sum})")));
        }
        let mut cpts = Vec::with_capacity(k);
        for per_source in tables {
            if per_source.len() != dag.n() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} CPTs for a graph on {} vertices",
                    per_source.len(),
                    dag.n()
                )));
            }
            let mut row = Vec::with_capacity(dag.n());
            for (i, table) in per_source.into_iter().enumerate() {
                let v = VertexId(i);
                let parents = dag.pa(v).clone();
                if table.len() != 1 << parents.len() {
                    return Err(ModelError::InvalidCpt {
                        vertex: v,
                        reason: format!("{} entries, expected {}", table.len(), 1 << parents.len()),
                    });
                }
                if let Some(bad) = table.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(ModelError::InvalidCpt {
                        vertex: v,
                        reason: format!("entry {bad} is not a probability"),
                    });
                }
                let table = table.into_iter().map(clamp_probability).collect();
                row.push(Cpt { vertex: v, parents, table });
            }
            cpts.push(row);
        }
        Ok(MixtureModel { dag, k, cpts, weights })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.dag.n()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cpt(&self, u: usize, v: VertexId) -> &Cpt {
        &self.cpts[u][v.0]
    }

    pub fn cpts(&self, u: usize) -> &[Cpt] {
        &self.cpts[u]
    }

    /// `tables[u][v][mask]`, the inverse of [`MixtureModel::new`].
    pub fn tables(&self) -> Vec<Vec<Vec<f64>>> {
        self.cpts.iter().map(|row| row.iter().map(|c| c.table.clone()).collect()).collect()
    }

    /// Relabels sources so that new source `j` is old source `perm[j]`.
    pub fn permute_sources(&self, perm: &[usize]) -> MixtureModel {
        assert!(perm::is_permutation(perm) && perm.len() == self.k);
        MixtureModel {
            dag: self.dag.clone(),
            k: self.k,
            cpts: perm.iter().map(|&j| self.cpts[j].clone()).collect(),
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
        }
    }

    /// Same parameters on a different graph whose parent sets match.
    pub fn with_dag(&self, dag: Dag) -> Result<MixtureModel, ModelError> {
        MixtureModel::new(dag, self.tables(), self.weights.clone())
    }

    /// `∏ P_u(v | pa(v))` for a total assignment.
    pub fn within_source_joint(&self, u: usize, a: &Assignment) -> Result<f64, ModelError> {
        self.check_len(a)?;
        if let Some(v) = self.dag.vertices().find(|&v| a.get(v).is_none()) {
            return Err(ModelError::PartialAssignment { missing: v });
        }
        let mut p = 1.0;
        for v in self.dag.vertices() {
            let cpt = &self.cpts[u][v.0];
            let mask = a.mask(&cpt.parents).expect("total assignment");
            p *= cpt.prob(a.get(v).expect("total assignment"), mask);
        }
        Ok(p)
    }

    /// `P_u(event)` for a partial assignment, marginalizing the free
    /// ancestors of the fixed vertices. Descendants sum out to one and are
    /// never enumerated.
    pub fn event_probability(&self, u: usize, event: &Assignment) -> Result<f64, ModelError> {
        self.check_len(event)?;
        let plan = EnumerationPlan::new(&self.dag, event)?;
        Ok(plan.probability(&self.cpts[u], event))
    }

    /// `P_u(targets | given)`.
    pub fn conditional(&self, u: usize, targets: &Assignment, given: &Assignment) -> Result<f64, ModelError> {
        let joint = disjoint_union(targets, given)?;
        let num = self.event_probability(u, &joint)?;
        let den = self.event_probability(u, given)?;
        ratio(num, den)
    }

    /// `Σ_u P(u) P_u(event)`.
    pub fn mixture_event_probability(&self, event: &Assignment) -> Result<f64, ModelError> {
        self.check_len(event)?;
        let plan = EnumerationPlan::new(&self.dag, event)?;
        Ok((0..self.k).map(|u| self.weights[u] * plan.probability(&self.cpts[u], event)).sum())
    }

    /// Mixture-level `P(targets | given)`.
    pub fn mixture_conditional(&self, targets: &Assignment, given: &Assignment) -> Result<f64, ModelError> {
        let joint = disjoint_union(targets, given)?;
        ratio(self.mixture_event_probability(&joint)?, self.mixture_event_probability(given)?)
    }

    /// `P(u | given)` for every source.
    pub fn posterior(&self, given: &Assignment) -> Result<Vec<f64>, ModelError> {
        self.check_len(given)?;
        let plan = EnumerationPlan::new(&self.dag, given)?;
        let joint: Vec<f64> = (0..self.k).map(|u| self.weights[u] * plan.probability(&self.cpts[u], given)).collect();
        let total: f64 = joint.iter().sum();
        if total < 1e-300 {
            return Err(ModelError::ZeroConditioningProbability);
        }
        Ok(joint.into_iter().map(|p| p / total).collect())
    }

    /// Full mixture joint over all `2^n` assignments, indexed by the
    /// little-endian vertex mask.
    pub fn full_joint(&self) -> Result<Vec<f64>, ModelError> {
        let n = self.n();
        if n > MAX_FREE_VERTICES {
            return Err(ModelError::TooManyFreeVertices { free: n, limit: MAX_FREE_VERTICES });
        }
        let order = self.dag.topological_order();
        let mut out = vec![0.0; 1 << n];
        for (m, slot) in out.iter_mut().enumerate() {
            for u in 0..self.k {
                let mut p = self.weights[u];
                for &v in order {
                    let cpt = &self.cpts[u][v.0];
                    let mut pm = 0;
                    for (i, pa) in cpt.parents.iter().enumerate() {
                        pm |= ((m >> pa.0) & 1) << i;
                    }
                    p *= cpt.prob(((m >> v.0) & 1) as u8, pm);
                }
                *slot += p;
            }
        }
        Ok(out)
    }

    /// Ancestral sampling; deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(count);
        let mut sources = Vec::with_capacity(count);
        let order = self.dag.topological_order();
        for _ in 0..count {
            let u = draw_index(&self.weights, &mut rng);
            let mut row = vec![0u8; self.n()];
            for &v in order {
                let cpt = &self.cpts[u][v.0];
                let mut mask = 0;
                for (i, p) in cpt.parents.iter().enumerate() {
                    mask |= (row[p.0] as usize) << i;
                }
                row[v.0] = u8::from(rng.gen::<f64>() < cpt.p1(mask));
            }
            rows.push(row);
            sources.push(u);
        }
        SampleSet { n: self.n(), rows, sources: Some(sources) }
    }

    fn check_len(&self, a: &Assignment) -> Result<(), ModelError> {
        if a.n() != self.n() {
            return Err(ModelError::SizeMismatch { got: a.n(), n: self.n() });
        }
        Ok(())
    }
}

pub(crate) fn clamp_probability(p: f64) -> f64 {
    p.clamp(POSITIVITY_FLOOR, 1.0 - POSITIVITY_FLOOR)
}

pub(crate) fn draw_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let mut r = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

fn disjoint_union(targets: &Assignment, given: &Assignment) -> Result<Assignment, ModelError> {
    if let Some((v, _)) = targets.iter().find(|(v, _)| given.get(*v).is_some()) {
        return Err(ModelError::OverlappingAssignments { vertex: v });
    }
    Ok(targets.merged(given).expect("disjoint assignments never conflict"))
}

fn ratio(num: f64, den: f64) -> Result<f64, ModelError> {
    if den < 1e-300 {
        return Err(ModelError::ZeroConditioningProbability);
    }
    Ok(num / den)
}

/// Which vertices an event touches and which of them must be summed out.
struct EnumerationPlan {
    // Closure of the event under ancestors, in topological order.
    order: Vec<VertexId>,
    free: Vec<VertexId>,
}

impl EnumerationPlan {
    fn new(dag: &Dag, event: &Assignment) -> Result<Self, ModelError> {
        let fixed = event.assigned();
        let closure = fixed.union(&dag.ancestors(&fixed)?);
        let order: Vec<VertexId> = dag.topological_order().iter().copied().filter(|v| closure.contains(*v)).collect();
        let free: Vec<VertexId> = order.iter().copied().filter(|v| !fixed.contains(*v)).collect();
        if free.len() > MAX_FREE_VERTICES {
            return Err(ModelError::TooManyFreeVertices { free: free.len(), limit: MAX_FREE_VERTICES });
        }
        Ok(EnumerationPlan { order, free })
    }

    fn probability(&self, cpts: &[Cpt], event: &Assignment) -> f64 {
        let mut values: Vec<u8> = (0..event.n()).map(|i| event.get(VertexId(i)).unwrap_or(0)).collect();
        let mut total = 0.0;
        for m in 0..(1usize << self.free.len()) {
            for (i, v) in self.free.iter().enumerate() {
                values[v.0] = ((m >> i) & 1) as u8;
            }
            let mut p = 1.0;
            for &v in &self.order {
                let cpt = &cpts[v.0];
                let mut mask = 0;
                for (i, pa) in cpt.parents.iter().enumerate() {
                    mask |= (values[pa.0] as usize) << i;
                }
                p *= cpt.prob(values[v.0], mask);
            }
            total += p;
        }
        total
    }
}

/// Random model whose sources differ by at least `zeta` on every CPT entry.
///
/// Entries are uniform on `[0.05, 0.95]`; each `(vertex, mask)` column is
/// redrawn until all pairwise source gaps reach `zeta`.
pub fn random_separated_model(g: &Dag, k: usize, zeta: f64, seed: u64) -> Result<MixtureModel, ModelError> {
    random_separated_model_with_margin(g, k, zeta, 0.05, seed)
}

pub fn random_separated_model_with_margin(
    g: &Dag,
    k: usize,
    zeta: f64,
    margin: f64,
    seed: u64,
) -> Result<MixtureModel, ModelError> {
    assert!(k >= 1, "k must be positive");
    assert!((0.0..0.5).contains(&margin), "margin must lie in [0, 0.5)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = vec![Vec::with_capacity(g.n()); k];
    for v in g.vertices() {
        let rows = 1usize << g.pa(v).len();
        let mut per_source = vec![Vec::with_capacity(rows); k];
        for _ in 0..rows {
            let column = separated_column(&mut rng, k, zeta, margin)
                .ok_or(ModelError::GenerationTimeout { vertex: v, attempts: GENERATION_ATTEMPTS })?;
            for (u, p) in column.into_iter().enumerate() {
                per_source[u].push(p);
            }
        }
        for (u, t) in per_source.into_iter().enumerate() {
            tables[u].push(t);
        }
    }
    let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    MixtureModel::new(g.clone(), tables, raw.iter().map(|w| w / total).collect())
}

fn separated_column<R: Rng>(rng: &mut R, k: usize, zeta: f64, margin: f64) -> Option<Vec<f64>> {
    for _ in 0..GENERATION_ATTEMPTS {
        let col: Vec<f64> = (0..k).map(|_| rng.gen_range(margin..=1.0 - margin)).collect();
        if min_pairwise_gap(&col) >= zeta {
            return Some(col);
        }
    }
    None
}

pub fn min_pairwise_gap(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Smallest pairwise source gap over every `(vertex, mask)` entry.
pub fn separation(m: &MixtureModel) -> f64 {
    let mut gap = f64::INFINITY;
    for v in m.dag().vertices() {
        for mask in 0..m.cpt(0, v).table.len() {
            let col: Vec<f64> = (0..m.k()).map(|u| m.cpt(u, v).p1(mask)).collect();
            gap = gap.min(min_pairwise_gap(&col));
        }
    }
    gap
}

/// Observed rows over `n` vertices; optional hidden-source labels for
/// synthetic data. Cells are bits for binary data and `0..d` for d-ary data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub n: usize,
    pub rows: Vec<Vec<u8>>,
    pub sources: Option<Vec<usize>>,
}

impl SampleSet {
    pub fn new(n: usize) -> Self {
        SampleSet { n, rows: Vec::new(), sources: None }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matches(row: &[u8], event: &Assignment) -> bool {
        event.iter().all(|(v, b)| row[v.0] == b)
    }

    pub fn count_matching(&self, event: &Assignment) -> usize {
        self.rows.iter().filter(|r| Self::matches(r, event)).count()
    }

    /// Empirical probability of `event`; `None` on an empty set.
    pub fn frequency(&self, event: &Assignment) -> Option<f64> {
        (!self.is_empty()).then(|| self.count_matching(event) as f64 / self.len() as f64)
    }

    /// Largest cell value plus one.
    pub fn alphabet_size(&self) -> usize {
        self.rows.iter().flatten().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn shuffled(&self, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        SampleSet {
            n: self.n,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            sources: self.sources.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Parameter errors of `other` against `truth` under the best relabeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    /// `permutation[u]` is the source of `other` matched to source `u` of `truth`.
    pub permutation: Vec<usize>,
    pub max_abs_cpt: f64,
    pub mean_abs_cpt: f64,
    pub max_rel_cpt: f64,
    pub max_abs_weight: f64,
    pub max_rel_weight: f64,
}

impl ModelComparison {
    pub fn max_abs(&self) -> f64 {
        self.max_abs_cpt.max(self.max_abs_weight)
    }
}

/// Finds the relabeling of `other` minimizing the max-abs CPT error
/// (exhaustive for `k <= 8`, greedy pairing beyond) and reports errors.
pub fn compare_models(truth: &MixtureModel, other: &MixtureModel) -> Result<ModelComparison, ModelError> {
    if truth.k() != other.k() || truth.n() != other.n() {
        return Err(ModelError::ShapeMismatch(format!(
            "k={} n={} versus k={} n={}",
            truth.k(),
            truth.n(),
            other.k(),
            other.n()
        )));
    }
    for v in truth.dag().vertices() {
        if truth.cpt(0, v).parents != other.cpt(0, v).parents {
            return Err(ModelError::ShapeMismatch(format!("parent sets of {v} differ")));
        }
    }
    let k = truth.k();
    // cost[u][w]: max-abs CPT distance between truth source u and other source w.
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|u| {
            (0..k)
                .map(|w| {
                    let mut c = 0.0f64;
                    for (a, b) in truth.cpts(u).iter().zip(other.cpts(w)) {
                        for (x, y) in a.table.iter().zip(&b.table) {
                            c = c.max((x - y).abs());
                        }
                    }
                    c
                })
                .collect()
        })
        .collect();
    let permutation = if k <= 8 {
        perm::all_permutations(k)
            .into_iter()
            .min_by(|p, q| {
                let cp = p.iter().enumerate().map(|(u, &w)| cost[u][w]).fold(0.0, f64::max);
                let cq = q.iter().enumerate().map(|(u, &w)| cost[u][w]).fold(0.0, f64::max);
                cp.total_cmp(&cq)
            })
            .expect("at least one permutation")
    } else {
        greedy_pairing(&cost)
    };

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut sum_abs = 0.0;
    let mut count = 0usize;
    for (u, &w) in permutation.iter().enumerate() {
        for (a, b) in truth.cpts(u).iter().zip(other.cpts(w)) {
            for (x, y) in a.table.iter().zip(&b.table) {
                let d = (x - y).abs();
                max_abs = max_abs.max(d);
                max_rel = max_rel.max(d / x.min(1.0 - x));
                sum_abs += d;
                count += 1;
            }
        }
    }
    let mut max_abs_w = 0.0f64;
    let mut max_rel_w = 0.0f64;
    for (u, &w) in permutation.iter().enumerate() {
        let d = (truth.weights()[u] - other.weights()[w]).abs();
        max_abs_w = max_abs_w.max(d);
        max_rel_w = max_rel_w.max(d / truth.weights()[u]);
    }
    Ok(ModelComparison {
        permutation,
        max_abs_cpt: max_abs,
        mean_abs_cpt: if count == 0 { 0.0 } else { sum_abs / count as f64 },
        max_rel_cpt: max_rel,
        max_abs_weight: max_abs_w,
        max_rel_weight: max_rel_w,
    })
}

fn greedy_pairing(cost: &[Vec<f64>]) -> Vec<usize> {
    let k = cost.len();
    let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|u| (0..k).map(move |w| (u, w))).collect();
    pairs.sort_by(|a, b| cost[a.0][a.1].total_cmp(&cost[b.0][b.1]));
    let mut out = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for (u, w) in pairs {
        if out[u] == usize::MAX && !used[w] {
            out[u] = w;
            used[w] = true;
        }
    }
    out
}

/// Serialized model: `cpts[i].tables[u][mask] = P_u(vertex = 1 | mask)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub cpts: Vec<CptRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptRecord {
    pub vertex: usize,
    pub parents: Vec<usize>,
    pub tables: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(m: &MixtureModel) -> Self {
        ModelFile {
            n: m.n(),
            k: m.k(),
            weights: m.weights().to_vec(),
            cpts: m
                .dag()
                .vertices()
                .map(|v| CptRecord {
                    vertex: v.0,
                    parents: m.cpt(0, v).parents.iter().map(VertexId::index).collect(),
                    tables: (0..m.k()).map(|u| m.cpt(u, v).table.clone()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model on `dag`, checking that the recorded parent sets
    /// agree with the graph.
    pub fn into_model(self, dag: &Dag) -> Result<MixtureModel, ModelError> {
        if self.n != dag.n() || self.cpts.len() != dag.n() {
            return Err(ModelError::ShapeMismatch(format!(
                "model has n={} with {} CPTs, graph has n={}",
                self.n,
                self.cpts.len(),
                dag.n()
            )));
        }
        if self.weights.len() != self.k {
            return Err(ModelError::ShapeMismatch(format!("k={} but {} weights", self.k, self.weights.len())));
        }
        let mut tables = vec![vec![Vec::new(); dag.n()]; self.k];
        let mut seen = vec![false; dag.n()];
        for rec in self.cpts {
            let v = VertexId(rec.vertex);
            dag.check(v)?;
            if std::mem::replace(&mut seen[v.0], true) {
                return Err(ModelError::InvalidCpt { vertex: v, reason: "listed twice".into() });
            }
            let parents: VertexSet = rec.parents.iter().map(|&p| VertexId(p)).collect();
            if &parents != dag.pa(v) || parents.len() != rec.parents.len() {
                return Err(ModelError::InvalidCpt {
                    vertex: v,
                    reason: format!("parents {:?} do not match the graph's {}", rec.parents, dag.pa(v)),
                });
            }
            if rec.tables.len() != self.k {
                return Err(ModelError::InvalidCpt {
                    vertex: v,
                    reason: format!("{} source tables, expected {}", rec.tables.len(), self.k),
                });
            }
            for (u, t) in rec.tables.into_iter().enumerate() {
                tables[u][v.0] = t;
            }
        }
        MixtureModel::new(dag.clone(), tables, self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::vset;

    fn a(n: usize, pairs: &[(usize, u8)]) -> Assignment {
        Assignment::from_pairs(n, pairs.iter().map(|&(v, b)| (VertexId(v), b)))
    }

    fn chain_model(p1: f64, p2: [f64; 2]) -> MixtureModel {
        MixtureModel::new(Dag::chain(2), vec![vec![vec![p1], p2.to_vec()]], vec![1.0]).unwrap()
    }

    #[test]
    fn single_vertex_joint() {
        let m = MixtureModel::new(Dag::empty(1), vec![vec![vec![0.3]]], vec![1.0]).unwrap();
        assert!((m.within_source_joint(0, &Assignment::from_bits(&[1])).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_chain_joint_is_product() {
        let m = chain_model(0.5, [0.2, 0.7]);
        let p = m.within_source_joint(0, &Assignment::from_bits(&[1, 1])).unwrap();
        assert!((p - 0.5 * 0.7).abs() < 1e-15);
        assert_eq!(
            m.within_source_joint(0, &a(2, &[(0, 1)])).unwrap_err(),
            ModelError::PartialAssignment { missing: VertexId(1) }
        );
    }

    #[test]
    fn joint_normalizes() {
        let g = Dag::new(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let m = random_separated_model(&g, 2, 0.05, 3).unwrap();
        for u in 0..2 {
            let total: f64 = (0..16u32)
                .map(|x| {
                    let bits: Vec<u8> = (0..4).map(|i| ((x >> i) & 1) as u8).collect();
                    m.within_source_joint(u, &Assignment::from_bits(&bits)).unwrap()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn conditional_trivial_cases() {
        let m = chain_model(0.4, [0.2, 0.7]);
        let full = Assignment::from_bits(&[1, 0]);
        let c = m.conditional(0, &full, &Assignment::empty(2)).unwrap();
        assert!((c - m.within_source_joint(0, &full).unwrap()).abs() < 1e-15);
        let c = m.conditional(0, &a(2, &[(1, 1)]), &a(2, &[(0, 1)])).unwrap();
        assert!((c - 0.7).abs() < 1e-15);
        assert!(matches!(
            m.conditional(0, &a(2, &[(1, 1)]), &a(2, &[(1, 0)])),
            Err(ModelError::OverlappingAssignments { .. })
        ));
    }

    #[test]
    fn boundary_conditional_matches_ratio_form() {
        // V1 -> Y, V2 -> Y, Y -> V4, Y -> V5, V3 -> V4, V4 -> V5; Y is vertex 3.
        let g = Dag::new(6, &[(0, 3), (1, 3), (3, 4), (3, 5), (2, 4), (4, 5)]).unwrap();
        let m = random_separated_model(&g, 1, 0.0, 11).unwrap();
        let y = VertexId(3);
        let mb = g.markov_boundary(y).unwrap().clone();
        for x in 0..32usize {
            let given = Assignment::from_pairs(6, mb.iter().enumerate().map(|(i, v)| (v, ((x >> i) & 1) as u8)));
            let got = m.conditional(0, &Assignment::empty(6).with(y, 1), &given).unwrap();
            // P(y|pa) P(v4|v3,y) P(v5|y,v4), normalized over y.
            let term = |yv: u8| {
                let full = given.clone().with(y, yv);
                let py = m.cpt(0, y).prob(yv, full.mask(m.cpt(0, y).parents()).unwrap());
                let c4 = m.cpt(0, VertexId(4));
                let c5 = m.cpt(0, VertexId(5));
                py * c4.prob(full.get(VertexId(4)).unwrap(), full.mask(&c4.parents).unwrap())
                    * c5.prob(full.get(VertexId(5)).unwrap(), full.mask(&c5.parents).unwrap())
            };
            let want = term(1) / (term(0) + term(1));
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn mixture_conditional_reduces() {
        let m = chain_model(0.4, [0.2, 0.7]);
        let t = a(2, &[(1, 1)]);
        let gv = a(2, &[(0, 0)]);
        assert!((m.mixture_conditional(&t, &gv).unwrap() - m.conditional(0, &t, &gv).unwrap()).abs() < 1e-15);

        let twin = MixtureModel::new(Dag::chain(2), vec![m.tables()[0].clone(); 2], vec![0.3, 0.7]).unwrap();
        assert!((twin.mixture_conditional(&t, &gv).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mixture_conditional_by_hand() {
        // Two sources on a 2-chain. P(v1=1 | v0=1) mixes the CPT rows by the
        // posterior of each source given v0 = 1.
        let m = MixtureModel::new(
            Dag::chain(2),
            vec![vec![vec![0.2], vec![0.1, 0.6]], vec![vec![0.8], vec![0.3, 0.9]]],
            vec![0.25, 0.75],
        )
        .unwrap();
        let want = (0.25 * 0.2 * 0.6 + 0.75 * 0.8 * 0.9) / (0.25 * 0.2 + 0.75 * 0.8);
        let got = m.mixture_conditional(&a(2, &[(1, 1)]), &a(2, &[(0, 1)])).unwrap();
        assert!((got - want).abs() < 1e-15);
        let post = m.posterior(&a(2, &[(0, 1)])).unwrap();
        assert!((post[0] - 0.05 / 0.65).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_evidence() {
        let g = Dag::empty(1);
        let m = MixtureModel::new(g, vec![vec![vec![0.0]]], vec![1.0]).unwrap();
        // Clamping keeps the event possible, if barely.
        assert!(m.conditional(0, &Assignment::empty(1), &a(1, &[(0, 1)])).is_ok());
        assert!((m.cpt(0, VertexId(0)).p1(0) - POSITIVITY_FLOOR).abs() < 1e-24);
    }

    #[test]
    fn enumeration_guard() {
        let g = Dag::new(27, &(0..26).map(|i| (i, 26)).collect::<Vec<_>>()).unwrap();
        let tables = vec![(0..27).map(|v| vec![0.5; if v == 26 { 1 << 26 } else { 1 }]).collect()];
        let m = MixtureModel::new(g, tables, vec![1.0]).unwrap();
        assert_eq!(
            m.event_probability(0, &a(27, &[(26, 1)])).unwrap_err(),
            ModelError::TooManyFreeVertices { free: 26, limit: MAX_FREE_VERTICES }
        );
    }

    #[test]
    fn sampling_basics() {
        let m = chain_model(0.3, [0.2, 0.7]);
        assert!(m.sample(0, 1).is_empty());
        assert_eq!(m.sample(50, 9), m.sample(50, 9));

        let near = MixtureModel::new(Dag::chain(2), vec![vec![vec![1.0], vec![0.0, 1.0]]], vec![1.0]).unwrap();
        assert!(near.sample(1000, 2).rows.iter().all(|r| r == &vec![1, 1]));

        let count = 100_000;
        let s = m.sample(count, 5);
        let f = s.frequency(&a(2, &[(0, 1)])).unwrap();
        let sd = (0.3f64 * 0.7 / count as f64).sqrt();
        assert!((f - 0.3).abs() < 3.0 * sd, "{f}");
    }

    #[test]
    fn separated_generation() {
        let g = Dag::chain(4);
        let m = random_separated_model(&g, 2, 0.1, 4).unwrap();
        assert!(separation(&m) >= 0.1);
        assert!(random_separated_model(&g, 1, 0.3, 4).is_ok());
        let w: f64 = m.weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert!(m.weights().iter().all(|&w| w >= 0.5 / 3.0 - 1e-12));
        assert!(matches!(random_separated_model(&g, 3, 0.5, 4), Err(ModelError::GenerationTimeout { .. })));
    }

    #[test]
    fn zeta_zero_takes_first_draw() {
        let g = Dag::chain(3);
        let a1 = random_separated_model(&g, 2, 0.0, 8).unwrap();
        let a2 = random_separated_model(&g, 2, 0.0, 8).unwrap();
        assert_eq!(a1.tables(), a2.tables());
    }

    #[test]
    fn weights_validated() {
        let t = vec![vec![vec![0.5]]; 2];
        assert!(MixtureModel::new(Dag::empty(1), t.clone(), vec![0.5, 0.6]).is_err());
        assert!(MixtureModel::new(Dag::empty(1), t.clone(), vec![1.0, 0.0]).is_err());
        assert!(MixtureModel::new(Dag::empty(1), t, vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn comparison_finds_swap() {
        let g = Dag::chain(3);
        let m = random_separated_model(&g, 3, 0.1, 1).unwrap();
        let same = compare_models(&m, &m).unwrap();
        assert_eq!(same.permutation, vec![0, 1, 2]);
        assert_eq!(same.max_abs(), 0.0);
        let swapped = m.permute_sources(&[2, 0, 1]);
        let c = compare_models(&m, &swapped).unwrap();
        assert_eq!(c.max_abs(), 0.0);
        assert_eq!(c.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn model_file_round_trip() {
        let g = Dag::new(3, &[(0, 2), (1, 2)]).unwrap();
        let m = random_separated_model(&g, 2, 0.1, 5).unwrap();
        let text = serde_json::to_string(&ModelFile::from_model(&m)).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        let m2 = back.into_model(&g).unwrap();
        assert_eq!(m2.tables(), m.tables());
        assert_eq!(m2.weights(), m.weights());

        let mut bad = ModelFile::from_model(&m);
        bad.cpts[2].parents = vec![0];
        assert!(bad.into_model(&g).is_err());
    }

    #[test]
    fn assignment_helpers() {
        let x = a(4, &[(1, 1), (3, 0)]);
        assert_eq!(x.assigned(), vset([1, 3]));
        assert_eq!(x.mask(&vset([1, 3])), Some(1));
        assert_eq!(x.mask(&vset([0, 1])), None);
        assert!(x.agrees_on(&a(4, &[(1, 1), (3, 0), (0, 1)]), &vset([1, 3])));
        assert!(!x.agrees_on(&a(4, &[(1, 1)]), &vset([1, 3])));
        assert_eq!(x.merged(&a(4, &[(1, 0)])), Err(VertexId(1)));
    }
}
