//! d-ary vertices through one-hot blocks.
//!
//! Vertex `V_i` with values `0..d` becomes binary vertices `W_i^0..W_i^{d-1}`
//! (ids `i d + a`) forming a directed clique `W_i^a -> W_i^b` for `a < b`,
//! and every original edge `V_j -> V_i` becomes all `d²` edges between the
//! blocks. A d-ary model induces a binary model on the reduced graph whose
//! samples are the one-hot encodings; parameters are read back from a
//! recovered binary model by conditioning each block on being one-hot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, DagError, VertexId, VertexSet};
use crate::model::{draw_index, MixtureModel, ModelError, SampleSet};

/// Smoothing applied to the deterministic parts of induced binary CPTs.
pub const INDUCED_ETA: f64 = 1e-7;

const GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlphabetError {
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("alphabet size must be at least 2, got {0}")]
    AlphabetTooSmall(usize),
    #[error("value {value} at vertex {vertex} is outside 0..{d}")]
    ValueOutOfRange { vertex: usize, value: u8, d: usize },
    #[error("row has {got} cells, expected {expected}")]
    RowLength { got: usize, expected: usize },
    #[error("block of vertex {vertex} is not one-hot")]
    NotOneHot { vertex: usize },
    #[error("source {source_index}, vertex {vertex}, parent configuration {config}: {mass:e} of the block's mass is off one-hot patterns")]
    NonOneHotSupport { vertex: usize, source_index: usize, config: usize, mass: f64 },
    #[error("invalid d-ary model: {0}")]
    InvalidModel(String),
    #[error("no separated draw for vertex {vertex} after {attempts} attempts")]
    GenerationTimeout { vertex: usize, attempts: usize },
}

/// Layout of the binary blocks: vertex `i` owns ids `i d .. i d + d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphabetSpec {
    pub d: usize,
    pub n: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl AlphabetSpec {
    pub fn new(n: usize, d: usize) -> Result<Self, AlphabetError> {
        if d < 2 {
            return Err(AlphabetError::AlphabetTooSmall(d));
        }
        Ok(AlphabetSpec { d, n, blocks: (0..n).map(|i| (i * d..i * d + d).collect()).collect() })
    }

    pub fn binary_vertex(&self, vertex: usize, value: usize) -> VertexId {
        VertexId(vertex * self.d + value)
    }

    pub fn block(&self, vertex: usize) -> VertexSet {
        self.blocks[vertex].iter().map(|&b| VertexId(b)).collect()
    }

    /// Blocks of the given original vertices, as one set.
    pub fn blocks_of(&self, vertices: &VertexSet) -> VertexSet {
        vertices.iter().flat_map(|v| self.blocks[v.0].iter().map(|&b| VertexId(b))).collect()
    }
}

pub fn clique_reduction(g: &Dag, d: usize) -> Result<(Dag, AlphabetSpec), AlphabetError> {
    let spec = AlphabetSpec::new(g.n(), d)?;
    let mut edges = Vec::new();
    for i in 0..g.n() {
        for a in 0..d {
            for b in a + 1..d {
                edges.push((i * d + a, i * d + b));
            }
        }
    }
    for &(p, c) in g.edges() {
        for a in 0..d {
            for b in 0..d {
                edges.push((p.0 * d + a, c.0 * d + b));
            }
        }
    }
    Ok((Dag::new(g.n() * d, &edges)?, spec))
}

pub fn one_hot_encode(row: &[u8], spec: &AlphabetSpec) -> Result<Vec<u8>, AlphabetError> {
    if row.len() != spec.n {
        return Err(AlphabetError::RowLength { got: row.len(), expected: spec.n });
    }
    let mut out = vec![0u8; spec.n * spec.d];
    for (i, &x) in row.iter().enumerate() {
        if x as usize >= spec.d {
            return Err(AlphabetError::ValueOutOfRange { vertex: i, value: x, d: spec.d });
        }
        out[i * spec.d + x as usize] = 1;
    }
    Ok(out)
}

pub fn one_hot_decode(bits: &[u8], spec: &AlphabetSpec) -> Result<Vec<u8>, AlphabetError> {
    if bits.len() != spec.n * spec.d {
        return Err(AlphabetError::RowLength { got: bits.len(), expected: spec.n * spec.d });
    }
    bits.chunks(spec.d)
        .enumerate()
        .map(|(i, block)| match block.iter().filter(|&&b| b == 1).count() {
            1 => Ok(block.iter().position(|&b| b == 1).expect("one set bit") as u8),
            _ => Err(AlphabetError::NotOneHot { vertex: i }),
        })
        .collect()
}

pub fn encode_samples(samples: &SampleSet, spec: &AlphabetSpec) -> Result<SampleSet, AlphabetError> {
    let rows = samples.rows.iter().map(|r| one_hot_encode(r, spec)).collect::<Result<_, _>>()?;
    Ok(SampleSet { n: spec.n * spec.d, rows, sources: samples.sources.clone() })
}

/// Mixture of d-ary Bayesian networks.
///
/// `cpts[u][v][config][x] = P_u(V_v = x | config)`, where `config` is the
/// mixed-radix index of the parents' values, least significant digit on
/// the smallest parent id.
#[derive(Debug, Clone)]
pub struct DaryModel {
    dag: Dag,
    d: usize,
    cpts: Vec<Vec<Vec<Vec<f64>>>>,
    weights: Vec<f64>,
}

impl DaryModel {
    pub fn new(dag: Dag, d: usize, cpts: Vec<Vec<Vec<Vec<f64>>>>, weights: Vec<f64>) -> Result<Self, AlphabetError> {
        if d < 2 {
            return Err(AlphabetError::AlphabetTooSmall(d));
        }
        let k = weights.len();
        let sum: f64 = weights.iter().sum();
        if k == 0 || cpts.len() != k || weights.iter().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(AlphabetError::InvalidModel(format!("bad weights {weights:?} for {} sources", cpts.len())));
        }
        for per_source in &cpts {
            if per_source.len() != dag.n() {
                return Err(AlphabetError::InvalidModel("one CPT per vertex required".into()));
            }
            for (v, table) in per_source.iter().enumerate() {
                if table.len() != d.pow(dag.pa(VertexId(v)).len() as u32) {
                    return Err(AlphabetError::InvalidModel(format!("vertex {v} has {} configurations", table.len())));
                }
                for col in table {
                    let s: f64 = col.iter().sum();
                    if col.len() != d || col.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                        return Err(AlphabetError::InvalidModel(format!(
                            "vertex {v} has an invalid distribution {col:?}"
                        )));
                    }
                }
            }
        }
        Ok(DaryModel { dag, d, cpts, weights })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cpts(&self) -> &Vec<Vec<Vec<Vec<f64>>>> {
        &self.cpts
    }

    pub fn dist(&self, u: usize, v: VertexId, config: usize) -> &[f64] {
        &self.cpts[u][v.0][config]
    }

    /// Mixed-radix index of the parents' values in `row`.
    pub fn config_of(&self, v: VertexId, row: &[u8]) -> usize {
        self.dag.pa(v).iter().rev().fold(0, |acc, p| acc * self.d + row[p.0] as usize)
    }

    /// Parents' values for a configuration index.
    pub fn config_values(&self, v: VertexId, mut config: usize) -> Vec<(VertexId, usize)> {
        self.dag
            .pa(v)
            .iter()
            .map(|p| {
                let x = config % self.d;
                config /= self.d;
                (p, x)
            })
            .collect()
    }

    pub fn sample(&self, count: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(count);
        let mut sources = Vec::with_capacity(count);
        for _ in 0..count {
            let u = draw_index(&self.weights, &mut rng);
            let mut row = vec![0u8; self.dag.n()];
            for &v in self.dag.topological_order() {
                let c = self.config_of(v, &row);
                row[v.0] = draw_index(&self.cpts[u][v.0][c], &mut rng) as u8;
            }
            rows.push(row);
            sources.push(u);
        }
        SampleSet { n: self.dag.n(), rows, sources: Some(sources) }
    }

    /// Relabels sources so that new source `j` is old source `perm[j]`.
    pub fn permute_sources(&self, perm: &[usize]) -> DaryModel {
        DaryModel {
            dag: self.dag.clone(),
            d: self.d,
            cpts: perm.iter().map(|&j| self.cpts[j].clone()).collect(),
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
        }
    }
}

/// Random d-ary model; for each `(vertex, config)` the sources' value
/// distributions are redrawn until every pair differs by at least `zeta`
/// in max-abs distance.
pub fn random_dary_model(g: &Dag, d: usize, k: usize, zeta: f64, seed: u64) -> Result<DaryModel, AlphabetError> {
    if d < 2 {
        return Err(AlphabetError::AlphabetTooSmall(d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cpts = vec![Vec::with_capacity(g.n()); k];
    for v in g.vertices() {
        let configs = d.pow(g.pa(v).len() as u32);
        let mut per_source = vec![Vec::with_capacity(configs); k];
        for _ in 0..configs {
            let mut attempt = 0;
            let cols = loop {
                let cols: Vec<Vec<f64>> = (0..k)
                    .map(|_| {
                        let raw: Vec<f64> = (0..d).map(|_| 0.1 + rng.gen::<f64>()).collect();
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(|x| x / s).collect()
                    })
                    .collect();
                let separated = (0..k).all(|a| {
                    (a + 1..k)
                        .all(|b| cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) >= zeta)
                });
                if separated {
                    break cols;
                }
                attempt += 1;
                if attempt >= GENERATION_ATTEMPTS {
                    return Err(AlphabetError::GenerationTimeout { vertex: v.0, attempts: attempt });
                }
            };
            for (u, c) in cols.into_iter().enumerate() {
                per_source[u].push(c);
            }
        }
        for (u, t) in per_source.into_iter().enumerate() {
            cpts[u].push(t);
        }
    }
    let raw: Vec<f64> = (0..k).map(|_| 0.5 + rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    DaryModel::new(g.clone(), d, cpts, raw.iter().map(|w| w / total).collect())
}

/// Binary model on the reduced graph whose distribution is the one-hot
/// pushforward of `m`, with deterministic entries moved to `eta` from 0
/// and 1. Parent patterns that are not one-hot never occur and get 1/2.
pub fn induced_binary_model(
    m: &DaryModel,
    reduced: &Dag,
    spec: &AlphabetSpec,
    eta: f64,
) -> Result<MixtureModel, AlphabetError> {
    let d = spec.d;
    let mut tables = Vec::with_capacity(m.k());
    for u in 0..m.k() {
        let mut per_source = Vec::with_capacity(reduced.n());
        for w in reduced.vertices() {
            let (i, a) = (w.0 / d, w.0 % d);
            let parents = reduced.pa(w);
            let mut table = Vec::with_capacity(1 << parents.len());
            for mask in 0..(1usize << parents.len()) {
                let bit = |id: usize| (mask >> parents.position(VertexId(id)).expect("parent")) & 1;
                let p = if (0..a).any(|b| bit(i * d + b) == 1) {
                    0.0
                } else {
                    match parent_config(m, spec, VertexId(i), &bit) {
                        None => 0.5,
                        Some(config) => {
                            let dist = m.dist(u, VertexId(i), config);
                            let tail: f64 = dist[a..].iter().sum();
                            if a == d - 1 {
                                1.0
                            } else if tail > 0.0 {
                                dist[a] / tail
                            } else {
                                0.5
                            }
                        }
                    }
                };
                table.push(p.clamp(eta, 1.0 - eta));
            }
            per_source.push(table);
        }
        tables.push(per_source);
    }
    Ok(MixtureModel::new(reduced.clone(), tables, m.weights().to_vec())?)
}

/// Configuration index of `v`'s parents if every parent block is one-hot
/// under `bit`.
fn parent_config(m: &DaryModel, spec: &AlphabetSpec, v: VertexId, bit: &dyn Fn(usize) -> usize) -> Option<usize> {
    let d = spec.d;
    let mut config = 0;
    for p in m.dag().pa(v).iter().rev() {
        let hot: Vec<usize> = (0..d).filter(|&x| bit(p.0 * d + x) == 1).collect();
        if hot.len() != 1 {
            return None;
        }
        config = config * d + hot[0];
    }
    Some(config)
}

/// Reads d-ary CPTs off a binary model on the reduced graph:
/// `P_u(V_i = x | pa) ∝ P_u(W_i^x = 1, W_i^{b≠x} = 0 | pa one-hot)`.
///
/// The joint pattern probability is used rather than the conditional on
/// the other bits being zero: on one-hot support the all-zero pattern has
/// (near) zero mass, which makes that conditional 1 for every value.
pub fn lift_parameters(
    binary: &MixtureModel,
    spec: &AlphabetSpec,
    g: &Dag,
    lift_tol: f64,
) -> Result<DaryModel, AlphabetError> {
    let d = spec.d;
    let mut cpts = Vec::with_capacity(binary.k());
    for u in 0..binary.k() {
        let mut per_source = Vec::with_capacity(g.n());
        for v in g.vertices() {
            let parents = g.pa(v);
            let configs = d.pow(parents.len() as u32);
            let mut table = Vec::with_capacity(configs);
            for config in 0..configs {
                // Binary values of the parent blocks.
                let mut hot = vec![0u8; binary.n()];
                let mut c = config;
                for p in parents {
                    hot[p.0 * d + c % d] = 1;
                    c /= d;
                }
                // P_u(block = pattern | parents), block bits in clique order.
                let pattern_prob = |pattern: &[u8]| -> f64 {
                    let mut vals = hot.clone();
                    let mut p = 1.0;
                    for (a, &bit) in pattern.iter().enumerate().take(d) {
                        let w = spec.binary_vertex(v.0, a);
                        vals[w.0] = bit;
                        let cpt = binary.cpt(u, w);
                        let mut mask = 0;
                        for (i, q) in cpt.parents.iter().enumerate() {
                            mask |= (vals[q.0] as usize) << i;
                        }
                        p *= cpt.prob(bit, mask);
                    }
                    p
                };
                let mut one_hot_mass = 0.0;
                let mut col = Vec::with_capacity(d);
                for x in 0..d {
                    let mut e = vec![0u8; d];
                    e[x] = 1;
                    let px = pattern_prob(&e);
                    one_hot_mass += px;
                    col.push(px);
                }
                let off = 1.0 - one_hot_mass;
                if off > lift_tol {
                    return Err(AlphabetError::NonOneHotSupport { vertex: v.0, source_index: u, config, mass: off });
                }
                let s: f64 = col.iter().sum();
                table.push(col.into_iter().map(|p| p / s).collect());
            }
            per_source.push(table);
        }
        cpts.push(per_source);
    }
    DaryModel::new(g.clone(), d, cpts, binary.weights().to_vec())
}

/// Max-abs error over CPT entries and weights under the best relabeling
/// (exhaustive over `k!`).
pub fn dary_max_abs_error(truth: &DaryModel, other: &DaryModel) -> f64 {
    crate::perm::all_permutations(truth.k())
        .into_iter()
        .map(|p| {
            let o = other.permute_sources(&p);
            let mut e = 0.0f64;
            for (a, b) in
                truth.cpts.iter().flatten().flatten().flatten().zip(o.cpts.iter().flatten().flatten().flatten())
            {
                e = e.max((a - b).abs());
            }
            for (a, b) in truth.weights.iter().zip(&o.weights) {
                e = e.max((a - b).abs());
            }
            e
        })
        .fold(f64::INFINITY, f64::min)
}

/// Serialized d-ary model: `cpts[i].tables[u][config][x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaryModelFile {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub cpts: Vec<DaryCptRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaryCptRecord {
    pub vertex: usize,
    pub parents: Vec<usize>,
    pub tables: Vec<Vec<Vec<f64>>>,
}

impl DaryModelFile {
    pub fn from_model(m: &DaryModel) -> Self {
        DaryModelFile {
            n: m.dag.n(),
            d: m.d,
            k: m.k(),
            weights: m.weights.clone(),
            cpts: m
                .dag
                .vertices()
                .map(|v| DaryCptRecord {
                    vertex: v.0,
                    parents: m.dag.pa(v).iter().map(VertexId::index).collect(),
                    tables: (0..m.k()).map(|u| m.cpts[u][v.0].clone()).collect(),
                })
                .collect(),
        }
    }

    pub fn into_model(self, g: &Dag) -> Result<DaryModel, AlphabetError> {
        if self.n != g.n() || self.cpts.len() != g.n() {
            return Err(AlphabetError::InvalidModel(format!("model has n={}, graph has n={}", self.n, g.n())));
        }
        let mut cpts = vec![vec![Vec::new(); g.n()]; self.k];
        for rec in self.cpts {
            let v = VertexId(rec.vertex);
            g.check(v)?;
            let parents: VertexSet = rec.parents.iter().map(|&p| VertexId(p)).collect();
            if &parents != g.pa(v) || rec.tables.len() != self.k {
                return Err(AlphabetError::InvalidModel(format!(
                    "CPT record for vertex {} does not fit the graph",
                    v.0
                )));
            }
            for (u, t) in rec.tables.into_iter().enumerate() {
                cpts[u][v.0] = t;
            }
        }
        DaryModel::new(g.clone(), self.d, cpts, self.weights)
    }
}
