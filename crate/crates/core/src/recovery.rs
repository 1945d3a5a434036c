//! From per-run oracle outputs to per-source CPTs and weights.
//!
//! 1. [`align`] walks the collection's spanning tree and relabels each
//!    run's sources to agree with its tree parent on a shared vertex.
//! 2. [`unzip`] turns outputs into CPT entries in reverse topological
//!    order. A bottom occurrence already is `P_u(Y | pa)`. A non-bottom
//!    occurrence gives `P_u(Y | mb)`, which Bayes' rule and the
//!    factorization over `Y`'s children invert using the children's
//!    already-recovered entries.
//! 3. [`recover_weights`] undoes the conditioning of the root run's
//!    weights with the recovered CPTs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{Dag, VertexId};
use crate::mixprod::{MixProdOracle, OracleError, OracleOutput, OracleRequest};
use crate::model::{min_pairwise_gap, Assignment, MixtureModel, ModelError};
use crate::perm;
use crate::runs::{CoveragePlan, Occurrence, RunCollection};

/// Exhaustive permutation search up to this many sources.
pub const EXHAUSTIVE_K: usize = 8;

const DENOMINATOR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecoveryError {
    #[error("oracle failed on run {run}: {source}")]
    Oracle {
        run: usize,
        #[source]
        source: OracleError,
    },
    #[error("oracle output for run {run} has the wrong shape: {reason}")]
    BadOutput { run: usize, reason: String },
    #[error("collection has {runs} runs but no spanning alignment tree")]
    NoAlignmentTree { runs: usize },
    #[error("runs {parent} and {child}: {variable} separates sources by only {gap:e}")]
    NotSeparated { parent: usize, child: usize, variable: VertexId, gap: f64 },
    #[error(
        "runs {parent} and {child} at {variable}: best permutation mismatch {best:e} is within tolerance of {second:e}"
    )]
    AmbiguousPermutation { parent: usize, child: usize, variable: VertexId, best: f64, second: f64 },
    #[error("no run covers {vertex} with parent mask {mask}")]
    MissingCoverage { vertex: VertexId, mask: usize },
    #[error("unzipping {vertex} (mask {mask}) from run {run} hit a zero denominator")]
    ZeroDenominator { vertex: VertexId, mask: usize, run: usize },
    #[error("conditioning event of run {run} has zero probability under source {source_index}")]
    ZeroConditioningProbability { run: usize, source_index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Minimum gap between sources on an alignment row.
    pub sep_tol: f64,
    /// Independent vertices per oracle call; only used for the global bound.
    pub n_mp: usize,
}

impl SolveOptions {
    pub fn exact(n_mp: usize) -> Self {
        SolveOptions { sep_tol: 1e-6, n_mp }
    }

    pub fn empirical(n_mp: usize) -> Self {
        SolveOptions { sep_tol: 1e-2, n_mp }
    }
}

/// Oracle outputs relabeled into one global source order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedOutputs {
    pub outputs: Vec<OracleOutput>,
    /// `outputs[r]` column `u` is raw column `sigmas[r][u]`.
    pub sigmas: Vec<Vec<usize>>,
    pub steps: Vec<AlignmentStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStep {
    pub parent: usize,
    pub child: usize,
    pub variable: VertexId,
    /// Max-abs disagreement on the alignment row after relabeling.
    pub mismatch: f64,
}

pub fn align(coll: &RunCollection, outputs: &[OracleOutput], sep_tol: f64) -> Result<AlignedOutputs, RecoveryError> {
    let k = outputs.first().map_or(1, OracleOutput::k);
    let identity: Vec<usize> = (0..k).collect();
    let mut sigmas = vec![identity.clone(); outputs.len()];
    let mut aligned = outputs.to_vec();
    if k == 1 || outputs.len() <= 1 {
        return Ok(AlignedOutputs { outputs: aligned, sigmas, steps: Vec::new() });
    }
    if !coll.is_spanning() {
        return Err(RecoveryError::NoAlignmentTree { runs: coll.len() });
    }
    let runs = coll.runs();
    let mut steps = Vec::with_capacity(coll.tree().len());
    for e in coll.tree() {
        let mut last_err = None;
        let mut done = false;
        for x in &e.candidates {
            let rp = &aligned[e.parent].m[runs[e.parent].row_of(x).expect("candidate in parent")];
            let rc = &outputs[e.child].m[runs[e.child].row_of(x).expect("candidate in child")];
            let gap = min_pairwise_gap(rp).min(min_pairwise_gap(rc));
            if gap < sep_tol {
                last_err = Some(RecoveryError::NotSeparated { parent: e.parent, child: e.child, variable: x, gap });
                continue;
            }
            match best_permutation(rp, rc, sep_tol) {
                Ok((sigma, mismatch)) => {
                    aligned[e.child] = outputs[e.child].select_columns(&sigma);
                    sigmas[e.child] = sigma;
                    steps.push(AlignmentStep { parent: e.parent, child: e.child, variable: x, mismatch });
                    done = true;
                    break;
                }
                Err((best, second)) => {
                    last_err = Some(RecoveryError::AmbiguousPermutation {
                        parent: e.parent,
                        child: e.child,
                        variable: x,
                        best,
                        second,
                    });
                }
            }
        }
        if !done {
            return Err(last_err.expect("every tree edge has a candidate"));
        }
    }
    Ok(AlignedOutputs { outputs: aligned, sigmas, steps })
}

/// `sigma` minimizing `max_u |target[u] - row[sigma[u]]|`, and that
/// mismatch. Fails with `(best, second)` when the runner-up is within
/// `sep_tol / 2` of the best.
fn best_permutation(target: &[f64], row: &[f64], sep_tol: f64) -> Result<(Vec<usize>, f64), (f64, f64)> {
    let cost = |p: &[usize]| target.iter().zip(p).map(|(t, &j)| (t - row[j]).abs()).fold(0.0, f64::max);
    let k = target.len();
    if k > EXHAUSTIVE_K {
        let p = perm::rank_matching(target, row);
        let c = cost(&p);
        return Ok((p, c));
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut second = f64::INFINITY;
    for p in perm::all_permutations(k) {
        let c = cost(&p);
        if c < best.0 {
            second = best.0;
            best = (c, p);
        } else if c < second {
            second = c;
        }
    }
    if second - best.0 < sep_tol / 2.0 {
        return Err((best.0, second));
    }
    Ok((best.1, best.0))
}

/// Where a recovered entry came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSource {
    pub vertex: VertexId,
    pub mask: usize,
    pub run: usize,
    pub bottom: bool,
    /// Unzipping depth: 0 for bottom occurrences, otherwise one more than
    /// the deepest child entry used.
    pub level: usize,
}

/// Chooses the supplying occurrence and unzipping level of every
/// `(vertex, mask)`.
pub fn provenance(g: &Dag, coll: &RunCollection) -> Result<Vec<Vec<ParamSource>>, RecoveryError> {
    let plan = CoveragePlan::new(g, coll);
    let mut out: Vec<Vec<Option<ParamSource>>> = g.vertices().map(|v| vec![None; plan.masks(v)]).collect();
    for &v in g.topological_order().iter().rev() {
        for mask in 0..plan.masks(v) {
            let occ = plan.provider(v, mask).ok_or(RecoveryError::MissingCoverage { vertex: v, mask })?;
            let level = if occ.bottom {
                0
            } else {
                let run = &coll.runs()[occ.run];
                let mut deepest = 0;
                for c in g.children(v).expect("valid vertex") {
                    for y in 0..=1u8 {
                        let m = child_mask(g, run.assignment(), c, v, y);
                        let src = out[c.0][m].as_ref().expect("children are processed first");
                        deepest = deepest.max(src.level);
                    }
                }
                deepest + 1
            };
            out[v.0][mask] = Some(ParamSource { vertex: v, mask, run: occ.run, bottom: occ.bottom, level });
        }
    }
    Ok(out.into_iter().map(|row| row.into_iter().map(|p| p.expect("filled")).collect()).collect())
}

/// Mask of `Pa(c)` under `a` with `v` overridden to `y`.
fn child_mask(g: &Dag, a: &Assignment, c: VertexId, v: VertexId, y: u8) -> usize {
    let mut m = 0;
    for (i, p) in g.pa(c).iter().enumerate() {
        let b = if p == v { y } else { a.get(p).expect("co-parents are conditioned") };
        m |= (b as usize) << i;
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unzipped {
    /// `tables[u][v][mask] = P̃_u(v = 1 | mask)`.
    pub tables: Vec<Vec<Vec<f64>>>,
    pub sources: Vec<Vec<ParamSource>>,
    /// Per `(vertex, mask)`: largest disagreement between the chosen
    /// occurrence and any other covering occurrence.
    pub cross_check: Vec<Vec<f64>>,
}

pub fn unzip(g: &Dag, coll: &RunCollection, aligned: &AlignedOutputs) -> Result<Unzipped, RecoveryError> {
    let k = aligned.outputs.first().map_or(1, OracleOutput::k);
    let sources = provenance(g, coll)?;
    let plan = CoveragePlan::new(g, coll);
    let mut tables: Vec<Vec<Vec<f64>>> = vec![g.vertices().map(|v| vec![f64::NAN; 1 << g.pa(v).len()]).collect(); k];
    let mut cross_check: Vec<Vec<f64>> = g.vertices().map(|v| vec![0.0; 1 << g.pa(v).len()]).collect();
    for &v in g.topological_order().iter().rev() {
        for mask in 0..plan.masks(v) {
            let chosen = &sources[v.0][mask];
            let values = occurrence_values(g, coll, aligned, &tables, v, mask, chosen.run, chosen.bottom)?;
            let mut disagreement = 0.0f64;
            for occ in plan.occurrences(v, mask) {
                if occ.run == chosen.run {
                    continue;
                }
                let Occurrence { run, bottom } = *occ;
                if let Ok(other) = occurrence_values(g, coll, aligned, &tables, v, mask, run, bottom) {
                    for (a, b) in values.iter().zip(&other) {
                        disagreement = disagreement.max((a - b).abs());
                    }
                }
            }
            cross_check[v.0][mask] = disagreement;
            for (u, p) in values.into_iter().enumerate() {
                tables[u][v.0][mask] = p;
            }
        }
    }
    Ok(Unzipped { tables, sources, cross_check })
}

#[allow(clippy::too_many_arguments)]
fn occurrence_values(
    g: &Dag,
    coll: &RunCollection,
    aligned: &AlignedOutputs,
    tables: &[Vec<Vec<f64>>],
    v: VertexId,
    mask: usize,
    run_idx: usize,
    bottom: bool,
) -> Result<Vec<f64>, RecoveryError> {
    let run = &coll.runs()[run_idx];
    let row = &aligned.outputs[run_idx].m[run.row_of(v).expect("occurrence is independent")];
    if bottom {
        return Ok(row.clone());
    }
    let a = run.assignment();
    let mut out = Vec::with_capacity(row.len());
    for (u, &p1) in row.iter().enumerate() {
        // P̃_u(ch | top, y) for y = 0, 1.
        let mut ch = [1.0f64; 2];
        for c in g.ch(v) {
            let value = a.get(c).expect("children of a non-bottom vertex are conditioned");
            for y in 0..=1u8 {
                let p = tables[u][c.0][child_mask(g, a, c, v, y)];
                ch[y as usize] *= if value == 1 { p } else { 1.0 - p };
            }
        }
        let num = p1 * ch[0];
        let den = num + (1.0 - p1) * ch[1];
        if !(den > DENOMINATOR_FLOOR) {
            return Err(RecoveryError::ZeroDenominator { vertex: v, mask, run: run_idx });
        }
        out.push(num / den);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecovery {
    pub weights: Vec<f64>,
    pub run: usize,
    /// `|Σ_u P̃(u) - 1|` before renormalizing.
    pub residual: f64,
}

/// `P(u) = P(u | mcond) P(mcond) / P_u(mcond)` on the root run, with
/// `P_u(mcond)` evaluated on the recovered CPTs and `P(mcond)` supplied by
/// the oracle.
pub fn recover_weights(
    g: &Dag,
    coll: &RunCollection,
    aligned: &AlignedOutputs,
    tables: &[Vec<Vec<f64>>],
    oracle: &dyn MixProdOracle,
) -> Result<WeightRecovery, RecoveryError> {
    let k = tables.len();
    let root = coll.root();
    let pi = &aligned.outputs[root].pi;
    let mcond = coll.runs()[root].assignment();
    if mcond.is_empty() {
        return Ok(WeightRecovery { weights: pi.clone(), run: root, residual: (pi.iter().sum::<f64>() - 1.0).abs() });
    }
    let cpts_only = MixtureModel::new(g.clone(), tables.to_vec(), vec![1.0 / k as f64; k])?;
    let observed = oracle.event_probability(mcond).map_err(|source| RecoveryError::Oracle { run: root, source })?;
    let mut raw = Vec::with_capacity(k);
    for (u, &p) in pi.iter().enumerate().take(k) {
        let pu = cpts_only.event_probability(u, mcond)?;
        if pu < DENOMINATOR_FLOOR {
            return Err(RecoveryError::ZeroConditioningProbability { run: root, source_index: u });
        }
        raw.push(p * observed / pu);
    }
    let total: f64 = raw.iter().sum();
    if !(total > DENOMINATOR_FLOOR) {
        return Err(RecoveryError::ZeroConditioningProbability { run: root, source_index: 0 });
    }
    Ok(WeightRecovery { weights: raw.iter().map(|w| w / total).collect(), run: root, residual: (total - 1.0).abs() })
}

/// Relative-error multipliers: a parameter at level `ℓ` is within
/// `(6(Δ+1))^ℓ ε` of the truth, weights within `5Δ² ε`, all parameters
/// within `(6(Δ+1))^{3 n_mp} ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundLedger {
    pub delta: usize,
    pub eps: f64,
    pub params: Vec<ParamBound>,
    pub global_param_bound: f64,
    pub weight_bound: f64,
    /// The weight bound assumes the root conditioning set has fewer than
    /// `2Δ²` vertices.
    pub weight_hypothesis_met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBound {
    pub vertex: VertexId,
    pub mask: usize,
    pub level: usize,
    pub bound: f64,
}

impl BoundLedger {
    pub fn param(&self, v: VertexId, mask: usize) -> Option<&ParamBound> {
        self.params.iter().find(|p| p.vertex == v && p.mask == mask)
    }
}

pub fn level_factor(delta: usize, level: usize) -> f64 {
    (6.0 * (delta as f64 + 1.0)).powi(level as i32)
}

pub fn error_bound(g: &Dag, coll: &RunCollection, n_mp: usize, eps: f64) -> Result<BoundLedger, RecoveryError> {
    let delta = g.max_degree();
    let sources = provenance(g, coll)?;
    let params = sources
        .iter()
        .flatten()
        .map(|s| ParamBound {
            vertex: s.vertex,
            mask: s.mask,
            level: s.level,
            bound: level_factor(delta, s.level) * eps,
        })
        .collect();
    let root_c = coll.runs().get(coll.root()).map_or(0, |r| r.conditioning().len());
    Ok(BoundLedger {
        delta,
        eps,
        params,
        global_param_bound: level_factor(delta, 3 * n_mp) * eps,
        weight_bound: 5.0 * (delta * delta) as f64 * eps,
        weight_hypothesis_met: root_c < 2 * delta * delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub runs: usize,
    pub delta: usize,
    pub n_mp: usize,
    pub params: Vec<ParamDiagnostic>,
    pub weights: WeightDiagnostic,
    pub alignment: Vec<AlignmentStep>,
    /// Runs whose oracle reported non-convergence.
    pub unconverged_runs: Vec<usize>,
    pub coverage_gaps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub vertex: VertexId,
    pub mask: usize,
    pub run: usize,
    pub encoding: String,
    pub bottom: bool,
    pub level: usize,
    /// `(6(Δ+1))^level`; multiply by the oracle's relative error.
    pub bound_factor: f64,
    pub cross_check: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostic {
    pub run: usize,
    pub conditioning_size: usize,
    pub residual: f64,
    /// `5Δ²`.
    pub bound_factor: f64,
    pub hypothesis_met: bool,
}

#[derive(Debug, Clone)]
pub struct RecoveredModel {
    pub model: MixtureModel,
    pub diagnostics: Diagnostics,
}

impl RecoveredModel {
    /// Per-parameter and weight bounds for an oracle with relative error `eps`.
    pub fn bound_ledger(&self, eps: f64) -> BoundLedger {
        let d = &self.diagnostics;
        BoundLedger {
            delta: d.delta,
            eps,
            params: d
                .params
                .iter()
                .map(|p| ParamBound { vertex: p.vertex, mask: p.mask, level: p.level, bound: p.bound_factor * eps })
                .collect(),
            global_param_bound: level_factor(d.delta, 3 * d.n_mp) * eps,
            weight_bound: d.weights.bound_factor * eps,
            weight_hypothesis_met: d.weights.hypothesis_met,
        }
    }
}

/// Calls the oracle on every run (in parallel on the current rayon pool).
/// Results come back in collection order; the first failing run in that
/// order is reported.
pub fn collect_outputs(
    coll: &RunCollection,
    oracle: &dyn MixProdOracle,
    k: usize,
) -> Result<Vec<OracleOutput>, RecoveryError> {
    let results: Vec<Result<OracleOutput, OracleError>> =
        coll.runs().par_iter().enumerate().map(|(index, run)| oracle.solve(OracleRequest { run, index }, k)).collect();
    let mut outputs = Vec::with_capacity(results.len());
    for (run, r) in results.into_iter().enumerate() {
        let out = r.map_err(|source| RecoveryError::Oracle { run, source })?;
        let rows = coll.runs()[run].independent().len();
        if out.m.len() != rows || out.pi.len() != k || out.m.iter().any(|row| row.len() != k) {
            return Err(RecoveryError::BadOutput {
                run,
                reason: format!("expected {rows} rows of {k} columns and {k} weights"),
            });
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// The whole pipeline: oracle calls, alignment, unzipping, weights.
pub fn solve_mixbnd(
    g: &Dag,
    coll: &RunCollection,
    oracle: &dyn MixProdOracle,
    k: usize,
    options: &SolveOptions,
) -> Result<RecoveredModel, RecoveryError> {
    let outputs = collect_outputs(coll, oracle, k)?;
    let unconverged_runs = outputs.iter().enumerate().filter(|(_, o)| !o.converged).map(|(i, _)| i).collect();
    let aligned = align(coll, &outputs, options.sep_tol)?;
    let unzipped = unzip(g, coll, &aligned)?;
    let weights = recover_weights(g, coll, &aligned, &unzipped.tables, oracle)?;
    let model = MixtureModel::new(g.clone(), unzipped.tables, weights.weights.clone())?;

    let delta = g.max_degree();
    let params = unzipped
        .sources
        .iter()
        .flatten()
        .map(|s| ParamDiagnostic {
            vertex: s.vertex,
            mask: s.mask,
            run: s.run,
            encoding: coll.runs()[s.run].encode(),
            bottom: s.bottom,
            level: s.level,
            bound_factor: level_factor(delta, s.level),
            cross_check: unzipped.cross_check[s.vertex.0][s.mask],
        })
        .collect();
    let root_c = coll.runs()[coll.root()].conditioning().len();
    let diagnostics = Diagnostics {
        runs: coll.len(),
        delta,
        n_mp: options.n_mp,
        params,
        weights: WeightDiagnostic {
            run: weights.run,
            conditioning_size: root_c,
            residual: weights.residual,
            bound_factor: 5.0 * (delta * delta) as f64,
            hypothesis_met: root_c < 2 * delta * delta,
        },
        alignment: aligned.steps,
        unconverged_runs,
        coverage_gaps: 0,
    };
    Ok(RecoveredModel { model, diagnostics })
}
