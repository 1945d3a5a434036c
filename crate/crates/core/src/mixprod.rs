//! The mixture-of-products oracle boundary.
//!
//! Conditioning on a run's event turns the mixture into a mixture of
//! product distributions over the run's independent vertices. An oracle
//! returns, for every independent vertex and source, `P(X = 1 | u, mcond)`
//! and the source weights `P(u | mcond)`, with the sources in an arbitrary
//! order that may differ from run to run.
//!
//! Three backends are provided: exact enumeration on a known model (with
//! the per-run label order scrambled), the same with bounded relative
//! noise, and EM fitted to post-selected samples.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{clamp_probability, Assignment, MixtureModel, ModelError, SampleSet};
use crate::runs::Run;
use crate::split_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("run {encoding}: {source}")]
    Model {
        encoding: String,
        #[source]
        source: ModelError,
    },
    #[error("run {encoding} is ill-formed")]
    IllFormedRun { encoding: String },
    #[error("run {encoding}: {found} samples match the conditioning event, {needed} needed")]
    InsufficientSamples { encoding: String, found: usize, needed: usize },
    #[error("run {encoding}: {reason}")]
    OracleFailure { encoding: String, reason: String },
}

/// `m[i][u] = P(X_i = 1 | u, mcond)` with rows in ascending vertex order of
/// the run's independent set, and `pi[u] = P(u | mcond)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub m: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    /// False when an iterative backend stopped on its iteration cap.
    pub converged: bool,
}

impl OracleOutput {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// Output whose column `j` is this output's column `sigma[j]`.
    pub fn select_columns(&self, sigma: &[usize]) -> OracleOutput {
        OracleOutput {
            m: self.m.iter().map(|row| sigma.iter().map(|&j| row[j]).collect()).collect(),
            pi: sigma.iter().map(|&j| self.pi[j]).collect(),
            converged: self.converged,
        }
    }
}

/// One oracle call: the run and its position in the collection, which
/// backends use to derive per-run randomness.
#[derive(Debug, Clone, Copy)]
pub struct OracleRequest<'a> {
    pub run: &'a Run,
    pub index: usize,
}

pub trait MixProdOracle: Sync {
    fn solve(&self, req: OracleRequest<'_>, k: usize) -> Result<OracleOutput, OracleError>;

    /// Observable probability of a conditioning event, `P(mcond)`.
    fn event_probability(&self, event: &Assignment) -> Result<f64, OracleError>;
}

fn model_err(run: &Run) -> impl FnOnce(ModelError) -> OracleError + '_ {
    move |source| OracleError::Model { encoding: run.encode(), source }
}

fn require_well_formed(run: &Run) -> Result<(), OracleError> {
    if run.is_well_formed() {
        Ok(())
    } else {
        Err(OracleError::IllFormedRun { encoding: run.encode() })
    }
}

/// Exact outputs from a known model, columns shuffled per run.
#[derive(Debug, Clone)]
pub struct ExactBackend<'a> {
    model: &'a MixtureModel,
    scramble_seed: Option<u64>,
}

impl<'a> ExactBackend<'a> {
    /// `scramble_seed = None` keeps the true source order in every run.
    pub fn new(model: &'a MixtureModel, scramble_seed: Option<u64>) -> Self {
        ExactBackend { model, scramble_seed }
    }

    pub fn model(&self) -> &MixtureModel {
        self.model
    }

    /// Column order applied to run `index`: output column `j` holds true
    /// source `scramble(index)[j]`.
    pub fn scramble(&self, index: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.model.k()).collect();
        if let Some(seed) = self.scramble_seed {
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed(seed, index as u64)));
        }
        p
    }

    /// Output in the true source order.
    pub fn truth(&self, run: &Run) -> Result<OracleOutput, OracleError> {
        require_well_formed(run)?;
        let m = self.model;
        let mcond = run.assignment();
        let pi = m.posterior(mcond).map_err(model_err(run))?;
        let mut rows = Vec::with_capacity(run.independent().len());
        for x in run.independent() {
            let target = Assignment::empty(m.n()).with(x, 1);
            let row = (0..m.k())
                .map(|u| m.conditional(u, &target, mcond))
                .collect::<Result<Vec<_>, _>>()
                .map_err(model_err(run))?;
            rows.push(row);
        }
        Ok(OracleOutput { m: rows, pi, converged: true })
    }
}

impl MixProdOracle for ExactBackend<'_> {
    fn solve(&self, req: OracleRequest<'_>, k: usize) -> Result<OracleOutput, OracleError> {
        if k != self.model.k() {
            return Err(OracleError::OracleFailure {
                encoding: req.run.encode(),
                reason: format!("asked for {k} sources, model has {}", self.model.k()),
            });
        }
        Ok(self.truth(req.run)?.select_columns(&self.scramble(req.index)))
    }

    fn event_probability(&self, event: &Assignment) -> Result<f64, OracleError> {
        self.model
            .mixture_event_probability(event)
            .map_err(|source| OracleError::Model { encoding: String::new(), source })
    }
}

/// Exact outputs perturbed so that every entry `p` and its complement
/// `1 - p` carry relative error at most `eps`, and every weight relative
/// error at most `eps` before renormalization.
#[derive(Debug, Clone)]
pub struct NoisyBackend<'a> {
    exact: ExactBackend<'a>,
    eps: f64,
    seed: u64,
}

impl<'a> NoisyBackend<'a> {
    pub fn new(model: &'a MixtureModel, eps: f64, scramble_seed: Option<u64>, noise_seed: u64) -> Self {
        assert!((0.0..1.0).contains(&eps), "eps must lie in [0, 1)");
        NoisyBackend { exact: ExactBackend::new(model, scramble_seed), eps, seed: noise_seed }
    }

    pub fn exact(&self) -> &ExactBackend<'a> {
        &self.exact
    }

    /// Noisy output in the true source order.
    pub fn perturbed_truth(&self, req: OracleRequest<'_>) -> Result<OracleOutput, OracleError> {
        let mut out = self.exact.truth(req.run)?;
        if self.eps == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(self.seed, req.index as u64));
        for row in &mut out.m {
            for p in row.iter_mut() {
                let delta = rng.gen_range(-self.eps..=self.eps);
                // Shrinking the step near 1 keeps the complement's error in bound.
                *p = clamp_probability(*p * (1.0 + delta * ((1.0 - *p) / *p).min(1.0)));
            }
        }
        for w in &mut out.pi {
            *w *= 1.0 + rng.gen_range(-self.eps..=self.eps);
        }
        let total: f64 = out.pi.iter().sum();
        out.pi.iter_mut().for_each(|w| *w /= total);
        Ok(out)
    }
}

impl MixProdOracle for NoisyBackend<'_> {
    fn solve(&self, req: OracleRequest<'_>, k: usize) -> Result<OracleOutput, OracleError> {
        if k != self.exact.model.k() {
            return self.exact.solve(req, k);
        }
        Ok(self.perturbed_truth(req)?.select_columns(&self.exact.scramble(req.index)))
    }

    fn event_probability(&self, event: &Assignment) -> Result<f64, OracleError> {
        self.exact.event_probability(event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once the per-row log-likelihood gain drops below this.
    pub tol: f64,
    /// Minimum post-selected rows; `None` means `200 k |I|`.
    pub min_postselect: Option<usize>,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { restarts: 16, max_iters: 200_000, tol: 1e-14, min_postselect: None, seed: 0 }
    }
}

/// EM for a product-of-Bernoullis mixture on samples post-selected on the
/// run's conditioning event.
#[derive(Debug, Clone)]
pub struct EmBackend<'a> {
    samples: &'a SampleSet,
    config: EmConfig,
}

impl<'a> EmBackend<'a> {
    pub fn new(samples: &'a SampleSet, config: EmConfig) -> Self {
        EmBackend { samples, config }
    }

    /// Distinct patterns on the run's independent vertices among rows that
    /// match the conditioning event, with their counts, in pattern order.
    pub fn postselect(&self, run: &Run) -> Vec<(u64, f64)> {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        let cols: Vec<usize> = run.independent().iter().map(|v| v.0).collect();
        for row in &self.samples.rows {
            if SampleSet::matches(row, run.assignment()) {
                let mut bits = 0u64;
                for (i, &c) in cols.iter().enumerate() {
                    bits |= (row[c] as u64) << i;
                }
                *counts.entry(bits).or_default() += 1;
            }
        }
        counts.into_iter().map(|(b, c)| (b, c as f64)).collect()
    }
}

impl MixProdOracle for EmBackend<'_> {
    fn solve(&self, req: OracleRequest<'_>, k: usize) -> Result<OracleOutput, OracleError> {
        let run = req.run;
        require_well_formed(run)?;
        let d = run.independent().len();
        if d > 63 {
            return Err(OracleError::OracleFailure {
                encoding: run.encode(),
                reason: "more than 63 independent vertices".into(),
            });
        }
        let patterns = self.postselect(run);
        let found: usize = patterns.iter().map(|p| p.1 as usize).sum();
        let needed = self.config.min_postselect.unwrap_or(200 * k * d).max(1);
        if found < needed {
            return Err(OracleError::InsufficientSamples { encoding: run.encode(), found, needed });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(self.config.seed, req.index as u64));
        let mut best: Option<EmFit> = None;
        for _ in 0..self.config.restarts.max(1) {
            let (theta, pi) = em_init(&patterns, d, k, &mut rng);
            let fit = em_fit(&patterns, d, theta, pi, self.config.max_iters, self.config.tol);
            if best.as_ref().is_none_or(|b| fit.loglik() > b.loglik()) {
                best = Some(fit);
            }
        }
        let fit = best.expect("at least one restart");
        Ok(OracleOutput {
            m: fit.theta.iter().map(|r| r.iter().map(|&p| clamp_probability(p)).collect()).collect(),
            pi: fit.pi,
            converged: fit.converged,
        })
    }

    fn event_probability(&self, event: &Assignment) -> Result<f64, OracleError> {
        self.samples
            .frequency(event)
            .ok_or(OracleError::OracleFailure { encoding: String::new(), reason: "no samples".into() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    /// `theta[i][u] = P(X_i = 1 | u)`.
    pub theta: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    /// Log-likelihood before the first update and after every update.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

impl EmFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// Means start at `k` weighted-random observed patterns pulled toward 1/2
/// and jittered; weights start uniform.
pub fn em_init<R: Rng>(patterns: &[(u64, f64)], d: usize, k: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<f64>) {
    let weights: Vec<f64> = patterns.iter().map(|p| p.1).collect();
    let mut theta = vec![vec![0.5; k]; d];
    for u in 0..k {
        let bits = patterns[crate::model::draw_index(&weights, rng)].0;
        for (i, row) in theta.iter_mut().enumerate() {
            let b = ((bits >> i) & 1) as f64;
            row[u] = 0.25 + 0.5 * b + rng.gen_range(-0.15..0.15);
        }
    }
    (theta, vec![1.0 / k as f64; k])
}

const THETA_FLOOR: f64 = 1e-12;

/// Weighted EM on distinct bit patterns over `d` variables.
pub fn em_fit(
    patterns: &[(u64, f64)],
    d: usize,
    mut theta: Vec<Vec<f64>>,
    mut pi: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> EmFit {
    let k = pi.len();
    let total: f64 = patterns.iter().map(|p| p.1).sum();
    let mut resp = vec![vec![0.0; k]; patterns.len()];
    let mut trace = vec![e_step(patterns, d, &theta, &pi, &mut resp)];
    let mut converged = false;
    for _ in 0..max_iters {
        let mut mass = vec![0.0; k];
        let mut ones = vec![vec![0.0; k]; d];
        for ((bits, w), r) in patterns.iter().zip(&resp) {
            for u in 0..k {
                let m = w * r[u];
                mass[u] += m;
                for (i, row) in ones.iter_mut().enumerate() {
                    if (bits >> i) & 1 == 1 {
                        row[u] += m;
                    }
                }
            }
        }
        for u in 0..k {
            pi[u] = mass[u] / total;
            for i in 0..d {
                theta[i][u] =
                    if mass[u] > 0.0 { (ones[i][u] / mass[u]).clamp(THETA_FLOOR, 1.0 - THETA_FLOOR) } else { 0.5 };
            }
        }
        let ll = e_step(patterns, d, &theta, &pi, &mut resp);
        let gain = ll - trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        trace.push(ll);
        if gain.abs() / total.max(1.0) < tol {
            converged = true;
            break;
        }
    }
    EmFit { theta, pi, loglik_trace: trace, converged }
}

/// Fills responsibilities and returns the log-likelihood.
fn e_step(patterns: &[(u64, f64)], d: usize, theta: &[Vec<f64>], pi: &[f64], resp: &mut [Vec<f64>]) -> f64 {
    let k = pi.len();
    let mut ll = 0.0;
    let mut logp = vec![0.0; k];
    for ((bits, w), r) in patterns.iter().zip(resp.iter_mut()) {
        for u in 0..k {
            let mut lp = pi[u].ln();
            for (i, row) in theta.iter().enumerate().take(d) {
                lp += if (bits >> i) & 1 == 1 { row[u].ln() } else { (1.0 - row[u]).ln() };
            }
            logp[u] = lp;
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logp.iter().map(|lp| (lp - max).exp()).sum();
        for u in 0..k {
            r[u] = (logp[u] - max).exp() / sum;
        }
        ll += w * (max + sum.ln());
    }
    ll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{vset, Dag};
    use crate::model::random_separated_model;
    use crate::perm::all_permutations;

    fn example13() -> Dag {
        let e = [(1, 3), (2, 3), (2, 4), (3, 5), (4, 6), (5, 7), (6, 8), (7, 9), (9, 10), (9, 11), (11, 12), (12, 13)];
        Dag::new(13, &e.iter().map(|&(a, b)| (a - 1, b - 1)).collect::<Vec<_>>()).unwrap()
    }

    fn central_run(g: &Dag) -> Run {
        Run::new(g, vset([0, 5, 8, 12]), &Assignment::from_bits(&[0; 13])).unwrap()
    }

    #[test]
    fn single_source_is_the_conditional() {
        let g = Dag::chain(3);
        let m = random_separated_model(&g, 1, 0.0, 2).unwrap();
        let run = Run::parse(&g, "*0*").unwrap();
        let out = ExactBackend::new(&m, Some(4)).solve(OracleRequest { run: &run, index: 0 }, 1).unwrap();
        assert_eq!(out.pi, vec![1.0]);
        let given = run.assignment();
        let want = m.conditional(0, &Assignment::empty(3).with(crate::VertexId(2), 1), given).unwrap();
        assert!((out.m[1][0] - want).abs() < 1e-15);
        // With the parent fixed the bottom output is the CPT entry itself.
        assert!((out.m[1][0] - m.cpt(0, crate::VertexId(2)).p1(0)).abs() < 1e-12);
    }

    #[test]
    fn exact_backend_is_deterministic_and_honest() {
        let g = example13();
        let m = random_separated_model(&g, 2, 0.1, 7).unwrap();
        let run = central_run(&g);
        let be = ExactBackend::new(&m, Some(99));
        let a = be.solve(OracleRequest { run: &run, index: 3 }, 2).unwrap();
        let b = be.solve(OracleRequest { run: &run, index: 3 }, 2).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        // Some column permutation reproduces enumeration.
        let ok = all_permutations(2).into_iter().any(|p| {
            let t = be.truth(&run).unwrap().select_columns(&p);
            t.m.iter().flatten().zip(a.m.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-12)
        });
        assert!(ok);

        // Law of total probability on every row.
        let truth = be.truth(&run).unwrap();
        for (row, x) in truth.m.iter().zip(run.independent().iter()) {
            let mix: f64 = row.iter().zip(&truth.pi).map(|(p, w)| p * w).sum();
            let want = m.mixture_conditional(&Assignment::empty(13).with(x, 1), run.assignment()).unwrap();
            assert!((mix - want).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_bounds() {
        let g = example13();
        let m = random_separated_model(&g, 2, 0.1, 7).unwrap();
        let run = central_run(&g);
        let req = OracleRequest { run: &run, index: 0 };
        let zero = NoisyBackend::new(&m, 0.0, Some(1), 5);
        assert_eq!(zero.solve(req, 2).unwrap(), ExactBackend::new(&m, Some(1)).solve(req, 2).unwrap());

        let eps = 1e-6;
        let noisy = NoisyBackend::new(&m, eps, None, 5).perturbed_truth(req).unwrap();
        let exact = ExactBackend::new(&m, None).truth(&run).unwrap();
        for (a, b) in noisy.m.iter().flatten().zip(exact.m.iter().flatten()) {
            assert!((a - b).abs() / b <= eps * (1.0 + 1e-9));
            assert!((a - b).abs() / (1.0 - b) <= eps * (1.0 + 1e-9));
        }
    }

    #[test]
    fn em_single_source_is_frequency() {
        let g = Dag::empty(3);
        let m = MixtureModel::new(g.clone(), vec![vec![vec![0.2], vec![0.5], vec![0.9]]], vec![1.0]).unwrap();
        let s = m.sample(4000, 1);
        let run = Run::parse(&g, "***").unwrap();
        let out = EmBackend::new(&s, EmConfig::default()).solve(OracleRequest { run: &run, index: 0 }, 1).unwrap();
        for i in 0..3 {
            let f = s.frequency(&Assignment::empty(3).with(crate::VertexId(i), 1)).unwrap();
            assert!((out.m[i][0] - f).abs() < 1e-9);
        }
    }

    #[test]
    fn em_recovers_separated_sources() {
        let g = Dag::empty(3);
        let m = MixtureModel::new(
            g.clone(),
            vec![vec![vec![0.1], vec![0.2], vec![0.85]], vec![vec![0.8], vec![0.9], vec![0.15]]],
            vec![0.4, 0.6],
        )
        .unwrap();
        let s = m.sample(100_000, 3);
        let run = Run::parse(&g, "***").unwrap();
        let out = EmBackend::new(&s, EmConfig { seed: 3, ..EmConfig::default() })
            .solve(OracleRequest { run: &run, index: 0 }, 2)
            .unwrap();
        let err = |p: &[usize]| {
            (0..3)
                .flat_map(|i| (0..2).map(move |u| (i, u)))
                .map(|(i, u)| (out.m[i][p[u]] - m.cpt(u, crate::VertexId(i)).p1(0)).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(&[0, 1]).min(err(&[1, 0])) < 0.02);
    }

    #[test]
    fn em_needs_samples() {
        let g = Dag::chain(2);
        let m = random_separated_model(&g, 2, 0.1, 1).unwrap();
        let s = m.sample(10, 1);
        let run = Run::parse(&g, "*-").unwrap();
        let err = EmBackend::new(&s, EmConfig::default()).solve(OracleRequest { run: &run, index: 0 }, 2);
        assert!(matches!(err, Err(OracleError::InsufficientSamples { found: 10, needed: 400, .. })));
        let none = SampleSet::new(2);
        let err = EmBackend::new(&none, EmConfig::default()).solve(OracleRequest { run: &run, index: 0 }, 2);
        assert!(matches!(err, Err(OracleError::InsufficientSamples { found: 0, .. })));
    }

    #[test]
    fn em_likelihood_never_decreases() {
        let g = Dag::empty(4);
        let m = random_separated_model(&g, 3, 0.1, 8).unwrap();
        let s = m.sample(5000, 8);
        let run = Run::parse(&g, "****").unwrap();
        let be = EmBackend::new(&s, EmConfig::default());
        let patterns = be.postselect(&run);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let (theta, pi) = em_init(&patterns, 4, 3, &mut rng);
            let fit = em_fit(&patterns, 4, theta, pi, 300, 0.0);
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
    }
}
