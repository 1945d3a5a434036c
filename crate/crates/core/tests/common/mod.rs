#![allow(dead_code)]

use mixbnd::model::Assignment;
use mixbnd::{Dag, MixtureModel, Run, VertexId, VertexSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random DAG on `n` vertices under a shuffled topological order, skeleton
/// degree at most `max_degree`, each candidate edge kept with probability `p`.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize, max_degree: usize, p: f64) -> Dag {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.shuffle(rng);
    let mut degree = vec![0; n];
    let mut edges = Vec::new();
    for (i, j) in pairs {
        let (a, b) = (order[i], order[j]);
        if degree[a] < max_degree && degree[b] < max_degree && rng.gen_bool(p) {
            degree[a] += 1;
            degree[b] += 1;
            edges.push((a, b));
        }
    }
    Dag::new(n, &edges).expect("edges follow a topological order")
}

/// Up to `count` well-formed runs with random independent sets of size at
/// most `max_i` and random conditioning values.
pub fn random_runs(g: &Dag, rng: &mut ChaCha8Rng, count: usize, max_i: usize) -> Vec<Run> {
    let mut runs = Vec::new();
    for _ in 0..count {
        let mut verts: Vec<VertexId> = g.vertices().collect();
        verts.shuffle(rng);
        let mut independent = VertexSet::new();
        for v in verts {
            if independent.len() < max_i
                && rng.gen_bool(0.6)
                && independent.iter().all(|x| !g.markov_boundary(x).unwrap().contains(v))
            {
                independent.insert(v);
            }
        }
        if independent.is_empty() {
            continue;
        }
        let bits: Vec<u8> = (0..g.n()).map(|_| rng.gen_range(0..=1)).collect();
        let run = Run::new(g, independent, &Assignment::from_bits(&bits)).unwrap();
        if run.is_well_formed() {
            runs.push(run);
        }
    }
    runs
}

/// Source `u` of `m` as a single-source model.
pub fn single_source(m: &MixtureModel, u: usize) -> MixtureModel {
    MixtureModel::new(m.dag().clone(), vec![m.tables()[u].clone()], vec![1.0]).unwrap()
}

/// Sum of `joint` over full assignments agreeing with `event`.
pub fn joint_mass(joint: &[f64], event: &Assignment) -> f64 {
    joint
        .iter()
        .enumerate()
        .filter(|(x, _)| event.iter().all(|(v, b)| ((x >> v.0) & 1) as u8 == b))
        .map(|(_, p)| p)
        .sum()
}

/// `P(v = 1 | parents = mask)` by summing the full joint.
pub fn brute_cpt(joint: &[f64], g: &Dag, v: VertexId, mask: usize) -> f64 {
    let n = g.n();
    let given =
        Assignment::from_pairs(n, g.parents(v).unwrap().iter().enumerate().map(|(i, p)| (p, ((mask >> i) & 1) as u8)));
    joint_mass(joint, &given.clone().with(v, 1)) / joint_mass(joint, &given)
}

/// The 13-vertex example network, 0-indexed.
pub fn example13() -> Dag {
    let e = [(1, 3), (2, 3), (2, 4), (3, 5), (4, 6), (5, 7), (6, 8), (7, 9), (9, 10), (9, 11), (11, 12), (12, 13)];
    Dag::new(13, &e.iter().map(|&(a, b)| (a - 1, b - 1)).collect::<Vec<_>>()).unwrap()
}

/// Total variation distance between two joints on the same space.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Two extra edges between vertices of skeleton degree below
/// `max_degree`, oriented along `g`'s topological order.
pub fn add_spurious_edges(g: &Dag, rng: &mut ChaCha8Rng, max_degree: usize) -> Option<Dag> {
    let n = g.n();
    let mut pos = vec![0; n];
    for (i, v) in g.topological_order().iter().enumerate() {
        pos[v.0] = i;
    }
    let mut degree: Vec<usize> =
        g.vertices().map(|v| g.parents(v).unwrap().len() + g.children(v).unwrap().len()).collect();
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| pos[a] < pos[b] && !g.children(VertexId(a)).unwrap().contains(VertexId(b)))
        .collect();
    candidates.shuffle(rng);
    let mut extra = Vec::new();
    for (a, b) in candidates {
        if extra.len() == 2 {
            break;
        }
        if degree[a] < max_degree && degree[b] < max_degree {
            degree[a] += 1;
            degree[b] += 1;
            extra.push((a, b));
        }
    }
    (extra.len() == 2).then(|| g.with_extra_edges(&extra).unwrap())
}
