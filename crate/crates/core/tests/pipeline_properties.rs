mod common;

use common::{add_spurious_edges, brute_cpt, example13, random_dag, random_runs, rng, single_source, total_variation};
use mixbnd::dag::DagError;
use mixbnd::mixprod::{MixProdOracle, OracleRequest};
use mixbnd::model::{compare_models, random_separated_model, Assignment};
use mixbnd::recovery::{collect_outputs, unzip, AlignedOutputs};
use mixbnd::run_builder::{build_generic, build_path, default_n_mp, generic_size_bound, BuildError};
use mixbnd::runs::{alignment_variables, default_depth_cap, is_good_collection, CoveragePlan};
use mixbnd::{solve_mixbnd, Dag, ExactBackend, Run, RunCollection, SolveOptions, VertexSet};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Within one source, the independent vertices of a well-formed run are
    /// mutually independent given its conditioning event, and a bottom
    /// depends on that event only through its parents.
    #[test]
    fn runs_separate_their_independent_sets(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let g = random_dag(&mut r, n, 3, 0.5);
        let m = random_separated_model(&g, 2, 0.05, seed).unwrap();
        for run in random_runs(&g, &mut r, 6, 3) {
            let c = run.assignment();
            let members: Vec<_> = run.independent().iter().collect();
            for u in 0..m.k() {
                for x in 0..(1usize << members.len()) {
                    let target = Assignment::from_pairs(
                        n,
                        members.iter().enumerate().map(|(i, &v)| (v, ((x >> i) & 1) as u8)),
                    );
                    let product: f64 = members
                        .iter()
                        .map(|&v| m.conditional(u, &target.restrict(&VertexSet::singleton(v)), c).unwrap())
                        .product();
                    prop_assert!((m.conditional(u, &target, c).unwrap() - product).abs() < 1e-10, "{run}");
                }
                for b in run.bottom() {
                    let one = Assignment::from_pairs(n, [(b, 1)]);
                    let pa = c.restrict(g.parents(b).unwrap());
                    let lhs = m.conditional(u, &one, c).unwrap();
                    prop_assert!((lhs - m.conditional(u, &one, &pa).unwrap()).abs() < 1e-10, "{run}");
                }
            }
        }
    }

    /// Alignment variables are symmetric and carry the same per-source
    /// marginal in both runs.
    #[test]
    fn alignment_variables_agree_across_runs(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let g = random_dag(&mut r, n, 3, 0.5);
        let m = random_separated_model(&g, 2, 0.05, seed).unwrap();
        let oracle = ExactBackend::new(&m, None);
        let runs = random_runs(&g, &mut r, 8, 3);
        for (i, a) in runs.iter().enumerate() {
            for b in &runs[i + 1..] {
                let av = alignment_variables(&g, a, b);
                prop_assert_eq!(&av, &alignment_variables(&g, b, a));
                if av.is_empty() {
                    continue;
                }
                let oa = oracle.solve(OracleRequest { run: a, index: 0 }, 2).unwrap();
                let ob = oracle.solve(OracleRequest { run: b, index: 0 }, 2).unwrap();
                for x in &av {
                    let (ra, rb) = (&oa.m[a.row_of(x).unwrap()], &ob.m[b.row_of(x).unwrap()]);
                    for u in 0..2 {
                        prop_assert!((ra[u] - rb[u]).abs() < 1e-10, "{a} {b} {x}");
                    }
                }
            }
        }
    }

    /// Unzipping exact outputs reproduces the conditionals of the full
    /// joint on every covered parameter, including those supplied by
    /// non-bottom occurrences.
    #[test]
    fn unzip_matches_enumeration(seed in any::<u64>(), n in 2usize..6, k in 1usize..3) {
        let mut r = rng(seed);
        let g = random_dag(&mut r, n, 2, 0.6);
        let m = random_separated_model(&g, k, 0.05, seed).unwrap();
        let runs = random_runs(&g, &mut r, 12, 3);
        prop_assume!(!runs.is_empty());
        let coll = RunCollection::unaligned(runs);
        let plan = CoveragePlan::new(&g, &coll);
        prop_assume!(g.vertices().all(|v| plan.covers(v)));
        let outputs = collect_outputs(&coll, &ExactBackend::new(&m, None), k).unwrap();
        let aligned = AlignedOutputs { sigmas: vec![(0..k).collect(); outputs.len()], outputs, steps: vec![] };
        let unzipped = unzip(&g, &coll, &aligned).unwrap();
        for u in 0..k {
            let joint = single_source(&m, u).full_joint().unwrap();
            for v in g.vertices() {
                for (mask, &p) in unzipped.tables[u][v.0].iter().enumerate() {
                    prop_assert!((p - brute_cpt(&joint, &g, v, mask)).abs() < 1e-9);
                }
            }
        }
        for row in &unzipped.cross_check {
            prop_assert!(row.iter().all(|&d| d < 1e-9));
        }
    }

    /// Relabeling the true sources relabels the recovered ones and nothing else.
    #[test]
    fn recovery_is_permutation_equivariant(seed in any::<u64>(), scramble in any::<u64>()) {
        let g = Dag::chain(8);
        let m = random_separated_model(&g, 2, 0.1, seed).unwrap();
        let coll = build_path(&g, 3).unwrap();
        let opts = SolveOptions::exact(3);
        let a = solve_mixbnd(&g, &coll, &ExactBackend::new(&m, Some(scramble)), 2, &opts).unwrap();
        let swapped = m.permute_sources(&[1, 0]);
        let b = solve_mixbnd(&g, &coll, &ExactBackend::new(&swapped, Some(scramble)), 2, &opts).unwrap();
        prop_assert!(compare_models(&a.model, &b.model).unwrap().max_abs() < 1e-9);
        prop_assert!(compare_models(&m, &a.model).unwrap().max_abs() < 1e-9);
    }

    /// Solving on a supergraph of the true graph still recovers the joint.
    #[test]
    fn supergraph_recovers_the_joint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_dag(&mut r, 8, 2, 0.15);
        let sup = add_spurious_edges(&g, &mut r, 3);
        prop_assume!(sup.is_some());
        let sup = sup.unwrap();
        let coll = build_generic(&sup, 3);
        prop_assume!(coll.is_ok());
        let m = random_separated_model(&g, 2, 0.1, seed).unwrap();
        let rec = solve_mixbnd(&sup, &coll.unwrap(), &ExactBackend::new(&m, Some(seed)), 2, &SolveOptions::exact(3)).unwrap();
        let tv = total_variation(&m.full_joint().unwrap(), &rec.model.full_joint().unwrap());
        prop_assert!(tv < 1e-6, "tv {tv}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// On large sparse graphs the generic construction is good whenever it
    /// returns, and it fails only when no set of centers exists at all.
    #[test]
    fn generic_collection_is_good(seed in any::<u64>(), delta in 1usize..4) {
        let n_mp = default_n_mp(2);
        let d = delta as i64;
        let n = (n_mp as i64 * (d.pow(4) - 2 * d.pow(3) + d + 1)).max(2 * n_mp as i64) as usize;
        let g = random_dag(&mut rng(seed), n, delta, 0.5);
        let coll = match build_generic(&g, n_mp) {
            Ok(c) => c,
            Err(BuildError::Dag(DagError::NotEnoughCenters { .. })) => {
                prop_assert!(!centers_exist(&g, n_mp, default_depth_cap(n_mp)));
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let report = is_good_collection(&g, &coll, n_mp, default_depth_cap(n_mp));
        prop_assert!(report.all_passed(), "{report:?}");
        prop_assert!(coll.len() <= generic_size_bound(&g, n_mp));
        for run in coll.runs() {
            prop_assert_eq!(&Run::parse(&g, &run.encode()).unwrap(), run);
        }
    }
}

/// Whether `count` vertices of depth at most `max_depth` have pairwise
/// disjoint closed Markov boundaries, by exhaustive search.
fn centers_exist(g: &Dag, count: usize, max_depth: usize) -> bool {
    let closed: Vec<Vec<bool>> = g
        .vertices()
        .map(|v| {
            let mut c = vec![false; g.n()];
            c[v.0] = true;
            for w in g.markov_boundary(v).unwrap() {
                c[w.0] = true;
            }
            c
        })
        .collect();
    let eligible: Vec<usize> = g.vertices().filter(|&v| g.depth(v).unwrap() <= max_depth).map(|v| v.0).collect();
    fn extend(closed: &[Vec<bool>], eligible: &[usize], used: &mut Vec<bool>, need: usize) -> bool {
        if need == 0 {
            return true;
        }
        for (i, &v) in eligible.iter().enumerate() {
            if closed[v].iter().zip(used.iter()).any(|(a, b)| *a && *b) {
                continue;
            }
            let saved = used.clone();
            for (u, &c) in used.iter_mut().zip(&closed[v]) {
                *u |= c;
            }
            if extend(closed, &eligible[i + 1..], used, need - 1) {
                return true;
            }
            *used = saved;
        }
        false
    }
    extend(&closed, &eligible, &mut vec![false; g.n()], count)
}

#[test]
fn generic_fails_only_without_centers() {
    // Degree 2 and n at the degree-based size bound, yet a vertex with two
    // co-parented children has a boundary of four, so three centers cannot fit.
    let g = Dag::new(9, &[(2, 0), (4, 3), (5, 2), (6, 3), (6, 5), (7, 0), (7, 1), (8, 1)]).unwrap();
    assert!(!centers_exist(&g, 3, default_depth_cap(3)));
    assert!(matches!(
        build_generic(&g, 3),
        Err(BuildError::Dag(DagError::NotEnoughCenters { found: 2, requested: 3 }))
    ));
}

#[test]
fn example13_generic_recovers_exactly() {
    let g = example13();
    let m = random_separated_model(&g, 2, 0.1, 1).unwrap();
    let coll = build_generic(&g, 3).unwrap();
    let rec = solve_mixbnd(&g, &coll, &ExactBackend::new(&m, Some(9)), 2, &SolveOptions::exact(3)).unwrap();
    assert!(compare_models(&m, &rec.model).unwrap().max_abs() < 1e-9);
    assert_eq!(rec.diagnostics.coverage_gaps, 0);
}
