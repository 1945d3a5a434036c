//! Small permutation helpers shared by alignment and evaluation.

/// All permutations of `0..k` in lexicographic order.
pub fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        if !next_permutation(&mut cur) {
            return out;
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Inverse of a permutation given as `p[i] = image of i`.
pub fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Matches `b` onto `a` by rank: the returned `p` has `b[p[u]]` paired with
/// `a[u]`. Optimal for the max-abs mismatch between two real vectors.
pub fn rank_matching(a: &[f64], b: &[f64]) -> Vec<usize> {
    let mut ia: Vec<usize> = (0..a.len()).collect();
    let mut ib: Vec<usize> = (0..b.len()).collect();
    ia.sort_by(|&x, &y| a[x].total_cmp(&a[y]));
    ib.sort_by(|&x, &y| b[x].total_cmp(&b[y]));
    let mut p = vec![0; a.len()];
    for (&x, &y) in ia.iter().zip(&ib) {
        p[x] = y;
    }
    p
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}
