//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

/// Best `k`-sparse ℓ₂ approximation by enumerating every support of size
/// `k`. Returns the minimal residual energy `Σ_{i∉S} vᵢ²` and all optimal
/// supports (sorted ascending).
pub fn best_k_sparse(v: &[f64], k: usize) -> (f64, Vec<Vec<usize>>) {
    let d = v.len();
    assert!(d <= 16, "brute force is exponential");
    let total: f64 = v.iter().map(|x| x * x).sum();
    let mut best = f64::INFINITY;
    let mut supports = Vec::new();
    for mask in 0u32..(1 << d) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let kept: f64 = (0..d).filter(|i| mask >> i & 1 == 1).map(|i| v[i] * v[i]).sum();
        let residual = total - kept;
        let support: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
        if residual < best - 1e-12 {
            best = residual;
            supports = vec![support];
        } else if (residual - best).abs() <= 1e-12 {
            supports.push(support);
        }
    }
    (best.max(0.0), supports)
}

/// Top-`k` by a full stable sort on (|v| descending, index ascending).
pub fn full_sort_topk(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap().then(a.cmp(&b)));
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort_unstable();
    out
}
