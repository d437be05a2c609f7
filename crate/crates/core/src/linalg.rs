//! Householder QR with column pivoting for small dense least-squares problems.
//!
//! Matrices are column-major `n x p` slices. Pivoting picks the remaining
//! column of largest norm, so the magnitudes on the diagonal of `R` are
//! non-increasing and a relative threshold on them detects rank deficiency.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RankDeficient {
    pub rank: usize,
}

/// Solves `min ||X b - y||` for full-column-rank `X`.
pub(crate) fn least_squares(
    x: &[f64],
    n: usize,
    p: usize,
    y: &[f64],
    rel_tol: f64,
) -> Result<Vec<f64>, RankDeficient> {
    debug_assert_eq!(x.len(), n * p);
    debug_assert_eq!(y.len(), n);
    if p == 0 || n < p {
        return Err(RankDeficient { rank: n.min(p) });
    }
    let mut a = x.to_vec();
    let mut rhs = y.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut diag = vec![0.0; p];
    let mut first = 0.0;

    for k in 0..p {
        let col_norm2 = |a: &[f64], j: usize| a[j * n + k..(j + 1) * n].iter().map(|v| v * v).sum::<f64>();
        let (jmax, best) = (k..p)
            .map(|j| (j, col_norm2(&a, j)))
            .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if jmax != k {
            for i in 0..n {
                a.swap(k * n + i, jmax * n + i);
            }
            perm.swap(k, jmax);
        }
        let alpha = best.sqrt();
        if k == 0 {
            first = alpha;
        }
        if !(alpha > rel_tol * first) || alpha == 0.0 {
            return Err(RankDeficient { rank: k });
        }

        // Householder vector v = x + sign(x_0) ||x|| e_0, stored in place.
        let head = a[k * n + k];
        let sign = if head >= 0.0 { 1.0 } else { -1.0 };
        let v0 = head + sign * alpha;
        a[k * n + k] = v0;
        let vnorm2 = v0 * v0 + (k + 1..n).map(|i| a[k * n + i] * a[k * n + i]).sum::<f64>();
        let beta = 2.0 / vnorm2;

        for j in k + 1..p {
            let dot: f64 = (k..n).map(|i| a[k * n + i] * a[j * n + i]).sum();
            let f = beta * dot;
            for i in k..n {
                a[j * n + i] -= f * a[k * n + i];
            }
        }
        let dot: f64 = (k..n).map(|i| a[k * n + i] * rhs[i]).sum();
        let f = beta * dot;
        for i in k..n {
            rhs[i] -= f * a[k * n + i];
        }
        diag[k] = -sign * alpha;
    }

    // Back substitution on R z = (Q^T y)[..p].
    let mut z = vec![0.0; p];
    for k in (0..p).rev() {
        let mut acc = rhs[k];
        for j in k + 1..p {
            acc -= a[j * n + k] * z[j];
        }
        z[k] = acc / diag[k];
    }
    let mut out = vec![0.0; p];
    for (k, &col) in perm.iter().enumerate() {
        out[col] = z[k];
    }
    Ok(out)
}
