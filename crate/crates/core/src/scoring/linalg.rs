//! Small dense `f64` helpers.

/// `a·bᵀ` for row-major `a: [na×d]`, `b: [nb×d]`.
pub(crate) fn gram(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; na * nb];
    if na == 0 || nb == 0 || d == 0 {
        return c;
    }
    // SAFETY: slices are sized `na×d`, `nb×d` and `na×nb`; strides describe
    // row-major `a`, column-major view of `b` (i.e. `bᵀ`), row-major `c`.
    unsafe {
        matrixmultiply::dgemm(
            na,
            d,
            nb,
            1.0,
            a.as_ptr(),
            d as isize,
            1,
            b.as_ptr(),
            1,
            d as isize,
            0.0,
            c.as_mut_ptr(),
            nb as isize,
            1,
        );
    }
    c
}

/// `a·m` for `a: [n×d]`, `m: [d×k]`, both row-major.
pub(crate) fn matmul(a: &[f64], n: usize, m: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    if n == 0 || d == 0 || k == 0 {
        return c;
    }
    // SAFETY: sizes as documented; all row-major.
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            k,
            1.0,
            a.as_ptr(),
            d as isize,
            1,
            m.as_ptr(),
            k as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    c
}

/// Scales each row of `x: [n×d]` to unit norm; returns indices of rows with norm ≤ `eps`, which become zero.
pub(crate) fn normalize_rows(x: &mut [f64], d: usize, eps: f64) -> Vec<usize> {
    let mut zero = Vec::new();
    if d == 0 {
        return zero;
    }
    for (i, row) in x.chunks_mut(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= eps {
            row.iter_mut().for_each(|v| *v = 0.0);
            zero.push(i);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    zero
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    let n = v.len();
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Squared Euclidean distances between rows of `a` and rows of `b`.
pub(crate) fn sq_dists(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Vec<f64> {
    let sq = |x: &[f64]| -> Vec<f64> {
        x.chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect()
    };
    let (an, bn) = (sq(a), sq(b));
    let mut g = gram(a, na, b, nb, d);
    for i in 0..na {
        for j in 0..nb {
            let v = &mut g[i * nb + j];
            *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
        }
    }
    g
}

/// Median of the pairwise (i < j) Euclidean distances within `x`.
pub(crate) fn median_pairwise_distance(x: &[f64], n: usize, d: usize) -> f64 {
    let d2 = sq_dists(x, n, x, n, d);
    let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push(d2[i * n + j].sqrt());
        }
    }
    if v.is_empty() {
        0.0
    } else {
        median(v)
    }
}

/// `log Σ exp(xᵢ)` over a nonempty iterator.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
