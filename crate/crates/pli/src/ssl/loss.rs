//! Contrastive InfoNCE loss over paired embeddings, with analytic gradient.
//!
//! Embeddings arrive as `2N` rows arranged pair-wise: row `2i` and `2i + 1`
//! belong to pair `i`. Every other row in the batch serves as a negative.
//! The loss is generic over the float type so the same code path can be
//! validated in f64 against brute-force summation and finite differences.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Float bound used across the learning stack.
pub trait Real: ndarray::NdFloat + FromPrimitive {}
impl<T: ndarray::NdFloat + FromPrimitive> Real for T {}

fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite constant")
}

/// Maximum tolerated deviation of an input row norm from one.
pub const NORM_TOLERANCE: f64 = 1e-4;

fn check_batch<T: Real>(z: &ArrayView2<'_, T>) -> Result<()> {
    let n = z.nrows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::invalid(format!(
            "contrastive batch needs at least 2 pairs of rows, got {n} rows"
        )));
    }
    let tol = real::<T>(NORM_TOLERANCE);
    for (i, row) in z.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - T::one()).abs() > tol {
            return Err(Error::invalid(format!(
                "embedding row {i} is not unit length (norm {norm})"
            )));
        }
    }
    Ok(())
}

/// Index of the positive partner for anchor `i`.
#[inline]
#[must_use]
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// InfoNCE loss.
///
/// For each anchor the positive is its pair partner and all remaining rows
/// are negatives; the result is the mean over all `2N` anchors. Rows must be
/// unit length within [`NORM_TOLERANCE`].
pub fn info_nce<T: Real>(z: &ArrayView2<'_, T>, tau: T) -> Result<T> {
    Ok(info_nce_with_grad(z, tau)?.0)
}

/// InfoNCE loss together with its gradient with respect to the embeddings.
pub fn info_nce_with_grad<T: Real>(
    z: &ArrayView2<'_, T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    if tau <= T::zero() {
        return Err(Error::invalid("temperature must be positive"));
    }
    check_batch(z)?;
    let n = z.nrows();
    let mut sim = z.dot(&z.t());
    sim.mapv_inplace(|s| s / tau);

    let inv_n = T::one() / real::<T>(n as f64);
    let mut loss = T::zero();
    // Coefficient matrix dL/d(sim); the diagonal never participates.
    let mut coef = Array2::<T>::zeros((n, n));
    for i in 0..n {
        let row = sim.index_axis(Axis(0), i);
        let mut m = T::neg_infinity();
        for (k, &s) in row.iter().enumerate() {
            if k != i && s > m {
                m = s;
            }
        }
        let mut denom = T::zero();
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                denom += (s - m).exp();
            }
        }
        let lse = m + denom.ln();
        loss += lse - row[partner(i)];
        for k in 0..n {
            if k != i {
                let p = (row[k] - m).exp() / denom;
                let target = if k == partner(i) { T::one() } else { T::zero() };
                coef[[i, k]] = (p - target) * inv_n;
            }
        }
    }
    loss *= inv_n;

    // sim[i, k] feeds both anchor i and anchor k, so both coefficient
    // orientations act on the embeddings.
    let mut grad = coef.dot(z);
    grad += &coef.t().dot(z);
    grad.mapv_inplace(|g| g / tau);
    Ok((loss, grad))
}

/// Row-wise L2 normalization; returns the normalized rows and the norms.
pub fn l2_normalize_rows<T: Real>(v: &ArrayView2<'_, T>) -> (Array2<T>, Array1<T>) {
    let floor = real::<T>(1e-12);
    let norms = Array1::from_iter(v.outer_iter().map(|row| row.dot(&row).sqrt().max(floor)));
    let mut out = v.to_owned();
    for (mut row, &n) in out.outer_iter_mut().zip(norms.iter()) {
        row.mapv_inplace(|x| x / n);
    }
    (out, norms)
}

/// Backward pass of [`l2_normalize_rows`].
///
/// Given upstream gradients along the normalized rows, returns gradients with
/// respect to the raw rows using dv = (dz − z (z·dz)) / ‖v‖.
pub fn l2_normalize_rows_backward<T: Real>(
    z: &ArrayView2<'_, T>,
    norms: &Array1<T>,
    dz: &ArrayView2<'_, T>,
) -> Array2<T> {
    let mut out = Array2::<T>::zeros(z.raw_dim());
    for i in 0..z.nrows() {
        let zi = z.index_axis(Axis(0), i);
        let di = dz.index_axis(Axis(0), i);
        let proj = zi.dot(&di);
        let n = norms[i];
        let mut row = out.index_axis_mut(Axis(0), i);
        for k in 0..z.ncols() {
            row[k] = (di[k] - zi[k] * proj) / n;
        }
    }
    out
}
