//! Small dense helpers on `d_q x d_q` matrices: leading eigenpairs,
//! orthogonal projectors and Gram-Schmidt.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{MpcaError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, norm};

pub const EIG_MAX_ITERS: usize = 10_000;

/// Plain power steps tried before switching to repeated squaring.
const PLAIN_STEPS: usize = 40;
const MAX_SQUARINGS: usize = 60;

#[derive(Clone, Debug)]
pub struct Eigenpair<T> {
    pub value: T,
    pub vector: Vec<T>,
    /// Matrix-vector products plus squarings spent.
    pub iterations: usize,
    pub converged: bool,
}

/// Leading eigenpair of a symmetric positive semidefinite matrix.
///
/// Power iteration from `start` (or a deterministic fallback) with stopping
/// rule `|Mw - (w'Mw) w| <= tol * w'Mw`. When plain steps stall (small or
/// zero eigengap) the matrix is repeatedly squared and renormalized, which
/// raises the eigenvalue ratio to the power `2^s`, and the result is polished
/// with further plain steps. Every step is a power step on a PSD matrix, so
/// the Rayleigh quotient never decreases from the start vector's. Inside a
/// tied top eigenspace any vector has zero residual, so ties terminate.
pub fn leading_eigenpair<T: Scalar>(
    m: &ArrayView2<T>,
    start: Option<&[T]>,
    tol: T,
    max_iters: usize,
) -> Result<Eigenpair<T>> {
    let d = m.nrows();
    if d == 0 || m.ncols() != d {
        return Err(MpcaError::DimensionMismatch(format!(
            "eigenproblem on a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(MpcaError::Degenerate("matrix is numerically zero".into()));
    }

    let mut w = initial_vector(m, start);
    let mut mw = matvec(m, &w);
    let mut iterations = 0usize;

    let mut best = Eigenpair {
        value: T::zero(),
        vector: w.clone(),
        iterations: 0,
        converged: false,
    };
    // a converged iterate always wins; otherwise keep the best Rayleigh
    // quotient seen
    let check = |w: &[T], mw: &[T], iterations: usize, best: &mut Eigenpair<T>| -> bool {
        let (rho, resid) = rayleigh_from_product(w, mw);
        let done = rho > T::zero() && resid <= tol * rho;
        if done || rho >= best.value || best.iterations == 0 {
            best.value = rho;
            best.vector = w.to_vec();
        }
        best.iterations = iterations.max(1);
        done
    };

    if check(&w, &mw, 1, &mut best) {
        best.converged = true;
        return Ok(best);
    }

    let plain_budget = PLAIN_STEPS.min(max_iters);
    while iterations < plain_budget {
        w = normalized(mw)?;
        mw = matvec(m, &w);
        iterations += 1;
        if check(&w, &mw, iterations, &mut best) {
            best.converged = true;
            return Ok(best);
        }
    }

    // Repeated squaring: B_s = M^(2^s) / |M^(2^s)|.
    let mut b = m.to_owned().mapv(|x| x / scale);
    let w0 = w.clone();
    for _ in 0..MAX_SQUARINGS {
        if iterations >= max_iters {
            break;
        }
        b = b.dot(&b);
        let s = b.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
        if !(s > T::zero()) || !s.is_finite() {
            break;
        }
        b.mapv_inplace(|x| x / s);
        iterations += 1;
        let cand = match normalized(matvec(&b.view(), &w0)) {
            Ok(v) => v,
            Err(_) => break,
        };
        // polish against the original matrix
        w = normalized(matvec(m, &cand))?;
        mw = matvec(m, &w);
        iterations += 1;
        if check(&w, &mw, iterations, &mut best) {
            best.converged = true;
            return Ok(best);
        }
    }

    while iterations < max_iters {
        w = normalized(mw)?;
        mw = matvec(m, &w);
        iterations += 1;
        if check(&w, &mw, iterations, &mut best) {
            best.converged = true;
            return Ok(best);
        }
    }
    Ok(best)
}

fn initial_vector<T: Scalar>(m: &ArrayView2<T>, start: Option<&[T]>) -> Vec<T> {
    if let Some(s) = start {
        if s.len() == m.nrows() {
            let ms = m.dot(&ArrayView1::from(s));
            let n = norm(s);
            if n > T::zero() && ms.iter().any(|&x| x != T::zero()) {
                return s.iter().map(|&x| x / n).collect();
            }
        }
    }
    // column with the largest diagonal entry, then normalized
    let j = (0..m.nrows())
        .max_by(|&a, &b| m[[a, a]].partial_cmp(&m[[b, b]]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let col: Vec<T> = m.column(j).to_vec();
    let n = norm(&col);
    if n > T::zero() {
        col.into_iter().map(|x| x / n).collect()
    } else {
        let v = T::one() / T::of_usize(m.nrows()).sqrt();
        vec![v; m.nrows()]
    }
}

/// `out[i] = <row i of a, x>` for a row-major matrix with `cols` columns.
///
/// Eight interleaved partial sums, combined in a fixed order, so the result
/// does not depend on which instruction set runs it.
pub fn row_dots<T: Scalar>(a: &[T], cols: usize, x: &[T], out: &mut [T]) {
    assert_eq!(x.len(), cols);
    assert_eq!(a.len(), cols * out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime
            unsafe { row_dots_avx2(a, cols, x, out) };
            return;
        }
    }
    row_dots_portable(a, cols, x, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn row_dots_avx2<T: Scalar>(a: &[T], cols: usize, x: &[T], out: &mut [T]) {
    row_dots_portable(a, cols, x, out);
}

#[inline(always)]
fn row_dots_portable<T: Scalar>(a: &[T], cols: usize, x: &[T], out: &mut [T]) {
    if cols == 0 {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    for (row, o) in a.chunks_exact(cols).zip(out.iter_mut()) {
        *o = dot8(row, x);
    }
}

#[inline(always)]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (ra, rb) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `M w` for a square matrix.
pub fn matvec<T: Scalar>(m: &ArrayView2<T>, w: &[T]) -> Vec<T> {
    match m.as_slice() {
        Some(a) => {
            let mut out = vec![T::zero(); m.nrows()];
            row_dots(a, m.ncols(), w, &mut out);
            out
        }
        None => m.dot(&ArrayView1::from(w)).to_vec(),
    }
}

fn normalized<T: Scalar>(v: Vec<T>) -> Result<Vec<T>> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(MpcaError::Degenerate("power iteration collapsed to zero".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn rayleigh_from_product<T: Scalar>(w: &[T], mw: &[T]) -> (T, T) {
    let rho = dot(mw, w);
    let resid = mw
        .iter()
        .zip(w)
        .map(|(&a, &b)| {
            let r = a - rho * b;
            r * r
        })
        .sum::<T>()
        .sqrt();
    (rho, resid)
}

/// Returns `(w'Mw, |Mw - (w'Mw) w|)` for unit `w`.
pub fn rayleigh_residual<T: Scalar>(m: &ArrayView2<T>, w: &[T]) -> (T, T) {
    rayleigh_from_product(w, &matvec(m, w))
}

/// `I - sum_l u_l u_l'` for a set of orthonormal vectors.
pub fn complement_projector<T: Scalar>(dim: usize, basis: &[&[T]]) -> Result<Array2<T>> {
    let mut p = Array2::<T>::eye(dim);
    for u in basis {
        if u.len() != dim {
            return Err(MpcaError::DimensionMismatch(format!(
                "projector basis vector of length {} for dimension {dim}",
                u.len()
            )));
        }
        for i in 0..dim {
            for j in 0..dim {
                p[[i, j]] -= u[i] * u[j];
            }
        }
    }
    Ok(p)
}

pub fn is_symmetric<T: Scalar>(m: &ArrayView2<T>, tol: T) -> bool {
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[[i, j]] - m[[j, i]]).abs() <= tol))
}

pub fn is_idempotent<T: Scalar>(m: &ArrayView2<T>, tol: T) -> bool {
    let m2 = m.dot(m);
    m2.iter().zip(m.iter()).all(|(&a, &b)| (a - b).abs() <= tol)
}

/// Modified Gram-Schmidt on the given vectors, in order. Fails if they are
/// numerically dependent.
pub fn orthonormalize<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let mut out: Vec<Vec<T>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        // two passes keep orthogonality at machine precision
        for _ in 0..2 {
            for u in &out {
                let c = dot(&w, u);
                for (wi, &ui) in w.iter_mut().zip(u) {
                    *wi -= c * ui;
                }
            }
        }
        let n = norm(&w);
        let orig = norm(v);
        if !(n > orig * T::of(1e-10)) {
            return Err(MpcaError::Degenerate("vectors are linearly dependent".into()));
        }
        out.push(w.into_iter().map(|x| x / n).collect());
    }
    Ok(out)
}

/// Applies a projector to a vector.
pub fn project<T: Scalar>(p: &Array2<T>, v: &[T]) -> Vec<T> {
    p.dot(&ArrayView1::from(v)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_leading_pair() {
        let m = array![[1.0f64, 0.0], [0.0, 3.0]];
        let e = leading_eigenpair(&m.view(), None, 1e-12, EIG_MAX_ITERS).unwrap();
        assert!(e.converged);
        assert!((e.value - 3.0).abs() < 1e-12);
        assert!(e.vector[1].abs() > 1.0 - 1e-12);
    }

    #[test]
    fn small_gap_uses_squaring() {
        let m = array![[1.0, 0.0, 0.0], [0.0, 1.0 - 1e-9, 0.0], [0.0, 0.0, 0.5]];
        let start = [0.6, 0.8, 0.0];
        let e = leading_eigenpair(&m.view(), Some(&start), 1e-12, EIG_MAX_ITERS).unwrap();
        assert!(e.converged);
        let (_, r) = rayleigh_residual(&m.view(), &e.vector);
        assert!(r <= 1e-12);
    }

    #[test]
    fn tied_top_eigenvalue_terminates() {
        let m = array![[2.0f64, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let e = leading_eigenpair(&m.view(), Some(&[1.0, 1.0, 1.0]), 1e-12, EIG_MAX_ITERS).unwrap();
        assert!(e.converged);
        assert!((e.value - 2.0).abs() < 1e-12);
        assert!(e.vector[2].abs() < 1e-6);
    }

    #[test]
    fn rayleigh_quotient_never_drops_below_start() {
        let m = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]];
        let start = [0.2, 0.9, 0.1];
        let n = norm(&start);
        let s: Vec<f64> = start.iter().map(|x| x / n).collect();
        let (rho0, _) = rayleigh_residual(&m.view(), &s);
        let e = leading_eigenpair(&m.view(), Some(&s), 1e-12, EIG_MAX_ITERS).unwrap();
        assert!(e.value >= rho0 - 1e-12);
    }

    #[test]
    fn zero_matrix_rejected() {
        let m = Array2::<f64>::zeros((3, 3));
        assert!(leading_eigenpair(&m.view(), None, 1e-12, 10).is_err());
    }

    #[test]
    fn projector_properties() {
        let u = [0.6, 0.8, 0.0];
        let p = complement_projector(3, &[&u]).unwrap();
        assert!(is_symmetric(&p.view(), 1e-15));
        assert!(is_idempotent(&p.view(), 1e-15));
        let pu = project(&p, &u);
        assert!(norm(&pu) < 1e-15);
    }

    #[test]
    fn gram_schmidt() {
        let q = orthonormalize(&[vec![1.0f64, 1.0, 0.0], vec![1.0, 0.0, 1.0]]).unwrap();
        assert!(dot(&q[0], &q[1]).abs() < 1e-15);
        assert!((norm(&q[1]) - 1.0).abs() < 1e-15);
        assert!(orthonormalize(&[vec![1.0, 1.0], vec![2.0, 2.0]]).is_err());
    }

    #[test]
    fn row_dots_match_naive() {
        for cols in [1usize, 7, 8, 9, 50] {
            let rows = 5;
            let a: Vec<f64> = (0..rows * cols).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let x: Vec<f64> = (0..cols).map(|i| (i as f64) * 0.5 - 1.0).collect();
            let mut out = vec![0.0; rows];
            row_dots(&a, cols, &x, &mut out);
            for r in 0..rows {
                let naive: f64 = (0..cols).map(|j| a[r * cols + j] * x[j]).sum();
                // integer-valued halves: every partial sum is exact
                assert_eq!(out[r], naive);
            }
            let mut portable = vec![0.0; rows];
            row_dots_portable(&a, cols, &x, &mut portable);
            assert_eq!(out, portable);
        }
    }
}
