//! The sample covariance operator `(1/n) sum_i X_i ⊗ X_i`, evaluated only
//! through contractions against the data. The `D x D` operator is never
//! formed; the largest object built is a `d_q x d_q` matrix.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{MpcaError, Result};
use crate::linalg::{complement_projector, row_dots, is_idempotent, is_symmetric, orthonormalize};
use crate::scalar::Scalar;
use crate::spiked::SampleSet;
use crate::tensor::{kron, RankOnePC};

/// Read-only view of `Σ̂` for a sample, optionally deflated by per-mode
/// orthogonal projectors applied to every direction argument.
#[derive(Clone, Debug)]
pub struct CovarianceView<'a, T> {
    data: &'a SampleSet<T>,
    projectors: Option<Vec<Array2<T>>>,
}

impl<'a, T: Scalar> CovarianceView<'a, T> {
    pub fn new(data: &'a SampleSet<T>) -> Self {
        CovarianceView {
            data,
            projectors: None,
        }
    }

    /// Deflated view with explicit projectors, one per mode.
    pub fn with_projectors(data: &'a SampleSet<T>, projectors: Vec<Array2<T>>) -> Result<Self> {
        if projectors.len() != data.order() {
            return Err(MpcaError::DimensionMismatch(format!(
                "{} projectors for an order-{} sample",
                projectors.len(),
                data.order()
            )));
        }
        for (q, p) in projectors.iter().enumerate() {
            let d = data.dims()[q];
            if p.nrows() != d || p.ncols() != d {
                return Err(MpcaError::DimensionMismatch(format!(
                    "projector for mode {q} is {}x{}, expected {d}x{d}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if !is_symmetric(&p.view(), T::of(1e-10)) || !is_idempotent(&p.view(), T::of(1e-8)) {
                return Err(MpcaError::InvalidInput(format!(
                    "mode {q} matrix is not an orthogonal projector"
                )));
            }
        }
        Ok(CovarianceView {
            data,
            projectors: Some(projectors),
        })
    }

    /// Deflates by the orthocomplement of the span of the previous estimates'
    /// mode factors. An empty list gives the undeflated view.
    pub fn deflated(data: &'a SampleSet<T>, previous: &[RankOnePC<T>]) -> Result<Self> {
        if previous.is_empty() {
            return Ok(Self::new(data));
        }
        Self::with_projectors(data, deflation_projectors(data.dims(), previous)?)
    }

    pub fn data(&self) -> &SampleSet<T> {
        self.data
    }

    pub fn projectors(&self) -> Option<&[Array2<T>]> {
        self.projectors.as_deref()
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    /// Applies the mode-`q` projector (identity when undeflated).
    pub fn project(&self, q: usize, v: &[T]) -> Vec<T> {
        match &self.projectors {
            Some(ps) => ps[q].dot(&ArrayView1::from(v)).to_vec(),
            None => v.to_vec(),
        }
    }

    fn check_directions(&self, ws: &[&[T]], skip: Option<usize>) -> Result<()> {
        let dims = self.dims();
        if ws.len() != dims.len() {
            return Err(MpcaError::DimensionMismatch(format!(
                "{} direction vectors for an order-{} covariance",
                ws.len(),
                dims.len()
            )));
        }
        for (q, (w, &d)) in ws.iter().zip(dims).enumerate() {
            if Some(q) != skip && w.len() != d {
                return Err(MpcaError::DimensionMismatch(format!(
                    "direction for mode {q} has length {}, expected {d}",
                    w.len()
                )));
            }
        }
        Ok(())
    }

    /// Row `i` is the projected `X_i` contracted on every mode except `q`
    /// against the projected directions `ws` (`ws[q]` is ignored).
    pub fn contract_except(&self, ws: &[&[T]], q: usize) -> Result<Array2<T>> {
        self.check_directions(ws, Some(q))?;
        let dims = self.dims();
        let n = self.data.n();
        let dq = dims[q];
        let pw: Vec<Vec<T>> = (0..dims.len())
            .map(|m| if m == q { Vec::new() } else { self.project(m, ws[m]) })
            .collect();
        let refs: Vec<&[T]> = pw
            .iter()
            .enumerate()
            .filter(|(m, _)| *m != q)
            .map(|(_, v)| v.as_slice())
            .collect();
        let other = kron(&refs);
        let raw = self.data.mode_major(q);
        let mut z = if other.len() == 1 {
            Array2::from_shape_vec((n, dq), raw.to_vec()).expect("layout")
        } else {
            let mut out = vec![T::zero(); n * dq];
            row_dots(raw, other.len(), &other, &mut out);
            Array2::from_shape_vec((n, dq), out).expect("layout")
        };
        if let Some(ps) = &self.projectors {
            // P is symmetric, so Z P applies it to every row
            z = z.dot(&ps[q]);
        }
        Ok(z)
    }

    /// `⟨X_i, ⊗_q P w_q⟩` for every observation.
    pub fn projections(&self, ws: &[&[T]]) -> Result<Vec<T>> {
        self.check_directions(ws, None)?;
        let last = self.dims().len() - 1;
        let z = self.contract_except(ws, last)?;
        let w = self.project(last, ws[last]);
        Ok(z.dot(&ArrayView1::from(&w[..])).to_vec())
    }

    /// `Σ̂(w_1..w_p, v_1..v_p) = (1/n) sum_i ⟨X_i, ⊗ P w⟩⟨X_i, ⊗ P v⟩`.
    pub fn bilinear(&self, ws: &[&[T]], vs: &[&[T]]) -> Result<T> {
        let s = self.projections(ws)?;
        let t = self.projections(vs)?;
        let mut acc = T::zero();
        for (&a, &b) in s.iter().zip(&t) {
            acc += a * b;
        }
        Ok(acc / T::of_usize(self.data.n()))
    }

    /// The quadratic form `Σ̂(w, w)`.
    pub fn quadratic(&self, ws: &[&[T]]) -> Result<T> {
        let s = self.projections(ws)?;
        let acc = s.iter().fold(T::zero(), |acc, &a| acc + a * a);
        Ok(acc / T::of_usize(self.data.n()))
    }

    /// The `d_q x d_q` matrix `(1/n) sum_i z_i z_i'` whose leading eigenvector
    /// maximizes `Σ̂` over mode `q` with the other modes fixed at `fixed`.
    /// Exactly symmetric.
    pub fn contracted_matrix(&self, fixed: &[&[T]], q: usize) -> Result<Array2<T>> {
        let z = self.contract_except(fixed, q)?;
        let mut m = z.t().dot(&z);
        let inv_n = T::one() / T::of_usize(self.data.n());
        let d = m.nrows();
        for i in 0..d {
            m[[i, i]] *= inv_n;
            for j in 0..i {
                let v = (m[[i, j]] + m[[j, i]]) * T::of(0.5) * inv_n;
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        Ok(m)
    }
}

/// Per-mode `I - sum_l u_l u_l'` over the listed components' factors.
pub fn deflation_projectors<T: Scalar>(
    dims: &[usize],
    previous: &[RankOnePC<T>],
) -> Result<Vec<Array2<T>>> {
    (0..dims.len())
        .map(|q| {
            let vecs: Vec<Vec<T>> = previous
                .iter()
                .map(|c| {
                    if c.order() != dims.len() || c.factor(q).dim() != dims[q] {
                        Err(MpcaError::DimensionMismatch(format!(
                            "component dims {:?} vs data dims {dims:?}",
                            c.dims()
                        )))
                    } else {
                        Ok(c.factor(q).as_slice().to_vec())
                    }
                })
                .collect::<Result<_>>()?;
            let basis = orthonormalize(&vecs)?;
            let refs: Vec<&[T]> = basis.iter().map(|v| v.as_slice()).collect();
            complement_projector(dims[q], &refs)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimates<T> {
    pub sigma0_sq_hat: T,
    /// `σ̂_k^2`, clipped at zero.
    pub sigma_sq_hat: Vec<T>,
    /// Whether the matching `sigma_sq_hat` entry was clipped.
    pub clipped: Vec<bool>,
}

/// Noise variance: the mean squared norm of the data after projecting every
/// mode onto the orthocomplement of the fitted factors, normalized by
/// `n * prod_q (d_q - r)`. Equals the trace of the `(r+1)`-deflated
/// covariance divided by `prod_q (d_q - r)`.
pub fn estimate_sigma0_sq<T: Scalar>(data: &SampleSet<T>, fitted: &[RankOnePC<T>]) -> Result<T> {
    let r = fitted.len();
    let dims = data.dims();
    if dims.iter().any(|&d| d <= r) {
        return Err(MpcaError::InvalidInput(format!(
            "noise variance needs r < min d_q (r = {r}, dims {dims:?})"
        )));
    }
    let mut denom = T::of_usize(data.n());
    for &d in dims {
        denom *= T::of_usize(d - r);
    }
    if r == 0 {
        let ss = data.stacked_data().iter().fold(T::zero(), |a, &x| a + x * x);
        return Ok(ss / denom);
    }
    let projectors = deflation_projectors(dims, fitted)?;
    let mut stacked = data.to_stacked_tensor();
    for (q, p) in projectors.iter().enumerate() {
        stacked = stacked.mode_product(q + 1, &p.view())?;
    }
    let ss = stacked.data().iter().fold(T::zero(), |a, &x| a + x * x);
    Ok((ss / denom).max(T::zero()))
}

/// `σ̂_k^2 = Σ̂(Û_k, Û_k) - σ̂_0^2`, clipped at zero. The flag reports
/// clipping.
pub fn estimate_sigma_sq<T: Scalar>(
    data: &SampleSet<T>,
    fitted_k: &RankOnePC<T>,
    sigma0_sq_hat: T,
) -> Result<(T, bool)> {
    let view = CovarianceView::new(data);
    let rayleigh = view.quadratic(&fitted_k.factor_slices())?;
    let s = rayleigh - sigma0_sq_hat;
    if s > T::zero() {
        Ok((s, false))
    } else {
        Ok((T::zero(), true))
    }
}

pub fn estimate_variances<T: Scalar>(
    data: &SampleSet<T>,
    fitted: &[RankOnePC<T>],
) -> Result<VarianceEstimates<T>> {
    let sigma0_sq_hat = estimate_sigma0_sq(data, fitted)?;
    let mut sigma_sq_hat = Vec::with_capacity(fitted.len());
    let mut clipped = Vec::with_capacity(fitted.len());
    for c in fitted {
        let (s, c) = estimate_sigma_sq(data, c, sigma0_sq_hat)?;
        sigma_sq_hat.push(s);
        clipped.push(c);
    }
    Ok(VarianceEstimates {
        sigma0_sq_hat,
        sigma_sq_hat,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spiked::{make_components, ComponentsMode, NoiseDistribution, SpikedModel};
    use crate::tensor::{dot, UnitVector};
    use proptest::prelude::*;

    fn sample(dims: &[usize], sigma: &[f64], sigma0: f64, n: usize, seed: u64) -> (SpikedModel<f64>, SampleSet<f64>) {
        let comps = make_components(dims, sigma.len(), ComponentsMode::Random, seed).unwrap();
        let m = SpikedModel::new(dims.to_vec(), sigma.to_vec(), sigma0, comps).unwrap();
        let s = m.sample(n, NoiseDistribution::StandardNormal, seed).unwrap();
        (m, s)
    }

    /// Direct evaluation from the definition, for cross-checking.
    fn naive_bilinear(data: &SampleSet<f64>, ws: &[&[f64]], vs: &[&[f64]]) -> f64 {
        let a = kron(ws);
        let b = kron(vs);
        (0..data.n())
            .map(|i| dot(data.observation_slice(i), &a) * dot(data.observation_slice(i), &b))
            .sum::<f64>()
            / data.n() as f64
    }

    #[test]
    fn single_observation_bilinear() {
        let (_, s) = sample(&[3, 2, 2], &[1.0], 1.0, 1, 3);
        let w: [&[f64]; 3] = [&[1.0, 2.0, 0.5], &[0.3, -1.0], &[1.0, 1.0]];
        let v: [&[f64]; 3] = [&[0.0, 1.0, 0.0], &[1.0, 0.0], &[2.0, -1.0]];
        let view = CovarianceView::new(&s);
        let x = s.observation_slice(0);
        let expect = dot(x, &kron(&w)) * dot(x, &kron(&v));
        assert!((view.bilinear(&w, &v).unwrap() - expect).abs() < 1e-12);
        assert!((view.bilinear(&w, &v).unwrap() - naive_bilinear(&s, &w, &v)).abs() < 1e-12);
        assert_eq!(view.bilinear(&w, &v).unwrap(), view.bilinear(&v, &w).unwrap());
        assert!(view.quadratic(&w).unwrap() >= 0.0);
    }

    #[test]
    fn matrix_case_contracted_matrix() {
        let (_, s) = sample(&[4, 3], &[2.0], 1.0, 7, 5);
        let v = [0.2, -0.4, 1.0];
        let view = CovarianceView::new(&s);
        let m = view.contracted_matrix(&[&[], &v], 0).unwrap();
        let mut expect = Array2::<f64>::zeros((4, 4));
        for i in 0..s.n() {
            let x = ndarray::ArrayView2::from_shape((4, 3), s.observation_slice(i)).unwrap();
            let z = x.dot(&ArrayView1::from(&v[..]));
            for a in 0..4 {
                for b in 0..4 {
                    expect[[a, b]] += z[a] * z[b] / s.n() as f64;
                }
            }
        }
        for (x, y) in m.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_contracted_matrix_is_rank_one_along_component() {
        let (m, s) = sample(&[5, 4], &[2.0], 0.0, 30, 8);
        let u = &m.components()[0];
        let view = CovarianceView::new(&s);
        let mat = view.contracted_matrix(&u.factor_slices(), 0).unwrap();
        let e = crate::linalg::leading_eigenpair(&mat.view(), None, 1e-12, 10_000).unwrap();
        assert!(crate::tensor::sin_angle(&e.vector, u.factor(0).as_slice()).unwrap() < 1e-8);
        // rank one: the residual after removing the top pair vanishes
        let mut rest = mat.clone();
        for a in 0..5 {
            for b in 0..5 {
                rest[[a, b]] -= e.value * e.vector[a] * e.vector[b];
            }
        }
        assert!(rest.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn deflation_removes_fitted_directions() {
        let (m, s) = sample(&[4, 5], &[3.0, 1.0], 1.0, 40, 2);
        let u = &m.components()[0];
        let view = CovarianceView::deflated(&s, std::slice::from_ref(u)).unwrap();
        let other: Vec<Vec<f64>> = vec![vec![0.3, 0.1, -0.2, 0.5], vec![1.0, 0.0, 0.2, 0.1, 0.3]];
        for q in 0..2 {
            let mut ws: Vec<&[f64]> = other.iter().map(|v| v.as_slice()).collect();
            ws[q] = u.factor(q).as_slice();
            assert!(view.quadratic(&ws).unwrap() <= 1e-16);
        }
    }

    #[test]
    fn rejects_bad_projectors_and_dims() {
        let (_, s) = sample(&[3, 3], &[1.0], 1.0, 4, 1);
        let bad = vec![Array2::<f64>::eye(3) * 2.0, Array2::eye(3)];
        assert!(CovarianceView::with_projectors(&s, bad).is_err());
        let view = CovarianceView::new(&s);
        assert!(view.bilinear(&[&[1.0, 0.0, 0.0]], &[&[1.0, 0.0, 0.0]]).is_err());
        assert!(view.contracted_matrix(&[&[], &[1.0, 0.0]], 0).is_err());
    }

    #[test]
    fn sigma0_pure_noise() {
        let (_, s) = sample(&[10, 10], &[1.0], 1.0, 5000, 4);
        // ignore the spike: build pure noise directly
        let noise = SampleSet::from_stacked(vec![10, 10], 5000, s.noise.clone().unwrap()).unwrap();
        let s0 = estimate_sigma0_sq(&noise, &[]).unwrap();
        assert!((s0 - 1.0).abs() < 0.05, "{s0}");
    }

    #[test]
    fn sigma0_noiseless_exact_fit() {
        let (m, s) = sample(&[5, 6], &[2.0, 1.0], 0.0, 50, 4);
        let s0 = estimate_sigma0_sq(&s, m.components()).unwrap();
        assert!(s0 <= 1e-16, "{s0}");
        assert!(estimate_sigma0_sq(&s, &make_components(&[5, 6], 5, ComponentsMode::Random, 1).unwrap()).is_err());
    }

    #[test]
    fn sigma_k_estimates() {
        let (m, s) = sample(&[6, 6], &[2.0], 0.0, 5000, 6);
        let (v, clipped) = estimate_sigma_sq(&s, &m.components()[0], 0.0).unwrap();
        assert!(!clipped);
        assert!((v - 4.0).abs() / 4.0 < 0.05, "{v}");

        let (m, s) = sample(&[6, 6], &[2.0], 1.0, 5000, 6);
        let u = &m.components()[0];
        let s0 = estimate_sigma0_sq(&s, std::slice::from_ref(u)).unwrap();
        // a probe completely orthogonal to the spike
        let probe_factors: Vec<UnitVector<f64>> = (0..2)
            .map(|q| {
                let mut e = vec![0.0; 6];
                e[0] = 1.0;
                let c = dot(&e, u.factor(q).as_slice());
                let v: Vec<f64> = e.iter().zip(u.factor(q).as_slice()).map(|(a, b)| a - c * b).collect();
                UnitVector::new(v).unwrap()
            })
            .collect();
        let probe = RankOnePC::new(probe_factors, 0.0).unwrap();
        let (v, _) = estimate_sigma_sq(&s, &probe, s0).unwrap();
        assert!(v.abs() < 0.1, "{v}");

        let (v, clipped) = estimate_sigma_sq(&s, &probe, 100.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(clipped);
    }

    #[test]
    fn large_sample_bilinear_matches_eigenvalue() {
        let (m, s) = sample(&[3, 3], &[2.0], 1.0, 50_000, 12);
        let view = CovarianceView::new(&s);
        let v = view.quadratic(&m.components()[0].factor_slices()).unwrap();
        assert!((v - 5.0).abs() / 5.0 < 0.03, "{v}");
    }

    proptest! {
        #[test]
        fn contracted_matrix_consistent_with_bilinear(
            seed in 0u64..1000,
            w0 in proptest::collection::vec(-1.0f64..1.0, 3),
            w1 in proptest::collection::vec(-1.0f64..1.0, 4),
            w2 in proptest::collection::vec(-1.0f64..1.0, 2),
            q in 0usize..3,
            deflate in proptest::bool::ANY,
        ) {
            let (m, s) = sample(&[3, 4, 2], &[1.5], 1.0, 12, seed);
            let view = if deflate {
                CovarianceView::deflated(&s, m.components()).unwrap()
            } else {
                CovarianceView::new(&s)
            };
            let ws: Vec<&[f64]> = vec![&w0, &w1, &w2];
            let mat = view.contracted_matrix(&ws, q).unwrap();
            let w = ArrayView1::from(ws[q]);
            let lhs = w.dot(&mat.dot(&w));
            let rhs = view.quadratic(&ws).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            let v0: Vec<f64> = w0.iter().map(|x| x * 0.5 + 0.1).collect();
            let vs: Vec<&[f64]> = vec![&v0, &w1, &w2];
            prop_assert_eq!(view.bilinear(&ws, &vs).unwrap(), view.bilinear(&vs, &ws).unwrap());
            if !deflate {
                let naive = naive_bilinear(&s, &ws, &vs);
                prop_assert!((view.bilinear(&ws, &vs).unwrap() - naive).abs() < 1e-10);
            }
        }
    }
}
