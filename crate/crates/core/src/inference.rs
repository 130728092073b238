//! Studentized inference for linear forms `<u_k^(q), v>`: point estimates in
//! the three dimension regimes, plug-in standard errors, confidence
//! intervals and two-sided tests of `<u, v> = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::debias::EstimateBundle;
use crate::error::{MpcaError, Result};
use crate::scalar::Scalar;
use crate::tensor::UnitVector;

/// Standard normal cdf through the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper quantile `z` with `Φ(-z) = p` for `p` in `(0, 0.5]`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(MpcaError::InvalidInput(format!("quantile level {p} outside (0, 0.5]")));
    }
    Ok(std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// A linear form `<u_k^(q), v>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFormTarget {
    pub k: usize,
    pub q: usize,
    pub v: Vec<f64>,
    /// Label used in exported tables, e.g. the 1-based coordinate.
    pub probe: String,
}

impl LinearFormTarget {
    pub fn new(k: usize, q: usize, v: Vec<f64>, probe: impl Into<String>) -> Result<Self> {
        if !(v.iter().map(|x| x * x).sum::<f64>() > 0.0) {
            return Err(MpcaError::InvalidInput("probe vector must be nonzero".into()));
        }
        Ok(LinearFormTarget {
            k,
            q,
            v,
            probe: probe.into(),
        })
    }

    /// Canonical basis vector `e_i` (0-based `i`), labelled with `i + 1`.
    pub fn coordinate(k: usize, q: usize, i: usize, d_q: usize) -> Result<Self> {
        if i >= d_q {
            return Err(MpcaError::InvalidInput(format!("coordinate {i} out of range for dimension {d_q}")));
        }
        let mut v = vec![0.0; d_q];
        v[i] = 1.0;
        Self::new(k, q, v, (i + 1).to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// One-step update, `d << n^(1/2)`.
    A,
    /// Cross-fit with explicit bias factor, `d << n^(2/3)`.
    B,
    /// Cross-fit with empirical bias factor, `d << n`.
    C,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::A => "A",
            Regime::B => "B",
            Regime::C => "C",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    #[default]
    Auto,
    A,
    B,
    C,
}

impl FromStr for RegimeChoice {
    type Err = MpcaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(RegimeChoice::Auto),
            "a" => Ok(RegimeChoice::A),
            "b" => Ok(RegimeChoice::B),
            "c" => Ok(RegimeChoice::C),
            other => Err(MpcaError::Config(format!("unknown regime '{other}' (auto, A, B or C)"))),
        }
    }
}

impl RegimeChoice {
    pub fn resolve(self, dims: &[usize], n: usize) -> Regime {
        match self {
            RegimeChoice::Auto => auto_regime(dims, n),
            RegimeChoice::A => Regime::A,
            RegimeChoice::B => Regime::B,
            RegimeChoice::C => Regime::C,
        }
    }
}

/// `A` if `d < n^(1/2)`, `B` if `d < n^(2/3)`, else `C`, with `d = max_q d_q`.
pub fn auto_regime(dims: &[usize], n: usize) -> Regime {
    let d = dims.iter().copied().max().unwrap_or(0) as f64;
    let n = n as f64;
    if d < n.sqrt() {
        Regime::A
    } else if d < n.powf(2.0 / 3.0) {
        Regime::B
    } else {
        Regime::C
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub k: usize,
    pub q: usize,
    pub probe: String,
    pub point: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    /// `point / se`; absent when `se = 0`.
    pub z_stat: Option<f64>,
    pub reject: bool,
    pub regime: Regime,
    /// `v` lies along the estimated direction, so `se = 0` and the interval
    /// has width zero.
    pub degenerate: bool,
}

impl InferenceResult {
    pub fn covers(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

fn complement_norm(dir: &[f64], v: &[f64]) -> f64 {
    let c: f64 = dir.iter().zip(v).map(|(a, b)| a * b).sum();
    v.iter()
        .zip(dir)
        .map(|(&x, &u)| {
            let e = x - c * u;
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

fn to_f64<T: Scalar>(u: &UnitVector<T>) -> Vec<f64> {
    u.as_slice().iter().map(|x| x.as_f64()).collect()
}

/// Point estimate, standard error, interval and test for one linear form.
pub fn infer_linear_form<T: Scalar>(
    bundle: &EstimateBundle<T>,
    target: &LinearFormTarget,
    alpha: f64,
    choice: RegimeChoice,
) -> Result<InferenceResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MpcaError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    let comp = bundle
        .components
        .get(target.k)
        .ok_or_else(|| MpcaError::InvalidInput(format!("component {} not fitted", target.k)))?;
    let d_q = *bundle
        .dims
        .get(target.q)
        .ok_or_else(|| MpcaError::InvalidInput(format!("mode {} out of range", target.q)))?;
    if target.v.len() != d_q {
        return Err(MpcaError::DimensionMismatch(format!(
            "probe of length {} for mode of dimension {d_q}",
            target.v.len()
        )));
    }
    if bundle.variances.clipped[target.k] {
        return Err(MpcaError::InferenceUnavailable(format!(
            "signal variance of component {} was clipped to zero",
            target.k
        )));
    }
    let s0 = bundle.variances.sigma0_sq_hat.as_f64();
    let sk = bundle.variances.sigma_sq_hat[target.k].as_f64();
    let regime = choice.resolve(&bundle.dims, bundle.n);
    let (dir, factor, n) = match regime {
        Regime::A => (to_f64(&comp.tilde_u[target.q]), 1.0, bundle.n),
        Regime::B | Regime::C => {
            let check = comp.check_u.as_ref().ok_or_else(|| {
                MpcaError::InvalidInput(format!("regime {regime} needs the split estimator"))
            })?;
            let b = if regime == Regime::B {
                comp.b_explicit
                    .as_ref()
                    .and_then(|b| b.get(target.q).copied())
                    .ok_or_else(|| MpcaError::InferenceUnavailable("explicit bias unavailable".into()))?
                    .as_f64()
            } else {
                let bs = comp.b_empirical.as_ref().ok_or_else(|| {
                    MpcaError::InvalidInput("regime C needs the quarter estimates".into())
                })?;
                bs[target.q]
                    .value()
                    .ok_or_else(|| {
                        MpcaError::InferenceUnavailable(format!(
                            "empirical bias unavailable for component {} mode {}",
                            target.k, target.q
                        ))
                    })?
                    .as_f64()
            };
            (to_f64(&check[target.q]), 1.0 + b, bundle.n_split())
        }
    };
    let raw: f64 = dir.iter().zip(&target.v).map(|(a, b)| a * b).sum();
    let point = factor * raw;
    let ratio = s0 / sk;
    let vn = target.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut pv = complement_norm(&dir, &target.v);
    // v along the estimated direction up to rounding
    if pv <= 1e-12 * vn {
        pv = 0.0;
    }
    let se = (ratio + ratio * ratio).sqrt() * pv / (n as f64).sqrt();
    let z = normal_quantile(alpha / 2.0)?;
    let half = z * se;
    let degenerate = !(se > 0.0);
    Ok(InferenceResult {
        k: target.k,
        q: target.q,
        probe: target.probe.clone(),
        point,
        se,
        lo: point - half,
        hi: point + half,
        z_stat: if degenerate { None } else { Some(point / se) },
        reject: point.abs() >= half,
        regime,
        degenerate,
    })
}

/// Asymptotic mean and standard deviation of a linear-form estimate:
/// `(<u, v>, sqrt(σ_0^2/σ^2 + σ_0^4/σ^4) ‖P⊥_u v‖ / sqrt(n))`.
pub fn theoretical_density(sigma0: f64, sigma_k: f64, u: &[f64], v: &[f64], n: usize) -> Result<(f64, f64)> {
    if !(sigma_k > 0.0) {
        return Err(MpcaError::InvalidInput("sigma_k must be positive".into()));
    }
    if u.len() != v.len() {
        return Err(MpcaError::DimensionMismatch(format!(
            "direction of length {} and probe of length {}",
            u.len(),
            v.len()
        )));
    }
    let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u: Vec<f64> = u.iter().map(|x| x / un).collect();
    let mean = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let ratio = sigma0 * sigma0 / (sigma_k * sigma_k);
    let sd = (ratio + ratio * ratio).sqrt() * complement_norm(&u, v) / (n as f64).sqrt();
    Ok((mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::{estimate_bundle, BundleLevel};
    use crate::estimator::AlsConfig;
    use crate::spiked::{make_components, ComponentsMode, NoiseDistribution, SpikedModel};
    use proptest::prelude::*;

    /// Bisection on the cdf, used as an independent inverse.
    fn bisect_upper(p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 40.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 0.5 * erfc(mid / std::f64::consts::SQRT_2) > p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_values() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        let z = normal_quantile(0.025).unwrap();
        assert!((z - 1.9599640).abs() < 1e-6);
        assert!((z - bisect_upper(0.025)).abs() < 1e-9);
        let z = normal_quantile(0.005).unwrap();
        assert!((z - 2.5758293).abs() < 1e-6);
        assert!((z - bisect_upper(0.005)).abs() < 1e-9);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(0.7).is_err());
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(p in 1e-10f64..0.5) {
            let z = normal_quantile(p).unwrap();
            prop_assert!((normal_cdf(-z) - p).abs() <= 1e-9 * p.max(1e-3));
        }
    }

    #[test]
    fn auto_thresholds() {
        assert_eq!(auto_regime(&[10, 10], 200), Regime::A);
        assert_eq!(auto_regime(&[50, 50], 400), Regime::B);
        assert_eq!(auto_regime(&[200, 3], 400), Regime::C);
        // d = sqrt(n) exactly is not below sqrt(n)
        assert_eq!(auto_regime(&[20, 2], 400), Regime::B);
    }

    #[test]
    fn density_values() {
        let s3 = 3f64.sqrt() / 2.0;
        let mut u = vec![0.0; 10];
        u[0] = s3;
        u[1] = 0.5;
        let mut e1 = vec![0.0; 10];
        e1[0] = 1.0;
        let (m, sd) = theoretical_density(1.0, 2.0, &u, &e1, 200).unwrap();
        assert!((m - s3).abs() < 1e-15);
        let oracle = (0.3125f64 * 0.25 / 200.0).sqrt();
        assert!((sd - oracle).abs() < 1e-15);
        assert!((sd - 0.019764).abs() < 1e-6);
        assert_eq!(theoretical_density(0.0, 2.0, &u, &e1, 200).unwrap().1, 0.0);
        assert!(theoretical_density(1.0, 2.0, &u, &u, 200).unwrap().1 < 1e-15);
        assert!(theoretical_density(1.0, 0.0, &u, &e1, 200).is_err());
    }

    fn bundle(level: BundleLevel) -> EstimateBundle<f64> {
        let comps = make_components(&[8, 6], 2, ComponentsMode::PaperSim, 0).unwrap();
        let m = SpikedModel::new(vec![8, 6], vec![3.0, 2.0], 1.0, comps).unwrap();
        let s = m.sample(120, NoiseDistribution::StandardNormal, 9).unwrap();
        let cfg = AlsConfig {
            seed: 1,
            n_restarts: 2,
            ..AlsConfig::default()
        };
        estimate_bundle(&s, 2, &cfg, level).unwrap()
    }

    #[test]
    fn interval_shape_and_decision() {
        let b = bundle(BundleLevel::DoubleSplit);
        for choice in [RegimeChoice::A, RegimeChoice::B, RegimeChoice::C] {
            let t = LinearFormTarget::coordinate(0, 0, 0, 8).unwrap();
            let r = infer_linear_form(&b, &t, 0.05, choice).unwrap();
            assert!(r.lo <= r.point && r.point <= r.hi);
            let z = normal_quantile(0.025).unwrap();
            assert!(((r.hi - r.lo) - 2.0 * z * r.se).abs() < 1e-12);
            assert_eq!(r.reject, r.point.abs() >= z * r.se);
        }
    }

    #[test]
    fn probe_along_estimate_is_degenerate() {
        let b = bundle(BundleLevel::OneStep);
        let v: Vec<f64> = b.components[0].tilde_u[1].as_slice().to_vec();
        let t = LinearFormTarget::new(0, 1, v, "u").unwrap();
        let r = infer_linear_form(&b, &t, 0.05, RegimeChoice::A).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.se, 0.0);
        assert_eq!(r.lo, r.hi);
        assert!(r.z_stat.is_none());
    }

    #[test]
    fn missing_estimates_rejected() {
        let b = bundle(BundleLevel::Split);
        let t = LinearFormTarget::coordinate(0, 0, 1, 8).unwrap();
        assert!(matches!(
            infer_linear_form(&b, &t, 0.05, RegimeChoice::C),
            Err(MpcaError::InvalidInput(_))
        ));
        let one = bundle(BundleLevel::OneStep);
        assert!(infer_linear_form(&one, &t, 0.05, RegimeChoice::B).is_err());
        let mut clipped = b.clone();
        clipped.variances.clipped[0] = true;
        assert!(matches!(
            infer_linear_form(&clipped, &t, 0.05, RegimeChoice::A),
            Err(MpcaError::InferenceUnavailable(_))
        ));
        assert!(LinearFormTarget::new(0, 0, vec![0.0; 3], "0").is_err());
    }

    #[test]
    fn flipping_the_estimate_flips_the_interval() {
        let b = bundle(BundleLevel::Split);
        let mut f = b.clone();
        f.components[0].tilde_u[0] = f.components[0].tilde_u[0].negated();
        let cu = f.components[0].check_u.as_mut().unwrap();
        cu[0] = cu[0].negated();
        for choice in [RegimeChoice::A, RegimeChoice::B] {
            for i in 0..8 {
                let t = LinearFormTarget::coordinate(0, 0, i, 8).unwrap();
                let a = infer_linear_form(&b, &t, 0.05, choice).unwrap();
                let c = infer_linear_form(&f, &t, 0.05, choice).unwrap();
                assert!((a.point + c.point).abs() < 1e-15);
                assert!((a.lo + c.hi).abs() < 1e-15 && (a.hi + c.lo).abs() < 1e-15);
                assert_eq!(a.reject, c.reject);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn z_statistic_is_scale_invariant(c in 0.01f64..100.0, i in 0usize..8) {
            let b = bundle(BundleLevel::OneStep);
            let mut v = vec![0.3; 8];
            v[i] = 1.0;
            let t = LinearFormTarget::new(0, 0, v.clone(), "v").unwrap();
            let ts = LinearFormTarget::new(0, 0, v.iter().map(|x| c * x).collect(), "cv").unwrap();
            let a = infer_linear_form(&b, &t, 0.05, RegimeChoice::A).unwrap();
            let s = infer_linear_form(&b, &ts, 0.05, RegimeChoice::A).unwrap();
            prop_assert!((a.z_stat.unwrap() - s.z_stat.unwrap()).abs() < 1e-10);
            prop_assert_eq!(a.reject, s.reject);
        }
    }
}
