//! Bias corrections for the sample PCs: the one-step update `ũ`, the
//! split/cross-fit estimator `ǔ` with its explicit factor `b`, and the
//! double-split empirical factor `b̂`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_variances, CovarianceView, VarianceEstimates};
use crate::error::{MpcaError, Result};
use crate::estimator::{fit_mpca, AlsConfig, MpcaFit};
use crate::linalg::{leading_eigenpair, EIG_MAX_ITERS};
use crate::rng::{seeded_rng, Stream};
use crate::scalar::Scalar;
use crate::spiked::SampleSet;
use crate::tensor::{dot, norm, RankOnePC, UnitVector};

/// How much of the bundle to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BundleLevel {
    /// Full-data fit and one-step update.
    OneStep,
    /// Adds the two halves and the cross-fit estimator with explicit bias.
    Split,
    /// Adds the four quarters and the empirical bias.
    DoubleSplit,
}

/// Outcome of the empirical bias for one `(k, q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum EmpiricalBias<T> {
    Ok { value: T },
    /// A quarter inner product was not positive.
    Unavailable { reason: String },
}

impl<T: Copy> EmpiricalBias<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            EmpiricalBias::Ok { value } => Some(*value),
            EmpiricalBias::Unavailable { .. } => None,
        }
    }
}

/// Per-component estimates, all indexed by mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentEstimates<T> {
    pub hat_u: RankOnePC<T>,
    pub tilde_u: Vec<UnitVector<T>>,
    pub check_u: Option<Vec<UnitVector<T>>>,
    pub check_u_halves: Option<Vec<[UnitVector<T>; 2]>>,
    /// `[<û^[1][1], û^[1][2]>, <û^[2][1], û^[2][2]>]` per mode.
    pub quarter_inner_products: Option<Vec<[T; 2]>>,
    /// Explicit factor evaluated at `σ̂_0^2`, `σ̂_k^2` and the split sample
    /// size; `None` when `σ̂_k^2` was clipped.
    pub b_explicit: Option<Vec<T>>,
    pub b_empirical: Option<Vec<EmpiricalBias<T>>>,
}

/// Relabeling of one half's components against the full-data fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfRelabel<T> {
    /// `perm[k]` is the half component matched to full component `k`.
    pub perm: Vec<usize>,
    /// Modes flipped after matching, per full component.
    pub flipped: Vec<Vec<usize>>,
    pub tensor_sin_angles: Vec<T>,
    pub mode_sin_angles: Vec<Vec<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitInfo<T> {
    /// Seeded shuffle of `0..n`; half 1 takes the even positions, half 2 the
    /// odd ones.
    pub shuffle: Vec<usize>,
    /// Observations used by the halves (n rounded down to even).
    pub n_split: usize,
    /// Observations used by the quarters (n rounded down to a multiple of 4).
    pub n_quarter: Option<usize>,
    pub halves: [Vec<RankOnePC<T>>; 2],
    pub relabel: [HalfRelabel<T>; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateBundle<T> {
    pub dims: Vec<usize>,
    pub n: usize,
    pub r: usize,
    pub variances: VarianceEstimates<T>,
    pub components: Vec<ComponentEstimates<T>>,
    pub split: Option<SplitInfo<T>>,
    pub converged: bool,
}

impl<T: Scalar> EstimateBundle<T> {
    pub fn level(&self) -> BundleLevel {
        let quarters = self
            .components
            .first()
            .is_some_and(|c| c.b_empirical.is_some());
        match (&self.split, quarters) {
            (None, _) => BundleLevel::OneStep,
            (Some(_), false) => BundleLevel::Split,
            (Some(_), true) => BundleLevel::DoubleSplit,
        }
    }

    /// Effective sample size behind the split estimators.
    pub fn n_split(&self) -> usize {
        self.split.as_ref().map_or(self.n, |s| s.n_split)
    }
}

/// Fits `r` components and computes every estimate required by `level`.
pub fn estimate_bundle<T: Scalar>(
    data: &SampleSet<T>,
    r: usize,
    cfg: &AlsConfig,
    level: BundleLevel,
) -> Result<EstimateBundle<T>> {
    let full = fit_mpca(data, r, cfg)?;
    let mut bundle = one_step_bundle(data, full)?;
    if level >= BundleLevel::Split {
        split_fit(&mut bundle, data, cfg)?;
        cross_fit_check_u(&mut bundle, data)?;
        attach_explicit_bias(&mut bundle);
    }
    if level >= BundleLevel::DoubleSplit {
        let ips = quarter_inner_products(&bundle, data)?;
        for (c, ips_k) in bundle.components.iter_mut().zip(ips) {
            let halves = c.check_u_halves.as_ref().expect("cross-fit ran");
            c.b_empirical = Some(
                ips_k
                    .iter()
                    .zip(halves)
                    .map(|(&ip, [a, b])| empirical_bias_from(a, b, ip))
                    .collect(),
            );
            c.quarter_inner_products = Some(ips_k);
        }
        if let Some(s) = bundle.split.as_mut() {
            s.n_quarter = Some(quarter_len(s.n_split) * 4);
        }
    }
    Ok(bundle)
}

fn one_step_bundle<T: Scalar>(data: &SampleSet<T>, full: MpcaFit<T>) -> Result<EstimateBundle<T>> {
    let converged = full.all_converged();
    let variances = estimate_variances(data, &full.components)?;
    let components = full
        .components
        .into_iter()
        .map(|hat_u| {
            let tilde_u = one_step_update(data, &hat_u)?;
            Ok(ComponentEstimates {
                hat_u,
                tilde_u,
                check_u: None,
                check_u_halves: None,
                quarter_inner_products: None,
                b_explicit: None,
                b_empirical: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateBundle {
        dims: data.dims().to_vec(),
        n: data.n(),
        r: components.len(),
        variances,
        components,
        split: None,
        converged,
    })
}

/// Leading eigenvector of the undeflated covariance contracted with `fixed`
/// on every mode except `q`, signed to agree with `reference`.
fn contracted_leading<T: Scalar>(
    view: &CovarianceView<T>,
    fixed: &[&[T]],
    q: usize,
    reference: &[T],
) -> Result<UnitVector<T>> {
    let m = view.contracted_matrix(fixed, q)?;
    let e = leading_eigenpair(&m.view(), Some(reference), T::eig_tol(), EIG_MAX_ITERS)?;
    let v = UnitVector::new(e.vector)?;
    Ok(v.aligned_with(reference))
}

/// `ũ_k^(q)`: leading eigenvector of `Σ̂` with every other mode fixed at
/// `û_k`, without deflation.
pub fn one_step_update<T: Scalar>(data: &SampleSet<T>, hat_u: &RankOnePC<T>) -> Result<Vec<UnitVector<T>>> {
    let view = CovarianceView::new(data);
    let fixed = hat_u.factor_slices();
    (0..hat_u.order())
        .map(|q| contracted_leading(&view, &fixed, q, fixed[q]))
        .collect()
}

fn half_indices(shuffle: &[usize], n_split: usize) -> [Vec<usize>; 2] {
    let mut h = [Vec::with_capacity(n_split / 2), Vec::with_capacity(n_split / 2)];
    for (pos, &i) in shuffle[..n_split].iter().enumerate() {
        h[pos % 2].push(i);
    }
    h
}

fn quarter_len(n_split: usize) -> usize {
    n_split / 4
}

/// Greedy relabeling of `half` against `full` by smallest tensor sine
/// angle over unused indices, then mode-wise sign alignment.
pub fn relabel_half<T: Scalar>(
    full: &[RankOnePC<T>],
    half: &[RankOnePC<T>],
) -> Result<(Vec<RankOnePC<T>>, HalfRelabel<T>)> {
    if full.len() != half.len() {
        return Err(MpcaError::DimensionMismatch(format!(
            "{} half components for {} full components",
            half.len(),
            full.len()
        )));
    }
    let r = full.len();
    let mut used = vec![false; r];
    let mut out = Vec::with_capacity(r);
    let mut info = HalfRelabel {
        perm: Vec::with_capacity(r),
        flipped: Vec::with_capacity(r),
        tensor_sin_angles: Vec::with_capacity(r),
        mode_sin_angles: Vec::with_capacity(r),
    };
    for f in full {
        let mut best: Option<(usize, T)> = None;
        for (l, h) in half.iter().enumerate().filter(|(l, _)| !used[*l]) {
            let s = f.sin_angle(h)?;
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((l, s));
            }
        }
        let (l, s) = best.expect("an unused half component remains");
        used[l] = true;
        let flips: Vec<usize> = (0..f.order())
            .filter(|&q| half[l].factor(q).dot(f.factor(q).as_slice()) < T::zero())
            .collect();
        let aligned = half[l].with_flipped(&flips);
        info.mode_sin_angles.push(
            (0..f.order())
                .map(|q| aligned.factor(q).sin_angle(f.factor(q)))
                .collect::<Result<_>>()?,
        );
        info.perm.push(l);
        info.flipped.push(flips);
        info.tensor_sin_angles.push(s);
        out.push(aligned);
    }
    Ok((out, info))
}

/// Splits the observations into two halves after a seeded shuffle, fits
/// each half and relabels it against the full-data components.
pub fn split_fit<T: Scalar>(bundle: &mut EstimateBundle<T>, data: &SampleSet<T>, cfg: &AlsConfig) -> Result<()> {
    let n = data.n();
    if n < 2 {
        return Err(MpcaError::InvalidInput("splitting needs at least two observations".into()));
    }
    let mut shuffle: Vec<usize> = (0..n).collect();
    shuffle.shuffle(&mut seeded_rng(cfg.seed, Stream::Split));
    let n_split = n - n % 2;
    let idx = half_indices(&shuffle, n_split);
    let full: Vec<RankOnePC<T>> = bundle.components.iter().map(|c| c.hat_u.clone()).collect();
    let mut halves: Vec<Vec<RankOnePC<T>>> = Vec::with_capacity(2);
    let mut relabels = Vec::with_capacity(2);
    for ix in &idx {
        let sub = data.subset(ix)?;
        let fit = fit_mpca(&sub, bundle.r, cfg)?;
        bundle.converged &= fit.all_converged();
        let (aligned, info) = relabel_half(&full, &fit.components)?;
        halves.push(aligned);
        relabels.push(info);
    }
    let h2 = halves.pop().expect("two halves");
    let h1 = halves.pop().expect("two halves");
    let i2 = relabels.pop().expect("two halves");
    let i1 = relabels.pop().expect("two halves");
    bundle.split = Some(SplitInfo {
        shuffle,
        n_split,
        n_quarter: None,
        halves: [h1, h2],
        relabel: [i1, i2],
    });
    Ok(())
}

/// Cross-fit `ǔ`: half 1's covariance contracted with half 2's directions
/// and vice versa, sign-aligned and averaged.
pub fn cross_fit_check_u<T: Scalar>(bundle: &mut EstimateBundle<T>, data: &SampleSet<T>) -> Result<()> {
    let split = bundle
        .split
        .as_ref()
        .ok_or_else(|| MpcaError::InvalidInput("cross-fit needs split halves".into()))?;
    let idx = half_indices(&split.shuffle, split.n_split);
    let subs = [data.subset(&idx[0])?, data.subset(&idx[1])?];
    let views = [CovarianceView::new(&subs[0]), CovarianceView::new(&subs[1])];
    let mut results = Vec::with_capacity(bundle.r);
    for k in 0..bundle.r {
        let hat = &bundle.components[k].hat_u;
        let p = hat.order();
        let mut halves_k = Vec::with_capacity(p);
        let mut check_k = Vec::with_capacity(p);
        for q in 0..p {
            let reference = hat.factor(q).as_slice();
            let other: [Vec<&[T]>; 2] = [
                split.halves[1][k].factor_slices(),
                split.halves[0][k].factor_slices(),
            ];
            let a = contracted_leading(&views[0], &other[0], q, reference)?;
            let mut b = contracted_leading(&views[1], &other[1], q, reference)?;
            if a.dot(b.as_slice()) < T::zero() {
                b = b.negated();
            }
            let sum: Vec<T> = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x + y).collect();
            check_k.push(UnitVector::new(sum)?);
            halves_k.push([a, b]);
        }
        results.push((check_k, halves_k));
    }
    for (c, (check, halves)) in bundle.components.iter_mut().zip(results) {
        c.check_u = Some(check);
        c.check_u_halves = Some(halves);
    }
    Ok(())
}

/// `b = sqrt(1 + (d_q/n)(σ_0^2/σ_k^2 + σ_0^4/σ_k^4)) - 1`.
pub fn explicit_bias<T: Scalar>(d_q: usize, n: usize, sigma0_sq: T, sigma_k_sq: T) -> Result<T> {
    if !(sigma_k_sq > T::zero()) {
        return Err(MpcaError::InferenceUnavailable(
            "explicit bias needs a positive signal variance".into(),
        ));
    }
    if n == 0 || sigma0_sq < T::zero() {
        return Err(MpcaError::InvalidInput("explicit bias needs n > 0 and sigma0^2 >= 0".into()));
    }
    let ratio = sigma0_sq / sigma_k_sq;
    let x = T::of_usize(d_q) / T::of_usize(n) * (ratio + ratio * ratio);
    // sqrt(1+x) - 1 without cancellation
    Ok(x / ((T::one() + x).sqrt() + T::one()))
}

fn attach_explicit_bias<T: Scalar>(bundle: &mut EstimateBundle<T>) {
    let n = bundle.n_split();
    let s0 = bundle.variances.sigma0_sq_hat;
    for (k, c) in bundle.components.iter_mut().enumerate() {
        let sk = bundle.variances.sigma_sq_hat[k];
        c.b_explicit = bundle
            .dims
            .iter()
            .map(|&d| explicit_bias(d, n, s0, sk).ok())
            .collect();
    }
}

/// Double-split factor `b̂` per component and mode:
/// `‖ǔ^[1] + ǔ^[2]‖ / (sqrt<û^[1][1], û^[1][2]> + sqrt<û^[2][1], û^[2][2]>) - 1`.
pub fn empirical_bias<T: Scalar>(bundle: &EstimateBundle<T>, data: &SampleSet<T>) -> Result<Vec<Vec<EmpiricalBias<T>>>> {
    let ips = quarter_inner_products(bundle, data)?;
    let mut out = Vec::with_capacity(bundle.r);
    for (comp, ips_k) in bundle.components.iter().zip(ips) {
        let halves = comp.check_u_halves.as_ref().expect("checked by quarter_inner_products");
        out.push(
            ips_k
                .into_iter()
                .zip(halves)
                .map(|(ip, [a, b])| empirical_bias_from(a, b, ip))
                .collect(),
        );
    }
    Ok(out)
}

fn empirical_bias_from<T: Scalar>(a: &UnitVector<T>, b: &UnitVector<T>, ips: [T; 2]) -> EmpiricalBias<T> {
    if !ips.iter().all(|&x| x > T::zero()) {
        return EmpiricalBias::Unavailable {
            reason: format!("quarter inner products ({}, {}) are not both positive", ips[0], ips[1]),
        };
    }
    let sum: Vec<T> = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x + y).collect();
    EmpiricalBias::Ok {
        value: norm(&sum) / (ips[0].sqrt() + ips[1].sqrt()) - T::one(),
    }
}

/// Quarter inner products per component and mode, as used by `b̂`.
pub fn quarter_inner_products<T: Scalar>(bundle: &EstimateBundle<T>, data: &SampleSet<T>) -> Result<Vec<Vec<[T; 2]>>> {
    let split = bundle
        .split
        .as_ref()
        .ok_or_else(|| MpcaError::InvalidInput("quarters need split halves".into()))?;
    let m = quarter_len(split.n_split);
    if m == 0 {
        return Err(MpcaError::InvalidInput("quarters need at least four observations".into()));
    }
    let idx = half_indices(&split.shuffle, split.n_split);
    let mut sets = Vec::with_capacity(4);
    for h in &idx {
        for j in 0..2 {
            let q: Vec<usize> = h.iter().skip(j).step_by(2).take(m).copied().collect();
            sets.push(data.subset(&q)?);
        }
    }
    let views: Vec<CovarianceView<T>> = sets.iter().map(CovarianceView::new).collect();
    let mut out = Vec::with_capacity(bundle.r);
    for k in 0..bundle.r {
        let halves = bundle.components[k]
            .check_u_halves
            .as_ref()
            .ok_or_else(|| MpcaError::InvalidInput("quarters need the cross-fit estimator".into()))?;
        let mut per_mode = Vec::new();
        for q in 0..bundle.dims.len() {
            let mut ips = [T::zero(); 2];
            for h in 0..2 {
                let fixed = split.halves[1 - h][k].factor_slices();
                let reference = halves[q][h].as_slice();
                let a = contracted_leading(&views[2 * h], &fixed, q, reference)?;
                let b = contracted_leading(&views[2 * h + 1], &fixed, q, reference)?;
                ips[h] = dot(a.as_slice(), b.as_slice());
            }
            per_mode.push(ips);
        }
        out.push(per_mode);
    }
    Ok(out)
}
