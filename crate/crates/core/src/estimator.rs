//! Sample multiway PCs: best rank-one maximizers of the (deflated) sample
//! covariance, found by alternating leading-eigenvector updates, and the
//! greedy matching of estimates to ground-truth components.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceView;
use crate::error::{MpcaError, Result};
use crate::linalg::{leading_eigenpair, rayleigh_residual, EIG_MAX_ITERS};
use crate::rng::restart_rng;
use crate::scalar::Scalar;
use crate::spiked::{SampleSet, SpikedModel};
use crate::tensor::{dot, norm, RankOnePC, UnitVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every restart starts from random unit vectors.
    Random,
    /// Restart 0 sets each mode to the leading eigenvector of its contracted
    /// matrix with the other modes at random unit vectors; later restarts are
    /// random.
    ContractedEig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsConfig {
    pub max_iters: usize,
    /// Relative change of the objective between sweeps.
    pub rel_tol: f64,
    /// Largest change of any mode factor between sweeps.
    pub factor_tol: f64,
    pub n_restarts: usize,
    /// A later restart stops once every factor has `1 - |cos| <= merge_tol`
    /// against the best solution so far, since it can only reach that same
    /// optimum. 0 runs every restart to convergence.
    pub merge_tol: f64,
    /// A later restart also stops once its objective, extrapolated along the
    /// geometric decay of its recent gains (with a safety factor), cannot
    /// reach the best objective so far.
    pub prune_stalled: bool,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            max_iters: 500,
            rel_tol: 1e-10,
            factor_tol: 1e-10,
            n_restarts: 8,
            merge_tol: 1e-6,
            prune_stalled: true,
            init_mode: InitMode::ContractedEig,
            seed: 0,
        }
    }
}

impl AlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(MpcaError::Config("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.factor_tol > 0.0) {
            return Err(MpcaError::Config("tolerances must be positive".into()));
        }
        if self.n_restarts == 0 {
            return Err(MpcaError::Config("n_restarts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.merge_tol) {
            return Err(MpcaError::Config("merge_tol must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlsFit<T> {
    /// Unit factors; the value is the achieved objective `Σ̂(w, w)` under the
    /// view's deflation.
    pub pc: RankOnePC<T>,
    pub converged: bool,
    pub sweeps: usize,
    /// Index of the winning restart.
    pub restart: usize,
    /// Objective after initialization and after every mode update, for every
    /// restart.
    pub traces: Vec<Vec<T>>,
    /// Largest `|M_q w_q - (w_q' M_q w_q) w_q|` over modes at the returned
    /// point.
    pub stationarity: T,
}

/// Best rank-one maximizer of `Σ̂(w, w)` over the view.
pub fn rank_one_als<T: Scalar>(view: &CovarianceView<T>, cfg: &AlsConfig) -> Result<AlsFit<T>> {
    rank_one_als_stream(view, cfg, 0)
}

fn rank_one_als_stream<T: Scalar>(
    view: &CovarianceView<T>,
    cfg: &AlsConfig,
    component: usize,
) -> Result<AlsFit<T>> {
    cfg.validate()?;
    if view.data().is_all_zero() {
        return Err(MpcaError::Degenerate("all-zero data has no direction of positive variance".into()));
    }
    let mut best: Option<(SweepOutcome<T>, usize)> = None;
    let mut traces = Vec::with_capacity(cfg.n_restarts);
    for j in 0..cfg.n_restarts {
        let init = initial_factors(view, cfg, component, j)?;
        let incumbent = best.as_ref().map(|(b, _)| (b.obj, b.ws.as_slice()));
        let mut out = als_sweeps(view, cfg, init, incumbent)?;
        traces.push(std::mem::take(&mut out.trace));
        let better = match &best {
            None => true,
            Some((b, _)) => !out.abandoned && out.obj > b.obj,
        };
        if better {
            best = Some((out, j));
        }
    }
    let (SweepOutcome { obj, ws, converged, sweeps, .. }, restart) = best.expect("at least one restart");
    if !(obj > T::zero()) {
        return Err(MpcaError::Degenerate(
            "no direction of positive variance remains after deflation".into(),
        ));
    }
    let refs: Vec<&[T]> = ws.iter().map(|w| w.as_slice()).collect();
    let stationarity = stationarity_residual(view, &refs)?;
    let factors = ws
        .into_iter()
        .map(UnitVector::new)
        .collect::<Result<Vec<_>>>()?;
    Ok(AlsFit {
        pc: RankOnePC::new(factors, obj.max(T::zero()))?,
        converged,
        sweeps,
        restart,
        traces,
        stationarity,
    })
}

/// Largest eigen-residual of the factors in their own contracted matrices.
pub fn stationarity_residual<T: Scalar>(view: &CovarianceView<T>, ws: &[&[T]]) -> Result<T> {
    let mut worst = T::zero();
    for q in 0..ws.len() {
        let m = view.contracted_matrix(ws, q)?;
        let (_, r) = rayleigh_residual(&m.view(), ws[q]);
        worst = worst.max(r);
    }
    Ok(worst)
}

fn random_unit_in_range<T: Scalar>(
    view: &CovarianceView<T>,
    q: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<T>> {
    let d = view.dims()[q];
    for _ in 0..16 {
        let g: Vec<T> = (0..d).map(|_| T::of(StandardNormal.sample(rng))).collect();
        let pg = view.project(q, &g);
        let n = norm(&pg);
        if n > T::of(1e-8) * norm(&g) {
            return Ok(pg.into_iter().map(|x| x / n).collect());
        }
    }
    Err(MpcaError::Degenerate(format!("mode {q} has an empty search space after deflation")))
}

fn initial_factors<T: Scalar>(
    view: &CovarianceView<T>,
    cfg: &AlsConfig,
    component: usize,
    restart: usize,
) -> Result<Vec<Vec<T>>> {
    let mut rng = restart_rng(cfg.seed, component, restart);
    let p = view.dims().len();
    let random: Vec<Vec<T>> = (0..p)
        .map(|q| random_unit_in_range(view, q, &mut rng))
        .collect::<Result<_>>()?;
    if cfg.init_mode == InitMode::Random || restart > 0 || p == 1 {
        return Ok(random);
    }
    let refs: Vec<&[T]> = random.iter().map(|w| w.as_slice()).collect();
    let mut out = Vec::with_capacity(p);
    for q in 0..p {
        let m = view.contracted_matrix(&refs, q)?;
        match leading_eigenpair(&m.view(), Some(&random[q]), T::eig_tol(), EIG_MAX_ITERS) {
            Ok(e) => out.push(project_unit(view, q, &e.vector).unwrap_or_else(|| random[q].clone())),
            Err(MpcaError::Degenerate(_)) => out.push(random[q].clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn project_unit<T: Scalar>(view: &CovarianceView<T>, q: usize, v: &[T]) -> Option<Vec<T>> {
    let pv = view.project(q, v);
    let n = norm(&pv);
    if n > T::of(1e-8) {
        Some(pv.into_iter().map(|x| x / n).collect())
    } else {
        None
    }
}

const STALL_MIN_SWEEPS: usize = 10;
const STALL_WINDOW: usize = 4;
const STALL_MAX_RATE: f64 = 0.99;
const STALL_SAFETY: f64 = 10.0;

struct SweepOutcome<T> {
    obj: T,
    ws: Vec<Vec<T>>,
    converged: bool,
    /// Stopped early because it could not beat the incumbent.
    abandoned: bool,
    sweeps: usize,
    trace: Vec<T>,
}

fn als_sweeps<T: Scalar>(
    view: &CovarianceView<T>,
    cfg: &AlsConfig,
    mut ws: Vec<Vec<T>>,
    incumbent: Option<(T, &[Vec<T>])>,
) -> Result<SweepOutcome<T>> {
    let p = ws.len();
    let merge = T::one() - T::of(cfg.merge_tol);
    let mut gains: Vec<T> = Vec::new();
    let rel_tol = T::of(cfg.rel_tol);
    let factor_tol = T::of(cfg.factor_tol);
    let mut trace = Vec::with_capacity(2 * p + 1);
    let refs: Vec<&[T]> = ws.iter().map(|w| w.as_slice()).collect();
    let mut obj = view.quadratic(&refs)?;
    trace.push(obj);
    for sweep in 1..=cfg.max_iters {
        let prev = obj;
        let mut max_change = T::zero();
        for q in 0..p {
            let m = {
                let refs: Vec<&[T]> = ws.iter().map(|w| w.as_slice()).collect();
                view.contracted_matrix(&refs, q)?
            };
            let e = match leading_eigenpair(&m.view(), Some(&ws[q]), T::eig_tol(), EIG_MAX_ITERS) {
                Ok(e) => e,
                // nothing left to gain in this mode
                Err(MpcaError::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            let Some(mut w) = project_unit(view, q, &e.vector) else {
                continue;
            };
            if dot(&w, &ws[q]) < T::zero() {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let (cand, _) = rayleigh_residual(&m.view(), &w);
            let (current, _) = rayleigh_residual(&m.view(), &ws[q]);
            // keep the old factor only if the update is worse beyond rounding
            let slack = T::of(16.0) * T::epsilon() * current.abs();
            if cand < current - slack {
                trace.push(current);
                continue;
            }
            let change = w
                .iter()
                .zip(&ws[q])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            max_change = max_change.max(change);
            ws[q] = w;
            obj = cand;
            trace.push(cand);
        }
        if let Some((inc_obj, inc)) = incumbent {
            let merged = cfg.merge_tol > 0.0 && ws.iter().zip(inc).all(|(w, b)| dot(w, b).abs() >= merge);
            gains.push(obj - prev);
            let stalled = cfg.prune_stalled && sweep >= STALL_MIN_SWEEPS && {
                let g = &gains[gains.len() - STALL_WINDOW..];
                // slowest recent decay rate; anything not shrinking is kept
                let rho = g.windows(2).map(|w| w[1] / w[0]).fold(T::zero(), |a, r| a.max(r));
                g.iter().all(|&x| x > T::zero()) && rho < T::of(STALL_MAX_RATE) && {
                    let tail = g[STALL_WINDOW - 1] * rho / (T::one() - rho);
                    obj + T::of(STALL_SAFETY) * tail < inc_obj - T::of(1e-8) * inc_obj.abs()
                }
            };
            if merged || stalled {
                return Ok(SweepOutcome { obj, ws, converged: false, abandoned: true, sweeps: sweep, trace });
            }
        }
        let scale = obj.abs().max(T::min_positive_value());
        if (obj - prev).abs() <= rel_tol * scale && max_change <= factor_tol {
            // small steps can hide slow linear convergence, so confirm with
            // the eigen-residual of every mode
            let refs: Vec<&[T]> = ws.iter().map(|w| w.as_slice()).collect();
            if stationarity_residual(view, &refs)? <= factor_tol * scale {
                return Ok(SweepOutcome { obj, ws, converged: true, abandoned: false, sweeps: sweep, trace });
            }
        }
    }
    Ok(SweepOutcome { obj, ws, converged: false, abandoned: false, sweeps: cfg.max_iters, trace })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcaFit<T> {
    pub components: Vec<RankOnePC<T>>,
    pub fits: Vec<AlsFit<T>>,
}

impl<T> MpcaFit<T> {
    pub fn all_converged(&self) -> bool {
        self.fits.iter().all(|f| f.converged)
    }
}

/// Successive extraction of `r` multiway PCs, deflating every mode by the
/// factors found so far.
pub fn fit_mpca<T: Scalar>(data: &SampleSet<T>, r: usize, cfg: &AlsConfig) -> Result<MpcaFit<T>> {
    cfg.validate()?;
    let dmin = *data.dims().iter().min().expect("nonempty dims");
    if r > dmin {
        return Err(MpcaError::InvalidInput(format!(
            "r = {r} exceeds the smallest mode dimension {dmin}"
        )));
    }
    let mut components: Vec<RankOnePC<T>> = Vec::with_capacity(r);
    let mut fits = Vec::with_capacity(r);
    for k in 0..r {
        let view = CovarianceView::deflated(data, &components)?;
        let fit = rank_one_als_stream(&view, cfg, k)?;
        components.push(fit.pc.clone());
        fits.push(fit);
    }
    Ok(MpcaFit { components, fits })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult<T> {
    /// `perm[k]` is the truth index matched to estimate `k`.
    pub perm: Vec<usize>,
    /// `signs[k][q]` makes `<signs * û_k^(q), u_perm[k]^(q)> >= 0`.
    pub signs: Vec<Vec<i8>>,
    /// `sigma_l^2 |prod_q <u_l^(q), û_k^(q)>|` at the chosen `l`.
    pub scores: Vec<T>,
    /// Estimates whose best score was an exact tie (lowest index taken).
    pub ties: Vec<usize>,
}

impl<T: Scalar> MatchResult<T> {
    /// Reorders and sign-flips estimates so that entry `l` estimates truth `l`.
    pub fn apply(&self, estimates: &[RankOnePC<T>]) -> Vec<RankOnePC<T>> {
        let mut out: Vec<Option<RankOnePC<T>>> = vec![None; estimates.len()];
        for (k, est) in estimates.iter().enumerate() {
            let flips: Vec<usize> = self.signs[k]
                .iter()
                .enumerate()
                .filter(|(_, &s)| s < 0)
                .map(|(q, _)| q)
                .collect();
            out[self.perm[k]] = Some(est.with_flipped(&flips));
        }
        out.into_iter().map(|o| o.expect("perm is a bijection")).collect()
    }
}

/// Greedy matching: `π(k) = argmax_{l ∉ π([k-1])} σ_l^2 |∏_q <u_l^(q), û_k^(q)>|`.
pub fn match_permutation<T: Scalar>(
    estimates: &[RankOnePC<T>],
    truth: &SpikedModel<T>,
) -> Result<MatchResult<T>> {
    let r = truth.r();
    if estimates.len() != r {
        return Err(MpcaError::InvalidInput(format!(
            "{} estimates for {r} true components",
            estimates.len()
        )));
    }
    let mut used = vec![false; r];
    let mut perm = Vec::with_capacity(r);
    let mut scores = Vec::with_capacity(r);
    let mut ties = Vec::new();
    let mut signs = Vec::with_capacity(r);
    for (k, est) in estimates.iter().enumerate() {
        let mut best: Option<(usize, T)> = None;
        let mut tied = false;
        for l in (0..r).filter(|&l| !used[l]) {
            let s = truth.sigma()[l];
            let score = s * s * truth.components()[l].tensor_inner(est)?.abs();
            match best {
                None => best = Some((l, score)),
                Some((_, b)) if score > b => {
                    best = Some((l, score));
                    tied = false;
                }
                Some((_, b)) if score == b => tied = true,
                _ => {}
            }
        }
        let (l, score) = best.expect("an unmatched index remains");
        used[l] = true;
        perm.push(l);
        scores.push(score);
        if tied {
            ties.push(k);
        }
        signs.push(
            est.factors()
                .iter()
                .zip(truth.components()[l].factors())
                .map(|(e, u)| if e.dot(u.as_slice()) < T::zero() { -1 } else { 1 })
                .collect(),
        );
    }
    Ok(MatchResult {
        perm,
        signs,
        scores,
        ties,
    })
}
