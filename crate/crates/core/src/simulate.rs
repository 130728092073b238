//! Monte-Carlo experiments on spiked models: repeated sampling, fitting,
//! debiasing and inference, with truth-referenced reordering, coverage
//! counts and histogram tables.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{estimate_bundle, BundleLevel, EstimateBundle};
use crate::error::{MpcaError, Result};
use crate::estimator::AlsConfig;
use crate::inference::{infer_linear_form, theoretical_density, LinearFormTarget, Regime, RegimeChoice};
use crate::io::{components_json, write_json, write_samples_csv};
use crate::spiked::{ComponentsMode, ModelConfig, NoiseDistribution, SampleSet, SpikedModel};
use crate::tensor::{dot, UnitVector};

/// `(k, q, coord)`, all 1-based as in the exported tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub k: usize,
    pub q: usize,
    pub coord: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dims: Vec<usize>,
    pub n: usize,
    pub r: usize,
    pub sigma: Vec<f64>,
    #[serde(default = "one")]
    pub sigma0: f64,
    #[serde(default = "gaussian")]
    pub noise: NoiseDistribution,
    #[serde(default = "paper_sim")]
    pub components_mode: ComponentsMode,
    #[serde(default = "three_hundred")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "auto")]
    pub regime: RegimeChoice,
    #[serde(default = "five_percent")]
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<TargetSpec>,
    #[serde(default = "thirty")]
    pub bins: usize,
    #[serde(default)]
    pub als: AlsConfig,
}

fn one() -> f64 {
    1.0
}
fn gaussian() -> NoiseDistribution {
    NoiseDistribution::StandardNormal
}
fn paper_sim() -> ComponentsMode {
    ComponentsMode::PaperSim
}
fn three_hundred() -> usize {
    300
}
fn auto() -> RegimeChoice {
    RegimeChoice::Auto
}
fn five_percent() -> f64 {
    0.05
}
fn thirty() -> usize {
    30
}

/// First three coordinates of `u_1^(1)` and the first two of `u_2^(1)`.
pub fn default_targets() -> Vec<TargetSpec> {
    [(1, 1, 1), (1, 1, 2), (1, 1, 3), (2, 1, 1), (2, 1, 2)]
        .into_iter()
        .map(|(k, q, coord)| TargetSpec { k, q, coord })
        .collect()
}

pub const PRESETS: [&str; 4] = ["paper-low", "paper-high", "paper-poisson-low", "paper-poisson-high"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (d, n, s, noise) = match name {
            "paper-low" => (10, 200, 2.0, NoiseDistribution::StandardNormal),
            "paper-high" => (50, 400, 3.0, NoiseDistribution::StandardNormal),
            "paper-poisson-low" => (10, 400, 3.0, NoiseDistribution::CenteredPoisson),
            "paper-poisson-high" => (50, 400, 3.0, NoiseDistribution::CenteredPoisson),
            other => {
                return Err(MpcaError::Config(format!(
                    "unknown preset '{other}' (one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(RunConfig {
            dims: vec![d, d],
            n,
            r: 2,
            sigma: vec![s, s],
            sigma0: 1.0,
            noise,
            components_mode: ComponentsMode::PaperSim,
            replicates: 300,
            seed: 0,
            regime: RegimeChoice::Auto,
            alpha: 0.05,
            targets: default_targets(),
            bins: 30,
            als: AlsConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(MpcaError::Config("replicates must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MpcaError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.n < 4 {
            return Err(MpcaError::Config("n must be at least 4 for the split estimators".into()));
        }
        if self.bins == 0 {
            return Err(MpcaError::Config("bins must be >= 1".into()));
        }
        self.model_config().validate()?;
        for t in &self.targets {
            if t.k == 0 || t.k > self.r || t.q == 0 || t.q > self.dims.len() || t.coord == 0 || t.coord > self.dims[t.q - 1] {
                return Err(MpcaError::Config(format!("target {t:?} out of range")));
            }
        }
        self.als.validate()
    }

    /// The model; random components are drawn once from the base seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dims: self.dims.clone(),
            r: self.r,
            sigma: self.sigma.clone(),
            sigma0: self.sigma0,
            components_mode: self.components_mode,
            seed: self.seed,
            noise: self.noise,
        }
    }

    pub fn replicate_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(rep as u64)
    }

    pub fn resolved_regime(&self) -> Regime {
        self.regime.resolve(&self.dims, self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeEstimate {
    pub regime: Regime,
    pub point: Option<f64>,
    pub se: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub covered: Option<bool>,
    pub reject: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unavailable: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub k: usize,
    pub q: usize,
    pub coord: usize,
    pub truth: f64,
    pub estimates: Vec<RegimeEstimate>,
}

impl TargetRecord {
    pub fn estimate(&self, regime: Regime) -> Option<&RegimeEstimate> {
        self.estimates.iter().find(|e| e.regime == regime)
    }
}

/// Per true component, after reordering and sign alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    pub k: usize,
    /// `sin∠(û, u)` per mode (matched by the greedy permutation).
    pub hat_sin: Vec<f64>,
    /// `<ũ^(q), u^(q)>` per mode.
    pub tilde_dot_u: Vec<f64>,
    /// `<ǔ^(q), u^(q)>` per mode.
    pub check_dot_u: Vec<f64>,
    pub b_explicit: Vec<Option<f64>>,
    pub b_empirical: Vec<Option<f64>>,
    pub sigma_sq_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub converged: bool,
    pub sigma0_sq_hat: Option<f64>,
    pub components: Vec<ComponentDiagnostics>,
    pub targets: Vec<TargetRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub k: usize,
    pub q: usize,
    pub coord: usize,
    pub regime: Regime,
    pub truth: f64,
    pub available: usize,
    pub covered: usize,
    pub rejected: usize,
    pub mean: f64,
    pub sd: f64,
    /// `n` times the sample variance of the point estimates.
    pub n_var: f64,
    /// `n` times the asymptotic variance.
    pub n_var_theory: f64,
}

impl TargetSummary {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.available.max(1) as f64
    }

    pub fn rejection_rate(&self) -> f64 {
        self.rejected as f64 / self.available.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub k: usize,
    pub q: usize,
    pub coord: usize,
    pub regime: Regime,
    /// Asymptotic mean and standard deviation for the overlay.
    pub overlay_mean: f64,
    pub overlay_sd: f64,
    pub bins: Vec<HistogramBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCovariance {
    pub a: TargetSpec,
    pub b: TargetSpec,
    pub regime: Regime,
    /// Absent with fewer than two paired estimates.
    pub n_cov: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: RunConfig,
    pub regime: Regime,
    pub failed: usize,
    pub replicates: Vec<ReplicateRecord>,
    pub summaries: Vec<TargetSummary>,
    pub histograms: Vec<Histogram>,
    pub cross_covariances: Vec<CrossCovariance>,
}

impl SimReport {
    pub fn summary(&self, t: TargetSpec, regime: Regime) -> Option<&TargetSummary> {
        self.summaries
            .iter()
            .find(|s| s.k == t.k && s.q == t.q && s.coord == t.coord && s.regime == regime)
    }

    pub fn ok_replicates(&self) -> impl Iterator<Item = &ReplicateRecord> {
        self.replicates.iter().filter(|r| r.error.is_none())
    }
}

/// Greedy truth-referenced order: truth `l` takes the unused estimate whose
/// mode-1 vector has the smallest sine angle to `u_l^(1)`. With two
/// components this is the rule `sin∠(ǔ_1, u_1) <= sin∠(ǔ_2, u_1)`.
pub fn truth_order(estimates: &[Vec<UnitVector<f64>>], truth: &SpikedModel<f64>) -> Result<Vec<usize>> {
    let r = truth.r();
    let mut used = vec![false; estimates.len()];
    let mut order = Vec::with_capacity(r);
    for l in 0..r {
        let u = truth.components()[l].factor(0);
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in estimates.iter().enumerate().filter(|(j, _)| !used[*j]) {
            let s = e[0].sin_angle(u)?;
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.ok_or_else(|| MpcaError::InvalidInput("fewer estimates than components".into()))?;
        used[j] = true;
        order.push(j);
    }
    Ok(order)
}

fn regime_directions(bundle: &EstimateBundle<f64>, regime: Regime) -> Option<Vec<Vec<UnitVector<f64>>>> {
    bundle
        .components
        .iter()
        .map(|c| match regime {
            Regime::A => Some(c.tilde_u.clone()),
            Regime::B | Regime::C => c.check_u.clone(),
        })
        .collect()
}

fn run_replicate(cfg: &RunConfig, model: &SpikedModel<f64>, rep: usize) -> ReplicateRecord {
    let seed = cfg.replicate_seed(rep);
    match replicate_inner(cfg, model, rep, seed) {
        Ok(r) => r,
        Err(e) => ReplicateRecord {
            index: rep,
            seed,
            error: Some(e.to_string()),
            converged: false,
            sigma0_sq_hat: None,
            components: Vec::new(),
            targets: Vec::new(),
        },
    }
}

/// Draws replicate `rep` of the experiment.
pub fn replicate_data(cfg: &RunConfig, model: &SpikedModel<f64>, rep: usize) -> Result<SampleSet<f64>> {
    model.sample(cfg.n, cfg.noise, cfg.replicate_seed(rep))
}

/// Fitting options of replicate `rep`.
pub fn replicate_als(cfg: &RunConfig, rep: usize) -> AlsConfig {
    AlsConfig {
        seed: cfg.replicate_seed(rep),
        ..cfg.als.clone()
    }
}

fn replicate_inner(cfg: &RunConfig, model: &SpikedModel<f64>, rep: usize, seed: u64) -> Result<ReplicateRecord> {
    let data = replicate_data(cfg, model, rep)?;
    let bundle = estimate_bundle(&data, cfg.r, &replicate_als(cfg, rep), BundleLevel::DoubleSplit)?;
    let truth = model.components();

    let regimes = [Regime::A, Regime::B, Regime::C];
    let mut orders = Vec::with_capacity(3);
    for &regime in &regimes {
        let dirs = regime_directions(&bundle, regime)
            .ok_or_else(|| MpcaError::InvalidInput(format!("regime {regime} estimates missing")))?;
        let order = truth_order(&dirs, model)?;
        orders.push((regime, dirs, order));
    }

    let mut targets = Vec::with_capacity(cfg.targets.len());
    for t in &cfg.targets {
        let (k, q, i) = (t.k - 1, t.q - 1, t.coord - 1);
        let truth_value = truth[k].factor(q).as_slice()[i];
        let mut estimates = Vec::with_capacity(3);
        for (regime, dirs, order) in &orders {
            let j = order[k];
            let sign = if dirs[j][q].dot(truth[k].factor(q).as_slice()) < 0.0 { -1.0 } else { 1.0 };
            let target = LinearFormTarget::coordinate(j, q, i, cfg.dims[q])?;
            let choice = match regime {
                Regime::A => RegimeChoice::A,
                Regime::B => RegimeChoice::B,
                Regime::C => RegimeChoice::C,
            };
            estimates.push(match infer_linear_form(&bundle, &target, cfg.alpha, choice) {
                Ok(res) => {
                    let (point, lo, hi) = if sign < 0.0 {
                        (-res.point, -res.hi, -res.lo)
                    } else {
                        (res.point, res.lo, res.hi)
                    };
                    RegimeEstimate {
                        regime: *regime,
                        point: Some(point),
                        se: Some(res.se),
                        lo: Some(lo),
                        hi: Some(hi),
                        covered: Some(lo <= truth_value && truth_value <= hi),
                        reject: Some(res.reject),
                        unavailable: None,
                    }
                }
                Err(MpcaError::InferenceUnavailable(msg)) => RegimeEstimate {
                    regime: *regime,
                    point: None,
                    se: None,
                    lo: None,
                    hi: None,
                    covered: None,
                    reject: None,
                    unavailable: Some(msg),
                },
                Err(e) => return Err(e),
            });
        }
        targets.push(TargetRecord {
            k: t.k,
            q: t.q,
            coord: t.coord,
            truth: truth_value,
            estimates,
        });
    }

    let hat: Vec<_> = bundle.components.iter().map(|c| c.hat_u.clone()).collect();
    let matched = crate::estimator::match_permutation(&hat, model)?;
    let mut hat_sin = vec![Vec::new(); cfg.r];
    for (j, &l) in matched.perm.iter().enumerate() {
        hat_sin[l] = (0..cfg.dims.len())
            .map(|q| hat[j].factor(q).sin_angle(truth[l].factor(q)))
            .collect::<Result<_>>()?;
    }
    let (_, tilde_dirs, tilde_order) = &orders[0];
    let (_, check_dirs, check_order) = &orders[1];
    let aligned_dot = |v: &UnitVector<f64>, u: &UnitVector<f64>| dot(v.as_slice(), u.as_slice()).abs();
    let components = (0..cfg.r)
        .map(|k| {
            let jt = tilde_order[k];
            let jc = check_order[k];
            let c = &bundle.components[jc];
            ComponentDiagnostics {
                k: k + 1,
                hat_sin: hat_sin[k].clone(),
                tilde_dot_u: (0..cfg.dims.len())
                    .map(|q| aligned_dot(&tilde_dirs[jt][q], truth[k].factor(q)))
                    .collect(),
                check_dot_u: (0..cfg.dims.len())
                    .map(|q| aligned_dot(&check_dirs[jc][q], truth[k].factor(q)))
                    .collect(),
                b_explicit: (0..cfg.dims.len())
                    .map(|q| c.b_explicit.as_ref().map(|b| b[q]))
                    .collect(),
                b_empirical: (0..cfg.dims.len())
                    .map(|q| c.b_empirical.as_ref().and_then(|b| b[q].value()))
                    .collect(),
                sigma_sq_hat: bundle.variances.sigma_sq_hat[jc],
            }
        })
        .collect();

    Ok(ReplicateRecord {
        index: rep,
        seed,
        error: None,
        converged: bundle.converged,
        sigma0_sq_hat: Some(bundle.variances.sigma0_sq_hat),
        components,
        targets,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, var)
}

/// Equal-width bins over `[min, max]` of the values.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        let pad = lo.abs().max(1.0) * 1e-9;
        (lo - pad, hi + pad)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in values {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count,
        })
        .collect()
}

fn summarize(cfg: &RunConfig, model: &SpikedModel<f64>, records: &[ReplicateRecord]) -> Result<(Vec<TargetSummary>, Vec<Histogram>, Vec<CrossCovariance>)> {
    let resolved = cfg.resolved_regime();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n = cfg.n as f64;
    let points = |ti: usize, regime: Regime| -> Vec<Option<f64>> {
        ok.iter()
            .map(|r| r.targets[ti].estimate(regime).and_then(|e| e.point))
            .collect()
    };
    let mut summaries = Vec::new();
    let mut histograms = Vec::new();
    for (ti, t) in cfg.targets.iter().enumerate() {
        let u = model.components()[t.k - 1].factor(t.q - 1).as_slice();
        let mut v = vec![0.0; cfg.dims[t.q - 1]];
        v[t.coord - 1] = 1.0;
        let (mean_t, sd_t) = theoretical_density(cfg.sigma0, cfg.sigma[t.k - 1], u, &v, cfg.n)?;
        for regime in [Regime::A, Regime::B, Regime::C] {
            let xs: Vec<f64> = points(ti, regime).into_iter().flatten().collect();
            let (mean, var) = mean_var(&xs);
            let est = ok.iter().filter_map(|r| r.targets[ti].estimate(regime));
            let (covered, rejected) = est.fold((0, 0), |(c, j), e| {
                (c + usize::from(e.covered == Some(true)), j + usize::from(e.reject == Some(true)))
            });
            summaries.push(TargetSummary {
                k: t.k,
                q: t.q,
                coord: t.coord,
                regime,
                truth: mean_t,
                available: xs.len(),
                covered,
                rejected,
                mean,
                sd: var.sqrt(),
                n_var: n * var,
                n_var_theory: n * sd_t * sd_t,
            });
            if regime == resolved {
                histograms.push(Histogram {
                    k: t.k,
                    q: t.q,
                    coord: t.coord,
                    regime,
                    overlay_mean: mean_t,
                    overlay_sd: sd_t,
                    bins: histogram(&xs, cfg.bins),
                });
            }
        }
    }
    let mut cross = Vec::new();
    for a in 0..cfg.targets.len() {
        for b in a + 1..cfg.targets.len() {
            let pa = points(a, resolved);
            let pb = points(b, resolved);
            let pairs: Vec<(f64, f64)> = pa
                .into_iter()
                .zip(pb)
                .filter_map(|(x, y)| Some((x?, y?)))
                .collect();
            let m = pairs.len() as f64;
            let n_cov = if pairs.len() < 2 {
                None
            } else {
                let mx = pairs.iter().map(|p| p.0).sum::<f64>() / m;
                let my = pairs.iter().map(|p| p.1).sum::<f64>() / m;
                Some(n * pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (m - 1.0))
            };
            cross.push(CrossCovariance {
                a: cfg.targets[a],
                b: cfg.targets[b],
                regime: resolved,
                n_cov,
            });
        }
    }
    Ok((summaries, histograms, cross))
}

/// Runs every replicate on a pool of `jobs` threads and aggregates by
/// replicate index. Fails when more than 10% of replicates error.
pub fn run_simulation(cfg: &RunConfig, jobs: usize) -> Result<SimReport> {
    cfg.validate()?;
    let model: SpikedModel<f64> = cfg.model_config().build()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| MpcaError::Config(format!("thread pool: {e}")))?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|rep| run_replicate(cfg, &model, rep))
            .collect()
    });
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let (summaries, histograms, cross_covariances) = summarize(cfg, &model, &records)?;
    Ok(SimReport {
        config: cfg.clone(),
        regime: cfg.resolved_regime(),
        failed,
        replicates: records,
        summaries,
        histograms,
        cross_covariances,
    })
}

/// True when more than 10% of replicates failed.
pub fn too_many_failures(report: &SimReport) -> bool {
    report.failed * 10 > report.replicates.len()
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub seconds: f64,
    pub replicates: usize,
    pub jobs: usize,
}

/// Writes `histogram.csv`, `coverage.csv` and `report.json` (plus the
/// non-deterministic `timing.json`) into `dir`.
pub fn write_outputs(report: &SimReport, dir: &Path, timing: Option<&Timing>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("histogram.csv"))?;
    w.write_record(["k", "q", "coord", "regime", "bin", "lo", "hi", "count", "density", "overlay_mean", "overlay_sd", "overlay_density"])?;
    for h in &report.histograms {
        let total: usize = h.bins.iter().map(|b| b.count).sum();
        for (b, bin) in h.bins.iter().enumerate() {
            let width = bin.hi - bin.lo;
            let density = if total > 0 && width > 0.0 { bin.count as f64 / (total as f64 * width) } else { 0.0 };
            let mid = 0.5 * (bin.lo + bin.hi);
            let overlay = if h.overlay_sd > 0.0 {
                let z = (mid - h.overlay_mean) / h.overlay_sd;
                (-0.5 * z * z).exp() / (h.overlay_sd * (2.0 * std::f64::consts::PI).sqrt())
            } else {
                0.0
            };
            w.write_record([
                h.k.to_string(),
                h.q.to_string(),
                h.coord.to_string(),
                h.regime.to_string(),
                (b + 1).to_string(),
                bin.lo.to_string(),
                bin.hi.to_string(),
                bin.count.to_string(),
                density.to_string(),
                h.overlay_mean.to_string(),
                h.overlay_sd.to_string(),
                overlay.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("coverage.csv"))?;
    w.write_record(["k", "q", "coord", "regime", "truth", "available", "covered", "coverage", "rejected", "rejection_rate", "mean", "sd", "n_var", "n_var_theory"])?;
    for s in &report.summaries {
        w.write_record([
            s.k.to_string(),
            s.q.to_string(),
            s.coord.to_string(),
            s.regime.to_string(),
            s.truth.to_string(),
            s.available.to_string(),
            s.covered.to_string(),
            s.coverage().to_string(),
            s.rejected.to_string(),
            s.rejection_rate().to_string(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.n_var.to_string(),
            s.n_var_theory.to_string(),
        ])?;
    }
    w.flush()?;

    write_json(&dir.join("report.json"), report)?;
    if let Some(t) = timing {
        write_json(&dir.join("timing.json"), t)?;
    }
    Ok(())
}

/// Runs, writes the tables and reports timing separately.
pub fn simulate_to_dir(cfg: &RunConfig, dir: &Path, jobs: usize) -> Result<SimReport> {
    let start = Instant::now();
    let report = run_simulation(cfg, jobs)?;
    let timing = Timing {
        seconds: start.elapsed().as_secs_f64(),
        replicates: cfg.replicates,
        jobs,
    };
    write_outputs(&report, dir, Some(&timing))?;
    if too_many_failures(&report) {
        return Err(MpcaError::Degenerate(format!(
            "{} of {} replicates failed",
            report.failed,
            report.replicates.len()
        )));
    }
    Ok(report)
}

/// Writes replicate `rep`'s observations (`data.csv`, observation index
/// first) and its fitted components (`components.json`).
pub fn export_replicate(cfg: &RunConfig, rep: usize, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let model: SpikedModel<f64> = cfg.model_config().build()?;
    let data = replicate_data(cfg, &model, rep)?;
    std::fs::create_dir_all(dir)?;
    write_samples_csv(&dir.join("data.csv"), &data)?;
    let fit = crate::estimator::fit_mpca(&data, cfg.r, &replicate_als(cfg, rep))?;
    std::fs::write(dir.join("components.json"), components_json(&fit.components)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            dims: vec![6, 5],
            n: 80,
            replicates: 6,
            seed: 7,
            ..RunConfig::preset("paper-low").unwrap()
        }
    }

    #[test]
    fn presets() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(matches!(RunConfig::preset("nope"), Err(MpcaError::Config(_))));
        let low = RunConfig::preset("paper-low").unwrap();
        assert_eq!((low.dims[0], low.n, low.sigma[0]), (10, 200, 2.0));
        assert_eq!(low.resolved_regime(), Regime::A);
        assert_eq!(RunConfig::preset("paper-high").unwrap().resolved_regime(), Regime::B);
    }

    #[test]
    fn config_json_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"dims":[4,4],"n":40,"r":1,"sigma":[2.0],"targets":[{"k":1,"q":1,"coord":1}]}"#).unwrap();
        assert_eq!(c.replicates, 300);
        assert_eq!(c.als.n_restarts, 8);
        c.validate().unwrap();
        let bad = RunConfig { alpha: 1.5, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { targets: vec![TargetSpec { k: 2, q: 1, coord: 1 }], ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn histogram_partitions_range() {
        let xs = [0.0, 0.1, 0.5, 0.99, 1.0];
        let h = histogram(&xs, 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].lo, 0.0);
        assert_eq!(h[3].hi, 1.0);
        for w in h.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
        let h = histogram(&[2.0, 2.0], 3);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn small_run_is_consistent_and_deterministic() {
        let cfg = small();
        let a = run_simulation(&cfg, 1).unwrap();
        assert_eq!(a.failed, 0);
        assert_eq!(a.replicates.len(), 6);
        let total: usize = a.histograms.iter().flat_map(|h| &h.bins).map(|b| b.count).sum();
        assert_eq!(total, 6 * cfg.targets.len());
        for s in &a.summaries {
            assert!(s.covered <= s.available && s.available <= 6);
        }
        let b = run_simulation(&cfg, 2).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn truth_order_swaps_when_needed() {
        let model: SpikedModel<f64> = RunConfig::preset("paper-low").unwrap().model_config().build().unwrap();
        let dirs: Vec<Vec<UnitVector<f64>>> = model.components().iter().rev().map(|c| c.factors().to_vec()).collect();
        assert_eq!(truth_order(&dirs, &model).unwrap(), vec![1, 0]);
    }

    #[test]
    fn outputs_written() {
        let cfg = RunConfig { replicates: 3, ..small() };
        let dir = tempfile::tempdir().unwrap();
        let rep = simulate_to_dir(&cfg, dir.path(), 1).unwrap();
        for f in ["histogram.csv", "coverage.csv", "report.json", "timing.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back: SimReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.replicates.len(), rep.replicates.len());
        export_replicate(&cfg, 0, dir.path()).unwrap();
        assert!(dir.path().join("data.csv").exists());
    }
}
