//! Real-data pipeline: long-format ingestion, preprocessing, fitting,
//! debiasing and per-coordinate intervals for every loading.
//!
//! Preprocessing runs in a fixed order: drop observations with too many
//! missing cells, log-transform positive values, center and scale each
//! series to mean absolute deviation 1, then set missing cells to 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::debias::{estimate_bundle, BundleLevel, EstimateBundle};
use crate::error::{MpcaError, Result};
use crate::estimator::AlsConfig;
use crate::inference::{infer_linear_form, InferenceResult, LinearFormTarget, Regime, RegimeChoice};
use crate::io::{components_json, write_inference_csv, write_json, LongArray};
use crate::spiked::SampleSet;
use crate::tensor::increment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub r: usize,
    #[serde(default)]
    pub regime: RegimeChoice,
    #[serde(default = "five_percent")]
    pub alpha: f64,
    #[serde(default)]
    pub log_transform: bool,
    /// Center and scale each series to mean absolute deviation 1.
    #[serde(default)]
    pub mad_standardize: bool,
    /// Center each series without scaling (implied by `mad_standardize`).
    #[serde(default)]
    pub center: bool,
    /// Observations whose fraction of missing cells exceeds this are dropped.
    #[serde(default = "five_percent")]
    pub drop_missing_threshold: f64,
    /// 1-based data modes (the observation mode excluded) whose indices
    /// identify a series; empty means the last data mode.
    #[serde(default)]
    pub series_modes: Vec<usize>,
    #[serde(default)]
    pub als: AlsConfig,
}

fn five_percent() -> f64 {
    0.05
}

impl AnalyzeConfig {
    pub fn new(r: usize) -> Self {
        AnalyzeConfig {
            r,
            regime: RegimeChoice::Auto,
            alpha: 0.05,
            log_transform: false,
            mad_standardize: false,
            center: false,
            drop_missing_threshold: 0.05,
            series_modes: Vec::new(),
            als: AlsConfig::default(),
        }
    }

    pub fn validate(&self, data_order: usize) -> Result<()> {
        if self.r == 0 {
            return Err(MpcaError::Config("r must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MpcaError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.drop_missing_threshold) {
            return Err(MpcaError::Config("drop_missing_threshold must lie in [0, 1]".into()));
        }
        if let Some(&m) = self.series_modes.iter().find(|&&m| m == 0 || m > data_order) {
            return Err(MpcaError::Config(format!(
                "series mode {m} outside 1..={data_order}"
            )));
        }
        self.als.validate()
    }

    fn series_modes0(&self, data_order: usize) -> Vec<usize> {
        if self.series_modes.is_empty() {
            vec![data_order - 1]
        } else {
            let mut m: Vec<usize> = self.series_modes.iter().map(|&q| q - 1).collect();
            m.sort_unstable();
            m.dedup();
            m
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// 1-based indices of dropped observations.
    pub dropped_observations: Vec<usize>,
    /// Cells skipped by the log transform because they were not positive,
    /// as 1-based `(observation, i_1, ..., i_p)` in the original indexing.
    pub nonpositive_cells: Vec<Vec<usize>>,
    /// Series with zero spread, as 1-based indices over the series modes;
    /// their cells are set to 0.
    pub constant_series: Vec<Vec<usize>>,
    pub missing_cells: usize,
}

/// Applies the preprocessing chain and returns the sample with missing cells
/// at 0.
pub fn preprocess(array: &LongArray, cfg: &AnalyzeConfig) -> Result<(SampleSet<f64>, PreprocessReport)> {
    if array.dims.len() < 2 {
        return Err(MpcaError::InvalidInput(
            "need an observation mode plus at least one data mode".into(),
        ));
    }
    let data_dims = array.dims[1..].to_vec();
    cfg.validate(data_dims.len())?;
    let big_d: usize = data_dims.iter().product();
    let n0 = array.dims[0];
    let mut report = PreprocessReport::default();

    let mut keep = Vec::with_capacity(n0);
    for i in 0..n0 {
        let present = &array.present[i * big_d..(i + 1) * big_d];
        let missing = present.iter().filter(|&&p| !p).count();
        if missing as f64 > cfg.drop_missing_threshold * big_d as f64 {
            report.dropped_observations.push(i + 1);
        } else {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(MpcaError::InvalidInput("every observation exceeds the missing-data threshold".into()));
    }
    let n = keep.len();
    let mut values = Vec::with_capacity(n * big_d);
    let mut present = Vec::with_capacity(n * big_d);
    for &i in &keep {
        values.extend_from_slice(&array.values[i * big_d..(i + 1) * big_d]);
        present.extend_from_slice(&array.present[i * big_d..(i + 1) * big_d]);
    }

    if cfg.log_transform {
        let mut idx = vec![0usize; data_dims.len()];
        for (j, &i) in keep.iter().enumerate() {
            idx.iter_mut().for_each(|x| *x = 0);
            for c in 0..big_d {
                let off = j * big_d + c;
                if present[off] {
                    if values[off] > 0.0 {
                        values[off] = values[off].ln();
                    } else {
                        present[off] = false;
                        let mut cell = vec![i + 1];
                        cell.extend(idx.iter().map(|x| x + 1));
                        report.nonpositive_cells.push(cell);
                    }
                }
                increment(&mut idx, &data_dims);
            }
        }
    }

    if cfg.center || cfg.mad_standardize {
        let modes = cfg.series_modes0(data_dims.len());
        let series_dims: Vec<usize> = modes.iter().map(|&q| data_dims[q]).collect();
        let n_series: usize = series_dims.iter().product();
        // series id of every within-observation cell
        let mut sid = Vec::with_capacity(big_d);
        let mut idx = vec![0usize; data_dims.len()];
        for _ in 0..big_d {
            sid.push(modes.iter().fold(0usize, |acc, &q| acc * data_dims[q] + idx[q]));
            increment(&mut idx, &data_dims);
        }
        let mut sum = vec![0.0; n_series];
        let mut count = vec![0usize; n_series];
        for (off, (&v, &p)) in values.iter().zip(&present).enumerate() {
            if p {
                sum[sid[off % big_d]] += v;
                count[sid[off % big_d]] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        let mut scale = vec![1.0; n_series];
        if cfg.mad_standardize {
            let mut dev = vec![0.0; n_series];
            for (off, (&v, &p)) in values.iter().zip(&present).enumerate() {
                if p {
                    let s = sid[off % big_d];
                    dev[s] += (v - mean[s]).abs();
                }
            }
            for s in 0..n_series {
                scale[s] = if count[s] > 0 { dev[s] / count[s] as f64 } else { 0.0 };
            }
        }
        let mut constant = vec![false; n_series];
        for s in 0..n_series {
            let degenerate = count[s] == 0 || (cfg.mad_standardize && !(scale[s] > 0.0));
            if degenerate {
                constant[s] = true;
                let mut label = Vec::with_capacity(modes.len());
                let mut rem = s;
                for &d in series_dims.iter().rev() {
                    label.push(rem % d + 1);
                    rem /= d;
                }
                label.reverse();
                report.constant_series.push(label);
            }
        }
        for (off, (v, p)) in values.iter_mut().zip(present.iter_mut()).enumerate() {
            let s = sid[off % big_d];
            if constant[s] {
                *p = false;
            } else if *p {
                *v = (*v - mean[s]) / scale[s];
            }
        }
    }

    for (v, &p) in values.iter_mut().zip(&present) {
        if !p {
            *v = 0.0;
        }
    }
    report.missing_cells = present.iter().filter(|&&p| !p).count();
    let data = SampleSet::from_stacked(data_dims, n, values)?;
    Ok((data, report))
}

/// Estimates needed by a regime.
pub fn level_for(regime: Regime) -> BundleLevel {
    match regime {
        Regime::A => BundleLevel::OneStep,
        Regime::B => BundleLevel::Split,
        Regime::C => BundleLevel::DoubleSplit,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    /// 1-based mode among the data modes.
    pub q: usize,
    /// Fitted factor `û`.
    pub estimate: Vec<f64>,
    /// The regime's debiased coordinates with interval bounds; absent where
    /// the interval is unavailable.
    pub debiased: Vec<Option<f64>>,
    pub lo: Vec<Option<f64>>,
    pub hi: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub k: usize,
    pub sigma_sq_hat: f64,
    pub clipped: bool,
    /// `σ̂_k² / (Σ_l σ̂_l² + σ̂_0² D)`; a heuristic, not a model quantity.
    pub heuristic_share: f64,
    pub loadings: Vec<Loading>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub dims: Vec<usize>,
    pub n: usize,
    pub regime: Regime,
    pub alpha: f64,
    pub sigma0_sq_hat: f64,
    pub converged: bool,
    pub preprocessing: PreprocessReport,
    pub components: Vec<ComponentReport>,
    /// Coordinates whose interval could not be formed, with the reason.
    pub unavailable: Vec<String>,
}

pub struct AnalyzeOutput {
    pub report: AnalyzeReport,
    pub bundle: EstimateBundle<f64>,
    pub rows: Vec<InferenceResult>,
}

/// Fits and forms intervals for every coordinate of every loading.
pub fn analyze(array: &LongArray, cfg: &AnalyzeConfig) -> Result<AnalyzeOutput> {
    let (data, pre) = preprocess(array, cfg)?;
    analyze_samples(&data, pre, cfg)
}

pub fn analyze_samples(data: &SampleSet<f64>, pre: PreprocessReport, cfg: &AnalyzeConfig) -> Result<AnalyzeOutput> {
    cfg.validate(data.order())?;
    let dims = data.dims().to_vec();
    let regime = cfg.regime.resolve(&dims, data.n());
    let bundle = estimate_bundle(data, cfg.r, &cfg.als, level_for(regime))?;
    let choice = match regime {
        Regime::A => RegimeChoice::A,
        Regime::B => RegimeChoice::B,
        Regime::C => RegimeChoice::C,
    };
    let big_d: f64 = dims.iter().product::<usize>() as f64;
    let v = &bundle.variances;
    let total: f64 = v.sigma_sq_hat.iter().sum::<f64>() + v.sigma0_sq_hat * big_d;
    let mut rows = Vec::new();
    let mut unavailable = Vec::new();
    let mut components = Vec::with_capacity(cfg.r);
    for k in 0..cfg.r {
        let mut loadings = Vec::with_capacity(dims.len());
        for (q, &d) in dims.iter().enumerate() {
            let mut l = Loading {
                q: q + 1,
                estimate: bundle.components[k].hat_u.factor(q).as_slice().to_vec(),
                debiased: vec![None; d],
                lo: vec![None; d],
                hi: vec![None; d],
            };
            for i in 0..d {
                let t = LinearFormTarget::coordinate(k, q, i, d)?;
                match infer_linear_form(&bundle, &t, cfg.alpha, choice) {
                    Ok(res) => {
                        l.debiased[i] = Some(res.point);
                        l.lo[i] = Some(res.lo);
                        l.hi[i] = Some(res.hi);
                        rows.push(res);
                    }
                    Err(MpcaError::InferenceUnavailable(msg)) => {
                        unavailable.push(format!("k={} q={} coord={}: {msg}", k + 1, q + 1, i + 1));
                    }
                    Err(e) => return Err(e),
                }
            }
            loadings.push(l);
        }
        components.push(ComponentReport {
            k: k + 1,
            sigma_sq_hat: v.sigma_sq_hat[k],
            clipped: v.clipped[k],
            heuristic_share: if total > 0.0 { v.sigma_sq_hat[k] / total } else { 0.0 },
            loadings,
        });
    }
    let report = AnalyzeReport {
        dims,
        n: data.n(),
        regime,
        alpha: cfg.alpha,
        sigma0_sq_hat: v.sigma0_sq_hat,
        converged: bundle.converged,
        preprocessing: pre,
        components,
        unavailable,
    };
    Ok(AnalyzeOutput { report, bundle, rows })
}

/// Writes `components.json` (fitted factors), `loadings.json` (the full
/// report), `inference.csv`/`inference.json` and `bundle.json`.
pub fn write_analysis(out: &AnalyzeOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let hat: Vec<_> = out.bundle.components.iter().map(|c| c.hat_u.clone()).collect();
    std::fs::write(dir.join("components.json"), components_json(&hat)? + "\n")?;
    write_json(&dir.join("loadings.json"), &out.report)?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("inference.csv"))?);
    write_inference_csv(f, &out.rows)?;
    write_json(&dir.join("inference.json"), &out.rows)?;
    write_json(&dir.join("bundle.json"), &out.bundle)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_long_csv;

    fn array(dims: Vec<usize>, values: Vec<f64>) -> LongArray {
        let present = vec![true; values.len()];
        LongArray { dims, values, present }
    }

    #[test]
    fn drops_observations_over_threshold() {
        // 3 observations of 2x2; the second misses 1 of 4 cells
        let mut a = array(vec![3, 2, 2], (1..=12).map(f64::from).collect());
        a.present[5] = false;
        let cfg = AnalyzeConfig::new(1);
        let (s, rep) = preprocess(&a, &cfg).unwrap();
        assert_eq!(rep.dropped_observations, vec![2]);
        assert_eq!(s.n(), 2);
        let lax = AnalyzeConfig { drop_missing_threshold: 0.25, ..cfg };
        let (s, rep) = preprocess(&a, &lax).unwrap();
        assert!(rep.dropped_observations.is_empty());
        assert_eq!(s.n(), 3);
        assert_eq!(s.stacked_data()[5], 0.0);
        assert_eq!(rep.missing_cells, 1);
    }

    #[test]
    fn log_skips_nonpositive_cells() {
        let a = array(vec![2, 1, 2], vec![1.0, std::f64::consts::E, -1.0, 0.0]);
        let cfg = AnalyzeConfig {
            log_transform: true,
            drop_missing_threshold: 1.0,
            ..AnalyzeConfig::new(1)
        };
        let (s, rep) = preprocess(&a, &cfg).unwrap();
        assert_eq!(s.stacked_data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(rep.nonpositive_cells, vec![vec![2, 1, 1], vec![2, 1, 2]]);
    }

    #[test]
    fn mad_standardizes_each_series() {
        // series = last mode; series 1 holds 1,3,5,7 and series 2 is constant
        let a = array(vec![2, 2, 2], vec![1.0, 4.0, 3.0, 4.0, 5.0, 4.0, 7.0, 4.0]);
        let cfg = AnalyzeConfig {
            mad_standardize: true,
            ..AnalyzeConfig::new(1)
        };
        let (s, rep) = preprocess(&a, &cfg).unwrap();
        // mean 4, mean absolute deviation 2
        assert_eq!(s.stacked_data(), &[-1.5, 0.0, -0.5, 0.0, 0.5, 0.0, 1.5, 0.0]);
        assert_eq!(rep.constant_series, vec![vec![2]]);
        let by_first = AnalyzeConfig { series_modes: vec![1], ..cfg.clone() };
        let (s, rep) = preprocess(&a, &by_first).unwrap();
        assert!(rep.constant_series.is_empty());
        let x = s.stacked_data();
        let series1 = [x[0], x[1], x[4], x[5]];
        let mean: f64 = series1.iter().sum::<f64>() / 4.0;
        let mad: f64 = series1.iter().map(|v| (v - mean).abs()).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15 && (mad - 1.0).abs() < 1e-15);
        let bad = AnalyzeConfig { series_modes: vec![3], ..cfg };
        assert!(matches!(preprocess(&a, &bad), Err(MpcaError::Config(_))));
    }

    #[test]
    fn end_to_end_on_spiked_data() {
        use crate::io::write_samples_csv;
        use crate::spiked::{ComponentsMode, ModelConfig, NoiseDistribution};
        let m: crate::SpikedModel<f64> = ModelConfig {
            dims: vec![6, 4],
            r: 1,
            sigma: vec![4.0],
            sigma0: 1.0,
            components_mode: ComponentsMode::Random,
            seed: 3,
            noise: NoiseDistribution::StandardNormal,
        }
        .build()
        .unwrap();
        let data = m.sample(120, NoiseDistribution::StandardNormal, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_samples_csv(&dir.path().join("x.csv"), &data).unwrap();
        let arr = read_long_csv(std::fs::File::open(dir.path().join("x.csv")).unwrap(), Some(&[120, 6, 4])).unwrap();
        let out = analyze(&arr, &AnalyzeConfig::new(1)).unwrap();
        assert_eq!(out.rows.len(), 10);
        assert!(out.report.components[0].heuristic_share > 0.0 && out.report.components[0].heuristic_share < 1.0);
        let fit = crate::fit_mpca(&data, 1, &AlsConfig::default()).unwrap();
        assert_eq!(fit.components[0], out.bundle.components[0].hat_u);
        write_analysis(&out, dir.path()).unwrap();
        for f in ["components.json", "loadings.json", "inference.csv", "inference.json", "bundle.json"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
