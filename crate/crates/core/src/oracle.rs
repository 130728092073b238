//! Brute-force references for small instances: a dense eigensolver for the
//! vectorized covariance and an exhaustive angle grid for `d = (2, 2)`.

use ndarray::Array2;
use serde::Serialize;

use crate::covariance::CovarianceView;
use crate::error::{MpcaError, Result};
use crate::estimator::{fit_mpca, rank_one_als, stationarity_residual, AlsConfig};
use crate::scalar::Scalar;
use crate::spiked::{make_components, ComponentsMode, NoiseDistribution, SampleSet, SpikedModel};
use crate::tensor::{sin_angle, RankOnePC, UnitVector};

pub const MAX_DENSE_DIM: usize = 4096;

/// `(1/n) Σ_i vec(X_i) vec(X_i)'`.
#[derive(Clone, Debug)]
pub struct DenseCovariance {
    pub matrix: Array2<f64>,
}

impl DenseCovariance {
    pub fn from_samples<T: Scalar>(data: &SampleSet<T>) -> Result<Self> {
        let d = data.obs_len();
        if d > MAX_DENSE_DIM {
            return Err(MpcaError::InvalidInput(format!(
                "dense covariance of size {d} exceeds {MAX_DENSE_DIM}"
            )));
        }
        let x = Array2::from_shape_fn((data.n(), d), |(i, j)| data.observation_slice(i)[j].as_f64());
        let mut c = x.t().dot(&x) / data.n() as f64;
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (c[[i, j]] + c[[j, i]]);
                c[[i, j]] = s;
                c[[j, i]] = s;
            }
        }
        Ok(DenseCovariance { matrix: c })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct DenseEig {
    /// Descending.
    pub values: Vec<f64>,
    /// Column `j` pairs with `values[j]`.
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi rotations on a symmetric matrix.
pub fn dense_eig(c: &DenseCovariance) -> Result<DenseEig> {
    symmetric_eig(&c.matrix)
}

pub fn symmetric_eig(m: &Array2<f64>) -> Result<DenseEig> {
    let d = m.nrows();
    if d == 0 || m.ncols() != d {
        return Err(MpcaError::DimensionMismatch("eigendecomposition needs a square matrix".into()));
    }
    if d > MAX_DENSE_DIM {
        return Err(MpcaError::InvalidInput(format!("matrix of size {d} exceeds {MAX_DENSE_DIM}")));
    }
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(d);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((d, d), |(r, c)| v[[r, order[c]]]);
    Ok(DenseEig { values, vectors })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridOptimum {
    pub theta1: f64,
    pub theta2: f64,
    pub objective: f64,
}

/// Exhaustive search of `Σ̂(w1, w2, w1, w2)` over `w_q = (cos θ_q, sin θ_q)`,
/// `θ_q` on a grid of `[0, π)` with the given step.
pub fn grid_best_rank_one<T: Scalar>(data: &SampleSet<T>, step: f64) -> Result<GridOptimum> {
    if data.dims() != [2, 2] {
        return Err(MpcaError::InvalidInput(format!(
            "grid search needs dims (2, 2), got {:?}",
            data.dims()
        )));
    }
    if !(step > 0.0) {
        return Err(MpcaError::InvalidInput("grid step must be positive".into()));
    }
    let c = DenseCovariance::from_samples(data)?.matrix;
    let m = (std::f64::consts::PI / step).ceil() as usize;
    let angles: Vec<(f64, f64, f64)> = (0..m)
        .map(|i| {
            let t = i as f64 * step;
            (t, t.cos(), t.sin())
        })
        .filter(|(t, _, _)| *t < std::f64::consts::PI)
        .collect();
    let mut best = GridOptimum {
        theta1: 0.0,
        theta2: 0.0,
        objective: f64::NEG_INFINITY,
    };
    // vec index of (i, j) is 2i + j; for fixed w1 the objective is w2' M w2
    for &(t1, c1, s1) in &angles {
        let w1 = [c1, s1];
        let mut mm = [[0.0f64; 2]; 2];
        for (j, row) in mm.iter_mut().enumerate() {
            for (l, e) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..2 {
                    for k in 0..2 {
                        acc += w1[i] * w1[k] * c[[2 * i + j, 2 * k + l]];
                    }
                }
                *e = acc;
            }
        }
        for &(t2, c2, s2) in &angles {
            let obj = c2 * c2 * mm[0][0] + 2.0 * c2 * s2 * mm[0][1] + s2 * s2 * mm[1][1];
            if obj > best.objective {
                best = GridOptimum {
                    theta1: t1,
                    theta2: t2,
                    objective: obj,
                };
            }
        }
    }
    Ok(best)
}

/// Fault injection for the self-check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OracleHook {
    #[default]
    None,
    /// Perturbs every ALS solution before it is checked.
    CorruptAls,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!("{:<w$}  {:<4}  detail\n", "check", "ok");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<w$}  {:<4}  {}\n",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.detail
            ));
        }
        s
    }
}

fn corrupt(pc: &RankOnePC<f64>) -> Result<RankOnePC<f64>> {
    let mut f = pc.factors().to_vec();
    let mut v = f[0].as_slice().to_vec();
    let last = v.len() - 1;
    v[0] += 0.05;
    v[last] -= 0.05;
    f[0] = UnitVector::new(v)?;
    RankOnePC::new(f, pc.value())
}

fn model(dims: &[usize], sigma: &[f64], sigma0: f64, seed: u64) -> Result<SpikedModel<f64>> {
    let comps = make_components(dims, sigma.len(), ComponentsMode::Random, seed)?;
    SpikedModel::new(dims.to_vec(), sigma.to_vec(), sigma0, comps)
}

/// Runs the small-instance equivalences and returns one row per check.
pub fn oracle_check(hook: OracleHook) -> Result<OracleReport> {
    let cfg = AlsConfig {
        seed: 11,
        ..AlsConfig::default()
    };
    let adjust = |pc: RankOnePC<f64>| -> Result<RankOnePC<f64>> {
        match hook {
            OracleHook::None => Ok(pc),
            OracleHook::CorruptAls => corrupt(&pc),
        }
    };
    let mut rows = Vec::new();

    // vector data: ALS is the leading eigenvector
    let m = model(&[30], &[2.0], 1.0, 1)?;
    let s = m.sample(200, NoiseDistribution::StandardNormal, 2)?;
    let fit = adjust(rank_one_als(&CovarianceView::new(&s), &cfg)?.pc)?;
    let eig = dense_eig(&DenseCovariance::from_samples(&s)?)?;
    let top: Vec<f64> = eig.vectors.column(0).to_vec();
    let sa = sin_angle(fit.factor(0).as_slice(), &top)?;
    rows.push(OracleRow {
        name: "p=1 leading eigenvector".into(),
        passed: sa <= 1e-8,
        detail: format!("sin angle {sa:.3e} (tol 1e-8)"),
    });

    // stationarity and the unconstrained bound on a 3-way instance
    let m = model(&[5, 4, 3], &[2.0, 1.0], 1.0, 3)?;
    let s = m.sample(150, NoiseDistribution::StandardNormal, 4)?;
    let view = CovarianceView::new(&s);
    let fit = rank_one_als(&view, &cfg)?;
    let pc = adjust(fit.pc)?;
    let stat = stationarity_residual(&view, &pc.factor_slices())?;
    rows.push(OracleRow {
        name: "ALS stationarity".into(),
        passed: stat <= 1e-8,
        detail: format!("max eigen-residual {stat:.3e} (tol 1e-8)"),
    });
    let eig = dense_eig(&DenseCovariance::from_samples(&s)?)?;
    let obj = view.quadratic(&pc.factor_slices())?;
    rows.push(OracleRow {
        name: "rank-one objective <= top eigenvalue".into(),
        passed: obj <= eig.values[0] + 1e-10,
        detail: format!("objective {obj:.10} vs eigenvalue {:.10}", eig.values[0]),
    });

    // global optimum on S^1 x S^1
    let mut worst: f64 = 0.0;
    for inst in 0..5u64 {
        let m = model(&[2, 2], &[2.0], 1.0, 100 + inst)?;
        let s = m.sample(200, NoiseDistribution::StandardNormal, 200 + inst)?;
        let view = CovarianceView::new(&s);
        let pc = adjust(rank_one_als(&view, &cfg)?.pc)?;
        let obj = view.quadratic(&pc.factor_slices())?;
        let g = grid_best_rank_one(&s, 1e-3)?;
        worst = worst.max((obj - g.objective).abs());
    }
    rows.push(OracleRow {
        name: "grid optimum d=(2,2), step 1e-3".into(),
        passed: worst <= 1e-4,
        detail: format!("max |ALS - grid| {worst:.3e} over 5 instances (tol 1e-4)"),
    });

    // exact recovery without noise
    let m = model(&[8, 7, 6], &[3.0, 2.0], 0.0, 5)?;
    let s = m.sample(50, NoiseDistribution::StandardNormal, 6)?;
    let fit = fit_mpca(&s, 2, &cfg)?;
    let mut worst: f64 = 0.0;
    for (k, c) in fit.components.into_iter().enumerate() {
        let c = adjust(c)?;
        worst = worst.max(c.max_mode_sin_angle(&m.components()[k])?);
    }
    rows.push(OracleRow {
        name: "noiseless recovery".into(),
        passed: worst <= 1e-8,
        detail: format!("max mode sin angle {worst:.3e} (tol 1e-8)"),
    });

    Ok(OracleReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Characteristic polynomial coefficients by Faddeev-LeVerrier:
    /// `det(λI - A) = Σ c_k λ^k`, `c_d = 1`.
    fn char_poly(a: &Array2<f64>) -> Vec<f64> {
        let d = a.nrows();
        let mut c = vec![0.0; d + 1];
        c[d] = 1.0;
        let mut m = Array2::<f64>::zeros((d, d));
        for k in 1..=d {
            m = a.dot(&m) + Array2::<f64>::eye(d) * c[d - k + 1];
            let am = a.dot(&m);
            c[d - k] = -am.diag().sum() / k as f64;
        }
        c
    }

    fn poly(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
    }

    /// Real roots by sign changes on a fine grid, refined by bisection.
    fn real_roots(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut roots = Vec::new();
        let mut x0 = lo;
        let mut f0 = poly(c, x0);
        for i in 1..=steps {
            let x1 = lo + i as f64 * h;
            let f1 = poly(c, x1);
            if f0 == 0.0 || f0.signum() != f1.signum() {
                let (mut a, mut b) = (x0, x1);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if poly(c, a).signum() == poly(c, m).signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            x0 = x1;
            f0 = f1;
        }
        roots.sort_by(|a, b| b.total_cmp(a));
        roots
    }

    #[test]
    fn identity_and_diagonal() {
        let e = symmetric_eig(&Array2::<f64>::eye(4)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let e = symmetric_eig(&array![[1.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!((e.vectors[[1, 0]].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_characteristic_polynomial() {
        let b = array![
            [0.3, -1.2, 0.5, 2.0, 0.1],
            [1.1, 0.4, -0.7, 0.2, 0.9],
            [-0.6, 0.8, 1.5, -0.3, 0.4],
            [0.2, 0.1, 0.3, 0.7, -1.4],
            [0.9, -0.5, 0.2, 0.6, 1.0]
        ];
        let a = b.t().dot(&b);
        let e = symmetric_eig(&a).unwrap();
        let c = char_poly(&a);
        let roots = real_roots(&c, -1.0, a.diag().sum() + 1.0);
        assert_eq!(roots.len(), 5);
        for (x, y) in e.values.iter().zip(&roots) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        for j in 0..5 {
            let v = e.vectors.column(j);
            let r = &a.dot(&v) - &(&v * e.values[j]);
            assert!(r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8);
        }
    }

    #[test]
    fn dense_covariance_is_psd() {
        let m = model(&[3, 3], &[2.0], 1.0, 9).unwrap();
        let s = m.sample(40, NoiseDistribution::StandardNormal, 9).unwrap();
        let c = DenseCovariance::from_samples(&s).unwrap();
        assert!(crate::linalg::is_symmetric(&c.matrix.view(), 1e-12));
        let e = dense_eig(&c).unwrap();
        assert!(*e.values.last().unwrap() >= -1e-8);
    }

    #[test]
    fn grid_finds_noiseless_truth() {
        let (a, b) = (std::f64::consts::PI / 6.0, 0.0f64);
        let u1 = UnitVector::new(vec![a.cos(), a.sin()]).unwrap();
        let u2 = UnitVector::new(vec![b.cos(), b.sin()]).unwrap();
        let pc = RankOnePC::new(vec![u1, u2], 1.0).unwrap();
        let m = SpikedModel::new(vec![2, 2], vec![2.0], 0.0, vec![pc.clone()]).unwrap();
        let s = m.sample(30, NoiseDistribution::StandardNormal, 1).unwrap();
        let g = grid_best_rank_one(&s, 1e-3).unwrap();
        assert!((g.theta1 - a).abs() <= 1e-3 + 1e-12);
        assert!(g.theta2 <= 1e-3 || g.theta2 >= std::f64::consts::PI - 1e-3);
        let at_truth = CovarianceView::new(&s).quadratic(&pc.factor_slices()).unwrap();
        assert!(g.objective >= at_truth - 1e-12 - at_truth * 1e-5);
        let bad = m.sample(3, NoiseDistribution::StandardNormal, 1).unwrap();
        assert!(grid_best_rank_one(&bad, 0.0).is_err());
        let m3 = model(&[3, 2], &[1.0], 1.0, 2).unwrap();
        assert!(grid_best_rank_one(&m3.sample(4, NoiseDistribution::StandardNormal, 1).unwrap(), 1e-2).is_err());
    }

    #[test]
    fn guard_rejects_large_dense() {
        let s = SampleSet::from_stacked(vec![65, 65], 1, vec![1.0f64; 65 * 65]).unwrap();
        assert!(DenseCovariance::from_samples(&s).is_err());
    }

    #[test]
    fn self_check_passes_and_detects_corruption() {
        let ok = oracle_check(OracleHook::None).unwrap();
        assert!(ok.all_passed(), "{}", ok.table());
        let bad = oracle_check(OracleHook::CorruptAls).unwrap();
        assert!(!bad.all_passed());
        let stat = bad.rows.iter().find(|r| r.name == "ALS stationarity").unwrap();
        assert!(!stat.passed);
    }
}
