//! Ground-truth spiked covariance models and synthetic sampling.
//!
//! An observation is `X = sum_k sigma_k theta_k U_k + sigma_0 E` with
//! completely orthogonal unit rank-one components `U_k`, i.i.d. factors
//! `theta_k` and i.i.d. noise entries `E`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{MpcaError, Result};
use crate::linalg::orthonormalize;
use crate::rng::{seeded_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{increment, kron, RankOnePC, Tensor, UnitVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    /// `N(0, 1)` via the ziggurat sampler of `rand_distr`.
    StandardNormal,
    /// `Poisson(1) - 1`: mean 0, variance 1, skewed.
    CenteredPoisson,
}

impl NoiseDistribution {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseDistribution::StandardNormal => StandardNormal.sample(rng),
            NoiseDistribution::CenteredPoisson => {
                let p = Poisson::new(1.0).expect("rate 1 is valid");
                let k: f64 = p.sample(rng);
                k - 1.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentsMode {
    /// Leading-coordinate rotations by 30 degrees in mode 1 and canonical
    /// basis vectors in the other modes (at most two components).
    PaperSim,
    /// Per mode, an orthonormalized seeded Gaussian `d_q x r` matrix.
    Random,
}

/// Builds `r` pairwise completely orthogonal unit rank-one components.
pub fn make_components<T: Scalar>(
    dims: &[usize],
    r: usize,
    mode: ComponentsMode,
    seed: u64,
) -> Result<Vec<RankOnePC<T>>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(MpcaError::InvalidInput(format!("invalid dims {dims:?}")));
    }
    let dmin = *dims.iter().min().expect("nonempty");
    if r > dmin {
        return Err(MpcaError::InvalidInput(format!(
            "r = {r} exceeds the smallest mode dimension {dmin}"
        )));
    }
    let mut factors: Vec<Vec<UnitVector<T>>> = vec![Vec::with_capacity(dims.len()); r];
    match mode {
        ComponentsMode::PaperSim => {
            if r > 2 {
                return Err(MpcaError::InvalidInput(
                    "paper-sim components are defined for r <= 2".into(),
                ));
            }
            if r == 2 && dims[0] < 2 {
                return Err(MpcaError::InvalidInput("paper-sim needs d_1 >= 2".into()));
            }
            let s3 = 3f64.sqrt() / 2.0;
            let leading = [[s3, 0.5], [-0.5, s3]];
            for (k, comp) in factors.iter_mut().enumerate() {
                for (q, &d) in dims.iter().enumerate() {
                    let mut v = vec![T::zero(); d];
                    if q == 0 && d >= 2 {
                        v[0] = T::of(leading[k][0]);
                        v[1] = T::of(leading[k][1]);
                    } else {
                        v[k] = T::one();
                    }
                    comp.push(UnitVector::new(v)?);
                }
            }
        }
        ComponentsMode::Random => {
            let mut rng = seeded_rng(seed, Stream::Components);
            for &d in dims {
                let cols: Vec<Vec<T>> = (0..r)
                    .map(|_| {
                        (0..d)
                            .map(|_| T::of(StandardNormal.sample(&mut rng)))
                            .collect()
                    })
                    .collect();
                let q = orthonormalize(&cols)?;
                for (comp, v) in factors.iter_mut().zip(q) {
                    comp.push(UnitVector::new(v)?);
                }
            }
        }
    }
    factors
        .into_iter()
        .map(|f| RankOnePC::new(f, T::one()))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpikedModel<T> {
    dims: Vec<usize>,
    sigma: Vec<T>,
    sigma0: T,
    components: Vec<RankOnePC<T>>,
}

impl<T: Scalar> SpikedModel<T> {
    /// Validates the spiked-model invariants. Component values are replaced
    /// by the population eigenvalues `sigma_k^2 + sigma_0^2`.
    pub fn new(
        dims: Vec<usize>,
        sigma: Vec<T>,
        sigma0: T,
        components: Vec<RankOnePC<T>>,
    ) -> Result<Self> {
        let r = sigma.len();
        if components.len() != r {
            return Err(MpcaError::InvalidInput(format!(
                "{} spike scales but {} components",
                r,
                components.len()
            )));
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(MpcaError::InvalidInput(format!("invalid dims {dims:?}")));
        }
        if r > *dims.iter().min().expect("nonempty") {
            return Err(MpcaError::InvalidInput("r exceeds the smallest mode dimension".into()));
        }
        if sigma0 < T::zero() || !sigma0.is_finite() {
            return Err(MpcaError::InvalidInput("sigma0 must be finite and >= 0".into()));
        }
        if sigma.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(MpcaError::InvalidInput("spike scales must be positive".into()));
        }
        if sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(MpcaError::InvalidInput("spike scales must be non-increasing".into()));
        }
        for c in &components {
            if c.dims() != dims {
                return Err(MpcaError::DimensionMismatch(format!(
                    "component dims {:?} vs model dims {dims:?}",
                    c.dims()
                )));
            }
        }
        for k in 0..r {
            for l in 0..k {
                if !components[k].completely_orthogonal(&components[l], T::unit_tol()) {
                    return Err(MpcaError::InvalidInput(format!(
                        "components {l} and {k} are not completely orthogonal"
                    )));
                }
            }
        }
        let components = components
            .into_iter()
            .zip(&sigma)
            .map(|(c, &s)| c.with_value(s * s + sigma0 * sigma0))
            .collect();
        Ok(SpikedModel {
            dims,
            sigma,
            sigma0,
            components,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn r(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn sigma0(&self) -> T {
        self.sigma0
    }

    pub fn components(&self) -> &[RankOnePC<T>] {
        &self.components
    }

    /// `lambda_k = var(<X, U_k>) = sigma_k^2 + sigma_0^2`.
    pub fn eigenvalue(&self, k: usize) -> T {
        self.sigma[k] * self.sigma[k] + self.sigma0 * self.sigma0
    }

    /// Draws `n` observations. RNG consumption order per observation:
    /// `theta_1..theta_r`, then the noise entries in row-major order.
    pub fn sample(&self, n: usize, dist: NoiseDistribution, seed: u64) -> Result<SampleSet<T>> {
        if n == 0 {
            return Err(MpcaError::InvalidInput("sample size must be >= 1".into()));
        }
        let mut rng: ChaCha8Rng = seeded_rng(seed, Stream::Data);
        let big_d: usize = self.dims.iter().product();
        let r = self.r();
        let vecs: Vec<Vec<T>> = self
            .components
            .iter()
            .map(|c| kron(&c.factor_slices()))
            .collect();

        let mut data = Vec::with_capacity(n * big_d);
        let mut factors = Vec::with_capacity(n * r);
        let mut noise = Vec::with_capacity(n * big_d);
        let mut obs = vec![T::zero(); big_d];
        for _ in 0..n {
            obs.iter_mut().for_each(|x| *x = T::zero());
            for (k, u) in vecs.iter().enumerate() {
                let theta = T::of(dist.draw(&mut rng));
                factors.push(theta);
                let scale = self.sigma[k] * theta;
                for (o, &x) in obs.iter_mut().zip(u) {
                    *o += scale * x;
                }
            }
            for o in obs.iter_mut() {
                let e = T::of(dist.draw(&mut rng));
                noise.push(e);
                *o += self.sigma0 * e;
            }
            data.extend_from_slice(&obs);
        }
        let mut sample = SampleSet::from_stacked(self.dims.clone(), n, data)?;
        sample.factors = Some(factors);
        sample.noise = Some(noise);
        Ok(sample)
    }
}

/// `n` observations of common shape, stored stacked as an
/// `n x d_1 x ... x d_p` row-major array.
#[derive(Clone, Debug)]
pub struct SampleSet<T> {
    dims: Vec<usize>,
    n: usize,
    data: Vec<T>,
    /// `n x r` factor draws, kept for synthetic data.
    pub factors: Option<Vec<T>>,
    /// Stacked noise tensors, kept for synthetic data.
    pub noise: Option<Vec<T>>,
    /// Lazily built copies with mode `q` moved to the front of each
    /// observation; slot 0 stays empty since that is the stored layout.
    layouts: Vec<OnceLock<Vec<T>>>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn from_stacked(dims: Vec<usize>, n: usize, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(MpcaError::InvalidInput(format!("invalid dims {dims:?}")));
        }
        if n == 0 {
            return Err(MpcaError::InvalidInput("empty sample".into()));
        }
        let big_d: usize = dims.iter().product();
        if data.len() != n * big_d {
            return Err(MpcaError::DimensionMismatch(format!(
                "stacked data of length {} for n = {n} and dims {dims:?}",
                data.len()
            )));
        }
        let layouts = (0..dims.len()).map(|_| OnceLock::new()).collect();
        Ok(SampleSet {
            dims,
            n,
            data,
            factors: None,
            noise: None,
            layouts,
        })
    }

    pub fn from_observations(obs: &[Tensor<T>]) -> Result<Self> {
        let first = obs
            .first()
            .ok_or_else(|| MpcaError::InvalidInput("empty sample".into()))?;
        let dims = first.dims().to_vec();
        let mut data = Vec::with_capacity(obs.len() * first.len());
        for t in obs {
            if t.dims() != dims.as_slice() {
                return Err(MpcaError::DimensionMismatch(format!(
                    "observation dims {:?} vs {dims:?}",
                    t.dims()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Self::from_stacked(dims, obs.len(), data)
    }

    /// Splits the leading mode of a stacked tensor off as the sample index.
    pub fn from_tensor(stacked: &Tensor<T>) -> Result<Self> {
        if stacked.order() < 2 {
            return Err(MpcaError::InvalidInput(
                "stacked tensor needs an observation mode plus at least one data mode".into(),
            ));
        }
        let n = stacked.dims()[0];
        Self::from_stacked(stacked.dims()[1..].to_vec(), n, stacked.data().to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// `D = d_1 ... d_p`.
    pub fn obs_len(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn stacked_data(&self) -> &[T] {
        &self.data
    }

    /// Stacked data with each observation laid out as `d_q x (other modes in
    /// order)`, so a contraction over every mode but `q` is one
    /// matrix-vector product.
    pub fn mode_major(&self, q: usize) -> &[T] {
        if q == 0 {
            return &self.data;
        }
        self.layouts[q].get_or_init(|| {
            let len = self.obs_len();
            let dq = self.dims[q];
            let rest = len / dq;
            // stride of each mode inside the "other modes" block
            let mut strides = vec![0usize; self.dims.len()];
            let mut s = 1;
            for m in (0..self.dims.len()).rev() {
                if m != q {
                    strides[m] = s;
                    s *= self.dims[m];
                }
            }
            let mut out = vec![T::zero(); self.data.len()];
            let mut idx = vec![0usize; self.dims.len()];
            for i in 0..self.n {
                let src = &self.data[i * len..(i + 1) * len];
                let dst = &mut out[i * len..(i + 1) * len];
                idx.iter_mut().for_each(|x| *x = 0);
                for &v in src {
                    let off = idx[q] * rest + idx.iter().zip(&strides).map(|(a, b)| a * b).sum::<usize>();
                    dst[off] = v;
                    increment(&mut idx, &self.dims);
                }
            }
            out
        })
    }

    pub fn observation_slice(&self, i: usize) -> &[T] {
        let len = self.obs_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn observation(&self, i: usize) -> Tensor<T> {
        Tensor::new(self.dims.clone(), self.observation_slice(i).to_vec()).expect("consistent")
    }

    /// The stacked `n x d_1 x ... x d_p` tensor.
    pub fn to_stacked_tensor(&self) -> Tensor<T> {
        let mut dims = vec![self.n];
        dims.extend_from_slice(&self.dims);
        Tensor::new(dims, self.data.clone()).expect("consistent")
    }

    /// Copies the listed observations, in order. Factors and noise follow.
    pub fn subset(&self, indices: &[usize]) -> Result<SampleSet<T>> {
        if indices.is_empty() {
            return Err(MpcaError::InvalidInput("empty subset".into()));
        }
        let len = self.obs_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n {
                return Err(MpcaError::InvalidInput(format!("observation {i} out of range")));
            }
            data.extend_from_slice(self.observation_slice(i));
        }
        let mut out = SampleSet::from_stacked(self.dims.clone(), indices.len(), data)?;
        if let Some(f) = &self.factors {
            let r = f.len() / self.n;
            out.factors = Some(indices.iter().flat_map(|&i| f[i * r..(i + 1) * r].iter().copied()).collect());
        }
        if let Some(e) = &self.noise {
            out.noise = Some(indices.iter().flat_map(|&i| e[i * len..(i + 1) * len].iter().copied()).collect());
        }
        Ok(out)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&x| x == T::zero())
    }
}

/// Serializable description of a spiked model:
/// `{dims, r, sigma, sigma0, components_mode, seed, noise}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub r: usize,
    pub sigma: Vec<f64>,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_components_mode")]
    pub components_mode: ComponentsMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: NoiseDistribution,
}

fn default_sigma0() -> f64 {
    1.0
}

fn default_components_mode() -> ComponentsMode {
    ComponentsMode::PaperSim
}

fn default_noise() -> NoiseDistribution {
    NoiseDistribution::StandardNormal
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.len() != self.r {
            return Err(MpcaError::Config(format!(
                "{} sigma values for r = {}",
                self.sigma.len(),
                self.r
            )));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(MpcaError::Config(format!("invalid dims {:?}", self.dims)));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self) -> Result<SpikedModel<T>> {
        self.validate()?;
        let comps = make_components(&self.dims, self.r, self.components_mode, self.seed)?;
        SpikedModel::new(
            self.dims.clone(),
            self.sigma.iter().map(|&s| T::of(s)).collect(),
            T::of(self.sigma0),
            comps,
        )
    }
}
