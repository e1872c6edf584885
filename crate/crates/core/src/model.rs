//! Flow emission plus switching prior, treated as one parameter vector.

use nalgebra::DMatrix;

use crate::error::{contract, Result};
use crate::flow::{FlowArch, FlowStack};
use crate::math::diag_gaussian_logpdf;
use crate::params::{Parameterized, TensorSpec};
use crate::rmsm::{argmax_regimes, PosteriorTables, RmsmArch, RmsmParams};
use crate::rng::{Sampler, PARAM_STREAM};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub flow: FlowArch,
    pub rmsm: RmsmArch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub flow: FlowStack,
    pub rmsm: RmsmParams,
}

/// Result of pushing one observed sequence through the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `T x m`.
    pub z: DMatrix<f64>,
    /// `T x d`.
    pub eps: DMatrix<f64>,
    /// `sum_t log |det J_{f^{-1}}(x_t)|`.
    pub logdet: f64,
}

impl Model {
    pub fn new(flow: FlowStack, rmsm: RmsmParams) -> Result<Self> {
        if flow.latent_dim() != rmsm.latent_dim() {
            return contract(format!(
                "flow latent dimension {} does not match prior dimension {}",
                flow.latent_dim(),
                rmsm.latent_dim()
            ));
        }
        Ok(Self { flow, rmsm })
    }

    /// Random initialisation; draws come from the parameter stream of `seed`.
    pub fn random(arch: &ModelArch, seed: u64) -> Result<Self> {
        if arch.flow.latent_dim != arch.rmsm.latent_dim {
            return contract("flow and prior latent dimensions differ");
        }
        let mut sampler = Sampler::new(seed, PARAM_STREAM);
        let flow = FlowStack::new(&arch.flow, &mut sampler)?;
        let rmsm = RmsmParams::random(&arch.rmsm, &mut sampler)?;
        Self::new(flow, rmsm)
    }

    pub fn obs_dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.flow.latent_dim()
    }

    pub fn num_regimes(&self) -> usize {
        self.rmsm.num_regimes()
    }

    /// Flat range of the flow parameters; the prior follows.
    pub fn flow_param_range(&self) -> std::ops::Range<usize> {
        0..self.flow.num_params()
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<Encoded> {
        if x.ncols() != self.obs_dim() {
            return contract(format!(
                "observations have {} columns, model expects {}",
                x.ncols(),
                self.obs_dim()
            ));
        }
        let (m, d) = (self.latent_dim(), self.flow.noise_dim());
        let mut z = DMatrix::zeros(x.nrows(), m);
        let mut eps = DMatrix::zeros(x.nrows(), d);
        let mut logdet = 0.0;
        let mut row = vec![0.0; x.ncols()];
        for t in 0..x.nrows() {
            for (i, r) in row.iter_mut().enumerate() {
                *r = x[(t, i)];
            }
            let (v, ld) = self.flow.inverse_full(&row)?;
            logdet += ld;
            for i in 0..m {
                z[(t, i)] = v[i];
            }
            for i in 0..d {
                eps[(t, i)] = v[m + i];
            }
        }
        Ok(Encoded { z, eps, logdet })
    }

    pub fn decode(&self, z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        Ok(self.flow.forward(z, eps)?.0)
    }

    /// Exact `log p(x_{1:T})` with noise scale `sigma_eps`.
    pub fn loglik(&self, x: &DMatrix<f64>, sigma_eps: f64) -> Result<f64> {
        let enc = self.encode(x)?;
        let tables = self.rmsm.forward_backward(&enc.z)?;
        Ok(enc.logdet + tables.loglik + noise_logpdf(&enc.eps, sigma_eps))
    }

    pub fn posteriors(&self, x: &DMatrix<f64>) -> Result<PosteriorTables> {
        self.rmsm.forward_backward(&self.encode(x)?.z)
    }

    pub fn regimes(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(argmax_regimes(&self.posteriors(x)?))
    }
}

/// `sum_t log N(eps_t; 0, sigma^2 I)`.
pub fn noise_logpdf(eps: &DMatrix<f64>, sigma_eps: f64) -> f64 {
    let ls = sigma_eps.ln();
    let d = eps.ncols();
    let zeros = vec![0.0; d];
    let log_sigma = vec![ls; d];
    (0..eps.nrows())
        .map(|t| {
            let row: Vec<f64> = eps.row(t).iter().copied().collect();
            diag_gaussian_logpdf(&row, &zeros, &log_sigma)
        })
        .sum()
}

impl Parameterized for Model {
    fn num_params(&self) -> usize {
        self.flow.num_params() + self.rmsm.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.flow.write_params(out);
        self.rmsm.write_params(out);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let a = self.flow.read_params(src)?;
        let b = self.rmsm.read_params(&src[a..])?;
        Ok(a + b)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let sep = if prefix.is_empty() { "" } else { "." };
        let mut specs = self.flow.tensor_specs(&format!("{prefix}{sep}flow"));
        specs.extend(self.rmsm.tensor_specs(&format!("{prefix}{sep}rmsm")));
        specs
    }
}
