//! Recurrent Markov switching prior over latent trajectories.
//!
//! The latent process is a regime-switching Gaussian autoregression:
//!
//! ```text
//! s_1 ~ softmax(initial_logits)          z_1 | s_1 = k ~ N(mu_k, diag(sigma0_k^2))
//! s_t | s_{t-1} = l, z_{t-1} ~ Q(z_{t-1})[l, .]
//! z_t | z_{t-1}, s_t = k ~ N(m_k(z_{t-1}), diag(sigma_k^2))
//! ```
//!
//! `Q` is either a fixed logit matrix (autonomous switching) or a network of
//! `z_{t-1}` whose `K*K` outputs are row-softmaxed (recurrent switching).
//! Inference is an exact forward–backward pass in log space with a
//! normaliser per step; the sequence log-likelihood is the sum of those
//! normalisers.

use nalgebra::DMatrix;

use crate::error::{contract, Result};
use crate::math::{argmax, diag_gaussian_logpdf, log_softmax, logsumexp, softmax};
use crate::nnet::{default_activations, Activation, GradTape, Mlp};
use crate::params::{take, Parameterized, TensorSpec};
use crate::rng::Sampler;

/// Lower bound on every standard deviation after an optimiser step.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum Switching {
    /// `K x K` logits; row `l` is the distribution out of regime `l`.
    Autonomous(DMatrix<f64>),
    /// Network `R^m -> R^{K*K}`; output `l*K + k` is the logit of `l -> k`.
    Recurrent(Mlp),
}

impl Switching {
    pub fn is_recurrent(&self) -> bool {
        matches!(self, Switching::Recurrent(_))
    }
}

/// Shape of a randomly initialised prior.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsmArch {
    pub regimes: usize,
    pub latent_dim: usize,
    pub transition_hidden: Vec<usize>,
    pub transition_activation: Activation,
    /// Transition means are `z + net(z)` instead of `net(z)`.
    pub residual: bool,
    pub recurrent: bool,
    pub switching_hidden: Vec<usize>,
    pub switching_activation: Activation,
    /// Self-transition probability the switching logits start from.
    pub initial_stay: f64,
}

impl Default for RmsmArch {
    fn default() -> Self {
        Self {
            regimes: 2,
            latent_dim: 1,
            transition_hidden: vec![32],
            transition_activation: Activation::Cosine,
            residual: false,
            recurrent: false,
            switching_hidden: vec![32],
            switching_activation: Activation::Gelu,
            initial_stay: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsmParams {
    pub initial_logits: Vec<f64>,
    pub initial_means: Vec<Vec<f64>>,
    pub initial_log_sigmas: Vec<Vec<f64>>,
    /// Transition mean networks, one per regime, each `R^m -> R^m`.
    pub transitions: Vec<Mlp>,
    pub transition_log_sigmas: Vec<Vec<f64>>,
    pub residual: bool,
    pub switching: Switching,
}

/// Output of one forward–backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTables {
    /// Normalised forward messages, `T x K`; row `t` is `log p(s_t | z_{1:t})`.
    pub log_alpha: DMatrix<f64>,
    /// Scaled backward messages, `T x K`.
    pub log_beta: DMatrix<f64>,
    /// Smoothed marginals `p(s_t = k | z_{1:T})`, `T x K`.
    pub gamma: DMatrix<f64>,
    /// `xi[t][(k, l)] = p(s_{t+1} = k, s_t = l | z_{1:T})` for `t = 0..T-1` (0-based).
    pub xi: Vec<DMatrix<f64>>,
    /// Per-step log normalisers; they sum to `loglik`.
    pub log_normalizers: Vec<f64>,
    pub loglik: f64,
}

impl PosteriorTables {
    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.nrows() == 0
    }

    pub fn regimes(&self) -> usize {
        self.gamma.ncols()
    }
}

/// A joint draw of latents (`T x m`) and regime labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub z: DMatrix<f64>,
    pub s: Vec<usize>,
}

/// Gradient of `log p(z_{1:T})`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsmGradient {
    /// Same layout as [`Parameterized::params`].
    pub params: Vec<f64>,
    /// `T x m`.
    pub z: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForecastMode {
    Map,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Predicted latents, `H x m`.
    pub z: DMatrix<f64>,
    /// Predicted regime per step.
    pub regimes: Vec<usize>,
    /// Predictive regime distribution per step, `H x K`.
    pub regime_probs: DMatrix<f64>,
}

/// Per-step quantities shared by inference and the gradient pass.
struct Terms {
    /// `T x K` log emission densities (initial density at t = 0).
    log_emit: Vec<Vec<f64>>,
    /// `(T-1)` rows of `K*K` entries: `log Q(z_t)[l*K + k]`.
    log_q: Vec<Vec<f64>>,
    /// Transition means `(T-1) x K x m`, recorded only for gradients.
    means: Vec<Vec<Vec<f64>>>,
    trans_tapes: Vec<Vec<GradTape>>,
    switch_tapes: Vec<GradTape>,
}

pub(crate) fn rows_of(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..z.nrows()).map(|t| z.row(t).iter().copied().collect()).collect()
}

impl RmsmParams {
    pub fn new(
        initial_logits: Vec<f64>,
        initial_means: Vec<Vec<f64>>,
        initial_log_sigmas: Vec<Vec<f64>>,
        transitions: Vec<Mlp>,
        transition_log_sigmas: Vec<Vec<f64>>,
        residual: bool,
        switching: Switching,
    ) -> Result<Self> {
        let p = Self {
            initial_logits,
            initial_means,
            initial_log_sigmas,
            transitions,
            transition_log_sigmas,
            residual,
            switching,
        };
        p.validate()?;
        Ok(p)
    }

    /// Random initialisation following `arch`.
    pub fn random(arch: &RmsmArch, sampler: &mut Sampler) -> Result<Self> {
        let (k, m) = (arch.regimes, arch.latent_dim);
        if k == 0 || m == 0 {
            return contract("regime count and latent dimension must be positive");
        }
        let mut widths = vec![m];
        widths.extend_from_slice(&arch.transition_hidden);
        widths.push(m);
        let transitions = (0..k)
            .map(|_| Mlp::new(&widths, arch.transition_activation, sampler))
            .collect::<Result<Vec<_>>>()?;
        let stay = arch.initial_stay.clamp(1e-6, 1.0 - 1e-6);
        let sticky = sticky_logits(k, stay);
        let switching = if arch.recurrent {
            let mut sw = vec![m];
            sw.extend_from_slice(&arch.switching_hidden);
            sw.push(k * k);
            let mut net = Mlp::new(&sw, arch.switching_activation, sampler)?;
            let last = net.num_layers() - 1;
            let w: Vec<f64> = net.layer_weights(last).iter().map(|v| 0.1 * v).collect();
            net.set_layer(last, &w, sticky.transpose().as_slice())?;
            Switching::Recurrent(net)
        } else {
            Switching::Autonomous(sticky)
        };
        Self::new(
            vec![0.0; k],
            (0..k).map(|_| (0..m).map(|_| 0.5 * sampler.normal()).collect()).collect(),
            vec![vec![0.0; m]; k],
            transitions,
            vec![vec![0.5f64.ln(); m]; k],
            arch.residual,
            switching,
        )
    }

    pub fn num_regimes(&self) -> usize {
        self.initial_logits.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.initial_means.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_regimes();
        let m = self.latent_dim();
        if k == 0 || m == 0 {
            return contract("regime count and latent dimension must be positive");
        }
        let km_ok = |v: &Vec<Vec<f64>>| v.len() == k && v.iter().all(|r| r.len() == m);
        if !km_ok(&self.initial_means)
            || !km_ok(&self.initial_log_sigmas)
            || !km_ok(&self.transition_log_sigmas)
        {
            return contract("initial/transition parameter blocks must be K x m");
        }
        if self.transitions.len() != k
            || self
                .transitions
                .iter()
                .any(|n| n.input_dim() != m || n.output_dim() != m)
        {
            return contract("need K transition networks mapping R^m -> R^m");
        }
        let sig_ok = self
            .initial_log_sigmas
            .iter()
            .chain(&self.transition_log_sigmas)
            .flatten()
            .all(|v| v.is_finite() && v.exp() > 0.0 && v.exp().is_finite());
        if !sig_ok {
            return contract("every sigma must be positive and finite");
        }
        match &self.switching {
            Switching::Autonomous(l) if l.nrows() != k || l.ncols() != k => {
                contract("autonomous switching logits must be K x K")
            }
            Switching::Recurrent(net) if net.input_dim() != m || net.output_dim() != k * k => {
                contract("recurrent switching network must map R^m -> R^{K*K}")
            }
            _ => Ok(()),
        }
    }

    pub fn transition_mean(&self, k: usize, z_prev: &[f64]) -> Vec<f64> {
        let mut out = self.transitions[k].eval(z_prev);
        if self.residual {
            for (o, z) in out.iter_mut().zip(z_prev) {
                *o += z;
            }
        }
        out
    }

    /// `log N(z_next; m_k(z_prev), diag(sigma_k^2))`.
    pub fn transition_logpdf(&self, z_prev: &[f64], z_next: &[f64], k: usize) -> Result<f64> {
        if k >= self.num_regimes() {
            return contract(format!("regime {k} out of range"));
        }
        let m = self.latent_dim();
        if z_prev.len() != m || z_next.len() != m {
            return contract("latent vectors must have length m");
        }
        if z_prev.iter().chain(z_next).any(|v| !v.is_finite()) {
            return contract("transition_logpdf received non-finite input");
        }
        let mean = self.transition_mean(k, z_prev);
        Ok(diag_gaussian_logpdf(z_next, &mean, &self.transition_log_sigmas[k]))
    }

    pub fn initial_logpdf(&self, z1: &[f64], k: usize) -> f64 {
        diag_gaussian_logpdf(z1, &self.initial_means[k], &self.initial_log_sigmas[k])
    }

    pub fn initial_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.initial_logits)
    }

    fn switch_logits(&self, z_prev: &[f64]) -> Vec<f64> {
        match &self.switching {
            Switching::Autonomous(l) => l.transpose().as_slice().to_vec(),
            Switching::Recurrent(net) => net.eval(z_prev),
        }
    }

    /// `K x K` row-stochastic matrix `Q(z_prev)`.
    pub fn switch_matrix(&self, z_prev: &[f64]) -> DMatrix<f64> {
        let k = self.num_regimes();
        let logits = self.switch_logits(z_prev);
        let mut q = DMatrix::zeros(k, k);
        for l in 0..k {
            for (j, p) in softmax(&logits[l * k..(l + 1) * k]).into_iter().enumerate() {
                q[(l, j)] = p;
            }
        }
        q
    }

    fn row_log_softmax(&self, logits: &[f64]) -> Vec<f64> {
        let k = self.num_regimes();
        let mut out = Vec::with_capacity(k * k);
        for l in 0..k {
            out.extend(log_softmax(&logits[l * k..(l + 1) * k]));
        }
        out
    }

    fn check_sequence(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.nrows() == 0 {
            return contract("sequence must contain at least one step");
        }
        if z.ncols() != self.latent_dim() {
            return contract(format!(
                "sequence has {} columns, latent dimension is {}",
                z.ncols(),
                self.latent_dim()
            ));
        }
        self.validate()
    }

    fn terms(&self, rows: &[Vec<f64>], record: bool) -> Result<Terms> {
        let k = self.num_regimes();
        let t_len = rows.len();
        let mut log_emit = Vec::with_capacity(t_len);
        log_emit.push((0..k).map(|j| self.initial_logpdf(&rows[0], j)).collect());
        let mut log_q = Vec::with_capacity(t_len.saturating_sub(1));
        let mut means = Vec::new();
        let mut trans_tapes = Vec::new();
        let mut switch_tapes = Vec::new();
        let autonomous_log_q = match &self.switching {
            Switching::Autonomous(_) => Some(self.row_log_softmax(&self.switch_logits(&rows[0]))),
            Switching::Recurrent(_) => None,
        };
        for t in 1..t_len {
            let prev = &rows[t - 1];
            let mut emit = Vec::with_capacity(k);
            let mut step_means = Vec::with_capacity(if record { k } else { 0 });
            let mut step_tapes = Vec::with_capacity(if record { k } else { 0 });
            for j in 0..k {
                let mut mean = if record {
                    let (out, tape) = self.transitions[j].forward(prev)?;
                    step_tapes.push(tape);
                    out
                } else {
                    self.transitions[j].eval(prev)
                };
                if self.residual {
                    for (o, z) in mean.iter_mut().zip(prev) {
                        *o += z;
                    }
                }
                emit.push(diag_gaussian_logpdf(&rows[t], &mean, &self.transition_log_sigmas[j]));
                if record {
                    step_means.push(mean);
                }
            }
            log_emit.push(emit);
            if record {
                means.push(step_means);
                trans_tapes.push(step_tapes);
            }
            match (&self.switching, &autonomous_log_q) {
                (_, Some(lq)) => log_q.push(lq.clone()),
                (Switching::Recurrent(net), None) => {
                    let logits = if record {
                        let (out, tape) = net.forward(prev)?;
                        switch_tapes.push(tape);
                        out
                    } else {
                        net.eval(prev)
                    };
                    log_q.push(self.row_log_softmax(&logits));
                }
                _ => unreachable!(),
            }
        }
        if log_emit.iter().flatten().any(|v| v.is_nan()) {
            return Err(crate::Error::Numerical("NaN transition density".into()));
        }
        Ok(Terms {
            log_emit,
            log_q,
            means,
            trans_tapes,
            switch_tapes,
        })
    }

    fn forward_pass(&self, terms: &Terms) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = self.num_regimes();
        let t_len = terms.log_emit.len();
        let log_pi = self.initial_log_probs();
        let mut log_alpha = Vec::with_capacity(t_len);
        let mut norms = Vec::with_capacity(t_len);
        let first: Vec<f64> = (0..k).map(|j| log_pi[j] + terms.log_emit[0][j]).collect();
        let c = logsumexp(&first);
        norms.push(c);
        log_alpha.push(first.iter().map(|v| v - c).collect::<Vec<_>>());
        let mut buf = vec![0.0; k];
        for t in 1..t_len {
            let prev = &log_alpha[t - 1];
            let lq = &terms.log_q[t - 1];
            let a: Vec<f64> = (0..k)
                .map(|j| {
                    for l in 0..k {
                        buf[l] = prev[l] + lq[l * k + j];
                    }
                    terms.log_emit[t][j] + logsumexp(&buf)
                })
                .collect();
            let c = logsumexp(&a);
            norms.push(c);
            log_alpha.push(a.iter().map(|v| v - c).collect());
        }
        (log_alpha, norms)
    }

    fn smooth(&self, terms: &Terms) -> Result<PosteriorTables> {
        let k = self.num_regimes();
        let t_len = terms.log_emit.len();
        let (log_alpha, norms) = self.forward_pass(terms);
        let loglik: f64 = norms.iter().sum();
        if !loglik.is_finite() {
            return Err(crate::Error::Numerical(format!("log-likelihood is {loglik}")));
        }
        let mut log_beta = vec![vec![0.0; k]; t_len];
        let mut buf = vec![0.0; k];
        for t in (0..t_len.saturating_sub(1)).rev() {
            let lq = &terms.log_q[t];
            for l in 0..k {
                for j in 0..k {
                    buf[j] = lq[l * k + j] + terms.log_emit[t + 1][j] + log_beta[t + 1][j];
                }
                log_beta[t][l] = logsumexp(&buf) - norms[t + 1];
            }
        }
        let mut gamma = DMatrix::zeros(t_len, k);
        for t in 0..t_len {
            let w: Vec<f64> = (0..k).map(|j| log_alpha[t][j] + log_beta[t][j]).collect();
            for (j, p) in softmax(&w).into_iter().enumerate() {
                gamma[(t, j)] = p;
            }
        }
        let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len.saturating_sub(1) {
            let lq = &terms.log_q[t];
            let mut w = Vec::with_capacity(k * k);
            for j in 0..k {
                for l in 0..k {
                    w.push(
                        log_alpha[t][l] + lq[l * k + j] + terms.log_emit[t + 1][j] + log_beta[t + 1][j]
                            - norms[t + 1],
                    );
                }
            }
            let p = softmax(&w);
            xi.push(DMatrix::from_row_slice(k, k, &p));
        }
        let to_mat = |v: &Vec<Vec<f64>>| DMatrix::from_fn(t_len, k, |t, j| v[t][j]);
        Ok(PosteriorTables {
            log_alpha: to_mat(&log_alpha),
            log_beta: to_mat(&log_beta),
            gamma,
            xi,
            log_normalizers: norms,
            loglik,
        })
    }

    /// Exact smoothing posteriors and `log p(z_{1:T})`.
    pub fn forward_backward(&self, z: &DMatrix<f64>) -> Result<PosteriorTables> {
        self.check_sequence(z)?;
        let rows = rows_of(z);
        let terms = self.terms(&rows, false)?;
        self.smooth(&terms)
    }

    /// Filtered posteriors `p(s_t | z_{1:t})` (`T x K`) and the log-likelihood.
    pub fn filter(&self, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
        self.check_sequence(z)?;
        let rows = rows_of(z);
        let terms = self.terms(&rows, false)?;
        let (log_alpha, norms) = self.forward_pass(&terms);
        let k = self.num_regimes();
        let post = DMatrix::from_fn(rows.len(), k, |t, j| log_alpha[t][j].exp());
        Ok((post, norms.iter().sum()))
    }

    /// Gradient of `log p(z_{1:T})` with respect to every parameter and every `z_t`.
    pub fn loglik_gradient(&self, z: &DMatrix<f64>, tables: &PosteriorTables) -> Result<RmsmGradient> {
        self.check_sequence(z)?;
        if tables.len() != z.nrows()
            || tables.regimes() != self.num_regimes()
            || tables.xi.len() + 1 != z.nrows()
        {
            return contract("posterior tables do not match this sequence and model");
        }
        let rows = rows_of(z);
        let terms = self.terms(&rows, true)?;
        self.gradient_from(&rows, &terms, tables)
    }

    /// Forward–backward and gradient from a single set of network passes.
    pub fn loglik_and_gradient(&self, z: &DMatrix<f64>) -> Result<(PosteriorTables, RmsmGradient)> {
        self.check_sequence(z)?;
        let rows = rows_of(z);
        let terms = self.terms(&rows, true)?;
        let tables = self.smooth(&terms)?;
        let grad = self.gradient_from(&rows, &terms, &tables)?;
        Ok((tables, grad))
    }

    fn offsets(&self) -> Offsets {
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let logits = 0;
        let init_means = k;
        let init_sigmas = init_means + k * m;
        let trans_sigmas = init_sigmas + k * m;
        let mut nets = Vec::with_capacity(k);
        let mut off = trans_sigmas + k * m;
        for net in &self.transitions {
            nets.push(off);
            off += net.num_params();
        }
        Offsets {
            logits,
            init_means,
            init_sigmas,
            trans_sigmas,
            nets,
            switching: off,
        }
    }

    /// Flat range holding the switching parameters.
    pub fn switching_param_range(&self) -> std::ops::Range<usize> {
        self.offsets().switching..self.num_params()
    }

    /// Flat range holding transition mean networks and their scales.
    pub fn transition_param_range(&self) -> std::ops::Range<usize> {
        let o = self.offsets();
        o.trans_sigmas..o.switching
    }

    fn gradient_from(&self, rows: &[Vec<f64>], terms: &Terms, tables: &PosteriorTables) -> Result<RmsmGradient> {
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let t_len = rows.len();
        let off = self.offsets();
        let mut g = vec![0.0; self.num_params()];
        let mut gz = vec![vec![0.0; m]; t_len];

        // Initial regime and initial density.
        let pi = softmax(&self.initial_logits);
        for j in 0..k {
            let w = tables.gamma[(0, j)];
            g[off.logits + j] += w - pi[j];
            for i in 0..m {
                let inv_var = (-2.0 * self.initial_log_sigmas[j][i]).exp();
                let r = rows[0][i] - self.initial_means[j][i];
                g[off.init_means + j * m + i] += w * r * inv_var;
                g[off.init_sigmas + j * m + i] += w * (r * r * inv_var - 1.0);
                gz[0][i] -= w * r * inv_var;
            }
        }

        // Transition densities.
        let mut out_grad = vec![0.0; m];
        for t in 1..t_len {
            for j in 0..k {
                let w = tables.gamma[(t, j)];
                if w == 0.0 {
                    continue;
                }
                let mean = &terms.means[t - 1][j];
                for i in 0..m {
                    let inv_var = (-2.0 * self.transition_log_sigmas[j][i]).exp();
                    let r = rows[t][i] - mean[i];
                    out_grad[i] = w * r * inv_var;
                    g[off.trans_sigmas + j * m + i] += w * (r * r * inv_var - 1.0);
                    gz[t][i] -= out_grad[i];
                }
                let net = &self.transitions[j];
                let n = net.num_params();
                let ig = net.backward_accumulate(
                    &terms.trans_tapes[t - 1][j],
                    &out_grad,
                    &mut g[off.nets[j]..off.nets[j] + n],
                )?;
                for i in 0..m {
                    gz[t - 1][i] += ig[i];
                    if self.residual {
                        gz[t - 1][i] += out_grad[i];
                    }
                }
            }
        }

        // Switching: d/dlogit[l, j] of sum_k xi[k, l] log Q[l, k].
        let mut dlogits = vec![0.0; k * k];
        for t in 1..t_len {
            let xi = &tables.xi[t - 1];
            let lq = &terms.log_q[t - 1];
            for l in 0..k {
                let row_mass: f64 = (0..k).map(|j| xi[(j, l)]).sum();
                for j in 0..k {
                    let q = lq[l * k + j].exp();
                    dlogits[l * k + j] = xi[(j, l)] - row_mass * q;
                }
            }
            match &self.switching {
                Switching::Autonomous(_) => {
                    for l in 0..k {
                        for j in 0..k {
                            g[off.switching + l * k + j] += dlogits[l * k + j];
                        }
                    }
                }
                Switching::Recurrent(net) => {
                    let ig = net.backward_accumulate(
                        &terms.switch_tapes[t - 1],
                        &dlogits,
                        &mut g[off.switching..],
                    )?;
                    for i in 0..m {
                        gz[t - 1][i] += ig[i];
                    }
                }
            }
        }

        for (j, net) in self.transitions.iter().enumerate() {
            net.mask_gradient(&mut g[off.nets[j]..off.nets[j] + net.num_params()]);
        }
        if let Switching::Recurrent(net) = &self.switching {
            net.mask_gradient(&mut g[off.switching..]);
        }
        Ok(RmsmGradient {
            params: g,
            z: DMatrix::from_fn(t_len, m, |t, i| gz[t][i]),
        })
    }

    /// Clamp every standard deviation at [`SIGMA_FLOOR`].
    pub fn apply_sigma_floor(&mut self) {
        let floor = SIGMA_FLOOR.ln();
        for v in self
            .initial_log_sigmas
            .iter_mut()
            .chain(self.transition_log_sigmas.iter_mut())
            .flatten()
        {
            if *v < floor {
                *v = floor;
            }
        }
    }

    fn sample_gaussian(mean: &[f64], log_sigma: &[f64], sampler: &mut Sampler) -> Vec<f64> {
        mean.iter()
            .zip(log_sigma)
            .map(|(&mu, &ls)| mu + ls.exp() * sampler.normal())
            .collect()
    }

    /// One ancestral step: `s ~ Q(z_prev)[s_prev, .]`, `z ~ N(m_s(z_prev), Sigma_s)`.
    pub fn step(&self, z_prev: &[f64], s_prev: usize, sampler: &mut Sampler) -> (usize, Vec<f64>) {
        let q = self.switch_matrix(z_prev);
        let row: Vec<f64> = q.row(s_prev).iter().copied().collect();
        let s = sampler.categorical(&row);
        let mean = self.transition_mean(s, z_prev);
        let z = Self::sample_gaussian(&mean, &self.transition_log_sigmas[s], sampler);
        (s, z)
    }

    pub fn sample_path(&self, len: usize, sampler: &mut Sampler) -> Result<LatentPath> {
        if len == 0 {
            return contract("path length must be at least 1");
        }
        self.validate()?;
        let m = self.latent_dim();
        let mut s = Vec::with_capacity(len);
        let mut z = DMatrix::zeros(len, m);
        let s1 = sampler.categorical(&softmax(&self.initial_logits));
        let z1 = Self::sample_gaussian(&self.initial_means[s1], &self.initial_log_sigmas[s1], sampler);
        s.push(s1);
        let mut prev = z1;
        for t in 0..len {
            if t > 0 {
                let (st, zt) = self.step(&prev, s[t - 1], sampler);
                s.push(st);
                prev = zt;
            }
            for i in 0..m {
                z[(t, i)] = prev[i];
            }
        }
        Ok(LatentPath { z, s })
    }

    /// Seeded convenience wrapper around [`RmsmParams::sample_path`].
    pub fn sample_path_seeded(&self, len: usize, seed: u64) -> Result<LatentPath> {
        self.sample_path(len, &mut Sampler::new(seed, crate::rng::PARAM_STREAM))
    }

    /// Roll the prior forward `horizon` steps after filtering on `context`.
    pub fn forecast(&self, context: &DMatrix<f64>, horizon: usize, mode: ForecastMode) -> Result<Forecast> {
        let (filtered, _) = self.filter(context)?;
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let last_t = context.nrows() - 1;
        let alpha: Vec<f64> = filtered.row(last_t).iter().copied().collect();
        let last_z: Vec<f64> = context.row(last_t).iter().copied().collect();
        let mut out_z = DMatrix::zeros(horizon, m);
        let mut probs = DMatrix::zeros(horizon, k);
        let mut regimes = Vec::with_capacity(horizon);
        match mode {
            ForecastMode::Map => {
                let mut belief = alpha;
                let mut prev = last_z;
                for h in 0..horizon {
                    let q = self.switch_matrix(&prev);
                    let pred: Vec<f64> = (0..k)
                        .map(|j| (0..k).map(|l| belief[l] * q[(l, j)]).sum())
                        .collect();
                    let s = argmax(&pred);
                    let next = self.transition_mean(s, &prev);
                    for j in 0..k {
                        probs[(h, j)] = pred[j];
                    }
                    for i in 0..m {
                        out_z[(h, i)] = next[i];
                    }
                    regimes.push(s);
                    belief = vec![0.0; k];
                    belief[s] = 1.0;
                    prev = next;
                }
            }
            ForecastMode::MonteCarlo { samples, seed } => {
                if samples == 0 {
                    return contract("Monte Carlo forecast needs at least one sample");
                }
                let mut counts = vec![vec![0usize; k]; horizon];
                for n in 0..samples {
                    let mut sampler = Sampler::new(seed, n as u64);
                    let (states, zs) = self.continue_path(&alpha, &last_z, horizon, &mut sampler);
                    for h in 0..horizon {
                        counts[h][states[h]] += 1;
                        for i in 0..m {
                            out_z[(h, i)] += zs[h][i] / samples as f64;
                        }
                    }
                }
                for h in 0..horizon {
                    for j in 0..k {
                        probs[(h, j)] = counts[h][j] as f64 / samples as f64;
                    }
                    let c: Vec<f64> = counts[h].iter().map(|&c| c as f64).collect();
                    regimes.push(argmax(&c));
                }
            }
        }
        Ok(Forecast {
            z: out_z,
            regimes,
            regime_probs: probs,
        })
    }

    /// Sample a continuation: the current regime is drawn from `belief`, then
    /// `horizon` ancestral steps follow.
    pub fn continue_path(
        &self,
        belief: &[f64],
        last_z: &[f64],
        horizon: usize,
        sampler: &mut Sampler,
    ) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut s_prev = sampler.categorical(belief);
        let mut prev = last_z.to_vec();
        let mut states = Vec::with_capacity(horizon);
        let mut zs = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let (s, z) = self.step(&prev, s_prev, sampler);
            states.push(s);
            zs.push(z.clone());
            s_prev = s;
            prev = z;
        }
        (states, zs)
    }
}

struct Offsets {
    logits: usize,
    init_means: usize,
    init_sigmas: usize,
    trans_sigmas: usize,
    nets: Vec<usize>,
    switching: usize,
}

/// Logits whose row-softmax keeps the regime with probability `stay` and
/// spreads the remainder evenly.
pub fn sticky_logits(k: usize, stay: f64) -> DMatrix<f64> {
    if k == 1 {
        return DMatrix::zeros(1, 1);
    }
    let off = ((1.0 - stay) / (k - 1) as f64).ln();
    DMatrix::from_fn(k, k, |l, j| if l == j { stay.ln() } else { off })
}

/// Per-step argmax of the smoothed marginals; ties go to the lowest index.
pub fn argmax_regimes(tables: &PosteriorTables) -> Vec<usize> {
    (0..tables.len())
        .map(|t| {
            let row: Vec<f64> = tables.gamma.row(t).iter().copied().collect();
            argmax(&row)
        })
        .collect()
}

impl Parameterized for RmsmParams {
    fn num_params(&self) -> usize {
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let sw = match &self.switching {
            Switching::Autonomous(_) => k * k,
            Switching::Recurrent(net) => net.num_params(),
        };
        k + 3 * k * m + self.transitions.iter().map(|n| n.num_params()).sum::<usize>() + sw
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.initial_logits);
        out.extend(self.initial_means.iter().flatten());
        out.extend(self.initial_log_sigmas.iter().flatten());
        out.extend(self.transition_log_sigmas.iter().flatten());
        for net in &self.transitions {
            net.write_params(out);
        }
        match &self.switching {
            Switching::Autonomous(l) => out.extend(l.transpose().iter()),
            Switching::Recurrent(net) => net.write_params(out),
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let mut pos = 0;
        let logits = take(&src[pos..], k, "initial logits")?;
        self.initial_logits.copy_from_slice(logits);
        pos += k;
        for block in [
            &mut self.initial_means,
            &mut self.initial_log_sigmas,
            &mut self.transition_log_sigmas,
        ] {
            let vals = take(&src[pos..], k * m, "K x m block")?;
            for (j, row) in block.iter_mut().enumerate() {
                row.copy_from_slice(&vals[j * m..(j + 1) * m]);
            }
            pos += k * m;
        }
        for net in &mut self.transitions {
            pos += net.read_params(&src[pos..])?;
        }
        match &mut self.switching {
            Switching::Autonomous(l) => {
                let vals = take(&src[pos..], k * k, "switching logits")?;
                *l = DMatrix::from_row_slice(k, k, vals);
                pos += k * k;
            }
            Switching::Recurrent(net) => pos += net.read_params(&src[pos..])?,
        }
        Ok(pos)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let (k, m) = (self.num_regimes(), self.latent_dim());
        let mut specs = vec![
            TensorSpec::new(format!("{prefix}.initial_logits"), vec![k]),
            TensorSpec::new(format!("{prefix}.initial_means"), vec![k, m]),
            TensorSpec::new(format!("{prefix}.initial_log_sigmas"), vec![k, m]),
            TensorSpec::new(format!("{prefix}.transition_log_sigmas"), vec![k, m]),
        ];
        for (j, net) in self.transitions.iter().enumerate() {
            specs.extend(net.tensor_specs(&format!("{prefix}.transition{j}")));
        }
        match &self.switching {
            Switching::Autonomous(_) => {
                specs.push(TensorSpec::new(format!("{prefix}.switch_logits"), vec![k, k]))
            }
            Switching::Recurrent(net) => specs.extend(net.tensor_specs(&format!("{prefix}.switch_net"))),
        }
        specs
    }
}

/// Transition network computing `cos(z + shift)` for scalar latents.
pub fn cosine_transition(shift: f64) -> Mlp {
    let mut net = Mlp::zeros(&[1, 1, 1], default_activations(&[1, 1, 1], Activation::Cosine))
        .expect("static shape");
    net.set_layer(0, &[1.0], &[shift]).expect("static shape");
    net.set_layer(1, &[1.0], &[0.0]).expect("static shape");
    net
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(k: usize, m: usize, recurrent: bool, seed: u64) -> RmsmParams {
        let arch = RmsmArch {
            regimes: k,
            latent_dim: m,
            transition_hidden: vec![4],
            transition_activation: Activation::Cosine,
            recurrent,
            switching_hidden: vec![3],
            initial_stay: 0.7,
            ..Default::default()
        };
        let mut s = Sampler::new(seed, 0);
        let mut p = RmsmParams::random(&arch, &mut s).unwrap();
        let mut flat = p.params();
        for v in flat.iter_mut() {
            *v += 0.3 * s.normal();
        }
        p.set_params(&flat).unwrap();
        p
    }

    fn random_seq(t: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Sampler::new(seed, 9);
        DMatrix::from_fn(t, m, |_, _| s.normal())
    }

    /// Exhaustive sum over regime paths using only the public densities.
    fn brute_force(p: &RmsmParams, z: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let k = p.num_regimes();
        let t_len = z.nrows();
        let rows = rows_of(z);
        let log_pi = p.initial_log_probs();
        let mut joint = Vec::new();
        let mut paths = Vec::new();
        for code in 0..k.pow(t_len as u32) {
            let path: Vec<usize> = (0..t_len).map(|t| (code / k.pow(t as u32)) % k).collect();
            let mut lp = log_pi[path[0]] + p.initial_logpdf(&rows[0], path[0]);
            for t in 1..t_len {
                let q = p.switch_matrix(&rows[t - 1]);
                lp += q[(path[t - 1], path[t])].ln();
                lp += p.transition_logpdf(&rows[t - 1], &rows[t], path[t]).unwrap();
            }
            joint.push(lp);
            paths.push(path);
        }
        let ll = logsumexp(&joint);
        let mut gamma = DMatrix::zeros(t_len, k);
        for (lp, path) in joint.iter().zip(&paths) {
            let w = (lp - ll).exp();
            for t in 0..t_len {
                gamma[(t, path[t])] += w;
            }
        }
        (ll, gamma)
    }

    #[test]
    fn standard_normal_transition() {
        let mut net = Mlp::zeros(&[1, 1], vec![Activation::Identity]).unwrap();
        net.set_layer(0, &[0.0], &[0.0]).unwrap();
        let p = RmsmParams::new(
            vec![0.0],
            vec![vec![0.0]],
            vec![vec![0.0]],
            vec![net],
            vec![vec![0.0]],
            false,
            Switching::Autonomous(DMatrix::zeros(1, 1)),
        )
        .unwrap();
        let v = p.transition_logpdf(&[3.0], &[0.0], 0).unwrap();
        assert!((v + 0.918_938_5).abs() < 1e-7);
        assert!(p.transition_logpdf(&[f64::NAN], &[0.0], 0).is_err());
        assert!(p.transition_logpdf(&[0.0], &[0.0], 1).is_err());
    }

    #[test]
    fn cosine_transition_at_its_mean() {
        let sig = 0.1f64.sqrt().ln();
        let p = RmsmParams::new(
            vec![0.0],
            vec![vec![0.0]],
            vec![vec![0.0]],
            vec![cosine_transition(0.0)],
            vec![vec![sig]],
            false,
            Switching::Autonomous(DMatrix::zeros(1, 1)),
        )
        .unwrap();
        let v = p.transition_logpdf(&[0.0], &[1.0], 0).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.1).ln();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn diagonal_factorisation() {
        let p = random_params(1, 2, false, 4);
        let (zp, zn) = ([0.3, -0.2], [0.1, 0.5]);
        let mean = p.transition_mean(0, &zp);
        let ls = &p.transition_log_sigmas[0];
        let d0 = diag_gaussian_logpdf(&zn[..1], &mean[..1], &ls[..1]);
        let d1 = diag_gaussian_logpdf(&zn[1..], &mean[1..], &ls[1..]);
        assert!((p.transition_logpdf(&zp, &zn, 0).unwrap() - d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn switch_matrix_cases() {
        let mut p = random_params(3, 2, false, 1);
        p.switching = Switching::Autonomous(DMatrix::zeros(3, 3));
        let q = p.switch_matrix(&[0.0, 0.0]);
        assert!(q.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut net = Mlp::zeros(&[2, 9], vec![Activation::Identity]).unwrap();
        let bias: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
        net.set_layer(0, &[0.0; 18], &bias).unwrap();
        p.switching = Switching::Recurrent(net);
        let a = p.switch_matrix(&[0.0, 0.0]);
        let b = p.switch_matrix(&[5.0, -2.0]);
        assert_eq!(a, b);
        for l in 0..3 {
            let expect = softmax(&bias[l * 3..l * 3 + 3]);
            for j in 0..3 {
                assert!((a[(l, j)] - expect[j]).abs() < 1e-15);
            }
        }

        let p = random_params(3, 2, true, 0);
        let a = p.switch_matrix(&[0.0, 0.0]);
        let b = p.switch_matrix(&[1.0, -1.0]);
        assert_ne!(a, b);
        for q in [a, b] {
            for l in 0..3 {
                let row: f64 = q.row(l).sum();
                assert!((row - 1.0).abs() < 1e-12);
                assert!(q.row(l).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn single_regime_reduces_to_gaussian_ar() {
        let p = random_params(1, 2, false, 2);
        let z = random_seq(6, 2, 3);
        let tables = p.forward_backward(&z).unwrap();
        let rows = rows_of(&z);
        let mut expect = p.initial_logpdf(&rows[0], 0);
        for t in 1..6 {
            expect += p.transition_logpdf(&rows[t - 1], &rows[t], 0).unwrap();
        }
        assert!((tables.loglik - expect).abs() < 1e-10);
        assert!(tables.gamma.iter().all(|&g| (g - 1.0).abs() < 1e-15));
    }

    #[test]
    fn matches_path_enumeration() {
        for (k, t_len, seed) in [(2, 3, 0u64), (3, 6, 1), (2, 7, 2), (3, 4, 3)] {
            for recurrent in [false, true] {
                let p = random_params(k, 2, recurrent, seed);
                let z = random_seq(t_len, 2, seed + 10);
                let tables = p.forward_backward(&z).unwrap();
                let (ll, gamma) = brute_force(&p, &z);
                assert!((tables.loglik - ll).abs() < 1e-10, "loglik {} vs {ll}", tables.loglik);
                assert!((&tables.gamma - &gamma).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = random_params(2, 2, false, 0);
        assert!(p.forward_backward(&DMatrix::zeros(0, 2)).is_err());
        assert!(p.forward_backward(&DMatrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn zero_weight_recurrent_net_reproduces_autonomous_bitwise() {
        let auto = random_params(3, 2, false, 6);
        let Switching::Autonomous(logits) = &auto.switching else { unreachable!() };
        let mut net = Mlp::zeros(&[2, 5, 9], default_activations(&[2, 5, 9], Activation::Gelu)).unwrap();
        let bias: Vec<f64> = logits.transpose().iter().copied().collect();
        net.set_layer(1, &[0.0; 45], &bias).unwrap();
        let mut rec = auto.clone();
        rec.switching = Switching::Recurrent(net);
        let z = random_seq(8, 2, 1);
        let a = auto.forward_backward(&z).unwrap();
        let b = rec.forward_backward(&z).unwrap();
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert_eq!(a.gamma, b.gamma);
    }

    fn fd_check(p: &RmsmParams, z: &DMatrix<f64>) {
        let tables = p.forward_backward(z).unwrap();
        let grad = p.loglik_gradient(z, &tables).unwrap();
        let h = 1e-5;
        let ok = |a: f64, b: f64| (a - b).abs() <= 1e-7f64.max(1e-4 * a.abs().max(b.abs()));
        let base = p.params();
        let mut q = p.clone();
        for j in 0..base.len() {
            let mut v = base.clone();
            v[j] += h;
            q.set_params(&v).unwrap();
            let up = q.forward_backward(z).unwrap().loglik;
            v[j] -= 2.0 * h;
            q.set_params(&v).unwrap();
            let dn = q.forward_backward(z).unwrap().loglik;
            let fd = (up - dn) / (2.0 * h);
            assert!(ok(grad.params[j], fd), "param {j}: {} vs {fd}", grad.params[j]);
        }
        for t in 0..z.nrows() {
            for i in 0..z.ncols() {
                let mut zz = z.clone();
                zz[(t, i)] += h;
                let up = p.forward_backward(&zz).unwrap().loglik;
                zz[(t, i)] -= 2.0 * h;
                let dn = p.forward_backward(&zz).unwrap().loglik;
                let fd = (up - dn) / (2.0 * h);
                assert!(ok(grad.z[(t, i)], fd), "z[{t},{i}]: {} vs {fd}", grad.z[(t, i)]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            fd_check(&random_params(2, 2, seed % 2 == 0, seed), &random_seq(4, 2, seed + 100));
        }
        let mut res = random_params(3, 2, true, 11);
        res.residual = true;
        fd_check(&res, &random_seq(5, 2, 12));
        fd_check(&random_params(1, 3, false, 13), &random_seq(4, 3, 14));
    }

    #[test]
    fn mismatched_tables_rejected() {
        let p = random_params(2, 2, false, 0);
        let z = random_seq(4, 2, 0);
        let tables = p.forward_backward(&random_seq(5, 2, 1)).unwrap();
        assert!(p.loglik_gradient(&z, &tables).is_err());
    }

    #[test]
    fn near_deterministic_identity_path_is_constant() {
        let mut p = random_params(1, 2, false, 0);
        p.transitions[0] = Mlp::linear(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        p.transition_log_sigmas = vec![vec![-20.0, -20.0]];
        let path = p.sample_path_seeded(50, 3).unwrap();
        for t in 1..50 {
            for i in 0..2 {
                assert!((path.z[(t, i)] - path.z[(0, i)]).abs() < 1e-6);
            }
        }
        assert_eq!(path, p.sample_path_seeded(50, 3).unwrap());
    }

    #[test]
    fn sticky_chain_occupancy_is_uniform() {
        let mut p = random_params(3, 1, false, 0);
        p.switching = Switching::Autonomous(sticky_logits(3, 0.9));
        let path = p.sample_path_seeded(10_000, 17).unwrap();
        for k in 0..3 {
            let frac = path.s.iter().filter(|&&s| s == k).count() as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "regime {k}: {frac}");
        }
    }

    #[test]
    fn map_forecast_geometric_decay() {
        let p = RmsmParams::new(
            vec![0.0],
            vec![vec![0.0]],
            vec![vec![0.0]],
            vec![Mlp::linear(&[0.5], &[0.0]).unwrap()],
            vec![vec![0.0]],
            false,
            Switching::Autonomous(DMatrix::zeros(1, 1)),
        )
        .unwrap();
        let ctx = DMatrix::from_column_slice(3, 1, &[8.0, 4.0, 2.0]);
        let f = p.forecast(&ctx, 4, ForecastMode::Map).unwrap();
        assert_eq!(f.z.as_slice(), &[1.0, 0.5, 0.25, 0.125]);
        assert_eq!(f.regimes, vec![0; 4]);
    }

    #[test]
    fn monte_carlo_single_sample_is_a_continuation() {
        let p = random_params(3, 2, true, 5);
        let ctx = random_seq(6, 2, 7);
        let f = p
            .forecast(&ctx, 5, ForecastMode::MonteCarlo { samples: 1, seed: 42 })
            .unwrap();
        let (filtered, _) = p.filter(&ctx).unwrap();
        let belief: Vec<f64> = filtered.row(5).iter().copied().collect();
        let last: Vec<f64> = ctx.row(5).iter().copied().collect();
        let (states, zs) = p.continue_path(&belief, &last, 5, &mut Sampler::new(42, 0));
        assert_eq!(f.regimes, states);
        for h in 0..5 {
            for i in 0..2 {
                assert_eq!(f.z[(h, i)], zs[h][i]);
            }
        }
    }

    #[test]
    fn argmax_tie_and_one_hot() {
        let mut tables = random_params(2, 1, false, 0)
            .forward_backward(&random_seq(3, 1, 0))
            .unwrap();
        tables.gamma = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(argmax_regimes(&tables), vec![0, 1, 0]);
    }

    #[test]
    fn argmax_agrees_with_enumeration() {
        let p = random_params(2, 2, true, 21);
        let z = random_seq(3, 2, 22);
        let tables = p.forward_backward(&z).unwrap();
        let (_, gamma) = brute_force(&p, &z);
        let expect: Vec<usize> = (0..3)
            .map(|t| if gamma[(t, 1)] > gamma[(t, 0)] { 1 } else { 0 })
            .collect();
        assert_eq!(argmax_regimes(&tables), expect);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut p = random_params(3, 2, true, 8);
        let flat = p.params();
        assert_eq!(flat.len(), p.num_params());
        let specs = p.tensor_specs("rmsm");
        assert_eq!(specs.iter().map(|s| s.numel()).sum::<usize>(), flat.len());
        p.set_params(&flat).unwrap();
        assert_eq!(p.params(), flat);
    }
}
