//! Maximum-likelihood training of the flow and the switching prior.
//!
//! Each sequence contributes its exact log-density
//! `sum_t log|det J_{f^{-1}}(x_t)| + log p(z_{1:T}) + sum_t log N(eps_t; 0, sigma_eps^2 I)`.
//! Gradients of the prior term come from the smoothed posteriors, and the
//! latent gradient is pushed back through the recorded flow inverse.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::flow::FlowTape;
use crate::model::Model;
use crate::params::Parameterized;
use crate::rmsm::RmsmParams;
use crate::rng::Sampler;

/// Sampler stream for the k-means seeding; epoch shuffles use streams `0..`.
const CLUSTER_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sigma_eps: f64,
    pub lr_flow: f64,
    pub lr_rmsm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps during which switching gradients are zeroed. `None` means ten epochs.
    pub q_freeze_steps: Option<u64>,
    pub pca_init: bool,
    /// Start each regime's transition from one k-means cluster of the
    /// PCA-space increments. Counteracts early state collapse.
    pub cluster_init: bool,
    pub pca_align_weight: f64,
    pub pca_align_steps: u64,
    /// Epoch (0-based) from which both learning rates are scaled by `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma_eps: 0.1,
            lr_flow: 1e-4,
            lr_rmsm: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            q_freeze_steps: None,
            pca_init: true,
            cluster_init: false,
            pca_align_weight: 1.0,
            pca_align_steps: 500,
            lr_drop_epoch: None,
            lr_drop_factor: 0.1,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_eps", self.sigma_eps),
            ("lr_flow", self.lr_flow),
            ("lr_rmsm", self.lr_rmsm),
            ("adam_eps", self.adam_eps),
            ("lr_drop_factor", self.lr_drop_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return contract(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return contract("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return contract("batch_size must be positive");
        }
        if !(self.pca_align_weight >= 0.0) {
            return contract("pca_align_weight must be non-negative");
        }
        Ok(())
    }
}

/// One sequence's objective and its gradient in the [`Model`] parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    /// `loglik - align_weight * align_loss`.
    pub objective: f64,
    pub loglik: f64,
    pub logdet: f64,
    pub prior: f64,
    pub noise: f64,
    pub align_loss: f64,
    pub grad: Vec<f64>,
    /// `sum_t gamma_t`.
    pub occupancy: Vec<f64>,
}

/// Exact log-density of `x` (`T x n`) and its gradient with respect to all
/// model parameters. With `align = Some((targets, w))` the objective also
/// subtracts `w * pca_align_loss(z, targets)`; that term only reaches the flow.
pub fn sequence_objective(
    model: &Model,
    x: &DMatrix<f64>,
    sigma_eps: f64,
    align: Option<(&DMatrix<f64>, f64)>,
) -> Result<SequenceEval> {
    let (n, m) = (model.obs_dim(), model.latent_dim());
    if x.ncols() != n {
        return contract(format!("observations have {} columns, flow expects {n}", x.ncols()));
    }
    if !(sigma_eps > 0.0) {
        return contract("sigma_eps must be positive");
    }
    let t_len = x.nrows();
    let d = n - m;
    let mut z = DMatrix::zeros(t_len, m);
    let mut eps = vec![vec![0.0; d]; t_len];
    let mut tapes: Vec<FlowTape> = Vec::with_capacity(t_len);
    let mut logdet = 0.0;
    let mut row = vec![0.0; n];
    for t in 0..t_len {
        for (i, r) in row.iter_mut().enumerate() {
            *r = x[(t, i)];
        }
        let (v, ld, tape) = model.flow.inverse_taped(&row)?;
        logdet += ld;
        for i in 0..m {
            z[(t, i)] = v[i];
        }
        eps[t].copy_from_slice(&v[m..]);
        tapes.push(tape);
    }
    if !logdet.is_finite() {
        return Err(Error::Numerical(format!("flow log-determinant term is {logdet}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("flow inverse produced non-finite latents".into()));
    }

    let inv_var = sigma_eps.powi(-2);
    let noise_const = -0.5 * crate::math::LN_2PI - sigma_eps.ln();
    let noise: f64 = eps
        .iter()
        .flatten()
        .map(|&e| noise_const - 0.5 * e * e * inv_var)
        .sum();
    if !noise.is_finite() {
        return Err(Error::Numerical(format!("noise term is {noise}")));
    }

    let (tables, prior_grad) = model.rmsm.loglik_and_gradient(&z)?;
    let prior = tables.loglik;
    let mut gz = prior_grad.z;

    let mut align_loss = 0.0;
    let mut align_weight = 0.0;
    if let Some((targets, w)) = align {
        if w > 0.0 {
            let (loss, g) = pca_align_loss(&z, targets)?;
            align_loss = loss;
            align_weight = w;
            gz -= g * w;
        }
    }

    let flow_np = model.flow.num_params();
    let mut grad = vec![0.0; flow_np + model.rmsm.num_params()];
    let mut gv = vec![0.0; n];
    for t in 0..t_len {
        for i in 0..m {
            gv[i] = gz[(t, i)];
        }
        for i in 0..d {
            gv[m + i] = -eps[t][i] * inv_var;
        }
        model
            .flow
            .backward_accumulate(&tapes[t], &gv, 1.0, &mut grad[..flow_np])?;
    }
    grad[flow_np..].copy_from_slice(&prior_grad.params);

    let loglik = logdet + prior + noise;
    let occupancy = (0..tables.regimes()).map(|k| tables.gamma.column(k).sum()).collect();
    Ok(SequenceEval {
        objective: loglik - align_weight * align_loss,
        loglik,
        logdet,
        prior,
        noise,
        align_loss,
        grad,
        occupancy,
    })
}

/// Principal directions of pooled, centred observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `n x m`, orthonormal columns (zero columns beyond the data rank).
    pub basis: DMatrix<f64>,
    pub variances: Vec<f64>,
    pub rank: usize,
}

impl Pca {
    /// `T x m` projections of `x`.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            for (v, mu) in row.iter_mut().zip(&self.mean) {
                *v -= mu;
            }
        }
        c * &self.basis
    }
}

/// Top-`m` principal directions of all sequences and each sequence's projection.
pub fn pca_init(sequences: &[DMatrix<f64>], m: usize) -> Result<(Pca, Vec<DMatrix<f64>>)> {
    let Some(first) = sequences.first() else {
        return contract("PCA needs at least one sequence");
    };
    let n = first.ncols();
    if m == 0 || m > n {
        return contract(format!("cannot extract {m} components from {n}-dimensional data"));
    }
    if sequences.iter().any(|s| s.ncols() != n) {
        return contract("sequences disagree on observation dimension");
    }
    let count: usize = sequences.iter().map(|s| s.nrows()).sum();
    if count < 2 {
        return contract("PCA needs at least two observations");
    }
    let mut mean = vec![0.0; n];
    for s in sequences {
        for row in s.row_iter() {
            for (mu, v) in mean.iter_mut().zip(row.iter()) {
                *mu += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for s in sequences {
        let mut c = s.clone();
        for mut row in c.row_iter_mut() {
            for (v, mu) in row.iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        cov += c.transpose() * &c;
    }
    cov /= (count - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut basis = DMatrix::zeros(n, m);
    let mut variances = Vec::with_capacity(m);
    let mut rank = 0;
    for (j, &idx) in order.iter().take(m).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda > 1e-12 * top.max(f64::MIN_POSITIVE) {
            let mut col = eig.eigenvectors.column(idx).clone_owned();
            // Fix the sign so the largest-magnitude entry is positive.
            let big = col.iamax();
            if col[big] < 0.0 {
                col = -col;
            }
            basis.set_column(j, &col);
            variances.push(lambda);
            rank += 1;
        } else {
            variances.push(0.0);
        }
    }
    if rank < m {
        warn!("data has rank {rank} < {m}; padding PCA basis with zero directions");
    }
    let pca = Pca { mean, basis, variances, rank };
    let targets = sequences.iter().map(|s| pca.project(s)).collect();
    Ok((pca, targets))
}

/// Mean squared error between `z` and `targets` and its gradient in `z`.
pub fn pca_align_loss(z: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if z.shape() != targets.shape() {
        return contract("alignment targets must match the latent shape");
    }
    let count = z.len() as f64;
    if count == 0.0 {
        return Ok((0.0, z.clone()));
    }
    let diff = z - targets;
    let loss = diff.norm_squared() / count;
    Ok((loss, diff * (2.0 / count)))
}

/// Moment-match the initial-state Gaussians of every regime to the first
/// step of the aligned features.
pub fn init_from_pca(rmsm: &mut RmsmParams, targets: &[DMatrix<f64>]) -> Result<()> {
    let m = rmsm.latent_dim();
    if targets.is_empty() || targets.iter().any(|t| t.ncols() != m || t.nrows() == 0) {
        return contract("PCA targets must be non-empty T x m matrices");
    }
    let n = targets.len() as f64;
    for i in 0..m {
        let mean = targets.iter().map(|t| t[(0, i)]).sum::<f64>() / n;
        let var = targets.iter().map(|t| (t[(0, i)] - mean).powi(2)).sum::<f64>() / n;
        let ls = var.sqrt().max(crate::rmsm::SIGMA_FLOOR).ln();
        for k in 0..rmsm.num_regimes() {
            rmsm.initial_means[k][i] = mean;
            rmsm.initial_log_sigmas[k][i] = ls;
        }
    }
    Ok(())
}

/// Lloyd's k-means with k-means++ seeding. Returns centres and labels.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, sampler: &mut Sampler) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k == 0 || points.len() < k {
        return contract(format!("k-means needs at least {k} points, got {}", points.len()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centres = vec![points[sampler.index(points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, &centres[0])).collect();
    while centres.len() < k {
        let next = if nearest.iter().sum::<f64>() > 0.0 { sampler.categorical(&nearest) } else { sampler.index(points.len()) };
        centres.push(points[next].clone());
        let c = centres.last().expect("just pushed");
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(dist(p, c));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let best = (0..k).min_by(|&a, &b| dist(p, &centres[a]).total_cmp(&dist(p, &centres[b]))).expect("k > 0");
            changed |= *l != best;
            *l = best;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok((centres, labels))
}

/// Cluster the one-step targets of the transitions (increments for residual
/// priors, next states otherwise) and give each regime one cluster: the
/// output layer of its mean network becomes the cluster centre and its
/// standard deviations the within-cluster spread.
pub fn init_from_clusters(rmsm: &mut RmsmParams, targets: &[DMatrix<f64>], seed: u64) -> Result<()> {
    let (k, m) = (rmsm.num_regimes(), rmsm.latent_dim());
    if targets.iter().any(|t| t.ncols() != m) {
        return contract("cluster targets must have the latent dimension");
    }
    let mut points = Vec::new();
    for t in targets {
        for r in 1..t.nrows() {
            let step: Vec<f64> = (0..m)
                .map(|i| if rmsm.residual { t[(r, i)] - t[(r - 1, i)] } else { t[(r, i)] })
                .collect();
            points.push(step);
        }
    }
    let mut sampler = Sampler::new(seed, CLUSTER_STREAM);
    let (centres, labels) = kmeans(&points, k, 100, &mut sampler)?;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        let net = &mut rmsm.transitions[c];
        let last = net.num_layers() - 1;
        let zeros = vec![0.0; net.layer_weights(last).len()];
        net.set_layer(last, &zeros, &centres[c])?;
        if members.len() > 1 {
            for i in 0..m {
                let var = members.iter().map(|p| (p[i] - centres[c][i]).powi(2)).sum::<f64>() / members.len() as f64;
                rmsm.transition_log_sigmas[c][i] = var.sqrt().max(crate::rmsm::SIGMA_FLOOR).ln();
            }
        }
    }
    Ok(())
}

/// Adam moments for ascent on a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One ascent step; `lr(i)` gives the rate for parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += lr(i) * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean log-likelihood in nats per time step over the epoch's accepted batches.
    pub loglik_per_step: f64,
    pub objective_per_step: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    /// Fraction of smoothed posterior mass per regime.
    pub occupancy: Vec<f64>,
    pub rejected_steps: u64,
}

impl EpochRecord {
    /// One `key=value` log line.
    pub fn log_line(&self) -> String {
        let occ: Vec<String> = self.occupancy.iter().map(|v| format!("{v:.4}")).collect();
        format!(
            "epoch={} steps={} loglik={:.6} objective={:.6} grad_norm={:.6e} seconds={:.3} occupancy={} rejected={}",
            self.epoch,
            self.steps,
            self.loglik_per_step,
            self.objective_per_step,
            self.grad_norm,
            self.seconds,
            occ.join(","),
            self.rejected_steps
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Resumable training state.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    adam: Adam,
    step: u64,
    epoch: usize,
    targets: Option<Vec<DMatrix<f64>>>,
    bad_streak: u32,
    steps_per_epoch: u64,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh trainer; applies the PCA initialisation when configured.
    pub fn new(mut model: Model, config: TrainConfig, data: &[DMatrix<f64>]) -> Result<Self> {
        let targets = Self::check_and_targets(&model, &config, data)?;
        if config.pca_init || config.cluster_init {
            let owned;
            let t = match &targets {
                Some(t) => t,
                None => {
                    owned = pca_init(data, model.latent_dim())?.1;
                    &owned
                }
            };
            if config.pca_init {
                init_from_pca(&mut model.rmsm, t)?;
            }
            if config.cluster_init {
                init_from_clusters(&mut model.rmsm, t, config.seed)?;
            }
        }
        let n = model.num_params();
        Self::assemble(model, config, data, targets, Adam::new(n), 0, 0)
    }

    /// Continue from saved optimiser state.
    pub fn resume(model: Model, config: TrainConfig, data: &[DMatrix<f64>], adam: Adam, step: u64, epoch: usize) -> Result<Self> {
        if adam.m.len() != model.num_params() || adam.v.len() != model.num_params() {
            return contract("optimiser state does not match the model");
        }
        let targets = Self::check_and_targets(&model, &config, data)?;
        Self::assemble(model, config, data, targets, adam, step, epoch)
    }

    fn check_and_targets(model: &Model, config: &TrainConfig, data: &[DMatrix<f64>]) -> Result<Option<Vec<DMatrix<f64>>>> {
        config.validate()?;
        if data.is_empty() {
            return contract("training data is empty");
        }
        if let Some(bad) = data.iter().position(|x| x.ncols() != model.obs_dim() || x.nrows() == 0) {
            return contract(format!(
                "sequence {bad} has shape {:?}, model expects T x {}",
                data[bad].shape(),
                model.obs_dim()
            ));
        }
        if config.pca_align_weight > 0.0 && config.pca_align_steps > 0 || config.pca_init {
            Ok(Some(pca_init(data, model.latent_dim())?.1))
        } else {
            Ok(None)
        }
    }

    fn assemble(
        model: Model,
        config: TrainConfig,
        data: &[DMatrix<f64>],
        targets: Option<Vec<DMatrix<f64>>>,
        adam: Adam,
        step: u64,
        epoch: usize,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        let steps_per_epoch = data.len().div_ceil(config.batch_size) as u64;
        Ok(Self {
            model,
            config,
            adam,
            step,
            epoch,
            targets,
            bad_streak: 0,
            steps_per_epoch,
            pool,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn q_freeze_limit(&self) -> u64 {
        self.config.q_freeze_steps.unwrap_or(10 * self.steps_per_epoch)
    }

    fn align_weight(&self) -> f64 {
        let total = self.config.pca_align_steps;
        if total == 0 || self.step >= total {
            return 0.0;
        }
        self.config.pca_align_weight * (1.0 - self.step as f64 / total as f64)
    }

    pub fn run_epoch(&mut self, data: &[DMatrix<f64>]) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        Sampler::new(self.config.seed, self.epoch as u64).shuffle(&mut order);
        let drop = matches!(self.config.lr_drop_epoch, Some(e) if self.epoch >= e);
        let scale = if drop { self.config.lr_drop_factor } else { 1.0 };
        let flow_np = self.model.flow.num_params();
        let switch = self.model.rmsm.switching_param_range();
        let switch = flow_np + switch.start..flow_np + switch.end;
        let (lr_flow, lr_rmsm) = (self.config.lr_flow * scale, self.config.lr_rmsm * scale);

        let k = self.model.num_regimes();
        let mut occupancy = vec![0.0; k];
        let mut loglik_sum = 0.0;
        let mut objective_sum = 0.0;
        let mut steps_total = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut accepted = 0u64;
        let mut rejected = 0u64;

        for batch in order.chunks(self.config.batch_size) {
            let w = self.align_weight();
            let model = &self.model;
            let targets = self.targets.as_ref();
            let sigma = self.config.sigma_eps;
            let results: Vec<Result<SequenceEval>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let align = targets.filter(|_| w > 0.0).map(|t| (&t[i], w));
                        sequence_objective(model, &data[i], sigma, align)
                    })
                    .collect()
            });
            let mut evals = Vec::with_capacity(results.len());
            let mut failure = None;
            for r in results {
                match r {
                    Ok(e) => evals.push(e),
                    Err(Error::Numerical(msg)) => failure = Some(msg),
                    Err(e) => return Err(e),
                }
            }
            let mut grad = vec![0.0; self.model.num_params()];
            let mut obj = 0.0;
            let mut ll = 0.0;
            for e in &evals {
                obj += e.objective;
                ll += e.loglik;
                for (g, v) in grad.iter_mut().zip(&e.grad) {
                    *g += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if failure.is_none() && !(obj.is_finite() && grad.iter().all(|g| g.is_finite())) {
                failure = Some("non-finite batch objective or gradient".into());
            }
            if let Some(msg) = failure {
                self.bad_streak += 1;
                rejected += 1;
                warn!("step {} rejected: {msg}", self.step);
                if self.bad_streak >= 3 {
                    return Err(Error::Divergence { step: self.step, message: msg });
                }
                continue;
            }
            self.bad_streak = 0;
            if self.step < self.q_freeze_limit() {
                grad[switch.clone()].iter_mut().for_each(|g| *g = 0.0);
            }
            grad_norm_sum += grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let mut params = self.model.params();
            self.adam.step(&mut params, &grad, &self.config, |i| if i < flow_np { lr_flow } else { lr_rmsm });
            self.model.set_params(&params)?;
            self.model.rmsm.apply_sigma_floor();
            self.step += 1;
            accepted += 1;
            loglik_sum += ll;
            objective_sum += obj;
            steps_total += batch.iter().map(|&i| data[i].nrows()).sum::<usize>();
            for e in &evals {
                for (o, v) in occupancy.iter_mut().zip(&e.occupancy) {
                    *o += v;
                }
            }
            debug!("step {} objective {:.6}", self.step, obj * inv);
        }
        let total_occ: f64 = occupancy.iter().sum();
        if total_occ > 0.0 {
            occupancy.iter_mut().for_each(|o| *o /= total_occ);
        }
        let per = |v: f64| if steps_total > 0 { v / steps_total as f64 } else { 0.0 };
        let record = EpochRecord {
            epoch: self.epoch,
            steps: self.step,
            loglik_per_step: per(loglik_sum),
            objective_per_step: per(objective_sum),
            grad_norm: if accepted > 0 { grad_norm_sum / accepted as f64 } else { 0.0 },
            seconds: start.elapsed().as_secs_f64(),
            occupancy,
            rejected_steps: rejected,
        };
        self.epoch += 1;
        info!("{}", record.log_line());
        Ok(record)
    }
}

/// Train `init` on `data` for `config.epochs` epochs.
pub fn fit(data: &[DMatrix<f64>], config: &TrainConfig, init: Model) -> Result<(Model, TrainReport)> {
    if config.epochs == 0 {
        return Ok((init, TrainReport::default()));
    }
    let mut trainer = Trainer::new(init, config.clone(), data)?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        report.epochs.push(trainer.run_epoch(data)?);
    }
    Ok((trainer.into_model(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowArch, FlowStack, Mixing};
    use crate::model::{noise_logpdf, ModelArch};
    use crate::nnet::{Activation, Mlp};
    use crate::rmsm::{RmsmArch, Switching};

    fn tiny_model(seed: u64) -> Model {
        let arch = ModelArch {
            flow: FlowArch {
                dim: 4,
                latent_dim: 2,
                depth: 2,
                hidden: vec![5],
                activation: Activation::Gelu,
                mixing: Mixing::Lu,
            },
            rmsm: RmsmArch {
                regimes: 2,
                latent_dim: 2,
                transition_hidden: vec![4],
                recurrent: true,
                switching_hidden: vec![3],
                ..Default::default()
            },
        };
        let mut model = Model::random(&arch, seed).unwrap();
        let mut s = Sampler::new(seed, 77);
        let p: Vec<f64> = model.params().iter().map(|v| v + 0.2 * s.normal()).collect();
        model.set_params(&p).unwrap();
        model
    }

    fn seq(t: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Sampler::new(seed, 5);
        DMatrix::from_fn(t, n, |_, _| s.normal())
    }

    #[test]
    fn identity_flow_single_regime_decomposes() {
        let mut model = tiny_model(0);
        model.flow = FlowStack::identity(4, 2).unwrap();
        model.rmsm.initial_logits = vec![0.0];
        model.rmsm.initial_means.truncate(1);
        model.rmsm.initial_log_sigmas.truncate(1);
        model.rmsm.transitions.truncate(1);
        model.rmsm.transition_log_sigmas.truncate(1);
        model.rmsm.switching = Switching::Autonomous(DMatrix::zeros(1, 1));
        let x = seq(6, 4, 1);
        let e = sequence_objective(&model, &x, 0.3, None).unwrap();
        let z = x.columns(0, 2).clone_owned();
        let eps = x.columns(2, 2).clone_owned();
        let rows = crate::rmsm::rows_of(&z);
        let mut ar = model.rmsm.initial_logpdf(&rows[0], 0);
        for t in 1..6 {
            ar += model.rmsm.transition_logpdf(&rows[t - 1], &rows[t], 0).unwrap();
        }
        assert_eq!(e.logdet, 0.0);
        assert!((e.loglik - ar - noise_logpdf(&eps, 0.3)).abs() < 1e-10);
    }

    #[test]
    fn doubling_sigma_eps_changes_only_noise_term() {
        let model = tiny_model(1);
        let x = seq(5, 4, 2);
        let a = sequence_objective(&model, &x, 0.1, None).unwrap();
        let b = sequence_objective(&model, &x, 0.2, None).unwrap();
        assert_eq!(a.logdet, b.logdet);
        assert_eq!(a.prior, b.prior);
        let enc = model.encode(&x).unwrap();
        let sq = enc.eps.norm_squared();
        let expect = -(5.0 * 2.0) * 2f64.ln() + 0.5 * sq * (1.0 / 0.01 - 1.0 / 0.04);
        assert!((b.noise - a.noise - expect).abs() < 1e-9);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let model = tiny_model(seed);
            let x = seq(5, 4, seed + 10);
            let targets = seq(5, 2, seed + 20);
            let e = sequence_objective(&model, &x, 0.5, Some((&targets, 0.3))).unwrap();
            let base = model.params();
            let mut q = model.clone();
            let h = 1e-6;
            for j in 0..base.len() {
                let mut p = base.clone();
                p[j] += h;
                q.set_params(&p).unwrap();
                let up = sequence_objective(&q, &x, 0.5, Some((&targets, 0.3))).unwrap().objective;
                p[j] -= 2.0 * h;
                q.set_params(&p).unwrap();
                let dn = sequence_objective(&q, &x, 0.5, Some((&targets, 0.3))).unwrap().objective;
                let fd = (up - dn) / (2.0 * h);
                let tol = 1e-7f64.max(1e-4 * fd.abs().max(e.grad[j].abs()));
                assert!((fd - e.grad[j]).abs() <= tol, "param {j}: {} vs {fd}", e.grad[j]);
            }
        }
    }

    #[test]
    fn density_integrates_to_one_on_a_grid() {
        let rmsm = RmsmParams::new(
            vec![0.3, -0.2],
            vec![vec![0.5], vec![-1.0]],
            vec![vec![0.0], vec![-0.5]],
            vec![Mlp::linear(&[0.5], &[0.0]).unwrap(), Mlp::linear(&[0.5], &[0.0]).unwrap()],
            vec![vec![0.0], vec![0.0]],
            false,
            Switching::Autonomous(DMatrix::zeros(2, 2)),
        )
        .unwrap();
        let model = Model::new(FlowStack::identity(1, 1).unwrap(), rmsm).unwrap();
        let h = 1e-3;
        let total: f64 = (-12_000..12_000)
            .map(|i| {
                let x = DMatrix::from_element(1, 1, i as f64 * h);
                model.loglik(&x, 0.1).unwrap().exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut s = Sampler::new(8, 0);
        let centres = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
        let points: Vec<Vec<f64>> = (0..300).map(|i| {
            let c = centres[i % 3];
            vec![c[0] + 0.3 * s.normal(), c[1] + 0.3 * s.normal()]
        }).collect();
        let (found, labels) = kmeans(&points, 3, 50, &mut Sampler::new(1, 0)).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(l, labels[i % 3]);
        }
        for c in &centres {
            assert!(found.iter().any(|f| (f[0] - c[0]).abs() < 0.1 && (f[1] - c[1]).abs() < 0.1));
        }
        assert!(kmeans(&points[..2], 3, 5, &mut Sampler::new(1, 0)).is_err());
    }

    #[test]
    fn cluster_init_assigns_one_velocity_per_regime() {
        let velocities = [[0.1, 0.0], [-0.1, 0.0], [0.0, 0.1]];
        let targets: Vec<DMatrix<f64>> = velocities
            .iter()
            .map(|v| DMatrix::from_fn(30, 2, |t, i| t as f64 * v[i]))
            .collect();
        let arch = RmsmArch { regimes: 3, latent_dim: 2, residual: true, ..RmsmArch::default() };
        let mut p = RmsmParams::random(&arch, &mut Sampler::new(0, 0)).unwrap();
        init_from_clusters(&mut p, &targets, 4).unwrap();
        let mut offsets: Vec<Vec<f64>> = (0..3).map(|k| {
            let z = [5.0, -2.0];
            p.transition_mean(k, &z).iter().zip(&z).map(|(a, b)| ((a - b) * 1e9).round() / 1e9).collect()
        }).collect();
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(offsets, vec![vec![-0.1, 0.0], vec![0.0, 0.1], vec![0.1, 0.0]]);
        for ls in &p.transition_log_sigmas {
            assert!(ls.iter().all(|&v| v == crate::rmsm::SIGMA_FLOOR.ln()));
        }
    }

    #[test]
    fn pca_on_subspace_reconstructs() {
        let mut s = Sampler::new(0, 0);
        let basis = DMatrix::from_fn(2, 4, |_, _| s.normal());
        let data: Vec<DMatrix<f64>> = (0..5)
            .map(|_| DMatrix::from_fn(20, 2, |_, _| s.normal()) * &basis)
            .collect();
        let (pca, targets) = pca_init(&data, 2).unwrap();
        assert_eq!(pca.rank, 2);
        for (x, z) in data.iter().zip(&targets) {
            let mut rec = z * pca.basis.transpose();
            for mut row in rec.row_iter_mut() {
                for (v, mu) in row.iter_mut().zip(&pca.mean) {
                    *v += mu;
                }
            }
            assert!((rec - x).amax() < 1e-8);
        }
    }

    #[test]
    fn pca_basis_is_orthonormal_on_isotropic_data() {
        let mut s = Sampler::new(2, 0);
        let data = vec![DMatrix::from_fn(500, 3, |_, _| s.normal())];
        let (pca, _) = pca_init(&data, 3).unwrap();
        let g = pca.basis.transpose() * &pca.basis;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn pca_finds_long_axis() {
        let mut s = Sampler::new(3, 0);
        let angle = 0.4f64;
        let (c, sn) = (angle.cos(), angle.sin());
        let mut x = DMatrix::zeros(20_000, 2);
        for t in 0..x.nrows() {
            let (a, b) = (3.0 * s.normal(), s.normal());
            x[(t, 0)] = c * a - sn * b;
            x[(t, 1)] = sn * a + c * b;
        }
        let (pca, _) = pca_init(&[x], 1).unwrap();
        let cosang = (pca.basis[(0, 0)] * c + pca.basis[(1, 0)] * sn).abs();
        assert!(cosang.acos().to_degrees() < 1.0);
    }

    #[test]
    fn rank_deficient_pca_pads_with_zeros() {
        let data = vec![DMatrix::from_fn(10, 3, |t, i| if i == 0 { t as f64 } else { 0.0 })];
        let (pca, _) = pca_init(&data, 2).unwrap();
        assert_eq!(pca.rank, 1);
        assert!(pca.basis.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_loss_cases() {
        let t = seq(4, 3, 0);
        assert_eq!(pca_align_loss(&t, &t).unwrap().0, 0.0);
        let (l, _) = pca_align_loss(&t.add_scalar(0.5), &t).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let z = seq(4, 3, 1);
        let (_, g) = pca_align_loss(&z, &t).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += h;
            let mut dn = z.clone();
            dn[i] -= h;
            let fd = (pca_align_loss(&up, &t).unwrap().0 - pca_align_loss(&dn, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(pca_align_loss(&z, &seq(3, 3, 0)).is_err());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let model = tiny_model(4);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, report) = fit(&[seq(5, 4, 0)], &cfg, model.clone()).unwrap();
        assert_eq!(out, model);
        assert!(report.epochs.is_empty());
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_flow: 1e-3,
            lr_rmsm: 1e-3,
            pca_align_steps: 4,
            seed: 9,
            threads: 1,
            ..Default::default()
        }
    }

    #[test]
    fn infinite_freeze_keeps_switching_bitwise() {
        let model = tiny_model(5);
        let data: Vec<_> = (0..8).map(|i| seq(6, 4, i)).collect();
        let cfg = TrainConfig { q_freeze_steps: Some(u64::MAX), ..small_config() };
        let (out, _) = fit(&data, &cfg, model.clone()).unwrap();
        let r = model.rmsm.switching_param_range();
        assert_eq!(out.rmsm.params()[r.clone()], model.rmsm.params()[r]);
        assert_ne!(out.flow.params(), model.flow.params());
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let model = tiny_model(6);
        let data: Vec<_> = (0..8).map(|i| seq(6, 4, i)).collect();
        let (a, ra) = fit(&data, &small_config(), model.clone()).unwrap();
        let cfg = TrainConfig { threads: 3, ..small_config() };
        let (b, rb) = fit(&data, &cfg, model).unwrap();
        assert_eq!(a, b);
        let la: Vec<_> = ra.epochs.iter().map(|e| e.loglik_per_step.to_bits()).collect();
        let lb: Vec<_> = rb.epochs.iter().map(|e| e.loglik_per_step.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn resume_matches_straight_run() {
        let model = tiny_model(7);
        let data: Vec<_> = (0..8).map(|i| seq(6, 4, i)).collect();
        let cfg = small_config();
        let (straight, _) = fit(&data, &cfg, model.clone()).unwrap();
        let mut t = Trainer::new(model, cfg.clone(), &data).unwrap();
        t.run_epoch(&data).unwrap();
        let (m, adam, step, epoch) = (t.model().clone(), t.adam().clone(), t.step(), t.epoch());
        let mut r = Trainer::resume(m, cfg, &data, adam, step, epoch).unwrap();
        r.run_epoch(&data).unwrap();
        r.run_epoch(&data).unwrap();
        assert_eq!(r.into_model(), straight);
    }

    #[test]
    fn nan_data_diverges() {
        let model = tiny_model(8);
        let mut bad = seq(6, 4, 0);
        bad[(2, 1)] = 1e300;
        let data = vec![bad; 4];
        let cfg = TrainConfig { batch_size: 1, pca_init: false, pca_align_weight: 0.0, ..small_config() };
        let err = fit(&data, &cfg, model).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
