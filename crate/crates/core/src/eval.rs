//! Alignment metrics between learned and ground-truth latents and regimes.

use log::warn;
use nalgebra::DMatrix;

use crate::datagen::Dataset;
use crate::error::{contract, Result};
use crate::model::Model;
use crate::rmsm::{Forecast, ForecastMode};

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assign[row] = column`.
pub fn hungarian_min(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Maximum-weight perfect matching; `assign[row] = column`.
pub fn hungarian_max(weight: &DMatrix<f64>) -> Vec<usize> {
    hungarian_min(&(-weight))
}

/// How estimated latent dimensions map onto the true ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAlignment {
    /// `perm[i]` is the estimated dimension matched to true dimension `i`.
    pub perm: Vec<usize>,
    /// Sign of the matched correlation.
    pub signs: Vec<f64>,
    /// Least-squares slope of true on estimated for each matched pair.
    pub scales: Vec<f64>,
    /// Absolute Pearson correlations, `true x estimated`.
    pub correlations: DMatrix<f64>,
}

fn pooled(seqs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = seqs.first() else {
        return contract("no sequences to pool");
    };
    let m = first.ncols();
    if seqs.iter().any(|s| s.ncols() != m) {
        return contract("sequences disagree on dimension");
    }
    let rows: usize = seqs.iter().map(|s| s.nrows()).sum();
    let mut out = DMatrix::zeros(rows, m);
    let mut r = 0;
    for s in seqs {
        out.rows_mut(r, s.nrows()).copy_from(s);
        r += s.nrows();
    }
    Ok(out)
}

/// Mean of optimally matched absolute Pearson correlations over pooled samples.
pub fn mcc(z_est: &[DMatrix<f64>], z_true: &[DMatrix<f64>]) -> Result<(f64, LatentAlignment)> {
    if z_est.len() != z_true.len() || z_est.iter().zip(z_true).any(|(a, b)| a.shape() != b.shape()) {
        return contract("estimated and true latents must have equal shapes");
    }
    let est = pooled(z_est)?;
    let tru = pooled(z_true)?;
    let (rows, m) = tru.shape();
    if rows < 2 {
        return contract("MCC needs at least two samples");
    }
    let centre = |x: &DMatrix<f64>| {
        let mut c = x.clone();
        for j in 0..m {
            let mu = c.column(j).mean();
            c.column_mut(j).add_scalar_mut(-mu);
        }
        c
    };
    let (ce, ct) = (centre(&est), centre(&tru));
    let norm_e: Vec<f64> = (0..m).map(|j| ce.column(j).norm()).collect();
    let norm_t: Vec<f64> = (0..m).map(|j| ct.column(j).norm()).collect();
    if let Some(j) = norm_t.iter().position(|&v| v == 0.0) {
        return contract(format!("true latent dimension {j} has zero variance"));
    }
    for (j, &v) in norm_e.iter().enumerate() {
        if v == 0.0 {
            warn!("estimated latent dimension {j} has zero variance; its correlations are 0");
        }
    }
    let cross = ct.transpose() * &ce;
    let signed = DMatrix::from_fn(m, m, |i, j| {
        if norm_e[j] == 0.0 {
            0.0
        } else {
            cross[(i, j)] / (norm_t[i] * norm_e[j])
        }
    });
    let abs = signed.abs();
    let perm = hungarian_max(&abs);
    let score = (0..m).map(|i| abs[(i, perm[i])]).sum::<f64>() / m as f64;
    let signs = (0..m).map(|i| if signed[(i, perm[i])] < 0.0 { -1.0 } else { 1.0 }).collect();
    let scales = (0..m)
        .map(|i| {
            let j = perm[i];
            if norm_e[j] == 0.0 {
                0.0
            } else {
                cross[(i, j)] / (norm_e[j] * norm_e[j])
            }
        })
        .collect();
    Ok((score, LatentAlignment { perm, signs, scales, correlations: abs }))
}

fn f1_weights(s_est: &[Vec<usize>], s_true: &[Vec<usize>], k: usize) -> Result<DMatrix<f64>> {
    if s_est.len() != s_true.len() || s_est.iter().zip(s_true).any(|(a, b)| a.len() != b.len()) {
        return contract("estimated and true regime sequences must have equal shapes");
    }
    if s_true.iter().flatten().any(|&v| v >= k) {
        return contract(format!("true regime label outside 0..{k}"));
    }
    let k_est = s_est.iter().flatten().max().map_or(0, |&v| v + 1);
    let size = k.max(k_est);
    let mut conf = DMatrix::<f64>::zeros(size, size);
    for (a, b) in s_est.iter().flatten().zip(s_true.iter().flatten()) {
        conf[(*a, *b)] += 1.0;
    }
    let n_est: Vec<f64> = (0..size).map(|a| conf.row(a).sum()).collect();
    let n_true: Vec<f64> = (0..size).map(|b| conf.column(b).sum()).collect();
    // weight[a, b]: F1 of true class b when estimated label a is mapped to it.
    Ok(DMatrix::from_fn(size, size, |a, b| {
        if b >= k {
            0.0
        } else if n_est[a] + n_true[b] == 0.0 {
            1.0
        } else {
            2.0 * conf[(a, b)] / (n_est[a] + n_true[b])
        }
    }))
}

fn best_permutation_exhaustive(w: &DMatrix<f64>) -> Vec<usize> {
    let n = w.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let score = |p: &[usize]| (0..n).map(|a| w[(a, p[a])]).sum::<f64>();
    best_score = best_score.max(score(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let s = score(&perm);
            if s > best_score {
                best_score = s;
                best.clone_from(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Macro F1 over the `k` true regimes after the best relabelling of the
/// estimates. Returns the score and `pi[estimated label] = true label`.
///
/// A class absent from both truth and (relabelled) estimate counts as F1 = 1.
pub fn regime_f1(s_est: &[Vec<usize>], s_true: &[Vec<usize>], k: usize) -> Result<(f64, Vec<usize>)> {
    if k == 0 {
        return contract("regime count must be positive");
    }
    let w = f1_weights(s_est, s_true, k)?;
    let pi = if w.nrows() <= 8 { best_permutation_exhaustive(&w) } else { hungarian_max(&w) };
    let score = (0..w.nrows()).map(|a| w[(a, pi[a])]).sum::<f64>() / k as f64;
    Ok((score, pi))
}

/// Macro F1 under a fixed relabelling `pi[estimated label] = true label`.
/// Estimated labels outside `pi` count as misses.
pub fn regime_f1_with(s_est: &[Vec<usize>], s_true: &[Vec<usize>], k: usize, pi: &[usize]) -> Result<f64> {
    if k == 0 {
        return contract("regime count must be positive");
    }
    let w = f1_weights(s_est, s_true, k)?;
    let mut used = vec![false; w.ncols()];
    let mut score = 0.0;
    for a in 0..w.nrows() {
        if let Some(&b) = pi.get(a) {
            if b < w.ncols() && !used[b] {
                used[b] = true;
                score += w[(a, b)];
            }
        }
    }
    // Classes left unmatched still score 1 when absent everywhere.
    for b in 0..k {
        if !used[b] && s_true.iter().flatten().all(|&v| v != b) && !s_est.iter().flatten().any(|&v| pi.get(v) == Some(&b)) {
            score += 1.0;
        }
    }
    Ok(score / k as f64)
}

/// Metrics of a model on a dataset; ground-truth metrics are `None` when the
/// dataset lacks the corresponding truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub sequences: usize,
    pub loglik_per_step: f64,
    pub mcc: Option<f64>,
    pub regime_f1: Option<f64>,
    /// `pi[model regime] = true regime` from the F1 matching.
    pub regime_map: Option<Vec<usize>>,
}

impl ModelEvaluation {
    pub fn lines(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |v| format!("{v:.6}"));
        vec![
            format!("sequences={}", self.sequences),
            format!("loglik_per_step={:.6}", self.loglik_per_step),
            format!("mcc={}", opt(self.mcc)),
            format!("regime_f1={}", opt(self.regime_f1)),
        ]
    }
}

pub fn evaluate_model(model: &Model, data: &Dataset, sigma_eps: f64) -> Result<ModelEvaluation> {
    if data.is_empty() {
        return contract("dataset is empty");
    }
    let mut loglik = 0.0;
    let mut zs = Vec::with_capacity(data.len());
    let mut ss = Vec::with_capacity(data.len());
    for x in &data.x {
        let enc = model.encode(x)?;
        let tables = model.rmsm.forward_backward(&enc.z)?;
        loglik += enc.logdet + tables.loglik + crate::model::noise_logpdf(&enc.eps, sigma_eps);
        ss.push(crate::rmsm::argmax_regimes(&tables));
        zs.push(enc.z);
    }
    let steps = (data.len() * data.seq_len()) as f64;
    let mcc_v = match &data.z {
        Some(z) if z.first().map(|z| z.ncols()) == Some(model.latent_dim()) => Some(mcc(&zs, z)?.0),
        Some(_) => {
            warn!("true and model latent dimensions differ; MCC skipped");
            None
        }
        None => None,
    };
    let (f1, map) = match &data.s {
        Some(s) => {
            let (f, pi) = regime_f1(&ss, s, data.regimes)?;
            (Some(f), Some(pi))
        }
        None => (None, None),
    };
    Ok(ModelEvaluation { sequences: data.len(), loglik_per_step: loglik / steps, mcc: mcc_v, regime_f1: f1, regime_map: map })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceForecast {
    pub index: usize,
    /// Predicted observations, `H x n`.
    pub x: DMatrix<f64>,
    pub latent: Forecast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    pub context: usize,
    pub horizon: usize,
    pub forecasts: Vec<SequenceForecast>,
    /// Sequences too short for `context + horizon`.
    pub skipped: Vec<usize>,
    /// Observation-space squared error per horizon step, averaged over sequences.
    pub per_step_mse: Vec<f64>,
    pub mse: Option<f64>,
    /// F1 of the full-sequence regime estimates, which fixes the relabelling.
    pub input_f1: Option<f64>,
    /// F1 of the forecast regimes under that relabelling.
    pub predicted_f1: Option<f64>,
}

impl ForecastReport {
    pub fn lines(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |v| format!("{v:.6}"));
        vec![
            format!("forecast_sequences={}", self.forecasts.len()),
            format!("skipped_sequences={}", self.skipped.len()),
            format!("context={} horizon={}", self.context, self.horizon),
            format!("mse={}", opt(self.mse)),
            format!("input_f1={}", opt(self.input_f1)),
            format!("predicted_f1={}", opt(self.predicted_f1)),
        ]
    }
}

/// Condition on the first `context` steps of each sequence and roll the
/// model forward `horizon` steps. Monte Carlo seeds differ per sequence.
pub fn forecast_dataset(model: &Model, data: &Dataset, context: usize, horizon: usize, mode: ForecastMode) -> Result<ForecastReport> {
    if context == 0 {
        return contract("forecast context must be at least one step");
    }
    let n = model.obs_dim();
    let zeros = vec![0.0; model.flow.noise_dim()];
    let mut forecasts = Vec::new();
    let mut skipped = Vec::new();
    let mut sq = vec![0.0; horizon];
    let (mut est_in, mut true_in, mut est_pred, mut true_pred) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, x) in data.x.iter().enumerate() {
        if context + horizon > x.nrows() {
            log::info!("sequence {i}: context {context} + horizon {horizon} exceeds length {}; skipped", x.nrows());
            skipped.push(i);
            continue;
        }
        if horizon == 0 {
            continue;
        }
        let enc = model.encode(x)?;
        let ctx = enc.z.rows(0, context).into_owned();
        let mode_i = match mode {
            ForecastMode::Map => ForecastMode::Map,
            ForecastMode::MonteCarlo { samples, seed } => ForecastMode::MonteCarlo { samples, seed: seed.wrapping_add((i as u64) << 32) },
        };
        let latent = model.rmsm.forecast(&ctx, horizon, mode_i)?;
        let mut xp = DMatrix::zeros(horizon, n);
        for h in 0..horizon {
            let z: Vec<f64> = latent.z.row(h).iter().copied().collect();
            let row = model.decode(&z, &zeros)?;
            for j in 0..n {
                xp[(h, j)] = row[j];
            }
        }
        let truth = x.rows(context, horizon).into_owned();
        let (per, _) = forecast_error(&xp, &truth)?;
        for (a, b) in sq.iter_mut().zip(per) {
            *a += b;
        }
        if let Some(s) = &data.s {
            est_in.push(crate::rmsm::argmax_regimes(&model.rmsm.forward_backward(&enc.z)?));
            true_in.push(s[i].clone());
            est_pred.push(latent.regimes.clone());
            true_pred.push(s[i][context..context + horizon].to_vec());
        }
        forecasts.push(SequenceForecast { index: i, x: xp, latent });
    }
    let count = forecasts.len();
    let per_step_mse: Vec<f64> = if count == 0 { Vec::new() } else { sq.iter().map(|v| v / count as f64).collect() };
    let mse = (count > 0).then(|| per_step_mse.iter().sum::<f64>() / horizon as f64);
    let (input_f1, predicted_f1) = if est_in.is_empty() {
        (None, None)
    } else {
        let (f_in, pi) = regime_f1(&est_in, &true_in, data.regimes)?;
        (Some(f_in), Some(regime_f1_with(&est_pred, &true_pred, data.regimes, &pi)?))
    };
    Ok(ForecastReport { context, horizon, forecasts, skipped, per_step_mse, mse, input_f1, predicted_f1 })
}

/// Per-step squared error (averaged over dimensions) and its mean.
pub fn forecast_error(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<(Vec<f64>, f64)> {
    if pred.shape() != truth.shape() {
        return contract("prediction and truth shapes differ");
    }
    let (h, m) = pred.shape();
    let per: Vec<f64> = (0..h)
        .map(|t| (0..m).map(|i| (pred[(t, i)] - truth[(t, i)]).powi(2)).sum::<f64>() / m.max(1) as f64)
        .collect();
    let mean = if h == 0 { 0.0 } else { per.iter().sum::<f64>() / h as f64 };
    Ok((per, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Sampler;

    fn brute_max(w: &DMatrix<f64>) -> f64 {
        let p = best_permutation_exhaustive(w);
        (0..w.nrows()).map(|i| w[(i, p[i])]).sum()
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut s = Sampler::new(0, 0);
        for _ in 0..200 {
            let w = DMatrix::from_fn(5, 5, |_, _| s.uniform());
            let a = hungarian_max(&w);
            let got: f64 = (0..5).map(|i| w[(i, a[i])]).sum();
            assert!((got - brute_max(&w)).abs() < 1e-12);
            let mut seen = a.clone();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    fn random_latents(n: usize, t: usize, m: usize, seed: u64) -> Vec<DMatrix<f64>> {
        let mut s = Sampler::new(seed, 0);
        (0..n).map(|_| DMatrix::from_fn(t, m, |_, _| s.normal())).collect()
    }

    #[test]
    fn mcc_identity_and_equivalence_class() {
        let z = random_latents(4, 50, 3, 1);
        assert!((mcc(&z, &z).unwrap().0 - 1.0).abs() < 1e-12);
        let mapped: Vec<_> = z
            .iter()
            .map(|s| DMatrix::from_fn(s.nrows(), 3, |t, j| match j {
                0 => -2.0 * s[(t, 2)] + 1.0,
                1 => 0.5 * s[(t, 0)],
                _ => 3.0 * s[(t, 1)] - 4.0,
            }))
            .collect();
        let (score, al) = mcc(&mapped, &z).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
        assert_eq!(al.perm, vec![1, 2, 0]);
        assert_eq!(al.signs, vec![1.0, 1.0, -1.0]);
    }

    #[test]
    fn mcc_of_independent_noise_is_small() {
        let a = random_latents(100, 1000, 3, 2);
        let b = random_latents(100, 1000, 3, 3);
        assert!(mcc(&a, &b).unwrap().0 <= 0.03);
    }

    #[test]
    fn mcc_zero_variance_estimate() {
        let z = random_latents(1, 30, 2, 4);
        let mut e = z.clone();
        e[0].column_mut(1).fill(3.0);
        let (score, _) = mcc(&e, &z).unwrap();
        assert!(score <= 0.5 + 1e-9);
        assert!(mcc(&z, &e).is_err());
    }

    #[test]
    fn f1_identity_and_relabel() {
        let mut s = Sampler::new(5, 0);
        let truth: Vec<Vec<usize>> = (0..10).map(|_| (0..50).map(|_| s.index(4)).collect()).collect();
        assert_eq!(regime_f1(&truth, &truth, 4).unwrap().0, 1.0);
        let relabel = [2, 0, 3, 1];
        let est: Vec<Vec<usize>> = truth.iter().map(|v| v.iter().map(|&k| relabel[k]).collect()).collect();
        let (score, pi) = regime_f1(&est, &truth, 4).unwrap();
        assert_eq!(score, 1.0);
        for k in 0..4 {
            assert_eq!(pi[relabel[k]], k);
        }
    }

    #[test]
    fn f1_of_random_guess_is_chance() {
        let mut s = Sampler::new(6, 0);
        let truth: Vec<Vec<usize>> = vec![(0..10_000).map(|i| i % 4).collect()];
        let est: Vec<Vec<usize>> = vec![(0..10_000).map(|_| s.index(4)).collect()];
        let (score, _) = regime_f1(&est, &truth, 4).unwrap();
        assert!((score - 0.25).abs() < 0.02, "{score}");
    }

    #[test]
    fn f1_pads_extra_estimated_labels() {
        let truth = vec![vec![0, 0, 1, 1]];
        let est = vec![vec![0, 2, 1, 1]];
        let (score, _) = regime_f1(&est, &truth, 2).unwrap();
        // class 0: tp 1, est 1, true 2 -> 2/3; class 1 -> 1.
        assert!((score - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_and_exhaustive_agree_for_large_k() {
        let mut s = Sampler::new(7, 0);
        let truth: Vec<Vec<usize>> = vec![(0..3000).map(|_| s.index(9)).collect()];
        let est: Vec<Vec<usize>> = vec![truth[0].iter().map(|&k| if s.uniform() < 0.7 { (k + 3) % 9 } else { s.index(9) }).collect()];
        let w = f1_weights(&est, &truth, 9).unwrap();
        let (score, _) = regime_f1(&est, &truth, 9).unwrap();
        assert!((score - brute_max(&w) / 9.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_mapping_f1() {
        let truth = vec![vec![0, 0, 1, 1, 2]];
        let est = vec![vec![1, 1, 0, 0, 2]];
        assert_eq!(regime_f1_with(&est, &truth, 3, &[1, 0, 2]).unwrap(), 1.0);
        let swapped = regime_f1_with(&est, &truth, 3, &[0, 1, 2]).unwrap();
        assert!((swapped - 1.0 / 3.0).abs() < 1e-12);
        let (best, pi) = regime_f1(&est, &truth, 3).unwrap();
        assert_eq!(regime_f1_with(&est, &truth, 3, &pi).unwrap(), best);
    }

    #[test]
    fn forecast_error_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(forecast_error(&a, &a).unwrap().1, 0.0);
        let (per, mean) = forecast_error(&a.add_scalar(0.5), &a).unwrap();
        assert_eq!(per, vec![0.25, 0.25]);
        assert_eq!(mean, 0.25);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 7.0]);
        let (per, mean) = forecast_error(&b, &a).unwrap();
        assert_eq!(per, vec![2.0, 4.5]);
        assert_eq!(mean, 3.25);
    }
}
