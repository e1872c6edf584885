//! Identifiability checks: likelihood margins, posterior dominance horizons,
//! assumption probes and recovery of the linear ambiguity from covariances.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{contract, Error, Result};
use crate::eval::hungarian_max;
use crate::math::diag_gaussian_logpdf;
use crate::rmsm::{LatentPath, RmsmParams};

/// Relative tolerance below which two ratio columns count as equal.
pub const RATIO_GROUP_TOLERANCE: f64 = 1e-6;

fn check_regime(params: &RmsmParams, k: usize) -> Result<()> {
    if k >= params.num_regimes() {
        return contract(format!("regime {k} out of range for K = {}", params.num_regimes()));
    }
    Ok(())
}

fn log_ratio_margin(params: &RmsmParams, z_prev: &[f64], z_next: &[f64], i: usize) -> f64 {
    let own = diag_gaussian_logpdf(z_next, &params.transition_mean(i, z_prev), &params.transition_log_sigmas[i]);
    (0..params.num_regimes())
        .filter(|&k| k != i)
        .map(|k| own - diag_gaussian_logpdf(z_next, &params.transition_mean(k, z_prev), &params.transition_log_sigmas[k]))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest log-density ratio between regime `i` and any competitor, evaluated
/// at the point regime `i` predicts from `z_prev`. Infinite when `K = 1`.
pub fn gaussian_margin(params: &RmsmParams, z_prev: &[f64], i: usize) -> Result<f64> {
    check_regime(params, i)?;
    if z_prev.len() != params.latent_dim() {
        return contract("z_prev has the wrong dimension");
    }
    let target = params.transition_mean(i, z_prev);
    Ok(log_ratio_margin(params, z_prev, &target, i))
}

/// Smallest margin of regime `k` over the transitions of an observed history.
pub fn history_margin(params: &RmsmParams, z: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_regime(params, k)?;
    let rows = crate::rmsm::rows_of(z);
    Ok(rows.windows(2).map(|w| log_ratio_margin(params, &w[0], &w[1], k)).fold(f64::INFINITY, f64::min))
}

/// `1 - min_t Q_kk(z_t)` over every state a transition leaves from.
pub fn history_stickiness(params: &RmsmParams, z: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_regime(params, k)?;
    let rows = crate::rmsm::rows_of(z);
    let stay = rows[..rows.len().saturating_sub(1)]
        .iter()
        .map(|r| params.switch_matrix(r)[(k, k)])
        .fold(1.0, f64::min);
    Ok(1.0 - stay)
}

/// Posterior odds against one regime under a uniform prior over `k` regimes.
pub fn uniform_prior_odds(k: usize) -> f64 {
    (k as f64 - 1.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Steps(u64),
    Unreachable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub margin: f64,
    pub stickiness: f64,
    /// Contraction rate of the odds recursion.
    pub a: f64,
    /// Additive term of the odds recursion.
    pub b: f64,
    /// Fixed point of the recursion.
    pub r_inf: f64,
    pub r1: f64,
    pub horizon: Horizon,
    /// The bound already falls below 1 after a single transition.
    pub one_step: bool,
    /// `r1 <= r_inf`; the closed form does not apply and 2 is reported.
    pub premise_violated: bool,
}

/// First time at which the odds bound `R_t <= a R_{t-1} + b`, started from
/// `r1`, drops below 1.
pub fn dominance_horizon(r1: f64, margin: f64, stickiness: f64) -> Result<DominanceReport> {
    if !(r1 > 0.0) || !r1.is_finite() {
        return contract("initial odds must be positive and finite");
    }
    if !(0.0..0.5).contains(&stickiness) {
        return contract("stickiness must lie in [0, 1/2)");
    }
    if !(margin > 0.0) {
        return contract("margin must be positive");
    }
    let e = (-margin).exp();
    let a = e / (1.0 - stickiness);
    let b = e * stickiness / (1.0 - stickiness);
    let denom = 1.0 - stickiness - e;
    let r_inf = if denom > 0.0 { e * stickiness / denom } else { f64::INFINITY };
    let one_step = margin > ((r1 + stickiness) / (1.0 - stickiness)).ln();
    let mut report = DominanceReport {
        margin,
        stickiness,
        a,
        b,
        r_inf,
        r1,
        horizon: Horizon::Unreachable,
        one_step,
        premise_violated: false,
    };
    if margin <= ((1.0 + stickiness) / (1.0 - stickiness)).ln() {
        return Ok(report);
    }
    if r1 <= r_inf {
        report.premise_violated = true;
        report.horizon = Horizon::Steps(2);
        return Ok(report);
    }
    let q = ((1.0 - r_inf) / (r1 - r_inf)).ln() / a.ln();
    let t = 2.0 + q.floor();
    report.horizon = Horizon::Steps(if t <= 2.0 { 2 } else if t >= u64::MAX as f64 { u64::MAX } else { t as u64 });
    Ok(report)
}

/// Filtered posterior of the labelled regime at every step of `history`.
pub fn simulate_dominance(params: &RmsmParams, history: &LatentPath) -> Result<Vec<f64>> {
    if history.s.len() != history.z.nrows() {
        return contract("history regimes and latents have different lengths");
    }
    if let Some(&k) = history.s.iter().find(|&&k| k >= params.num_regimes()) {
        return contract(format!("history regime {k} out of range"));
    }
    let (filtered, _) = params.filter(&history.z)?;
    Ok(history.s.iter().enumerate().map(|(t, &k)| filtered[(t, k)]).collect())
}

/// Per-dimension standard-deviation ratios for every regime pair `k1 < k2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioMatrix {
    pub pairs: Vec<(usize, usize)>,
    /// `pairs.len() x m`.
    pub values: DMatrix<f64>,
}

impl RatioMatrix {
    pub fn from_sigmas(sigmas: &[Vec<f64>]) -> Result<Self> {
        let k = sigmas.len();
        let Some(m) = sigmas.first().map(Vec::len) else {
            return contract("no regimes given");
        };
        if sigmas.iter().any(|s| s.len() != m) {
            return contract("regimes disagree on dimension");
        }
        if sigmas.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return contract("standard deviations must be positive and finite");
        }
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
        let values = DMatrix::from_fn(pairs.len(), m, |r, i| {
            let (a, b) = pairs[r];
            sigmas[a][i] / sigmas[b][i]
        });
        Ok(Self { pairs, values })
    }

    fn columns_equal(&self, i: usize, j: usize, tol: f64) -> bool {
        let (ci, cj) = (self.values.column(i), self.values.column(j));
        let scale = ci.amax().max(cj.amax());
        (ci - cj).amax() <= tol * scale
    }

    /// Smallest Euclidean distance between two columns; infinite for `m = 1`.
    pub fn min_column_distance(&self) -> f64 {
        let m = self.values.ncols();
        let mut best = f64::INFINITY;
        for i in 0..m {
            for j in i + 1..m {
                best = best.min((self.values.column(i) - self.values.column(j)).norm());
            }
        }
        best
    }

    pub fn columns_distinct(&self, tol: f64) -> bool {
        self.column_groups(tol).iter().all(|g| g.len() == 1)
    }

    /// Partition of the dimensions into classes of equal columns.
    pub fn column_groups(&self, tol: f64) -> Vec<Vec<usize>> {
        let m = self.values.ncols();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in 0..m {
            match groups.iter_mut().find(|g| self.columns_equal(g[0], i, tol)) {
                Some(g) => g.push(i),
                None => groups.push(vec![i]),
            }
        }
        groups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// `min` over probes and regimes of `Q_kk(z)`.
    pub min_self_transition: f64,
    pub implied_stickiness: f64,
    /// Per regime: some dimension where its noise scale weakly dominates.
    pub variance_dominance: Vec<bool>,
    pub max_abs_jacobian_det: f64,
    /// `(regime, probe index)` attaining the maximum.
    pub jacobian_witness: (usize, usize),
    pub ratios: RatioMatrix,
    pub ratio_columns_distinct: bool,
    pub min_ratio_column_distance: f64,
}

impl AssumptionReport {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!(
                "stickiness min_qkk={:.6} epsilon={:.6}",
                self.min_self_transition, self.implied_stickiness
            ),
            format!("variance_dominance {:?}", self.variance_dominance),
            format!(
                "jacobian max_abs_det={:.6} regime={} probe={} holds={}",
                self.max_abs_jacobian_det,
                self.jacobian_witness.0,
                self.jacobian_witness.1,
                self.max_abs_jacobian_det > 0.0
            ),
            format!(
                "ratio_columns distinct={} min_distance={:.6}",
                self.ratio_columns_distinct, self.min_ratio_column_distance
            ),
        ]
    }
}

pub fn check_assumptions(params: &RmsmParams, probes: &[Vec<f64>]) -> Result<AssumptionReport> {
    if probes.is_empty() {
        return contract("probe set must be nonempty");
    }
    let (k, m) = (params.num_regimes(), params.latent_dim());
    if probes.iter().any(|p| p.len() != m) {
        return contract("probe points must have length m");
    }
    let mut min_stay = f64::INFINITY;
    let mut best_det = f64::NEG_INFINITY;
    let mut witness = (0, 0);
    for (pi, z) in probes.iter().enumerate() {
        let q = params.switch_matrix(z);
        for r in 0..k {
            min_stay = min_stay.min(q[(r, r)]);
            let mut jac = params.transitions[r].jacobian(z)?;
            if params.residual {
                jac += DMatrix::<f64>::identity(m, m);
            }
            let det = jac.determinant().abs();
            if det > best_det {
                best_det = det;
                witness = (r, pi);
            }
        }
    }
    let sigmas: Vec<Vec<f64>> =
        params.transition_log_sigmas.iter().map(|ls| ls.iter().map(|v| v.exp()).collect()).collect();
    let variance_dominance = (0..k)
        .map(|r| (0..m).any(|i| (0..k).all(|o| sigmas[r][i] >= sigmas[o][i])))
        .collect();
    let ratios = RatioMatrix::from_sigmas(&sigmas)?;
    Ok(AssumptionReport {
        min_self_transition: min_stay,
        implied_stickiness: 1.0 - min_stay,
        variance_dominance,
        max_abs_jacobian_det: best_det,
        jacobian_witness: witness,
        ratio_columns_distinct: ratios.columns_distinct(RATIO_GROUP_TOLERANCE),
        min_ratio_column_distance: ratios.min_column_distance(),
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleResult {
    /// Recovered mixing matrix; its inverse diagonalises every input covariance.
    pub a_prime: DMatrix<f64>,
    /// `K x m` diagonal of `A'^{-1} Sigma_k A'^{-T}`.
    pub diagonals: DMatrix<f64>,
    /// Ratios implied by the recovered diagonals.
    pub ratios: RatioMatrix,
    /// Dimensions of equal ratio; all singletons when disentanglement is full.
    pub groups: Vec<Vec<usize>>,
    /// Relative off-diagonal residual after joint diagonalisation.
    pub residual: f64,
}

/// `S = A'^{-1} A` together with its best matching to the recovered pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub s: DMatrix<f64>,
    /// `perm[row] = column` carrying the row's mass.
    pub perm: Vec<usize>,
    /// `S[row, perm[row]]` when every group is a singleton.
    pub diag: Option<Vec<f64>>,
    /// Recovered groups paired with the true columns they occupy.
    pub blocks: Vec<(Vec<usize>, Vec<usize>)>,
    /// Frobenius norm of the entries outside the matched pattern.
    pub off_pattern: f64,
    pub norm: f64,
}

impl DisentangleResult {
    pub fn is_full(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    pub fn compare(&self, a: &DMatrix<f64>) -> Result<Comparison> {
        let m = self.a_prime.nrows();
        if a.shape() != (m, m) {
            return contract("reference matrix has the wrong shape");
        }
        let Some(inv) = self.a_prime.clone().try_inverse() else {
            return Err(Error::Numerical("recovered matrix is singular".into()));
        };
        let s = inv * a;
        let mut group_of = vec![0; m];
        for (g, rows) in self.groups.iter().enumerate() {
            for &r in rows {
                group_of[r] = g;
            }
        }
        let energy = DMatrix::from_fn(m, m, |r, c| {
            self.groups[group_of[r]].iter().map(|&rr| s[(rr, c)].powi(2)).sum::<f64>()
        });
        let perm = hungarian_max(&energy);
        let blocks: Vec<(Vec<usize>, Vec<usize>)> = self
            .groups
            .iter()
            .map(|rows| {
                let mut cols: Vec<usize> = rows.iter().map(|&r| perm[r]).collect();
                cols.sort_unstable();
                (rows.clone(), cols)
            })
            .collect();
        let mut off = 0.0;
        for (rows, cols) in &blocks {
            for &r in rows {
                for c in 0..m {
                    if !cols.contains(&c) {
                        off += s[(r, c)].powi(2);
                    }
                }
            }
        }
        let diag = self.is_full().then(|| (0..m).map(|r| s[(r, perm[r])]).collect());
        Ok(Comparison { norm: s.norm(), s, perm, diag, blocks, off_pattern: off.sqrt() })
    }
}

fn check_spd(c: &DMatrix<f64>, k: usize) -> Result<()> {
    let asym = (c - c.transpose()).amax();
    if asym > 1e-10 * c.amax().max(f64::MIN_POSITIVE) {
        return contract(format!("covariance {k} is not symmetric"));
    }
    if c.iter().any(|v| !v.is_finite()) || c.clone().cholesky().is_none() {
        return contract(format!("covariance {k} is not positive definite"));
    }
    Ok(())
}

fn min_relative_gap(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs().max(f64::MIN_POSITIVE).ln()).collect();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn off_diagonal_sq(b: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            if i != j {
                s += b[(i, j)].powi(2);
            }
        }
    }
    s
}

/// Orthogonal joint diagonalisation by Givens sweeps. Returns the basis `V`
/// with `V^T B_k V` as diagonal as possible; `mats` are rotated in place.
fn jacobi_joint(mats: &mut [DMatrix<f64>], mut v: DMatrix<f64>) -> DMatrix<f64> {
    let m = v.nrows();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
                for b in mats.iter() {
                    let h1 = b[(p, p)] - b[(q, q)];
                    let h2 = b[(p, q)] + b[(q, p)];
                    g11 += h1 * h1;
                    g12 += h1 * h2;
                    g22 += h2 * h2;
                }
                let ton = g11 - g22;
                let toff = 2.0 * g12;
                let theta = 0.5 * toff.atan2(ton + ton.hypot(toff));
                let (s, c) = theta.sin_cos();
                if s.abs() <= 1e-15 {
                    continue;
                }
                rotated = true;
                for b in mats.iter_mut() {
                    for j in 0..m {
                        let (bp, bq) = (b[(p, j)], b[(q, j)]);
                        b[(p, j)] = c * bp + s * bq;
                        b[(q, j)] = -s * bp + c * bq;
                    }
                    for i in 0..m {
                        let (bp, bq) = (b[(i, p)], b[(i, q)]);
                        b[(i, p)] = c * bp + s * bq;
                        b[(i, q)] = -s * bp + c * bq;
                    }
                }
                for i in 0..m {
                    let (vp, vq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * vp + s * vq;
                    v[(i, q)] = -s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

pub fn recover_disentanglement(covariances: &[DMatrix<f64>], tolerance: f64) -> Result<DisentangleResult> {
    recover_disentanglement_grouped(covariances, tolerance, RATIO_GROUP_TOLERANCE)
}

/// As [`recover_disentanglement`] with an explicit ratio grouping tolerance,
/// useful for estimated covariances.
pub fn recover_disentanglement_grouped(
    covariances: &[DMatrix<f64>],
    tolerance: f64,
    group_tolerance: f64,
) -> Result<DisentangleResult> {
    let k = covariances.len();
    if k < 2 {
        return contract("need at least two regimes");
    }
    let m = covariances[0].nrows();
    if m == 0 || covariances.iter().any(|c| c.shape() != (m, m)) {
        return contract("covariances must share one square shape");
    }
    if !(tolerance > 0.0) || !(group_tolerance > 0.0) {
        return contract("tolerances must be positive");
    }
    for (i, c) in covariances.iter().enumerate() {
        check_spd(c, i)?;
    }

    // Whiten with the pooled covariance so the remaining ambiguity is orthogonal.
    let pooled = covariances.iter().fold(DMatrix::zeros(m, m), |acc, c| acc + c);
    let eig = SymmetricEigen::new(pooled);
    let w = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    let w_inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let sym = |b: DMatrix<f64>| (&b + b.transpose()) * 0.5;
    let whitened: Vec<DMatrix<f64>> = covariances.iter().map(|c| sym(&w * c * &w)).collect();

    // Start from the eigenbasis of the best-conditioned pair quotient.
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for a in 0..k {
        for b in a + 1..k {
            let Some(inv) = whitened[b].clone().try_inverse() else {
                continue;
            };
            let e = SymmetricEigen::new(sym(inv * &whitened[a]));
            let gap = min_relative_gap(e.eigenvalues.as_slice());
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, e.eigenvectors));
            }
        }
    }
    let start = best.map_or_else(|| DMatrix::identity(m, m), |(_, v)| v);
    let mut rotated: Vec<DMatrix<f64>> = whitened.iter().map(|b| start.transpose() * b * &start).collect();
    let v = jacobi_joint(&mut rotated, start);

    let total: f64 = rotated.iter().map(|b| b.norm_squared()).sum();
    let residual = (rotated.iter().map(off_diagonal_sq).sum::<f64>() / total).sqrt();
    if !(residual <= tolerance) {
        return Err(Error::Diagonalization { residual, tolerance });
    }

    let a_prime = w_inv * &v;
    let diagonals = DMatrix::from_fn(k, m, |r, i| rotated[r][(i, i)]);
    if diagonals.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Numerical("recovered diagonal is not positive".into()));
    }
    let sigmas: Vec<Vec<f64>> = (0..k).map(|r| (0..m).map(|i| diagonals[(r, i)].sqrt()).collect()).collect();
    let ratios = RatioMatrix::from_sigmas(&sigmas)?;
    let groups = ratios.column_groups(group_tolerance);
    Ok(DisentangleResult { a_prime, diagonals, ratios, groups, residual })
}
