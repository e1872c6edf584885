//! Invertible emission `x = f(z, eps)`.
//!
//! The generative direction applies the layers in order; the encoder applies
//! their inverses in reverse order. Every layer has a closed-form inverse and
//! log-determinant, so the density of `x` is exact.

use nalgebra::DMatrix;

use crate::error::{contract, Result};
use crate::nnet::{Activation, GradTape, Mlp};
use crate::params::{take, Parameterized, TensorSpec};
use crate::rng::Sampler;

/// Invertible linear map `W = P L U`.
///
/// `L` has a unit diagonal, `U` has diagonal `sign_i * exp(log_diag_i)`, and
/// `P` is fixed. `(P a)_i = a_{perm_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuMixing {
    n: usize,
    perm: Vec<usize>,
    /// Row-major `n x n`; only the strict lower triangle is used.
    lower: Vec<f64>,
    /// Row-major `n x n`; only the strict upper triangle is used.
    upper: Vec<f64>,
    log_diag: Vec<f64>,
    signs: Vec<f64>,
}

impl LuMixing {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            perm: (0..n).collect(),
            lower: vec![0.0; n * n],
            upper: vec![0.0; n * n],
            log_diag: vec![0.0; n],
            signs: vec![1.0; n],
        }
    }

    /// Pivoted LU factorisation of an invertible matrix.
    pub fn from_matrix(w: &DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n || n == 0 {
            return contract("LU mixing needs a non-empty square matrix");
        }
        if w.iter().any(|v| !v.is_finite()) {
            return contract("LU mixing matrix has non-finite entries");
        }
        // nalgebra factors `Pr W = L U`, so `W = Pr^T L U`.
        let (pr, l, u) = w.clone().lu().unpack();
        let mut pmat = DMatrix::<f64>::identity(n, n);
        pr.permute_rows(&mut pmat);
        let mut perm = vec![0; n];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = (0..n).find(|&j| pmat[(j, i)] == 1.0).expect("permutation row");
        }
        let mut lu = Self::identity(n);
        lu.perm = perm;
        for i in 0..n {
            let d = u[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return contract("LU mixing matrix is singular");
            }
            lu.log_diag[i] = d.abs().ln();
            lu.signs[i] = d.signum();
            for j in 0..n {
                if j < i {
                    lu.lower[i * n + j] = l[(i, j)];
                } else if j > i {
                    lu.upper[i * n + j] = u[(i, j)];
                }
            }
        }
        Ok(lu)
    }

    /// Random orthogonal initialisation (log-determinant zero).
    pub fn random(n: usize, sampler: &mut Sampler) -> Self {
        let g = DMatrix::from_fn(n, n, |_, _| sampler.normal());
        let q = g.qr().q();
        Self::from_matrix(&q).expect("orthogonal matrix is invertible")
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn log_diag(&self) -> &[f64] {
        &self.log_diag
    }

    /// Restore the fixed (non-trainable) parts, as stored in a checkpoint.
    pub fn set_fixed(&mut self, perm: Vec<usize>, signs: Vec<f64>) -> Result<()> {
        let mut seen = vec![false; self.n];
        if perm.len() != self.n || signs.len() != self.n {
            return contract("LU permutation/sign length mismatch");
        }
        for &p in &perm {
            if p >= self.n || std::mem::replace(&mut seen[p], true) {
                return contract("LU permutation is not a permutation");
            }
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return contract("LU signs must be +1 or -1");
        }
        self.perm = perm;
        self.signs = signs;
        Ok(())
    }

    fn diag(&self, i: usize) -> f64 {
        self.signs[i] * self.log_diag[i].exp()
    }

    /// Dense `W`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let l = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lower[i * n + j],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        });
        let u = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => self.upper[i * n + j],
            std::cmp::Ordering::Equal => self.diag(i),
            std::cmp::Ordering::Greater => 0.0,
        });
        let p = DMatrix::from_fn(n, n, |i, j| if self.perm[i] == j { 1.0 } else { 0.0 });
        p * l * u
    }

    pub fn logdet(&self) -> f64 {
        self.log_diag.iter().sum()
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let b: Vec<f64> = (0..n)
            .map(|i| {
                self.diag(i) * v[i]
                    + (i + 1..n).map(|j| self.upper[i * n + j] * v[j]).sum::<f64>()
            })
            .collect();
        let mut c = b.clone();
        for i in 0..n {
            c[i] += (0..i).map(|j| self.lower[i * n + j] * b[j]).sum::<f64>();
        }
        (0..n).map(|i| c[self.perm[i]]).collect()
    }

    /// Returns `(W^{-1} y, L^{-1} P^T y)`.
    fn inverse_parts(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut b = vec![0.0; n];
        for i in 0..n {
            b[self.perm[i]] = y[i];
        }
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lower[i * n + j] * b[j]).sum();
            b[i] -= s;
        }
        let mut v = b.clone();
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.upper[i * n + j] * v[j]).sum();
            v[i] = (v[i] - s) / self.diag(i);
        }
        (v, b)
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        self.inverse_parts(y).0
    }

    /// Backward through `v = W^{-1} y` and `logdet_inv = -sum log_diag`.
    fn backward(&self, b: &[f64], v: &[f64], g_v: &[f64], g_ld: f64, grad: &mut [f64]) -> Vec<f64> {
        let n = self.n;
        let (lo_off, up_off, d_off) = (0, n * (n - 1) / 2, n * (n - 1));
        // U solve: g_b = U^{-T} g_v.
        let mut g_b = g_v.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.upper[j * n + i] * g_b[j]).sum();
            g_b[i] = (g_b[i] - s) / self.diag(i);
        }
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                grad[up_off + k] -= g_b[i] * v[j];
                k += 1;
            }
            grad[d_off + i] -= g_b[i] * v[i] * self.diag(i) + g_ld;
        }
        // L solve: g_c = L^{-T} g_b.
        let mut g_c = g_b;
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lower[j * n + i] * g_c[j]).sum();
            g_c[i] -= s;
        }
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                grad[lo_off + k] -= g_c[i] * b[j];
                k += 1;
            }
        }
        (0..n).map(|i| g_c[self.perm[i]]).collect()
    }
}

impl Parameterized for LuMixing {
    fn num_params(&self) -> usize {
        self.n * self.n
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        let n = self.n;
        for i in 0..n {
            out.extend_from_slice(&self.lower[i * n..i * n + i]);
        }
        for i in 0..n {
            out.extend_from_slice(&self.upper[i * n + i + 1..(i + 1) * n]);
        }
        out.extend_from_slice(&self.log_diag);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.n;
        let vals = take(src, n * n, "LU mixing")?;
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                self.lower[i * n + j] = vals[k];
                k += 1;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                self.upper[i * n + j] = vals[k];
                k += 1;
            }
        }
        self.log_diag.copy_from_slice(&vals[k..k + n]);
        Ok(n * n)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let t = self.n * (self.n - 1) / 2;
        vec![
            TensorSpec::new(format!("{prefix}.lower"), vec![t]),
            TensorSpec::new(format!("{prefix}.upper"), vec![t]),
            TensorSpec::new(format!("{prefix}.log_diag"), vec![self.n]),
        ]
    }
}

/// Affine coupling: the first `c = ceil(n/2)` coordinates pass through and
/// condition a scale and shift of the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    n: usize,
    split: usize,
    /// `R^c -> R^{2(n-c)}`: raw scales first, then shifts.
    net: Mlp,
    bound: Vec<f64>,
}

impl CouplingLayer {
    /// The output layer starts at zero, so a fresh coupling is the identity.
    pub fn new(n: usize, hidden: &[usize], activation: Activation, sampler: &mut Sampler) -> Result<Self> {
        if n < 2 {
            return contract("coupling layers need dimension at least 2");
        }
        let split = n.div_ceil(2);
        let mut widths = vec![split];
        widths.extend_from_slice(hidden);
        widths.push(2 * (n - split));
        let mut net = Mlp::new(&widths, activation, sampler)?;
        let last = net.num_layers() - 1;
        let zeros_w = vec![0.0; net.layer_weights(last).len()];
        let zeros_b = vec![0.0; 2 * (n - split)];
        net.set_layer(last, &zeros_w, &zeros_b)?;
        Ok(Self {
            n,
            split,
            net,
            bound: vec![1.0; n - split],
        })
    }

    pub fn from_parts(n: usize, net: Mlp, bound: Vec<f64>) -> Result<Self> {
        let split = n.div_ceil(2);
        if n < 2 || net.input_dim() != split || net.output_dim() != 2 * (n - split) || bound.len() != n - split {
            return contract("coupling network or bound has the wrong shape");
        }
        Ok(Self { n, split, net, bound })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn scale_shift(&self, raw_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let r = self.n - self.split;
        let tanh: Vec<f64> = raw_out[..r].iter().map(|v| v.tanh()).collect();
        let s: Vec<f64> = tanh.iter().zip(&self.bound).map(|(t, b)| b * t).collect();
        (tanh, s, raw_out[r..].to_vec())
    }

    pub fn forward(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let out = self.net.eval(&v[..self.split]);
        let (_, s, t) = self.scale_shift(&out);
        let mut y = v.to_vec();
        for i in 0..s.len() {
            y[self.split + i] = v[self.split + i] * s[i].exp() + t[i];
        }
        (y, s.iter().sum())
    }

    pub fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let out = self.net.eval(&y[..self.split]);
        let (_, s, t) = self.scale_shift(&out);
        let mut v = y.to_vec();
        for i in 0..s.len() {
            v[self.split + i] = (y[self.split + i] - t[i]) * (-s[i]).exp();
        }
        (v, -s.iter().sum::<f64>())
    }

    fn inverse_taped(&self, y: &[f64]) -> Result<(Vec<f64>, f64, LayerTape)> {
        let (out, tape) = self.net.forward(&y[..self.split])?;
        let (tanh, s, t) = self.scale_shift(&out);
        let mut v = y.to_vec();
        for i in 0..s.len() {
            v[self.split + i] = (y[self.split + i] - t[i]) * (-s[i]).exp();
        }
        let ld = -s.iter().sum::<f64>();
        let v2 = v[self.split..].to_vec();
        Ok((v, ld, LayerTape::Coupling { net: tape, tanh, s, v2 }))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        net_tape: &GradTape,
        tanh: &[f64],
        s: &[f64],
        v2: &[f64],
        g_v: &[f64],
        g_ld: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        let r = self.n - self.split;
        let np = self.net.num_params();
        let mut out_grad = vec![0.0; 2 * r];
        let mut g_y = g_v.to_vec();
        for i in 0..r {
            let gv2 = g_v[self.split + i];
            let e = (-s[i]).exp();
            g_y[self.split + i] = gv2 * e;
            out_grad[r + i] = -gv2 * e;
            let g_s = -gv2 * v2[i] - g_ld;
            out_grad[i] = g_s * self.bound[i] * (1.0 - tanh[i] * tanh[i]);
            grad[np + i] += g_s * tanh[i];
        }
        let g_in = self.net.backward_accumulate(net_tape, &out_grad, &mut grad[..np])?;
        for (g, gi) in g_y.iter_mut().zip(g_in) {
            *g += gi;
        }
        Ok(g_y)
    }
}

impl Parameterized for CouplingLayer {
    fn num_params(&self) -> usize {
        self.net.num_params() + self.bound.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.net.write_params(out);
        out.extend_from_slice(&self.bound);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let used = self.net.read_params(src)?;
        let r = self.bound.len();
        self.bound.copy_from_slice(take(&src[used..], r, "coupling bound")?);
        Ok(used + r)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let mut specs = self.net.tensor_specs(&format!("{prefix}.net"));
        specs.push(TensorSpec::new(format!("{prefix}.bound"), vec![self.bound.len()]));
        specs
    }
}

/// Fixed coordinate permutation, `(P v)_i = v_{perm_i}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return contract("not a permutation");
            }
        }
        Ok(Self { perm })
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| v[p]).collect()
    }

    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; y.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            v[p] = y[i];
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    Lu(LuMixing),
    Coupling(CouplingLayer),
    Permutation(Permutation),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Lu(l) => l.dim(),
            FlowLayer::Coupling(c) => c.dim(),
            FlowLayer::Permutation(p) => p.perm.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::Lu(_) => "lu",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Permutation(_) => "permutation",
        }
    }

    fn num_params(&self) -> usize {
        match self {
            FlowLayer::Lu(l) => l.num_params(),
            FlowLayer::Coupling(c) => c.num_params(),
            FlowLayer::Permutation(_) => 0,
        }
    }

    pub fn forward(&self, v: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FlowLayer::Lu(l) => (l.forward(v), l.logdet()),
            FlowLayer::Coupling(c) => c.forward(v),
            FlowLayer::Permutation(p) => (p.forward(v), 0.0),
        }
    }

    pub fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        match self {
            FlowLayer::Lu(l) => (l.inverse(y), -l.logdet()),
            FlowLayer::Coupling(c) => c.inverse(y),
            FlowLayer::Permutation(p) => (p.inverse(y), 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    Lu,
    Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowArch {
    pub dim: usize,
    pub latent_dim: usize,
    /// Total number of layers; couplings and mixing layers alternate, starting with a coupling.
    pub depth: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub mixing: Mixing,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            dim: 2,
            latent_dim: 1,
            depth: 6,
            hidden: vec![32],
            activation: Activation::Gelu,
            mixing: Mixing::Lu,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerTape {
    Lu { b: Vec<f64>, v: Vec<f64> },
    Coupling { net: GradTape, tanh: Vec<f64>, s: Vec<f64>, v2: Vec<f64> },
    Permutation,
}

/// Intermediates of one recorded inverse pass.
#[derive(Debug, Clone)]
pub struct FlowTape {
    /// Layer kinds in traversal (reverse layer) order.
    kinds: Vec<&'static str>,
    layers: Vec<LayerTape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    latent_dim: usize,
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn identity(dim: usize, latent_dim: usize) -> Result<Self> {
        Self::from_layers(dim, latent_dim, Vec::new())
    }

    pub fn from_layers(dim: usize, latent_dim: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if dim == 0 || latent_dim == 0 || latent_dim > dim {
            return contract(format!("invalid flow split: n = {dim}, m = {latent_dim}"));
        }
        if layers.iter().any(|l| l.dim() != dim) {
            return contract("every flow layer must act on the full dimension");
        }
        Ok(Self { dim, latent_dim, layers })
    }

    pub fn new(arch: &FlowArch, sampler: &mut Sampler) -> Result<Self> {
        let n = arch.dim;
        let mut layers = Vec::with_capacity(arch.depth);
        for i in 0..arch.depth {
            let layer = if i % 2 == 0 && n >= 2 {
                FlowLayer::Coupling(CouplingLayer::new(n, &arch.hidden, arch.activation, sampler)?)
            } else {
                match arch.mixing {
                    Mixing::Lu => FlowLayer::Lu(LuMixing::random(n, sampler)),
                    Mixing::Permutation => {
                        let mut p: Vec<usize> = (0..n).collect();
                        sampler.shuffle(&mut p);
                        FlowLayer::Permutation(Permutation::new(p)?)
                    }
                }
            };
            layers.push(layer);
        }
        Self::from_layers(n, arch.latent_dim, layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.dim - self.latent_dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    /// `x = f(z, eps)` and `log |det df|`.
    pub fn forward(&self, z: &[f64], eps: &[f64]) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.latent_dim || eps.len() != self.noise_dim() {
            return contract("flow input split does not match (m, d)");
        }
        if z.iter().chain(eps).any(|v| !v.is_finite()) {
            return contract("flow_forward received non-finite input");
        }
        let mut v = z.to_vec();
        v.extend_from_slice(eps);
        Ok(self.forward_full(&v))
    }

    /// Forward on the concatenated vector; logdets summed in layer order.
    pub fn forward_full(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let mut x = v.to_vec();
        let mut ld = 0.0;
        for layer in &self.layers {
            let (y, l) = layer.forward(&x);
            x = y;
            ld += l;
        }
        (x, ld)
    }

    /// `(z, eps) = f^{-1}(x)` and `log |det J_{f^{-1}}(x)|`.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (v, ld) = self.inverse_full(x)?;
        let eps = v[self.latent_dim..].to_vec();
        let mut z = v;
        z.truncate(self.latent_dim);
        Ok((z, eps, ld))
    }

    pub fn inverse_full(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.dim {
            return contract(format!("flow input has length {}, expected {}", x.len(), self.dim));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return contract("flow_inverse received non-finite input");
        }
        let mut v = x.to_vec();
        let mut ld = 0.0;
        for layer in self.layers.iter().rev() {
            let (u, l) = layer.inverse(&v);
            v = u;
            ld += l;
        }
        Ok((v, ld))
    }

    /// Recorded inverse pass for [`FlowStack::backward`].
    pub fn inverse_taped(&self, x: &[f64]) -> Result<(Vec<f64>, f64, FlowTape)> {
        if x.len() != self.dim {
            return contract(format!("flow input has length {}, expected {}", x.len(), self.dim));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return contract("flow_inverse received non-finite input");
        }
        let mut v = x.to_vec();
        let mut ld = 0.0;
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut kinds = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            kinds.push(layer.kind());
            match layer {
                FlowLayer::Lu(lu) => {
                    let (u, b) = lu.inverse_parts(&v);
                    ld -= lu.logdet();
                    tapes.push(LayerTape::Lu { b, v: u.clone() });
                    v = u;
                }
                FlowLayer::Coupling(c) => {
                    let (u, l, tape) = c.inverse_taped(&v)?;
                    ld += l;
                    tapes.push(tape);
                    v = u;
                }
                FlowLayer::Permutation(p) => {
                    v = p.inverse(&v);
                    tapes.push(LayerTape::Permutation);
                }
            }
        }
        Ok((v, ld, FlowTape { kinds, layers: tapes }))
    }

    /// Gradient of `g_v . f^{-1}(x) + g_ld * logdet_inv(x)`; parameter
    /// gradients are added into `grad`, the `x` gradient is returned.
    pub fn backward_accumulate(&self, tape: &FlowTape, g_v: &[f64], g_ld: f64, grad: &mut [f64]) -> Result<Vec<f64>> {
        if tape.layers.len() != self.layers.len()
            || tape.kinds.iter().copied().ne(self.layers.iter().rev().map(|l| l.kind()))
        {
            return contract("flow tape was recorded on a different stack");
        }
        if g_v.len() != self.dim || grad.len() != self.num_params() {
            return contract("flow gradient buffers have the wrong length");
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.num_params();
        }
        let mut g = g_v.to_vec();
        // The tape is in reverse layer order, so walk it back to front.
        for (li, layer) in self.layers.iter().enumerate() {
            let lt = &tape.layers[self.layers.len() - 1 - li];
            let slot = &mut grad[offsets[li]..offsets[li] + layer.num_params()];
            g = match (layer, lt) {
                (FlowLayer::Lu(lu), LayerTape::Lu { b, v }) => lu.backward(b, v, &g, g_ld, slot),
                (FlowLayer::Coupling(c), LayerTape::Coupling { net, tanh, s, v2 }) => {
                    c.backward(net, tanh, s, v2, &g, g_ld, slot)?
                }
                (FlowLayer::Permutation(p), LayerTape::Permutation) => p.forward(&g),
                _ => return contract("flow tape layer kind mismatch"),
            };
        }
        Ok(g)
    }

    /// Parameter and `x` gradients of
    /// `grad_z . z(x) + grad_eps . eps(x) + grad_logdet * log |det J_{f^{-1}}(x)|`.
    pub fn backward(
        &self,
        tape: &FlowTape,
        grad_z: &[f64],
        grad_eps: &[f64],
        grad_logdet: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if grad_z.len() != self.latent_dim || grad_eps.len() != self.noise_dim() {
            return contract("upstream gradient split does not match (m, d)");
        }
        let mut g_v = grad_z.to_vec();
        g_v.extend_from_slice(grad_eps);
        let mut grad = vec![0.0; self.num_params()];
        let gx = self.backward_accumulate(tape, &g_v, grad_logdet, &mut grad)?;
        Ok((grad, gx))
    }
}

impl Parameterized for FlowStack {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            match layer {
                FlowLayer::Lu(l) => l.write_params(out),
                FlowLayer::Coupling(c) => c.write_params(out),
                FlowLayer::Permutation(_) => {}
            }
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut pos = 0;
        for layer in &mut self.layers {
            pos += match layer {
                FlowLayer::Lu(l) => l.read_params(&src[pos..])?,
                FlowLayer::Coupling(c) => c.read_params(&src[pos..])?,
                FlowLayer::Permutation(_) => 0,
            };
        }
        Ok(pos)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            match layer {
                FlowLayer::Lu(l) => specs.extend(l.tensor_specs(&p)),
                FlowLayer::Coupling(c) => specs.extend(c.tensor_specs(&p)),
                FlowLayer::Permutation(_) => {}
            }
        }
        specs
    }
}
