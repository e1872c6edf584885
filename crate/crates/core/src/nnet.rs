//! Dense feed-forward networks with an explicit reverse pass.
//!
//! These back the transition means, the recurrent switching network and the
//! coupling-layer conditioners. A forward call returns a [`GradTape`] holding
//! the per-layer inputs and pre-activations; the reverse pass replays it to
//! produce exact input and parameter gradients. Weights are stored row-major
//! (`out x in`) followed by the bias, layer after layer, in one flat vector.

use nalgebra::DMatrix;

use crate::error::{contract, Result};
use crate::params::{take, Parameterized, TensorSpec};
use crate::rng::Sampler;

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Cosine,
    LeakyRelu,
    /// Gaussian error linear unit, tanh form.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Cosine => x.cos(),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Cosine => -x.sin(),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Cosine => "cos",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" => Some(Activation::Identity),
            "cos" | "cosine" => Some(Activation::Cosine),
            "leaky_relu" | "leakyrelu" => Some(Activation::LeakyRelu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct GradTape {
    widths: Vec<usize>,
    /// Input to each layer (the first entry is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl GradTape {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Mlp {
    /// Network with `hidden` activations and an identity output layer,
    /// weights drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new(widths: &[usize], hidden: Activation, sampler: &mut Sampler) -> Result<Self> {
        let acts = default_activations(widths, hidden);
        Self::with_activations(widths, acts, sampler)
    }

    pub fn with_activations(
        widths: &[usize],
        activations: Vec<Activation>,
        sampler: &mut Sampler,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, activations)?;
        for layer in 0..net.num_layers() {
            let (fan_in, fan_out) = (net.widths[layer], net.widths[layer + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let (w, b) = net.layer_offsets(layer);
            for p in &mut net.params[w..w + fan_in * fan_out] {
                *p = sampler.uniform_range(-bound, bound);
            }
            for p in &mut net.params[b..b + fan_out] {
                *p = sampler.uniform_range(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return contract("an MLP needs at least an input and an output width");
        }
        if widths.iter().any(|&w| w == 0) {
            return contract("layer widths must be positive");
        }
        if activations.len() != widths.len() - 1 {
            return contract(format!(
                "{} activations given for {} layers",
                activations.len(),
                widths.len() - 1
            ));
        }
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            masks: vec![None; activations.len()],
            activations,
            params: vec![0.0; n],
        })
    }

    /// Single linear layer `W x + b`.
    pub fn linear(weight: &[f64], bias: &[f64]) -> Result<Self> {
        let out = bias.len();
        if out == 0 || weight.len() % out != 0 {
            return contract("linear layer weight/bias shapes disagree");
        }
        let mut net = Self::zeros(&[weight.len() / out, out], vec![Activation::Identity])?;
        net.set_layer(0, weight, bias)?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for l in 0..layer {
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        (off, off + self.widths[layer] * self.widths[layer + 1])
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(layer);
        &self.params[w..b]
    }

    pub fn layer_bias(&self, layer: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(layer);
        &self.params[b..b + self.widths[layer + 1]]
    }

    pub fn set_layer(&mut self, layer: usize, weights: &[f64], bias: &[f64]) -> Result<()> {
        if layer >= self.num_layers() {
            return contract(format!("layer {layer} out of range"));
        }
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        if weights.len() != fan_in * fan_out || bias.len() != fan_out {
            return contract(format!("layer {layer} expects {fan_out}x{fan_in} weights"));
        }
        let (w, b) = self.layer_offsets(layer);
        self.params[w..b].copy_from_slice(weights);
        self.params[b..b + fan_out].copy_from_slice(bias);
        self.apply_masks();
        Ok(())
    }

    /// Restrict layer `layer` to the connections where `mask` is true (row-major `out x in`).
    pub fn set_mask(&mut self, layer: usize, mask: &[bool]) -> Result<()> {
        let size = self.widths[layer] * self.widths[layer + 1];
        if mask.len() != size {
            return contract(format!("mask for layer {layer} must have {size} entries"));
        }
        self.masks[layer] = Some(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        self.apply_masks();
        Ok(())
    }

    pub fn mask(&self, layer: usize) -> Option<&[f64]> {
        self.masks[layer].as_deref()
    }

    fn apply_masks(&mut self) {
        for layer in 0..self.num_layers() {
            if let Some(mask) = &self.masks[layer] {
                let (w, _) = self.layer_offsets(layer);
                for (p, &m) in self.params[w..].iter_mut().zip(mask) {
                    if m == 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }
    }

    /// Zero the masked entries of a gradient laid out like this network's parameters.
    pub fn mask_gradient(&self, grad: &mut [f64]) {
        for layer in 0..self.num_layers() {
            if let Some(mask) = &self.masks[layer] {
                let (w, _) = self.layer_offsets(layer);
                for (g, &m) in grad[w..].iter_mut().zip(mask) {
                    if m == 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        if input.len() != self.input_dim() {
            return contract(format!(
                "MLP input has length {}, expected {}",
                input.len(),
                self.input_dim()
            ));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut a = input.to_vec();
        let mut off = 0;
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], &a))
                .collect();
            let act = self.activations[layer];
            let next: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((
            a,
            GradTape {
                widths: self.widths.clone(),
                inputs,
                pre,
            },
        ))
    }

    /// Forward pass without recording; panics on a dimension mismatch.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim(), "MLP input dimension");
        let mut a = input.to_vec();
        let mut off = 0;
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let act = self.activations[layer];
            a = (0..fan_out)
                .map(|o| act.apply(b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], &a)))
                .collect();
        }
        a
    }

    /// Input gradient and freshly allocated parameter gradient.
    pub fn backward(&self, tape: &GradTape, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let input_grad = self.backward_accumulate(tape, output_grad, &mut grad)?;
        Ok((input_grad, grad))
    }

    /// Add this pass's parameter gradient into `param_grad`; returns the input gradient.
    pub fn backward_accumulate(
        &self,
        tape: &GradTape,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if param_grad.len() != self.params.len() {
            return contract("parameter gradient buffer has the wrong length");
        }
        self.reverse(tape, output_grad, Some(param_grad))
    }

    /// Vector–Jacobian product with respect to the input only.
    pub fn input_gradient(&self, tape: &GradTape, output_grad: &[f64]) -> Result<Vec<f64>> {
        self.reverse(tape, output_grad, None)
    }

    fn reverse(
        &self,
        tape: &GradTape,
        output_grad: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        if tape.widths != self.widths || tape.pre.len() != self.num_layers() {
            return contract("stale tape: recorded on a network of a different shape");
        }
        if output_grad.len() != self.output_dim() {
            return contract(format!(
                "output gradient has length {}, expected {}",
                output_grad.len(),
                self.output_dim()
            ));
        }
        let mut g = output_grad.to_vec();
        for layer in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
            let (w_off, b_off) = self.layer_offsets(layer);
            let act = self.activations[layer];
            let dz: Vec<f64> = g
                .iter()
                .zip(&tape.pre[layer])
                .map(|(&gi, &z)| gi * act.derivative(z))
                .collect();
            let a = &tape.inputs[layer];
            if let Some(pg) = param_grad.as_deref_mut() {
                let mask = self.masks[layer].as_deref();
                for o in 0..fan_out {
                    if dz[o] == 0.0 {
                        continue;
                    }
                    let row = &mut pg[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    match mask {
                        Some(m) => {
                            let mrow = &m[o * fan_in..(o + 1) * fan_in];
                            for i in 0..fan_in {
                                row[i] += dz[o] * a[i] * mrow[i];
                            }
                        }
                        None => {
                            for i in 0..fan_in {
                                row[i] += dz[o] * a[i];
                            }
                        }
                    }
                    pg[b_off + o] += dz[o];
                }
            }
            let w = &self.params[w_off..b_off];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                if dz[o] == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    prev[i] += row[i] * dz[o];
                }
            }
            g = prev;
        }
        Ok(g)
    }

    /// Jacobian of the output with respect to the input (`out x in`).
    pub fn jacobian(&self, input: &[f64]) -> Result<DMatrix<f64>> {
        let (_, tape) = self.forward(input)?;
        let (out, inp) = (self.output_dim(), self.input_dim());
        let mut jac = DMatrix::zeros(out, inp);
        let mut e = vec![0.0; out];
        for i in 0..out {
            e[i] = 1.0;
            let row = self.input_gradient(&tape, &e)?;
            for (j, v) in row.into_iter().enumerate() {
                jac[(i, j)] = v;
            }
            e[i] = 0.0;
        }
        Ok(jac)
    }
}

impl Parameterized for Mlp {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.params);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.params.len();
        self.params.copy_from_slice(take(src, n, "mlp")?);
        self.apply_masks();
        Ok(n)
    }

    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec> {
        let mut specs = Vec::with_capacity(2 * self.num_layers());
        for l in 0..self.num_layers() {
            specs.push(TensorSpec::new(
                format!("{prefix}.layer{l}.weight"),
                vec![self.widths[l + 1], self.widths[l]],
            ));
            specs.push(TensorSpec::new(format!("{prefix}.layer{l}.bias"), vec![self.widths[l + 1]]));
        }
        specs
    }
}

/// Hidden layers use `hidden`, the output layer is linear.
pub fn default_activations(widths: &[usize], hidden: Activation) -> Vec<Activation> {
    let layers = widths.len().saturating_sub(1);
    (0..layers)
        .map(|l| if l + 1 == layers { Activation::Identity } else { hidden })
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ACTS: [Activation; 4] = [
        Activation::Identity,
        Activation::Cosine,
        Activation::LeakyRelu,
        Activation::Gelu,
    ];

    fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= abs.max(rel * a.abs().max(b.abs()))
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = Mlp::zeros(&[3, 2], vec![Activation::Identity]).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 5.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let net = Mlp::linear(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(net.eval(&[0.3, -0.7]), vec![0.3, -0.7]);
        let jac = net.jacobian(&[0.3, -0.7]).unwrap();
        assert_eq!(jac, DMatrix::identity(2, 2));
    }

    #[test]
    fn cosine_net_matches_hand_composition() {
        let mut s = Sampler::new(0, 0);
        let net = Mlp::new(&[2, 3, 2], Activation::Cosine, &mut s).unwrap();
        let w1 = net.layer_weights(0);
        let b1 = net.layer_bias(0);
        let w2 = net.layer_weights(1);
        let b2 = net.layer_bias(1);
        // x = (1, 0): first layer picks column 0 of W1.
        let h: Vec<f64> = (0..3).map(|o| (w1[o * 2] + b1[o]).cos()).collect();
        let expect: Vec<f64> = (0..2)
            .map(|o| b2[o] + (0..3).map(|i| w2[o * 3 + i] * h[i]).sum::<f64>())
            .collect();
        let (y, _) = net.forward(&[1.0, 0.0]).unwrap();
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let net = Mlp::zeros(&[3, 2], vec![Activation::Identity]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        let other = Mlp::zeros(&[2, 2], vec![Activation::Identity]).unwrap();
        let (_, tape) = other.forward(&[1.0, 1.0]).unwrap();
        assert!(net.backward(&tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut s = Sampler::new(3, 0);
        let net = Mlp::new(&[2, 4, 3], Activation::Gelu, &mut s).unwrap();
        let (_, tape) = net.forward(&[0.2, 0.9]).unwrap();
        let (gi, gp) = net.backward(&tape, &[0.0; 3]).unwrap();
        assert!(gi.iter().all(|&v| v == 0.0));
        assert!(gp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_grad_is_transpose_product() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let net = Mlp::linear(&w, &[0.1, 0.2]).unwrap();
        let (_, tape) = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let (gi, _) = net.backward(&tape, &[1.0, -1.0]).unwrap();
        assert_eq!(gi, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_activation() {
        let h = 1e-5;
        for (ai, &act) in ACTS.iter().enumerate() {
            for seed in 0..3u64 {
                let mut s = Sampler::new(100 + seed, ai as u64);
                let mut net = Mlp::new(&[3, 5, 2], act, &mut s).unwrap();
                let x: Vec<f64> = (0..3).map(|_| s.normal()).collect();
                let c: Vec<f64> = (0..2).map(|_| s.normal()).collect();
                let obj = |net: &Mlp, x: &[f64]| -> f64 {
                    net.eval(x).iter().zip(&c).map(|(a, b)| a * b).sum()
                };
                let (_, tape) = net.forward(&x).unwrap();
                let (gi, gp) = net.backward(&tape, &c).unwrap();
                let p0 = net.params();
                for j in 0..p0.len() {
                    let mut p = p0.clone();
                    p[j] += h;
                    net.set_params(&p).unwrap();
                    let up = obj(&net, &x);
                    p[j] -= 2.0 * h;
                    net.set_params(&p).unwrap();
                    let dn = obj(&net, &x);
                    let fd = (up - dn) / (2.0 * h);
                    assert!(close(gp[j], fd, 1e-5, 1e-8), "{act:?} param {j}: {} vs {fd}", gp[j]);
                }
                net.set_params(&p0).unwrap();
                for i in 0..3 {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let up = obj(&net, &xp);
                    xp[i] -= 2.0 * h;
                    let dn = obj(&net, &xp);
                    let fd = (up - dn) / (2.0 * h);
                    assert!(close(gi[i], fd, 1e-5, 1e-8), "{act:?} input {i}");
                }
            }
        }
    }

    #[test]
    fn jacobian_of_zero_net_is_zero_and_cosine_matches_fd() {
        let zero = Mlp::zeros(&[2, 4, 2], default_activations(&[2, 4, 2], Activation::Cosine)).unwrap();
        assert_eq!(zero.jacobian(&[0.4, 0.1]).unwrap(), DMatrix::zeros(2, 2));

        let mut s = Sampler::new(0, 0);
        let net = Mlp::new(&[2, 16, 2], Activation::Cosine, &mut s).unwrap();
        let jac = net.jacobian(&[0.0, 0.0]).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = [0.0, 0.0];
            xp[j] = h;
            let up = net.eval(&xp);
            xp[j] = -h;
            let dn = net.eval(&xp);
            for i in 0..2 {
                assert!((jac[(i, j)] - (up[i] - dn[i]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_weights_stay_zero() {
        let mut s = Sampler::new(5, 0);
        let mut net = Mlp::new(&[3, 2], Activation::Identity, &mut s).unwrap();
        let mask = [true, false, true, false, true, false];
        net.set_mask(0, &mask).unwrap();
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let (_, g) = net.backward(&tape, &[1.0, 1.0]).unwrap();
        for step in 0..10 {
            let p: Vec<f64> = net
                .params()
                .iter()
                .zip(&g)
                .map(|(p, g)| p + 0.1 * (step as f64 + 1.0) * g + 0.3)
                .collect();
            net.set_params(&p).unwrap();
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    assert_eq!(net.layer_weights(0)[i], 0.0);
                    assert_eq!(g[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = Mlp::new(&[3, 8, 3], Activation::Cosine, &mut Sampler::new(9, 0)).unwrap();
        let b = Mlp::new(&[3, 8, 3], Activation::Cosine, &mut Sampler::new(9, 0)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.eval(&[0.1, 0.2, 0.3]), b.eval(&[0.1, 0.2, 0.3]));
    }
}
