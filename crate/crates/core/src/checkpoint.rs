//! RSDC checkpoints: a structural descriptor in the config grammar followed by
//! named, shape-prefixed little-endian `f64` tensors.
//!
//! Layout: magic `RSDC`, `u16` version, `u32` descriptor length and UTF-8
//! descriptor text, `u32` tensor count, then per tensor a `u16` name length,
//! the name, a `u8` rank, `u64` dims and the values.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::config::{parse_ini, render};
use crate::error::{Error, Result};
use crate::flow::{CouplingLayer, FlowLayer, FlowStack, LuMixing, Permutation};
use crate::model::Model;
use crate::nnet::{Activation, Mlp};
use crate::params::Parameterized;
use crate::rmsm::{RmsmParams, Switching};
use crate::trainer::Adam;

pub const MAGIC: &[u8; 4] = b"RSDC";
pub const VERSION: u16 = 1;

/// Optimiser position needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingState {
    pub step: u64,
    /// Epochs completed; the next shuffle uses stream `epoch` of `seed`.
    pub epoch: u64,
    pub seed: u64,
    pub adam: Option<Adam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: TrainingState,
}

fn net_descriptor(net: &Mlp) -> String {
    let w: Vec<String> = net.widths().iter().map(usize::to_string).collect();
    let a: Vec<&str> = net.activations().iter().map(|a| a.name()).collect();
    format!("{} {}", w.join("x"), a.join(","))
}

fn parse_net(desc: &str) -> std::result::Result<Mlp, String> {
    let (w, a) = desc.split_once(' ').ok_or_else(|| format!("bad network descriptor {desc:?}"))?;
    let widths: Vec<usize> = w
        .split('x')
        .map(|p| p.parse().map_err(|_| format!("bad width {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let acts: Vec<Activation> = a
        .split(',')
        .map(|p| Activation::from_name(p.trim()).ok_or_else(|| format!("bad activation {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    Mlp::zeros(&widths, acts).map_err(|e| e.to_string())
}

/// Every network in the model with its tensor prefix.
fn networks(model: &Model) -> Vec<(String, &Mlp)> {
    let mut out = Vec::new();
    for (i, layer) in model.flow.layers().iter().enumerate() {
        if let FlowLayer::Coupling(c) = layer {
            out.push((format!("flow.layer{i}.net"), c.net()));
        }
    }
    for (j, net) in model.rmsm.transitions.iter().enumerate() {
        out.push((format!("rmsm.transition{j}"), net));
    }
    if let Switching::Recurrent(net) = &model.rmsm.switching {
        out.push(("rmsm.switch_net".to_string(), net));
    }
    out
}

fn descriptor(ck: &Checkpoint) -> String {
    let m = &ck.model;
    let mut model = vec![
        ("obs_dim", m.obs_dim().to_string()),
        ("latent_dim", m.latent_dim().to_string()),
        ("regimes", m.num_regimes().to_string()),
        ("residual", m.rmsm.residual.to_string()),
        (
            "switching",
            if m.rmsm.switching.is_recurrent() { "recurrent" } else { "autonomous" }.to_string(),
        ),
    ];
    let kinds: Vec<&str> = m.flow.layers().iter().map(FlowLayer::kind).collect();
    model.push(("flow_layers", if kinds.is_empty() { "none".into() } else { kinds.join(",") }));
    let mut nets = Vec::new();
    for (name, net) in networks(m) {
        nets.push((name, net_descriptor(net)));
    }
    let s = &ck.state;
    let state = vec![
        ("step", s.step.to_string()),
        ("epoch", s.epoch.to_string()),
        ("seed", s.seed.to_string()),
        ("adam_t", s.adam.as_ref().map_or("none".to_string(), |a| a.t.to_string())),
    ];
    let nets: Vec<(&str, String)> = nets.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    render(&[("model", model), ("networks", nets), ("state", state)])
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn extra_tensors(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, layer) in model.flow.layers().iter().enumerate() {
        match layer {
            FlowLayer::Lu(l) => {
                let n = l.dim();
                out.push((format!("flow.layer{i}.perm"), vec![n], l.permutation().iter().map(|&p| p as f64).collect()));
                out.push((format!("flow.layer{i}.signs"), vec![n], l.signs().to_vec()));
            }
            FlowLayer::Permutation(p) => {
                let n = p.indices().len();
                out.push((format!("flow.layer{i}.indices"), vec![n], p.indices().iter().map(|&v| v as f64).collect()));
            }
            FlowLayer::Coupling(_) => {}
        }
    }
    for (prefix, net) in networks(model) {
        for l in 0..net.num_layers() {
            if let Some(mask) = net.mask(l) {
                let shape = vec![net.widths()[l + 1], net.widths()[l]];
                out.push((format!("{prefix}.layer{l}.mask"), shape, mask.to_vec()));
            }
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = descriptor(ck);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());

    let params = ck.model.params();
    let specs = ck.model.tensor_specs("");
    let extras = extra_tensors(&ck.model);
    let adam_count = if ck.state.adam.is_some() { 2 } else { 0 };
    out.extend_from_slice(&((specs.len() + extras.len() + adam_count) as u32).to_le_bytes());
    let mut off = 0;
    for spec in &specs {
        let n = spec.numel();
        push_tensor(&mut out, &spec.name, &spec.shape, &params[off..off + n]);
        off += n;
    }
    for (name, shape, data) in &extras {
        push_tensor(&mut out, name, shape, data);
    }
    if let Some(adam) = &ck.state.adam {
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Contract("optimiser state does not match the model".into()));
        }
        push_tensor(&mut out, "adam.m", &[params.len()], &adam.m);
        push_tensor(&mut out, "adam.v", &[params.len()], &adam.v);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, message: format!("truncated {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("eight bytes")))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

fn indices(t: &Tensor, n: usize, name: &str) -> Result<Vec<usize>> {
    if t.data.len() != n || t.data.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v >= n as f64) {
        return Err(Error::Contract(format!("tensor {name} is not an index vector of length {n}")));
    }
    Ok(t.data.iter().map(|&v| v as usize).collect())
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(format_err(0, "not an RSDC checkpoint"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("descriptor length")? as usize;
    let desc_at = r.pos;
    let desc = std::str::from_utf8(r.bytes(len, "descriptor")?)
        .map_err(|_| format_err(desc_at, "descriptor is not UTF-8"))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in 0..count {
        let at = r.pos;
        let what = format!("tensor {i}");
        let nlen = r.u16(&what)? as usize;
        let name = std::str::from_utf8(r.bytes(nlen, &what)?)
            .map_err(|_| format_err(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.bytes(1, &what)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&what)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(at, "tensor too large"))?;
        let raw = r.bytes(numel.checked_mul(8).ok_or_else(|| format_err(at, "tensor too large"))?, &format!("tensor {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(format_err(at, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(format_err(r.pos, "trailing bytes after the last tensor"));
    }
    build(desc, &tensors).map_err(|e| match e {
        Error::Config { line, message } => format_err(desc_at, format!("descriptor line {line}: {message}")),
        other => other,
    })
}

fn build(desc: &str, tensors: &BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let mut model_keys = BTreeMap::new();
    let mut nets = BTreeMap::new();
    let mut state = BTreeMap::new();
    for e in parse_ini(desc)? {
        let target = match e.section.as_str() {
            "model" => &mut model_keys,
            "networks" => &mut nets,
            "state" => &mut state,
            s => return Err(Error::Config { line: e.line, message: format!("unknown section [{s}]") }),
        };
        target.insert(e.key, e.value);
    }
    let need = |map: &BTreeMap<String, String>, key: &str| -> Result<String> {
        map.get(key).cloned().ok_or_else(|| Error::Config { line: 0, message: format!("missing key {key}") })
    };
    let num = |map: &BTreeMap<String, String>, key: &str| -> Result<u64> {
        need(map, key)?.parse().map_err(|_| Error::Config { line: 0, message: format!("bad value for {key}") })
    };
    let net = |name: &str| -> Result<Mlp> {
        let d = need(&nets, name)?;
        parse_net(&d).map_err(|message| Error::Config { line: 0, message: format!("{name}: {message}") })
    };
    let get = |name: &str| -> Result<&Tensor> {
        tensors.get(name).ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))
    };

    let n = num(&model_keys, "obs_dim")? as usize;
    let m = num(&model_keys, "latent_dim")? as usize;
    let k = num(&model_keys, "regimes")? as usize;
    let residual = need(&model_keys, "residual")? == "true";
    let recurrent = need(&model_keys, "switching")? == "recurrent";

    let mut layers = Vec::new();
    let kinds = need(&model_keys, "flow_layers")?;
    if kinds != "none" {
        for (i, kind) in kinds.split(',').enumerate() {
            let layer = match kind {
                "lu" => FlowLayer::Lu(LuMixing::identity(n)),
                "coupling" => {
                    let c = CouplingLayer::from_parts(n, net(&format!("flow.layer{i}.net"))?, vec![0.0; n - n.div_ceil(2)])?;
                    FlowLayer::Coupling(c)
                }
                "permutation" => {
                    let name = format!("flow.layer{i}.indices");
                    FlowLayer::Permutation(Permutation::new(indices(get(&name)?, n, &name)?)?)
                }
                other => return Err(Error::Config { line: 0, message: format!("unknown flow layer {other:?}") }),
            };
            layers.push(layer);
        }
    }
    let flow = FlowStack::from_layers(n, m, layers)?;
    let transitions = (0..k).map(|j| net(&format!("rmsm.transition{j}"))).collect::<Result<Vec<_>>>()?;
    let switching = if recurrent {
        Switching::Recurrent(net("rmsm.switch_net")?)
    } else {
        Switching::Autonomous(DMatrix::zeros(k, k))
    };
    let rmsm = RmsmParams::new(
        vec![0.0; k],
        vec![vec![0.0; m]; k],
        vec![vec![0.0; m]; k],
        transitions,
        vec![vec![0.0; m]; k],
        residual,
        switching,
    )?;
    let mut model = Model::new(flow, rmsm)?;

    // Fixed structure first, so masks are in place when weights arrive.
    for (i, layer) in model.flow.layers_mut().iter_mut().enumerate() {
        if let FlowLayer::Lu(l) = layer {
            let pn = format!("flow.layer{i}.perm");
            let perm = indices(get(&pn)?, n, &pn)?;
            let signs = get(&format!("flow.layer{i}.signs"))?.data.clone();
            l.set_fixed(perm, signs)?;
        }
    }
    let mask_of = |prefix: &str, net: &Mlp| -> Result<Vec<Option<Vec<bool>>>> {
        (0..net.num_layers())
            .map(|l| {
                Ok(tensors.get(&format!("{prefix}.layer{l}.mask")).map(|t| t.data.iter().map(|&v| v != 0.0).collect()))
            })
            .collect()
    };
    let masks: Vec<(String, Vec<Option<Vec<bool>>>)> = networks(&model)
        .into_iter()
        .map(|(p, net)| mask_of(&p, net).map(|m| (p, m)))
        .collect::<Result<_>>()?;
    for (prefix, per_layer) in masks {
        let target: &mut Mlp = if let Some(j) = prefix.strip_prefix("rmsm.transition") {
            &mut model.rmsm.transitions[j.parse::<usize>().expect("own prefix")]
        } else if prefix == "rmsm.switch_net" {
            match &mut model.rmsm.switching {
                Switching::Recurrent(net) => net,
                Switching::Autonomous(_) => unreachable!("switch_net only listed for recurrent models"),
            }
        } else {
            if per_layer.iter().any(Option::is_some) {
                return Err(Error::Contract(format!("unexpected mask on {prefix}")));
            }
            continue;
        };
        for (l, mask) in per_layer.into_iter().enumerate() {
            if let Some(mask) = mask {
                target.set_mask(l, &mask)?;
            }
        }
    }

    let mut flat = Vec::with_capacity(model.num_params());
    for spec in model.tensor_specs("") {
        let t = get(&spec.name)?;
        if t.shape != spec.shape {
            return Err(Error::Contract(format!(
                "tensor {} has shape {:?}, expected {:?}",
                spec.name, t.shape, spec.shape
            )));
        }
        flat.extend_from_slice(&t.data);
    }
    model.set_params(&flat)?;

    let adam = match need(&state, "adam_t")?.as_str() {
        "none" => None,
        t => {
            let t = t.parse().map_err(|_| Error::Config { line: 0, message: "bad adam_t".into() })?;
            let m = get("adam.m")?.data.clone();
            let v = get("adam.v")?.data.clone();
            if m.len() != flat.len() || v.len() != flat.len() {
                return Err(Error::Contract("optimiser state does not match the model".into()));
            }
            Some(Adam { m, v, t })
        }
    };
    Ok(Checkpoint {
        model,
        state: TrainingState {
            step: num(&state, "step")?,
            epoch: num(&state, "epoch")?,
            seed: num(&state, "seed")?,
            adam,
        },
    })
}

/// Write via a temporary file so an interrupted save leaves the old file intact.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
