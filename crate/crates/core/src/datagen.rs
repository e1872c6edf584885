//! Ground-truth generators and the RSDS dataset file format.
//!
//! Parameters are drawn from the parameter stream of the seed and sequence
//! `i` from stream `i + 1`, so any sequence can be regenerated on its own.

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::nnet::{default_activations, Activation, Mlp};
use crate::rmsm::{cosine_transition, sticky_logits, RmsmParams, Switching, SIGMA_FLOOR};
use crate::rng::{sequence_stream, Sampler, PARAM_STREAM};

pub const MAGIC: &[u8; 4] = b"RSDS";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_Z: u8 = 1;
const FLAG_S: u8 = 2;
const HEADER_LEN: usize = 4 + 2 + 1 + 5 * 4;

/// Observed sequences with optional ground truth. Regimes are 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N` sequences of shape `T x n`.
    pub x: Vec<DMatrix<f64>>,
    pub z: Option<Vec<DMatrix<f64>>>,
    pub s: Option<Vec<Vec<usize>>>,
    pub regimes: usize,
    pub metadata: Vec<(String, String)>,
}

/// Shape information stored in the fixed-size file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub has_z: bool,
    pub has_s: bool,
    pub sequences: usize,
    pub length: usize,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub regimes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.x.first().map_or(0, |x| x.nrows())
    }

    pub fn obs_dim(&self) -> usize {
        self.x.first().map_or(0, |x| x.ncols())
    }

    pub fn latent_dim(&self) -> usize {
        self.z.as_ref().and_then(|z| z.first()).map_or(0, |z| z.ncols())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n, m) = (self.seq_len(), self.obs_dim(), self.latent_dim());
        if self.x.iter().any(|x| x.nrows() != t || x.ncols() != n) {
            return contract("all observation sequences must share one T x n shape");
        }
        if let Some(z) = &self.z {
            if z.len() != self.x.len() || z.iter().any(|z| z.nrows() != t || z.ncols() != m) {
                return contract("latent sequences must be N x T x m");
            }
        }
        if let Some(s) = &self.s {
            if s.len() != self.x.len() || s.iter().any(|s| s.len() != t) {
                return contract("regime sequences must be N x T");
            }
            if s.iter().flatten().any(|&k| k >= self.regimes) {
                return contract("regime label out of range");
            }
        }
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains('=') || k.contains('\n') || v.contains('\n') {
                return contract(format!("metadata entry {k:?} is not a single key=value line"));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: FORMAT_VERSION,
            has_z: self.z.is_some(),
            has_s: self.s.is_some(),
            sequences: self.len(),
            length: self.seq_len(),
            obs_dim: self.obs_dim(),
            latent_dim: self.latent_dim(),
            regimes: self.regimes,
        }
    }

    /// First `count` sequences.
    pub fn take(&self, count: usize) -> Dataset {
        let c = count.min(self.len());
        Dataset {
            x: self.x[..c].to_vec(),
            z: self.z.as_ref().map(|z| z[..c].to_vec()),
            s: self.s.as_ref().map(|s| s[..c].to_vec()),
            regimes: self.regimes,
            metadata: self.metadata.clone(),
        }
    }

    /// Sequences `[0, n)` and `[n, N)` as two datasets sharing the metadata.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            x: self.x[r.clone()].to_vec(),
            z: self.z.as_ref().map(|z| z[r.clone()].to_vec()),
            s: self.s.as_ref().map(|s| s[r.clone()].to_vec()),
            regimes: self.regimes,
            metadata: self.metadata.clone(),
        };
        (part(0..n), part(n..self.len()))
    }

    pub fn metadata_text(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialise to the RSDS byte layout.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let h = ds.header();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(if h.has_z { FLAG_Z } else { 0 } | if h.has_s { FLAG_S } else { 0 });
    for v in [h.sequences, h.length, h.obs_dim, h.latent_dim, h.regimes] {
        push_u32(&mut out, v)?;
    }
    for x in &ds.x {
        for row in x.row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(z) = &ds.z {
        for zi in z {
            for row in zi.row_iter() {
                for v in row.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    if let Some(s) = &ds.s {
        for &k in s.iter().flatten() {
            push_u32(&mut out, k + 1)?;
        }
    }
    let meta = ds.metadata_text();
    push_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!("file truncated in {section}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4, section)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, count: usize, section: &str) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format { offset: self.pos as u64, message: format!("{section} size overflows") })?;
        let raw = self.bytes(len, section)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn parse_header(buf: &[u8]) -> Result<DatasetHeader> {
    let mut c = Cursor { buf, pos: 0 };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected \"RSDS\"".into() });
    }
    let version = u16::from_le_bytes(c.bytes(2, "version")?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported format version {version}") });
    }
    let flags = c.bytes(1, "flags")?[0];
    if flags & !(FLAG_Z | FLAG_S) != 0 {
        return Err(Error::Format { offset: 6, message: format!("unknown flag bits {flags:#04x}") });
    }
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["N", "T", "n", "m", "K"]) {
        *d = c.u32(&format!("header field {name}"))?;
    }
    Ok(DatasetHeader {
        version,
        has_z: flags & FLAG_Z != 0,
        has_s: flags & FLAG_S != 0,
        sequences: dims[0],
        length: dims[1],
        obs_dim: dims[2],
        latent_dim: dims[3],
        regimes: dims[4],
    })
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let h = parse_header(buf)?;
    let mut c = Cursor { buf, pos: HEADER_LEN };
    let (n_seq, t, n, m) = (h.sequences, h.length, h.obs_dim, h.latent_dim);
    let read_block = |c: &mut Cursor, width: usize, section: &str| -> Result<Vec<DMatrix<f64>>> {
        let vals = c.f64s(n_seq * t * width, section)?;
        Ok((0..n_seq)
            .map(|i| DMatrix::from_row_slice(t, width, &vals[i * t * width..(i + 1) * t * width]))
            .collect())
    };
    let x = read_block(&mut c, n, "observation payload")?;
    let z = if h.has_z { Some(read_block(&mut c, m, "latent payload")?) } else { None };
    let s = if h.has_s {
        let mut all = Vec::with_capacity(n_seq);
        for _ in 0..n_seq {
            let mut seq = Vec::with_capacity(t);
            for _ in 0..t {
                let at = c.pos;
                let k = c.u32("regime payload")?;
                if k == 0 || k > h.regimes {
                    return Err(Error::Format { offset: at as u64, message: format!("regime label {k} outside 1..={}", h.regimes) });
                }
                seq.push(k - 1);
            }
            all.push(seq);
        }
        Some(all)
    } else {
        None
    };
    let len = c.u32("metadata length")?;
    let at = c.pos;
    let text = std::str::from_utf8(c.bytes(len, "metadata")?)
        .map_err(|e| Error::Format { offset: at as u64, message: format!("metadata is not UTF-8: {e}") })?;
    let mut metadata = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format { offset: at as u64, message: format!("metadata line {line:?} lacks '='") })?;
        metadata.push((k.to_string(), v.to_string()));
    }
    if c.pos != buf.len() {
        return Err(Error::Format { offset: c.pos as u64, message: "trailing bytes after metadata".into() });
    }
    Ok(Dataset { x, z, s, regimes: h.regimes, metadata })
}

/// Sidecar summary path: `data.rsds` -> `data.rsds.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".txt");
    PathBuf::from(p)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    let h = ds.header();
    let summary = format!(
        "format=RSDS\nversion={}\nsequences={}\nlength={}\nobs_dim={}\nlatent_dim={}\nregimes={}\nhas_z={}\nhas_s={}\n{}",
        h.version, h.sequences, h.length, h.obs_dim, h.latent_dim, h.regimes, h.has_z, h.has_s,
        ds.metadata_text()
    );
    std::fs::write(sidecar_path(path), summary)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Read only the fixed-size header.
pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    std::fs::File::open(path)?.take(HEADER_LEN as u64).read_to_end(&mut buf)?;
    parse_header(&buf)
}

/// Map from the latent (plus noise) vector to observations.
#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Identity,
    /// Two-layer leaky-rectifier network with square, well-conditioned weights.
    Leaky(Mlp),
}

impl Emission {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Emission::Identity => v.to_vec(),
            Emission::Leaky(net) => net.eval(v),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Emission::Identity => "identity",
            Emission::Leaky(_) => "leaky_mlp",
        }
    }
}

/// Square leaky-rectifier network `R^n -> R^n -> R^n`; each weight matrix is
/// redrawn until its condition number is at most `max_cond`.
pub fn random_leaky_emission(n: usize, max_cond: f64, sampler: &mut Sampler) -> Result<Mlp> {
    let widths = [n, n, n];
    let mut net = Mlp::zeros(&widths, default_activations(&widths, Activation::LeakyRelu))?;
    for layer in 0..2 {
        let mut tries = 0;
        let w = loop {
            tries += 1;
            let w = DMatrix::from_fn(n, n, |_, _| sampler.normal() / (n as f64).sqrt());
            let sv = w.singular_values();
            let cond = sv.max() / sv.min();
            if cond <= max_cond {
                break w;
            }
            if tries >= 1000 {
                return contract(format!("no {n}x{n} emission weight with condition <= {max_cond} in 1000 draws"));
            }
        };
        let bias: Vec<f64> = (0..n).map(|_| 0.1 * sampler.normal()).collect();
        net.set_layer(layer, w.transpose().as_slice(), &bias)?;
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub regimes: usize,
    pub obs_dim: usize,
    pub length: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub stay: f64,
    /// Average number of inputs feeding each output of a transition network.
    pub in_degree: usize,
    pub hidden_per_dim: usize,
    pub sigma_range: (f64, f64),
    pub ratio_threshold: f64,
    pub identity_emission: bool,
    pub seed: u64,
}

/// Default `(K, ratio threshold)` for a latent dimension.
pub fn synthetic_defaults(m: usize) -> (usize, f64) {
    match m {
        0..=5 => (3, 0.35),
        6..=10 => (4, 0.10),
        _ => (5, 0.05),
    }
}

impl SyntheticSpec {
    pub fn new(latent_dim: usize) -> Self {
        let (regimes, ratio_threshold) = synthetic_defaults(latent_dim);
        Self {
            latent_dim,
            regimes,
            obs_dim: latent_dim,
            length: 100,
            n_train: 10_000,
            n_test: 1_000,
            stay: 0.9,
            in_degree: 3,
            hidden_per_dim: 16,
            sigma_range: (0.001, 0.5),
            ratio_threshold,
            identity_emission: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.latent_dim;
        if m == 0 || self.regimes == 0 || self.length == 0 || self.n_train == 0 || self.hidden_per_dim == 0 {
            return contract("synthetic spec counts must be positive");
        }
        if self.obs_dim != m && self.obs_dim != 5 * m {
            return contract(format!("observation dimension must be m or 5m, got {}", self.obs_dim));
        }
        if !(0.0..=1.0).contains(&self.stay) {
            return contract("stay probability must lie in [0, 1]");
        }
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && hi > lo) {
            return contract("sigma range must satisfy 0 < lo < hi");
        }
        if self.identity_emission && self.obs_dim != m {
            return contract("identity emission needs obs_dim = latent_dim");
        }
        Ok(())
    }

    pub fn metadata(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("generator", "synthetic".into()),
            kv("format_version", FORMAT_VERSION.to_string()),
            kv("seed", self.seed.to_string()),
            kv("latent_dim", self.latent_dim.to_string()),
            kv("regimes", self.regimes.to_string()),
            kv("obs_dim", self.obs_dim.to_string()),
            kv("length", self.length.to_string()),
            kv("n_train", self.n_train.to_string()),
            kv("n_test", self.n_test.to_string()),
            kv("stay", self.stay.to_string()),
            kv("next_regime", "cyclic".into()),
            kv("in_degree", self.in_degree.to_string()),
            kv("hidden_per_dim", self.hidden_per_dim.to_string()),
            kv("sigma_lo", self.sigma_range.0.to_string()),
            kv("sigma_hi", self.sigma_range.1.to_string()),
            kv("ratio_threshold", self.ratio_threshold.to_string()),
            kv("emission", if self.identity_emission { "identity" } else { "leaky_mlp" }.into()),
        ]
    }
}

/// Output of a generator: train/test splits and the generating parameters.
#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: RmsmParams,
    pub emission: Emission,
}

/// Largest, over regime pairs, of the smallest gap between two entries of
/// that pair's ratio vector `sigma_k1 / sigma_k2`.
pub fn best_ratio_spread(sigmas: &[Vec<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..sigmas.len() {
        for b in a + 1..sigmas.len() {
            let r: Vec<f64> = sigmas[a].iter().zip(&sigmas[b]).map(|(x, y)| x / y).collect();
            let mut gap = f64::INFINITY;
            for i in 0..r.len() {
                for j in i + 1..r.len() {
                    gap = gap.min((r[i] - r[j]).abs());
                }
            }
            best = best.max(gap);
        }
    }
    best
}

/// Locally connected `m -> h*m -> m` cosine network: output `i` owns `h`
/// hidden units that read from `in_degree` randomly chosen inputs.
fn local_cosine_net(m: usize, h: usize, in_degree: usize, sampler: &mut Sampler) -> Result<Mlp> {
    let widths = [m, h * m, m];
    let mut net = Mlp::zeros(&widths, default_activations(&widths, Activation::Cosine))?;
    let mut w1 = vec![0.0; h * m * m];
    let mut mask1 = vec![false; h * m * m];
    let mut b1 = vec![0.0; h * m];
    let mut w2 = vec![0.0; m * h * m];
    let mut mask2 = vec![false; m * h * m];
    for i in 0..m {
        let inputs = sampler.choose_distinct(m, in_degree.max(1));
        for u in i * h..(i + 1) * h {
            for &j in &inputs {
                w1[u * m + j] = sampler.normal();
                mask1[u * m + j] = true;
            }
            b1[u] = sampler.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
            w2[i * h * m + u] = sampler.normal() / (h as f64).sqrt();
            mask2[i * h * m + u] = true;
        }
    }
    net.set_layer(0, &w1, &b1)?;
    net.set_layer(1, &w2, &vec![0.0; m])?;
    net.set_mask(0, &mask1)?;
    net.set_mask(1, &mask2)?;
    Ok(net)
}

fn cyclic_logits(k: usize, stay: f64) -> DMatrix<f64> {
    if k == 1 {
        return DMatrix::zeros(1, 1);
    }
    let p = |l: usize, j: usize| {
        if l == j {
            stay
        } else if j == (l + 1) % k {
            1.0 - stay
        } else {
            0.0
        }
    };
    DMatrix::from_fn(k, k, |l, j| p(l, j).ln().max(crate::math::LOG_FLOOR))
}

fn sample_sequences(
    truth: &RmsmParams,
    length: usize,
    first: usize,
    count: usize,
    seed: u64,
    observe: impl Fn(&[f64], &mut Sampler) -> Vec<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<Vec<usize>>)> {
    let mut xs = Vec::with_capacity(count);
    let mut zs = Vec::with_capacity(count);
    let mut ss = Vec::with_capacity(count);
    for i in first..first + count {
        let mut sampler = Sampler::new(seed, sequence_stream(i));
        let path = truth.sample_path(length, &mut sampler)?;
        let rows: Vec<Vec<f64>> = (0..length).map(|t| observe(&path.z.row(t).iter().copied().collect::<Vec<_>>(), &mut sampler)).collect();
        let n = rows[0].len();
        xs.push(DMatrix::from_fn(length, n, |t, j| rows[t][j]));
        zs.push(path.z);
        ss.push(path.s);
    }
    Ok((xs, zs, ss))
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Generated> {
    spec.validate()?;
    let (m, k) = (spec.latent_dim, spec.regimes);
    let mut ps = Sampler::new(spec.seed, PARAM_STREAM);
    let transitions = (0..k)
        .map(|_| local_cosine_net(m, spec.hidden_per_dim, spec.in_degree.min(m), &mut ps))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = spec.sigma_range;
    let mut tries = 0;
    let sigmas = loop {
        tries += 1;
        let s: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| ps.uniform_range(lo, hi)).collect()).collect();
        if k < 2 || best_ratio_spread(&s) > spec.ratio_threshold {
            break s;
        }
        if tries >= 1000 {
            return contract(format!(
                "no sigma draw reached ratio spread {} in 1000 attempts; use a looser ratio_threshold",
                spec.ratio_threshold
            ));
        }
    };
    let initial_means: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| ps.uniform_range(-1.0, 1.0)).collect()).collect();
    let truth = RmsmParams::new(
        vec![0.0; k],
        initial_means,
        vec![vec![0.1f64.ln(); m]; k],
        transitions,
        sigmas.iter().map(|r| r.iter().map(|s| s.ln()).collect()).collect(),
        false,
        Switching::Autonomous(cyclic_logits(k, spec.stay)),
    )?;
    let emission = if spec.identity_emission {
        Emission::Identity
    } else {
        Emission::Leaky(random_leaky_emission(spec.obs_dim, 5.0, &mut ps)?)
    };
    let extra = spec.obs_dim - m;
    let observe = |z: &[f64], s: &mut Sampler| {
        let mut v = z.to_vec();
        v.extend((0..extra).map(|_| 0.1 * s.normal()));
        emission.apply(&v)
    };
    let mut metadata = spec.metadata();
    metadata.push(("sigma_attempts".into(), tries.to_string()));
    let build = |first: usize, count: usize, split: &str| -> Result<Dataset> {
        let (x, z, s) = sample_sequences(&truth, spec.length, first, count, spec.seed, observe)?;
        let mut md = metadata.clone();
        md.push(("split".into(), split.into()));
        Ok(Dataset { x, z: Some(z), s: Some(s), regimes: k, metadata: md })
    };
    let train = build(0, spec.n_train, "train")?;
    let test = build(spec.n_train, spec.n_test, "test")?;
    Ok(Generated { train, test, truth, emission })
}

/// One-dimensional three-regime cosine system with an identity emission:
/// `m_1(z) = cos z`, `m_2(z) = cos(z - pi/2)`, `m_3(z) = cos(z + pi/2)`.
pub fn cosine_toy_params(sigma2: f64, stickiness: f64) -> Result<RmsmParams> {
    if !(sigma2 > 0.0) {
        return contract("sigma2 must be positive");
    }
    if !(0.0..1.0).contains(&stickiness) {
        return contract("stickiness must lie in [0, 1)");
    }
    let ls = 0.5 * sigma2.ln();
    RmsmParams::new(
        vec![0.0; 3],
        vec![vec![0.0]; 3],
        vec![vec![ls]; 3],
        vec![cosine_transition(0.0), cosine_transition(-FRAC_PI_2), cosine_transition(FRAC_PI_2)],
        vec![vec![ls]; 3],
        false,
        Switching::Autonomous(sticky_logits(3, 1.0 - stickiness)),
    )
}

pub fn gen_cosine_toy(sigma2: f64, length: usize, count: usize, stickiness: f64, seed: u64) -> Result<(Dataset, RmsmParams)> {
    if length == 0 {
        return contract("sequence length must be positive");
    }
    let truth = cosine_toy_params(sigma2, stickiness)?;
    let (x, z, s) = sample_sequences(&truth, length, 0, count, seed, |z, _| z.to_vec())?;
    let metadata = vec![
        ("generator".to_string(), "cosine".to_string()),
        ("format_version".into(), FORMAT_VERSION.to_string()),
        ("seed".into(), seed.to_string()),
        ("sigma2".into(), sigma2.to_string()),
        ("stickiness".into(), stickiness.to_string()),
        ("emission".into(), "identity".into()),
    ];
    Ok((Dataset { x, z: Some(z), s: Some(s), regimes: 3, metadata }, truth))
}

/// Velocity signs of the four ball regimes, in order up-right, up-left,
/// down-right, down-left.
pub const BALL_DIRECTIONS: [(f64, f64); 4] = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];

pub fn ball_regime(sx: f64, sy: f64) -> usize {
    BALL_DIRECTIONS.iter().position(|&(a, b)| a == sx && b == sy).expect("unit signs")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallSpec {
    pub box_size: f64,
    pub speed: f64,
    pub length: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub process_noise: f64,
    pub identity_emission: bool,
    pub seed: u64,
}

impl Default for BallSpec {
    fn default() -> Self {
        Self {
            box_size: 1.0,
            speed: 0.05,
            length: 64,
            n_train: 2000,
            n_test: 200,
            process_noise: 0.005,
            identity_emission: true,
            seed: 0,
        }
    }
}

/// Regime to use for the next step: a velocity component flips when the
/// move would leave `[0, box]` on that axis.
pub fn ball_next_regime(z: &[f64], s_prev: usize, box_size: f64, speed: f64) -> usize {
    let (mut sx, mut sy) = BALL_DIRECTIONS[s_prev];
    let tol = 1e-9;
    let nx = z[0] + sx * speed;
    if nx > box_size + tol || nx < -tol {
        sx = -sx;
    }
    let ny = z[1] + sy * speed;
    if ny > box_size + tol || ny < -tol {
        sy = -sy;
    }
    ball_regime(sx, sy)
}

/// Deterministic-switching ball trajectory from a given start.
pub fn ball_trajectory(
    start: [f64; 2],
    s0: usize,
    spec: &BallSpec,
    sampler: &mut Sampler,
) -> (DMatrix<f64>, Vec<usize>) {
    let t_len = spec.length;
    let mut z = DMatrix::zeros(t_len, 2);
    let mut s = Vec::with_capacity(t_len);
    let mut pos = start;
    let mut reg = s0;
    for t in 0..t_len {
        if t > 0 {
            reg = ball_next_regime(&pos, reg, spec.box_size, spec.speed);
            let (sx, sy) = BALL_DIRECTIONS[reg];
            pos[0] += sx * spec.speed + spec.process_noise * sampler.normal();
            pos[1] += sy * spec.speed + spec.process_noise * sampler.normal();
        }
        z[(t, 0)] = pos[0];
        z[(t, 1)] = pos[1];
        s.push(reg);
    }
    (z, s)
}

/// Ground-truth prior for the ball: residual constant-velocity transitions
/// and a recurrent switching network of wall-proximity ramps.
///
/// Each ramp is `leaky(u) - leaky(u - 1) = 0.2 + 0.8 clamp(u, 0, 1)` with
/// `u` rising from 0 to 1 just past the flip threshold `box - speed`.
pub fn ball_truth(spec: &BallSpec) -> Result<RmsmParams> {
    let (b, v) = (spec.box_size, spec.speed);
    let width = (0.01 * v).max(1e-9);
    let hi_start = b - v + width;
    let lo_start = v - width;
    // Hidden units: per axis a, upper ramp (2 units) then lower ramp (2 units).
    let mut w1 = vec![0.0; 8 * 2];
    let mut b1 = vec![0.0; 8];
    for a in 0..2 {
        let base = 4 * a;
        // Upper: u = (z_a - hi_start) / width.
        w1[base * 2 + a] = 1.0 / width;
        b1[base] = -hi_start / width;
        w1[(base + 1) * 2 + a] = 1.0 / width;
        b1[base + 1] = -hi_start / width - 1.0;
        // Lower: u = (lo_start - z_a) / width.
        w1[(base + 2) * 2 + a] = -1.0 / width;
        b1[base + 2] = lo_start / width;
        w1[(base + 3) * 2 + a] = -1.0 / width;
        b1[base + 3] = lo_start / width - 1.0;
    }
    // ramp = (h_first - h_second - 0.2) / 0.8 for each (axis, side).
    let scale = 20.0;
    let mut w2 = vec![0.0; 16 * 8];
    let mut b2 = vec![0.0; 16];
    for (l, &(sx, sy)) in BALL_DIRECTIONS.iter().enumerate() {
        for (k, &(tx, ty)) in BALL_DIRECTIONS.iter().enumerate() {
            let out = l * 4 + k;
            for (a, (s_prev, s_next)) in [(sx, tx), (sy, ty)].into_iter().enumerate() {
                // Ramp that matters: upper wall when moving up, lower wall otherwise.
                let unit = 4 * a + if s_prev > 0.0 { 0 } else { 2 };
                // Keep: scale * (1 - r); flip: scale * r.
                let sign = if s_prev == s_next { -1.0 } else { 1.0 };
                let c = scale * sign / 0.8;
                w2[out * 8 + unit] += c;
                w2[out * 8 + unit + 1] -= c;
                b2[out] += -c * 0.2 + if s_prev == s_next { scale } else { 0.0 };
            }
        }
    }
    let widths = [2, 8, 16];
    let mut net = Mlp::zeros(&widths, default_activations(&widths, Activation::LeakyRelu))?;
    net.set_layer(0, &w1, &b1)?;
    net.set_layer(1, &w2, &b2)?;
    let sigma = spec.process_noise.max(SIGMA_FLOOR).ln();
    let transitions = BALL_DIRECTIONS
        .iter()
        .map(|&(sx, sy)| Mlp::linear(&[0.0; 4], &[sx * v, sy * v]))
        .collect::<Result<Vec<_>>>()?;
    RmsmParams::new(
        vec![0.0; 4],
        vec![vec![0.5 * b; 2]; 4],
        vec![vec![(b / 12f64.sqrt()).ln(); 2]; 4],
        transitions,
        vec![vec![sigma; 2]; 4],
        true,
        Switching::Recurrent(net),
    )
}

pub fn gen_bouncing_ball_state(spec: &BallSpec) -> Result<Generated> {
    if !(spec.box_size > 0.0) || spec.speed < 0.0 || spec.length == 0 || spec.process_noise < 0.0 {
        return contract("ball spec needs box_size > 0, speed >= 0, length > 0, noise >= 0");
    }
    if spec.speed >= spec.box_size {
        return contract("speed must be smaller than the box");
    }
    let truth = ball_truth(spec)?;
    let emission = if spec.identity_emission {
        Emission::Identity
    } else {
        Emission::Leaky(random_leaky_emission(2, 5.0, &mut Sampler::new(spec.seed, PARAM_STREAM))?)
    };
    let metadata = vec![
        ("generator".to_string(), "ball".to_string()),
        ("format_version".into(), FORMAT_VERSION.to_string()),
        ("seed".into(), spec.seed.to_string()),
        ("box_size".into(), spec.box_size.to_string()),
        ("speed".into(), spec.speed.to_string()),
        ("length".into(), spec.length.to_string()),
        ("process_noise".into(), spec.process_noise.to_string()),
        ("regime_order".into(), "ur,ul,dr,dl".into()),
        ("emission".into(), emission.name().into()),
    ];
    let build = |first: usize, count: usize, split: &str| {
        let mut xs = Vec::with_capacity(count);
        let mut zs = Vec::with_capacity(count);
        let mut ss = Vec::with_capacity(count);
        for i in first..first + count {
            let mut s = Sampler::new(spec.seed, sequence_stream(i));
            let start = [s.uniform() * spec.box_size, s.uniform() * spec.box_size];
            let s0 = s.index(4);
            let (z, reg) = ball_trajectory(start, s0, spec, &mut s);
            let x = DMatrix::from_fn(spec.length, 2, |t, j| emission.apply(&[z[(t, 0)], z[(t, 1)]])[j]);
            xs.push(x);
            zs.push(z);
            ss.push(reg);
        }
        let mut md = metadata.clone();
        md.push(("split".into(), split.to_string()));
        Dataset { x: xs, z: Some(zs), s: Some(ss), regimes: 4, metadata: md }
    };
    Ok(Generated {
        train: build(0, spec.n_train, "train"),
        test: build(spec.n_train, spec.n_test, "test"),
        truth,
        emission,
    })
}
