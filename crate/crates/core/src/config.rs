//! Run configuration in a small INI dialect: `[section]` headers,
//! `key = value` lines and `#` comments. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::{
    gen_bouncing_ball_state, gen_cosine_toy, gen_synthetic, synthetic_defaults, BallSpec, Emission, Generated, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::flow::{FlowArch, Mixing};
use crate::model::ModelArch;
use crate::nnet::Activation;
use crate::rmsm::RmsmArch;
use crate::trainer::TrainConfig;

/// One `key = value` line with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Split INI text into entries. Keys before any section header are rejected.
pub fn parse_ini(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(Error::Config { line, message: format!("malformed section header {body:?}") });
            };
            section = Some(name.trim().to_string());
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config { line, message: format!("expected key = value, got {body:?}") });
        };
        let Some(sec) = &section else {
            return Err(Error::Config { line, message: "key outside any section".into() });
        };
        out.push(Entry { section: sec.clone(), key: k.trim().to_string(), value: v.trim().to_string(), line });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Synthetic,
    Ball,
    Cosine,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Synthetic => "synthetic",
            GeneratorKind::Ball => "ball",
            GeneratorKind::Cosine => "cosine",
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "ball" => Ok(Self::Ball),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!("unknown generator {s:?} (synthetic, ball, cosine)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub seed: u64,
    pub length: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub identity_emission: bool,
    pub latent_dim: usize,
    /// Unset means the default for `latent_dim`.
    pub regimes: Option<usize>,
    pub obs_dim: Option<usize>,
    pub ratio_threshold: Option<f64>,
    pub stay: f64,
    pub in_degree: usize,
    pub hidden_per_dim: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub box_size: f64,
    pub speed: f64,
    pub process_noise: f64,
    pub sigma2: f64,
    pub stickiness: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::new(3);
        let ball = BallSpec::default();
        Self {
            kind: GeneratorKind::Synthetic,
            seed: 0,
            length: syn.length,
            n_train: syn.n_train,
            n_test: syn.n_test,
            identity_emission: false,
            latent_dim: 3,
            regimes: None,
            obs_dim: None,
            ratio_threshold: None,
            stay: syn.stay,
            in_degree: syn.in_degree,
            hidden_per_dim: syn.hidden_per_dim,
            sigma_min: syn.sigma_range.0,
            sigma_max: syn.sigma_range.1,
            box_size: ball.box_size,
            speed: ball.speed,
            process_noise: ball.process_noise,
            sigma2: 0.1,
            stickiness: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let (k, thr) = synthetic_defaults(self.latent_dim);
        SyntheticSpec {
            latent_dim: self.latent_dim,
            regimes: self.regimes.unwrap_or(k),
            obs_dim: self.obs_dim.unwrap_or(self.latent_dim),
            length: self.length,
            n_train: self.n_train,
            n_test: self.n_test,
            stay: self.stay,
            in_degree: self.in_degree,
            hidden_per_dim: self.hidden_per_dim,
            sigma_range: (self.sigma_min, self.sigma_max),
            ratio_threshold: self.ratio_threshold.unwrap_or(thr),
            identity_emission: self.identity_emission,
            seed: self.seed,
        }
    }

    /// Train and test splits plus the generating prior.
    pub fn generate(&self) -> Result<Generated> {
        match self.kind {
            GeneratorKind::Synthetic => gen_synthetic(&self.synthetic_spec()),
            GeneratorKind::Ball => gen_bouncing_ball_state(&self.ball_spec()),
            GeneratorKind::Cosine => {
                let (all, truth) =
                    gen_cosine_toy(self.sigma2, self.length, self.n_train + self.n_test, self.stickiness, self.seed)?;
                let (train, test) = all.split_at(self.n_train);
                Ok(Generated { train, test, truth, emission: Emission::Identity })
            }
        }
    }

    pub fn ball_spec(&self) -> BallSpec {
        BallSpec {
            box_size: self.box_size,
            speed: self.speed,
            length: self.length,
            n_train: self.n_train,
            n_test: self.n_test,
            process_noise: self.process_noise,
            identity_emission: self.identity_emission,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub regimes: usize,
    pub flow_depth: usize,
    pub flow_hidden: Vec<usize>,
    pub flow_activation: Activation,
    pub mixing: Mixing,
    pub transition_hidden: Vec<usize>,
    pub transition_activation: Activation,
    pub residual: bool,
    pub recurrent: bool,
    pub switching_hidden: Vec<usize>,
    pub switching_activation: Activation,
    pub initial_stay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let f = FlowArch::default();
        let r = RmsmArch::default();
        Self {
            obs_dim: 3,
            latent_dim: 3,
            regimes: 3,
            flow_depth: f.depth,
            flow_hidden: f.hidden,
            flow_activation: f.activation,
            mixing: f.mixing,
            transition_hidden: r.transition_hidden,
            transition_activation: r.transition_activation,
            residual: r.residual,
            recurrent: r.recurrent,
            switching_hidden: r.switching_hidden,
            switching_activation: r.switching_activation,
            initial_stay: r.initial_stay,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> ModelArch {
        ModelArch {
            flow: FlowArch {
                dim: self.obs_dim,
                latent_dim: self.latent_dim,
                depth: self.flow_depth,
                hidden: self.flow_hidden.clone(),
                activation: self.flow_activation,
                mixing: self.mixing,
            },
            rmsm: RmsmArch {
                regimes: self.regimes,
                latent_dim: self.latent_dim,
                transition_hidden: self.transition_hidden.clone(),
                transition_activation: self.transition_activation,
                residual: self.residual,
                recurrent: self.recurrent,
                switching_hidden: self.switching_hidden.clone(),
                switching_activation: self.switching_activation,
                initial_stay: self.initial_stay,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastKind {
    Map,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Observed steps before a forecast starts.
    pub context: usize,
    pub horizon: usize,
    pub mode: ForecastKind,
    pub samples: usize,
    pub seed: u64,
    pub probe_min: f64,
    pub probe_max: f64,
    /// Grid points per latent dimension for assumption probes.
    pub probe_count: usize,
    pub margin: Option<f64>,
    pub stickiness: Option<f64>,
    pub r1: Option<f64>,
    /// Text file of covariance matrices for the disentanglement check.
    pub covariances: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context: 5,
            horizon: 36,
            mode: ForecastKind::Map,
            samples: 16,
            seed: 0,
            probe_min: -2.0,
            probe_max: 2.0,
            probe_count: 5,
            margin: None,
            stickiness: None,
            r1: None,
            covariances: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Write a checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_opt<T: FromStr>(v: &str, none: &str) -> std::result::Result<Option<T>, String> {
    if v == none {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(p.trim())).collect()
}

fn parse_act(v: &str) -> std::result::Result<Activation, String> {
    Activation::from_name(v).ok_or_else(|| format!("unknown activation {v:?}"))
}

fn opt_str<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn list_str(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_ini(text)? {
            cfg.set(&e.section, &e.key, &e.value)
                .map_err(|message| Error::Config { line: e.line, message })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply `section.key=value`; errors carry line 0.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let bad = |message: String| Error::Config { line: 0, message };
        let (path, value) = spec.split_once('=').ok_or_else(|| bad(format!("override {spec:?} lacks '='")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| bad(format!("override {path:?} must be section.key")))?;
        self.set(section, key, value.trim()).map_err(|m| bad(format!("{path}: {m}")))
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        match section {
            "generator" => {
                let g = &mut self.generator;
                match key {
                    "kind" => g.kind = parse(v)?,
                    "seed" => g.seed = parse(v)?,
                    "length" => g.length = parse(v)?,
                    "n_train" => g.n_train = parse(v)?,
                    "n_test" => g.n_test = parse(v)?,
                    "identity_emission" => g.identity_emission = parse_bool(v)?,
                    "latent_dim" => g.latent_dim = parse(v)?,
                    "regimes" => g.regimes = parse_opt(v, "auto")?,
                    "obs_dim" => g.obs_dim = parse_opt(v, "auto")?,
                    "ratio_threshold" => g.ratio_threshold = parse_opt(v, "auto")?,
                    "stay" => g.stay = parse(v)?,
                    "in_degree" => g.in_degree = parse(v)?,
                    "hidden_per_dim" => g.hidden_per_dim = parse(v)?,
                    "sigma_min" => g.sigma_min = parse(v)?,
                    "sigma_max" => g.sigma_max = parse(v)?,
                    "box_size" => g.box_size = parse(v)?,
                    "speed" => g.speed = parse(v)?,
                    "process_noise" => g.process_noise = parse(v)?,
                    "sigma2" => g.sigma2 = parse(v)?,
                    "stickiness" => g.stickiness = parse(v)?,
                    _ => return Err(format!("unknown key generator.{key}")),
                }
            }
            "model" => {
                let m = &mut self.model;
                match key {
                    "obs_dim" => m.obs_dim = parse(v)?,
                    "latent_dim" => m.latent_dim = parse(v)?,
                    "regimes" => m.regimes = parse(v)?,
                    "flow_depth" => m.flow_depth = parse(v)?,
                    "flow_hidden" => m.flow_hidden = parse_list(v)?,
                    "flow_activation" => m.flow_activation = parse_act(v)?,
                    "mixing" => {
                        m.mixing = match v {
                            "lu" => Mixing::Lu,
                            "permutation" => Mixing::Permutation,
                            _ => return Err(format!("unknown mixing {v:?} (lu, permutation)")),
                        }
                    }
                    "transition_hidden" => m.transition_hidden = parse_list(v)?,
                    "transition_activation" => m.transition_activation = parse_act(v)?,
                    "residual" => m.residual = parse_bool(v)?,
                    "switching" => {
                        m.recurrent = match v {
                            "recurrent" => true,
                            "autonomous" => false,
                            _ => return Err(format!("unknown switching {v:?} (autonomous, recurrent)")),
                        }
                    }
                    "switching_hidden" => m.switching_hidden = parse_list(v)?,
                    "switching_activation" => m.switching_activation = parse_act(v)?,
                    "initial_stay" => m.initial_stay = parse(v)?,
                    _ => return Err(format!("unknown key model.{key}")),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "sigma_eps" => t.sigma_eps = parse(v)?,
                    "lr_flow" => t.lr_flow = parse(v)?,
                    "lr_rmsm" => t.lr_rmsm = parse(v)?,
                    "beta1" => t.beta1 = parse(v)?,
                    "beta2" => t.beta2 = parse(v)?,
                    "adam_eps" => t.adam_eps = parse(v)?,
                    "epochs" => t.epochs = parse(v)?,
                    "batch_size" => t.batch_size = parse(v)?,
                    "q_freeze_steps" => {
                        t.q_freeze_steps = match v {
                            "auto" => None,
                            "inf" => Some(u64::MAX),
                            _ => Some(parse(v)?),
                        }
                    }
                    "pca_init" => t.pca_init = parse_bool(v)?,
                    "pca_align_weight" => t.pca_align_weight = parse(v)?,
                    "pca_align_steps" => t.pca_align_steps = parse(v)?,
                    "cluster_init" => t.cluster_init = parse_bool(v)?,
                    "lr_drop_epoch" => t.lr_drop_epoch = parse_opt(v, "none")?,
                    "lr_drop_factor" => t.lr_drop_factor = parse(v)?,
                    "seed" => t.seed = parse(v)?,
                    "threads" => t.threads = parse(v)?,
                    "checkpoint_every" => self.checkpoint_every = parse(v)?,
                    _ => return Err(format!("unknown key train.{key}")),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "context" => e.context = parse(v)?,
                    "horizon" => e.horizon = parse(v)?,
                    "mode" => {
                        e.mode = match v {
                            "map" => ForecastKind::Map,
                            "mc" => ForecastKind::MonteCarlo,
                            _ => return Err(format!("unknown forecast mode {v:?} (map, mc)")),
                        }
                    }
                    "samples" => e.samples = parse(v)?,
                    "seed" => e.seed = parse(v)?,
                    "probe_min" => e.probe_min = parse(v)?,
                    "probe_max" => e.probe_max = parse(v)?,
                    "probe_count" => e.probe_count = parse(v)?,
                    "margin" => e.margin = parse_opt(v, "none")?,
                    "stickiness" => e.stickiness = parse_opt(v, "none")?,
                    "r1" => e.r1 = parse_opt(v, "none")?,
                    "covariances" => e.covariances = if v == "none" { None } else { Some(v.to_string()) },
                    _ => return Err(format!("unknown key eval.{key}")),
                }
            }
            _ => return Err(format!("unknown section [{section}]")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let g = &self.generator;
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        vec![
            (
                "generator",
                vec![
                    ("kind", g.kind.name().to_string()),
                    ("seed", g.seed.to_string()),
                    ("length", g.length.to_string()),
                    ("n_train", g.n_train.to_string()),
                    ("n_test", g.n_test.to_string()),
                    ("identity_emission", g.identity_emission.to_string()),
                    ("latent_dim", g.latent_dim.to_string()),
                    ("regimes", opt_str(&g.regimes, "auto")),
                    ("obs_dim", opt_str(&g.obs_dim, "auto")),
                    ("ratio_threshold", opt_str(&g.ratio_threshold, "auto")),
                    ("stay", g.stay.to_string()),
                    ("in_degree", g.in_degree.to_string()),
                    ("hidden_per_dim", g.hidden_per_dim.to_string()),
                    ("sigma_min", g.sigma_min.to_string()),
                    ("sigma_max", g.sigma_max.to_string()),
                    ("box_size", g.box_size.to_string()),
                    ("speed", g.speed.to_string()),
                    ("process_noise", g.process_noise.to_string()),
                    ("sigma2", g.sigma2.to_string()),
                    ("stickiness", g.stickiness.to_string()),
                ],
            ),
            ("model", model_entries(m)),
            (
                "train",
                vec![
                    ("sigma_eps", t.sigma_eps.to_string()),
                    ("lr_flow", t.lr_flow.to_string()),
                    ("lr_rmsm", t.lr_rmsm.to_string()),
                    ("beta1", t.beta1.to_string()),
                    ("beta2", t.beta2.to_string()),
                    ("adam_eps", t.adam_eps.to_string()),
                    ("epochs", t.epochs.to_string()),
                    ("batch_size", t.batch_size.to_string()),
                    (
                        "q_freeze_steps",
                        match t.q_freeze_steps {
                            None => "auto".into(),
                            Some(u64::MAX) => "inf".into(),
                            Some(n) => n.to_string(),
                        },
                    ),
                    ("pca_init", t.pca_init.to_string()),
                    ("pca_align_weight", t.pca_align_weight.to_string()),
                    ("pca_align_steps", t.pca_align_steps.to_string()),
                    ("cluster_init", t.cluster_init.to_string()),
                    ("lr_drop_epoch", opt_str(&t.lr_drop_epoch, "none")),
                    ("lr_drop_factor", t.lr_drop_factor.to_string()),
                    ("seed", t.seed.to_string()),
                    ("threads", t.threads.to_string()),
                    ("checkpoint_every", self.checkpoint_every.to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("context", e.context.to_string()),
                    ("horizon", e.horizon.to_string()),
                    ("mode", if e.mode == ForecastKind::Map { "map" } else { "mc" }.into()),
                    ("samples", e.samples.to_string()),
                    ("seed", e.seed.to_string()),
                    ("probe_min", e.probe_min.to_string()),
                    ("probe_max", e.probe_max.to_string()),
                    ("probe_count", e.probe_count.to_string()),
                    ("margin", opt_str(&e.margin, "none")),
                    ("stickiness", opt_str(&e.stickiness, "none")),
                    ("r1", opt_str(&e.r1, "none")),
                    ("covariances", e.covariances.clone().unwrap_or_else(|| "none".into())),
                ],
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }
}

/// Key-value lines of the `[model]` section.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("obs_dim", m.obs_dim.to_string()),
        ("latent_dim", m.latent_dim.to_string()),
        ("regimes", m.regimes.to_string()),
        ("flow_depth", m.flow_depth.to_string()),
        ("flow_hidden", list_str(&m.flow_hidden)),
        ("flow_activation", m.flow_activation.name().into()),
        ("mixing", if m.mixing == Mixing::Lu { "lu" } else { "permutation" }.into()),
        ("transition_hidden", list_str(&m.transition_hidden)),
        ("transition_activation", m.transition_activation.name().into()),
        ("residual", m.residual.to_string()),
        ("switching", if m.recurrent { "recurrent" } else { "autonomous" }.into()),
        ("switching_hidden", list_str(&m.switching_hidden)),
        ("switching_activation", m.switching_activation.name().into()),
        ("initial_stay", m.initial_stay.to_string()),
    ]
}

pub fn render<S: AsRef<str>>(sections: &[(S, Vec<(&str, String)>)]) -> String {
    let mut out = String::new();
    for (i, (name, keys)) in sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "[{}]", name.as_ref());
        for (k, v) in keys {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn edited_round_trip() {
        let mut cfg = RunConfig::default();
        for o in [
            "generator.kind=ball",
            "generator.regimes=4",
            "generator.ratio_threshold=0.125",
            "model.switching=recurrent",
            "model.flow_hidden=16,16",
            "model.transition_hidden=none",
            "model.mixing=permutation",
            "train.q_freeze_steps=inf",
            "train.lr_drop_epoch=7",
            "train.lr_flow=0.00031",
            "eval.mode=mc",
            "eval.margin=0.1",
            "eval.covariances=/tmp/c.txt",
        ] {
            cfg.apply_override(o).unwrap();
        }
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.train.q_freeze_steps, Some(u64::MAX));
        assert!(again.model.transition_hidden.is_empty());
    }

    #[test]
    fn comments_and_whitespace() {
        let text = "# run\n[train]\n  epochs = 3   # short\n\n[model]\nregimes=4\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.regimes, 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("[train]\nepochs = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = RunConfig::parse("[train]\nepochs = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = RunConfig::parse("epochs = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = RunConfig::parse("[nope]\nx = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        assert!(RunConfig::default().apply_override("train.epochs").is_err());
    }

    #[test]
    fn synthetic_spec_uses_dimension_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("generator.latent_dim=8").unwrap();
        let spec = cfg.generator.synthetic_spec();
        assert_eq!((spec.regimes, spec.ratio_threshold), (4, 0.10));
        assert_eq!(spec.obs_dim, 8);
    }
}
