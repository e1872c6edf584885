//! `rsds`: generate data, train, evaluate, check assumptions and forecast.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;

use rsds::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingState};
use rsds::config::{ForecastKind, RunConfig};
use rsds::datagen::{read_dataset, write_dataset, Dataset, Emission};
use rsds::eval::{evaluate_model, forecast_dataset};
use rsds::flow::FlowStack;
use rsds::model::Model;
use rsds::params::Parameterized;
use rsds::rmsm::ForecastMode;
use rsds::theory::{
    check_assumptions, dominance_horizon, gaussian_margin, recover_disentanglement, uniform_prior_odds, Horizon,
};
use rsds::trainer::{Adam, Trainer};
use rsds::Error;

const SECTIONS: [&str; 4] = ["generator", "model", "train", "eval"];

#[derive(Parser, Debug)]
#[command(name = "rsds", version, about = "Recurrent switching dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (INI). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generation, training and Monte Carlo forecasts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a dataset; the test split goes to `<stem>.test.rsds`.
    Generate {
        /// Number of training sequences.
        #[arg(long)]
        n_sequences: Option<usize>,
    },
    /// Fit a model and write a checkpoint.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch log; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report likelihood and recovery metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Assumption, dominance and disentanglement report.
    Theory {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Roll the model forward from a context window.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn config_err(e: Error) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Contract(_) => 1,
            Error::Io(_) | Error::Format { .. } => 2,
            Error::Divergence { .. } | Error::Numerical(_) | Error::Diagonalization { .. } => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

/// Split `--section.key=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let spec = a.strip_prefix("--").and_then(|s| {
            let (path, _) = s.split_once('=')?;
            let (section, _) = path.split_once('.')?;
            SECTIONS.contains(&section).then_some(s)
        });
        match spec {
            Some(s) => overrides.push(s.to_string()),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RSDS_LOG", "info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli, overrides: &[String]) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(config_err)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o).map_err(config_err)?;
    }
    if let Some(seed) = cli.seed {
        cfg.generator.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
    }
    if cli.deterministic {
        cfg.train.threads = 1;
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[String]) -> CmdResult {
    let mut cfg = load_config(&cli, overrides)?;
    match &cli.command {
        Command::Generate { n_sequences } => {
            if let Some(n) = n_sequences {
                cfg.generator.n_train = *n;
            }
            cmd_generate(&cfg, required(&cli.out, "--out")?)
        }
        Command::Train { resume, log } => {
            let out = required(&cli.out, "--out")?;
            let log = log.clone().unwrap_or_else(|| with_suffix(out, ".log"));
            cmd_train(&cfg, required(&cli.data, "--data")?, out, resume.as_deref(), &log)
        }
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint, required(&cli.data, "--data")?, cli.out.as_deref()),
        Command::Theory { checkpoint } => cmd_theory(&cfg, checkpoint.as_deref(), cli.out.as_deref()),
        Command::Forecast { checkpoint } => {
            cmd_forecast(&cfg, checkpoint, required(&cli.data, "--data")?, cli.out.as_deref())
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(format!("{flag} is required for this command")))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// `dir/name.rsds` becomes `dir/name.<tag>.<ext>`.
fn sibling(p: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}.{tag}.{ext}"))
}

/// Print report lines and optionally write them to `out`.
fn emit(lines: &[String], out: Option<&Path>) -> CmdResult {
    for l in lines {
        println!("{l}");
    }
    if let Some(p) = out {
        let mut w = BufWriter::new(File::create(p)?);
        for l in lines {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let g = cfg.generator.generate().map_err(config_err)?;
    write_dataset(out, &g.train)?;
    let test_path = sibling(out, "test", "rsds");
    write_dataset(&test_path, &g.test)?;
    info!("wrote {} training sequences to {}", g.train.len(), out.display());
    info!("wrote {} test sequences to {}", g.test.len(), test_path.display());
    if matches!(g.emission, Emission::Identity) {
        let n = g.train.obs_dim();
        let m = g.truth.latent_dim();
        let model = Model::new(FlowStack::identity(n, m)?, g.truth)?;
        let truth_path = sibling(out, "truth", "rsdc");
        save_checkpoint(&truth_path, &Checkpoint { model, state: TrainingState::default() })?;
        info!("wrote generating model to {}", truth_path.display());
    }
    println!("sequences={} length={} obs_dim={}", g.train.len(), g.train.seq_len(), g.train.obs_dim());
    Ok(())
}

fn read_data(path: &Path) -> std::result::Result<Dataset, Failure> {
    let d = read_dataset(path).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })?;
    if d.is_empty() {
        return Err(usage(format!("{} holds no sequences", path.display())));
    }
    Ok(d)
}

fn read_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })
}

fn check_dims(model: &Model, data: &Dataset, what: &str) -> CmdResult {
    if model.obs_dim() != data.obs_dim() {
        return Err(Failure {
            code: 2,
            message: format!("{what} expects {} observation columns, data has {}", model.obs_dim(), data.obs_dim()),
        });
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_path: &Path, out: &Path, resume: Option<&Path>, log_path: &Path) -> CmdResult {
    let data = read_data(data_path)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.validate().map_err(config_err)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            check_dims(&ck.model, &data, "checkpoint")?;
            train_cfg.seed = ck.state.seed;
            let adam = ck.state.adam.clone().unwrap_or_else(|| Adam::new(ck.model.num_params()));
            info!("resuming from {} at epoch {}", p.display(), ck.state.epoch);
            Trainer::resume(ck.model, train_cfg.clone(), &data.x, adam, ck.state.step, ck.state.epoch as usize)?
        }
        None => {
            let arch = cfg.model.arch();
            if arch.flow.dim != data.obs_dim() {
                return Err(Failure {
                    code: 2,
                    message: format!("model.obs_dim = {} but the data has {} columns", arch.flow.dim, data.obs_dim()),
                });
            }
            let model = Model::random(&arch, train_cfg.seed).map_err(config_err)?;
            Trainer::new(model, train_cfg.clone(), &data.x)?
        }
    };
    let save = |t: &Trainer| -> CmdResult {
        let ck = Checkpoint {
            model: t.model().clone(),
            state: TrainingState {
                step: t.step(),
                epoch: t.epoch() as u64,
                seed: train_cfg.seed,
                adam: Some(t.adam().clone()),
            },
        };
        save_checkpoint(out, &ck)?;
        Ok(())
    };
    let mut log = BufWriter::new(File::create(log_path)?);
    for i in 0..train_cfg.epochs {
        match trainer.run_epoch(&data.x) {
            Ok(rec) => {
                writeln!(log, "{}", rec.log_line())?;
                log.flush()?;
            }
            Err(e @ Error::Divergence { .. }) => {
                save(&trainer)?;
                warn!("training diverged; last good state saved to {}", out.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    println!("checkpoint={} epochs={} steps={}", out.display(), trainer.epoch(), trainer.step());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ck_path: &Path, data_path: &Path, out: Option<&Path>) -> CmdResult {
    let ck = read_checkpoint(ck_path)?;
    let data = read_data(data_path)?;
    check_dims(&ck.model, &data, "checkpoint")?;
    if data.z.is_none() {
        warn!("dataset has no latent truth; MCC skipped");
    }
    if data.s.is_none() {
        warn!("dataset has no regime truth; regime F1 skipped");
    }
    let report = evaluate_model(&ck.model, &data, cfg.train.sigma_eps)?;
    emit(&report.lines(), out)
}

fn probe_grid(m: usize, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    let count = count.max(1);
    let axis: Vec<f64> = (0..count)
        .map(|i| if count == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 })
        .collect();
    let mut points = vec![Vec::new()];
    for _ in 0..m {
        points = points
            .into_iter()
            .flat_map(|p| axis.iter().map(move |&a| {
                let mut q = p.clone();
                q.push(a);
                q
            }))
            .collect();
    }
    points
}

fn read_covariances(path: &Path) -> std::result::Result<Vec<DMatrix<f64>>, Failure> {
    let text = std::fs::read_to_string(path)?;
    let mut mats = Vec::new();
    for block in text.split("\n\n").map(str::trim).filter(|b| !b.is_empty()) {
        let rows: Vec<Vec<f64>> = block
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .map(|l| l.split_whitespace().map(str::parse).collect::<std::result::Result<Vec<f64>, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(usage(format!("{}: covariance blocks must be square", path.display())));
        }
        mats.push(DMatrix::from_fn(m, m, |i, j| rows[i][j]));
    }
    Ok(mats)
}

fn cmd_theory(cfg: &RunConfig, ck_path: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let e = &cfg.eval;
    let mut lines = Vec::new();
    let mut derived_margin = None;
    let mut derived_eps = None;
    let mut regimes = None;
    if let Some(p) = ck_path {
        let ck = read_checkpoint(p)?;
        let rmsm = &ck.model.rmsm;
        let (k, m) = (rmsm.num_regimes(), rmsm.latent_dim());
        regimes = Some(k);
        let probes = probe_grid(m, e.probe_min, e.probe_max, e.probe_count);
        let report = check_assumptions(rmsm, &probes)?;
        lines.extend(report.lines());
        for (row, &(a, b)) in report.ratios.pairs.iter().enumerate() {
            let vals: Vec<String> = report.ratios.values.row(row).iter().map(|v| format!("{v:.6}")).collect();
            lines.push(format!("ratio pair={a},{b} values={}", vals.join(",")));
        }
        if k > 1 {
            let origin = vec![0.0; m];
            let mut weakest = f64::INFINITY;
            for r in 0..k {
                let at_origin = gaussian_margin(rmsm, &origin, r)?;
                let best = probes
                    .iter()
                    .map(|z| gaussian_margin(rmsm, z, r))
                    .collect::<rsds::Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                weakest = weakest.min(best);
                lines.push(format!("margin regime={r} origin={at_origin:.6} best_probe={best:.6}"));
            }
            derived_margin = Some(weakest);
        }
        derived_eps = Some(report.implied_stickiness);
    }

    if regimes == Some(1) {
        lines.push("dominance trivially satisfied: single regime".into());
    } else if let (Some(margin), Some(eps)) = (e.margin.or(derived_margin), e.stickiness.or(derived_eps)) {
        let r1 = e.r1.unwrap_or_else(|| uniform_prior_odds(regimes.unwrap_or(2)));
        if !(0.0..0.5).contains(&eps) || !(margin > 0.0) {
            lines.push(format!("dominance not applicable: margin={margin:.6} stickiness={eps:.6}"));
        } else {
            let d = dominance_horizon(r1, margin, eps)?;
            let horizon = match d.horizon {
                Horizon::Steps(t) => t.to_string(),
                Horizon::Unreachable => "unreachable".into(),
            };
            lines.push(format!(
                "dominance margin={:.6} stickiness={:.6} r1={:.6} a={:.6} r_inf={:.6} horizon={} one_step={} premise_violated={}",
                d.margin, d.stickiness, d.r1, d.a, d.r_inf, horizon, d.one_step, d.premise_violated
            ));
        }
    } else if ck_path.is_none() && e.covariances.is_none() {
        return Err(usage("theory needs --checkpoint, eval.margin with eval.stickiness, or eval.covariances"));
    }

    if let Some(cov_path) = &e.covariances {
        let covs = read_covariances(Path::new(cov_path))?;
        let res = recover_disentanglement(&covs, 1e-6)?;
        let groups: Vec<String> = res
            .groups
            .iter()
            .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join("+"))
            .collect();
        lines.push(format!(
            "disentanglement full={} groups={} residual={:.3e}",
            res.is_full(),
            groups.join(","),
            res.residual
        ));
        for i in 0..res.a_prime.nrows() {
            let row: Vec<String> = res.a_prime.row(i).iter().map(|v| format!("{v:.6}")).collect();
            lines.push(format!("recovered_row {i} {}", row.join(",")));
        }
    }
    emit(&lines, out)
}

fn cmd_forecast(cfg: &RunConfig, ck_path: &Path, data_path: &Path, out: Option<&Path>) -> CmdResult {
    let ck = read_checkpoint(ck_path)?;
    let data = read_data(data_path)?;
    check_dims(&ck.model, &data, "checkpoint")?;
    let e = &cfg.eval;
    let mode = match e.mode {
        ForecastKind::Map => ForecastMode::Map,
        ForecastKind::MonteCarlo => ForecastMode::MonteCarlo { samples: e.samples, seed: e.seed },
    };
    let report = forecast_dataset(&ck.model, &data, e.context, e.horizon, mode)?;
    if !report.skipped.is_empty() {
        warn!(
            "{} sequences shorter than context {} + horizon {} were skipped",
            report.skipped.len(),
            e.context,
            e.horizon
        );
    }
    if let Some(p) = out {
        let mut w = BufWriter::new(File::create(p)?);
        for f in &report.forecasts {
            for h in 0..f.x.nrows() {
                let xs: Vec<String> = f.x.row(h).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{},{},{}", f.index, e.context + h, f.latent.regimes[h], xs.join(","))?;
            }
        }
        w.flush()?;
    }
    emit(&report.lines(), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["rsds", "train", "--train.epochs=3", "--out", "x", "--model.regimes=4", "--seed=2"]
            .map(String::from)
            .to_vec();
        let (rest, o) = split_overrides(args);
        assert_eq!(o, vec!["train.epochs=3", "model.regimes=4"]);
        assert_eq!(rest, vec!["rsds", "train", "--out", "x", "--seed=2"]);
    }

    #[test]
    fn probe_grid_size() {
        assert_eq!(probe_grid(2, -1.0, 1.0, 3).len(), 9);
        assert_eq!(probe_grid(1, -1.0, 1.0, 1), vec![vec![0.0]]);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/a/b.rsds"), "test", "rsds"), PathBuf::from("/a/b.test.rsds"));
        assert_eq!(with_suffix(Path::new("/a/m.rsdc"), ".log"), PathBuf::from("/a/m.rsdc.log"));
    }
}
