//! Flat key=value run configuration with command-line overrides.

use kronwake::error::{Error, Result};
use std::fmt;
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Kfac,
    So,
    Q,
    Qe,
}

impl Solver {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kfac" => Ok(Solver::Kfac),
            "so" => Ok(Solver::So),
            "q" => Ok(Solver::Q),
            "qe" => Ok(Solver::Qe),
            _ => Err(Error::Config(format!("unknown solver '{s}' (kfac|so|q|qe)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Solver::Kfac => "kfac",
            Solver::So => "so",
            Solver::Q => "q",
            Solver::Qe => "qe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    SynthClassification,
    SynthRegression,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "synth_cls" => Ok(DatasetKind::SynthClassification),
            "synth_reg" => Ok(DatasetKind::SynthRegression),
            _ => Err(Error::Config(format!("unknown dataset '{s}' (mnist|synth_cls|synth_reg)"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::SynthClassification => "synth_cls",
            DatasetKind::SynthRegression => "synth_reg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// Paper defaults per solver: global for kfac/so, per-group for q/qe.
    Auto,
    Global,
    PerGroup,
    None,
}

impl ClipMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ClipMode::Auto),
            "global" => Ok(ClipMode::Global),
            "per_group" => Ok(ClipMode::PerGroup),
            "none" => Ok(ClipMode::None),
            _ => Err(Error::Config(format!("unknown clip_mode '{s}' (auto|global|per_group|none)"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ClipMode::Auto => "auto",
            ClipMode::Global => "global",
            ClipMode::PerGroup => "per_group",
            ClipMode::None => "none",
        }
    }
}

/// One training run, fully determined by these fields plus the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub solver: Solver,
    pub rho: f64,
    pub lambda: f64,
    /// λ(k) = lambda / (1 + lambda_decay·k); 0 keeps λ constant.
    pub lambda_decay: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub update_period: usize,
    pub weight_decay: f64,
    pub clip_mode: ClipMode,
    pub clip_param: f64,
    pub tau: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden layers are ReLU; the head comes from the dataset kind.
    pub arch: Vec<usize>,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub synth_n: usize,
    pub synth_test_n: usize,
    pub synth_seed: u64,
    pub out_dir: PathBuf,
    pub n_is: usize,
    pub omega: f64,
    pub n_cap: usize,
    pub zeta_scale: f64,
    /// Test hook: run the q solver with B forcibly zeroed.
    pub q_zero_b: bool,
    /// Dense boundedness diagnostic (small nets only).
    pub margin_diag: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            solver: Solver::Kfac,
            rho: 0.5,
            lambda: 100.0,
            lambda_decay: 0.0,
            gamma: 0.01,
            batch_size: 512,
            update_period: 30,
            weight_decay: 0.001,
            clip_mode: ClipMode::Auto,
            clip_param: 0.1,
            tau: 2.0,
            epochs: 10,
            seed: 0,
            arch: vec![784, 128, 64, 10],
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            synth_n: 512,
            synth_test_n: 256,
            synth_seed: 7,
            out_dir: PathBuf::from("runs"),
            n_is: 10,
            omega: 0.07,
            n_cap: 4,
            zeta_scale: 1.0 / 330.0,
            q_zero_b: false,
            margin_diag: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| Error::Config(format!("{key}: bad float '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| Error::Config(format!("{key}: bad integer '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>().map_err(|_| Error::Config(format!("{key}: bad integer '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: bad bool '{v}'"))),
    }
}

fn parse_arch(v: &str) -> Result<Vec<usize>> {
    let dims: Result<Vec<usize>> = v
        .split('-')
        .map(|p| p.parse::<usize>().map_err(|_| Error::Config(format!("arch: bad dim '{p}'"))))
        .collect();
    let dims = dims?;
    if dims.len() < 2 {
        return Err(Error::Config("arch needs at least input-output".into()));
    }
    Ok(dims)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "solver" => self.solver = Solver::parse(value)?,
            "rho" => self.rho = parse_f64(key, value)?,
            "lambda" => self.lambda = parse_f64(key, value)?,
            "lambda_decay" => self.lambda_decay = parse_f64(key, value)?,
            "gamma" => self.gamma = parse_f64(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "update_period" => self.update_period = parse_usize(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "clip_mode" => self.clip_mode = ClipMode::parse(value)?,
            "clip_param" => self.clip_param = parse_f64(key, value)?,
            "tau" => self.tau = parse_f64(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "arch" => self.arch = parse_arch(value)?,
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "synth_n" => self.synth_n = parse_usize(key, value)?,
            "synth_test_n" => self.synth_test_n = parse_usize(key, value)?,
            "synth_seed" => self.synth_seed = parse_u64(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_is" => self.n_is = parse_usize(key, value)?,
            "omega" => self.omega = parse_f64(key, value)?,
            "n_cap" => self.n_cap = parse_usize(key, value)?,
            "zeta_scale" => self.zeta_scale = parse_f64(key, value)?,
            "q_zero_b" => self.q_zero_b = parse_bool(key, value)?,
            "margin_diag" => self.margin_diag = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a flat key=value file ('#' comments, blank lines allowed) on top
    /// of the defaults.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0,1)", self.rho)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.lambda_decay < 0.0 {
            return Err(Error::Config("lambda_decay must be nonnegative".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.update_period == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, update_period and epochs must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.clip_param <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("clip thresholds must be positive".into()));
        }
        if self.solver == Solver::Qe && (self.omega <= 0.0 || self.n_cap == 0 || self.zeta_scale < 0.0) {
            return Err(Error::Config("qe requires positive omega, n_cap and ζ_scale ≥ 0".into()));
        }
        Ok(())
    }

    /// λ at step k under the configured schedule.
    pub fn lambda_at(&self, k: usize) -> f64 {
        if self.lambda_decay == 0.0 {
            self.lambda
        } else {
            self.lambda / (1.0 + self.lambda_decay * k as f64)
        }
    }

    pub fn arch_string(&self) -> String {
        self.arch.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn csv_name(&self) -> String {
        format!("run_{}_seed{}.csv", self.solver.name(), self.seed)
    }
}

impl fmt::Display for RunConfig {
    /// Canonical key=value form; parsing this text reproduces the config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "solver={}", self.solver.name())?;
        writeln!(f, "rho={}", self.rho)?;
        writeln!(f, "lambda={}", self.lambda)?;
        writeln!(f, "lambda_decay={}", self.lambda_decay)?;
        writeln!(f, "gamma={}", self.gamma)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "update_period={}", self.update_period)?;
        writeln!(f, "weight_decay={}", self.weight_decay)?;
        writeln!(f, "clip_mode={}", self.clip_mode.name())?;
        writeln!(f, "clip_param={}", self.clip_param)?;
        writeln!(f, "tau={}", self.tau)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "arch={}", self.arch_string())?;
        writeln!(f, "dataset={}", self.dataset.name())?;
        writeln!(f, "data_dir={}", self.data_dir.display())?;
        writeln!(f, "synth_n={}", self.synth_n)?;
        writeln!(f, "synth_test_n={}", self.synth_test_n)?;
        writeln!(f, "synth_seed={}", self.synth_seed)?;
        writeln!(f, "out_dir={}", self.out_dir.display())?;
        writeln!(f, "n_is={}", self.n_is)?;
        writeln!(f, "omega={}", self.omega)?;
        writeln!(f, "n_cap={}", self.n_cap)?;
        writeln!(f, "zeta_scale={}", self.zeta_scale)?;
        writeln!(f, "q_zero_b={}", self.q_zero_b)?;
        write!(f, "margin_diag={}", self.margin_diag)
    }
}
