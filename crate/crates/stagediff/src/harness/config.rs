//! Flat key=value training configuration with strict unknown-key rejection.

use crate::error::{Error, Result};
use crate::structure::AffinityNorm;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    ClassCond,
    SuperRes,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::ClassCond => "class_cond",
            Task::SuperRes => "super_res",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_cond" => Ok(Task::ClassCond),
            "super_res" => Ok(Task::SuperRes),
            other => Err(Error::Config(format!("unknown task '{}'", other))),
        }
    }
}

/// Full run configuration. `s_scale` and `s_phi` set to 0 mean
/// self-normalizing (pinned to |g| at the first regime observation).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub seed: u64,
    pub k_tot: u64,
    pub batch: usize,
    // Data dims.
    pub f: usize,
    pub n: usize,
    pub n_train: usize,
    pub monitor_size: usize,
    pub n_eval: usize,
    // Model dims.
    pub d: usize,
    pub l_b: usize,
    pub n_classes: usize,
    pub d_ssl: usize,
    pub d_h: usize,
    // Diffusion.
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    // Monitoring.
    pub delta_k: u64,
    pub m: usize,
    // Guidance.
    pub rho_ssl: f64,
    // Timestep sampler.
    pub nu: f64,
    pub s_scale: f64,
    // Structure regularizer.
    pub lambda: f64,
    pub s_phi: f64,
    pub rho_sp: f64,
    pub k_on_frac: f64,
    pub m_interval: u64,
    pub affinity_norm: AffinityNorm,
    // Optimization.
    pub lr: f64,
    // Mechanism toggles.
    pub guidance_enabled: bool,
    pub adaptive_t_enabled: bool,
    pub structure_reg_enabled: bool,
    pub s_ref_path: Option<String>,
    /// Intermediate checkpoint interval; 0 writes only the final checkpoint.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::ClassCond,
            seed: 0,
            k_tot: 5000,
            batch: 32,
            f: 16,
            n: 32,
            n_train: 512,
            monitor_size: 32,
            n_eval: 64,
            d: 64,
            l_b: 8,
            n_classes: 8,
            d_ssl: 32,
            d_h: 48,
            t_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            delta_k: 50,
            m: 5,
            rho_ssl: 0.6,
            nu: 6.0,
            s_scale: 0.0,
            lambda: 1e-3,
            s_phi: 0.0,
            rho_sp: 0.8,
            k_on_frac: 0.1,
            m_interval: 500,
            affinity_norm: AffinityNorm::MaxRowSum,
            lr: 0.05,
            guidance_enabled: false,
            adaptive_t_enabled: false,
            structure_reg_enabled: false,
            s_ref_path: None,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn d_in(&self) -> usize {
        self.f * self.n
    }

    /// Parse `key=value` lines with `#` comments, starting from defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{}'", lineno + 1, raw))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse_str(&text)
    }

    /// Apply a single override; key names mirror the config file one-to-one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{}' for key '{}'", value, key)))
        }
        match key {
            "task" => self.task = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "k_tot" => self.k_tot = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "f" => self.f = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "monitor_size" => self.monitor_size = parse(key, value)?,
            "n_eval" => self.n_eval = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "l_b" => self.l_b = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "d_ssl" => self.d_ssl = parse(key, value)?,
            "d_h" => self.d_h = parse(key, value)?,
            "t_steps" => self.t_steps = parse(key, value)?,
            "beta_min" => self.beta_min = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "delta_k" => self.delta_k = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "rho_ssl" => self.rho_ssl = parse(key, value)?,
            "nu" => self.nu = parse(key, value)?,
            "s_scale" => self.s_scale = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "s_phi" => self.s_phi = parse(key, value)?,
            "rho_sp" => self.rho_sp = parse(key, value)?,
            "k_on_frac" => self.k_on_frac = parse(key, value)?,
            "m_interval" => self.m_interval = parse(key, value)?,
            "affinity_norm" => {
                self.affinity_norm = match value {
                    "max_row_sum" => AffinityNorm::MaxRowSum,
                    "sym_degree" => AffinityNorm::SymDegree,
                    other => {
                        return Err(Error::Config(format!("unknown affinity_norm '{}'", other)))
                    }
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "guidance_enabled" => self.guidance_enabled = parse(key, value)?,
            "adaptive_t_enabled" => self.adaptive_t_enabled = parse(key, value)?,
            "structure_reg_enabled" => self.structure_reg_enabled = parse(key, value)?,
            "s_ref_path" => {
                self.s_ref_path = if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_ssl > 0.0 && self.rho_ssl <= 1.0) {
            return Err(Error::Config(format!("rho_ssl must be in (0, 1], got {}", self.rho_ssl)));
        }
        if !(self.rho_sp > 0.0 && self.rho_sp <= 1.0) {
            return Err(Error::Config(format!("rho_sp must be in (0, 1], got {}", self.rho_sp)));
        }
        if self.structure_reg_enabled && self.s_ref_path.is_none() {
            return Err(Error::Config("structure_reg_enabled requires s_ref_path".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.f % 4 != 0 || self.n % 4 != 0 {
            return Err(Error::Config(format!(
                "f and n must be divisible by 4, got {}x{}",
                self.f, self.n
            )));
        }
        if self.k_tot == 0 || self.batch == 0 || self.delta_k == 0 || self.m_interval == 0 {
            return Err(Error::Config("k_tot, batch, delta_k, m_interval must be positive".into()));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("regime window m must be >= 2, got {}", self.m)));
        }
        if self.s_scale < 0.0 || self.s_phi < 0.0 {
            return Err(Error::Config("s_scale and s_phi must be >= 0 (0 = auto)".into()));
        }
        if !(self.nu > 2.0) {
            return Err(Error::Config(format!("nu must exceed 2, got {}", self.nu)));
        }
        if !(self.k_on_frac >= 0.0 && self.k_on_frac <= 1.0) {
            return Err(Error::Config(format!("k_on_frac must be in [0, 1], got {}", self.k_on_frac)));
        }
        Ok(())
    }

    /// Serialized form echoed into checkpoints and reparsed on load.
    pub fn to_lines(&self) -> Vec<String> {
        let an = match self.affinity_norm {
            AffinityNorm::MaxRowSum => "max_row_sum",
            AffinityNorm::SymDegree => "sym_degree",
        };
        vec![
            format!("task={}", self.task.as_str()),
            format!("seed={}", self.seed),
            format!("k_tot={}", self.k_tot),
            format!("batch={}", self.batch),
            format!("f={}", self.f),
            format!("n={}", self.n),
            format!("n_train={}", self.n_train),
            format!("monitor_size={}", self.monitor_size),
            format!("n_eval={}", self.n_eval),
            format!("d={}", self.d),
            format!("l_b={}", self.l_b),
            format!("n_classes={}", self.n_classes),
            format!("d_ssl={}", self.d_ssl),
            format!("d_h={}", self.d_h),
            format!("t_steps={}", self.t_steps),
            format!("beta_min={}", self.beta_min),
            format!("beta_max={}", self.beta_max),
            format!("delta_k={}", self.delta_k),
            format!("m={}", self.m),
            format!("rho_ssl={}", self.rho_ssl),
            format!("nu={}", self.nu),
            format!("s_scale={}", self.s_scale),
            format!("lambda={}", self.lambda),
            format!("s_phi={}", self.s_phi),
            format!("rho_sp={}", self.rho_sp),
            format!("k_on_frac={}", self.k_on_frac),
            format!("m_interval={}", self.m_interval),
            format!("affinity_norm={}", an),
            format!("lr={}", self.lr),
            format!("guidance_enabled={}", self.guidance_enabled),
            format!("adaptive_t_enabled={}", self.adaptive_t_enabled),
            format!("structure_reg_enabled={}", self.structure_reg_enabled),
            format!("s_ref_path={}", self.s_ref_path.clone().unwrap_or_default()),
            format!("ckpt_every={}", self.ckpt_every),
        ]
    }
}
