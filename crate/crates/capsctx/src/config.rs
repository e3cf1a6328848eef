//! Model/run configuration: defaults, validation, and the flat
//! `key = value` config-file format (unknown keys rejected).

use std::fmt;
use std::path::Path;

use crate::error::{CapsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingAxis {
    /// Normalize couplings over input capsules k (sum over k is 1 per j).
    K,
    /// Normalize over decision capsules j, the cited-baseline convention.
    J,
}

impl fmt::Display for RoutingAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingAxis::K => write!(f, "k"),
            RoutingAxis::J => write!(f, "j"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrfShare {
    /// One J x J pairwise map shared across all (k, i).
    All,
    /// A separate J x J map per element index i.
    PerI,
}

impl fmt::Display for CrfShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrfShare::All => write!(f, "all"),
            CrfShare::PerI => write!(f, "per-i"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrOrder {
    /// Row-major grid order of capsule index k.
    Forward,
    /// Reversed order, for sensitivity studies.
    Reversed,
}

impl fmt::Display for CorrOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrOrder::Forward => write!(f, "forward"),
            CorrOrder::Reversed => write!(f, "reversed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    // Geometry
    pub input_size: usize,
    pub input_channels: usize,
    pub n: usize,
    pub z: usize,
    pub i_p: usize,
    pub i_d: usize,
    pub j: usize,
    // Stem
    pub conv1_kernel: usize,
    pub conv1_channels: usize,
    pub conv1_stride: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    // Routing init
    pub f: usize,
    pub epsilon: f64,
    // Routing
    pub routing_iters: usize,
    pub routing_axis: RoutingAxis,
    // CRF
    pub crf_iters: usize,
    pub crf_share: CrfShare,
    // Correlation
    pub lambda: f64,
    pub corr_order: CorrOrder,
    // Ablation flags
    pub rw: bool,
    pub crf: bool,
    pub corr: bool,
    // Training
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub m_pos: f64,
    pub m_neg: f64,
    pub loss_lambda_down: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 36,
            input_channels: 1,
            n: 6,
            z: 64,
            i_p: 8,
            i_d: 16,
            j: 8,
            conv1_kernel: 9,
            conv1_channels: 32,
            conv1_stride: 1,
            conv2_kernel: 8,
            conv2_stride: 4,
            f: 5,
            epsilon: 1e-4,
            routing_iters: 3,
            routing_axis: RoutingAxis::K,
            crf_iters: 3,
            crf_share: CrfShare::All,
            lambda: 0.5,
            corr_order: CorrOrder::Forward,
            rw: true,
            crf: true,
            corr: true,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            m_pos: 0.9,
            m_neg: 0.1,
            loss_lambda_down: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.z / self.i_p
    }

    pub fn k(&self) -> usize {
        self.n * self.n * self.d()
    }

    /// Spatial extent after one valid-padding conv.
    fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
        if size < kernel || stride == 0 {
            return None;
        }
        Some((size - kernel) / stride + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f % 2 == 0 {
            return Err(CapsError::Config("f must be odd".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(CapsError::Config("epsilon must satisfy 0 < epsilon << 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CapsError::Config("lambda must lie in [0, 1]".into()));
        }
        if self.z % self.i_p != 0 {
            return Err(CapsError::Config(format!(
                "z ({}) must be divisible by i_p ({})",
                self.z, self.i_p
            )));
        }
        if self.routing_iters == 0 {
            return Err(CapsError::Config("routing_iters must be >= 1".into()));
        }
        if self.crf_iters == 0 {
            return Err(CapsError::Config("crf_iters must be >= 1".into()));
        }
        if self.j == 0 || self.i_p == 0 || self.i_d == 0 {
            return Err(CapsError::Config("j, i_p, i_d must be positive".into()));
        }
        let a = Self::conv_out(self.input_size, self.conv1_kernel, self.conv1_stride);
        let b = a.and_then(|a| Self::conv_out(a, self.conv2_kernel, self.conv2_stride));
        match b {
            Some(n) if n == self.n => Ok(()),
            other => Err(CapsError::Config(format!(
                "stem arithmetic: input {} with conv {}x{} s{} then {}x{} s{} yields {:?}, expected n = {}",
                self.input_size,
                self.conv1_kernel,
                self.conv1_kernel,
                self.conv1_stride,
                self.conv2_kernel,
                self.conv2_kernel,
                self.conv2_stride,
                other,
                self.n
            ))),
        }
    }

    pub fn print_defaults() -> String {
        Self::default().dump()
    }

    pub fn dump(&self) -> String {
        let c = self;
        format!(
            "input_size = {}\ninput_channels = {}\nn = {}\nz = {}\ni_p = {}\ni_d = {}\nj = {}\n\
             conv1_kernel = {}\nconv1_channels = {}\nconv1_stride = {}\nconv2_kernel = {}\nconv2_stride = {}\n\
             f = {}\nepsilon = {}\nrouting_iters = {}\nrouting_axis = {}\ncrf_iters = {}\ncrf_share = {}\n\
             lambda = {}\ncorr_order = {}\nrw = {}\ncrf = {}\ncorr = {}\n\
             lr = {}\nbatch_size = {}\nepochs = {}\nseed = {}\nm_pos = {}\nm_neg = {}\nloss_lambda_down = {}\n",
            c.input_size, c.input_channels, c.n, c.z, c.i_p, c.i_d, c.j,
            c.conv1_kernel, c.conv1_channels, c.conv1_stride, c.conv2_kernel, c.conv2_stride,
            c.f, c.epsilon, c.routing_iters, c.routing_axis, c.crf_iters, c.crf_share,
            c.lambda, c.corr_order, c.rw, c.crf, c.corr,
            c.lr, c.batch_size, c.epochs, c.seed, c.m_pos, c.m_neg, c.loss_lambda_down
        )
    }

    pub fn from_str_cfg(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CapsError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set_key(key, value).map_err(|e| match e {
                CapsError::Config(m) => CapsError::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ModelConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_str_cfg(&text)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn p_usize(k: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| CapsError::Config(format!("{k}: expected integer, got `{v}`")))
        }
        fn p_u64(k: &str, v: &str) -> Result<u64> {
            v.parse().map_err(|_| CapsError::Config(format!("{k}: expected integer, got `{v}`")))
        }
        fn p_f64(k: &str, v: &str) -> Result<f64> {
            v.parse().map_err(|_| CapsError::Config(format!("{k}: expected real, got `{v}`")))
        }
        fn p_bool(k: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(CapsError::Config(format!("{k}: expected bool, got `{v}`"))),
            }
        }
        match key {
            "input_size" => self.input_size = p_usize(key, value)?,
            "input_channels" => self.input_channels = p_usize(key, value)?,
            "n" => self.n = p_usize(key, value)?,
            "z" => self.z = p_usize(key, value)?,
            "i_p" => self.i_p = p_usize(key, value)?,
            "i_d" => self.i_d = p_usize(key, value)?,
            "j" => self.j = p_usize(key, value)?,
            "conv1_kernel" => self.conv1_kernel = p_usize(key, value)?,
            "conv1_channels" => self.conv1_channels = p_usize(key, value)?,
            "conv1_stride" => self.conv1_stride = p_usize(key, value)?,
            "conv2_kernel" => self.conv2_kernel = p_usize(key, value)?,
            "conv2_stride" => self.conv2_stride = p_usize(key, value)?,
            "f" => self.f = p_usize(key, value)?,
            "epsilon" => self.epsilon = p_f64(key, value)?,
            "routing_iters" => self.routing_iters = p_usize(key, value)?,
            "routing_axis" => {
                self.routing_axis = match value {
                    "k" => RoutingAxis::K,
                    "j" => RoutingAxis::J,
                    _ => return Err(CapsError::Config(format!("routing_axis: expected k or j, got `{value}`"))),
                }
            }
            "crf_iters" => self.crf_iters = p_usize(key, value)?,
            "crf_share" => {
                self.crf_share = match value {
                    "all" => CrfShare::All,
                    "per-i" => CrfShare::PerI,
                    _ => return Err(CapsError::Config(format!("crf_share: expected all or per-i, got `{value}`"))),
                }
            }
            "lambda" => self.lambda = p_f64(key, value)?,
            "corr_order" => {
                self.corr_order = match value {
                    "forward" => CorrOrder::Forward,
                    "reversed" => CorrOrder::Reversed,
                    _ => return Err(CapsError::Config(format!("corr_order: expected forward or reversed, got `{value}`"))),
                }
            }
            "rw" => self.rw = p_bool(key, value)?,
            "crf" => self.crf = p_bool(key, value)?,
            "corr" => self.corr = p_bool(key, value)?,
            "lr" => self.lr = p_f64(key, value)?,
            "batch_size" => self.batch_size = p_usize(key, value)?,
            "epochs" => self.epochs = p_usize(key, value)?,
            "seed" => self.seed = p_u64(key, value)?,
            "m_pos" => self.m_pos = p_f64(key, value)?,
            "m_neg" => self.m_neg = p_f64(key, value)?,
            "loss_lambda_down" => self.loss_lambda_down = p_f64(key, value)?,
            _ => return Err(CapsError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}
