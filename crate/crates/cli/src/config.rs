//! Run configuration: a TOML document, optionally overridden by command-line flags.
//!
//! ```toml
//! arch = "mlp500"          # or `widths = [784, 500, 10]`, or a `[[layers]]` list
//! seed = 1
//! epochs = 30
//! batch_size = 256
//! out_dir = "runs/mlp500"
//!
//! [policy]
//! mode = "adaptive"        # "adaptive" | "fixed" | "dense"
//! tau = 0.15
//!
//! [integrator]
//! kind = "adam"            # "adam" | "euler"
//! lr = 0.001
//!
//! [data]
//! source = "mnist"         # "mnist" | "synthetic"
//! dir = "/path/to/mnist"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dlrt_core::conv::lenet5_preset;
use dlrt_core::dlrt::TruncationPolicy;
use dlrt_core::netcore::{LayerSpec, NetworkSpec};
use dlrt_core::optim::IntegratorKind;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "DLRT_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name: `mlp500`, `mlp784`, `lenet5`, or `mlp<width>` for any width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    /// Fully connected widths, input first; hidden layers use ReLU, the head softmax.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Explicit layer list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Steps between progress log lines.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Worker threads for validation and test evaluation.
    #[serde(default = "default_threads")]
    pub eval_threads: usize,
}

fn default_epochs() -> usize {
    250
}

fn default_batch_size() -> usize {
    256
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_log_every() -> usize {
    50
}

fn default_threads() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Some("mlp500".into()),
            widths: None,
            layers: None,
            policy: None,
            integrator: IntegratorConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            data: DataConfig::default(),
            out_dir: default_out_dir(),
            log_every: default_log_every(),
            eval_threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyConfig {
    Adaptive {
        tau: f64,
        /// Switch to fixed-rank steps once this many epochs are complete.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        freeze_after_epoch: Option<usize>,
    },
    Fixed {
        /// Ranks of the low-rank layers in layer order; preset defaults when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ranks: Option<Vec<usize>>,
    },
    /// Every layer dense, trained with plain integrator steps.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Euler,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    /// Step size; 1e-3 for Adam and 0.2 for Euler when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Multiplies the step size after every epoch.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_decay() -> f64 {
    1.0
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            kind: default_kind(),
            lr: None,
            lr_decay: default_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl IntegratorConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.kind {
            OptimizerKind::Euler => IntegratorKind::DEFAULT_EULER_LR,
            OptimizerKind::Adam => IntegratorKind::DEFAULT_ADAM_LR,
        })
    }

    /// Integrator for the zero-based `epoch`, with the decayed step size.
    pub fn at_epoch(&self, epoch: usize) -> IntegratorKind {
        let lr = self.base_lr() * self.lr_decay.powi(epoch as i32);
        match self.kind {
            OptimizerKind::Euler => IntegratorKind::Euler { lr },
            OptimizerKind::Adam => IntegratorKind::Adam { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    /// Seeded Gaussian class clusters of MNIST shape, for smoke runs.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_source")]
    pub source: DataSource,
    /// MNIST directory; falls back to the `DLRT_DATA_DIR` environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_val")]
    pub val: usize,
    #[serde(default = "default_val")]
    pub test: usize,
}

fn default_source() -> DataSource {
    DataSource::Mnist
}

fn default_train() -> usize {
    50_000
}

fn default_val() -> usize {
    10_000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: default_source(), dir: None, train: default_train(), val: default_val(), test: default_val() }
    }
}

impl DataConfig {
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::Config(format!("no MNIST directory: set data.dir, --data-dir or {DATA_DIR_ENV}")))
    }
}

/// Command-line values that replace config entries when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub fixed_ranks: Option<Vec<usize>>,
    pub dense: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub arch: Option<String>,
    pub freeze_after_epoch: Option<usize>,
}

/// Network spec of a named preset.
pub fn preset(name: &str) -> Result<NetworkSpec> {
    match name {
        "lenet5" => Ok(lenet5_preset(true)),
        _ => {
            let width = name
                .strip_prefix("mlp")
                .and_then(|w| w.parse::<usize>().ok())
                .filter(|&w| w > 0)
                .ok_or_else(|| CliError::Config(format!("unknown architecture preset {name:?}")))?;
            Ok(NetworkSpec::mlp(&[784, width, width, width, width, 10], true))
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|source| CliError::Toml { path: path.to_path_buf(), source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data_dir {
            self.data.dir = Some(d.clone());
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(arch) = &o.arch {
            self.arch = Some(arch.clone());
            self.widths = None;
            self.layers = None;
        }
        let freeze = o.freeze_after_epoch.or(match &self.policy {
            Some(PolicyConfig::Adaptive { freeze_after_epoch, .. }) => *freeze_after_epoch,
            _ => None,
        });
        if let Some(tau) = o.tau {
            self.policy = Some(PolicyConfig::Adaptive { tau, freeze_after_epoch: freeze });
        } else if let (Some(f), Some(PolicyConfig::Adaptive { freeze_after_epoch, .. })) =
            (o.freeze_after_epoch, self.policy.as_mut())
        {
            *freeze_after_epoch = Some(f);
        }
        if let Some(ranks) = &o.fixed_ranks {
            self.policy = Some(PolicyConfig::Fixed { ranks: Some(ranks.clone()) });
        }
        if o.dense {
            self.policy = Some(PolicyConfig::Dense);
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.batch_size = b;
        }
        if let Some(k) = o.optimizer {
            if k != self.integrator.kind {
                self.integrator.lr = None;
            }
            self.integrator.kind = k;
        }
        if let Some(lr) = o.lr {
            self.integrator.lr = Some(lr);
        }
        if let Some(d) = o.lr_decay {
            self.integrator.lr_decay = d;
        }
    }

    pub fn policy(&self) -> Result<&PolicyConfig> {
        self.policy
            .as_ref()
            .ok_or_else(|| CliError::Config("a policy is required: set [policy], --tau, --fixed-ranks or --dense".into()))
    }

    /// Architecture with low-rank flags and initial ranks set by the policy.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut spec = match (&self.arch, &self.widths, &self.layers) {
            (Some(a), None, None) => preset(a)?,
            (None, Some(w), None) => {
                if w.len() < 2 {
                    return Err(CliError::Config("widths needs at least two entries".into()));
                }
                NetworkSpec::mlp(w, true)
            }
            (None, None, Some(l)) => NetworkSpec { layers: l.clone() },
            _ => return Err(CliError::Config("set exactly one of arch, widths, layers".into())),
        };
        match self.policy()? {
            PolicyConfig::Dense => {
                for l in &mut spec.layers {
                    l.set_low_rank(false, None);
                }
            }
            PolicyConfig::Fixed { ranks: Some(ranks) } => spec = spec.with_ranks(ranks)?,
            _ => {}
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Step policy for the zero-based `epoch`.
    pub fn step_policy(&self, epoch: usize) -> Result<TruncationPolicy> {
        Ok(match *self.policy()? {
            PolicyConfig::Adaptive { tau, freeze_after_epoch } => match freeze_after_epoch {
                Some(f) if epoch >= f => TruncationPolicy::Fixed,
                _ => TruncationPolicy::Adaptive { tau },
            },
            _ => TruncationPolicy::Fixed,
        })
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        let spec = self.network_spec()?;
        if let PolicyConfig::Adaptive { tau, .. } = *self.policy()? {
            TruncationPolicy::Adaptive { tau }.validate()?;
        }
        if let PolicyConfig::Fixed { ranks: None } = self.policy()? {
            if spec.layers.iter().all(|l| !l.is_low_rank()) {
                return Err(CliError::Config("fixed policy on an architecture without low-rank layers".into()));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_threads == 0 {
            return Err(CliError::Config("epochs, batch_size and eval_threads must be positive".into()));
        }
        if !(self.integrator.lr_decay > 0.0 && self.integrator.lr_decay <= 1.0) {
            return Err(CliError::Config(format!("lr_decay must lie in (0, 1], got {}", self.integrator.lr_decay)));
        }
        self.integrator.at_epoch(0).validate()?;
        if spec.input_width() != 784 || spec.output_width() != 10 {
            return Err(CliError::Config(format!(
                "architecture maps {} inputs to {} outputs; MNIST needs 784 -> 10",
                spec.input_width(),
                spec.output_width()
            )));
        }
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(CliError::Config("split sizes must be positive".into()));
        }
        Ok(())
    }
}
