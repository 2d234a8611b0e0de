//! Experiment orchestration: training, evaluation, ablation grids, gradient
//! checks and plots. Each run writes into `<out_dir>/<name>/`.

mod ablate;
mod eval;
mod gradcheck;
mod plot;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablate::{
    ablate, run_table2, table2_configs, AblationGrid, AblationResults, AblationRow, Table2Results, Table2Row,
    TABLE2_ROWS,
};
pub use eval::{evaluate, prompt_hash, verify_same_prompts, EvalOutput};
pub use gradcheck::{gradcheck, gradcheck_scaled, Component, GradcheckReport, REL_TOLERANCE, STEP};
pub use plot::{bar_chart_svg, line_chart_svg, plot_ablation, plot_run, Series};
pub use train::{train, EpochMetrics, TrainOutcome};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::sgpm::Estimator;
use crate::zoomloss::LossConfig;

/// Gate temperature, optionally annealed linearly from `start` to `end`
/// across the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 1.0,
        }
    }
}

impl TemperatureSchedule {
    pub fn constant(t: f64) -> Self {
        Self { start: t, end: t }
    }

    /// Temperature for 0-based `epoch` out of `epochs`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let f = epoch as f64 / (epochs - 1) as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches whose gradients are summed before one optimiser step.
    pub grad_accumulation: usize,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Leading test samples (by id) scored after every epoch.
    pub val_samples: usize,
    /// Optional cap on training samples, taken in id order.
    pub max_train_samples: Option<usize>,
    pub threshold: f64,
    pub out_dir: PathBuf,
    pub estimator: Estimator,
    pub gate_temperature: TemperatureSchedule,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            lr: 8e-4,
            epochs: 40,
            batch_size: 2,
            grad_accumulation: 1,
            train_manifest: "data/train.json".into(),
            test_manifest: "data/test.json".into(),
            val_samples: 8,
            max_train_samples: None,
            threshold: 0.5,
            out_dir: "runs".into(),
            estimator: Estimator::Soft,
            gate_temperature: TemperatureSchedule::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config(
                "epochs, batch_size and grad_accumulation must be at least 1".into(),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        let t = self.gate_temperature;
        if !(t.start > 0.0 && t.end > 0.0) {
            return Err(Error::Config("gate temperatures must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Standard file names inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn config_echo(&self) -> PathBuf {
        self.dir.join("config.echo")
    }
    pub fn checkpoint_bin(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn checkpoint_index(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn gates(&self) -> PathBuf {
        self.dir.join("gates.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.dir.join("plots")
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SgpmPosition;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.encoder.sgpm_layers = None;
        cfg.model.encoder.sgpm_position = SgpmPosition::Both;
        cfg.loss = LossConfig::dice_bce();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("lr = 0.01\n[model.encoder]\nsgpm_layers = \"2-3\"\nsgpm_position = \"c\"\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.model.encoder.gate_count(), 4);
        assert!(RunConfig::from_toml("learning_rate = 1").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-3;
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schedule_interpolates() {
        let s = TemperatureSchedule { start: 1.0, end: 0.5 };
        assert_eq!(s.at(0, 5), 1.0);
        assert_eq!(s.at(4, 5), 0.5);
        assert_eq!(s.at(0, 1), 1.0);
    }
}
