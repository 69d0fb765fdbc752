//! Experiment configuration. Every number defaults to the reference
//! reverse-Duffing setting, so an empty file is a complete experiment.

use kkl::dynamics::{SaturationSpec, SystemModel, DEFAULT_BLOWUP_BOUND};
use kkl::learning::{digest_json, AutoencoderConfig, OmegaConditioning, TrainConfig, ZScaling};
use kkl::linfilter::{omega_grid, Spacing};
use kkl::neural::Activation;
use kkl::observer::Interpolation;
use kkl::sampling::Sampler;
use kkl::tuning::{JacobianNorm, TestGridConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SYSTEM_NAMES: [&str; 3] = ["rev-duffing", "van-der-pol", "van-der-pol-sat"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub sampler: SamplerSection,
    pub omega_grid: OmegaGridSection,
    pub integrator: IntegratorSection,
    pub network: NetworkSection,
    pub trainer: TrainerSection,
    pub tuning: TuningSection,
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    pub saturation: SaturationSection,
    pub blowup_bound: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self { name: "rev-duffing".into(), saturation: SaturationSection::default(), blowup_bound: DEFAULT_BLOWUP_BOUND }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaturationSection {
    pub r: f64,
    pub d: f64,
}

impl Default for SaturationSection {
    fn default() -> Self {
        let s = SaturationSpec::<f64>::default();
        Self { r: s.r, d: s.d }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Points per tuning frequency.
    pub n: usize,
    pub seed: u64,
    pub method: Sampler,
    pub shared_points: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { n: 5000, seed: 0, method: Sampler::Lhs, shared_points: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaGridSection {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub spacing: Spacing,
}

impl Default for OmegaGridSection {
    fn default() -> Self {
        Self { min: 0.03, max: 1.0, count: 100, spacing: Spacing::Log }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSection {
    /// System default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub omega_conditioning: OmegaConditioning,
    pub z_scaling: ZScaling,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: vec![50; 5],
            activation: Activation::Silu,
            omega_conditioning: OmegaConditioning::Log10,
            z_scaling: ZScaling::Omega,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerMode {
    #[default]
    Supervised,
    Autoencoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub mode: TrainerMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_patience: Option<usize>,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub seed: u64,
    pub autoencoder: AutoencoderSection,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: TrainerMode::Supervised,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            val_fraction: t.val_fraction,
            patience: t.patience,
            lr_patience: t.lr_patience,
            lr_decay: t.lr_decay,
            min_lr: t.min_lr,
            seed: t.seed,
            autoencoder: AutoencoderSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    /// Total state samples (no per-frequency split).
    pub n: usize,
    pub lambda_weight: f64,
    pub optimize_d: bool,
    /// Frequency of the Bessel design `D` starts from.
    pub omega_init: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pole_lr: Option<f64>,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self { n: 70_000, lambda_weight: 0.1, optimize_d: true, omega_init: 0.2, pole_lr: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub n: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub jacobian_norm: JacobianNorm,
}

impl Default for TuningSection {
    fn default() -> Self {
        let g = TestGridConfig::default();
        Self { n: g.n, sampler: g.sampler, seed: g.seed, jacobian_norm: g.jacobian_norm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Frequencies evaluated; system preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omegas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    /// Initial states of the test trajectories.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<Vec<Vec<f64>>>,
    pub duration: f64,
    pub noise_seed: u64,
    pub interpolation: Interpolation,
    pub start_on_manifold: bool,
    /// Cells per axis of the error heatmap.
    pub heatmap_side: usize,
    /// `10/λ_min` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction_duration: Option<f64>,
    pub contraction_window: [f64; 2],
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            omegas: None,
            sigmas: None,
            trajectories: None,
            duration: 50.0,
            noise_seed: 0,
            interpolation: Interpolation::Linear,
            start_on_manifold: false,
            heatmap_side: 50,
            contraction_duration: None,
            contraction_window: [0.5, 1.0],
        }
    }
}

fn field(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

fn positive(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be positive (got {v})")))
    }
}

fn nonzero(path: &str, v: usize) -> Result<(), CliError> {
    if v > 0 {
        Ok(())
    } else {
        Err(field(path, "must be positive"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampler.seed = seed;
        self.trainer.seed = seed;
        self.tuning.seed = seed;
        self.evaluation.noise_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !SYSTEM_NAMES.contains(&self.system.name.as_str()) {
            return Err(field(
                "system.name",
                format!("unknown system {:?} (expected one of {})", self.system.name, SYSTEM_NAMES.join(", ")),
            ));
        }
        positive("system.saturation.r", self.system.saturation.r)?;
        positive("system.saturation.d", self.system.saturation.d)?;
        positive("system.blowup_bound", self.system.blowup_bound)?;
        nonzero("sampler.n", self.sampler.n)?;
        positive("omega_grid.min", self.omega_grid.min)?;
        positive("omega_grid.max", self.omega_grid.max)?;
        nonzero("omega_grid.count", self.omega_grid.count)?;
        if self.omega_grid.count > 1 && !(self.omega_grid.min < self.omega_grid.max) {
            return Err(field("omega_grid.max", "must exceed omega_grid.min when count > 1"));
        }
        if let Some(dt) = self.integrator.dt {
            positive("integrator.dt", dt)?;
        }
        if self.network.hidden.is_empty() {
            return Err(field("network.hidden", "needs at least one hidden layer"));
        }
        for (i, &h) in self.network.hidden.iter().enumerate() {
            nonzero(&format!("network.hidden[{i}]"), h)?;
        }
        let t = &self.trainer;
        positive("trainer.lr", t.lr)?;
        if !(0.0..1.0).contains(&t.beta1) {
            return Err(field("trainer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return Err(field("trainer.beta2", "must lie in [0, 1)"));
        }
        positive("trainer.eps", t.eps)?;
        nonzero("trainer.batch_size", t.batch_size)?;
        nonzero("trainer.max_epochs", t.max_epochs)?;
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(field("trainer.val_fraction", "must lie in [0, 1)"));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(field("trainer.lr_decay", "must lie in (0, 1]"));
        }
        positive("trainer.min_lr", t.min_lr)?;
        let ae = &t.autoencoder;
        nonzero("trainer.autoencoder.n", ae.n)?;
        positive("trainer.autoencoder.lambda_weight", ae.lambda_weight)?;
        positive("trainer.autoencoder.omega_init", ae.omega_init)?;
        if let Some(lr) = ae.pole_lr {
            positive("trainer.autoencoder.pole_lr", lr)?;
        }
        nonzero("tuning.n", self.tuning.n)?;
        let e = &self.evaluation;
        for (i, &w) in e.omegas.iter().flatten().enumerate() {
            positive(&format!("evaluation.omegas[{i}]"), w)?;
        }
        for (i, &s) in e.sigmas.iter().flatten().enumerate() {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(field(&format!("evaluation.sigmas[{i}]"), format!("must be non-negative (got {s})")));
            }
        }
        for (i, x0) in e.trajectories.iter().flatten().enumerate() {
            if x0.len() != 2 {
                return Err(field(&format!("evaluation.trajectories[{i}]"), format!("needs 2 coordinates, got {}", x0.len())));
            }
        }
        positive("evaluation.duration", e.duration)?;
        nonzero("evaluation.heatmap_side", e.heatmap_side)?;
        if let Some(d) = e.contraction_duration {
            positive("evaluation.contraction_duration", d)?;
        }
        let [w0, w1] = e.contraction_window;
        if !(0.0 <= w0 && w0 < w1 && w1 <= 1.0) {
            return Err(field("evaluation.contraction_window", "needs 0 <= start < end <= 1"));
        }
        Ok(())
    }

    pub fn system_model(&self) -> Result<SystemModel<f64>, CliError> {
        let sat = SaturationSpec::new(self.system.saturation.r, self.system.saturation.d)
            .map_err(|e| field("system.saturation", e))?;
        SystemModel::by_name(&self.system.name, sat).ok_or_else(|| field("system.name", format!("unknown system {:?}", self.system.name)))
    }

    pub fn dt(&self, system: &SystemModel<f64>) -> f64 {
        self.integrator.dt.unwrap_or_else(|| system.default_dt())
    }

    pub fn omegas(&self) -> Result<Vec<f64>, CliError> {
        let g = &self.omega_grid;
        omega_grid(g.min, g.max, g.count, g.spacing).map_err(|e| field("omega_grid", e))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            hidden: self.network.hidden.clone(),
            activation: self.network.activation,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            val_fraction: t.val_fraction,
            patience: t.patience,
            lr_patience: t.lr_patience,
            lr_decay: t.lr_decay,
            min_lr: t.min_lr,
            omega_conditioning: self.network.omega_conditioning,
            z_scaling: self.network.z_scaling,
            seed: t.seed,
        }
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        let ae = &self.trainer.autoencoder;
        AutoencoderConfig {
            train: self.train_config(),
            lambda_weight: ae.lambda_weight,
            optimize_d: ae.optimize_d,
            pole_lr: ae.pole_lr,
        }
    }

    pub fn test_grid(&self) -> TestGridConfig {
        TestGridConfig {
            n: self.tuning.n,
            sampler: self.tuning.sampler,
            seed: self.tuning.seed,
            dt: self.integrator.dt,
            jacobian_norm: self.tuning.jacobian_norm,
        }
    }

    pub fn eval_omegas(&self) -> Vec<f64> {
        self.evaluation.omegas.clone().unwrap_or_else(|| match self.system.name.as_str() {
            "rev-duffing" => vec![0.03, 0.15, 1.0],
            _ => vec![0.03, 0.2, 1.0],
        })
    }

    pub fn eval_sigmas(&self) -> Vec<f64> {
        self.evaluation.sigmas.clone().unwrap_or_else(|| match self.system.name.as_str() {
            "rev-duffing" => vec![0.5],
            _ => vec![0.25],
        })
    }

    pub fn eval_trajectories(&self) -> Vec<Vec<f64>> {
        self.evaluation.trajectories.clone().unwrap_or_else(|| match self.system.name.as_str() {
            "rev-duffing" => vec![vec![0.6, 0.6]],
            _ => vec![vec![0.1, 0.1]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults_match_reference_setting() {
        let c = ExperimentConfig::default();
        assert_eq!(c.omegas().unwrap().len(), 100);
        assert_eq!(c.sampler.n, 5000);
        assert_eq!(c.tuning.n, 10_000);
        assert_eq!(c.network.hidden, vec![50; 5]);
        assert_eq!(c.dt(&c.system_model().unwrap()), 1e-3);
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = ExperimentConfig::default();
        c.integrator.dt = Some(0.005);
        c.evaluation.sigmas = Some(vec![0.0, 0.25]);
        c.trainer.autoencoder.pole_lr = Some(1e-4);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn unknown_keys_and_names_carry_the_path() {
        let err = ExperimentConfig::from_toml("[system]\nname = \"lorenz\"").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("system.name"), "{err}");
        let err = ExperimentConfig::from_toml("[network]\nhidden = [50, 0]").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("network.hidden[1]"), "{err}");
        assert!(ExperimentConfig::from_toml("[sampler]\nsize = 3").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.clone().with_seed(3);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ExperimentConfig::default().digest());
    }
}
