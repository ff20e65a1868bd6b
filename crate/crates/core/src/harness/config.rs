use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beamform::OptimizerConfig;
use crate::channel::{dbm_to_watts, dbw_to_watts, FadingModel};
use crate::data::PartitionMode;
use crate::diagnostics::LatencyParams;
use crate::error::{Error, Result};
use crate::flcore::round::{SimConfig, Variant};
use crate::flcore::{ArchKind, LocalTrainConfig};
use crate::modem::BitMapping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    FashionMnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding `fashion-mnist/` or `cifar-10-batches-bin/`.
    pub root: Option<PathBuf>,
    /// Test samples used for evaluation (first rows of the test split).
    pub test_samples: usize,
    /// Training samples used for the reported training loss.
    pub train_eval_samples: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::FashionMnist,
            root: None,
            test_samples: 2000,
            train_eval_samples: 2000,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            separation: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseUnit {
    #[serde(rename = "dBm")]
    Dbm,
    #[serde(rename = "dBW")]
    Dbw,
    #[serde(rename = "W")]
    Watt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevel {
    pub value: f64,
    pub unit: NoiseUnit,
}

impl NoiseLevel {
    pub fn watts(&self) -> f64 {
        match self.unit {
            NoiseUnit::Dbm => dbm_to_watts(self.value),
            NoiseUnit::Dbw => dbw_to_watts(self.value),
            NoiseUnit::Watt => self.value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub n_r: usize,
    pub n_t: usize,
    pub device_power_mw: f64,
    pub noise: NoiseLevel,
    /// Cell-edge SNR in dB; when set it overrides `noise` with
    /// `σ² = P0·r^(−β) / 10^(snr/10)`.
    pub snr_db: Option<f64>,
    pub fading: FadingModel,
    pub pathloss_exponent: f64,
    pub radius_m: f64,
    pub min_radius_m: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n_r: 2,
            n_t: 2,
            device_power_mw: 1.0,
            noise: NoiseLevel {
                value: -90.0,
                unit: NoiseUnit::Dbm,
            },
            snr_db: None,
            fading: FadingModel::Rayleigh,
            pathloss_exponent: 2.0,
            radius_m: 1500.0,
            min_radius_m: 50.0,
        }
    }
}

impl ChannelConfig {
    pub fn device_power_w(&self) -> f64 {
        self.device_power_mw * 1e-3
    }

    pub fn noise_watts(&self) -> f64 {
        match self.snr_db {
            Some(snr) => {
                self.device_power_w() * self.radius_m.powf(-self.pathloss_exponent)
                    / 10f64.powf(snr / 10.0)
            }
            None => self.noise.watts(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModemConfig {
    pub order: usize,
    pub mapping: BitMapping,
    pub bits_per_param: u32,
    pub symbol_power: f64,
    pub block_len: usize,
}

impl Default for ModemConfig {
    fn default() -> Self {
        Self {
            order: 64,
            mapping: BitMapping::NaturalBinary,
            bits_per_param: 6,
            symbol_power: 1.0,
            block_len: 7840,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub learn_rate: f64,
    pub steps_per_round: usize,
    pub oracle: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 160,
            learn_rate: 0.05,
            steps_per_round: 5,
            oracle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds for sweeps; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub stop_on_convergence: bool,
    pub devices: usize,
    pub samples_per_device: usize,
    pub variant: Variant,
    pub arch: ArchKind,
    pub partition: PartitionMode,
    pub kernels_orthogonal: bool,
    pub capacity_draws: usize,
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub channel: ChannelConfig,
    pub modem: ModemConfig,
    pub beamform: OptimizerConfig,
    pub train: LocalTrainConfig,
    pub predictor: PredictorConfig,
    pub latency: LatencyParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: Vec::new(),
            rounds: 50,
            stop_on_convergence: false,
            devices: 20,
            samples_per_device: 2000,
            variant: Variant::Proposed,
            arch: ArchKind::Mlp { hidden: 64 },
            partition: PartitionMode::Iid,
            kernels_orthogonal: true,
            capacity_draws: 200,
            output: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            channel: ChannelConfig::default(),
            modem: ModemConfig::default(),
            beamform: OptimizerConfig::default(),
            train: LocalTrainConfig::default(),
            predictor: PredictorConfig::default(),
            latency: LatencyParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML document; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error as E;
        if self.devices == 0 {
            return Err(E::usage("devices", "must be positive"));
        }
        if self.samples_per_device == 0 {
            return Err(E::usage("samples_per_device", "must be positive"));
        }
        if let PartitionMode::NonIid { labels_per_device } = self.partition {
            if labels_per_device == 0 {
                return Err(E::usage("partition.labels_per_device", "must be positive"));
            }
        }
        let ch = &self.channel;
        if ch.n_r == 0 {
            return Err(E::usage("channel.n_r", "must be positive"));
        }
        if ch.n_t == 0 {
            return Err(E::usage("channel.n_t", "must be positive"));
        }
        if !(ch.device_power_mw > 0.0 && ch.device_power_mw.is_finite()) {
            return Err(E::usage("channel.device_power_mw", "must be positive"));
        }
        if !(ch.noise_watts() >= 0.0 && ch.noise_watts().is_finite()) {
            return Err(E::usage("channel.noise", "must give a finite non-negative power"));
        }
        if !(ch.pathloss_exponent >= 0.0) {
            return Err(E::usage("channel.pathloss_exponent", "must be non-negative"));
        }
        if !(ch.min_radius_m > 0.0 && ch.radius_m >= ch.min_radius_m) {
            return Err(E::usage("channel.radius_m", "need 0 < min_radius_m <= radius_m"));
        }
        if let FadingModel::Rician { k_factor } = ch.fading {
            if !(k_factor >= 0.0 && k_factor.is_finite()) {
                return Err(E::usage("channel.fading.k_factor", "must be non-negative"));
            }
        }
        let m = &self.modem;
        if m.order < 4 || !m.order.is_power_of_two() || !m.order.trailing_zeros().is_multiple_of(2) {
            return Err(E::usage("modem.order", "must be a square power of two (4, 16, 64, ...)"));
        }
        if m.bits_per_param == 0 || m.bits_per_param > 32 {
            return Err(E::usage("modem.bits_per_param", "must lie in 1..=32"));
        }
        if m.block_len == 0 {
            return Err(E::usage("modem.block_len", "must be positive"));
        }
        if !(m.symbol_power > 0.0) {
            return Err(E::usage("modem.symbol_power", "must be positive"));
        }
        if self.dataset.test_samples == 0 {
            return Err(E::usage("dataset.test_samples", "must be positive"));
        }
        if self.predictor.hidden == 0 {
            return Err(E::usage("predictor.hidden", "must be positive"));
        }
        if !(self.predictor.learn_rate >= 0.0 && self.predictor.learn_rate.is_finite()) {
            return Err(E::usage("predictor.learn_rate", "must be non-negative"));
        }
        self.beamform.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn sim_config(&self, variant: Variant, seed: u64) -> SimConfig {
        SimConfig {
            variant,
            devices: self.devices,
            n_r: self.channel.n_r,
            n_t: self.channel.n_t,
            device_power: self.channel.device_power_w(),
            noise_var: self.channel.noise_watts(),
            fading: self.channel.fading,
            pathloss_exponent: self.channel.pathloss_exponent,
            radius: self.channel.radius_m,
            min_radius: self.channel.min_radius_m,
            qam_order: self.modem.order,
            mapping: self.modem.mapping,
            bits_per_param: self.modem.bits_per_param,
            symbol_power: self.modem.symbol_power,
            block_len: self.modem.block_len,
            beam: self.beamform,
            train: self.train,
            predictor_hidden: self.predictor.hidden,
            predictor_rate: self.predictor.learn_rate,
            predictor_steps: self.predictor.steps_per_round,
            oracle_prediction: self.predictor.oracle,
            kernels_orthogonal: self.kernels_orthogonal,
            latency: self.latency,
            capacity_draws: self.capacity_draws,
            seed,
        }
    }
}
