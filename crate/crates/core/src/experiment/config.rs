use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClientProfile, FeatureRange, NUM_FEATURES, NUM_TARGETS};
use crate::energy::EnergyModel;
use crate::fed::FederationConfig;
use crate::model::{Architecture, ModelSpec};
use crate::sustainability::Exponents;

use super::ExperimentError;

pub const OUTPUT_DIR_ENV: &str = "FEDTRAFFIC_OUTPUT_DIR";

/// One simulated base station: a synthetic profile or a CSV trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSource {
    /// Defaults to the profile name or the CSV file stem.
    pub name: Option<String>,
    /// `ElBorn-like`, `LesCorts-like`, `PobleSec-like` or `custom`.
    pub profile: Option<String>,
    /// Synthetic length; defaults to the profile's real trace length.
    pub samples: Option<usize>,
    /// `[min, max]` per feature, required for `custom` profiles.
    pub ranges: Option<Vec<[f64; 2]>>,
    /// Relative paths resolve against the config file's directory.
    pub csv: Option<PathBuf>,
}

impl ClientSource {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if let Some(p) = &self.profile {
            return ClientProfile::preset(p).map(|p| p.name).unwrap_or_else(|_| p.clone());
        }
        self.csv
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "client".into())
    }

    /// The synthetic profile this source describes, if any.
    pub fn synthetic_profile(&self) -> Option<Result<ClientProfile, String>> {
        let p = self.profile.as_ref()?;
        if !p.eq_ignore_ascii_case("custom") {
            return Some(ClientProfile::preset(p).map_err(|e| e.to_string()));
        }
        let Some(ranges) = &self.ranges else {
            return Some(Err("custom profile needs `ranges`".into()));
        };
        if ranges.len() != NUM_FEATURES {
            return Some(Err(format!("custom profile needs {NUM_FEATURES} ranges, got {}", ranges.len())));
        }
        let ranges = std::array::from_fn(|i| FeatureRange {
            min: ranges[i][0],
            max: ranges[i][1],
        });
        Some(ClientProfile::custom(self.display_name(), ranges, 0).map_err(|e| e.to_string()))
    }
}

/// Architecture-independent model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffnn_layers: usize,
    pub lstm_fc_head: bool,
    pub positional_encoding: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let d = ModelSpec::default();
        Self {
            hidden: d.hidden,
            conv_channels: d.conv_channels,
            conv_kernel: d.conv_kernel,
            blocks: d.blocks,
            heads: d.heads,
            ffnn_layers: d.ffnn_layers,
            lstm_fc_head: d.lstm_fc_head,
            positional_encoding: d.positional_encoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds synthetic data (offset per client), model initialisation and participant selection.
    pub seed: u64,
    pub window: usize,
    /// Architecture names, or `["all"]`.
    pub models: Vec<String>,
    pub output_dir: PathBuf,
    /// Train models on the rayon pool instead of one after another.
    pub concurrent_models: bool,
    /// Test windows used to measure inference energy.
    pub inference_samples: usize,
    /// Optional g CO₂ per kWh for the report.
    pub grid_intensity_g_per_kwh: Option<f64>,
    pub clients: Vec<ClientSource>,
    pub model: ModelOptions,
    /// Its `seed` is replaced by the top-level seed.
    pub federation: FederationConfig,
    pub energy: EnergyModel,
    pub exponents: Exponents,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window: 10,
            models: vec!["all".into()],
            output_dir: PathBuf::from("results"),
            concurrent_models: false,
            inference_samples: 1000,
            grid_intensity_g_per_kwh: None,
            clients: Vec::new(),
            model: ModelOptions::default(),
            federation: FederationConfig::default(),
            energy: EnergyModel::default(),
            exponents: Exponents::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses, applies the output-directory override, resolves CSV paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = toml::from_str(&text).map_err(|e| ExperimentError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut config.clients {
            if let Some(csv) = &mut c.csv {
                if csv.is_relative() {
                    *csv = base.join(&*csv);
                }
            }
        }
        config.apply_env();
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn architectures(&self) -> Result<Vec<Architecture>, String> {
        if self.models.iter().any(|m| m.eq_ignore_ascii_case("all")) {
            return Ok(Architecture::ALL.to_vec());
        }
        self.models
            .iter()
            .map(|m| m.parse::<Architecture>().map_err(|e| e.to_string()))
            .collect()
    }

    pub fn spec(&self, architecture: Architecture) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            architecture,
            input_dim: NUM_FEATURES,
            output_dim: NUM_TARGETS,
            window: self.window,
            hidden: m.hidden,
            conv_channels: m.conv_channels,
            conv_kernel: m.conv_kernel,
            blocks: m.blocks,
            heads: m.heads,
            ffnn_layers: m.ffnn_layers,
            lstm_fc_head: m.lstm_fc_head,
            positional_encoding: m.positional_encoding,
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            ..self.federation.clone()
        }
    }

    /// Collects every problem before reporting any.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window < 1 {
            out.push("window must be at least 1".into());
        }
        if self.inference_samples < 1 {
            out.push("inference_samples must be at least 1".into());
        }
        if let Some(g) = self.grid_intensity_g_per_kwh {
            if g.is_nan() || g < 0.0 {
                out.push(format!("grid_intensity_g_per_kwh must be non-negative, got {g}"));
            }
        }
        if self.models.is_empty() {
            out.push("at least one model is required".into());
        }
        match self.architectures() {
            Ok(archs) => {
                for a in archs {
                    if let Err(e) = self.spec(a).validate() {
                        out.push(format!("model {a}: {e}"));
                    }
                }
            }
            Err(e) => out.push(e),
        }
        if self.clients.is_empty() {
            out.push("at least one client is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, c) in self.clients.iter().enumerate() {
            let label = format!("client {} ({})", i + 1, c.display_name());
            if !names.insert(c.display_name()) {
                out.push(format!("{label}: duplicate client name"));
            }
            match (&c.profile, &c.csv) {
                (Some(_), Some(_)) => out.push(format!("{label}: set either `profile` or `csv`, not both")),
                (None, None) => out.push(format!("{label}: needs `profile` or `csv`")),
                (None, Some(path)) => {
                    if !path.is_file() {
                        out.push(format!("{label}: CSV file not found: {}", path.display()));
                    }
                    if c.samples.is_some() || c.ranges.is_some() {
                        out.push(format!("{label}: `samples`/`ranges` only apply to synthetic clients"));
                    }
                }
                (Some(_), None) => {
                    if let Some(Err(e)) = c.synthetic_profile() {
                        out.push(format!("{label}: {e}"));
                    }
                    if c.samples == Some(0) {
                        out.push(format!("{label}: samples must be at least 1"));
                    }
                }
            }
        }
        out.extend(self.federation.problems());
        if let Err(e) = self.energy.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.exponents.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        match self.problems() {
            p if p.is_empty() => Ok(()),
            p => Err(ExperimentError::InvalidConfig(p)),
        }
    }
}
