//! Run configuration: one TOML file carrying every numeric choice of a run
//! (architecture, optimizer, loss, splits, evaluation geometry). Command
//! lines carry only paths and modes. Unknown keys are rejected; the fully
//! resolved config is echoed into the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AnomalySource, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::regions::{RegionBox, SubregionScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Loss settings as written in the config file. The anomaly threshold is
/// not a config value; it is computed by `stats` and carried in the stats
/// sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub pos_weight: f64,
    pub quantile_q: f64,
    pub w_anom: f64,
    pub epsilon: f64,
    pub anomaly_source: AnomalySource,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            lambda_cls: d.lambda_cls,
            lambda_reg: d.lambda_reg,
            pos_weight: d.pos_weight,
            quantile_q: d.quantile_q,
            w_anom: d.w_anom,
            epsilon: d.epsilon,
            anomaly_source: AnomalySource::AllValid,
        }
    }
}

impl LossSection {
    pub fn to_loss_config(&self, anomaly_threshold: f64) -> LossConfig {
        LossConfig {
            lambda_cls: self.lambda_cls,
            lambda_reg: self.lambda_reg,
            pos_weight: self.pos_weight,
            quantile_q: self.quantile_q,
            w_anom: self.w_anom,
            epsilon: self.epsilon,
            anomaly_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub name: String,
    /// (south, north) in degrees.
    pub lat: (f64, f64),
    /// (west, east) in degrees; west > east wraps the antimeridian.
    pub lon: (f64, f64),
    #[serde(default)]
    pub scheme: Option<SubregionScheme>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cos_lat_weighting: bool,
    /// Overrides the default region set when non-empty.
    pub regions: Vec<RegionSection>,
}

impl EvalSection {
    pub fn to_options(&self) -> EvalOptions {
        if self.regions.is_empty() {
            return EvalOptions {
                cos_lat_weighting: self.cos_lat_weighting,
                ..EvalOptions::default()
            };
        }
        let regions: Vec<RegionBox> = self
            .regions
            .iter()
            .map(|r| RegionBox::new(&r.name, r.lat, r.lon))
            .collect();
        let schemes: Vec<(String, SubregionScheme)> = self
            .regions
            .iter()
            .filter_map(|r| r.scheme.map(|s| (r.name.clone(), s)))
            .collect();
        EvalOptions {
            cos_lat_weighting: self.cos_lat_weighting,
            regions,
            schemes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub tau: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single top-level seed; every random stream derives from it.
    pub seed: Option<u64>,
    pub dtype: Option<Dtype>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossSection,
    pub split: SplitConfig,
    pub eval: EvalSection,
    pub predict: PredictSection,
}

impl RunConfig {
    /// Applies the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<ResolvedConfig> {
        if let Some(seed) = self.seed {
            self.optim.seed = seed;
        }
        let seed = self.optim.seed;
        let dtype = self.dtype.unwrap_or(Dtype::F32);
        self.seed = Some(seed);
        self.dtype = Some(dtype);
        self.model.validate()?;
        self.optim.validate()?;
        self.split.validate()?;
        self.loss.to_loss_config(f64::INFINITY).validate()?;
        if !(self.predict.tau > 0.0 && self.predict.tau < 1.0) {
            return Err(Error::Config(format!(
                "predict.tau must lie in (0, 1), got {}",
                self.predict.tau
            )));
        }
        Ok(ResolvedConfig {
            seed,
            dtype,
            inner: self,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// A validated config with the seed and dtype pinned.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub dtype: Dtype,
    inner: RunConfig,
}

impl ResolvedConfig {
    pub fn model(&self) -> &ModelConfig {
        &self.inner.model
    }
    pub fn optim(&self) -> &OptimConfig {
        &self.inner.optim
    }
    pub fn loss_section(&self) -> &LossSection {
        &self.inner.loss
    }
    pub fn split(&self) -> &SplitConfig {
        &self.inner.split
    }
    pub fn eval_section(&self) -> &EvalSection {
        &self.inner.eval
    }
    pub fn predict_section(&self) -> &PredictSection {
        &self.inner.predict
    }

    /// TOML echo of the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.inner)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default().resolve().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.dtype, Dtype::F32);
        assert_eq!(cfg.model().stage_widths, [48, 96, 192, 288]);
        assert_eq!(cfg.optim().lr, 1e-3);
        assert_eq!(cfg.optim().epochs, 15);
        assert_eq!(cfg.loss_section().pos_weight, 5.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("unknown_key = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_toml_str("[model]\nnot_a_field = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn top_seed_overrides_optim_seed() {
        let cfg = RunConfig::from_toml_str("seed = 123\n[optim]\nseed = 9\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.optim().seed, 123);
    }

    #[test]
    fn echo_round_trips() {
        let text = "seed = 7\n[model]\nstage_widths = [4, 8, 8, 8]\nstage_depths = [1, 1, 2, 1]\n";
        let cfg = RunConfig::from_toml_str(text).unwrap().resolve().unwrap();
        let echoed = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&echoed).unwrap().resolve().unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.model().stage_widths, [4, 8, 8, 8]);
        assert_eq!(back.to_toml().unwrap(), echoed);
    }

    #[test]
    fn regions_override() {
        let text = r#"
[eval]
cos_lat_weighting = true
[[eval.regions]]
name = "Box"
lat = [0.0, 10.0]
lon = [20.0, 40.0]
scheme = "quadrants"
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap().resolve().unwrap();
        let opts = cfg.eval_section().to_options();
        assert!(opts.cos_lat_weighting);
        assert_eq!(opts.regions.len(), 1);
        assert_eq!(opts.regions[0].name, "Box");
        assert_eq!(opts.schemes.len(), 1);
    }

    #[test]
    fn bad_tau_rejected() {
        let err = RunConfig::from_toml_str("[predict]\ntau = 1.5\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
