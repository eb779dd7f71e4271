use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LsrmError, Result};
use crate::geometry::DEFAULT_BETA;
use crate::pipeline::{GeometrySource, InstanceOptions, ModelConfig, RoutingMode};
use crate::rng::SeedStream;
use crate::routing::Budgets;
use crate::scene::{Scene, SceneFile};
use crate::tokenizer::{FeatureProvider, RandomProjectionFeatures, ZeroFeatures, PATCH};

pub const RUN_SCHEMA: u32 = 1;

/// Where the scene comes from: a scene file (relative paths resolve against
/// the config file) or a built-in preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneRef {
    Path(PathBuf),
    Preset(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    Zero,
    RandomProjection,
}

fn default_schema() -> u32 {
    RUN_SCHEMA
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_workers() -> usize {
    1
}
fn default_routing() -> RoutingMode {
    RoutingMode::ThreeD
}
fn default_out() -> PathBuf {
    PathBuf::from("lsrm-out")
}
fn default_scene() -> SceneRef {
    SceneRef::Preset("sphere".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default = "default_scene")]
    pub scene: SceneRef,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub budgets: Budgets,
    /// Mask threshold; one fine voxel width when absent.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Drives every weight and feature; scenes carry their own seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_routing")]
    pub routing: RoutingMode,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub geometry: GeometrySource,
    #[serde(default)]
    pub features: FeatureKind,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Directory of the config file, for resolving relative scene paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Command-line overrides applied after loading.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub routing: Option<RoutingMode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LsrmError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| LsrmError::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(r) = o.routing {
            self.routing = r;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != RUN_SCHEMA {
            return Err(LsrmError::config(format!(
                "unsupported run config schema {} (expected {RUN_SCHEMA})",
                self.schema
            )));
        }
        self.model.validate()?;
        if self.workers == 0 {
            return Err(LsrmError::config("workers must be at least 1"));
        }
        if !(self.beta > 0.0) {
            return Err(LsrmError::config("beta must be positive"));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(LsrmError::config("tau must be positive"));
            }
        }
        let b = self.budgets;
        if [b.per_view, b.v2v, b.v2i, b.i2v, b.i2i].contains(&0) {
            return Err(LsrmError::config("routing budgets must be positive"));
        }
        if let SceneRef::Preset(name) = &self.scene {
            if !crate::scene::PRESETS.contains(&name.as_str()) {
                return Err(LsrmError::config(format!("unknown scene preset {name:?}")));
            }
        }
        Ok(())
    }

    pub fn scene_file(&self) -> Result<SceneFile> {
        match &self.scene {
            SceneRef::Preset(name) => Ok(SceneFile::preset(name, self.model.views)),
            SceneRef::Path(p) => {
                let full = match &self.base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                SceneFile::load(&full)
            }
        }
    }

    pub fn scene(&self) -> Result<Scene> {
        self.scene_file()?.build()
    }

    pub fn instance_options(&self) -> InstanceOptions {
        InstanceOptions {
            geometry: self.geometry,
            tau: self.tau,
            beta: self.beta,
            budgets: self.budgets,
            routing: self.routing,
        }
    }

    pub fn feature_provider(&self) -> Box<dyn FeatureProvider> {
        let dim = self.model.d_feat;
        match self.features {
            FeatureKind::Zero => Box::new(ZeroFeatures { dim }),
            FeatureKind::RandomProjection => Box::new(RandomProjectionFeatures::new(
                PATCH * PATCH * 3,
                dim,
                &SeedStream::new(self.seed).child("features"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.workers, 1);
        assert_eq!(c.routing, RoutingMode::ThreeD);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"wrokers": 2}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"workers": 0}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"scene": {"preset": "teapot"}}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"routing": "score", "scene": {"path": "s.json"}}"#).unwrap();
        assert_eq!(c.routing, RoutingMode::Score);
    }
}
