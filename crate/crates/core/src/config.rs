//! TOML configuration shared by the command-line tools.
//!
//! Every section is optional and falls back to the built-in defaults.
//! Unknown keys are rejected so typos surface as errors instead of being
//! silently ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignParams, Geometry};
use crate::embedding::{AnchorSet, GridSpec, ANCHORS_PER_SCALE, DEFAULT_STRIDES, NUM_SCALES};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalParams;
use crate::plot::PlotStyle;
use crate::postprocess::PostprocessParams;
use crate::toytrain::TrainConfig;

/// Environment variable naming a config file when no flag is given.
pub const CONFIG_ENV: &str = "BODYORIENT_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub input_width: u32,
    pub input_height: u32,
    pub strides: [u32; NUM_SCALES],
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            input_width: 1024,
            input_height: 1024,
            strides: DEFAULT_STRIDES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    /// `(width, height)` per anchor, smallest stride first.
    pub sizes: [[(f64, f64); ANCHORS_PER_SCALE]; NUM_SCALES],
}

impl Default for AnchorSection {
    fn default() -> Self {
        Self {
            sizes: AnchorSet::default_four_scale().to_pairs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou: f64,
    pub conf: f64,
    pub exclude_weak: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalParams::default();
        Self {
            iou: p.iou_thresh,
            conf: p.conf_thresh,
            exclude_weak: p.exclude_weak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: u64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: 100,
            eps: crate::gradcheck::DEFAULT_EPS,
            tolerance: crate::gradcheck::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridSection,
    pub anchors: AnchorSection,
    pub assign: AssignParams,
    pub loss: LossConfig,
    pub postprocess: PostprocessParams,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub train: TrainConfig,
    pub plot: PlotStyle,
}

fn unit_range(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path)
    }

    /// The file named by `flag`, else by [`CONFIG_ENV`], else the defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<Self> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        match path {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.assign.validate()?;
        self.loss.validate()?;
        self.postprocess.validate()?;
        unit_range("eval.iou", self.eval.iou)?;
        unit_range("eval.conf", self.eval.conf)?;
        let g = &self.gradcheck;
        if !(g.eps.is_finite() && g.eps > 0.0) || !(g.tolerance.is_finite() && g.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.eps and gradcheck.tolerance must be > 0".into()));
        }
        self.train.validate()?;
        self.plot.validate()
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry {
            grid: GridSpec::new(self.grid.input_width, self.grid.input_height, self.grid.strides)?,
            anchors: AnchorSet::new(self.anchors.sizes)?,
            assign: self.assign,
        })
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            iou_thresh: self.eval.iou,
            conf_thresh: self.eval.conf,
            exclude_weak: self.eval.exclude_weak,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
