//! JSON experiment configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use glrt_core::chernoff::IndexConfig;
use glrt_core::families::{FamilyModel, ParamBox};
use glrt_core::glm::{GaussianJoint, GlmDesign, GlmRateConfig, JointConfig};
use glrt_core::nonsep::TiltConfig;
use glrt_core::simulate::{DecayConfig, Side};
use glrt_core::{Error, Result};
use nalgebra::{Matrix3, Vector2};
use serde::Deserialize;

/// A built-in family with an optional parameter box.
///
/// Omitted bounds fall back to the family's default truncation and count as
/// artificial; given bounds are genuine unless flagged otherwise.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: String,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
    #[serde(default)]
    pub artificial_lower: Option<Vec<bool>>,
    #[serde(default)]
    pub artificial_upper: Option<Vec<bool>>,
    /// Shorthand for a single-point box.
    #[serde(default)]
    pub point: Option<Vec<f64>>,
}

impl FamilySpec {
    pub fn model(&self) -> Result<FamilyModel> {
        let base = FamilyModel::builtin(&self.family)?;
        if let Some(p) = &self.point {
            if self.lower.is_some() || self.upper.is_some() {
                return Err(Error::Config(format!(
                    "`{}`: give either `point` or bounds, not both",
                    self.family
                )));
            }
            return base.with_space(ParamBox::point(p));
        }
        let d = base.space.clone();
        let pick = |given: &Option<Vec<f64>>, default: &Vec<f64>, flags: &Option<Vec<bool>>, default_flags: &Vec<bool>| {
            match (given, flags) {
                (Some(v), Some(f)) => (v.clone(), f.clone()),
                (Some(v), None) => (v.clone(), vec![false; v.len()]),
                (None, Some(f)) => (default.clone(), f.clone()),
                (None, None) => (default.clone(), default_flags.clone()),
            }
        };
        let (lower, al) = pick(&self.lower, &d.lower, &self.artificial_lower, &d.artificial_lower);
        let (upper, au) = pick(&self.upper, &d.upper, &self.artificial_upper, &d.artificial_upper);
        base.with_space(ParamBox::with_faces(lower, upper, al, au)?)
    }
}

/// Either explicit values or `count` evenly spaced points on `[from, to]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    Values(Vec<f64>),
    Range { from: f64, to: f64, count: usize },
}

impl AxisSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        match *self {
            AxisSpec::Values(ref v) => Ok(v.clone()),
            AxisSpec::Range { from, to, count } => {
                if count < 2 || !(to > from) {
                    return Err(Error::Config("axis range needs from < to and count ≥ 2".into()));
                }
                Ok((0..count)
                    .map(|i| from + (to - from) * i as f64 / (count - 1) as f64)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexFile {
    #[serde(default)]
    pub g: Option<FamilySpec>,
    #[serde(default)]
    pub h: Option<FamilySpec>,
    /// Three or more families: report the smallest pairwise index.
    #[serde(default)]
    pub families: Option<Vec<FamilySpec>>,
    #[serde(default)]
    pub index: IndexConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourFile {
    pub g: FamilySpec,
    pub h: FamilySpec,
    pub theta_axis: AxisSpec,
    pub gamma_axis: AxisSpec,
}

/// The random-design Gaussian regression model.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub sigma: [[f64; 3]; 3],
    pub beta0: [f64; 2],
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub search: JointConfig,
}

impl JointSpec {
    pub fn model(&self) -> Result<GaussianJoint> {
        let s = &self.sigma;
        let sigma = Matrix3::from_fn(|i, j| s[i][j]);
        GaussianJoint::new(sigma, Vector2::new(self.beta0[0], self.beta0[1]), self.b)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyTiltSpec {
    pub g: FamilySpec,
    pub h: FamilySpec,
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub tilt: TiltConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonsepFile {
    Families(FamilyTiltSpec),
    GaussianJoint(JointSpec),
}

/// Design CSV and its sidecar; relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub design: PathBuf,
    pub sidecar: PathBuf,
    #[serde(default)]
    pub rate: GlmRateConfig,
}

impl DesignSpec {
    pub fn load(&self, base: &Path) -> Result<GlmDesign> {
        GlmDesign::load(&base.join(&self.design), &base.join(&self.sidecar))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum GlmFile {
    FixedDesign(DesignSpec),
    GaussianJoint(JointSpec),
}

/// A fixed least favorable pair, used instead of searching the boxes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleSpec {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyScenarioSpec {
    pub g: FamilySpec,
    pub h: FamilySpec,
    #[serde(default = "default_side")]
    pub side: Side,
    #[serde(default)]
    pub saddle: Option<SaddleSpec>,
    #[serde(default)]
    pub index: IndexConfig,
}

fn default_side() -> Side {
    Side::TypeI
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    Families(FamilyScenarioSpec),
    GaussianJoint(JointSpec),
    Glm(DesignSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub scenario: ScenarioSpec,
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}
