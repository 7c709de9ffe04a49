//! Experiment configuration. JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgflow_core::dynamics::DynamicsOptions;
use sgflow_core::shallow::ConsistencyOptions;
use sgflow_core::vortex::PatchSampling;
use sgflow_core::{PhysicalDomain, SolverOptions, Vec2};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: PhysicalDomain,
    pub measure: MeasureSpec,
    /// Final time `T`.
    pub horizon: f64,
    /// Time step; defaults to `1e-2 · min(1, 1/(S + R(T) + 1))`.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_stride")]
    pub save_stride: usize,
    #[serde(default)]
    pub ot: SolverOptions,
    #[serde(default = "yes")]
    pub cutoff: bool,
    #[serde(default)]
    pub mollifier: Option<u32>,
    /// Integrability exponent of the initial density.
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub shallow: Option<ShallowSpec>,
    #[serde(default)]
    pub vortex: Option<VortexSpec>,
    #[serde(default)]
    pub orlicz: Option<OrliczSpec>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_stride() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// Initial potential vorticity.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// A `DiscreteMeasure` JSON file (`points`, `masses`, `R0`).
    File { path: PathBuf },
    /// The rotating patch `ε⁻² χ_{B(z₀, ε)}` with `n` equal particles.
    VortexPatch {
        epsilon: f64,
        n: usize,
        #[serde(default)]
        sampling: PatchSampling,
    },
    /// A density sampled on a square lattice of about `count` points in `B(0, radius)`.
    DensityGrid {
        density: DensitySpec,
        count: usize,
        radius: f64,
    },
}

/// Densities on the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    /// `exp(−((y₁−c₁)²/2σ₁² + (y₂−c₂)²/2σ₂²)) + floor`.
    Gaussian {
        center: Vec2,
        sigma: [f64; 2],
        #[serde(default)]
        floor: f64,
    },
    /// `|y − c|^{−exponent}`, integrable for `exponent < 2`.
    Power { center: Vec2, exponent: f64 },
    /// `1/|B(c, r)|` on the ball, zero outside.
    Ball { center: Vec2, radius: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub generator: SweepGenerator,
    /// Exponents `r` of the flow gaps.
    #[serde(default = "default_norms")]
    pub norms: Vec<f64>,
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
}

fn default_norms() -> Vec<f64> {
    vec![1.0, 2.0]
}

fn default_times() -> Vec<f64> {
    vec![0.1, 0.3, 0.5]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepGenerator {
    /// Convolutions of a density-grid measure with bumps of the given widths.
    Mollify { widths: Vec<f64> },
    /// Random subsets of the initial measure, masses rescaled.
    Subsample { counts: Vec<usize> },
    /// Rotating patches; gaps are taken between consecutive members.
    Vortex {
        epsilons: Vec<f64>,
        n: usize,
        #[serde(default)]
        sampling: PatchSampling,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowSpec {
    pub h0: HeightSpec,
    #[serde(default)]
    pub consistency: ConsistencyOptions,
    #[serde(default = "default_outer")]
    pub outer_per_step: usize,
}

fn default_outer() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeightSpec {
    Constant {
        value: f64,
    },
    /// `base + gradient · x`, clamped at zero.
    Linear {
        base: f64,
        gradient: Vec2,
    },
    Gaussian {
        center: Vec2,
        sigma: [f64; 2],
        #[serde(default)]
        floor: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VortexSpec {
    pub epsilons: Vec<f64>,
    pub n: usize,
    #[serde(default)]
    pub sampling: PatchSampling,
    /// Extra step sizes for an order fit of the particle error.
    #[serde(default)]
    pub dt_values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrliczSpec {
    pub family: FamilySpec,
    #[serde(default = "default_orlicz_nq")]
    pub n_q: usize,
}

fn default_orlicz_nq() -> usize {
    96
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// Mollifications of a density on the unit disk, with the density itself as limit.
    Mollified {
        density: DensitySpec,
        widths: Vec<f64>,
    },
    /// `ε⁻² χ_{B(z₀, ε)}` sampled on `B(z₀, 1)`.
    Vortex {
        epsilons: Vec<f64>,
    },
    Single {
        density: DensitySpec,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Bins per axis of the pushforward statistics.
    pub bins: usize,
    /// Measure-preservation threshold at reference resolution.
    pub measure_tolerance: f64,
    /// Frozen constant `C` in `|residual| ≤ C (dt² + tol)`.
    pub residual_constant: f64,
    pub test_degree: u32,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            bins: 5,
            measure_tolerance: 0.05,
            residual_constant: RESIDUAL_CONSTANT,
            test_degree: 2,
        }
    }
}

/// Calibrated on the ε = 1/2 patch at reference resolution.
pub const RESIDUAL_CONSTANT: f64 = 1.0;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parses and validates; errors name the offending key.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("at `{path}`: {}", e.inner())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.domain
            .validate()
            .map_err(|e| format!("at `domain`: {e}"))?;
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(format!(
                "at `horizon`: must be finite and nonnegative, got {}",
                self.horizon
            ));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(format!("at `dt`: must be positive, got {dt}"));
            }
        }
        if !(self.ot.tol > 0.0) || self.ot.max_iter == 0 {
            return Err("at `ot`: tol and max_iter must be positive".into());
        }
        if self.save_stride == 0 {
            return Err("at `save_stride`: must be positive".into());
        }
        if !(self.q >= 1.0) {
            return Err(format!("at `q`: must be at least 1, got {}", self.q));
        }
        match &self.measure {
            MeasureSpec::VortexPatch { epsilon, n, .. } => {
                positive("measure.epsilon", *epsilon)?;
                if *n == 0 {
                    return Err("at `measure.n`: must be positive".into());
                }
            }
            MeasureSpec::DensityGrid {
                density,
                count,
                radius,
            } => {
                positive("measure.radius", *radius)?;
                if *count == 0 {
                    return Err("at `measure.count`: must be positive".into());
                }
                density.validate("measure.density")?;
            }
            MeasureSpec::File { .. } => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.norms.iter().any(|r| !(*r >= 1.0)) {
                return Err("at `sweep.norms`: exponents must be at least 1".into());
            }
            if sweep
                .times
                .iter()
                .any(|t| !(*t >= 0.0 && *t <= self.horizon))
            {
                return Err("at `sweep.times`: times must lie in [0, horizon]".into());
            }
            match &sweep.generator {
                SweepGenerator::Mollify { widths } => {
                    if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) {
                        return Err("at `sweep.generator.widths`: need positive widths".into());
                    }
                }
                SweepGenerator::Subsample { counts } => {
                    if counts.is_empty() || counts.contains(&0) {
                        return Err("at `sweep.generator.counts`: need positive counts".into());
                    }
                }
                SweepGenerator::Vortex { epsilons, n, .. } => {
                    if epsilons.len() < 2
                        || epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0))
                        || *n == 0
                    {
                        return Err(
                            "at `sweep.generator`: need at least two epsilons in (0, 1] and n > 0"
                                .into(),
                        );
                    }
                }
            }
        }
        if let Some(v) = &self.vortex {
            if v.epsilons.is_empty() || v.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
                return Err("at `vortex.epsilons`: need values in (0, 1]".into());
            }
            if v.dt_values.iter().any(|d| !(*d > 0.0)) {
                return Err("at `vortex.dt_values`: must be positive".into());
            }
        }
        if let Some(s) = &self.shallow {
            if !(s.consistency.damping > 0.0 && s.consistency.damping <= 1.0) {
                return Err("at `shallow.consistency.damping`: must lie in (0, 1]".into());
            }
            positive("shallow.consistency.tol", s.consistency.tol)?;
        }
        if self.diagnostics.bins == 0 {
            return Err("at `diagnostics.bins`: must be positive".into());
        }
        positive(
            "diagnostics.residual_constant",
            self.diagnostics.residual_constant,
        )?;
        Ok(())
    }

    pub fn dynamics(&self) -> DynamicsOptions {
        DynamicsOptions {
            dt: self.dt,
            save_stride: self.save_stride,
            ot: self.ot.clone(),
            cutoff: self.cutoff,
            mollifier: self.mollifier,
        }
    }
}

impl DensitySpec {
    fn validate(&self, key: &str) -> Result<(), String> {
        match self {
            DensitySpec::Gaussian { sigma, floor, .. } => {
                positive(&format!("{key}.sigma"), sigma[0].min(sigma[1]))?;
                if !(*floor >= 0.0) {
                    return Err(format!("at `{key}.floor`: must be nonnegative"));
                }
            }
            DensitySpec::Power { exponent, .. } => {
                if !(*exponent >= 0.0 && *exponent < 2.0) {
                    return Err(format!("at `{key}.exponent`: must lie in [0, 2)"));
                }
            }
            DensitySpec::Ball { radius, .. } => positive(&format!("{key}.radius"), *radius)?,
        }
        Ok(())
    }

    pub fn eval(&self, y: Vec2) -> f64 {
        match self {
            DensitySpec::Gaussian {
                center,
                sigma,
                floor,
            } => {
                let d = y - *center;
                (-(d.x * d.x / (2.0 * sigma[0] * sigma[0])
                    + d.y * d.y / (2.0 * sigma[1] * sigma[1])))
                    .exp()
                    + floor
            }
            DensitySpec::Power { center, exponent } => {
                let r = y.dist(*center);
                if r > 0.0 {
                    r.powf(-exponent)
                } else {
                    f64::INFINITY
                }
            }
            DensitySpec::Ball { center, radius } => {
                if y.dist(*center) < *radius {
                    1.0 / (std::f64::consts::PI * radius * radius)
                } else {
                    0.0
                }
            }
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("at `{key}`: must be positive, got {v}"))
    }
}
