//! Scenario configs, the experiment runner, and the command-line surface.
//!
//! A *scenario* is a TOML document that binds a lattice, coefficient
//! families, norm parameters, and a list of operations into one reproducible
//! run.  [`run_scenario`] executes every operation exactly once (operations
//! may run concurrently; report assembly is order-deterministic) and returns
//! a versioned [`RunReport`] that embeds a digest of the canonicalized
//! config, so re-running the same file with the same seed reproduces the
//! report bit for bit apart from the wall-clock field.
//!
//! The binary exposes one subcommand per operation plus `run`, `validate`,
//! and `list-families`; exit codes are 0 (all declared bands passed),
//! 1 (a band failed or an operation errored), and 2 (the config itself is
//! invalid).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{
    cutoff_profile, sample, sample_scalar, Grid, GridFn, MollifierShape, Rank,
};
use crate::io::{read_gridfn, write_gridfn, write_paths};
use crate::norms::{localized_norm, NormParams, TimeExponent};
use crate::pde::{certify, max_reg_survey, solve_forward, ParabolicProblem};
use crate::rng::sub_seed;
use crate::sde::{
    bel_gradient, catalog, coarse_start_lattice, fd_gradient, flow_moment_survey,
    khasminskii_estimate, krylov_estimate, krylov_ladder, krylov_restarted,
    pathwise_contraction, simulate, tightness_modulus, weak_agreement, CoefficientField,
    FamilyId, FAMILY_B_KAPPA,
};
use crate::stats::{loglog_slope, EstimatorReport};
use crate::suite;
use crate::zvonkin::{build_transform, half_diffusion};

/// Schema tag carried by every report.
pub const REPORT_VERSION: &str = "report v1";

/// Default cap on `paths * steps` per operation.
pub const DEFAULT_MAX_PATH_STEPS: u64 = 1 << 27;

/// Default cap on space-time lattice cells `nx^d * (nt + 1)`.
pub const DEFAULT_MAX_LATTICE_CELLS: u64 = 1 << 26;

fn default_seed() -> u64 {
    0x5EED
}

fn default_half_width() -> f64 {
    std::f64::consts::PI
}

fn default_horizon() -> f64 {
    1.0
}

fn default_paths() -> usize {
    2000
}

fn default_steps() -> usize {
    128
}

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

/// Lattice parameters as written in a scenario file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    pub nx: usize,
    #[serde(default = "default_horizon")]
    pub t_horizon: f64,
    pub nt: usize,
}

impl GridSpec {
    /// Default lattice for a family: `d = 3, Nx = 32` for D, `d = 2, Nx = 64`
    /// otherwise, both with `Nt = 128`, `L = pi`, `T = 1`.
    pub fn for_family(id: FamilyId) -> GridSpec {
        let (dim, nx) = if id == FamilyId::D { (3, 32) } else { (2, 64) };
        GridSpec {
            dim,
            half_width: default_half_width(),
            nx,
            t_horizon: default_horizon(),
            nt: 128,
        }
    }

    pub fn build(&self) -> Result<Grid> {
        Grid::new(self.dim, self.half_width, self.nx, self.t_horizon, self.nt)
    }

    /// Space-time cell count `nx^d * (nt + 1)` used for budget checks.
    pub fn cells(&self) -> u64 {
        (self.nx as u64).saturating_pow(self.dim as u32) * (self.nt as u64 + 1)
    }
}

/// Resource caps a scenario must stay inside.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSpec {
    /// Cap on `paths * steps` for any one operation.
    pub max_path_steps: u64,
    /// Cap on space-time lattice cells `nx^d * (nt + 1)`.
    pub max_lattice_cells: u64,
}

impl Default for BudgetSpec {
    fn default() -> BudgetSpec {
        BudgetSpec {
            max_path_steps: DEFAULT_MAX_PATH_STEPS,
            max_lattice_cells: DEFAULT_MAX_LATTICE_CELLS,
        }
    }
}

/// Coefficient-family selector inside an operation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    /// Family id: one of `a`, `b`, `c`, `d`, `e` (case-insensitive).
    pub id: String,
    /// Dimension for the analytic families a and b (default 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Drift rate for family b (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Mollification level n (width 1/n) for families c, d, e (default 4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    /// Mollifier shape token (default `polynomial-bump`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
}

impl FamilySpec {
    pub fn by_id(id: &str) -> FamilySpec {
        FamilySpec { id: id.into(), dim: None, kappa: None, level: None, shape: None }
    }

    pub fn family_id(&self) -> Result<FamilyId> {
        FamilyId::from_token(&self.id)
    }

    fn shape(&self) -> Result<MollifierShape> {
        match self.shape.as_deref() {
            None => Ok(MollifierShape::PolynomialBump),
            Some(tok) => MollifierShape::from_token(tok),
        }
    }

    /// Lattice the family needs when the scenario does not pin one.
    pub fn default_grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::for_family(self.family_id()?))
    }

    /// Builds the coefficient field, sampling on `grid` when mollification
    /// is involved.
    pub fn build(&self, grid: Option<Grid>) -> Result<CoefficientField> {
        let id = self.family_id()?;
        let level = self.level.unwrap_or(4);
        let dim = self.dim.or(grid.map(|g| g.dim)).unwrap_or(2);
        let need_grid = || {
            grid.ok_or_else(|| {
                Error::invalid(format!(
                    "family {} needs a lattice; add a [grid] table to the scenario",
                    id.token()
                ))
            })
        };
        match id {
            FamilyId::A => CoefficientField::family_a(dim),
            FamilyId::B => CoefficientField::family_b(dim, self.kappa.unwrap_or(FAMILY_B_KAPPA)),
            FamilyId::C => CoefficientField::family_c(need_grid()?, level, self.shape()?),
            FamilyId::D => CoefficientField::family_d(need_grid()?, level, self.shape()?),
            FamilyId::E => CoefficientField::family_e(need_grid()?, level, self.shape()?),
        }
    }
}

/// Norm parameters as written in a scenario (window defaults to the horizon).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    #[serde(default)]
    pub alpha: f64,
    pub p: f64,
    pub q: TimeExponent,
    #[serde(default = "NormSpec::default_radius")]
    pub radius: f64,
}

impl NormSpec {
    fn default_radius() -> f64 {
        1.0
    }

    pub fn to_params(&self, grid: &Grid) -> NormParams {
        NormParams::over_horizon(self.alpha, self.p, self.q, self.radius, grid)
    }
}

/// A named scalar test function, usable both as an analytic closure and as a
/// lattice sample.
///
/// Lattice samples measure distances around the torus (minimum image);
/// the closures are genuine functions on R^d, which is what path-space
/// estimators want.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFnSpec {
    /// Constant 1.
    One,
    /// Coordinate `x_axis` (not periodic; intended for gradient probes).
    Coord { axis: usize },
    /// `sin(x_axis)`.
    Sin { axis: usize },
    /// Smooth bump: 1 at `center`, support in the ball of `radius`.
    Bump { center: Vec<f64>, radius: f64 },
    /// `exp(-|x - center|^2 / width^2)`.
    Gauss { center: Vec<f64>, width: f64 },
    /// `|x|^2`.
    R2,
}

impl TestFnSpec {
    pub fn label(&self) -> String {
        match self {
            TestFnSpec::One => "one".into(),
            TestFnSpec::Coord { axis } => format!("coord{axis}"),
            TestFnSpec::Sin { axis } => format!("sin{axis}"),
            TestFnSpec::Bump { center, radius } => format!("bump(r={radius}) at {center:?}"),
            TestFnSpec::Gauss { center, width } => format!("gauss(w={width}) at {center:?}"),
            TestFnSpec::R2 => "r2".into(),
        }
    }

    /// Violations of this spec in dimension `dim` (empty when well-formed).
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            TestFnSpec::One | TestFnSpec::R2 => {}
            TestFnSpec::Coord { axis } | TestFnSpec::Sin { axis } => {
                if *axis >= dim {
                    out.push(format!("test function axis {axis} out of range for d = {dim}"));
                }
            }
            TestFnSpec::Bump { center, radius } => {
                if center.len() != dim {
                    out.push(format!(
                        "bump center has {} components but d = {dim}",
                        center.len()
                    ));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    out.push(format!("bump radius must be positive, got {radius}"));
                }
            }
            TestFnSpec::Gauss { center, width } => {
                if center.len() != dim {
                    out.push(format!(
                        "gauss center has {} components but d = {dim}",
                        center.len()
                    ));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    out.push(format!("gauss width must be positive, got {width}"));
                }
            }
        }
        out
    }

    /// Analytic closure on R^d.
    pub fn closure(&self) -> Box<dyn Fn(&[f64]) -> f64 + Sync + Send> {
        match self.clone() {
            TestFnSpec::One => Box::new(|_| 1.0),
            TestFnSpec::Coord { axis } => Box::new(move |x| x[axis]),
            TestFnSpec::Sin { axis } => Box::new(move |x| x[axis].sin()),
            TestFnSpec::Bump { center, radius } => Box::new(move |x| {
                let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                cutoff_profile(1.0 + r2.sqrt() / radius)
            }),
            TestFnSpec::Gauss { center, width } => Box::new(move |x| {
                let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                (-r2 / (width * width)).exp()
            }),
            TestFnSpec::R2 => Box::new(|x| x.iter().map(|a| a * a).sum()),
        }
    }

    /// Static lattice sample on `grid` (distances wrap around the torus).
    pub fn lattice(&self, grid: Grid) -> Result<GridFn> {
        match self.clone() {
            TestFnSpec::Bump { center, radius } => sample_scalar(grid, move |x| {
                let r2: f64 = x
                    .iter()
                    .zip(&center)
                    .map(|(a, b)| {
                        let d = grid.min_image(a - b);
                        d * d
                    })
                    .sum();
                cutoff_profile(1.0 + r2.sqrt() / radius)
            }),
            TestFnSpec::Gauss { center, width } => sample_scalar(grid, move |x| {
                let r2: f64 = x
                    .iter()
                    .zip(&center)
                    .map(|(a, b)| {
                        let d = grid.min_image(a - b);
                        d * d
                    })
                    .sum();
                (-r2 / (width * width)).exp()
            }),
            other => {
                let f = other.closure();
                sample_scalar(grid, move |x| f(x))
            }
        }
    }
}

/// Declared acceptance band for a row's scalar value.
///
/// All present constraints must hold: `|value - target| <= tolerance`,
/// `|value - target| <= k_se * std_error`, `value <= max`, `value >= min`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
}

impl Band {
    pub fn is_empty(&self) -> bool {
        self.target.is_none() && self.max.is_none() && self.min.is_none()
    }

    /// Checks `value` (with standard error `se`); failures are described.
    pub fn check(&self, value: f64, se: f64) -> (bool, Vec<String>) {
        let mut reasons = Vec::new();
        if !value.is_finite() {
            reasons.push(format!("value {value} is not finite"));
        }
        if let Some(t) = self.target {
            let gap = (value - t).abs();
            if let Some(tol) = self.tolerance {
                if !(gap <= tol) {
                    reasons.push(format!("|{value} - {t}| = {gap:.3e} exceeds tolerance {tol:.3e}"));
                }
            }
            if let Some(k) = self.k_se {
                if !(gap <= k * se) {
                    reasons.push(format!(
                        "|{value} - {t}| = {gap:.3e} exceeds {k} standard errors ({:.3e})",
                        k * se
                    ));
                }
            }
            if self.tolerance.is_none() && self.k_se.is_none() && value != t {
                reasons.push(format!("value {value} differs from exact target {t}"));
            }
        }
        if let Some(m) = self.max {
            if !(value <= m) {
                reasons.push(format!("value {value} exceeds max {m}"));
            }
        }
        if let Some(m) = self.min {
            if !(value >= m) {
                reasons.push(format!("value {value} is below min {m}"));
            }
        }
        (reasons.is_empty(), reasons)
    }
}

/// One operation in a scenario; the `kind` tag selects the variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum OpSpec {
    /// Euler ensemble; reports the mean terminal radius.
    Simulate {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        with_flow: bool,
        /// Optional `paths v1` dump file (relative to the output directory).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dump: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Occupation-functional bound against the localized source norm.
    Krylov {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        f: TestFnSpec,
        norm: NormSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<[f64; 2]>,
        /// Use the Markov-restart estimator instead of one long ensemble.
        #[serde(default)]
        restarted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Short-window occupation ratios against `delta^theta`.
    KrylovLadder {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        f: TestFnSpec,
        norm: NormSpec,
        deltas: Vec<f64>,
        theta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Exponential occupation moment via iterated additive bounds.
    Khasminskii {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        f: TestFnSpec,
        #[serde(default = "OpSpec::default_gamma")]
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Probabilistic-weight gradient cross-checked against finite
    /// differences (or a declared target vector).
    Bel {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        phi: TestFnSpec,
        #[serde(default = "OpSpec::default_fd_delta")]
        fd_delta: f64,
        /// Reference gradient; when absent the finite-difference estimate
        /// is the reference.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<f64>>,
        #[serde(default = "OpSpec::default_k_se")]
        k_se: f64,
    },
    /// Flow moment survey across mollification levels; the reported value
    /// is the worst max/min spread over levels (per moment), or the largest
    /// moment when only one level is surveyed.
    Flow {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        starts: Option<Vec<Vec<f64>>>,
        p_list: Vec<f64>,
        n_list: Vec<usize>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Moment of the two-start separation ratio under shared noise.
    Contraction {
        family: FamilySpec,
        y1: Vec<f64>,
        y2: Vec<f64>,
        #[serde(default = "OpSpec::default_p")]
        p: f64,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Expected square-root modulus of continuity; the value is the fitted
    /// log-log slope across the requested gaps.
    Tightness {
        family: FamilySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        deltas: Vec<f64>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Weak agreement of occupation integrals between two builds of a
    /// family (different shapes or levels); the value is the worst
    /// difference in combined standard errors.
    WeakAgree {
        family: FamilySpec,
        /// Mollifier shapes to compare (defaults to both built-in shapes).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shapes: Option<[String; 2]>,
        /// Mollification levels to compare (same shape); overrides `shapes`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<[usize; 2]>,
        battery: Vec<TestFnSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<Vec<f64>>,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "OpSpec::default_k_se")]
        k_se: f64,
    },
    /// Damped forward solve; reports the sup magnitude of the solution.
    PdeSolve {
        family: FamilySpec,
        #[serde(default = "OpSpec::default_lambda")]
        lambda: f64,
        f: TestFnSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dump: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Parabolic regularity ratios over a smooth source family and a
    /// damping sweep; the value is the max/min spread of the damping term
    /// across the sweep.
    MaxReg {
        #[serde(default = "OpSpec::default_lambdas")]
        lambdas: Vec<f64>,
        norm: NormSpec,
        #[serde(default = "OpSpec::default_sources")]
        sources: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Drift-removal transform; reports the achieved smallness and the
    /// ellipticity range of the transformed diffusion.
    Zvonkin {
        family: FamilySpec,
        #[serde(default = "OpSpec::default_lambda")]
        lambda0: f64,
        /// Optional `gridfn v1` dump of the vector potential.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dump: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Localized space-time norm of a test function, a family drift, or a
    /// `gridfn v1` snapshot.
    Norm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        f: Option<TestFnSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        family: Option<FamilySpec>,
        /// Path of a `gridfn v1` snapshot to load instead of sampling.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load: Option<String>,
        norm: NormSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        band: Option<Band>,
    },
    /// Runs built-in acceptance criteria (all ten when `criteria` is empty).
    Acceptance {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        criteria: Vec<usize>,
    },
}

impl OpSpec {
    fn default_gamma() -> f64 {
        1.0
    }

    fn default_fd_delta() -> f64 {
        0.02
    }

    fn default_k_se() -> f64 {
        3.0
    }

    fn default_p() -> f64 {
        2.0
    }

    fn default_lambda() -> f64 {
        1.0
    }

    fn default_lambdas() -> Vec<f64> {
        vec![1.0, 4.0, 16.0, 64.0]
    }

    fn default_sources() -> usize {
        10
    }

    /// The `kind` tag this variant serializes under.
    pub fn kind(&self) -> &'static str {
        match self {
            OpSpec::Simulate { .. } => "simulate",
            OpSpec::Krylov { .. } => "krylov",
            OpSpec::KrylovLadder { .. } => "krylov-ladder",
            OpSpec::Khasminskii { .. } => "khasminskii",
            OpSpec::Bel { .. } => "bel",
            OpSpec::Flow { .. } => "flow",
            OpSpec::Contraction { .. } => "contraction",
            OpSpec::Tightness { .. } => "tightness",
            OpSpec::WeakAgree { .. } => "weak-agree",
            OpSpec::PdeSolve { .. } => "pde-solve",
            OpSpec::MaxReg { .. } => "maxreg",
            OpSpec::Zvonkin { .. } => "zvonkin",
            OpSpec::Norm { .. } => "norm",
            OpSpec::Acceptance { .. } => "acceptance",
        }
    }

    fn family(&self) -> Option<&FamilySpec> {
        match self {
            OpSpec::Simulate { family, .. }
            | OpSpec::Krylov { family, .. }
            | OpSpec::KrylovLadder { family, .. }
            | OpSpec::Khasminskii { family, .. }
            | OpSpec::Bel { family, .. }
            | OpSpec::Flow { family, .. }
            | OpSpec::Contraction { family, .. }
            | OpSpec::Tightness { family, .. }
            | OpSpec::WeakAgree { family, .. }
            | OpSpec::PdeSolve { family, .. }
            | OpSpec::Zvonkin { family, .. } => Some(family),
            OpSpec::Norm { family, .. } => family.as_ref(),
            OpSpec::MaxReg { .. } | OpSpec::Acceptance { .. } => None,
        }
    }

    fn path_steps(&self) -> Option<u64> {
        match self {
            OpSpec::Simulate { paths, steps, .. }
            | OpSpec::Krylov { paths, steps, .. }
            | OpSpec::KrylovLadder { paths, steps, .. }
            | OpSpec::Khasminskii { paths, steps, .. }
            | OpSpec::Bel { paths, steps, .. }
            | OpSpec::Contraction { paths, steps, .. }
            | OpSpec::Tightness { paths, steps, .. }
            | OpSpec::WeakAgree { paths, steps, .. } => Some(*paths as u64 * *steps as u64),
            OpSpec::Flow { paths, steps, starts, n_list, .. } => {
                let runs = n_list.len().max(1) as u64
                    * starts.as_ref().map_or(1, |s| s.len().max(1)) as u64;
                Some(runs * *paths as u64 * *steps as u64)
            }
            _ => None,
        }
    }

    fn declared_seed(&self) -> Option<u64> {
        match self {
            OpSpec::Simulate { seed, .. }
            | OpSpec::Krylov { seed, .. }
            | OpSpec::KrylovLadder { seed, .. }
            | OpSpec::Khasminskii { seed, .. }
            | OpSpec::Bel { seed, .. }
            | OpSpec::Flow { seed, .. }
            | OpSpec::Contraction { seed, .. }
            | OpSpec::Tightness { seed, .. }
            | OpSpec::WeakAgree { seed, .. } => *seed,
            _ => None,
        }
    }
}

/// A complete experiment description, parsed from one TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory for `report.json` and CSV tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub budget: BudgetSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<OpSpec>,
}

// ---------------------------------------------------------------------------
// Canonicalization and hashing
// ---------------------------------------------------------------------------

/// Canonical form of a config value: JSON with sorted keys, no whitespace.
pub fn canonical_value_string(v: &serde_json::Value) -> String {
    // serde_json maps are BTree-backed here, so `to_string` sorts keys.
    v.to_string()
}

/// SHA-256 hex digest of the canonical form of a config value.
pub fn hash_of_value(v: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(canonical_value_string(v).as_bytes());
    let bytes = h.finalize();
    let mut out = String::with_capacity(64);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Digest of a scenario file's canonicalized text.
pub fn config_hash(text: &str) -> Result<String> {
    let value: toml::Value =
        text.parse().map_err(|e| Error::invalid(format!("config is not valid TOML: {e}")))?;
    let json = serde_json::to_value(&value)
        .map_err(|e| Error::invalid(format!("config cannot be canonicalized: {e}")))?;
    Ok(hash_of_value(&json))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Parses a scenario file; a parse failure is returned as a one-item
/// violation list.
pub fn parse_scenario(text: &str) -> std::result::Result<Scenario, Vec<String>> {
    toml::from_str(text).map_err(|e| vec![format!("config parse error: {e}")])
}

/// Returns the complete list of violations (empty when the scenario is
/// runnable).
pub fn validate_scenario(sc: &Scenario) -> Vec<String> {
    let mut out = Vec::new();
    if sc.name.trim().is_empty() {
        out.push("scenario name must not be empty".into());
    }
    let grid = match &sc.grid {
        None => None,
        Some(gs) => {
            if gs.cells() > sc.budget.max_lattice_cells {
                out.push(format!(
                    "grid has {} space-time cells, exceeding the max_lattice_cells budget cap {}",
                    gs.cells(),
                    sc.budget.max_lattice_cells
                ));
            }
            match gs.build() {
                Ok(g) => Some(g),
                Err(e) => {
                    out.push(format!("grid: {e}"));
                    None
                }
            }
        }
    };
    for (i, op) in sc.ops.iter().enumerate() {
        let mut v = Vec::new();
        validate_op(op, grid, &sc.budget, &mut v);
        out.extend(v.into_iter().map(|msg| format!("op {i} ({}): {msg}", op.kind())));
    }
    out
}

fn op_grid(op_family: Option<&FamilySpec>, scenario_grid: Option<Grid>) -> Option<Grid> {
    scenario_grid.or_else(|| {
        op_family.and_then(|fam| fam.default_grid().ok().and_then(|gs| gs.build().ok()))
    })
}

fn validate_op(op: &OpSpec, grid: Option<Grid>, budget: &BudgetSpec, out: &mut Vec<String>) {
    // Family + dimension checks via a dry build.
    let mut dim = grid.map(|g| g.dim);
    if let Some(fam) = op.family() {
        let fam_grid = op_grid(Some(fam), grid);
        match fam.build(fam_grid) {
            Ok(cf) => dim = Some(cf.dim),
            Err(e) => out.push(e.to_string()),
        }
        if let Some(level) = fam.level {
            if level == 0 {
                out.push("mollification level must be at least 1".into());
            }
        }
    }
    // Budget.
    if let Some(ps) = op.path_steps() {
        if ps > budget.max_path_steps {
            out.push(format!(
                "paths x steps = {ps} exceeds the max_path_steps budget cap {}",
                budget.max_path_steps
            ));
        }
    }
    let dim = dim.unwrap_or(2);
    let check_point = |label: &str, x: &Option<Vec<f64>>, out: &mut Vec<String>| {
        if let Some(x) = x {
            if x.len() != dim {
                out.push(format!("{label} has {} components but d = {dim}", x.len()));
            }
        }
    };
    let check_norm = |norm: &NormSpec, out: &mut Vec<String>| match grid {
        Some(g) => {
            if let Err(e) = norm.to_params(&g).validate(&g) {
                out.push(e.to_string());
            }
        }
        None => {
            if let Err(e) = norm.q.validate() {
                out.push(e.to_string());
            }
        }
    };
    let need_grid = |what: &str, out: &mut Vec<String>| {
        if grid.is_none() {
            out.push(format!("{what} needs a [grid] table in the scenario"));
        }
    };
    match op {
        OpSpec::Simulate { x0, paths, steps, .. } => {
            check_point("x0", x0, out);
            if *paths == 0 || *steps == 0 {
                out.push("paths and steps must be positive".into());
            }
        }
        OpSpec::Krylov { x0, f, norm, window, .. } => {
            need_grid("the occupation estimator", out);
            check_point("x0", x0, out);
            out.extend(f.violations(dim));
            check_norm(norm, out);
            if let (Some(g), Some([t0, t1])) = (grid, window) {
                if !(*t0 >= 0.0 && t1 > t0 && *t1 <= g.t_horizon) {
                    out.push(format!(
                        "window [{t0}, {t1}] must be nondegenerate inside [0, {}]",
                        g.t_horizon
                    ));
                }
            }
        }
        OpSpec::KrylovLadder { x0, f, norm, deltas, theta, .. } => {
            need_grid("the occupation ladder", out);
            check_point("x0", x0, out);
            out.extend(f.violations(dim));
            check_norm(norm, out);
            if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) {
                out.push("deltas must be a nonempty list of positive windows".into());
            }
            if !(*theta > 0.0 && *theta <= 1.0) {
                out.push(format!("theta must lie in (0, 1], got {theta}"));
            }
        }
        OpSpec::Khasminskii { x0, f, gamma, .. } => {
            need_grid("the exponential-moment estimator", out);
            check_point("x0", x0, out);
            out.extend(f.violations(dim));
            if !(*gamma >= 0.0 && gamma.is_finite()) {
                out.push(format!("gamma must be nonnegative, got {gamma}"));
            }
        }
        OpSpec::Bel { x0, phi, fd_delta, target, k_se, .. } => {
            check_point("x0", x0, out);
            check_point("target", target, out);
            out.extend(phi.violations(dim));
            if !(*fd_delta > 0.0) {
                out.push(format!("fd_delta must be positive, got {fd_delta}"));
            }
            if !(*k_se > 0.0) {
                out.push(format!("k_se must be positive, got {k_se}"));
            }
        }
        OpSpec::Flow { starts, p_list, n_list, .. } => {
            if let Some(starts) = starts {
                for s in starts {
                    if s.len() != dim {
                        out.push(format!("start {s:?} has wrong dimension for d = {dim}"));
                    }
                }
                if starts.is_empty() {
                    out.push("starts must not be empty when given".into());
                }
            }
            if p_list.is_empty() || p_list.iter().any(|p| !(*p > 0.0)) {
                out.push("p_list must be a nonempty list of positive moments".into());
            }
            if n_list.is_empty() || n_list.contains(&0) {
                out.push("n_list must be a nonempty list of positive levels".into());
            }
        }
        OpSpec::Contraction { y1, y2, p, .. } => {
            if y1.len() != dim || y2.len() != dim {
                out.push(format!("y1/y2 must each have d = {dim} components"));
            }
            if y1 == y2 {
                out.push("y1 and y2 must differ".into());
            }
            if !(*p > 0.0) {
                out.push(format!("p must be positive, got {p}"));
            }
        }
        OpSpec::Tightness { x0, deltas, .. } => {
            check_point("x0", x0, out);
            if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) {
                out.push("deltas must be a nonempty list of positive gaps".into());
            }
        }
        OpSpec::WeakAgree { shapes, levels, battery, x0, k_se, .. } => {
            need_grid("weak agreement", out);
            check_point("x0", x0, out);
            if battery.is_empty() {
                out.push("battery must contain at least one test function".into());
            }
            for f in battery {
                out.extend(f.violations(dim));
            }
            if let Some([a, b]) = shapes {
                for tok in [a, b] {
                    if let Err(e) = MollifierShape::from_token(tok) {
                        out.push(e.to_string());
                    }
                }
            }
            if let Some([a, b]) = levels {
                if *a == 0 || *b == 0 {
                    out.push("levels must be positive".into());
                }
            }
            if !(*k_se > 0.0) {
                out.push(format!("k_se must be positive, got {k_se}"));
            }
        }
        OpSpec::PdeSolve { lambda, f, .. } => {
            need_grid("the forward solve", out);
            out.extend(f.violations(dim));
            if !(*lambda >= 0.0 && lambda.is_finite()) {
                out.push(format!("lambda must be nonnegative, got {lambda}"));
            }
        }
        OpSpec::MaxReg { lambdas, norm, sources, .. } => {
            need_grid("the regularity survey", out);
            check_norm(norm, out);
            if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) {
                out.push("lambdas must be a nonempty list of positive dampings".into());
            }
            if *sources == 0 {
                out.push("sources must be positive".into());
            }
        }
        OpSpec::Zvonkin { lambda0, .. } => {
            need_grid("the drift-removal transform", out);
            if !(*lambda0 > 0.0) {
                out.push(format!("lambda0 must be positive, got {lambda0}"));
            }
        }
        OpSpec::Norm { f, family, load, norm, .. } => {
            need_grid("the norm evaluation", out);
            let given = usize::from(f.is_some())
                + usize::from(family.is_some())
                + usize::from(load.is_some());
            if given != 1 {
                out.push("exactly one of f, family, load must be given".into());
            }
            if let Some(f) = f {
                out.extend(f.violations(dim));
            }
            check_norm(norm, out);
        }
        OpSpec::Acceptance { criteria } => {
            for c in criteria {
                if !(1..=suite::CRITERION_COUNT).contains(c) {
                    out.push(format!(
                        "criterion {c} out of range 1..={}",
                        suite::CRITERION_COUNT
                    ));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One operation's outcome inside a report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowReport {
    pub index: usize,
    pub op: String,
    pub label: String,
    /// Seed the operation actually used.
    pub seed: u64,
    /// `pass` / `fail` when a band was declared, `ok` otherwise, `error`
    /// when the operation itself failed.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Versioned run report; identical reruns differ only in
/// `wall_clock_seconds`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub name: String,
    pub config_hash: String,
    pub pass: bool,
    pub wall_clock_seconds: f64,
    pub rows: Vec<RowReport>,
    pub scenario: serde_json::Value,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct RowOutcome {
    label: String,
    value: Option<f64>,
    std_error: Option<f64>,
    samples: Option<usize>,
    notes: Vec<String>,
    detail: Option<serde_json::Value>,
    band: Option<(bool, Vec<String>)>,
    csv: Vec<(String, String)>,
}

impl RowOutcome {
    fn new(label: impl Into<String>) -> RowOutcome {
        RowOutcome {
            label: label.into(),
            value: None,
            std_error: None,
            samples: None,
            notes: Vec::new(),
            detail: None,
            band: None,
            csv: Vec::new(),
        }
    }

    fn with_report(mut self, r: &EstimatorReport) -> RowOutcome {
        self.value = Some(r.value);
        self.std_error = Some(r.std_error);
        self.samples = Some(r.samples);
        self.notes.extend(r.notes.iter().cloned());
        self
    }

    fn apply_band(&mut self, band: &Option<Band>) {
        if let Some(band) = band {
            if !band.is_empty() {
                let value = self.value.unwrap_or(f64::NAN);
                let se = self.std_error.unwrap_or(0.0);
                self.band = Some(band.check(value, se));
            }
        }
    }
}

fn csv_table<T: Serialize>(header: &str, rows: &[T], fields: &[&str]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let v = serde_json::to_value(row).expect("row serializes");
        let mut first = true;
        for field in fields {
            if !first {
                out.push(',');
            }
            first = false;
            match &v[field] {
                serde_json::Value::Number(n) => {
                    let _ = write!(out, "{n}");
                }
                serde_json::Value::String(s) => {
                    let _ = write!(out, "{}", s.replace(',', ";"));
                }
                other => {
                    let _ = write!(out, "{}", canonical_value_string(other).replace(',', ";"));
                }
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Operation runners
// ---------------------------------------------------------------------------

fn zeros(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

/// σ sampled onto `grid` as a static matrix field.
fn sigma_field(cf: &CoefficientField, grid: Grid) -> Result<GridFn> {
    sample(grid, Rank::Matrix, false, |_, x, out| cf.sigma(0.0, x, out))
}

/// b sampled onto `grid` as a static vector field (exact for the analytic
/// families; lattice families reuse their stored drift).
fn drift_on_grid(cf: &CoefficientField, grid: Grid) -> Result<GridFn> {
    match cf.drift_field() {
        Some(b) => Ok(b.clone()),
        None => sample(grid, Rank::Vector, false, |_, x, out| cf.drift(0.0, x, out)),
    }
}

fn run_op(op: &OpSpec, scenario: &Scenario, index: usize, sgrid: Option<Grid>) -> Result<RowOutcome> {
    let seed = op.declared_seed().unwrap_or_else(|| sub_seed(scenario.seed, index as u64));
    let grid = op_grid(op.family(), sgrid);
    let horizon = grid.map_or(default_horizon(), |g| g.t_horizon);
    let need_grid = || grid.ok_or_else(|| Error::invalid("operation needs a [grid] table"));

    match op {
        OpSpec::Simulate { family, x0, paths, steps, with_flow, dump: _, band, .. } => {
            let cf = family.build(grid)?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, *with_flow)?;
            let radii: Vec<f64> = (0..*paths)
                .map(|j| ens.state(j, *steps).iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect();
            let rep = EstimatorReport::from_samples("mean terminal radius", &radii);
            let mut out = RowOutcome::new(format!("simulate {}", cf.name)).with_report(&rep);
            out.detail = Some(serde_json::json!({
                "t_horizon": horizon,
                "dt": ens.dt(),
                "with_flow": with_flow,
            }));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Krylov { family, x0, paths, steps, f, norm, window, restarted, band, .. } => {
            let g = need_grid()?;
            let cf = family.build(Some(g))?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let lattice = f.lattice(g)?;
            let np = norm.to_params(&g);
            let [t0, t1] = window.unwrap_or([0.0, horizon]);
            let rep = if *restarted {
                krylov_restarted(&cf, &x0, &lattice, &np, t0, t1, *steps, *paths, seed)?
            } else {
                let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, false)?;
                krylov_estimate(&ens, &lattice, &np, t0, t1)?
            };
            let mut out =
                RowOutcome::new(format!("krylov {} vs {}", f.label(), cf.name)).with_report(&rep);
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::KrylovLadder { family, x0, paths, steps, f, norm, deltas, theta, band, .. } => {
            let g = need_grid()?;
            let cf = family.build(Some(g))?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let lattice = f.lattice(g)?;
            let np = norm.to_params(&g);
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, false)?;
            let rows = krylov_ladder(&ens, &lattice, &np, deltas, *theta)?;
            let worst = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
            let mut out = RowOutcome::new(format!("short-window ladder {}", cf.name));
            out.value = Some(worst);
            out.samples = Some(*paths);
            out.detail = Some(serde_json::to_value(&rows).expect("ladder rows serialize"));
            out.csv.push((
                format!("row-{index:02}-ladder.csv"),
                csv_table("delta,ratio,std_error", &rows, &["delta", "ratio", "std_error"]),
            ));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Khasminskii { family, x0, paths, steps, f, gamma, band, .. } => {
            let g = need_grid()?;
            let cf = family.build(Some(g))?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let lattice = f.lattice(g)?;
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, false)?;
            let rep = khasminskii_estimate(&ens, &lattice, *gamma)?;
            let mut out = RowOutcome::new(format!(
                "exponential moment gamma={gamma} of {} under {}",
                f.label(),
                cf.name
            ))
            .with_report(&rep);
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Bel { family, x0, paths, steps, phi, fd_delta, target, k_se, .. } => {
            let cf = family.build(grid)?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let phi_fn = phi.closure();
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, true)?;
            let bel = bel_gradient(&cf, &ens, &*phi_fn, horizon)?;
            let (reference, ref_se, ref_name): (Vec<f64>, Vec<f64>, &str) = match target {
                Some(t) => (t.clone(), vec![0.0; cf.dim], "target"),
                None => {
                    let fd = fd_gradient(&cf, &x0, &*phi_fn, horizon, *steps, *paths, seed, *fd_delta)?;
                    (
                        fd.iter().map(|r| r.value).collect(),
                        fd.iter().map(|r| r.std_error).collect(),
                        "finite differences",
                    )
                }
            };
            let mut worst = 0.0f64;
            let mut gaps = Vec::with_capacity(cf.dim);
            for j in 0..cf.dim {
                let gap = (bel[j].value - reference[j]).abs();
                let se = bel[j].std_error.hypot(ref_se[j]);
                let standardized = if gap == 0.0 { 0.0 } else { gap / se };
                gaps.push(standardized);
                worst = worst.max(standardized);
            }
            let mut out = RowOutcome::new(format!(
                "gradient weight of {} for {} vs {ref_name}",
                phi.label(),
                cf.name
            ));
            out.value = Some(worst);
            out.samples = Some(*paths);
            out.detail = Some(serde_json::json!({
                "bel": bel,
                "reference": reference,
                "reference_se": ref_se,
                "standardized_gaps": gaps,
            }));
            out.band = Some(Band { max: Some(*k_se), ..Band::default() }.check(worst, 0.0));
            Ok(out)
        }
        OpSpec::Flow { family, starts, p_list, n_list, paths, steps, band, .. } => {
            let cf = family.build(grid)?;
            let starts = match starts {
                Some(s) => s.clone(),
                None => match grid {
                    Some(g) => coarse_start_lattice(&g),
                    None => vec![zeros(cf.dim)],
                },
            };
            let rows = flow_moment_survey(&cf, &starts, horizon, *steps, p_list, n_list, *paths, seed)?;
            let value = if n_list.len() > 1 {
                let mut worst = 0.0f64;
                for p in p_list {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.p == *p)
                        .map(|r| r.value)
                        .collect();
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    worst = worst.max(hi / lo);
                }
                worst
            } else {
                rows.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max)
            };
            let mut out = RowOutcome::new(format!("flow moments {}", cf.name));
            out.value = Some(value);
            out.samples = Some(*paths);
            if n_list.len() > 1 {
                out.notes.push("value is the worst max/min spread across levels".into());
            }
            out.detail = Some(serde_json::to_value(&rows).expect("survey rows serialize"));
            out.csv.push((
                format!("row-{index:02}-flow.csv"),
                csv_table(
                    "level,p,value,std_error",
                    &rows,
                    &["level", "p", "value", "std_error"],
                ),
            ));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Contraction { family, y1, y2, p, paths, steps, band, .. } => {
            let cf = family.build(grid)?;
            let rep = pathwise_contraction(&cf, y1, y2, horizon, *steps, *p, *paths, seed)?;
            let mut out = RowOutcome::new(format!("contraction p={p} {}", cf.name)).with_report(&rep);
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Tightness { family, x0, deltas, paths, steps, band, .. } => {
            let cf = family.build(grid)?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, false)?;
            let rows = tightness_modulus(&ens, deltas)?;
            let mut out = RowOutcome::new(format!("modulus of continuity {}", cf.name));
            out.samples = Some(*paths);
            if rows.len() >= 2 && rows.iter().all(|r| r.value > 0.0) {
                let xs: Vec<f64> = rows.iter().map(|r| r.delta).collect();
                let ys: Vec<f64> = rows.iter().map(|r| r.value).collect();
                out.value = Some(loglog_slope(&xs, &ys));
                out.notes.push("value is the fitted log-log slope".into());
            } else if rows.iter().all(|r| r.value == 0.0) {
                out.value = Some(0.0);
                out.notes.push("modulus identically zero (frozen dynamics)".into());
            } else {
                out.value = rows.first().map(|r| r.value);
            }
            out.detail = Some(serde_json::to_value(&rows).expect("modulus rows serialize"));
            out.csv.push((
                format!("row-{index:02}-tightness.csv"),
                csv_table("delta,value,std_error", &rows, &["delta", "value", "std_error"]),
            ));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::WeakAgree { family, shapes, levels, battery, x0, paths, steps, k_se, .. } => {
            let g = need_grid()?;
            let (first, second, what) = if let Some([n1, n2]) = levels {
                let mut fam1 = family.clone();
                fam1.level = Some(*n1);
                let mut fam2 = family.clone();
                fam2.level = Some(*n2);
                (fam1.build(Some(g))?, fam2.build(Some(g))?, format!("levels {n1} vs {n2}"))
            } else {
                let [a, b] = shapes.clone().unwrap_or_else(|| {
                    ["gaussian-truncated".into(), "polynomial-bump".into()]
                });
                let mut fam1 = family.clone();
                fam1.shape = Some(a.clone());
                let mut fam2 = family.clone();
                fam2.shape = Some(b.clone());
                (fam1.build(Some(g))?, fam2.build(Some(g))?, format!("shapes {a} vs {b}"))
            };
            let x0 = x0.clone().unwrap_or_else(|| zeros(first.dim));
            let mut named = Vec::with_capacity(battery.len());
            for f in battery {
                named.push((f.label(), f.lattice(g)?));
            }
            let rows = weak_agreement(&first, &second, &named, &x0, horizon, *steps, *paths, seed)?;
            let mut worst = 0.0f64;
            for r in &rows {
                let standardized = if r.difference == 0.0 {
                    0.0
                } else if r.combined_se == 0.0 {
                    f64::INFINITY
                } else {
                    r.difference.abs() / r.combined_se
                };
                worst = worst.max(standardized);
            }
            let mut out = RowOutcome::new(format!("weak agreement {} ({what})", family.id));
            out.value = Some(worst);
            out.samples = Some(*paths);
            out.notes.push("value is the worst |difference| in combined standard errors".into());
            out.detail = Some(serde_json::to_value(&rows).expect("agreement rows serialize"));
            out.csv.push((
                format!("row-{index:02}-weak-agree.csv"),
                csv_table(
                    "label,first,second,difference,combined_se",
                    &rows,
                    &["label", "first", "second", "difference", "combined_se"],
                ),
            ));
            out.band = Some(Band { max: Some(*k_se), ..Band::default() }.check(worst, 0.0));
            Ok(out)
        }
        OpSpec::PdeSolve { family, lambda, f, dump: _, band } => {
            let g = need_grid()?;
            let cf = family.build(Some(g))?;
            let sigma = sigma_field(&cf, g)?;
            let a = half_diffusion(&sigma)?;
            let b = drift_on_grid(&cf, g)?;
            let source = f.lattice(g)?;
            let u = solve_forward(ParabolicProblem {
                a: &a,
                b: Some(&b),
                lambda: *lambda,
                f: Some(&source),
            })?;
            let mut out = RowOutcome::new(format!(
                "forward solve lambda={lambda}, source {}, {}",
                f.label(),
                cf.name
            ));
            out.value = Some(u.max_magnitude());
            out.notes.push("value is the sup magnitude of the solution".into());
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::MaxReg { lambdas, norm, sources, band } => {
            let g = need_grid()?;
            let sigma = sample(g, Rank::Matrix, false, |_, _, out| {
                let d = g.dim;
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            })?;
            let a = half_diffusion(&sigma)?;
            let np = norm.to_params(&g);
            let family = suite::smooth_source_family(g, *sources)?;
            let mut all = Vec::new();
            let mut per_lambda = Vec::new();
            for lambda in lambdas {
                let report = max_reg_survey(&a, None, *lambda, &family, &np)?;
                let worst =
                    report.rows.iter().map(|r| r.lambda_term).fold(f64::NEG_INFINITY, f64::max);
                per_lambda.push(worst);
                for row in &report.rows {
                    all.push(serde_json::json!({
                        "lambda": lambda,
                        "source": row.source,
                        "lambda_term": row.lambda_term,
                        "dt_term": row.dt_term,
                        "second_order_term": row.second_order_term,
                    }));
                }
            }
            let hi = per_lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = per_lambda.iter().cloned().fold(f64::INFINITY, f64::min);
            let value = if lambdas.len() > 1 { hi / lo } else { hi };
            let mut out = RowOutcome::new(format!(
                "regularity ratios over {} sources, {} dampings",
                sources,
                lambdas.len()
            ));
            out.value = Some(value);
            if lambdas.len() > 1 {
                out.notes.push("value is the max/min spread of the damping term".into());
            }
            out.detail = Some(serde_json::Value::Array(all.clone()));
            let mut csv = String::from("lambda,source,lambda_term,dt_term,second_order_term\n");
            for row in &all {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    row["lambda"],
                    row["source"],
                    row["lambda_term"],
                    row["dt_term"],
                    row["second_order_term"]
                );
            }
            out.csv.push((format!("row-{index:02}-maxreg.csv"), csv));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Zvonkin { family, lambda0, dump: _, band } => {
            let g = need_grid()?;
            let cf = family.build(Some(g))?;
            let sigma = sigma_field(&cf, g)?;
            let b = drift_on_grid(&cf, g)?;
            let tf = build_transform(&sigma, &b, *lambda0)?;
            let a_tilde = half_diffusion(&tf.transformed_coefficients(&sigma)?.sigma_tilde)?;
            let cert = certify(&a_tilde)?;
            let mut out = RowOutcome::new(format!("drift removal {}", cf.name));
            out.value = Some(tf.smallness);
            out.detail = Some(serde_json::json!({
                "lambda": tf.lambda,
                "smallness": tf.smallness,
                "max_grad_phi": tf.max_grad_phi(),
                "ellipticity_range": [cert.rayleigh_min, cert.rayleigh_max],
                "c0": cert.c0,
                "trace": tf.trace,
            }));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Norm { f, family, load, norm, band } => {
            let g = need_grid()?;
            let field = if let Some(f) = f {
                f.lattice(g)?
            } else if let Some(fam) = family {
                let cf = fam.build(Some(g))?;
                drift_on_grid(&cf, g)?.magnitude()
            } else if let Some(path) = load {
                let loaded = read_gridfn(Path::new(path), g.half_width, g.t_horizon, g.nt)?;
                if loaded.rank == Rank::Scalar {
                    loaded
                } else {
                    loaded.magnitude()
                }
            } else {
                return Err(Error::invalid("norm operation needs one of f, family, load"));
            };
            let np = norm.to_params(&g);
            let report = localized_norm(&field, &np)?;
            let mut out = RowOutcome::new("localized space-time norm".to_string());
            out.value = Some(report.value);
            out.detail = Some(serde_json::json!({
                "value": report.value,
                "argmax_z": report.argmax_z,
                "params": np,
            }));
            out.apply_band(band);
            Ok(out)
        }
        OpSpec::Acceptance { criteria } => {
            let list: Vec<usize> = if criteria.is_empty() {
                (1..=suite::CRITERION_COUNT).collect()
            } else {
                let set: BTreeSet<usize> = criteria.iter().cloned().collect();
                set.into_iter().collect()
            };
            let mut outcomes = Vec::with_capacity(list.len());
            for c in &list {
                outcomes.push(suite::run_criterion(*c)?);
            }
            let passed = outcomes.iter().filter(|o| o.pass).count();
            let mut out = RowOutcome::new(format!(
                "acceptance criteria {:?}",
                list.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
            ));
            out.value = Some(passed as f64);
            out.samples = Some(list.len());
            for o in &outcomes {
                out.notes.push(format!(
                    "criterion {} ({}): {}",
                    o.index,
                    o.name,
                    if o.pass { "pass" } else { "FAIL" }
                ));
            }
            out.detail = Some(serde_json::to_value(&outcomes).expect("outcomes serialize"));
            out.band = Some((
                passed == list.len(),
                outcomes
                    .iter()
                    .filter(|o| !o.pass)
                    .map(|o| format!("criterion {} failed: {}", o.index, o.lines.join(" | ")))
                    .collect(),
            ));
            Ok(out)
        }
    }
}

/// Writes dump files declared by an operation (paths and field snapshots).
fn run_op_dumps(op: &OpSpec, scenario: &Scenario, index: usize, sgrid: Option<Grid>, dir: &Path) -> Result<Vec<String>> {
    let seed = op.declared_seed().unwrap_or_else(|| sub_seed(scenario.seed, index as u64));
    let grid = op_grid(op.family(), sgrid);
    let horizon = grid.map_or(default_horizon(), |g| g.t_horizon);
    let mut written = Vec::new();
    match op {
        OpSpec::Simulate { family, x0, paths, steps, with_flow, dump: Some(file), .. } => {
            let cf = family.build(grid)?;
            let x0 = x0.clone().unwrap_or_else(|| zeros(cf.dim));
            let ens = simulate(&cf, &x0, horizon, *steps, *paths, seed, *with_flow)?;
            let path = dir.join(file);
            write_paths(ens.dim, ens.paths, ens.steps, &ens.states, &path)?;
            written.push(file.clone());
        }
        OpSpec::PdeSolve { family, lambda, f, dump: Some(file), .. } => {
            let g = grid.ok_or_else(|| Error::invalid("operation needs a [grid] table"))?;
            let cf = family.build(Some(g))?;
            let sigma = sigma_field(&cf, g)?;
            let a = half_diffusion(&sigma)?;
            let b = drift_on_grid(&cf, g)?;
            let source = f.lattice(g)?;
            let u = solve_forward(ParabolicProblem {
                a: &a,
                b: Some(&b),
                lambda: *lambda,
                f: Some(&source),
            })?;
            write_gridfn(&u, &dir.join(file))?;
            written.push(file.clone());
        }
        OpSpec::Zvonkin { family, lambda0, dump: Some(file), .. } => {
            let g = grid.ok_or_else(|| Error::invalid("operation needs a [grid] table"))?;
            let cf = family.build(Some(g))?;
            let sigma = sigma_field(&cf, g)?;
            let b = drift_on_grid(&cf, g)?;
            let tf = build_transform(&sigma, &b, *lambda0)?;
            write_gridfn(&tf.u, &dir.join(file))?;
            written.push(file.clone());
        }
        _ => {}
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Scenario runner
// ---------------------------------------------------------------------------

/// Runs every operation of a validated scenario and assembles the report.
///
/// `config_value` is the canonical JSON form of the scenario source (file
/// text or constructed in memory); its digest lands in `config_hash`.
/// Per-operation failures are captured in their row; only output-directory
/// I/O failures abort the run.
pub fn run_scenario(
    sc: &Scenario,
    config_value: &serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    let start = Instant::now();
    let sgrid = sc.grid.as_ref().and_then(|gs| gs.build().ok());
    let results: Vec<(RowReport, Vec<(String, String)>)> = sc
        .ops
        .par_iter()
        .enumerate()
        .map(|(index, op)| {
            let seed =
                op.declared_seed().unwrap_or_else(|| sub_seed(sc.seed, index as u64));
            match run_op(op, sc, index, sgrid) {
                Ok(outcome) => {
                    let status = match &outcome.band {
                        None => "ok",
                        Some((true, _)) => "pass",
                        Some((false, _)) => "fail",
                    };
                    let mut notes = outcome.notes;
                    if let Some((_, reasons)) = &outcome.band {
                        notes.extend(reasons.iter().cloned());
                    }
                    (
                        RowReport {
                            index,
                            op: op.kind().into(),
                            label: outcome.label,
                            seed,
                            status: status.into(),
                            value: outcome.value,
                            std_error: outcome.std_error,
                            samples: outcome.samples,
                            notes,
                            detail: outcome.detail,
                            error: None,
                        },
                        outcome.csv,
                    )
                }
                Err(e) => (
                    RowReport {
                        index,
                        op: op.kind().into(),
                        label: op.kind().into(),
                        seed,
                        status: "error".into(),
                        value: None,
                        std_error: None,
                        samples: None,
                        notes: Vec::new(),
                        detail: None,
                        error: Some(e.to_string()),
                    },
                    Vec::new(),
                ),
            }
        })
        .collect();

    let pass = results.iter().all(|(row, _)| row.status == "ok" || row.status == "pass");
    let mut rows = Vec::with_capacity(results.len());
    let mut csvs = Vec::new();
    for (row, mut csv) in results {
        rows.push(row);
        csvs.append(&mut csv);
    }

    let mut report = RunReport {
        version: REPORT_VERSION.into(),
        name: sc.name.clone(),
        config_hash: hash_of_value(config_value),
        pass,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        rows,
        scenario: serde_json::to_value(sc).expect("scenario serializes"),
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        // Dumps rerun their operation deterministically (same seed), so a
        // dump never perturbs the report rows.
        for (index, op) in sc.ops.iter().enumerate() {
            match run_op_dumps(op, sc, index, sgrid, dir) {
                Ok(files) => {
                    for f in files {
                        report.rows[index].notes.push(format!("dump written: {f}"));
                    }
                }
                Err(e) => report.rows[index].notes.push(format!("dump failed: {e}")),
            }
        }
        for (name, text) in &csvs {
            fs::write(dir.join(name), text)?;
        }
        fs::write(dir.join("report.json"), report.to_json() + "\n")?;
    }
    Ok(report)
}

/// Human-readable family catalog (one block per family).
pub fn list_families_text() -> String {
    let mut out = String::new();
    for info in catalog() {
        let _ = writeln!(out, "family {}: {}", info.id, info.summary);
        let _ = writeln!(out, "  parameters:    {}", info.parameters);
        let _ = writeln!(out, "  admissibility: {}", info.admissibility);
        let _ = writeln!(out, "  default grid:  {}", info.default_grid);
    }
    out
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "zvonkin-lab",
    version,
    about = "Numerical laboratory for singular-drift diffusions on a periodic lattice"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the single-operation subcommands.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Coefficient family id (a, b, c, d, e).
    #[arg(long, default_value = "a")]
    pub family: String,
    /// Mollification level n (width 1/n) for families c, d, e.
    #[arg(long)]
    pub level: Option<usize>,
    /// Mollification width; rounded to the nearest level 1/width.
    #[arg(long)]
    pub mollify_eps: Option<f64>,
    /// Mollifier shape (gaussian-truncated or polynomial-bump).
    #[arg(long)]
    pub shape: Option<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Euler steps over the horizon.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start point, comma-separated (defaults to the origin).
    #[arg(long)]
    pub x0: Option<String>,
    /// Spatial resolution override.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time-slab override.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Output directory for report.json, CSV tables, and dumps.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rayon worker threads (defaults to one per CPU).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl CommonArgs {
    fn family_spec(&self) -> FamilySpec {
        let level = self.level.or_else(|| {
            self.mollify_eps.map(|eps| (1.0 / eps).round().max(1.0) as usize)
        });
        FamilySpec {
            id: self.family.clone(),
            dim: None,
            kappa: None,
            level,
            shape: self.shape.clone(),
        }
    }

    fn x0_vec(&self) -> std::result::Result<Option<Vec<f64>>, String> {
        match &self.x0 {
            None => Ok(None),
            Some(text) => text
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad x0 entry {t:?}: {e}")))
                .collect::<std::result::Result<Vec<f64>, String>>()
                .map(Some),
        }
    }

    fn grid_spec(&self) -> std::result::Result<GridSpec, String> {
        let fam = self.family_spec();
        let mut gs = fam.default_grid().map_err(|e| e.to_string())?;
        if let Some(nx) = self.nx {
            gs.nx = nx;
        }
        if let Some(nt) = self.nt {
            gs.nt = nt;
        }
        Ok(gs)
    }

    fn paths(&self) -> usize {
        self.paths.unwrap_or_else(default_paths)
    }

    fn steps(&self) -> usize {
        self.steps.unwrap_or_else(default_steps)
    }
}

fn parse_f64_list(text: &str, what: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad {what} entry {t:?}: {e}")))
        .collect()
}

fn parse_usize_list(text: &str, what: &str) -> std::result::Result<Vec<usize>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad {what} entry {t:?}: {e}")))
        .collect()
}

/// Parses a test-function expression: `one`, `r2`, `coord:AXIS`, `sin:AXIS`,
/// `bump:CX,CY[,CZ]:RADIUS`, `gauss:CX,CY[,CZ]:WIDTH`.
pub fn parse_testfn(text: &str) -> std::result::Result<TestFnSpec, String> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["one"] => Ok(TestFnSpec::One),
        ["r2"] => Ok(TestFnSpec::R2),
        ["coord", axis] => axis
            .parse()
            .map(|axis| TestFnSpec::Coord { axis })
            .map_err(|e| format!("bad axis {axis:?}: {e}")),
        ["sin", axis] => axis
            .parse()
            .map(|axis| TestFnSpec::Sin { axis })
            .map_err(|e| format!("bad axis {axis:?}: {e}")),
        ["bump", center, radius] => Ok(TestFnSpec::Bump {
            center: parse_f64_list(center, "center")?,
            radius: radius.parse().map_err(|e| format!("bad radius {radius:?}: {e}"))?,
        }),
        ["gauss", center, width] => Ok(TestFnSpec::Gauss {
            center: parse_f64_list(center, "center")?,
            width: width.parse().map_err(|e| format!("bad width {width:?}: {e}"))?,
        }),
        _ => Err(format!(
            "unknown test function {text:?} (expected one, r2, coord:AXIS, sin:AXIS, \
             bump:CENTER:RADIUS, gauss:CENTER:WIDTH)"
        )),
    }
}

fn parse_time_exponent(text: &str) -> std::result::Result<TimeExponent, String> {
    if text == "inf" {
        Ok(TimeExponent::Sup)
    } else {
        text.parse::<f64>()
            .map(TimeExponent::Finite)
            .map_err(|e| format!("bad time exponent {text:?}: {e}"))
    }
}

/// Norm flags shared by krylov/maxreg/norm subcommands.
#[derive(Args, Debug, Clone)]
pub struct NormArgs {
    /// Spatial integrability exponent p.
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Time integrability exponent q (a number or `inf`).
    #[arg(long, default_value = "inf")]
    pub q: String,
    /// Smoothness index alpha.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Localization radius.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
}

impl NormArgs {
    fn to_spec(&self) -> std::result::Result<NormSpec, String> {
        Ok(NormSpec {
            alpha: self.alpha,
            p: self.p,
            q: parse_time_exponent(&self.q)?,
            radius: self.radius,
        })
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a scenario file and list every violation.
    Validate {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a scenario file and write its report.
    Run {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the scenario's own `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rayon worker threads.
        #[arg(long)]
        workers: Option<usize>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the coefficient-family catalog.
    ListFamilies,
    /// Euler ensemble; optionally dump paths.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also evolve the derivative flow.
        #[arg(long)]
        with_flow: bool,
        /// Dump file for the ensemble (`paths v1`), relative to --out.
        #[arg(long)]
        dump: Option<String>,
    },
    /// Occupation-functional estimate against the localized source norm.
    Krylov {
        #[command(flatten)]
        common: CommonArgs,
        /// Test function expression.
        #[arg(long, default_value = "one")]
        f: String,
        #[command(flatten)]
        norm: NormArgs,
        /// Use the Markov-restart estimator.
        #[arg(long)]
        restarted: bool,
    },
    /// Exponential occupation moment.
    Khasminskii {
        #[command(flatten)]
        common: CommonArgs,
        /// Test function expression.
        #[arg(long, default_value = "one")]
        f: String,
        /// Exponential rate.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Probabilistic-weight gradient vs finite differences.
    Bel {
        #[command(flatten)]
        common: CommonArgs,
        /// Observable expression.
        #[arg(long, default_value = "coord:0")]
        phi: String,
        /// Finite-difference offset.
        #[arg(long, default_value_t = 0.02)]
        fd_delta: f64,
    },
    /// Flow moment survey across mollification levels.
    Flow {
        #[command(flatten)]
        common: CommonArgs,
        /// Moments, comma-separated.
        #[arg(long, default_value = "2")]
        p_list: String,
        /// Mollification levels, comma-separated.
        #[arg(long, default_value = "4")]
        n_list: String,
    },
    /// Expected square-root modulus of continuity.
    Tightness {
        #[command(flatten)]
        common: CommonArgs,
        /// Time gaps, comma-separated.
        #[arg(long, default_value = "0.0625,0.125,0.25")]
        deltas: String,
    },
    /// Weak agreement between two builds of a family.
    WeakAgree {
        #[command(flatten)]
        common: CommonArgs,
        /// Battery of test functions, semicolon-separated expressions.
        #[arg(long, default_value = "one;r2")]
        battery: String,
        /// Agreement threshold in combined standard errors.
        #[arg(long, default_value_t = 3.0)]
        k_se: f64,
    },
    /// Damped forward solve.
    PdeSolve {
        #[command(flatten)]
        common: CommonArgs,
        /// Damping.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Source expression.
        #[arg(long, default_value = "one")]
        f: String,
        /// Dump file for the solution (`gridfn v1`), relative to --out.
        #[arg(long)]
        dump: Option<String>,
    },
    /// Parabolic regularity ratios over a smooth source family.
    Maxreg {
        #[command(flatten)]
        common: CommonArgs,
        /// Damping sweep, comma-separated.
        #[arg(long, default_value = "1,4,16,64")]
        lambdas: String,
        /// Number of smooth sources.
        #[arg(long, default_value_t = 10)]
        sources: usize,
        #[command(flatten)]
        norm: NormArgs,
    },
    /// Drift-removal transform and its diagnostics.
    Zvonkin {
        #[command(flatten)]
        common: CommonArgs,
        /// Initial damping for the smallness calibration.
        #[arg(long, default_value_t = 1.0)]
        lambda0: f64,
        /// Dump file for the vector potential (`gridfn v1`), relative to --out.
        #[arg(long)]
        dump: Option<String>,
    },
    /// Localized space-time norm of a test function or a family drift.
    Norm {
        #[command(flatten)]
        common: CommonArgs,
        /// Test function expression; `drift` selects the family's drift.
        #[arg(long, default_value = "one")]
        f: String,
        /// Load a `gridfn v1` snapshot instead of sampling.
        #[arg(long)]
        load: Option<String>,
        #[command(flatten)]
        norm: NormArgs,
    },
}

fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Builds a one-operation scenario for a quick subcommand.
fn quick_scenario(
    kind: &str,
    common: &CommonArgs,
    grid: GridSpec,
    op: OpSpec,
) -> Scenario {
    Scenario {
        name: format!("cli-{kind}"),
        seed: common.seed.unwrap_or_else(default_seed),
        out_dir: None,
        grid: Some(grid),
        budget: BudgetSpec::default(),
        ops: vec![op],
    }
}

fn run_and_report(sc: &Scenario, out: Option<&Path>) -> i32 {
    let violations = validate_scenario(sc);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return 2;
    }
    let value = serde_json::to_value(sc).expect("scenario serializes");
    let effective_out: Option<PathBuf> =
        out.map(Path::to_path_buf).or_else(|| sc.out_dir.clone().map(PathBuf::from));
    match run_scenario(sc, &value, effective_out.as_deref()) {
        Ok(report) => {
            println!("{}", report.to_json());
            if report.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match cli.command {
        Command::Validate { config } => {
            let text = match fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return 2;
                }
            };
            let violations = match parse_scenario(&text) {
                Ok(sc) => validate_scenario(&sc),
                Err(v) => v,
            };
            if violations.is_empty() {
                println!("scenario is valid");
                0
            } else {
                for v in &violations {
                    println!("violation: {v}");
                }
                2
            }
        }
        Command::Run { config, out, workers, seed } => {
            init_workers(workers);
            let text = match fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return 2;
                }
            };
            let mut sc = match parse_scenario(&text) {
                Ok(sc) => sc,
                Err(violations) => {
                    for v in &violations {
                        eprintln!("violation: {v}");
                    }
                    return 2;
                }
            };
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let violations = validate_scenario(&sc);
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                return 2;
            }
            // Hash the file text when no override is in play, so the digest
            // matches the canonicalized document the user wrote.
            let value = if seed.is_some() {
                serde_json::to_value(&sc).expect("scenario serializes")
            } else {
                match text.parse::<toml::Value>() {
                    Ok(v) => serde_json::to_value(&v).expect("toml converts to json"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 2;
                    }
                }
            };
            let effective_out: Option<PathBuf> =
                out.or_else(|| sc.out_dir.clone().map(PathBuf::from));
            match run_scenario(&sc, &value, effective_out.as_deref()) {
                Ok(report) => {
                    println!("{}", report.to_json());
                    if report.pass {
                        0
                    } else {
                        1
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    2
                }
            }
        }
        Command::ListFamilies => {
            print!("{}", list_families_text());
            0
        }
        Command::Simulate { common, with_flow, dump } => {
            init_workers(common.workers);
            let (grid, x0) = match (common.grid_spec(), common.x0_vec()) {
                (Ok(g), Ok(x)) => (g, x),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Simulate {
                family: common.family_spec(),
                x0,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                with_flow,
                dump,
                band: None,
            };
            let sc = quick_scenario("simulate", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Krylov { common, f, norm, restarted } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Option<Vec<f64>>, TestFnSpec, NormSpec), String> {
                Ok((common.grid_spec()?, common.x0_vec()?, parse_testfn(&f)?, norm.to_spec()?))
            })();
            let (grid, x0, f, norm) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Krylov {
                family: common.family_spec(),
                x0,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                f,
                norm,
                window: None,
                restarted,
                band: None,
            };
            let sc = quick_scenario("krylov", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Khasminskii { common, f, gamma } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Option<Vec<f64>>, TestFnSpec), String> {
                Ok((common.grid_spec()?, common.x0_vec()?, parse_testfn(&f)?))
            })();
            let (grid, x0, f) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Khasminskii {
                family: common.family_spec(),
                x0,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                f,
                gamma,
                band: None,
            };
            let sc = quick_scenario("khasminskii", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Bel { common, phi, fd_delta } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Option<Vec<f64>>, TestFnSpec), String> {
                Ok((common.grid_spec()?, common.x0_vec()?, parse_testfn(&phi)?))
            })();
            let (grid, x0, phi) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Bel {
                family: common.family_spec(),
                x0,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                phi,
                fd_delta,
                target: None,
                k_se: OpSpec::default_k_se(),
            };
            let sc = quick_scenario("bel", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Flow { common, p_list, n_list } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Vec<f64>, Vec<usize>), String> {
                Ok((
                    common.grid_spec()?,
                    parse_f64_list(&p_list, "p_list")?,
                    parse_usize_list(&n_list, "n_list")?,
                ))
            })();
            let (grid, p_list, n_list) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Flow {
                family: common.family_spec(),
                starts: None,
                p_list,
                n_list,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                band: None,
            };
            let sc = quick_scenario("flow", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Tightness { common, deltas } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Option<Vec<f64>>, Vec<f64>), String> {
                Ok((common.grid_spec()?, common.x0_vec()?, parse_f64_list(&deltas, "deltas")?))
            })();
            let (grid, x0, deltas) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Tightness {
                family: common.family_spec(),
                x0,
                deltas,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                band: None,
            };
            let sc = quick_scenario("tightness", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::WeakAgree { common, battery, k_se } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Option<Vec<f64>>, Vec<TestFnSpec>), String> {
                let fns = battery
                    .split(';')
                    .map(parse_testfn)
                    .collect::<std::result::Result<Vec<_>, String>>()?;
                Ok((common.grid_spec()?, common.x0_vec()?, fns))
            })();
            let (grid, x0, battery) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::WeakAgree {
                family: common.family_spec(),
                shapes: None,
                levels: None,
                battery,
                x0,
                paths: common.paths(),
                steps: common.steps(),
                seed: None,
                k_se,
            };
            let sc = quick_scenario("weak-agree", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::PdeSolve { common, lambda, f, dump } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, TestFnSpec), String> {
                Ok((common.grid_spec()?, parse_testfn(&f)?))
            })();
            let (grid, f) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::PdeSolve { family: common.family_spec(), lambda, f, dump, band: None };
            let sc = quick_scenario("pde-solve", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Maxreg { common, lambdas, sources, norm } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, Vec<f64>, NormSpec), String> {
                Ok((common.grid_spec()?, parse_f64_list(&lambdas, "lambdas")?, norm.to_spec()?))
            })();
            let (grid, lambdas, norm) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::MaxReg { lambdas, norm, sources, band: None };
            let sc = quick_scenario("maxreg", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Zvonkin { common, lambda0, dump } => {
            init_workers(common.workers);
            let grid = match common.grid_spec() {
                Ok(g) => g,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = OpSpec::Zvonkin { family: common.family_spec(), lambda0, dump, band: None };
            let sc = quick_scenario("zvonkin", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
        Command::Norm { common, f, load, norm } => {
            init_workers(common.workers);
            let parsed = (|| -> std::result::Result<(GridSpec, NormSpec), String> {
                Ok((common.grid_spec()?, norm.to_spec()?))
            })();
            let (grid, norm) = match parsed {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("violation: {e}");
                    return 2;
                }
            };
            let op = if load.is_some() {
                OpSpec::Norm { f: None, family: None, load, norm, band: None }
            } else if f == "drift" {
                OpSpec::Norm {
                    f: None,
                    family: Some(common.family_spec()),
                    load: None,
                    norm,
                    band: None,
                }
            } else {
                match parse_testfn(&f) {
                    Ok(spec) => OpSpec::Norm {
                        f: Some(spec),
                        family: None,
                        load: None,
                        norm,
                        band: None,
                    },
                    Err(e) => {
                        eprintln!("violation: {e}");
                        return 2;
                    }
                }
            };
            let sc = quick_scenario("norm", &common, grid, op);
            run_and_report(&sc, common.out.as_deref())
        }
    }
}

/// Parses `std::env::args` and runs; used by the binary's `main`.
pub fn main() -> i32 {
    main_with(Cli::parse())
}
