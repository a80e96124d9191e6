//! Euler–Maruyama ensembles over the coefficient families, plus the
//! estimator battery built on them.
//!
//! Five coefficient families drive the experiments: A (unit diffusion, no
//! drift), B (linear contraction b = −κx, solver calibration only),
//! C (subcritical singular drift in d = 2), D (critical L^d-type drift in
//! d = 3), and E (Sobolev-regular scalar diffusion).  Singular families are
//! sampled on the lattice with the singular center at the half-cell offset,
//! mollified at width ε_n = 1/n, and evaluated off-lattice by multilinear
//! interpolation, so every evaluator is globally bounded and periodic.
//!
//! Ensembles retain states and Brownian increments (and flow matrices from
//! the variational equation when requested).  Each path owns a counter-seeded
//! generator, so ensembles are bit-identical for any worker count; estimator
//! reductions run in canonical path order via pairwise summation.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{sample, Grid, GridFn, Mollifier, MollifierShape, Rank};
use crate::norms::{localized_norm, NormParams};
use crate::pde::certify;
use crate::rng::{path_rng, sub_seed};
use crate::stats::{mean_se, EstimatorReport};
use crate::zvonkin::{half_diffusion, vector_jacobian};

/// Hard cap on retained ensemble storage (f64 slots ≈ 2 GB).
pub const MAX_ENSEMBLE_DOUBLES: u128 = 250_000_000;

/// Default linear-drift rate for family B.
pub const FAMILY_B_KAPPA: f64 = 1.0;

const C_STRENGTH: f64 = 0.5;
const C_EXPONENT: f64 = 0.3;
const C_RADIUS: f64 = 0.8;
const D_STRENGTH: f64 = 0.4;
const D_EXPONENT: f64 = 0.9;
const D_RADIUS: f64 = 0.8;
const E_AMPLITUDE: f64 = 0.3;
const E_EXPONENT: f64 = 0.7;
const E_RADIUS: f64 = 0.8;

/// RNG stream tag for the restarted (conditional) Krylov phase.
const RESTART_TAG: u64 = 0x5245_5354;

/// The five coefficient families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FamilyId {
    A,
    B,
    C,
    D,
    E,
}

impl FamilyId {
    /// One-letter identifier used by the CLI and reports.
    pub fn token(self) -> &'static str {
        match self {
            FamilyId::A => "A",
            FamilyId::B => "B",
            FamilyId::C => "C",
            FamilyId::D => "D",
            FamilyId::E => "E",
        }
    }

    /// Parses the one-letter identifier.
    pub fn from_token(tok: &str) -> Result<FamilyId> {
        match tok.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(FamilyId::A),
            "B" => Ok(FamilyId::B),
            "C" => Ok(FamilyId::C),
            "D" => Ok(FamilyId::D),
            "E" => Ok(FamilyId::E),
            other => Err(Error::invalid(format!("unknown family id {other:?}"))),
        }
    }
}

/// Catalog row describing one family for `list-families`.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyInfo {
    pub id: &'static str,
    pub summary: &'static str,
    pub parameters: &'static str,
    pub admissibility: &'static str,
    pub default_grid: &'static str,
}

/// Static descriptions of the five families.
pub fn catalog() -> Vec<FamilyInfo> {
    vec![
        FamilyInfo {
            id: "A",
            summary: "unit diffusion, zero drift (Brownian motion)",
            parameters: "none",
            admissibility: "smooth; every (p, q) window admissible",
            default_grid: "d=2, L=pi, Nx=64, Nt=128, T=1",
        },
        FamilyInfo {
            id: "B",
            summary: "linear contraction b = -kappa*x, unit diffusion (solver-test only)",
            parameters: "kappa = 1",
            admissibility: "smooth closed forms; used to calibrate weak order",
            default_grid: "d=2, L=pi, Nx=64, Nt=128, T=1",
        },
        FamilyInfo {
            id: "C",
            summary: "subcritical singular drift c*(x/|x|)|x|^-0.3 * chi, off-lattice center",
            parameters: "c = 0.5, exponent 0.3, cutoff radius 0.8, eps_n = 1/n",
            admissibility: "subcritical: d/p = 2/5 (p = 5, q = inf), d/p + 2/q < 1",
            default_grid: "d=2, L=pi, Nx=64, Nt=128, T=1",
        },
        FamilyInfo {
            id: "D",
            summary: "critical L^d-type drift c*(x/|x|)|x|^-0.9 * chi in d = 3",
            parameters: "c = 0.4, exponent 0.9, cutoff radius 0.8, eps_n = 1/n",
            admissibility: "critical: b in the uniform localized L^d class (p-index d), uniform in n",
            default_grid: "d=3, L=pi, Nx=32, Nt=128, T=1",
        },
        FamilyInfo {
            id: "E",
            summary: "Sobolev scalar diffusion sigma = (1 + 0.3|x|^0.7 * chi) * I, zero drift",
            parameters: "amplitude 0.3, exponent 0.7, cutoff radius 0.8, eps_n = 1/n",
            admissibility: "sigma Sobolev but not Lipschitz; drift-free",
            default_grid: "d=2, L=pi, Nx=64, Nt=128, T=1",
        },
    ]
}

/// Coarse generic lattice of survey starting points.
///
/// The 3^d points with coordinates in {−L/2, 0, L/2}, skipping any start
/// closer than 0.3 to the singular half-cell center: there the Euler step
/// (√Δt comparable to ε) cannot resolve the mollification ball, so moment
/// surveys from such starts measure step-resolution artifacts rather than
/// the coefficients.
pub fn coarse_start_lattice(grid: &Grid) -> Vec<Vec<f64>> {
    let vals = [-0.5 * grid.half_width, 0.0, 0.5 * grid.half_width];
    let zeta = grid.half_cell_offset();
    let d = grid.dim;
    let mut pts = Vec::new();
    for code in 0..3usize.pow(d as u32) {
        let mut c = code;
        let mut x = vec![0.0; d];
        for slot in x.iter_mut() {
            *slot = vals[c % 3];
            c /= 3;
        }
        if grid.distance(&x, &zeta[..d]) >= 0.3 {
            pts.push(x);
        }
    }
    pts
}

#[derive(Clone, Debug)]
enum Repr {
    /// σ = scale·I, b = −κx; exact analytic derivatives.
    Linear { kappa: f64, sigma_scale: f64 },
    /// Lattice-sampled mollified fields; `sigma = None` means identity.
    Lattice {
        b: GridFn,
        db: GridFn,
        sigma: Option<GridFn>,
        dsigma: Option<Vec<GridFn>>,
    },
}

/// One coefficient family at a fixed mollification level.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub family: FamilyId,
    pub name: String,
    pub dim: usize,
    /// Mollification level n (ε_n = 1/n); 0 for the analytic families.
    pub level: usize,
    pub shape: MollifierShape,
    /// Ellipticity constant of σσᵀ/2 (None when σ is degenerate).
    pub c0: Option<f64>,
    repr: Repr,
}

/// Raw (unmollified) lattice sample of a singular radial drift field.
///
/// b(x) = c·(x−ζ)/|x−ζ|·|x−ζ|^{−γ}·χ(|x−ζ|/R) with ζ the half-cell offset,
/// so every lattice point stays a half-cell away from the singularity.
pub fn singular_drift_sample(grid: Grid, c: f64, gamma: f64, radius: f64) -> Result<GridFn> {
    let zeta = grid.half_cell_offset();
    sample(grid, Rank::Vector, false, |_, x, out| {
        let d = x.len();
        let mut r2 = 0.0;
        let mut dx = [0.0f64; 3];
        for i in 0..d {
            dx[i] = grid.min_image(x[i] - zeta[i]);
            r2 += dx[i] * dx[i];
        }
        let r = r2.sqrt();
        let envelope = c * r.powf(-gamma - 1.0) * crate::grid::cutoff_profile(r / radius);
        for i in 0..d {
            out[i] = envelope * dx[i];
        }
    })
}

/// Raw lattice sample of the unmollified drift of families C or D.
pub fn raw_drift(family: FamilyId, grid: Grid) -> Result<GridFn> {
    match family {
        FamilyId::C => {
            check_dim(&grid, 2, "family C")?;
            singular_drift_sample(grid, C_STRENGTH, C_EXPONENT, C_RADIUS)
        }
        FamilyId::D => {
            check_dim(&grid, 3, "family D")?;
            singular_drift_sample(grid, D_STRENGTH, D_EXPONENT, D_RADIUS)
        }
        other => Err(Error::invalid(format!(
            "family {} has no singular drift field",
            other.token()
        ))),
    }
}

fn check_dim(grid: &Grid, want: usize, what: &str) -> Result<()> {
    if grid.dim != want {
        return Err(Error::invalid(format!(
            "{what} requires a {want}-dimensional lattice, got d = {}",
            grid.dim
        )));
    }
    Ok(())
}

fn mollifier_for(level: usize, shape: MollifierShape) -> Result<Mollifier> {
    if level == 0 {
        return Err(Error::invalid("mollification level must be at least 1"));
    }
    Mollifier::new(shape, 1.0 / level as f64)
}

/// Per-axis centered differences of a matrix field: result[k] holds ∂_k σ.
fn matrix_gradient(sigma: &GridFn) -> Vec<GridFn> {
    let grid = sigma.grid;
    let d = grid.dim;
    let dd = d * d;
    let inv2h = 1.0 / (2.0 * grid.h());
    (0..d)
        .map(|axis| {
            let mut out = GridFn::zeros(grid, Rank::Matrix, sigma.time_dependent);
            for k in 0..sigma.slices() {
                let src = sigma.slice(k).to_vec();
                let dst = out.slice_mut(k);
                dst.par_chunks_mut(dd).enumerate().for_each(|(cell, chunk)| {
                    let mut multi = [0usize; 3];
                    grid.multi_index(cell, &mut multi);
                    let mut off = [0i64; 3];
                    off[axis] = 1;
                    let plus = grid.shifted_index(&multi, &off);
                    off[axis] = -1;
                    let minus = grid.shifted_index(&multi, &off);
                    for c in 0..dd {
                        chunk[c] = (src[plus * dd + c] - src[minus * dd + c]) * inv2h;
                    }
                });
            }
            out
        })
        .collect()
}

fn linear_c0(sigma_scale: f64) -> Option<f64> {
    if sigma_scale == 0.0 {
        return None;
    }
    let eig = 0.5 * sigma_scale * sigma_scale;
    Some((1.0 / eig).max(eig).max(1.0))
}

impl CoefficientField {
    /// Family A: σ = I, b = 0 (Brownian motion).
    pub fn family_a(dim: usize) -> Result<CoefficientField> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid("dimension must be 1, 2, or 3"));
        }
        Ok(CoefficientField {
            family: FamilyId::A,
            name: "A".into(),
            dim,
            level: 0,
            shape: MollifierShape::PolynomialBump,
            c0: linear_c0(1.0),
            repr: Repr::Linear { kappa: 0.0, sigma_scale: 1.0 },
        })
    }

    /// Family A with the noise switched off: σ = 0, b = 0 (diagnostic).
    pub fn frozen(dim: usize) -> Result<CoefficientField> {
        let mut cf = CoefficientField::family_a(dim)?;
        cf.name = "A(sigma=0)".into();
        cf.c0 = None;
        cf.repr = Repr::Linear { kappa: 0.0, sigma_scale: 0.0 };
        Ok(cf)
    }

    /// Family B: σ = I, b = −κx (linear contraction; solver tests only).
    pub fn family_b(dim: usize, kappa: f64) -> Result<CoefficientField> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid("dimension must be 1, 2, or 3"));
        }
        if !kappa.is_finite() {
            return Err(Error::invalid("kappa must be finite"));
        }
        Ok(CoefficientField {
            family: FamilyId::B,
            name: format!("B(kappa={kappa})"),
            dim,
            level: 0,
            shape: MollifierShape::PolynomialBump,
            c0: linear_c0(1.0),
            repr: Repr::Linear { kappa, sigma_scale: 1.0 },
        })
    }

    /// Family C: subcritical singular drift in d = 2, mollified at ε = 1/n.
    pub fn family_c(grid: Grid, level: usize, shape: MollifierShape) -> Result<CoefficientField> {
        check_dim(&grid, 2, "family C")?;
        let raw = raw_drift(FamilyId::C, grid)?;
        let b = crate::grid::mollify(&raw, &mollifier_for(level, shape)?)?;
        let db = vector_jacobian(&b);
        Ok(CoefficientField {
            family: FamilyId::C,
            name: format!("C(n={level}, {})", shape.token()),
            dim: 2,
            level,
            shape,
            c0: linear_c0(1.0),
            repr: Repr::Lattice { b, db, sigma: None, dsigma: None },
        })
    }

    /// Family D: critical L^d-type drift in d = 3, mollified at ε = 1/n.
    pub fn family_d(grid: Grid, level: usize, shape: MollifierShape) -> Result<CoefficientField> {
        check_dim(&grid, 3, "family D")?;
        let raw = raw_drift(FamilyId::D, grid)?;
        let b = crate::grid::mollify(&raw, &mollifier_for(level, shape)?)?;
        let db = vector_jacobian(&b);
        Ok(CoefficientField {
            family: FamilyId::D,
            name: format!("D(n={level}, {})", shape.token()),
            dim: 3,
            level,
            shape,
            c0: linear_c0(1.0),
            repr: Repr::Lattice { b, db, sigma: None, dsigma: None },
        })
    }

    /// Family E: Sobolev scalar diffusion, zero drift, mollified at ε = 1/n.
    pub fn family_e(grid: Grid, level: usize, shape: MollifierShape) -> Result<CoefficientField> {
        check_dim(&grid, 2, "family E")?;
        let zeta = grid.half_cell_offset();
        let raw = sample(grid, Rank::Matrix, false, |_, x, out| {
            let d = x.len();
            let mut r2 = 0.0;
            for i in 0..d {
                let dx = grid.min_image(x[i] - zeta[i]);
                r2 += dx * dx;
            }
            let r = r2.sqrt();
            let s = 1.0 + E_AMPLITUDE * r.powf(E_EXPONENT) * crate::grid::cutoff_profile(r / E_RADIUS);
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = s;
            }
        })?;
        let sigma = crate::grid::mollify(&raw, &mollifier_for(level, shape)?)?;
        let dsigma = matrix_gradient(&sigma);
        let b = GridFn::zeros(grid, Rank::Vector, false);
        let db = GridFn::zeros(grid, Rank::Matrix, false);
        let c0 = certify(&half_diffusion(&sigma)?)?.c0;
        Ok(CoefficientField {
            family: FamilyId::E,
            name: format!("E(n={level}, {})", shape.token()),
            dim: 2,
            level,
            shape,
            c0: Some(c0),
            repr: Repr::Lattice { b, db, sigma: Some(sigma), dsigma: Some(dsigma) },
        })
    }

    /// Rebuilds the same family at mollification level `n`.
    pub fn at_level(&self, n: usize) -> Result<CoefficientField> {
        match self.family {
            FamilyId::A | FamilyId::B => Ok(self.clone()),
            FamilyId::C => CoefficientField::family_c(self.grid().unwrap(), n, self.shape),
            FamilyId::D => CoefficientField::family_d(self.grid().unwrap(), n, self.shape),
            FamilyId::E => CoefficientField::family_e(self.grid().unwrap(), n, self.shape),
        }
    }

    /// Lattice carrying the sampled fields, if any.
    pub fn grid(&self) -> Option<Grid> {
        match &self.repr {
            Repr::Linear { .. } => None,
            Repr::Lattice { b, .. } => Some(b.grid),
        }
    }

    /// Mollified drift field, if this family stores one on the lattice.
    pub fn drift_field(&self) -> Option<&GridFn> {
        match &self.repr {
            Repr::Lattice { b, .. } => Some(b),
            Repr::Linear { .. } => None,
        }
    }

    /// Evaluates b(t, x) into `out` (d components).
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Linear { kappa, .. } => {
                for (o, xi) in out.iter_mut().zip(x.iter()) {
                    *o = -kappa * xi;
                }
            }
            Repr::Lattice { b, .. } => b.eval(t, x, out),
        }
    }

    /// Evaluates σ(t, x) into `out` (d×d, row-major).
    pub fn sigma(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.repr {
            Repr::Linear { sigma_scale, .. } => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = *sigma_scale;
                }
            }
            Repr::Lattice { sigma, .. } => match sigma {
                Some(s) => s.eval(t, x, out),
                None => {
                    out.fill(0.0);
                    for i in 0..d {
                        out[i * d + i] = 1.0;
                    }
                }
            },
        }
    }

    /// Evaluates ∇b(t, x) into `out`; entry `i*d + k` is ∂_k b_i.
    pub fn grad_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.repr {
            Repr::Linear { kappa, .. } => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = -kappa;
                }
            }
            Repr::Lattice { db, .. } => db.eval(t, x, out),
        }
    }

    /// Evaluates ∇σ(t, x) into `out`; entry `(i*d + j)*d + k` is ∂_k σ_ij.
    pub fn grad_sigma(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.repr {
            Repr::Linear { .. } => out.fill(0.0),
            Repr::Lattice { dsigma, .. } => match dsigma {
                None => out.fill(0.0),
                Some(per_axis) => {
                    let mut tmp = [0.0f64; 9];
                    for (k, field) in per_axis.iter().enumerate() {
                        field.eval(t, x, &mut tmp[..d * d]);
                        for i in 0..d {
                            for j in 0..d {
                                out[(i * d + j) * d + k] = tmp[i * d + j];
                            }
                        }
                    }
                }
            },
        }
    }

    /// True when σ(t,x) is the identity for every argument.
    fn sigma_is_identity(&self) -> bool {
        match &self.repr {
            Repr::Linear { sigma_scale, .. } => *sigma_scale == 1.0,
            Repr::Lattice { sigma, .. } => sigma.is_none(),
        }
    }
}

/// A retained Euler–Maruyama ensemble.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub dim: usize,
    pub paths: usize,
    /// Number of time steps (states carry steps + 1 snapshots).
    pub steps: usize,
    pub t_horizon: f64,
    pub x0: Vec<f64>,
    pub master_seed: u64,
    /// paths × (steps+1) × d state snapshots.
    pub states: Vec<f64>,
    /// paths × steps × d Brownian increments.
    pub increments: Vec<f64>,
    /// paths × (steps+1) × d² flow matrices, when requested.
    pub flows: Option<Vec<f64>>,
}

impl PathEnsemble {
    /// Time-step size.
    pub fn dt(&self) -> f64 {
        self.t_horizon / self.steps as f64
    }

    /// Time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// State of `path` at step `k`.
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let stride = (self.steps + 1) * self.dim;
        let off = path * stride + k * self.dim;
        &self.states[off..off + self.dim]
    }

    /// Brownian increment of `path` over step `k` (length √Δt-scaled).
    pub fn increment(&self, path: usize, k: usize) -> &[f64] {
        let stride = self.steps * self.dim;
        let off = path * stride + k * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// Flow matrix of `path` at step `k`, if retained.
    pub fn flow(&self, path: usize, k: usize) -> Option<&[f64]> {
        let dd = self.dim * self.dim;
        self.flows.as_ref().map(|f| {
            let stride = (self.steps + 1) * dd;
            let off = path * stride + k * dd;
            &f[off..off + dd]
        })
    }
}

/// Left-endpoint window steps on the ensemble clock.
///
/// Matches the lattice-norm convention: endpoints within 1e−9 (relative) of
/// a step snap onto it; otherwise the window shrinks inward.
pub fn ensemble_window(ens: &PathEnsemble, t0: f64, t1: f64) -> Result<(usize, usize)> {
    let dt = ens.dt();
    let snap = |t: f64| -> usize {
        let u = t / dt;
        let r = u.round();
        if (u - r).abs() <= 1e-9 * u.abs().max(1.0) {
            r as usize
        } else {
            u.ceil() as usize
        }
    };
    let k0 = snap(t0);
    let k1 = snap(t1).min(ens.steps);
    if k1 <= k0 {
        return Err(Error::invalid(format!(
            "time window [{t0}, {t1}] contains no left endpoints (dt = {dt})"
        )));
    }
    Ok((k0, k1))
}

fn step_state(
    cf: &CoefficientField,
    t: f64,
    dt: f64,
    x: &mut [f64],
    dw: &[f64],
    bv: &mut [f64],
    sv: &mut [f64],
) {
    let d = cf.dim;
    cf.drift(t, x, bv);
    if cf.sigma_is_identity() {
        for i in 0..d {
            x[i] += bv[i] * dt + dw[i];
        }
    } else {
        cf.sigma(t, x, sv);
        for i in 0..d {
            let mut acc = bv[i] * dt;
            for j in 0..d {
                acc += sv[i * d + j] * dw[j];
            }
            x[i] += acc;
        }
    }
}

fn step_flow(
    cf: &CoefficientField,
    t: f64,
    dt: f64,
    x: &[f64],
    dw: &[f64],
    jmat: &mut [f64],
    gb: &mut [f64],
    gs: &mut [f64],
    jnew: &mut [f64],
) {
    let d = cf.dim;
    cf.grad_drift(t, x, gb);
    cf.grad_sigma(t, x, gs);
    for i in 0..d {
        for l in 0..d {
            let mut acc = jmat[i * d + l];
            for k in 0..d {
                acc += dt * gb[i * d + k] * jmat[k * d + l];
            }
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += gs[(i * d + j) * d + k] * jmat[k * d + l];
                }
                acc += dw[j] * s;
            }
            jnew[i * d + l] = acc;
        }
    }
    jmat.copy_from_slice(jnew);
}

fn run_path(
    cf: &CoefficientField,
    x0: &[f64],
    dt: f64,
    steps: usize,
    path: usize,
    seed: u64,
    states: &mut [f64],
    increments: &mut [f64],
    mut flow: Option<&mut [f64]>,
) -> Result<()> {
    let d = cf.dim;
    let dd = d * d;
    let mut rng = path_rng(seed, path as u64);
    let sqdt = dt.sqrt();
    let mut x = [0.0f64; 3];
    x[..d].copy_from_slice(x0);
    states[..d].copy_from_slice(x0);
    let mut jmat = [0.0f64; 9];
    if let Some(fl) = flow.as_deref_mut() {
        for i in 0..d {
            jmat[i * d + i] = 1.0;
        }
        fl[..dd].copy_from_slice(&jmat[..dd]);
    }
    let (mut bv, mut sv) = ([0.0f64; 3], [0.0f64; 9]);
    let (mut gb, mut gs, mut jnew) = ([0.0f64; 9], [0.0f64; 27], [0.0f64; 9]);
    let mut dw = [0.0f64; 3];
    for k in 0..steps {
        let t = k as f64 * dt;
        for slot in dw[..d].iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *slot = sqdt * z;
        }
        increments[k * d..(k + 1) * d].copy_from_slice(&dw[..d]);
        if flow.is_some() {
            // The flow update reads the pre-step state, so do it first.
            step_flow(cf, t, dt, &x[..d], &dw[..d], &mut jmat[..dd], &mut gb[..dd], &mut gs[..dd * d], &mut jnew[..dd]);
        }
        step_state(cf, t, dt, &mut x[..d], &dw[..d], &mut bv[..d], &mut sv[..dd]);
        let finite = x[..d].iter().all(|v| v.is_finite())
            && (flow.is_none() || jmat[..dd].iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::PathBlowUp { path: path as u64, step: k + 1, seed });
        }
        states[(k + 1) * d..(k + 2) * d].copy_from_slice(&x[..d]);
        if let Some(fl) = flow.as_deref_mut() {
            fl[(k + 1) * dd..(k + 2) * dd].copy_from_slice(&jmat[..dd]);
        }
    }
    Ok(())
}

/// Simulates an Euler–Maruyama ensemble of `paths` trajectories.
///
/// X_{k+1} = X_k + b(t_k, X_k)Δt + σ(t_k, X_k)ΔW_k, with the variational
/// flow J_{k+1} = J_k + ∇b·J_k Δt + Σ_j ∇σ^{·j}·J_k ΔW^j alongside when
/// `with_flow` is set.  Path `m` draws from an independent counter-seeded
/// stream, so the ensemble content does not depend on the worker count.
pub fn simulate(
    cf: &CoefficientField,
    x0: &[f64],
    t_horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    with_flow: bool,
) -> Result<PathEnsemble> {
    let d = cf.dim;
    if x0.len() != d {
        return Err(Error::shape(format!(
            "x0 has {} components but the family lives in d = {d}",
            x0.len()
        )));
    }
    if steps == 0 || paths == 0 || !(t_horizon > 0.0) {
        return Err(Error::invalid("need steps >= 1, paths >= 1, horizon > 0"));
    }
    let per_path =
        (steps as u128 + 1) * d as u128 + steps as u128 * d as u128
            + if with_flow { (steps as u128 + 1) * (d * d) as u128 } else { 0 };
    let doubles = paths as u128 * per_path;
    if doubles > MAX_ENSEMBLE_DOUBLES {
        return Err(Error::BudgetExceeded(format!(
            "ensemble needs {doubles} retained values; cap is {MAX_ENSEMBLE_DOUBLES} \
             (paths x steps too large)"
        )));
    }

    let dt = t_horizon / steps as f64;
    let ss = (steps + 1) * d;
    let sw = steps * d;
    let sj = (steps + 1) * d * d;
    let mut states = vec![0.0; paths * ss];
    let mut increments = vec![0.0; paths * sw];
    let mut flows = with_flow.then(|| vec![0.0; paths * sj]);

    match flows.as_mut() {
        Some(fl) => states
            .par_chunks_mut(ss)
            .zip(increments.par_chunks_mut(sw))
            .zip(fl.par_chunks_mut(sj))
            .enumerate()
            .try_for_each(|(m, ((st, dw), jf))| {
                run_path(cf, x0, dt, steps, m, seed, st, dw, Some(jf))
            })?,
        None => states
            .par_chunks_mut(ss)
            .zip(increments.par_chunks_mut(sw))
            .enumerate()
            .try_for_each(|(m, (st, dw))| run_path(cf, x0, dt, steps, m, seed, st, dw, None))?,
    }

    Ok(PathEnsemble {
        dim: d,
        paths,
        steps,
        t_horizon,
        x0: x0.to_vec(),
        master_seed: seed,
        states,
        increments,
        flows,
    })
}

fn check_nonnegative(f: &GridFn, what: &str) -> Result<()> {
    for k in 0..f.slices() {
        if f.slice(k).iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!("{what} must be nonnegative")));
        }
    }
    Ok(())
}

/// Per-path left-endpoint quadrature of ∫ f(s, X_s) ds over steps k0..k1.
fn path_integrals(ens: &PathEnsemble, f: &GridFn, k0: usize, k1: usize) -> Vec<f64> {
    let dt = ens.dt();
    (0..ens.paths)
        .into_par_iter()
        .map(|m| {
            let mut acc = 0.0;
            let mut val = [0.0f64; 1];
            for k in k0..k1 {
                f.eval(ens.time(k), ens.state(m, k), &mut val);
                acc += val[0] * dt;
            }
            acc
        })
        .collect()
}

/// Krylov-estimate ratio: E∫_{t0}^{t1} f(s,X_s) ds over the localized norm
/// of f on the same window.
pub fn krylov_estimate(
    ens: &PathEnsemble,
    f: &GridFn,
    np: &NormParams,
    t0: f64,
    t1: f64,
) -> Result<EstimatorReport> {
    if f.rank != Rank::Scalar {
        return Err(Error::shape("Krylov source must be a scalar field"));
    }
    check_nonnegative(f, "Krylov source")?;
    let denom = localized_norm(f, &np.clone().with_window(t0, t1))?.value;
    if !(denom > 0.0) {
        return Err(Error::invalid("Krylov source has zero localized norm on the window"));
    }
    let (k0, k1) = ensemble_window(ens, t0, t1)?;
    let samples: Vec<f64> =
        path_integrals(ens, f, k0, k1).into_iter().map(|v| v / denom).collect();
    Ok(EstimatorReport::from_samples(
        format!("krylov ratio on [{t0}, {t1}]"),
        &samples,
    ))
}

/// One rung of the short-window Krylov ladder.
#[derive(Clone, Debug, Serialize)]
pub struct KrylovLadderRow {
    pub delta: f64,
    /// Worst (largest) windowed ratio against δ^θ · |||f|||(0, T).
    pub ratio: f64,
    pub std_error: f64,
}

/// Short-window scaling ladder: for each δ the worst windowed integral over
/// four equispaced starts, normalized by δ^θ times the full-horizon norm.
pub fn krylov_ladder(
    ens: &PathEnsemble,
    f: &GridFn,
    np: &NormParams,
    deltas: &[f64],
    theta: f64,
) -> Result<Vec<KrylovLadderRow>> {
    check_nonnegative(f, "Krylov source")?;
    let denom = localized_norm(f, np)?.value;
    if !(denom > 0.0) {
        return Err(Error::invalid("Krylov source has zero localized norm"));
    }
    let horizon = ens.t_horizon;
    let mut rows = Vec::new();
    for &delta in deltas {
        if !(delta > 0.0 && delta < horizon) {
            return Err(Error::invalid(format!("ladder window {delta} outside (0, T)")));
        }
        let mut best: Option<(f64, f64)> = None;
        for q in 0..4 {
            let tau = (q as f64 * horizon / 4.0).min(horizon - delta);
            let (k0, k1) = ensemble_window(ens, tau, tau + delta)?;
            let samples = path_integrals(ens, f, k0, k1);
            let (mean, se) = mean_se(&samples);
            if best.map(|(b, _)| mean > b).unwrap_or(true) {
                best = Some((mean, se));
            }
        }
        let (mean, se) = best.unwrap();
        let scale = delta.powf(theta) * denom;
        rows.push(KrylovLadderRow { delta, ratio: mean / scale, std_error: se / scale });
    }
    Ok(rows)
}

/// Conditional Krylov ratio: the chain restarts at t0 from its own position
/// with fresh noise, and the windowed integral is measured on the restarted
/// leg (the Markov-restart form of conditioning on the time-t0 state).
pub fn krylov_restarted(
    cf: &CoefficientField,
    x0: &[f64],
    f: &GridFn,
    np: &NormParams,
    t0: f64,
    t1: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    check_nonnegative(f, "Krylov source")?;
    let denom = localized_norm(f, &np.clone().with_window(t0, t1))?.value;
    if !(denom > 0.0) {
        return Err(Error::invalid("Krylov source has zero localized norm on the window"));
    }
    let d = cf.dim;
    let horizon = t1;
    let dt = horizon / steps as f64;
    let split = ((t0 / dt).round() as usize).min(steps);
    let restart_seed = sub_seed(seed, RESTART_TAG);
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|m| -> Result<f64> {
            let mut x = [0.0f64; 3];
            x[..d].copy_from_slice(x0);
            let (mut bv, mut sv) = ([0.0f64; 3], [0.0f64; 9]);
            let mut dw = [0.0f64; 3];
            let sqdt = dt.sqrt();
            let mut rng = path_rng(seed, m as u64);
            let mut restarted = path_rng(restart_seed, m as u64);
            let mut acc = 0.0;
            let mut val = [0.0f64; 1];
            for k in 0..steps {
                let t = k as f64 * dt;
                if k >= split {
                    f.eval(t, &x[..d], &mut val);
                    acc += val[0] * dt;
                }
                let gen = if k >= split { &mut restarted } else { &mut rng };
                for slot in dw[..d].iter_mut() {
                    let z: f64 = gen.sample(StandardNormal);
                    *slot = sqdt * z;
                }
                step_state(cf, t, dt, &mut x[..d], &dw[..d], &mut bv[..d], &mut sv[..d * d]);
                if !x[..d].iter().all(|v| v.is_finite()) {
                    return Err(Error::PathBlowUp { path: m as u64, step: k + 1, seed });
                }
            }
            Ok(acc / denom)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EstimatorReport::from_samples(
        format!("restarted krylov ratio on [{t0}, {t1}]"),
        &samples,
    ))
}

/// Exponential-moment estimate E exp(γ ∫₀^T f(s,X_s) ds), overflow-safe.
///
/// The mean is accumulated in shifted log space; if the result exceeds the
/// representable range the report carries an "exceeds budget" note instead
/// of crashing.
pub fn khasminskii_estimate(
    ens: &PathEnsemble,
    f: &GridFn,
    gamma: f64,
) -> Result<EstimatorReport> {
    if f.rank != Rank::Scalar {
        return Err(Error::shape("Khasminskii source must be a scalar field"));
    }
    check_nonnegative(f, "Khasminskii source")?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma must be finite and nonnegative"));
    }
    let exponents: Vec<f64> =
        path_integrals(ens, f, 0, ens.steps).into_iter().map(|v| gamma * v).collect();
    let shift = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = exponents.iter().map(|e| (e - shift).exp()).collect();
    let (mean, se) = mean_se(&scaled);
    let log_value = shift + mean.ln();
    let mut report = EstimatorReport {
        label: format!("khasminskii exponential moment (gamma = {gamma})"),
        value: log_value.exp(),
        std_error: shift.exp() * se,
        samples: ens.paths,
        notes: Vec::new(),
    };
    if !report.value.is_finite() {
        report.notes.push(format!(
            "exceeds budget: exponential moment overflows f64 (log-estimate {log_value:.3})"
        ));
    }
    Ok(report)
}

fn invert_small(mat: &[f64], d: usize, out: &mut [f64]) -> Result<()> {
    let det = match d {
        1 => mat[0],
        2 => mat[0] * mat[3] - mat[1] * mat[2],
        3 => {
            mat[0] * (mat[4] * mat[8] - mat[5] * mat[7])
                - mat[1] * (mat[3] * mat[8] - mat[5] * mat[6])
                + mat[2] * (mat[3] * mat[7] - mat[4] * mat[6])
        }
        _ => unreachable!("dimension is at most 3"),
    };
    if !(det.abs() > 1e-12) {
        return Err(Error::Ellipticity(format!(
            "diffusion sample is singular (det = {det:.3e})"
        )));
    }
    match d {
        1 => out[0] = 1.0 / det,
        2 => {
            out[0] = mat[3] / det;
            out[1] = -mat[1] / det;
            out[2] = -mat[2] / det;
            out[3] = mat[0] / det;
        }
        3 => {
            out[0] = (mat[4] * mat[8] - mat[5] * mat[7]) / det;
            out[1] = (mat[2] * mat[7] - mat[1] * mat[8]) / det;
            out[2] = (mat[1] * mat[5] - mat[2] * mat[4]) / det;
            out[3] = (mat[5] * mat[6] - mat[3] * mat[8]) / det;
            out[4] = (mat[0] * mat[8] - mat[2] * mat[6]) / det;
            out[5] = (mat[2] * mat[3] - mat[0] * mat[5]) / det;
            out[6] = (mat[3] * mat[7] - mat[4] * mat[6]) / det;
            out[7] = (mat[1] * mat[6] - mat[0] * mat[7]) / det;
            out[8] = (mat[0] * mat[4] - mat[1] * mat[3]) / det;
        }
        _ => unreachable!(),
    }
    Ok(())
}

/// Bismut–Elworthy–Li gradient estimate of ∇E φ(X_t) at the ensemble start.
///
/// The weight is V_j = Σ_k Σ_i [σ(t_k, X_k)^{-1} J_k]_{ij} ΔW^i_k and the
/// estimate is (1/t)·E[φ(X_t) V], reported componentwise with standard
/// errors.  Requires retained flow matrices and invertible σ samples.
pub fn bel_gradient(
    cf: &CoefficientField,
    ens: &PathEnsemble,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
) -> Result<Vec<EstimatorReport>> {
    if ens.flows.is_none() {
        return Err(Error::invalid("gradient weight needs flow matrices (simulate with_flow)"));
    }
    if cf.c0.is_none() {
        return Err(Error::Ellipticity("diffusion is degenerate (sigma = 0)".into()));
    }
    let d = cf.dim;
    let dt = ens.dt();
    let kt = (t / dt).round() as usize;
    if !(t > 0.0) || kt == 0 || kt > ens.steps || (t - kt as f64 * dt).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "gradient time {t} must be a positive multiple of dt = {dt}"
        )));
    }
    let identity_sigma = cf.sigma_is_identity();
    let weighted: Vec<Vec<f64>> = (0..ens.paths)
        .into_par_iter()
        .map(|m| -> Result<Vec<f64>> {
            let mut v = [0.0f64; 3];
            let (mut sig, mut inv, mut w) = ([0.0f64; 9], [0.0f64; 9], [0.0f64; 9]);
            for k in 0..kt {
                let x = ens.state(m, k);
                let jmat = ens.flow(m, k).unwrap();
                let minv: &[f64] = if identity_sigma {
                    jmat
                } else {
                    cf.sigma(ens.time(k), x, &mut sig[..d * d]);
                    invert_small(&sig[..d * d], d, &mut inv[..d * d])?;
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for l in 0..d {
                                s += inv[i * d + l] * jmat[l * d + j];
                            }
                            w[i * d + j] = s;
                        }
                    }
                    &w[..d * d]
                };
                let dw = ens.increment(m, k);
                for j in 0..d {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += minv[i * d + j] * dw[i];
                    }
                    v[j] += s;
                }
            }
            let value = phi(ens.state(m, kt));
            Ok((0..d).map(|j| value * v[j] / t).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..d)
        .map(|j| {
            let column: Vec<f64> = weighted.iter().map(|row| row[j]).collect();
            EstimatorReport::from_samples(format!("bel gradient[{j}]"), &column)
        })
        .collect())
}

/// Central-difference companion of [`bel_gradient`] with common random
/// numbers: simulates from x0 ± δe_j under the same master seed.
pub fn fd_gradient(
    cf: &CoefficientField,
    x0: &[f64],
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    delta: f64,
) -> Result<Vec<EstimatorReport>> {
    if !(delta > 0.0) {
        return Err(Error::invalid("finite-difference offset must be positive"));
    }
    let d = cf.dim;
    let mut reports = Vec::with_capacity(d);
    for j in 0..d {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[j] += delta;
        xm[j] -= delta;
        let plus = simulate(cf, &xp, t, steps, paths, seed, false)?;
        let minus = simulate(cf, &xm, t, steps, paths, seed, false)?;
        let samples: Vec<f64> = (0..paths)
            .map(|m| {
                (phi(plus.state(m, steps)) - phi(minus.state(m, steps))) / (2.0 * delta)
            })
            .collect();
        reports.push(EstimatorReport::from_samples(format!("fd gradient[{j}]"), &samples));
    }
    Ok(reports)
}

/// One row of the flow-moment survey.
#[derive(Clone, Debug, Serialize)]
pub struct FlowSurveyRow {
    pub level: usize,
    pub p: f64,
    /// sup over starting points of E sup_{t≤T} |∇X_t|_F^p.
    pub value: f64,
    pub std_error: f64,
    pub argmax_x0: Vec<f64>,
}

/// Surveys E sup_{t≤T} |∇X_t|_F^p over starting points, moments, and
/// mollification levels.
pub fn flow_moment_survey(
    cf: &CoefficientField,
    starts: &[Vec<f64>],
    t_horizon: f64,
    steps: usize,
    p_list: &[f64],
    n_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<FlowSurveyRow>> {
    if starts.is_empty() || p_list.is_empty() || n_list.is_empty() {
        return Err(Error::invalid("survey needs starts, moments, and levels"));
    }
    let mut rows = Vec::new();
    for &n in n_list {
        let cfn = cf.at_level(n)?;
        let mut per_start: Vec<Vec<(f64, f64)>> = Vec::new();
        for (idx, x0) in starts.iter().enumerate() {
            let run_seed = sub_seed(seed, (n * 1024 + idx) as u64);
            let ens = simulate(&cfn, x0, t_horizon, steps, paths, run_seed, true)?;
            let sup_frob2: Vec<f64> = (0..paths)
                .into_par_iter()
                .map(|m| {
                    let mut worst = 0.0f64;
                    for k in 0..=steps {
                        let jmat = ens.flow(m, k).unwrap();
                        let frob2: f64 = jmat.iter().map(|v| v * v).sum();
                        worst = worst.max(frob2);
                    }
                    worst
                })
                .collect();
            per_start.push(
                p_list
                    .iter()
                    .map(|&p| {
                        let samples: Vec<f64> =
                            sup_frob2.iter().map(|f2| f2.powf(0.5 * p)).collect();
                        mean_se(&samples)
                    })
                    .collect(),
            );
        }
        for (pi, &p) in p_list.iter().enumerate() {
            let mut best = 0usize;
            for idx in 1..starts.len() {
                if per_start[idx][pi].0 > per_start[best][pi].0 {
                    best = idx;
                }
            }
            let (value, std_error) = per_start[best][pi];
            rows.push(FlowSurveyRow {
                level: n,
                p,
                value,
                std_error,
                argmax_x0: starts[best].clone(),
            });
        }
    }
    Ok(rows)
}

/// E sup_{t≤T} |Y¹_t − Y²_t|^p / |y1 − y2|^p with shared noise per path.
pub fn pathwise_contraction(
    cf: &CoefficientField,
    y1: &[f64],
    y2: &[f64],
    t_horizon: f64,
    steps: usize,
    p: f64,
    paths: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    let d = cf.dim;
    if y1.len() != d || y2.len() != d {
        return Err(Error::shape("start points must match the family dimension"));
    }
    if y1 == y2 {
        return Err(Error::invalid("start points coincide: contraction ratio is degenerate"));
    }
    let dt = t_horizon / steps as f64;
    let sqdt = dt.sqrt();
    let sep2: f64 = y1.iter().zip(y2.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let denom = sep2.powf(0.5 * p);
    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|m| -> Result<f64> {
            let mut rng = path_rng(seed, m as u64);
            let (mut xa, mut xb) = ([0.0f64; 3], [0.0f64; 3]);
            xa[..d].copy_from_slice(y1);
            xb[..d].copy_from_slice(y2);
            let (mut bv, mut sv) = ([0.0f64; 3], [0.0f64; 9]);
            let mut dw = [0.0f64; 3];
            let mut worst = sep2;
            for k in 0..steps {
                let t = k as f64 * dt;
                for slot in dw[..d].iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = sqdt * z;
                }
                step_state(cf, t, dt, &mut xa[..d], &dw[..d], &mut bv[..d], &mut sv[..d * d]);
                step_state(cf, t, dt, &mut xb[..d], &dw[..d], &mut bv[..d], &mut sv[..d * d]);
                let ok = xa[..d].iter().chain(xb[..d].iter()).all(|v| v.is_finite());
                if !ok {
                    return Err(Error::PathBlowUp { path: m as u64, step: k + 1, seed });
                }
                let diff2: f64 =
                    (0..d).map(|i| (xa[i] - xb[i]) * (xa[i] - xb[i])).sum();
                worst = worst.max(diff2);
            }
            Ok(worst.powf(0.5 * p) / denom)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EstimatorReport::from_samples(
        format!("pathwise contraction ratio (p = {p})"),
        &samples,
    ))
}

/// One δ-row of the tightness-modulus table.
#[derive(Clone, Debug, Serialize)]
pub struct TightnessRow {
    pub delta: f64,
    /// E sup_s |X_{s+δ} − X_s|^{1/2} over the step grid.
    pub value: f64,
    pub std_error: f64,
}

/// Continuity modulus E sup_s |X_{s+δ} − X_s|^{1/2} for each δ in the list.
///
/// Every δ must be a positive step multiple no larger than T/2.
pub fn tightness_modulus(ens: &PathEnsemble, deltas: &[f64]) -> Result<Vec<TightnessRow>> {
    let dt = ens.dt();
    let d = ens.dim;
    let mut rows = Vec::new();
    for &delta in deltas {
        let j = (delta / dt).round() as usize;
        if j == 0 || (delta - j as f64 * dt).abs() > 1e-9 || 2 * j > ens.steps {
            return Err(Error::invalid(format!(
                "tightness lag {delta} must be a step multiple in (0, T/2] (dt = {dt})"
            )));
        }
        let samples: Vec<f64> = (0..ens.paths)
            .into_par_iter()
            .map(|m| {
                let mut worst = 0.0f64;
                for k in 0..=(ens.steps - j) {
                    let a = ens.state(m, k);
                    let b = ens.state(m, k + j);
                    let diff2: f64 = (0..d).map(|i| (b[i] - a[i]) * (b[i] - a[i])).sum();
                    worst = worst.max(diff2);
                }
                worst.sqrt().sqrt()
            })
            .collect();
        let (value, std_error) = mean_se(&samples);
        rows.push(TightnessRow { delta, value, std_error });
    }
    Ok(rows)
}

/// One row of the cross-approximation weak-agreement table.
#[derive(Clone, Debug, Serialize)]
pub struct WeakAgreementRow {
    pub label: String,
    pub first: f64,
    pub second: f64,
    pub difference: f64,
    pub combined_se: f64,
}

/// Compares E ∫₀^T f(s, X_s) ds between two coefficient fields with
/// independent noise, one row per test function.
pub fn weak_agreement(
    first: &CoefficientField,
    second: &CoefficientField,
    battery: &[(String, GridFn)],
    x0: &[f64],
    t_horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<WeakAgreementRow>> {
    if first.dim != second.dim {
        return Err(Error::shape("coefficient fields live in different dimensions"));
    }
    let ens1 = simulate(first, x0, t_horizon, steps, paths, seed, false)?;
    let ens2 = simulate(second, x0, t_horizon, steps, paths, sub_seed(seed, 1), false)?;
    battery
        .iter()
        .map(|(label, f)| {
            if f.rank != Rank::Scalar {
                return Err(Error::shape("battery functions must be scalar fields"));
            }
            let s1 = path_integrals(&ens1, f, 0, steps);
            let s2 = path_integrals(&ens2, f, 0, steps);
            let (m1, e1) = mean_se(&s1);
            let (m2, e2) = mean_se(&s2);
            Ok(WeakAgreementRow {
                label: label.clone(),
                first: m1,
                second: m2,
                difference: m1 - m2,
                combined_se: e1.hypot(e2),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::TimeExponent;
    use crate::stats::{loglog_slope, pairwise_sum};

    const L: f64 = std::f64::consts::PI;

    fn bump_field(grid: Grid, center: &[f64], radius: f64) -> GridFn {
        sample(grid, Rank::Scalar, false, |_, x, out| {
            let r = grid.distance(x, center);
            out[0] = crate::grid::cutoff_profile(1.0 + r / radius);
        })
        .unwrap()
    }

    #[test]
    fn frozen_field_keeps_paths_and_flows_constant() {
        let cf = CoefficientField::frozen(2).unwrap();
        let ens = simulate(&cf, &[0.4, -0.7], 1.0, 16, 8, 7, true).unwrap();
        for m in 0..ens.paths {
            for k in 0..=ens.steps {
                assert_eq!(ens.state(m, k), &[0.4, -0.7]);
                assert_eq!(ens.flow(m, k).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn brownian_family_matches_gaussian_moments() {
        let cf = CoefficientField::family_a(2).unwrap();
        let m = 100_000;
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 64, m, 2024, false).unwrap();
        let d = 2;
        let mut mean = [0.0f64; 2];
        for i in 0..d {
            let col: Vec<f64> = (0..m).map(|p| ens.state(p, 64)[i]).collect();
            mean[i] = pairwise_sum(&col) / m as f64;
            assert!(mean[i].abs() <= 4.0 * (d as f64 / m as f64).sqrt());
        }
        for i in 0..d {
            for j in 0..d {
                let prods: Vec<f64> = (0..m)
                    .map(|p| {
                        let x = ens.state(p, 64);
                        (x[i] - mean[i]) * (x[j] - mean[j])
                    })
                    .collect();
                let cov = pairwise_sum(&prods) / (m - 1) as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov - target).abs() <= 0.02, "cov[{i}{j}] = {cov}");
            }
        }
    }

    #[test]
    fn linear_drift_matches_the_exponential_closed_form() {
        let kappa = 1.0;
        let cf = CoefficientField::family_b(2, kappa).unwrap();
        let (t, nt, m) = (1.0, 256, 20_000);
        let x0 = [1.0, -0.5];
        let ens = simulate(&cf, &x0, t, nt, m, 99, true).unwrap();
        for i in 0..2 {
            let col: Vec<f64> = (0..m).map(|p| ens.state(p, nt)[i]).collect();
            let report = EstimatorReport::from_samples("mean", &col);
            assert!(
                report.within_se_of((-t).exp() * x0[i], 3.0),
                "component {i}: {} vs {}",
                report.value,
                (-t).exp() * x0[i]
            );
        }
        // The Euler flow of the linear drift is (1 − κΔt)^k exactly.
        let dt = t / nt as f64;
        let expect = (1.0 - kappa * dt).powi(nt as i32);
        let discretization = ((-t).exp() - expect).abs();
        assert!(discretization <= 1.5e-3);
        let jmat = ens.flow(0, nt).unwrap();
        assert!((jmat[0] - expect).abs() <= 1e-12 && (jmat[3] - expect).abs() <= 1e-12);
        assert!(jmat[1] == 0.0 && jmat[2] == 0.0);
    }

    #[test]
    fn euler_weak_error_halves_when_steps_double() {
        // The noise contribution to X_T is known in closed form for the
        // linear drift, so subtracting it per path measures the weak error
        // of E X_T without Monte Carlo variance.
        let cf = CoefficientField::family_b(1, 1.0).unwrap();
        let x0 = 1.0;
        let mut errors = Vec::new();
        for &nt in &[64usize, 128, 256] {
            let dt = 1.0 / nt as f64;
            let ens = simulate(&cf, &[x0], 1.0, nt, 256, 314, false).unwrap();
            let drift_only: Vec<f64> = (0..ens.paths)
                .map(|m| {
                    let mut noise = 0.0;
                    for k in 0..nt {
                        noise = noise * (1.0 - dt) + ens.increment(m, k)[0];
                    }
                    ens.state(m, nt)[0] - noise
                })
                .collect();
            let (mean, se) = mean_se(&drift_only);
            assert!(se <= 1e-10, "control variate left variance {se}");
            errors.push((mean - (-1.0f64).exp() * x0).abs());
        }
        for pair in errors.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!(
                (0.35..=0.65).contains(&ratio),
                "weak error ratio {ratio} (errors {errors:?})"
            );
        }
    }

    #[test]
    fn ensembles_are_bit_identical_across_worker_counts() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let cf = CoefficientField::family_c(grid, 4, MollifierShape::GaussianTruncated).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate(&cf, &[0.3, 0.1], 1.0, 32, 300, 5150, true).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.states, b.states);
        assert_eq!(a.increments, b.increments);
        assert_eq!(a.flows.unwrap(), b.flows.unwrap());
    }

    #[test]
    fn blow_up_reports_path_and_step() {
        let cf = CoefficientField::family_b(1, -1e6).unwrap();
        let err = simulate(&cf, &[1.0], 1.0, 128, 4, 3, false).unwrap_err();
        match err {
            Error::PathBlowUp { step, .. } => assert!(step > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ensemble_budget_is_enforced() {
        let cf = CoefficientField::family_a(2).unwrap();
        let err = simulate(&cf, &[0.0, 0.0], 1.0, 1 << 20, 1 << 20, 1, false).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded(_)));
    }

    #[test]
    fn krylov_ratio_is_exact_for_the_unit_source() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let one = sample(grid, Rank::Scalar, false, |_, _, out| out[0] = 1.0).unwrap();
        let np = NormParams::over_horizon(0.0, 2.0, TimeExponent::Finite(2.0), 1.0, &grid);
        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 32, 100, 11, false).unwrap();
        let (t0, t1) = (0.25, 0.75);
        let report = krylov_estimate(&ens, &one, &np, t0, t1).unwrap();
        let denom = localized_norm(&one, &np.clone().with_window(t0, t1)).unwrap().value;
        let expected = (t1 - t0) / denom;
        assert!(
            (report.value - expected).abs() <= 1e-12 * expected,
            "{} vs {expected}",
            report.value
        );
        assert!(report.std_error <= 1e-12 * expected);
    }

    #[test]
    fn krylov_ratio_is_stable_across_ensemble_sizes() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let f = bump_field(grid, &[0.0, 0.0], 0.8);
        let np = NormParams::over_horizon(0.0, 5.0, TimeExponent::Sup, 1.0, &grid);
        let cf = CoefficientField::family_a(2).unwrap();
        let mut reports = Vec::new();
        for &m in &[1000usize, 10_000] {
            let ens = simulate(&cf, &[0.0, 0.0], 1.0, 64, m, 88, false).unwrap();
            reports.push(krylov_estimate(&ens, &f, &np, 0.0, 1.0).unwrap());
        }
        let combined = reports[0].std_error.hypot(reports[1].std_error);
        assert!(
            (reports[0].value - reports[1].value).abs() <= 3.0 * combined,
            "{} vs {}",
            reports[0].value,
            reports[1].value
        );
        // The restarted (conditional) form stays within 2x of the direct one.
        let restarted =
            krylov_restarted(&cf, &[0.0, 0.0], &f, &np, 0.5, 1.0, 64, 4000, 88).unwrap();
        let direct = {
            let ens = simulate(&cf, &[0.0, 0.0], 1.0, 64, 4000, 88, false).unwrap();
            krylov_estimate(&ens, &f, &np, 0.5, 1.0).unwrap()
        };
        let ratio = restarted.value / direct.value;
        assert!((0.5..=2.0).contains(&ratio), "conditional ratio {ratio}");
    }

    #[test]
    fn khasminskii_handles_constants_and_overflow() {
        let grid = Grid::new(2, L, 16, 1.0, 16).unwrap();
        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 16, 200, 21, false).unwrap();

        let zero = sample(grid, Rank::Scalar, false, |_, _, out| out[0] = 0.0).unwrap();
        let report = khasminskii_estimate(&ens, &zero, 3.0).unwrap();
        assert_eq!(report.value, 1.0);
        assert_eq!(report.std_error, 0.0);

        let c = 0.5;
        let constant = sample(grid, Rank::Scalar, false, |_, _, out| out[0] = c).unwrap();
        let gamma = 2.0;
        let report = khasminskii_estimate(&ens, &constant, gamma).unwrap();
        let target = (gamma * c * 1.0).exp();
        assert!((report.value - target).abs() <= 1e-10 * target);
        assert!(report.std_error <= 1e-12 * target);

        let big = sample(grid, Rank::Scalar, false, |_, _, out| out[0] = 500.0).unwrap();
        let report = khasminskii_estimate(&ens, &big, 2.0).unwrap();
        assert!(!report.value.is_finite());
        assert!(report.notes.iter().any(|n| n.contains("exceeds budget")));
    }

    #[test]
    fn gradient_weight_recovers_the_linear_observable() {
        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.2, -0.1], 1.0, 32, 20_000, 77, true).unwrap();
        let reports = bel_gradient(&cf, &ens, &|x: &[f64]| x[0], 1.0).unwrap();
        assert!(reports[0].within_se_of(1.0, 3.0), "grad[0] = {}", reports[0].value);
        assert!(reports[1].within_se_of(0.0, 3.0), "grad[1] = {}", reports[1].value);
    }

    #[test]
    fn gradient_weight_matches_the_gaussian_smoothing_oracle() {
        // Quadrature oracle first: d/dx E sin(x + W_1) at x = 0.2 equals
        // e^{-1/2} cos(0.2); confirm by direct Gaussian quadrature of
        // cos(x + z) against the standard normal density.
        let x0 = 0.2f64;
        let closed = (-0.5f64).exp() * x0.cos();
        let mut quad = 0.0;
        let n = 40_001;
        let (lo, hi) = (-8.0f64, 8.0f64);
        let step = (hi - lo) / (n - 1) as f64;
        for i in 0..n {
            let z = lo + i as f64 * step;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            quad += w * (x0 + z).cos() * dens * step;
        }
        assert!((quad - closed).abs() <= 1e-10, "oracle mismatch: {quad} vs {closed}");

        let cf = CoefficientField::family_a(1).unwrap();
        let ens = simulate(&cf, &[x0], 1.0, 32, 40_000, 123, true).unwrap();
        let reports = bel_gradient(&cf, &ens, &|x: &[f64]| x[0].sin(), 1.0).unwrap();
        assert!(
            reports[0].within_se_of(closed, 3.0),
            "bel {} +- {} vs {closed}",
            reports[0].value,
            reports[0].std_error
        );
    }

    #[test]
    fn gradient_weight_agrees_with_finite_differences_on_singular_drift() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let cf = CoefficientField::family_c(grid, 8, MollifierShape::PolynomialBump).unwrap();
        let x0 = [0.25, 0.1];
        let phi = |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            (-r2).exp()
        };
        let (t, nt, m) = (1.0, 64, 8000);
        let ens = simulate(&cf, &x0, t, nt, m, 31, true).unwrap();
        let bel = bel_gradient(&cf, &ens, &phi, t).unwrap();
        let fd = fd_gradient(&cf, &x0, &phi, t, nt, m, 31, 0.02).unwrap();
        for j in 0..2 {
            let gap = (bel[j].value - fd[j].value).abs();
            let combined = bel[j].std_error.hypot(fd[j].std_error);
            assert!(gap <= 3.0 * combined, "component {j}: gap {gap}, combined se {combined}");
        }
    }

    #[test]
    fn gradient_weight_requires_invertible_diffusion_and_flows() {
        let cf = CoefficientField::frozen(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 8, 16, 1, true).unwrap();
        assert!(matches!(
            bel_gradient(&cf, &ens, &|x: &[f64]| x[0], 1.0),
            Err(Error::Ellipticity(_))
        ));
        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 8, 16, 1, false).unwrap();
        assert!(bel_gradient(&cf, &ens, &|x: &[f64]| x[0], 1.0).is_err());
    }

    #[test]
    fn flow_survey_is_exact_for_constant_and_linear_flows() {
        let starts = vec![vec![0.0, 0.0], vec![0.5, -0.3]];
        let cf = CoefficientField::family_a(2).unwrap();
        let rows = flow_moment_survey(&cf, &starts, 1.0, 16, &[2.0, 4.0], &[1], 64, 5).unwrap();
        assert_eq!(rows[0].value, 2.0);
        assert_eq!(rows[1].value, 4.0);

        let cf = CoefficientField::family_b(2, 1.0).unwrap();
        let rows = flow_moment_survey(&cf, &starts, 1.0, 16, &[2.0, 4.0], &[1], 64, 5).unwrap();
        assert_eq!(rows[0].value, 2.0);
        assert_eq!(rows[1].value, 4.0);
    }

    #[test]
    fn singular_flow_moments_are_stable_across_mollification_levels() {
        // Nx = 64 keeps the finest mollifier (eps = 1/8) above the mesh
        // width.  Survey starts form a coarse generic lattice: points within
        // ~eps of the singular center are excluded, because there the Euler
        // step (sqrt(dt) ~ eps) cannot resolve the mollification ball and
        // the p = 4 tail artificially grows with n.
        let grid = Grid::new(2, L, 64, 1.0, 32).unwrap();
        let cf = CoefficientField::family_c(grid, 2, MollifierShape::PolynomialBump).unwrap();
        let starts = coarse_start_lattice(&grid);
        let rows =
            flow_moment_survey(&cf, &starts, 1.0, 64, &[2.0, 4.0], &[2, 4, 8], 1500, 17).unwrap();
        for &p in &[2.0, 4.0] {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.p == p).map(|r| r.value).collect();
            assert_eq!(vals.len(), 3);
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            assert!(hi / lo <= 2.0, "p = {p}: levels spread {vals:?}");
        }
    }

    #[test]
    fn contraction_ratio_is_one_for_rigid_flows() {
        // The difference of two shared-noise solutions is constant for b = 0
        // and shrinking for the linear contraction, so the ratio is 1 up to
        // the rounding wobble of adding the same increment to both paths.
        let cf = CoefficientField::family_a(2).unwrap();
        let r = pathwise_contraction(&cf, &[0.1, 0.0], &[0.0, 0.1], 1.0, 32, 2.0, 200, 9).unwrap();
        assert!((r.value - 1.0).abs() <= 1e-12, "ratio {}", r.value);
        assert!(r.std_error <= 1e-13);

        let cf = CoefficientField::family_b(2, 1.0).unwrap();
        let r = pathwise_contraction(&cf, &[0.1, 0.0], &[0.0, 0.1], 1.0, 32, 2.0, 200, 9).unwrap();
        assert!((r.value - 1.0).abs() <= 1e-12, "ratio {}", r.value);

        assert!(pathwise_contraction(&cf, &[0.1, 0.0], &[0.1, 0.0], 1.0, 8, 2.0, 4, 1).is_err());
    }

    #[test]
    fn contraction_ratio_is_stable_for_singular_drift() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let cf = CoefficientField::family_c(grid, 4, MollifierShape::PolynomialBump).unwrap();
        let mut values = Vec::new();
        for &sep in &[0.1, 0.05, 0.025] {
            let r = pathwise_contraction(
                &cf,
                &[0.2 + sep / 2.0, 0.1],
                &[0.2 - sep / 2.0, 0.1],
                1.0,
                64,
                2.0,
                2000,
                13,
            )
            .unwrap();
            values.push(r.value);
        }
        let (lo, hi) =
            values.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi / lo <= 2.0, "separations spread {values:?}");
    }

    #[test]
    fn tightness_modulus_vanishes_without_motion_and_scales_for_brownian_paths() {
        let cf = CoefficientField::frozen(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 64, 16, 3, false).unwrap();
        let rows = tightness_modulus(&ens, &[0.25]).unwrap();
        assert_eq!(rows[0].value, 0.0);

        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 256, 4000, 44, false).unwrap();
        let deltas: Vec<f64> = (4..=7).map(|j| 1.0 / f64::powi(2.0, j)).collect();
        let rows = tightness_modulus(&ens, &deltas).unwrap();
        let xs: Vec<f64> = rows.iter().map(|r| r.delta).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.value).collect();
        let slope = loglog_slope(&xs, &ys);
        assert!((0.2..=0.3).contains(&slope), "modulus slope {slope}");

        assert!(tightness_modulus(&ens, &[0.7]).is_err());
        assert!(tightness_modulus(&ens, &[0.2501]).is_err());
    }

    #[test]
    fn critical_family_modulus_is_uniform_across_mollification() {
        let grid = Grid::new(3, L, 16, 1.0, 16).unwrap();
        let deltas = [0.125, 0.25];
        let mut per_level: Vec<Vec<f64>> = Vec::new();
        for n in [2usize, 4, 8] {
            let cf = CoefficientField::family_d(grid, n, MollifierShape::PolynomialBump).unwrap();
            let ens = simulate(&cf, &[0.2, 0.1, -0.1], 1.0, 64, 1000, 777, false).unwrap();
            let rows = tightness_modulus(&ens, &deltas).unwrap();
            per_level.push(rows.iter().map(|r| r.value).collect());
        }
        for di in 0..deltas.len() {
            let vals: Vec<f64> = per_level.iter().map(|v| v[di]).collect();
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            assert!(hi / lo <= 1.5, "delta {}: spread {vals:?}", deltas[di]);
        }
    }

    #[test]
    fn short_window_ladder_ratios_stay_bounded() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let f = bump_field(grid, &[0.0, 0.0], 0.8);
        let np = NormParams::over_horizon(0.0, 2.0, TimeExponent::Finite(2.0), 1.0, &grid);
        let cf = CoefficientField::family_a(2).unwrap();
        let ens = simulate(&cf, &[0.0, 0.0], 1.0, 64, 2000, 55, false).unwrap();
        let deltas = [0.0625, 0.125, 0.25];
        let rows = krylov_ladder(&ens, &f, &np, &deltas, 0.5).unwrap();
        assert_eq!(rows.len(), 3);
        let (lo, hi) = rows
            .iter()
            .map(|r| r.ratio)
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        assert!(lo > 0.0 && hi.is_finite());
        assert!(hi / lo <= 4.0, "ladder ratios spread too widely: {rows:?}");
        assert!(krylov_ladder(&ens, &f, &np, &[2.0], 0.5).is_err());
    }

    #[test]
    fn weak_agreement_vanishes_for_the_unit_function() {
        let grid = Grid::new(2, L, 16, 1.0, 16).unwrap();
        let one = sample(grid, Rank::Scalar, false, |_, _, out| out[0] = 1.0).unwrap();
        let bump = bump_field(grid, &[0.3, -0.2], 0.9);
        let battery = vec![("one".to_string(), one), ("bump".to_string(), bump)];
        let a1 = CoefficientField::family_a(2).unwrap();
        let a2 = CoefficientField::family_a(2).unwrap();
        let rows = weak_agreement(&a1, &a2, &battery, &[0.0, 0.0], 1.0, 32, 4000, 400).unwrap();
        assert_eq!(rows[0].difference, 0.0);
        assert!(
            rows[1].difference.abs() <= 3.0 * rows[1].combined_se,
            "bump difference {} vs se {}",
            rows[1].difference,
            rows[1].combined_se
        );
    }

    #[test]
    fn flow_matches_pathwise_finite_differences_on_singular_drift() {
        let grid = Grid::new(2, L, 32, 1.0, 32).unwrap();
        let cf = CoefficientField::family_c(grid, 4, MollifierShape::PolynomialBump).unwrap();
        let x0 = [0.2, 0.1];
        let delta = 1e-3;
        let (t, nt, m) = (1.0, 64, 400);
        let base = simulate(&cf, &x0, t, nt, m, 61, true).unwrap();
        for col in 0..2 {
            let mut shifted = x0;
            shifted[col] += delta;
            let bumped = simulate(&cf, &shifted, t, nt, m, 61, false).unwrap();
            let diffs: Vec<f64> = (0..m)
                .map(|p| {
                    let jmat = base.flow(p, nt).unwrap();
                    let xb = bumped.state(p, nt);
                    let xa = base.state(p, nt);
                    (0..2)
                        .map(|i| ((xb[i] - xa[i]) / delta - jmat[i * 2 + col]).abs())
                        .fold(0.0f64, f64::max)
                })
                .collect();
            let (mean, _) = mean_se(&diffs);
            assert!(mean <= 0.1, "column {col}: flow vs pathwise FD gap {mean}");
        }
    }

    #[test]
    fn family_catalog_records_admissibility_notes() {
        let cat = catalog();
        assert_eq!(cat.len(), 5);
        let c = cat.iter().find(|r| r.id == "C").unwrap();
        assert!(c.admissibility.contains("d/p = 2/5"));
        let d = cat.iter().find(|r| r.id == "D").unwrap();
        assert!(d.admissibility.contains("critical"));
    }

    #[test]
    fn mollified_families_are_bounded_with_recorded_ellipticity() {
        let grid = Grid::new(2, L, 32, 1.0, 16).unwrap();
        for n in [2usize, 4, 8] {
            let cf = CoefficientField::family_c(grid, n, MollifierShape::GaussianTruncated).unwrap();
            let b = cf.drift_field().unwrap();
            assert!(b.max_magnitude().is_finite());
            assert_eq!(cf.c0, Some(2.0));
            assert_eq!(cf.level, n);
        }
        let cf = CoefficientField::family_e(grid, 4, MollifierShape::GaussianTruncated).unwrap();
        let c0 = cf.c0.unwrap();
        assert!((1.9..3.0).contains(&c0), "family E c0 = {c0}");
        let finer = cf.at_level(8).unwrap();
        assert_eq!(finer.level, 8);
    }

    #[test]
    fn singular_drift_norms_confirm_subcritical_admissibility() {
        // |||b|||_{L^5 with sup-in-time} is finite on the raw lattice sample
        // and the mollified field's norm stays within a fixed multiple.
        let grid = Grid::new(2, L, 64, 1.0, 8).unwrap();
        let raw = raw_drift(FamilyId::C, grid).unwrap().magnitude();
        let np = NormParams::over_horizon(0.0, 5.0, TimeExponent::Sup, 1.0, &grid);
        let norm_raw = localized_norm(&raw, &np).unwrap().value;
        assert!(norm_raw.is_finite() && norm_raw > 0.0);
        for n in [5usize, 10, 20] {
            let cf = CoefficientField::family_c(grid, n, MollifierShape::PolynomialBump).unwrap();
            let norm_moll =
                localized_norm(&cf.drift_field().unwrap().magnitude(), &np).unwrap().value;
            assert!(
                norm_moll <= 1.2 * norm_raw,
                "n = {n}: mollified norm {norm_moll} vs raw {norm_raw}"
            );
        }
    }

    #[test]
    fn critical_drift_mollifier_modulus_decreases() {
        let grid = Grid::new(3, L, 32, 1.0, 8).unwrap();
        let raw = raw_drift(FamilyId::D, grid).unwrap().magnitude();
        let rows = crate::norms::mollifier_modulus(
            &raw,
            3.0,
            1.0,
            MollifierShape::PolynomialBump,
            &[0.4, 0.2, 0.1, 0.05],
        )
        .unwrap();
        for pair in rows.windows(2) {
            assert!(
                pair[1].1 < pair[0].1,
                "modulus not strictly decreasing: {rows:?}"
            );
        }
    }
}
