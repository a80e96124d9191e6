//! Drift-straightening (Zvonkin) transforms.
//!
//! Given diffusion σ and drift b, the calibration solves the damped vector
//! problem ∂_t u + a^{ij}D_{ij}u + b·∇u − λu + b = 0, u(T) = 0 (with
//! a = σσᵀ/2, one scalar solve per component), doubling λ until the
//! potential is small: `smallness = max|u| + max|∇u| ≤ 1/2` on the lattice.
//! The map Φ(t,x) = x + u(t,x) is then a bi-Lipschitz change of variables
//! that removes the drift; its inverse is computed by fixed-point iteration
//! and the transformed coefficients σ̃ = (∇Φ·σ)∘Φ⁻¹, b̃ = λ·u∘Φ⁻¹ are
//! returned as lattice fields ready for simulation.
//!
//! Off-lattice values use multilinear periodic interpolation; all matrix
//! norms are spectral (largest singular value), so the textbook bounds
//! ‖∇Φ‖ ≤ 1 + ‖∇u‖ ≤ 3/2 and ‖(∇Φ)⁻¹‖ ≤ 2 hold verbatim.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridFn, Rank};
use crate::pde::{solve_forward, sym_eig_range, ParabolicProblem};

/// Hard cap on λ-doublings before calibration gives up.
const MAX_DOUBLINGS: usize = 20;

/// Fixed-point stopping tolerance for [`ZvonkinTransform::phi_inverse`].
const INVERSION_TOL: f64 = 1e-10;

/// Iteration cap for the fixed-point inversion.
const INVERSION_MAX_ITERS: usize = 60;

/// A calibrated drift-straightening transform Φ(t,x) = x + u(t,x).
#[derive(Debug, Clone)]
pub struct ZvonkinTransform {
    /// Vector potential u on the space-time lattice (slice k holds u(t_k)).
    pub u: GridFn,
    /// Centered-difference Jacobian ∇u; entry `i*d + j` is ∂_j u_i.
    pub jacobian: GridFn,
    /// Damping that achieved the smallness target.
    pub lambda: f64,
    /// Achieved value of max|u| + max‖∇u‖ over the lattice.
    pub smallness: f64,
    /// Calibration history as (λ, smallness) pairs, one per attempt.
    pub trace: Vec<(f64, f64)>,
}

/// Transformed SDE coefficients on the lattice of the straightened process.
#[derive(Debug, Clone)]
pub struct TransformedPair {
    /// σ̃(t,y) = (∇Φ·σ)(t, Φ⁻¹(t,y)).
    pub sigma_tilde: GridFn,
    /// b̃(t,y) = λ·u(t, Φ⁻¹(t,y)); bounded by λ·smallness in magnitude.
    pub b_tilde: GridFn,
}

/// Largest singular value of a d×d matrix (spectral norm).
pub fn spectral_norm(m: &[f64], dim: usize) -> f64 {
    let mut gram = [0.0f64; 9];
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for k in 0..dim {
                s += m[k * dim + i] * m[k * dim + j];
            }
            gram[i * dim + j] = s;
        }
    }
    let (_, hi) = sym_eig_range(&gram[..dim * dim], dim);
    hi.max(0.0).sqrt()
}

/// Centered-difference Jacobian of a vector field, slice by slice.
///
/// The output is matrix-valued with entry `i*d + j` holding ∂_j u_i.
pub fn vector_jacobian(u: &GridFn) -> GridFn {
    let grid = u.grid;
    let d = grid.dim;
    let inv2h = 1.0 / (2.0 * grid.h());
    let mut jac = GridFn::zeros(grid, Rank::Matrix, u.time_dependent);
    for k in 0..u.slices() {
        let src = u.slice(k).to_vec();
        let dst = jac.slice_mut(k);
        dst.par_chunks_mut(d * d).enumerate().for_each(|(cell, out)| {
            let mut multi = [0usize; 3];
            grid.multi_index(cell, &mut multi);
            for j in 0..d {
                let mut off = [0i64; 3];
                off[j] = 1;
                let plus = grid.shifted_index(&multi, &off);
                off[j] = -1;
                let minus = grid.shifted_index(&multi, &off);
                for i in 0..d {
                    out[i * d + j] = (src[plus * d + i] - src[minus * d + i]) * inv2h;
                }
            }
        });
    }
    jac
}

/// max|u| + max‖∇u‖ over every slice and lattice point (spectral norm).
fn smallness_of(u: &GridFn, jac: &GridFn) -> f64 {
    let d = u.grid.dim;
    let mut max_u: f64 = 0.0;
    let mut max_grad: f64 = 0.0;
    for k in 0..u.slices() {
        let us = u.slice(k);
        let max_u_k = us
            .par_chunks(d)
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .reduce(|| 0.0, f64::max);
        let js = jac.slice(k);
        let max_g_k = js
            .par_chunks(d * d)
            .map(|m| spectral_norm(m, d))
            .reduce(|| 0.0, f64::max);
        max_u = max_u.max(max_u_k);
        max_grad = max_grad.max(max_g_k);
    }
    max_u + max_grad
}

/// a = σσᵀ/2 as a lattice matrix field.
pub fn half_diffusion(sigma: &GridFn) -> Result<GridFn> {
    if sigma.rank != Rank::Matrix {
        return Err(Error::shape("diffusion coefficient must be a matrix field"));
    }
    let grid = sigma.grid;
    let d = grid.dim;
    let mut a = GridFn::zeros(grid, Rank::Matrix, sigma.time_dependent);
    for k in 0..sigma.slices() {
        let src = sigma.slice(k);
        let dst = a.slice_mut(k);
        for cell in 0..grid.cells() {
            let m = &src[cell * d * d..(cell + 1) * d * d];
            let out = &mut dst[cell * d * d..(cell + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += m[i * d + l] * m[j * d + l];
                    }
                    out[i * d + j] = 0.5 * s;
                }
            }
        }
    }
    Ok(a)
}

/// Extracts one component of a static vector field as a scalar field.
fn vector_component(b: &GridFn, comp: usize) -> GridFn {
    let grid = b.grid;
    let d = grid.dim;
    let mut out = GridFn::zeros(grid, Rank::Scalar, false);
    let dst = out.slice_mut(0);
    let src = b.slice(0);
    for cell in 0..grid.cells() {
        dst[cell] = src[cell * d + comp];
    }
    out
}

/// Solves the terminal-value drift-removal system at a fixed λ.
///
/// Each component u_i satisfies the scalar backward problem with source b_i;
/// substituting s = T − t turns it into the forward solve with zero initial
/// data, so the returned slices are the forward solution read in reverse.
fn potential_at_lambda(a: &GridFn, b: &GridFn, lambda: f64) -> Result<GridFn> {
    let grid = a.grid;
    let d = grid.dim;
    let mut u = GridFn::zeros(grid, Rank::Vector, true);
    for comp in 0..d {
        let source = vector_component(b, comp);
        let prob = ParabolicProblem { a, b: Some(b), lambda, f: Some(&source) };
        let v = solve_forward(prob)?;
        for k in 0..=grid.nt {
            let vs = v.slice(grid.nt - k);
            let us = u.slice_mut(k);
            for cell in 0..grid.cells() {
                us[cell * d + comp] = vs[cell];
            }
        }
    }
    Ok(u)
}

/// Calibrates the transform: doubles λ from `lambda0` until smallness ≤ 1/2.
///
/// σ and b must be static lattice fields on the same grid (the coefficient
/// families in this laboratory are autonomous).  Fails with the full
/// calibration trace if twenty doublings do not reach the target.
pub fn build_transform(sigma: &GridFn, b: &GridFn, lambda0: f64) -> Result<ZvonkinTransform> {
    if b.rank != Rank::Vector {
        return Err(Error::shape("drift must be a vector field"));
    }
    if sigma.time_dependent || b.time_dependent {
        return Err(Error::invalid(
            "transform calibration expects autonomous (static) coefficients",
        ));
    }
    sigma.check_same_grid(b)?;
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::invalid(format!("lambda0 must be positive, got {lambda0}")));
    }
    let a = half_diffusion(sigma)?;

    let mut trace = Vec::new();
    let mut lambda = lambda0;
    for attempt in 0..=MAX_DOUBLINGS {
        let u = potential_at_lambda(&a, b, lambda)?;
        let jacobian = vector_jacobian(&u);
        let smallness = smallness_of(&u, &jacobian);
        trace.push((lambda, smallness));
        if smallness <= 0.5 {
            return Ok(ZvonkinTransform { u, jacobian, lambda, smallness, trace });
        }
        if attempt == MAX_DOUBLINGS {
            break;
        }
        lambda *= 2.0;
    }
    Err(Error::SmallnessNotReached {
        doublings: MAX_DOUBLINGS,
        lambda,
        trace,
    })
}

impl ZvonkinTransform {
    /// Wraps an externally supplied potential (used for synthetic checks).
    pub fn from_potential(u: GridFn, lambda: f64) -> Result<ZvonkinTransform> {
        if u.rank != Rank::Vector {
            return Err(Error::shape("transform potential must be a vector field"));
        }
        u.check_finite("transform potential")?;
        let jacobian = vector_jacobian(&u);
        let smallness = smallness_of(&u, &jacobian);
        Ok(ZvonkinTransform { u, jacobian, lambda, smallness, trace: vec![(lambda, smallness)] })
    }

    /// Φ(t,x) = x + u(t,x); the output lives on the periodic cover.
    pub fn phi(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.u.eval(t, x, out);
        for (o, xi) in out.iter_mut().zip(x.iter()) {
            *o += xi;
        }
    }

    /// ∇Φ(t,x) = I + ∇u(t,x), interpolated from the lattice Jacobian.
    pub fn grad_phi(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.u.grid.dim;
        self.jacobian.eval(t, x, out);
        for i in 0..d {
            out[i * d + i] += 1.0;
        }
    }

    /// Inverts Φ(t,·) at `y` by the contraction x ← y − u(t,x).
    ///
    /// Converges geometrically with rate ≤ smallness; errors after sixty
    /// iterations if the update never drops below 1e−10.
    pub fn phi_inverse(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.phi_inverse_traced(t, y, out).map(|_| ())
    }

    /// As [`phi_inverse`](Self::phi_inverse), returning the update sizes
    /// ‖x_{k+1} − x_k‖ so callers can audit the contraction rate.
    pub fn phi_inverse_traced(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<Vec<f64>> {
        let d = self.u.grid.dim;
        debug_assert_eq!(y.len(), d);
        let mut x = [0.0f64; 3];
        let mut uval = [0.0f64; 3];
        x[..d].copy_from_slice(y);
        let mut deltas = Vec::new();
        for _ in 0..INVERSION_MAX_ITERS {
            self.u.eval(t, &x[..d], &mut uval[..d]);
            let mut delta2 = 0.0;
            for i in 0..d {
                let next = y[i] - uval[i];
                let step = next - x[i];
                delta2 += step * step;
                x[i] = next;
            }
            let delta = delta2.sqrt();
            deltas.push(delta);
            if delta <= INVERSION_TOL {
                out[..d].copy_from_slice(&x[..d]);
                return Ok(deltas);
            }
        }
        Err(Error::InversionDiverged {
            iters: INVERSION_MAX_ITERS,
            delta: *deltas.last().unwrap_or(&f64::NAN),
        })
    }

    /// Lattice fields (σ̃, b̃) of the straightened SDE dY = b̃ dt + σ̃ dW.
    ///
    /// Every lattice point y of every slice is pulled back through Φ⁻¹, so
    /// the cost is one fixed-point inversion per space-time node.
    pub fn transformed_coefficients(&self, sigma: &GridFn) -> Result<TransformedPair> {
        if sigma.rank != Rank::Matrix {
            return Err(Error::shape("diffusion coefficient must be a matrix field"));
        }
        sigma.check_same_grid(&self.u)?;
        let grid = self.u.grid;
        let d = grid.dim;
        let dd = d * d;
        let mut sigma_tilde = GridFn::zeros(grid, Rank::Matrix, true);
        let mut b_tilde = GridFn::zeros(grid, Rank::Vector, true);
        for k in 0..=grid.nt {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.cells())
                .into_par_iter()
                .map(|cell| -> Result<(Vec<f64>, Vec<f64>)> {
                    let mut y = [0.0f64; 3];
                    grid.point(cell, &mut y);
                    let mut x = [0.0f64; 3];
                    self.phi_inverse(grid.time(k), &y[..d], &mut x[..d])?;

                    let mut uval = vec![0.0; d];
                    self.u.eval_slice(k.min(self.u.slices() - 1), &x[..d], &mut uval);
                    let bt: Vec<f64> = uval.iter().map(|v| self.lambda * v).collect();

                    let mut jac = vec![0.0; dd];
                    self.jacobian
                        .eval_slice(k.min(self.jacobian.slices() - 1), &x[..d], &mut jac);
                    for i in 0..d {
                        jac[i * d + i] += 1.0;
                    }
                    let mut sig = vec![0.0; dd];
                    sigma.eval_slice(sigma.slice_for_step(k), &x[..d], &mut sig);
                    let mut st = vec![0.0; dd];
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for l in 0..d {
                                s += jac[i * d + l] * sig[l * d + j];
                            }
                            st[i * d + j] = s;
                        }
                    }
                    Ok((st, bt))
                })
                .collect::<Result<Vec<_>>>()?;
            let ss = sigma_tilde.slice_mut(k);
            for (cell, (st, _)) in rows.iter().enumerate() {
                ss[cell * dd..(cell + 1) * dd].copy_from_slice(st);
            }
            let bs = b_tilde.slice_mut(k);
            for (cell, (_, bt)) in rows.iter().enumerate() {
                bs[cell * d..(cell + 1) * d].copy_from_slice(bt);
            }
        }
        sigma_tilde.check_finite("sigma_tilde")?;
        b_tilde.check_finite("b_tilde")?;
        Ok(TransformedPair { sigma_tilde, b_tilde })
    }

    /// Largest value of ‖∇Φ‖ (spectral norm) over the space-time lattice.
    pub fn max_grad_phi(&self) -> f64 {
        let d = self.u.grid.dim;
        let mut worst: f64 = 0.0;
        for k in 0..self.jacobian.slices() {
            let js = self.jacobian.slice(k);
            let m = js
                .par_chunks(d * d)
                .map(|jac| {
                    let mut phi = [0.0f64; 9];
                    phi[..d * d].copy_from_slice(jac);
                    for i in 0..d {
                        phi[i * d + i] += 1.0;
                    }
                    spectral_norm(&phi[..d * d], d)
                })
                .reduce(|| 0.0, f64::max);
            worst = worst.max(m);
        }
        worst
    }
}

/// Result of [`conjugacy_check`]: how well Y = Φ(t, X_t) is reproduced by
/// simulating the transformed equation directly.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConjugacyReport {
    /// max over the step grid of E|Φ(t_k, X_k) − Y_k|.
    pub max_pathwise: f64,
    /// Per-step rows (t_k, E|Φ(t_k, X_k) − Y_k|).
    pub pathwise: Vec<(f64, f64)>,
    /// One row per test function: E f(Φ(T, X_T)) vs E f(Y_T); `difference`
    /// and `combined_se` come from the paired per-path differences (shared
    /// noise), not from independent-sample variances.
    pub weak_rows: Vec<crate::sde::WeakAgreementRow>,
}

/// One Euler step x += b(t,x)Δt + σ(t,x)ΔW with lattice coefficients.
fn lattice_step(
    b: &GridFn,
    sigma: &GridFn,
    t: f64,
    dt: f64,
    x: &mut [f64],
    dw: &[f64],
    bv: &mut [f64],
    sv: &mut [f64],
) {
    let d = x.len();
    b.eval(t, x, bv);
    sigma.eval(t, x, sv);
    for i in 0..d {
        let mut acc = bv[i] * dt;
        for j in 0..d {
            acc += sv[i * d + j] * dw[j];
        }
        x[i] += acc;
    }
}

/// Simulates X under (σ, b) and Y under the transformed pair (σ̃, b̃) from
/// y₀ = Φ(0, x₀) with the same Brownian increments, and reports how far
/// Φ(t, X_t) drifts from Y_t, plus weak errors over a test-function battery.
///
/// Each weak row's `difference` is the paired mean of φ(Φ(T, X_T)) − φ(Y_T)
/// and its `combined_se` is the quadrature combination of the two sides'
/// standard errors, the usual scale for comparing two estimates.
///
/// Both systems advance through the identical stepping code, so when the
/// transform is the identity (b ≡ 0) the pathwise discrepancy and every
/// weak difference are exactly zero.
pub fn conjugacy_check(
    tf: &ZvonkinTransform,
    sigma: &GridFn,
    b: &GridFn,
    battery: &[(String, GridFn)],
    x0: &[f64],
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<ConjugacyReport> {
    use crate::rng::path_rng;
    use crate::stats::{mean_se, pairwise_sum};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let grid = tf.u.grid;
    let d = grid.dim;
    if x0.len() != d {
        return Err(Error::shape("x0 dimension does not match the transform lattice"));
    }
    if steps == 0 || paths == 0 {
        return Err(Error::invalid("need steps >= 1 and paths >= 1"));
    }
    for (label, f) in battery {
        if f.rank != Rank::Scalar {
            return Err(Error::shape(format!("battery entry {label:?} is not scalar")));
        }
    }
    let pair = tf.transformed_coefficients(sigma)?;
    let t_horizon = grid.t_horizon;
    let dt = t_horizon / steps as f64;
    let sqdt = dt.sqrt();
    let nb = battery.len();

    struct PathRow {
        disc: Vec<f64>,
        mapped: Vec<f64>,
        direct: Vec<f64>,
    }
    let rows: Vec<PathRow> = (0..paths)
        .into_par_iter()
        .map(|m| -> Result<PathRow> {
            let mut rng = path_rng(seed, m as u64);
            let (mut x, mut y) = ([0.0f64; 3], [0.0f64; 3]);
            x[..d].copy_from_slice(x0);
            tf.phi(0.0, x0, &mut y[..d]);
            let (mut bv, mut sv) = ([0.0f64; 3], [0.0f64; 9]);
            let (mut dw, mut img) = ([0.0f64; 3], [0.0f64; 3]);
            let mut disc = Vec::with_capacity(steps + 1);
            for k in 0..=steps {
                let t = k as f64 * dt;
                tf.phi(t, &x[..d], &mut img[..d]);
                let gap: f64 = (0..d).map(|i| (img[i] - y[i]) * (img[i] - y[i])).sum();
                disc.push(gap.sqrt());
                if k == steps {
                    break;
                }
                for slot in dw[..d].iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *slot = sqdt * z;
                }
                lattice_step(b, sigma, t, dt, &mut x[..d], &dw[..d], &mut bv[..d], &mut sv[..d * d]);
                lattice_step(
                    &pair.b_tilde,
                    &pair.sigma_tilde,
                    t,
                    dt,
                    &mut y[..d],
                    &dw[..d],
                    &mut bv[..d],
                    &mut sv[..d * d],
                );
                let finite = x[..d].iter().chain(y[..d].iter()).all(|v| v.is_finite());
                if !finite {
                    return Err(Error::PathBlowUp { path: m as u64, step: k + 1, seed });
                }
            }
            tf.phi(t_horizon, &x[..d], &mut img[..d]);
            let mut val = [0.0f64; 1];
            let mut mapped = Vec::with_capacity(nb);
            let mut direct = Vec::with_capacity(nb);
            for (_, f) in battery {
                f.eval(t_horizon, &img[..d], &mut val);
                mapped.push(val[0]);
                f.eval(t_horizon, &y[..d], &mut val);
                direct.push(val[0]);
            }
            Ok(PathRow { disc, mapped, direct })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pathwise = Vec::with_capacity(steps + 1);
    let mut column = vec![0.0; paths];
    for k in 0..=steps {
        for (m, row) in rows.iter().enumerate() {
            column[m] = row.disc[k];
        }
        pathwise.push((k as f64 * dt, pairwise_sum(&column) / paths as f64));
    }
    let max_pathwise = pathwise.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);

    let weak_rows = battery
        .iter()
        .enumerate()
        .map(|(fi, (label, _))| {
            let mapped: Vec<f64> = rows.iter().map(|r| r.mapped[fi]).collect();
            let direct: Vec<f64> = rows.iter().map(|r| r.direct[fi]).collect();
            let diffs: Vec<f64> =
                mapped.iter().zip(direct.iter()).map(|(a, b)| a - b).collect();
            // The difference is the paired estimate (exactly zero for the
            // identity transform); its yardstick combines each side's own
            // standard error, as for any comparison of two estimates.
            let (_, se_mapped) = mean_se(&mapped);
            let (_, se_direct) = mean_se(&direct);
            crate::sde::WeakAgreementRow {
                label: label.clone(),
                first: pairwise_sum(&mapped) / paths as f64,
                second: pairwise_sum(&direct) / paths as f64,
                difference: mean_se(&diffs).0,
                combined_se: se_mapped.hypot(se_direct),
            }
        })
        .collect();

    Ok(ConjugacyReport { max_pathwise, pathwise, weak_rows })
}

/// Refinement ladder for [`conjugacy_check`]'s pathwise discrepancy.
///
/// Runs the conjugacy comparison at each step count in `steps_list` (every
/// entry must divide the last, finest one) with nested Brownian increments:
/// the coarse rungs aggregate the finest rung's increments, so the ladder
/// ratios measure time-discretization error rather than Monte Carlo noise.
/// Returns (steps, max over the step grid of E|Φ(t_k, X_k) − Y_k|) per rung.
pub fn conjugacy_ladder(
    tf: &ZvonkinTransform,
    sigma: &GridFn,
    b: &GridFn,
    x0: &[f64],
    steps_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    use crate::rng::path_rng;
    use crate::stats::pairwise_sum;
    use rand::Rng;
    use rand_distr::StandardNormal;

    let grid = tf.u.grid;
    let d = grid.dim;
    if x0.len() != d {
        return Err(Error::shape("x0 dimension does not match the transform lattice"));
    }
    let &fine = steps_list.last().ok_or_else(|| Error::invalid("steps_list is empty"))?;
    for &s in steps_list {
        if s == 0 || fine % s != 0 {
            return Err(Error::invalid(format!(
                "ladder step counts must divide the finest rung ({s} vs {fine})"
            )));
        }
    }
    let pair = tf.transformed_coefficients(sigma)?;
    let t_horizon = grid.t_horizon;
    let fine_dt = t_horizon / fine as f64;
    let sq_fine = fine_dt.sqrt();

    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|m| -> Result<Vec<f64>> {
            let mut rng = path_rng(seed, m as u64);
            let mut fine_dw = vec![0.0f64; fine * d];
            for slot in fine_dw.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = sq_fine * z;
            }
            let mut worsts = Vec::with_capacity(steps_list.len());
            for &steps in steps_list {
                let group = fine / steps;
                let dt = t_horizon / steps as f64;
                let (mut x, mut y) = ([0.0f64; 3], [0.0f64; 3]);
                x[..d].copy_from_slice(x0);
                tf.phi(0.0, x0, &mut y[..d]);
                let (mut bv, mut sv) = ([0.0f64; 3], [0.0f64; 9]);
                let (mut dw, mut img) = ([0.0f64; 3], [0.0f64; 3]);
                let mut worst = 0.0f64;
                for k in 0..steps {
                    let t = k as f64 * dt;
                    dw[..d].fill(0.0);
                    for g in 0..group {
                        let off = (k * group + g) * d;
                        for i in 0..d {
                            dw[i] += fine_dw[off + i];
                        }
                    }
                    lattice_step(
                        b,
                        sigma,
                        t,
                        dt,
                        &mut x[..d],
                        &dw[..d],
                        &mut bv[..d],
                        &mut sv[..d * d],
                    );
                    lattice_step(
                        &pair.b_tilde,
                        &pair.sigma_tilde,
                        t,
                        dt,
                        &mut y[..d],
                        &dw[..d],
                        &mut bv[..d],
                        &mut sv[..d * d],
                    );
                    let finite =
                        x[..d].iter().chain(y[..d].iter()).all(|v| v.is_finite());
                    if !finite {
                        return Err(Error::PathBlowUp { path: m as u64, step: k + 1, seed });
                    }
                    let tk = (k + 1) as f64 * dt;
                    tf.phi(tk, &x[..d], &mut img[..d]);
                    let gap: f64 =
                        (0..d).map(|i| (img[i] - y[i]) * (img[i] - y[i])).sum();
                    worst = worst.max(gap.sqrt());
                }
                worsts.push(worst);
            }
            Ok(worsts)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut column = vec![0.0; paths];
    Ok(steps_list
        .iter()
        .enumerate()
        .map(|(ri, &steps)| {
            for (m, row) in per_path.iter().enumerate() {
                column[m] = row[ri];
            }
            (steps, pairwise_sum(&column) / paths as f64)
        })
        .collect())
}
