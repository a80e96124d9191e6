//! Bessel-potential and localized space-time norms.
//!
//! The spatial norm is `‖(I - Δ)^{α/2} f‖_p`, computed by the exact Fourier
//! multiplier `(1 + |ξ|²)^{α/2}` on the periodic lattice (box frequencies
//! `ξ = (π/L)·k`).  The localized space-time norm takes a smooth cutoff
//! `χ_r^z` (1 on the r-ball about z, 0 outside 2r), measures
//!
//! ```text
//!     ( ∫_{t0}^{t1} ‖ χ_r^z f(t,·) ‖_{α,p}^q dt )^{1/q}
//! ```
//!
//! with the left-endpoint time rule (max over slices when q = ∞), and takes
//! the supremum over a z-lattice of stride at most `r/2`.  The overlap of
//! neighboring cutoffs makes that discrete supremum equivalent to the
//! continuum one up to a fixed factor absorbed into comparison constants.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fft::{for_each_freq, FftBox};
use crate::grid::{cutoff, mollify, Grid, GridFn, Mollifier, MollifierShape, Rank};

/// Integrability exponent in time: finite `q` or the essential supremum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeExponent {
    Finite(f64),
    Sup,
}

impl TimeExponent {
    pub fn validate(&self) -> Result<()> {
        match self {
            TimeExponent::Finite(q) if !(*q > 1.0 && q.is_finite()) => Err(Error::invalid(
                format!("time exponent q must exceed 1 (or be \"inf\"), got {q}"),
            )),
            _ => Ok(()),
        }
    }
}

impl Serialize for TimeExponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TimeExponent::Finite(q) => s.serialize_f64(*q),
            TimeExponent::Sup => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TimeExponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) => Ok(TimeExponent::Finite(q)),
            Raw::Text(t) if t == "inf" => Ok(TimeExponent::Sup),
            Raw::Text(t) => Err(D::Error::custom(format!("bad time exponent {t:?}"))),
        }
    }
}

/// Parameter bundle `(α, p, q, [t0, t1], r)` for localized norms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormParams {
    /// Smoothness index of the spatial Bessel norm.
    pub alpha: f64,
    /// Spatial integrability, `p > 1`.
    pub p: f64,
    /// Time integrability, `q > 1` or `Sup`.
    pub q: TimeExponent,
    /// Time window start.
    pub t0: f64,
    /// Time window end.
    pub t1: f64,
    /// Localization radius `r < L/2`.
    pub radius: f64,
}

impl NormParams {
    /// Params over the full horizon of `grid`.
    pub fn over_horizon(alpha: f64, p: f64, q: TimeExponent, radius: f64, grid: &Grid) -> NormParams {
        NormParams { alpha, p, q, t0: 0.0, t1: grid.t_horizon, radius }
    }

    pub fn with_window(mut self, t0: f64, t1: f64) -> NormParams {
        self.t0 = t0;
        self.t1 = t1;
        self
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::invalid(format!("p must lie in (1, inf), got {}", self.p)));
        }
        self.q.validate()?;
        if !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite"));
        }
        if !(self.radius > 0.0) || self.radius >= grid.half_width / 2.0 {
            return Err(Error::invalid(format!(
                "localization radius must lie in (0, L/2) = (0, {}), got {}",
                grid.half_width / 2.0,
                self.radius
            )));
        }
        if !(self.t0 >= -1e-12 && self.t1 <= grid.t_horizon + 1e-12 && self.t1 > self.t0) {
            return Err(Error::invalid(format!(
                "time window [{}, {}] must be nondegenerate inside [0, {}]",
                self.t0, self.t1, grid.t_horizon
            )));
        }
        Ok(())
    }
}

/// Result of a localized-norm evaluation.
#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub value: f64,
    /// Cutoff center achieving the supremum.
    pub argmax_z: Vec<f64>,
    pub params: NormParams,
    /// Full per-center table (canonical z order); not serialized.
    #[serde(skip)]
    pub per_z: Vec<(Vec<f64>, f64)>,
}

/// Steps whose left endpoints lie in `[t0, t1)`, with endpoints snapped to
/// the step grid when within 1e-9 relative.  Returns `(k0, k1)` half-open.
pub fn window_steps(grid: &Grid, t0: f64, t1: f64) -> Result<(usize, usize)> {
    let dt = grid.dt();
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
    let k1 = snap(t1).min(grid.nt + 1);
    if k1 <= k0 {
        return Err(Error::invalid(format!(
            "time window [{t0}, {t1}] contains no left endpoints (dt = {dt})"
        )));
    }
    Ok((k0, k1))
}

/// The exact spectral multiplier `(1 + |ξ|²)^{α/2}` as a flat frequency array.
pub fn bessel_multiplier(grid: &Grid, alpha: f64) -> Vec<f64> {
    let mut mult = vec![0.0; grid.cells()];
    let xi_unit = std::f64::consts::PI / grid.half_width;
    for_each_freq(grid.dim, grid.nx, xi_unit, |flat, xi| {
        let xi2: f64 = xi[..grid.dim].iter().map(|v| v * v).sum();
        mult[flat] = (1.0 + xi2).powf(alpha / 2.0);
    });
    mult
}

fn apply_multiplier_slice(
    fft: &FftBox,
    mult: &[f64],
    input: &[f64],
    scratch: &mut Vec<Complex64>,
    out: &mut Vec<f64>,
) {
    scratch.clear();
    scratch.extend(input.iter().map(|v| Complex64::new(*v, 0.0)));
    fft.forward(scratch);
    for (v, m) in scratch.iter_mut().zip(mult.iter()) {
        *v *= *m;
    }
    fft.inverse(scratch);
    out.clear();
    out.extend(scratch.iter().map(|c| c.re));
}

/// Applies `(I - Δ)^{α/2}` slice-wise to a scalar field.
pub fn bessel_apply(f: &GridFn, alpha: f64) -> Result<GridFn> {
    if f.rank != Rank::Scalar {
        return Err(Error::shape("bessel_apply expects a scalar field"));
    }
    let fft = FftBox::new(f.grid.dim, f.grid.nx);
    let mult = bessel_multiplier(&f.grid, alpha);
    let mut out = GridFn::zeros(f.grid, Rank::Scalar, f.time_dependent);
    let mut scratch = Vec::new();
    let mut buf = Vec::new();
    for k in 0..f.slices() {
        apply_multiplier_slice(&fft, &mult, f.slice(k), &mut scratch, &mut buf);
        out.slice_mut(k).copy_from_slice(&buf);
    }
    out.check_finite("bessel_apply")?;
    Ok(out)
}

fn lp_of(values: &[f64], p: f64, hd: f64) -> f64 {
    let sum: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    (sum * hd).powf(1.0 / p)
}

/// Spatial Bessel norm `‖(I − Δ)^{α/2} f‖_p` of a static scalar field.
///
/// Time-dependent fields must go through [`localized_norm`] or be handled
/// slice-wise by the caller; vector/matrix fields through a componentwise
/// wrapper (for `α = 0` use [`GridFn::magnitude`]).
pub fn bessel_norm(f: &GridFn, alpha: f64, p: f64) -> Result<f64> {
    if f.rank != Rank::Scalar {
        return Err(Error::shape(
            "bessel_norm expects a scalar field; apply a componentwise wrapper instead",
        ));
    }
    if f.time_dependent {
        return Err(Error::invalid(
            "bessel_norm expects a static field; use localized_norm for space-time norms",
        ));
    }
    if !(p > 1.0) {
        return Err(Error::invalid(format!("p must exceed 1, got {p}")));
    }
    let hd = f.grid.h().powi(f.grid.dim as i32);
    if alpha == 0.0 {
        return Ok(lp_of(f.slice(0), p, hd));
    }
    let g = bessel_apply(f, alpha)?;
    Ok(lp_of(g.slice(0), p, hd))
}

/// Centers of the localization lattice: per-axis stride `2L/m ≤ r/2`.
pub fn z_lattice(grid: &Grid, radius: f64) -> Vec<Vec<f64>> {
    let m = (4.0 * grid.half_width / radius).ceil() as usize;
    let stride = 2.0 * grid.half_width / m as f64;
    let total = m.pow(grid.dim as u32);
    let mut zs = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut z = vec![0.0; grid.dim];
        for axis in (0..grid.dim).rev() {
            z[axis] = -grid.half_width + (rem % m) as f64 * stride;
            rem /= m;
        }
        zs.push(z);
    }
    zs
}

/// Localized space-time norm: sup over cutoff centers of the windowed
/// `L^q`-in-time, `H^{α,p}`-in-space norm of `χ_r^z f`.
pub fn localized_norm(f: &GridFn, np: &NormParams) -> Result<NormReport> {
    if f.rank != Rank::Scalar {
        return Err(Error::shape(
            "localized_norm expects a scalar field; take GridFn::magnitude (α = 0) or apply componentwise",
        ));
    }
    np.validate(&f.grid)?;
    let grid = f.grid;
    let (k0, k1) = window_steps(&grid, np.t0, np.t1)?;
    // Slices entering the sup (inclusive right endpoint) and the integral.
    let sup_end = (k1).min(grid.nt) + 1;
    let dt = grid.dt();
    let hd = grid.h().powi(grid.dim as i32);
    let needs_fft = np.alpha != 0.0;
    let fft = FftBox::new(grid.dim, grid.nx);
    let mult = bessel_multiplier(&grid, np.alpha);
    let zs = z_lattice(&grid, np.radius);

    let per_z: Vec<(Vec<f64>, f64)> = zs
        .par_iter()
        .map(|z| {
            let chi = cutoff(grid, z, np.radius).expect("radius validated");
            let chi_data = chi.slice(0);
            let mut scratch: Vec<Complex64> = Vec::new();
            let mut buf: Vec<f64> = Vec::new();
            let mut product = vec![0.0f64; grid.cells()];
            let mut slice_norm = |k: usize| -> f64 {
                let data = f.slice(f.slice_for_step(k));
                for ((dst, chi_v), f_v) in product.iter_mut().zip(chi_data.iter()).zip(data.iter()) {
                    *dst = chi_v * f_v;
                }
                if needs_fft {
                    apply_multiplier_slice(&fft, &mult, &product, &mut scratch, &mut buf);
                    lp_of(&buf, np.p, hd)
                } else {
                    lp_of(&product, np.p, hd)
                }
            };
            let value = if !f.time_dependent {
                // One spatial norm serves every slice in the window.
                let v = slice_norm(0);
                match np.q {
                    TimeExponent::Finite(q) => {
                        let measure = (k1 - k0) as f64 * dt;
                        v * measure.powf(1.0 / q)
                    }
                    TimeExponent::Sup => v,
                }
            } else {
                match np.q {
                    TimeExponent::Finite(q) => {
                        let mut acc = 0.0;
                        for k in k0..k1 {
                            acc += slice_norm(k).powf(q) * dt;
                        }
                        acc.powf(1.0 / q)
                    }
                    TimeExponent::Sup => {
                        let mut best = 0.0f64;
                        for k in k0..sup_end {
                            best = best.max(slice_norm(k));
                        }
                        best
                    }
                }
            };
            (z.clone(), value)
        })
        .collect();

    let mut best = f64::NEG_INFINITY;
    let mut argmax = per_z[0].0.clone();
    for (z, v) in &per_z {
        if *v > best {
            best = *v;
            argmax = z.clone();
        }
    }
    Ok(NormReport { value: best, argmax_z: argmax, params: *np, per_z })
}

/// Uniform mollifier modulus: `κ(ε) = sup_t ||| f(t)∗ρ_ε − f(t) |||_p` for a
/// descending list of widths.
pub fn mollifier_modulus(
    f: &GridFn,
    p: f64,
    radius: f64,
    shape: MollifierShape,
    eps_list: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if eps_list.is_empty() {
        return Err(Error::invalid("eps_list must be nonempty"));
    }
    for w in eps_list.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::invalid("eps_list must be strictly descending"));
        }
    }
    if !(eps_list[eps_list.len() - 1] > 0.0) {
        return Err(Error::invalid("eps_list entries must be positive"));
    }
    let np = NormParams::over_horizon(0.0, p, TimeExponent::Sup, radius, &f.grid);
    let mut table = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let moll = Mollifier::new(shape, eps)?;
        let mut diff = mollify(f, &moll)?;
        diff.add_scaled(f, -1.0)?;
        // sup over t commutes with the sup over z, so the q = ∞ localized
        // norm of the difference is exactly κ(ε).
        let report = localized_norm(&diff, &np)?;
        table.push((eps, report.value));
    }
    Ok(table)
}

/// Ratio statistics over a test family.
#[derive(Clone, Debug, Serialize)]
pub struct RatioStats {
    pub ratios: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl RatioStats {
    fn from(ratios: Vec<f64>) -> RatioStats {
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        RatioStats { ratios, min, max }
    }
}

/// Radius-independence check: localized norms at radii `r` and `r'` for each
/// family member; their ratios land in a fixed interval `[1/C, C]`.
pub fn norm_equivalence_check(
    family: &[GridFn],
    r1: f64,
    r2: f64,
    np: &NormParams,
) -> Result<RatioStats> {
    if family.is_empty() {
        return Err(Error::invalid("empty test family"));
    }
    if r1 == r2 {
        return Err(Error::invalid("radii must differ"));
    }
    let mut ratios = Vec::with_capacity(family.len());
    for f in family {
        let mut np1 = *np;
        np1.radius = r1;
        let mut np2 = *np;
        np2.radius = r2;
        let n1 = localized_norm(f, &np1)?.value;
        let n2 = localized_norm(f, &np2)?.value;
        if n2 == 0.0 {
            return Err(Error::invalid("zero norm in equivalence family"));
        }
        ratios.push(n1 / n2);
    }
    Ok(RatioStats::from(ratios))
}

/// Admissible upper integrability for the Sobolev embedding from `H^{α,p}`
/// in dimension `d`: `p d/(d − pα)` when `pα < d`, unbounded otherwise.
pub fn embedding_upper(alpha: f64, p: f64, dim: usize) -> Option<f64> {
    let d = dim as f64;
    if p * alpha < d {
        Some(p * d / (d - p * alpha))
    } else {
        None
    }
}

/// Embedding check: ratios `|||f|||_{L̃^{p'}_q} / |||f|||_{H̃^{α,p}_q}` over a
/// family, with the exponent window enforced.
pub fn sobolev_embedding_check(
    family: &[GridFn],
    np: &NormParams,
    p_prime: f64,
) -> Result<RatioStats> {
    if family.is_empty() {
        return Err(Error::invalid("empty test family"));
    }
    if p_prime < np.p - 1e-12 {
        return Err(Error::invalid(format!(
            "p' = {p_prime} below p = {}; admissible window starts at p",
            np.p
        )));
    }
    if let Some(upper) = embedding_upper(np.alpha, np.p, family[0].grid.dim) {
        if p_prime > upper + 1e-9 {
            return Err(Error::invalid(format!(
                "p' = {p_prime} outside the admissible window [{}, {:.6}] for alpha = {}, p = {}, d = {}",
                np.p,
                upper,
                np.alpha,
                np.p,
                family[0].grid.dim
            )));
        }
    }
    let mut ratios = Vec::with_capacity(family.len());
    for f in family {
        let lower = localized_norm(f, np)?.value;
        let mut np_target = *np;
        np_target.alpha = 0.0;
        np_target.p = p_prime;
        let upper_norm = localized_norm(f, &np_target)?.value;
        if lower == 0.0 {
            return Err(Error::invalid("zero norm in embedding family"));
        }
        ratios.push(upper_norm / lower);
    }
    Ok(RatioStats::from(ratios))
}
