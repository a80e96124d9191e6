//! Uniform periodic space-time lattices and fields sampled on them.
//!
//! The spatial domain is the periodic box `[-L, L)^d` with `nx` points per
//! axis (`h = 2L/nx`), the time interval is `[0, T]` with `nt` steps
//! (`dt = T/nt`).  A [`GridFn`] stores a scalar, vector, or matrix field on
//! that lattice, either static (one time slice) or time-dependent (`nt + 1`
//! slices).  All lattice sums use the cell measure `h^d`, all time integrals
//! the left-endpoint rule — the same quadrature conventions every other
//! module builds on.
//!
//! Singular coefficients are handled by keeping their singular point half a
//! cell away from the lattice: callers place singularities at
//! [`Grid::half_cell_offset`] so analytic evaluation never divides by zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform periodic lattice over `[-L, L)^d x [0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Spatial dimension, 1..=3.
    pub dim: usize,
    /// Half-width `L` of the periodic box `[-L, L)`.
    pub half_width: f64,
    /// Lattice points per axis (even, at least 8).
    pub nx: usize,
    /// Time horizon `T`.
    pub t_horizon: f64,
    /// Number of time steps.
    pub nt: usize,
}

impl Grid {
    pub fn new(dim: usize, half_width: f64, nx: usize, t_horizon: f64, nt: usize) -> Result<Grid> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid(format!("dim must be 1..=3, got {dim}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::invalid(format!("half_width must be positive, got {half_width}")));
        }
        if nx < 8 || nx % 2 != 0 {
            return Err(Error::invalid(format!("nx must be even and >= 8, got {nx}")));
        }
        if !(t_horizon > 0.0 && t_horizon.is_finite()) {
            return Err(Error::invalid(format!("t_horizon must be positive, got {t_horizon}")));
        }
        if nt < 1 {
            return Err(Error::invalid("nt must be at least 1"));
        }
        Ok(Grid { dim, half_width, nx, t_horizon, nt })
    }

    /// Spatial mesh width `h = 2L/nx`.
    #[inline]
    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.nx as f64
    }

    /// Time step `dt = T/nt`.
    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_horizon / self.nt as f64
    }

    /// Number of spatial lattice points `nx^d`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    /// Coordinate of lattice index `i` along one axis: `-L + i*h`.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h()
    }

    /// Time of slice `k`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Writes the spatial point of flat cell index `cell` into `out[..dim]`.
    #[inline]
    pub fn point(&self, cell: usize, out: &mut [f64; 3]) {
        let mut rem = cell;
        for axis in (0..self.dim).rev() {
            out[axis] = self.coord(rem % self.nx);
            rem /= self.nx;
        }
    }

    /// Decomposes a flat cell index into per-axis indices.
    #[inline]
    pub fn multi_index(&self, cell: usize, out: &mut [usize; 3]) {
        let mut rem = cell;
        for axis in (0..self.dim).rev() {
            out[axis] = rem % self.nx;
            rem /= self.nx;
        }
    }

    /// Flat cell index of per-axis indices (each already in `0..nx`).
    #[inline]
    pub fn flat_index(&self, multi: &[usize; 3]) -> usize {
        let mut flat = 0;
        for axis in 0..self.dim {
            flat = flat * self.nx + multi[axis];
        }
        flat
    }

    /// Flat index of the cell shifted by `offset` (periodic wrap) from `multi`.
    #[inline]
    pub fn shifted_index(&self, multi: &[usize; 3], offset: &[i64; 3]) -> usize {
        let nx = self.nx as i64;
        let mut flat = 0;
        for axis in 0..self.dim {
            let idx = (multi[axis] as i64 + offset[axis]).rem_euclid(nx);
            flat = flat * self.nx + idx as usize;
        }
        flat
    }

    /// Wraps a coordinate into `[-L, L)`.
    #[inline]
    pub fn wrap(&self, x: f64) -> f64 {
        let span = 2.0 * self.half_width;
        let mut y = (x + self.half_width).rem_euclid(span) - self.half_width;
        // rem_euclid can return exactly span for tiny negative inputs.
        if y >= self.half_width {
            y -= span;
        }
        y
    }

    /// Minimum-image difference, wrapped into `[-L, L)`.
    #[inline]
    pub fn min_image(&self, dx: f64) -> f64 {
        self.wrap(dx)
    }

    /// Periodic distance between points `x` and `y` (first `dim` entries used).
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for axis in 0..self.dim {
            let d = self.min_image(x[axis] - y[axis]);
            s += d * d;
        }
        s.sqrt()
    }

    /// The half-cell shift `(h/2, ..., h/2)` used to keep singular points
    /// off the lattice.
    pub fn half_cell_offset(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for v in out.iter_mut().take(self.dim) {
            *v = 0.5 * self.h();
        }
        out
    }
}

/// Tensor rank of a lattice field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rank {
    Scalar,
    Vector,
    Matrix,
}

impl Rank {
    /// Number of stored components per lattice point in dimension `d`.
    pub fn components(self, dim: usize) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector => dim,
            Rank::Matrix => dim * dim,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Rank::Scalar => "scalar",
            Rank::Vector => "vector",
            Rank::Matrix => "matrix",
        }
    }

    pub fn from_token(tok: &str) -> Result<Rank> {
        match tok {
            "scalar" => Ok(Rank::Scalar),
            "vector" => Ok(Rank::Vector),
            "matrix" => Ok(Rank::Matrix),
            other => Err(Error::SnapshotFormat(format!("unknown rank token {other:?}"))),
        }
    }
}

/// A field sampled on a [`Grid`].
///
/// Storage is row-major `(time slice, cell, component)`.  Static fields keep
/// a single time slice; time-dependent fields keep `nt + 1` slices (one per
/// grid time `t_k`).  Matrix components are stored row-major: entry `(i, j)`
/// lives at component `i*d + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFn {
    pub grid: Grid,
    pub rank: Rank,
    pub time_dependent: bool,
    pub values: Vec<f64>,
}

impl GridFn {
    /// Zero-initialized field.
    pub fn zeros(grid: Grid, rank: Rank, time_dependent: bool) -> GridFn {
        let slices = if time_dependent { grid.nt + 1 } else { 1 };
        let len = slices * grid.cells() * rank.components(grid.dim);
        GridFn { grid, rank, time_dependent, values: vec![0.0; len] }
    }

    /// Number of stored time slices (1 or `nt + 1`).
    #[inline]
    pub fn slices(&self) -> usize {
        if self.time_dependent {
            self.grid.nt + 1
        } else {
            1
        }
    }

    /// Components per lattice point.
    #[inline]
    pub fn components(&self) -> usize {
        self.rank.components(self.grid.dim)
    }

    /// Flat offset of `(slice, cell, component)`.
    #[inline]
    pub fn offset(&self, slice: usize, cell: usize, comp: usize) -> usize {
        (slice * self.grid.cells() + cell) * self.components() + comp
    }

    /// Immutable view of one time slice (`cells * components` values).
    pub fn slice(&self, k: usize) -> &[f64] {
        let stride = self.grid.cells() * self.components();
        &self.values[k * stride..(k + 1) * stride]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let stride = self.grid.cells() * self.components();
        &mut self.values[k * stride..(k + 1) * stride]
    }

    /// Slice index supplying data for time-step `k` (static fields reuse 0).
    #[inline]
    pub fn slice_for_step(&self, k: usize) -> usize {
        if self.time_dependent {
            k.min(self.grid.nt)
        } else {
            0
        }
    }

    /// Checks that two fields live on the same lattice.
    pub fn check_same_grid(&self, other: &GridFn) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::shape("fields live on different grids"));
        }
        Ok(())
    }

    /// Errors (with location) if any entry is non-finite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        let comps = self.components();
        let cells = self.grid.cells();
        for (pos, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                let cell = (pos / comps) % cells;
                let slice = pos / (comps * cells);
                let mut multi = [0usize; 3];
                self.grid.multi_index(cell, &mut multi);
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    slice,
                    index: multi[..self.grid.dim].to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Pointwise Euclidean (Frobenius) magnitude, a scalar field.
    pub fn magnitude(&self) -> GridFn {
        let comps = self.components();
        let mut out = GridFn::zeros(self.grid, Rank::Scalar, self.time_dependent);
        for (i, slot) in out.values.iter_mut().enumerate() {
            let base = i * comps;
            let mut s = 0.0;
            for c in 0..comps {
                let v = self.values[base + c];
                s += v * v;
            }
            *slot = s.sqrt();
        }
        out
    }

    /// Maximum pointwise Euclidean magnitude over all slices.
    pub fn max_magnitude(&self) -> f64 {
        let comps = self.components();
        let mut best = 0.0f64;
        for i in 0..self.values.len() / comps {
            let mut s = 0.0;
            for c in 0..comps {
                let v = self.values[i * comps + c];
                s += v * v;
            }
            best = best.max(s.sqrt());
        }
        best
    }

    /// Discrete mean of a scalar slice (plain average over cells).
    pub fn slice_mean(&self, k: usize) -> f64 {
        let data = self.slice(k);
        data.iter().sum::<f64>() / data.len() as f64
    }

    /// Lattice `L^p` norm of a scalar slice: `(sum |f|^p h^d)^(1/p)`.
    pub fn slice_lp_norm(&self, k: usize, p: f64) -> f64 {
        debug_assert_eq!(self.rank, Rank::Scalar);
        let hd = self.grid.h().powi(self.grid.dim as i32);
        let sum: f64 = self.slice(k).iter().map(|v| v.abs().powf(p)).sum();
        (sum * hd).powf(1.0 / p)
    }

    /// In-place `self += scale * other` (same grid, rank, slicing).
    pub fn add_scaled(&mut self, other: &GridFn, scale: f64) -> Result<()> {
        self.check_same_grid(other)?;
        if self.rank != other.rank || self.time_dependent != other.time_dependent {
            return Err(Error::shape("rank/time layout mismatch in add_scaled"));
        }
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Multilinear periodic interpolation at `(t, x)`, written into `out`.
    ///
    /// Spatial coordinates wrap periodically; time interpolates linearly
    /// between slices and clamps to `[0, T]`.  Static fields ignore `t`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.components());
        if self.time_dependent {
            let dt = self.grid.dt();
            let pos = (t / dt).clamp(0.0, self.grid.nt as f64);
            let k0 = (pos.floor() as usize).min(self.grid.nt);
            if k0 >= self.grid.nt {
                self.eval_slice(self.grid.nt, x, out);
            } else {
                let w = pos - k0 as f64;
                let comps = self.components();
                let mut lo = [0.0f64; 9];
                let mut hi = [0.0f64; 9];
                self.eval_slice(k0, x, &mut lo[..comps]);
                self.eval_slice(k0 + 1, x, &mut hi[..comps]);
                for c in 0..comps {
                    // lo + w*(hi - lo) reproduces equal endpoints exactly.
                    out[c] = lo[c] + w * (hi[c] - lo[c]);
                }
            }
        } else {
            self.eval_slice(0, x, out);
        }
    }

    /// Multilinear periodic interpolation within one time slice.
    ///
    /// Corner values are blended axis by axis as lo + w·(hi − lo), which
    /// reproduces constant fields exactly.
    pub fn eval_slice(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let comps = self.components();
        let data = self.slice(k);
        let h = g.h();
        let nx = g.nx;
        let mut base = [0usize; 3];
        let mut w = [0.0f64; 3];
        for axis in 0..g.dim {
            let u = (x[axis] + g.half_width) / h;
            let fl = u.floor();
            base[axis] = (fl as i64).rem_euclid(nx as i64) as usize;
            w[axis] = u - fl;
        }
        let corners = 1usize << g.dim;
        let mut buf = [0.0f64; 8 * 9];
        let mut multi = [0usize; 3];
        for corner in 0..corners {
            for axis in 0..g.dim {
                multi[axis] = if corner >> axis & 1 == 1 {
                    (base[axis] + 1) % nx
                } else {
                    base[axis]
                };
            }
            let off = g.flat_index(&multi) * comps;
            buf[corner * comps..(corner + 1) * comps].copy_from_slice(&data[off..off + comps]);
        }
        let mut active = corners;
        for axis in 0..g.dim {
            let wa = w[axis];
            active /= 2;
            for pair in 0..active {
                for c in 0..comps {
                    let lo = buf[2 * pair * comps + c];
                    let hi = buf[(2 * pair + 1) * comps + c];
                    buf[pair * comps + c] = lo + wa * (hi - lo);
                }
            }
        }
        out[..comps].copy_from_slice(&buf[..comps]);
    }
}

/// Samples an analytic field onto the lattice.
///
/// `f(t, x, out)` receives a grid time, a spatial lattice point (already
/// inside `[-L, L)^d`), and the component buffer to fill.  Errors with the
/// lattice index if any sampled value is non-finite.
pub fn sample(
    grid: Grid,
    rank: Rank,
    time_dependent: bool,
    f: impl Fn(f64, &[f64], &mut [f64]),
) -> Result<GridFn> {
    let mut out = GridFn::zeros(grid, rank, time_dependent);
    let comps = rank.components(grid.dim);
    let cells = grid.cells();
    let mut x = [0.0f64; 3];
    for k in 0..out.slices() {
        let t = grid.time(k);
        let data = out.slice_mut(k);
        for cell in 0..cells {
            grid.point(cell, &mut x);
            f(t, &x[..grid.dim], &mut data[cell * comps..(cell + 1) * comps]);
        }
    }
    out.check_finite("sample")?;
    Ok(out)
}

/// Samples a static scalar function `f(x)`.
pub fn sample_scalar(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<GridFn> {
    sample(grid, Rank::Scalar, false, |_, x, out| out[0] = f(x))
}

/// Smooth step used by [`cutoff`]: 1 on `t <= 1`, 0 on `t >= 2`, glued by
/// `exp(-1/s)` bump factors in between (infinitely differentiable).
pub fn cutoff_profile(t: f64) -> f64 {
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        let g = |s: f64| (-1.0 / s).exp();
        let a = g(2.0 - t);
        let b = g(t - 1.0);
        a / (a + b)
    }
}

/// Smooth cutoff `chi_r^z`: identically 1 on the periodic ball of radius `r`
/// about `z`, identically 0 outside radius `2r`.
///
/// Requires `r < L/2` so the support fits inside the periodic box.
pub fn cutoff(grid: Grid, center: &[f64], radius: f64) -> Result<GridFn> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("cutoff radius must be positive, got {radius}")));
    }
    if radius >= grid.half_width / 2.0 {
        return Err(Error::invalid(format!(
            "cutoff radius {radius} must be below L/2 = {} so the support fits the box",
            grid.half_width / 2.0
        )));
    }
    if center.len() < grid.dim {
        return Err(Error::invalid("cutoff center has fewer entries than dim"));
    }
    sample_scalar(grid, |x| cutoff_profile(grid.distance(x, center) / radius))
}

/// Mollifier kernel shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MollifierShape {
    /// Gaussian of standard deviation `eps`, truncated at radius `4*eps`.
    GaussianTruncated,
    /// Polynomial bump `(1 - (|x|/2eps)^2)^3` supported on radius `2*eps`.
    PolynomialBump,
}

impl MollifierShape {
    pub fn token(self) -> &'static str {
        match self {
            MollifierShape::GaussianTruncated => "gaussian-truncated",
            MollifierShape::PolynomialBump => "polynomial-bump",
        }
    }

    pub fn from_token(tok: &str) -> Result<Self> {
        match tok {
            "gaussian-truncated" => Ok(MollifierShape::GaussianTruncated),
            "polynomial-bump" => Ok(MollifierShape::PolynomialBump),
            other => Err(Error::invalid(format!("unknown mollifier shape {other:?}"))),
        }
    }
}

/// Nonnegative approximate identity of width `eps`.
#[derive(Clone, Copy, Debug)]
pub struct Mollifier {
    pub shape: MollifierShape,
    pub width: f64,
}

impl Mollifier {
    pub fn new(shape: MollifierShape, width: f64) -> Result<Mollifier> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::invalid(format!("mollifier width must be positive, got {width}")));
        }
        Ok(Mollifier { shape, width })
    }

    /// Radius beyond which the kernel is exactly zero (at most `4*eps`).
    pub fn support_radius(&self) -> f64 {
        match self.shape {
            MollifierShape::GaussianTruncated => 4.0 * self.width,
            MollifierShape::PolynomialBump => 2.0 * self.width,
        }
    }

    /// Unnormalized kernel profile as a function of radius.
    pub fn profile(&self, r: f64) -> f64 {
        let eps = self.width;
        match self.shape {
            MollifierShape::GaussianTruncated => {
                if r <= 4.0 * eps {
                    (-0.5 * (r / eps) * (r / eps)).exp()
                } else {
                    0.0
                }
            }
            MollifierShape::PolynomialBump => {
                let u = r / (2.0 * eps);
                if u < 1.0 {
                    let s = 1.0 - u * u;
                    s * s * s
                } else {
                    0.0
                }
            }
        }
    }

    /// Discrete kernel on the lattice: offsets and weights with the weights
    /// normalized to sum to exactly 1 (so `sum w * h^d = h^d * 1` and the
    /// convolution preserves discrete means exactly).
    pub fn lattice_kernel(&self, grid: &Grid) -> Result<Vec<([i64; 3], f64)>> {
        let h = grid.h();
        let radius = self.support_radius();
        if radius >= grid.half_width {
            return Err(Error::invalid(format!(
                "mollifier support radius {radius:.3} must stay below L = {} to avoid self-overlap",
                grid.half_width
            )));
        }
        if self.width < h {
            eprintln!(
                "warning: mollifier width {:.4} is below the mesh width {:.4}; \
                 the discrete kernel degenerates toward a point mass",
                self.width, h
            );
        }
        let reach = (radius / h).floor() as i64;
        let mut kernel = Vec::new();
        let mut offset = [0i64; 3];
        let per_axis = 2 * reach + 1;
        let total = per_axis.pow(grid.dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            for slot in offset.iter_mut().take(grid.dim) {
                *slot = rem % per_axis - reach;
                rem /= per_axis;
            }
            let r2: f64 = offset[..grid.dim].iter().map(|o| (*o as f64 * h).powi(2)).sum();
            let w = self.profile(r2.sqrt());
            if w > 0.0 {
                kernel.push((offset, w));
            }
        }
        let mass: f64 = kernel.iter().map(|(_, w)| *w).sum();
        if mass <= 0.0 {
            return Err(Error::invalid("mollifier kernel has zero discrete mass"));
        }
        for (_, w) in kernel.iter_mut() {
            *w /= mass;
        }
        Ok(kernel)
    }
}

/// Discrete periodic convolution `f * rho` applied slice by slice.
///
/// The kernel weights are nonnegative and sum to 1, so the convolution
/// preserves discrete means exactly and contracts every lattice `L^p` norm.
pub fn mollify(f: &GridFn, moll: &Mollifier) -> Result<GridFn> {
    use rayon::prelude::*;

    let grid = f.grid;
    let kernel = moll.lattice_kernel(&grid)?;
    let comps = f.components();
    let mut out = GridFn::zeros(grid, f.rank, f.time_dependent);
    for k in 0..f.slices() {
        let src = f.slice(k);
        let dst = out.slice_mut(k);
        dst.par_chunks_mut(comps).enumerate().for_each(|(cell, chunk)| {
            let mut multi = [0usize; 3];
            grid.multi_index(cell, &mut multi);
            for c in chunk.iter_mut() {
                *c = 0.0;
            }
            for (offset, w) in &kernel {
                // Convolution evaluates f at x - y for kernel offset y.
                let neg = [-offset[0], -offset[1], -offset[2]];
                let source = grid.shifted_index(&multi, &neg);
                for (c, slot) in chunk.iter_mut().enumerate() {
                    *slot += w * src[source * comps + c];
                }
            }
        });
    }
    out.check_finite("mollify")?;
    Ok(out)
}

/// Local Hardy–Littlewood maximal function over lattice balls of radius up
/// to `R`.
///
/// At each lattice point the supremum runs over the degenerate ball (the
/// point itself, giving the pointwise-domination property `M_R |f| >= |f|`)
/// and the lattice balls of radius `r_k = k*h`, `k = 1..floor(R/h)` — every
/// radius at which the set of lattice points in the ball changes.  Input is
/// taken in absolute value.  Requires `h <= R < L`.
pub fn local_maximal(f: &GridFn, radius: f64) -> Result<GridFn> {
    use rayon::prelude::*;

    if f.rank != Rank::Scalar {
        return Err(Error::shape("local_maximal expects a scalar field"));
    }
    let grid = f.grid;
    let h = grid.h();
    if radius < h {
        return Err(Error::invalid(format!(
            "maximal radius {radius:.4} is below the mesh width {h:.4}; no lattice ball contains a neighbor"
        )));
    }
    if radius >= grid.half_width {
        return Err(Error::invalid(format!(
            "maximal radius {radius} must stay below L = {}",
            grid.half_width
        )));
    }

    // All offsets with |o|*h <= R, sorted by distance, plus the tier sizes at
    // every ladder radius r_k = k*h.
    let reach = (radius / h).floor() as i64;
    let mut offsets: Vec<([i64; 3], f64)> = Vec::new();
    let per_axis = 2 * reach + 1;
    let total = per_axis.pow(grid.dim as u32);
    let mut offset = [0i64; 3];
    for flat in 0..total {
        let mut rem = flat;
        for slot in offset.iter_mut().take(grid.dim) {
            *slot = rem % per_axis - reach;
            rem /= per_axis;
        }
        let dist = offset[..grid.dim]
            .iter()
            .map(|o| (*o as f64 * h).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist <= radius {
            offsets.push((offset, dist));
        }
    }
    offsets.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    // Prefix lengths: index of the first offset beyond r_k for each ladder
    // radius, starting with the singleton ball (the zero offset alone).
    let mut tier_ends = vec![1usize];
    for k in 1..=reach {
        let rk = k as f64 * h + 1e-12 * h;
        let end = offsets.partition_point(|(_, d)| *d <= rk);
        if end > *tier_ends.last().unwrap() {
            tier_ends.push(end);
        }
    }

    let mut out = GridFn::zeros(grid, Rank::Scalar, f.time_dependent);
    for k in 0..f.slices() {
        let src = f.slice(k);
        let dst = out.slice_mut(k);
        dst.par_iter_mut().enumerate().for_each(|(cell, slot)| {
            let mut multi = [0usize; 3];
            grid.multi_index(cell, &mut multi);
            let mut running = 0.0f64;
            let mut count = 0usize;
            let mut best = f64::NEG_INFINITY;
            let mut next_tier = 0usize;
            for (i, (off, _)) in offsets.iter().enumerate() {
                running += src[grid.shifted_index(&multi, off)].abs();
                count += 1;
                if next_tier < tier_ends.len() && i + 1 == tier_ends[next_tier] {
                    best = best.max(running / count as f64);
                    next_tier += 1;
                }
            }
            *slot = best;
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn desk_grid() -> Grid {
        Grid::new(2, PI, 64, 1.0, 128).unwrap()
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(Grid::new(0, PI, 64, 1.0, 128).is_err());
        assert!(Grid::new(4, PI, 64, 1.0, 128).is_err());
        assert!(Grid::new(2, PI, 63, 1.0, 128).is_err());
        assert!(Grid::new(2, PI, 6, 1.0, 128).is_err());
        assert!(Grid::new(2, -1.0, 64, 1.0, 128).is_err());
        assert!(Grid::new(2, PI, 64, 0.0, 128).is_err());
        assert!(Grid::new(2, PI, 64, 1.0, 0).is_err());
    }

    #[test]
    fn sampling_matches_sin_at_lattice_points() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| x[0].sin()).unwrap();
        let mut x = [0.0; 3];
        for cell in (0..g.cells()).step_by(17) {
            g.point(cell, &mut x);
            let v = f.slice(0)[cell];
            assert_relative_eq!(v, x[0].sin(), max_relative = 1e-14, epsilon = 1e-14);
        }
    }

    #[test]
    fn sampling_rejects_non_finite_values() {
        let g = desk_grid();
        // 1/x0 is infinite at the lattice line x0 = 0.
        let err = sample_scalar(g, |x| 1.0 / x[0]).unwrap_err();
        match err {
            Error::NonFinite { context, .. } => assert_eq!(context, "sample"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn wrap_and_min_image_stay_in_box() {
        let g = desk_grid();
        assert_relative_eq!(g.wrap(PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_relative_eq!(g.wrap(-PI - 0.1), PI - 0.1, epsilon = 1e-12);
        assert_relative_eq!(g.min_image(2.0 * PI), 0.0, epsilon = 1e-12);
        // Periodic distance of nearly-identified points is small.
        let d = g.distance(&[PI - 1e-3, 0.0], &[-PI + 1e-3, 0.0]);
        assert!(d < 3e-3, "periodic distance {d}");
    }

    #[test]
    fn eval_interpolates_linear_functions_exactly_inside_cells() {
        let g = desk_grid();
        // Use a function linear in each coordinate away from the seam.
        let f = sample_scalar(g, |x| 1.5 * x[0] - 0.5 * x[1]).unwrap();
        let mut out = [0.0];
        for &(a, b) in &[(0.13, -0.72), (1.01, 2.0), (-2.5, 0.33)] {
            f.eval(0.0, &[a, b], &mut out);
            assert_relative_eq!(out[0], 1.5 * a - 0.5 * b, epsilon = 1e-10);
        }
    }

    #[test]
    fn cutoff_is_one_inside_and_zero_outside() {
        let g = desk_grid();
        let z = [0.3, -0.2];
        let r = 0.7;
        let chi = cutoff(g, &z, r).unwrap();
        let mut x = [0.0; 3];
        for cell in 0..g.cells() {
            g.point(cell, &mut x);
            let d = g.distance(&x[..2], &z);
            let v = chi.slice(0)[cell];
            if d <= r {
                assert_eq!(v, 1.0, "chi must be exactly 1 at distance {d}");
            } else if d >= 2.0 * r {
                assert_eq!(v, 0.0, "chi must be exactly 0 at distance {d}");
            } else {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn cutoff_profile_is_smooth_monotone_glue() {
        assert_eq!(cutoff_profile(0.5), 1.0);
        assert_eq!(cutoff_profile(1.0), 1.0);
        assert_eq!(cutoff_profile(2.0), 0.0);
        let mut prev = 1.0;
        for i in 0..=100 {
            let t = 1.0 + i as f64 / 100.0;
            let v = cutoff_profile(t);
            assert!(v <= prev + 1e-15, "profile must be nonincreasing");
            prev = v;
        }
    }

    #[test]
    fn cutoff_rejects_radius_at_half_box() {
        let g = desk_grid();
        assert!(cutoff(g, &[0.0, 0.0], g.half_width / 2.0).is_err());
    }

    #[test]
    fn mollifier_kernel_has_unit_mass_and_compact_support() {
        let g = desk_grid();
        for shape in [MollifierShape::GaussianTruncated, MollifierShape::PolynomialBump] {
            let m = Mollifier::new(shape, 0.3).unwrap();
            let kernel = m.lattice_kernel(&g).unwrap();
            let mass: f64 = kernel.iter().map(|(_, w)| w).sum();
            assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
            let h = g.h();
            for (off, w) in &kernel {
                assert!(*w >= 0.0);
                let r: f64 = off[..2].iter().map(|o| (*o as f64 * h).powi(2)).sum::<f64>().sqrt();
                assert!(r <= m.support_radius() + 1e-12);
            }
        }
    }

    #[test]
    fn mollify_preserves_discrete_mean_exactly() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| (x[0] * 1.3).sin() * (x[1] * 0.7).cos() + 0.25).unwrap();
        let m = Mollifier::new(MollifierShape::PolynomialBump, 0.25).unwrap();
        let fm = mollify(&f, &m).unwrap();
        assert_relative_eq!(fm.slice_mean(0), f.slice_mean(0), epsilon = 1e-13);
    }

    #[test]
    fn mollify_contracts_lp_norms() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| (3.0 * x[0]).sin() + 0.4 * (5.0 * x[1]).cos()).unwrap();
        for shape in [MollifierShape::GaussianTruncated, MollifierShape::PolynomialBump] {
            let m = Mollifier::new(shape, 0.2).unwrap();
            let fm = mollify(&f, &m).unwrap();
            for p in [1.0, 2.0, 5.0] {
                let before = f.slice_lp_norm(0, p);
                let after = fm.slice_lp_norm(0, p);
                assert!(
                    after <= before * (1.0 + 1e-12),
                    "p = {p}: {after} > {before}"
                );
            }
        }
    }

    /// Oracle: attenuation of the single Fourier mode cos(x0) under the
    /// discrete kernel, computed by direct summation of the kernel weights.
    /// Matches the continuum transform of the kernel at frequency 1 up to
    /// quadrature error.
    #[test]
    fn mollify_attenuates_cosine_mode_by_kernel_transform() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| x[0].cos()).unwrap();
        for (shape, eps) in [
            (MollifierShape::GaussianTruncated, 0.35),
            (MollifierShape::PolynomialBump, 0.35),
        ] {
            let m = Mollifier::new(shape, eps).unwrap();
            // Discrete attenuation factor: sum_y w(y) cos(y0) because
            // cos(x - y) averages to cos(x) * cos(y) under the symmetric kernel.
            let h = g.h();
            let kernel = m.lattice_kernel(&g).unwrap();
            let a_disc: f64 = kernel.iter().map(|(o, w)| w * (o[0] as f64 * h).cos()).sum();
            let fm = mollify(&f, &m).unwrap();
            let mut x = [0.0; 3];
            for cell in (0..g.cells()).step_by(23) {
                g.point(cell, &mut x);
                assert_relative_eq!(fm.slice(0)[cell], a_disc * x[0].cos(), epsilon = 1e-10);
            }
            // Continuum oracle by dense 2-d quadrature of the normalized kernel.
            let n = 400usize;
            let r = m.support_radius();
            let step = 2.0 * r / n as f64;
            let mut mass = 0.0;
            let mut transform = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let y0 = -r + (i as f64 + 0.5) * step;
                    let y1 = -r + (j as f64 + 0.5) * step;
                    let w = m.profile((y0 * y0 + y1 * y1).sqrt());
                    mass += w;
                    transform += w * y0.cos();
                }
            }
            let a_cont = transform / mass;
            assert!(
                (a_disc - a_cont).abs() < 5e-3,
                "{}: discrete attenuation {a_disc} vs continuum {a_cont}",
                shape.token()
            );
            assert!(a_disc < 1.0 && a_disc > 0.5, "attenuation {a_disc} out of range");
        }
    }

    #[test]
    fn maximal_function_dominates_identity() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| (2.0 * x[0]).sin() * (x[1]).cos()).unwrap();
        let m = local_maximal(&f, 0.5).unwrap();
        for (mv, fv) in m.slice(0).iter().zip(f.slice(0).iter()) {
            assert!(*mv >= fv.abs() - 1e-14);
        }
    }

    #[test]
    fn maximal_of_indicator_is_one_at_center() {
        let g = desk_grid();
        let f = sample_scalar(g, |x| if (x[0] * x[0] + x[1] * x[1]).sqrt() < 1.0 { 1.0 } else { 0.0 })
            .unwrap();
        let m = local_maximal(&f, 1.0).unwrap();
        // x = 0 is the lattice point with index nx/2 along each axis.
        let center = g.flat_index(&[g.nx / 2, g.nx / 2, 0]);
        assert_eq!(m.slice(0)[center], 1.0);
    }

    /// Oracle: the average of |y| over the ball B_r is r * d/(d+1); verified
    /// here by dense quadrature before pinning the lattice tolerance.
    #[test]
    fn maximal_of_radial_function_matches_ball_average() {
        let d = 2.0;
        let r_max = 0.5;
        // Dense quadrature oracle over the largest lattice ball radius.
        let g = desk_grid();
        let h = g.h();
        let k_max = (r_max / h).floor();
        let r_ladder = k_max * h;
        let n = 600usize;
        let step = 2.0 * r_ladder / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let y0 = -r_ladder + (i as f64 + 0.5) * step;
                let y1 = -r_ladder + (j as f64 + 0.5) * step;
                let rr = (y0 * y0 + y1 * y1).sqrt();
                if rr <= r_ladder {
                    num += rr;
                    den += 1.0;
                }
            }
        }
        let oracle = num / den;
        assert_relative_eq!(oracle, r_ladder * d / (d + 1.0), max_relative = 2e-3);

        let f = sample_scalar(g, |x| (x[0] * x[0] + x[1] * x[1]).sqrt()).unwrap();
        let m = local_maximal(&f, r_max).unwrap();
        let center = g.flat_index(&[g.nx / 2, g.nx / 2, 0]);
        let got = m.slice(0)[center];
        // Lattice ball average differs from the continuum by O(h).
        assert!(
            (got - oracle).abs() < 0.02,
            "lattice maximal {got} vs quadrature oracle {oracle}"
        );
    }

    #[test]
    fn maximal_rejects_radius_below_mesh() {
        let g = desk_grid();
        let f = sample_scalar(g, |_| 1.0).unwrap();
        assert!(local_maximal(&f, 0.5 * g.h()).is_err());
    }

    #[test]
    fn half_cell_shift_keeps_singular_drift_finite() {
        let g = desk_grid();
        let zeta = g.half_cell_offset();
        // |x - zeta|^(-0.3) style profile: finite at every lattice point when
        // the singularity sits half a cell off the lattice.
        let f = sample_scalar(g, |x| {
            let d = g.distance(x, &zeta[..2]);
            d.powf(-0.3) * cutoff_profile(d)
        })
        .unwrap();
        f.check_finite("shifted singular sample").unwrap();
        let max = f.max_magnitude();
        let h = g.h();
        let nearest = (0.5 * h) * (2.0f64).sqrt() * 0.999;
        assert!(max <= nearest.powf(-0.3) * 1.01, "max {max} exceeds the half-cell bound");
    }
}
