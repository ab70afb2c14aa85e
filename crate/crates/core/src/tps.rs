//! Thin-plate-spline coordinate transforms.
//!
//! A [`TpsWarp`] maps output-pixel coordinates to source sampling
//! coordinates (backward warping), so warping an image is a single gather
//! with [`crate::imaging::bilinear_sample`].
//!
//! Fitting happens in a normalized frame (lattice centered on the image,
//! divided by half the larger extent) to keep the linear system well
//! conditioned. With the side conditions on the kernel weights the
//! interpolant is invariant to this similarity, so the warp itself is the
//! same as one fitted in pixel units.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{make_identity_grid, CoordGrid, FlowField};
use crate::par;

/// Control-point perturbation law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlNoise {
    /// `N(0, sigma^2)` per coordinate.
    #[default]
    Gaussian,
    /// Uniform on `[-sigma*sqrt(3), sigma*sqrt(3)]`, i.e. the same standard
    /// deviation as the Gaussian setting.
    Uniform,
}

/// Regular `L x L` lattice spanning the image and its displaced copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub grid_size: usize,
    pub source_points: Vec<[f64; 2]>,
    pub target_points: Vec<[f64; 2]>,
}

impl ControlGrid {
    /// Lattice over `[0, W-1] x [0, H-1]` with targets equal to sources.
    pub fn regular(height: usize, width: usize, grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "control grid needs at least 2 points per side, got {grid_size}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimension("control grid over an empty image".into()));
        }
        let step = |extent: usize, j: usize| (extent - 1) as f64 * j as f64 / (grid_size - 1) as f64;
        let source_points: Vec<[f64; 2]> = (0..grid_size)
            .flat_map(|i| (0..grid_size).map(move |j| (i, j)))
            .map(|(i, j)| [step(width, j), step(height, i)])
            .collect();
        Ok(Self {
            grid_size,
            target_points: source_points.clone(),
            source_points,
        })
    }

    /// Displacement `target - source` of every control point.
    pub fn displacements(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.source_points
            .iter()
            .zip(&self.target_points)
            .map(|(s, t)| [t[0] - s[0], t[1] - s[1]])
    }
}

/// Samples a regular lattice and perturbs every target coordinate
/// independently.
pub fn sample_control_grid<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    grid_size: usize,
    noise_sigma: f64,
    noise: ControlNoise,
    rng: &mut R,
) -> Result<ControlGrid> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "control noise sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let mut grid = ControlGrid::regular(height, width, grid_size)?;
    if noise_sigma == 0.0 {
        return Ok(grid);
    }
    match noise {
        ControlNoise::Gaussian => {
            let dist = Normal::new(0.0, noise_sigma)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for t in &mut grid.target_points {
                t[0] += dist.sample(rng);
                t[1] += dist.sample(rng);
            }
        }
        ControlNoise::Uniform => {
            let half = noise_sigma * 3f64.sqrt();
            let dist = Uniform::new_inclusive(-half, half)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for t in &mut grid.target_points {
                t[0] += dist.sample(rng);
                t[1] += dist.sample(rng);
            }
        }
    }
    Ok(grid)
}

/// `U(r) = r^2 log r^2` written in terms of `r^2`, with `U(0) = 0`.
#[inline]
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 < f64::MIN_POSITIVE {
        0.0
    } else {
        r2 * ln_pos(r2)
    }
}

/// Natural log of a positive normal `x`, branch-free so the dense
/// evaluation loops vectorize. Relative error is below 1e-15.
#[inline(always)]
fn ln_pos(x: f64) -> f64 {
    const MANT: u64 = 0x000f_ffff_ffff_ffff;
    let bits = x.to_bits();
    // biased exponent as a float without an int-to-float conversion
    let e = f64::from_bits((bits >> 52) | 0x4330_0000_0000_0000) - (4503599627370496.0 + 1023.0);
    let m = f64::from_bits((bits & MANT) | 0x3ff0_0000_0000_0000);
    // fold the mantissa into [sqrt(1/2), sqrt(2)]
    let big = m > std::f64::consts::SQRT_2;
    let m = if big { m * 0.5 } else { m };
    let e = if big { e + 1.0 } else { e };
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut p = 2.0 / 19.0;
    for k in [17.0, 15.0, 13.0, 11.0, 9.0, 7.0, 5.0, 3.0] {
        p = p * s2 + 2.0 / k;
    }
    let p = p * s2 + 2.0;
    e * std::f64::consts::LN_2 + s * p
}

/// Default kernel-diagonal regularization, relative to the largest kernel
/// entry. Keeps control points within about 1e-5 px of their targets.
pub const DEFAULT_REGULARIZATION: f64 = 1e-9;

/// Fitted thin-plate spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsWarp {
    control: ControlGrid,
    /// Normalization: `q = (p - center) / scale`.
    center: [f64; 2],
    scale: f64,
    /// Control points in the normalized frame.
    nodes: Vec<[f64; 2]>,
    /// Row `d` holds `(a0, a1, a2)` for output dimension `d`:
    /// `out_d = a0 + a1 * qx + a2 * qy + sum_i w_i,d U(|q - node_i|)`.
    affine: [[f64; 3]; 2],
    weights: Vec<[f64; 2]>,
    /// Exact identity; evaluation returns coordinates untouched.
    identity: bool,
}

impl TpsWarp {
    /// The identity transform over a `height x width` image.
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        fit_tps(&ControlGrid::regular(height, width, 2)?, 0.0)
    }

    pub fn control(&self) -> &ControlGrid {
        &self.control
    }

    /// Affine coefficients in the normalized frame, one row per output
    /// dimension.
    pub fn affine_coeffs(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    /// Kernel weights in the normalized frame.
    pub fn kernel_weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    /// Control points in the normalized frame, matching [`Self::kernel_weights`].
    pub fn normalized_nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn normalization(&self) -> ([f64; 2], f64) {
        (self.center, self.scale)
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Evaluates the warp at one pixel coordinate.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        if self.identity {
            return p;
        }
        let qx = (p[0] - self.center[0]) / self.scale;
        let qy = (p[1] - self.center[1]) / self.scale;
        let [ax, ay] = self.affine;
        let mut ox = ax[0] + ax[1] * qx + ax[2] * qy;
        let mut oy = ay[0] + ay[1] * qx + ay[2] * qy;
        for (n, w) in self.nodes.iter().zip(&self.weights) {
            let dx = qx - n[0];
            let dy = qy - n[1];
            let u = tps_kernel(dx * dx + dy * dy);
            ox += w[0] * u;
            oy += w[1] * u;
        }
        [ox, oy]
    }

    /// Evaluates the warp over the `w x h` pixel rectangle with top-left
    /// `(x0, y0)`, after adding `offset` to each pixel coordinate.
    pub fn evaluate_rect(
        &self,
        x0: i64,
        y0: i64,
        w: usize,
        h: usize,
        offset: [f64; 2],
    ) -> Vec<[f64; 2]> {
        self.evaluate_rect_strided(x0, y0, w, h, offset, 1)
    }

    /// Like [`TpsWarp::evaluate_rect`], but the spline is only evaluated on
    /// every `stride`-th pixel in each direction and bilinearly interpolated
    /// in between. `stride = 1` is exact.
    pub fn evaluate_rect_strided(
        &self,
        x0: i64,
        y0: i64,
        w: usize,
        h: usize,
        offset: [f64; 2],
        stride: usize,
    ) -> Vec<[f64; 2]> {
        if w == 0 || h == 0 {
            return Vec::new();
        }
        let xs: Vec<f64> = (0..w).map(|i| (x0 + i as i64) as f64 + offset[0]).collect();
        let ys: Vec<f64> = (0..h).map(|j| (y0 + j as i64) as f64 + offset[1]).collect();
        let stride = stride.max(1);
        if stride == 1 || self.identity {
            return self.evaluate_lattice(&xs, &ys);
        }
        // the lattice sits on multiples of `stride` so overlapping rects agree
        let ax = x0.rem_euclid(stride as i64) as usize;
        let ay = y0.rem_euclid(stride as i64) as usize;
        let (lx0, ly0) = (x0 - ax as i64, y0 - ay as i64);
        let nx = (ax + w - 1).div_ceil(stride) + 1;
        let ny = (ay + h - 1).div_ceil(stride) + 1;
        let lx: Vec<f64> = (0..nx)
            .map(|k| (lx0 + (k * stride) as i64) as f64 + offset[0])
            .collect();
        let ly: Vec<f64> = (0..ny)
            .map(|k| (ly0 + (k * stride) as i64) as f64 + offset[1])
            .collect();
        let nodes = self.evaluate_lattice(&lx, &ly);
        let inv = 1.0 / stride as f64;
        let mut out = vec![[0.0; 2]; w * h];
        // per-column lattice cell and weight, computed once
        let cols: Vec<(usize, usize, f64)> = (0..w)
            .map(|x| {
                let (k, r) = ((x + ax) / stride, (x + ax) % stride);
                (k, if r == 0 { k } else { k + 1 }, r as f64 * inv)
            })
            .collect();
        par::for_each_row_mut(&mut out, w, |y, row| {
            let (ky, ry) = ((y + ay) / stride, (y + ay) % stride);
            let fy = ry as f64 * inv;
            let ky1 = if ry == 0 { ky } else { ky + 1 };
            let top = &nodes[ky * nx..(ky + 1) * nx];
            let bot = &nodes[ky1 * nx..(ky1 + 1) * nx];
            for (o, &(kx, kx1, fx)) in row.iter_mut().zip(&cols) {
                if fx == 0.0 && ry == 0 {
                    *o = top[kx];
                    continue;
                }
                for c in 0..2 {
                    let t = top[kx][c] + fx * (top[kx1][c] - top[kx][c]);
                    let b = bot[kx][c] + fx * (bot[kx1][c] - bot[kx][c]);
                    o[c] = t + fy * (b - t);
                }
            }
        });
        out
    }

    /// Exact evaluation at every `(xs[i], ys[j])`, row-major in `j`.
    pub fn evaluate_lattice(&self, xs: &[f64], ys: &[f64]) -> Vec<[f64; 2]> {
        let w = xs.len();
        let mut out = vec![[0.0; 2]; w * ys.len()];
        if self.identity {
            for (j, &py) in ys.iter().enumerate() {
                for (i, &px) in xs.iter().enumerate() {
                    out[j * w + i] = [px, py];
                }
            }
            return out;
        }
        let qx: Vec<f64> = xs.iter().map(|&x| (x - self.center[0]) / self.scale).collect();
        par::for_each_row_mut(&mut out, w, |row_idx, row| {
            let qy = (ys[row_idx] - self.center[1]) / self.scale;
            let [ax, ay] = self.affine;
            let mut ox: Vec<f64> = qx.iter().map(|&q| ax[0] + ax[1] * q + ax[2] * qy).collect();
            let mut oy: Vec<f64> = qx.iter().map(|&q| ay[0] + ay[1] * q + ay[2] * qy).collect();
            // one control point at a time, over plain slices so the loop vectorizes
            for (n, wgt) in self.nodes.iter().zip(&self.weights) {
                let dy = qy - n[1];
                let dy2 = dy * dy;
                for ((q, a), b) in qx.iter().zip(ox.iter_mut()).zip(oy.iter_mut()) {
                    let dx = q - n[0];
                    let r2 = dx * dx + dy2;
                    let u = r2 * ln_pos(r2.max(f64::MIN_POSITIVE));
                    *a += wgt[0] * u;
                    *b += wgt[1] * u;
                }
            }
            for ((o, a), b) in row.iter_mut().zip(ox).zip(oy) {
                *o = [a, b];
            }
        });
        out
    }
}

/// Solves the thin-plate-spline system mapping `control.source_points` to
/// `control.target_points`. `regularization` is added to the kernel block's
/// diagonal, scaled by the largest kernel entry.
pub fn fit_tps(control: &ControlGrid, regularization: f64) -> Result<TpsWarp> {
    let n = control.source_points.len();
    if n != control.target_points.len() {
        return Err(Error::InvalidParameter(format!(
            "{} source points but {} targets",
            n,
            control.target_points.len()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 control points, got {n}"
        )));
    }
    if !(regularization >= 0.0 && regularization.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "regularization must be finite and >= 0, got {regularization}"
        )));
    }
    let finite = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite();
    if !control.source_points.iter().all(finite) || !control.target_points.iter().all(finite) {
        return Err(Error::DegenerateGeometry("non-finite control point".into()));
    }

    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &control.source_points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let scale = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0).max(0.5);
    let nodes: Vec<[f64; 2]> = control
        .source_points
        .iter()
        .map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale])
        .collect();

    if control.source_points == control.target_points {
        check_distinct(&nodes)?;
        return Ok(TpsWarp {
            control: control.clone(),
            center,
            scale,
            affine: [[center[0], scale, 0.0], [center[1], 0.0, scale]],
            weights: vec![[0.0; 2]; n],
            nodes,
            identity: true,
        });
    }

    let size = n + 3;
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut kmax = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let dx = nodes[i][0] - nodes[j][0];
            let dy = nodes[i][1] - nodes[j][1];
            let u = tps_kernel(dx * dx + dy * dy);
            kmax = kmax.max(u.abs());
            a[(i, j)] = u;
        }
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = nodes[i][0];
        a[(i, n + 2)] = nodes[i][1];
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = nodes[i][0];
        a[(n + 2, i)] = nodes[i][1];
    }
    if regularization > 0.0 {
        let lambda = regularization * kmax.max(1.0);
        for i in 0..n {
            a[(i, i)] += lambda;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(size, 2);
    for (i, t) in control.target_points.iter().enumerate() {
        rhs[(i, 0)] = t[0];
        rhs[(i, 1)] = t[1];
    }

    let lu = a.clone().lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateGeometry("singular thin-plate-spline system".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateGeometry(
            "thin-plate-spline solve produced non-finite coefficients".into(),
        ));
    }
    // Repeated or collinear nodes make the system rank deficient; LU may
    // still return garbage instead of failing, so check the residual.
    let residual = (&a * &sol - &rhs).amax();
    let rhs_scale = rhs.amax().max(1.0);
    if residual > 1e-6 * rhs_scale {
        return Err(Error::DegenerateGeometry(format!(
            "thin-plate-spline system is singular (residual {residual:.3e})"
        )));
    }

    let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsWarp {
        control: control.clone(),
        center,
        scale,
        nodes,
        affine,
        weights,
        identity: false,
    })
}

fn check_distinct(nodes: &[[f64; 2]]) -> Result<()> {
    for (i, a) in nodes.iter().enumerate() {
        if nodes[i + 1..].iter().any(|b| b == a) {
            return Err(Error::DegenerateGeometry("repeated control point".into()));
        }
    }
    Ok(())
}

/// `out(p) = warp(grid(p))`.
pub fn evaluate_warp(warp: &TpsWarp, grid: &CoordGrid) -> CoordGrid {
    let (h, w) = grid.dims();
    let mut out = vec![[0.0; 2]; h * w];
    par::for_each_row_mut(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = warp.apply(grid.get(x, y));
        }
    });
    CoordGrid::from_raw_unchecked(h, w, out)
}

/// Per-pixel `warp(x) - x + shift` over a `height x width` image.
pub fn displacement_field(
    warp: &TpsWarp,
    height: usize,
    width: usize,
    shift: [f64; 2],
) -> Result<FlowField> {
    make_identity_grid(height, width)?;
    let coords = warp.evaluate_rect(0, 0, width, height, [0.0, 0.0]);
    Ok(displacement_from_coords(&coords, 0, 0, width, shift))
}

pub(crate) fn displacement_from_coords(
    coords: &[[f64; 2]],
    x0: i64,
    y0: i64,
    width: usize,
    shift: [f64; 2],
) -> FlowField {
    let height = coords.len() / width;
    let vectors = coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let x = (x0 + (i % width) as i64) as f64;
            let y = (y0 + (i / width) as i64) as f64;
            [(c[0] - x + shift[0]) as f32, (c[1] - y + shift[1]) as f32]
        })
        .collect();
    FlowField::from_raw_unchecked(height, width, vectors)
}
