//! SLIC superpixels: k-means over (CIELAB, x, y) with grid-seeded centers,
//! followed by connectivity enforcement.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::SegmentationMap;
use crate::color::srgb_to_lab;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            compactness: 10.0,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    x: f64,
    y: f64,
    lab: [f64; 3],
}

/// Center buckets on the initial seeding lattice, used to find the
/// candidate centers of a pixel.
struct Buckets {
    cell_w: f64,
    cell_h: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn build(centers: &[Center], cell_w: f64, cell_h: f64, nx: usize, ny: usize) -> Self {
        let mut cells = vec![Vec::new(); nx * ny];
        for (i, c) in centers.iter().enumerate() {
            let (bx, by) = Self::cell_of(c.x, c.y, cell_w, cell_h, nx, ny);
            cells[by * nx + bx].push(i as u32);
        }
        Self {
            cell_w,
            cell_h,
            nx,
            ny,
            cells,
        }
    }

    fn cell_of(x: f64, y: f64, cw: f64, ch: f64, nx: usize, ny: usize) -> (usize, usize) {
        let bx = ((x + 0.5) / cw).floor().clamp(0.0, (nx - 1) as f64) as usize;
        let by = ((y + 0.5) / ch).floor().clamp(0.0, (ny - 1) as f64) as usize;
        (bx, by)
    }

    /// Centers in the `(2r+1)^2` block of cells around pixel `(x, y)`.
    fn around(&self, x: usize, y: usize, r: usize, out: &mut Vec<u32>) {
        out.clear();
        let (bx, by) = Self::cell_of(x as f64, y as f64, self.cell_w, self.cell_h, self.nx, self.ny);
        let (x0, x1) = (bx.saturating_sub(r), (bx + r).min(self.nx - 1));
        let (y0, y1) = (by.saturating_sub(r), (by + r).min(self.ny - 1));
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                out.extend_from_slice(&self.cells[cy * self.nx + cx]);
            }
        }
    }
}

fn lab_features(img: &Image) -> Vec<[f32; 3]> {
    let c = img.channels();
    img.data()
        .chunks_exact(c)
        .map(|px| {
            if c == 3 {
                srgb_to_lab([px[0], px[1], px[2]])
            } else {
                srgb_to_lab([px[0], px[0], px[0]])
            }
        })
        .collect()
}

/// Segments `img` into roughly `n_components` superpixels.
///
/// Centers start on a regular grid with spacing `s = sqrt(HW / n)` and are
/// nudged to the lowest-gradient pixel of their 3x3 neighborhood. Each
/// iteration assigns every pixel to the candidate center minimizing
/// `sqrt(d_lab^2 + (compactness / s)^2 * d_xy^2)`, then recomputes centers.
/// Fragments smaller than `s^2 / 4` are merged into the neighbor they share
/// the longest boundary with, so the final segment count can differ from
/// `n_components`.
pub fn slic_segment(
    img: &Image,
    n_components: usize,
    compactness: f64,
    iterations: usize,
) -> Result<SegmentationMap> {
    let (h, w) = img.dims();
    let n_px = h * w;
    if n_components == 0 || n_components > n_px {
        return Err(Error::InvalidParameter(format!(
            "n_components must be in [1, {n_px}], got {n_components}"
        )));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "compactness must be > 0, got {compactness}"
        )));
    }
    if iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }

    let lab = lab_features(img);
    let step = (n_px as f64 / n_components as f64).sqrt();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let cell_w = w as f64 / nx as f64;
    let cell_h = h as f64 / ny as f64;

    let mut centers = seed_centers(&lab, w, h, nx, ny, cell_w, cell_h);
    let spatial = (compactness / step).powi(2);
    let mut labels = vec![0u32; n_px];

    for _ in 0..iterations {
        let buckets = Buckets::build(&centers, cell_w, cell_h, nx, ny);
        assign(&lab, w, &centers, &buckets, spatial, &mut labels);
        update_centers(&lab, w, &labels, &mut centers);
    }

    let min_size = ((step * step) / 4.0).floor().max(1.0) as usize;
    let labels = enforce_connectivity(&labels, w, h, min_size);
    SegmentationMap::from_raw_labels(h, w, &labels)
}

fn seed_centers(
    lab: &[[f32; 3]],
    w: usize,
    h: usize,
    nx: usize,
    ny: usize,
    cell_w: f64,
    cell_h: f64,
) -> Vec<Center> {
    let grad = |x: usize, y: usize| -> f64 {
        let at = |x: usize, y: usize| lab[y * w + x];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let d = |a: [f32; 3], b: [f32; 3]| -> f64 {
            a.iter()
                .zip(&b)
                .map(|(p, q)| f64::from(p - q).powi(2))
                .sum()
        };
        d(at(xr, y), at(xl, y)) + d(at(x, yd), at(x, yu))
    };
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * cell_w) - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            let cy = (((j as f64 + 0.5) * cell_h) - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
            let (mut bx, mut by, mut best) = (cx, cy, grad(cx, cy));
            if cell_w >= 3.0 && cell_h >= 3.0 {
                for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        let g = grad(xx, yy);
                        if g < best {
                            (bx, by, best) = (xx, yy, g);
                        }
                    }
                }
            }
            let l = lab[by * w + bx];
            centers.push(Center {
                x: bx as f64,
                y: by as f64,
                lab: [f64::from(l[0]), f64::from(l[1]), f64::from(l[2])],
            });
        }
    }
    centers
}

fn assign(
    lab: &[[f32; 3]],
    w: usize,
    centers: &[Center],
    buckets: &Buckets,
    spatial: f64,
    labels: &mut [u32],
) {
    par::for_each_row_mut(labels, w, |y, row| {
        let mut cand = Vec::with_capacity(16);
        for (x, out) in row.iter_mut().enumerate() {
            let f = lab[y * w + x];
            let mut r = 1;
            loop {
                buckets.around(x, y, r, &mut cand);
                if !cand.is_empty() {
                    break;
                }
                r += 1;
            }
            let mut best = f64::MAX;
            let mut best_id = cand[0];
            for &ci in &cand {
                let c = &centers[ci as usize];
                let dl = f64::from(f[0]) - c.lab[0];
                let da = f64::from(f[1]) - c.lab[1];
                let db = f64::from(f[2]) - c.lab[2];
                let dx = x as f64 - c.x;
                let dy = y as f64 - c.y;
                let d = dl * dl + da * da + db * db + spatial * (dx * dx + dy * dy);
                if d < best || (d == best && ci < best_id) {
                    best = d;
                    best_id = ci;
                }
            }
            *out = best_id;
        }
    });
}

fn update_centers(lab: &[[f32; 3]], w: usize, labels: &[u32], centers: &mut [Center]) {
    let k = centers.len();
    let h = labels.len() / w;
    // per-row partial sums keep the reduction order fixed
    let rows: Vec<BTreeMap<u32, [f64; 6]>> = par::map_range(h, |y| {
        let mut acc: BTreeMap<u32, [f64; 6]> = BTreeMap::new();
        for x in 0..w {
            let i = y * w + x;
            let e = acc.entry(labels[i]).or_insert([0.0; 6]);
            e[0] += x as f64;
            e[1] += y as f64;
            e[2] += f64::from(lab[i][0]);
            e[3] += f64::from(lab[i][1]);
            e[4] += f64::from(lab[i][2]);
            e[5] += 1.0;
        }
        acc
    });
    let mut sums = vec![[0.0f64; 6]; k];
    for row in rows {
        for (l, s) in row {
            let t = &mut sums[l as usize];
            for j in 0..6 {
                t[j] += s[j];
            }
        }
    }
    for (c, s) in centers.iter_mut().zip(&sums) {
        if s[5] > 0.0 {
            c.x = s[0] / s[5];
            c.y = s[1] / s[5];
            c.lab = [s[2] / s[5], s[3] / s[5], s[4] / s[5]];
        }
    }
}

/// Splits labels into 4-connected components and merges every component
/// smaller than `min_size` into the adjacent component sharing the most
/// boundary pixels.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n = labels.len();
    let mut comp = vec![u32::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let l = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == u32::MAX && labels[j] == l {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }

    let n_comp = sizes.len();
    if sizes.iter().all(|&s| s >= min_size) {
        return comp;
    }

    // shared boundary lengths between components
    let mut borders: Vec<HashMap<u32, usize>> = vec![HashMap::new(); n_comp];
    let mut touch = |a: u32, b: u32| {
        if a != b {
            *borders[a as usize].entry(b).or_default() += 1;
            *borders[b as usize].entry(a).or_default() += 1;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            if x + 1 < w {
                touch(a, comp[y * w + x + 1]);
            }
            if y + 1 < h {
                touch(a, comp[(y + 1) * w + x]);
            }
        }
    }

    let mut parent: Vec<u32> = (0..n_comp as u32).collect();
    let mut order: Vec<u32> = (0..n_comp as u32)
        .filter(|&c| sizes[c as usize] < min_size)
        .collect();
    order.sort_by_key(|&c| (sizes[c as usize], c));
    for c in order {
        if parent[c as usize] != c || sizes[c as usize] >= min_size {
            continue;
        }
        let target = borders[c as usize]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&t, _)| t);
        let Some(t) = target else { continue };
        parent[c as usize] = t;
        sizes[t as usize] += sizes[c as usize];
        let moved = std::mem::take(&mut borders[c as usize]);
        for (nbr, len) in moved {
            let nb = &mut borders[nbr as usize];
            nb.remove(&c);
            if nbr != t {
                *nb.entry(t).or_default() += len;
                *borders[t as usize].entry(nbr).or_default() += len;
            }
        }
        borders[t as usize].remove(&c);
    }

    let root = |mut c: u32| {
        while parent[c as usize] != c {
            c = parent[c as usize];
        }
        c
    };
    comp.iter().map(|&c| root(c)).collect()
}
