//! Superpixel segmentation and occluder selection.
//!
//! [`slic_segment`] produces label maps; [`grow_region`] accretes whole
//! neighboring superpixels around a seed until a target pixel count is
//! reached, which is how occluder masks are cut out of a source image.

mod cache;
mod slic;

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;

pub use cache::{read_label_map, write_label_map, SegmentationCache, LABEL_MAP_MAGIC};
pub use slic::{slic_segment, SlicParams};

/// Per-pixel superpixel labels at one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    n_segments: usize,
}

impl SegmentationMap {
    /// Validates that labels are dense in `0..n_segments`.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, n_segments: usize) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        let mut seen = vec![false; n_segments];
        for &l in &labels {
            match seen.get_mut(l as usize) {
                Some(s) => *s = true,
                None => {
                    return Err(Error::InvalidParameter(format!(
                        "label {l} out of range for {n_segments} segments"
                    )))
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidParameter(format!("segment {missing} has no pixels")));
        }
        Ok(Self {
            height,
            width,
            labels,
            n_segments,
        })
    }

    /// Relabels arbitrary ids densely in order of first appearance.
    pub fn from_raw_labels(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        let mut remap = std::collections::HashMap::new();
        let labels: Vec<u32> = raw
            .iter()
            .map(|l| {
                let next = remap.len() as u32;
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        let n = remap.len();
        Self::new(height, width, labels, n)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count of every segment.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Segmentations of one image ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationStack {
    maps: Vec<SegmentationMap>,
    component_counts: Vec<usize>,
    sizes: Vec<Vec<usize>>,
    adjacency: Vec<RegionAdjacency>,
}

impl SegmentationStack {
    pub fn new(maps: Vec<SegmentationMap>, component_counts: Vec<usize>) -> Result<Self> {
        if maps.is_empty() || maps.len() != component_counts.len() {
            return Err(Error::InvalidParameter(format!(
                "{} maps for {} component counts",
                maps.len(),
                component_counts.len()
            )));
        }
        if component_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "component counts must be strictly increasing".into(),
            ));
        }
        let dims = (maps[0].height, maps[0].width);
        if maps.iter().any(|m| (m.height, m.width) != dims) {
            return Err(Error::InvalidDimension(
                "segmentation maps of one stack must share dimensions".into(),
            ));
        }
        let sizes = maps.iter().map(SegmentationMap::segment_sizes).collect();
        let adjacency = maps.iter().map(build_adjacency).collect();
        Ok(Self {
            maps,
            component_counts,
            sizes,
            adjacency,
        })
    }

    /// Runs SLIC once per component count.
    pub fn compute(
        img: &crate::imaging::Image,
        component_counts: &[usize],
        params: &SlicParams,
    ) -> Result<Self> {
        let maps = component_counts
            .iter()
            .map(|&n| slic_segment(img, n, params.compactness, params.iterations))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, component_counts.to_vec())
    }

    pub fn maps(&self) -> &[SegmentationMap] {
        &self.maps
    }

    pub fn component_counts(&self) -> &[usize] {
        &self.component_counts
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.maps[0].height, self.maps[0].width)
    }

    pub fn adjacency(&self, k: usize) -> &RegionAdjacency {
        &self.adjacency[k]
    }
}

/// Superpixel pairs sharing a 4-connected boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionAdjacency {
    neighbors: Vec<Vec<u32>>,
}

impl RegionAdjacency {
    pub fn n_segments(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbor ids of `segment`.
    pub fn neighbors(&self, segment: u32) -> &[u32] {
        &self.neighbors[segment as usize]
    }

    /// Unordered edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| {
                ns.iter()
                    .filter(move |&&b| (a as u32) < b)
                    .map(move |&b| (a as u32, b))
            })
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }
}

pub fn build_adjacency(seg: &SegmentationMap) -> RegionAdjacency {
    let mut neighbors = vec![Vec::new(); seg.n_segments];
    let (w, h) = (seg.width, seg.height);
    let mut link = |a: u32, b: u32| {
        if a != b {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let l = seg.labels[y * w + x];
            if x + 1 < w {
                link(l, seg.labels[y * w + x + 1]);
            }
            if y + 1 < h {
                link(l, seg.labels[(y + 1) * w + x]);
            }
        }
    }
    for ns in &mut neighbors {
        ns.sort_unstable();
        ns.dedup();
    }
    RegionAdjacency { neighbors }
}

/// Breadth-first accretion of whole superpixels around `seed` until at
/// least `target_size` pixels are covered or the connected component is
/// exhausted. Newly discovered neighbors join the queue in shuffled order.
pub fn grow_region<R: Rng + ?Sized>(
    seg: &SegmentationMap,
    adj: &RegionAdjacency,
    seed: u32,
    target_size: usize,
    rng: &mut R,
) -> Result<Mask> {
    let sizes = seg.segment_sizes();
    let chosen = grow_segments(&sizes, adj, seed, target_size, rng)?;
    Ok(segments_to_mask(seg, &chosen))
}

fn grow_segments<R: Rng + ?Sized>(
    sizes: &[usize],
    adj: &RegionAdjacency,
    seed: u32,
    target_size: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if seed as usize >= sizes.len() {
        return Err(Error::InvalidParameter(format!(
            "seed superpixel {seed} out of range for {} segments",
            sizes.len()
        )));
    }
    if target_size == 0 {
        return Err(Error::InvalidParameter("target size must be >= 1".into()));
    }
    let mut visited = vec![false; sizes.len()];
    let mut chosen = vec![false; sizes.len()];
    let mut queue = VecDeque::from([seed]);
    visited[seed as usize] = true;
    let mut total = 0usize;
    while let Some(s) = queue.pop_front() {
        chosen[s as usize] = true;
        total += sizes[s as usize];
        if total >= target_size {
            break;
        }
        let mut fresh: Vec<u32> = adj
            .neighbors(s)
            .iter()
            .copied()
            .filter(|&n| !visited[n as usize])
            .collect();
        fresh.shuffle(rng);
        for n in fresh {
            visited[n as usize] = true;
            queue.push_back(n);
        }
    }
    Ok(chosen)
}

fn segments_to_mask(seg: &SegmentationMap, chosen: &[bool]) -> Mask {
    let alpha = seg
        .labels
        .iter()
        .map(|&l| if chosen[l as usize] { 1.0 } else { 0.0 })
        .collect();
    Mask::from_raw_unchecked(seg.height, seg.width, alpha)
}

/// An occluder mask together with the choices that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub mask: Mask,
    pub granularity: usize,
    pub seed_segment: u32,
    pub target_size: usize,
    pub area: usize,
}

/// Provenance of one occluder draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccluderRecord {
    pub granularity: usize,
    pub seed_segment: u32,
    pub target_size: usize,
    pub area: usize,
}

impl Occluder {
    pub fn record(&self) -> OccluderRecord {
        OccluderRecord {
            granularity: self.granularity,
            seed_segment: self.seed_segment,
            target_size: self.target_size,
            area: self.area,
        }
    }
}

/// Draws a granularity, a target size in `size_range` (inclusive) and a
/// seed superpixel, all uniformly, then grows the region.
pub fn pick_occluder<R: Rng + ?Sized>(
    stack: &SegmentationStack,
    size_range: (usize, usize),
    rng: &mut R,
) -> Result<Occluder> {
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidParameter(format!(
            "occluder size range [{lo}, {hi}] is empty or starts at 0"
        )));
    }
    let k = rng.random_range(0..stack.len());
    let target_size = rng.random_range(lo..=hi);
    grow_occluder(stack, k, target_size, rng)
}

/// Grows an occluder of about `target_size` pixels at granularity `k` from a
/// uniformly drawn seed superpixel.
pub fn grow_occluder<R: Rng + ?Sized>(
    stack: &SegmentationStack,
    k: usize,
    target_size: usize,
    rng: &mut R,
) -> Result<Occluder> {
    if k >= stack.len() {
        return Err(Error::InvalidParameter(format!(
            "granularity {k} outside a stack of {}",
            stack.len()
        )));
    }
    let seed = rng.random_range(0..stack.maps[k].n_segments) as u32;
    let chosen = grow_segments(&stack.sizes[k], &stack.adjacency[k], seed, target_size, rng)?;
    let area = chosen
        .iter()
        .zip(&stack.sizes[k])
        .filter(|(c, _)| **c)
        .map(|(_, s)| s)
        .sum();
    Ok(Occluder {
        mask: segments_to_mask(&stack.maps[k], &chosen),
        granularity: k,
        seed_segment: seed,
        target_size,
        area,
    })
}

/// True if the set pixels of `bits` form one 4-connected component.
pub fn is_connected(bits: &[bool], width: usize) -> bool {
    let Some(start) = bits.iter().position(|&b| b) else {
        return true;
    };
    let height = bits.len() / width;
    let mut seen = vec![false; bits.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (x, y) = (i % width, i / width);
        let mut visit = |j: usize| {
            if bits[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < width {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - width);
        }
        if y + 1 < height {
            visit(i + width);
        }
    }
    count == bits.iter().filter(|&&b| b).count()
}
