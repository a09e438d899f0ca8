//! SLIC superpixels: localized k-means in CIELAB + image-plane space.
//!
//! Centers are seeded on a near-regular grid of spacing `S = sqrt(N / K)`,
//! nudged to the lowest-gradient pixel of their 3x3 neighborhood, then
//! refined by assigning pixels within each center's `2S x 2S` window using
//! `D = sqrt(d_lab^2 + (d_xy / S)^2 * m^2)`. A final pass makes every
//! segment a single 4-connected region. Arithmetic runs in a fixed order
//! with no randomness, so the label map is a pure function of the input.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterImage;

/// Fewest superpixels the segmenter targets and, for images at least
/// 200x200, still returns after merging.
pub const MIN_SEGMENTS: usize = 5;
pub const MAX_SEGMENTS: usize = 12;
/// Image area covered by one superpixel when choosing `K` (150 x 150).
pub const AREA_PER_SEGMENT: usize = 22_500;
pub const MIN_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlicError {
    #[error("image {width}x{height} is below the {MIN_SIDE}x{MIN_SIDE} minimum")]
    Degenerate { width: usize, height: usize },
    #[error("target count {0} outside {MIN_SEGMENTS}..={MAX_SEGMENTS}")]
    TargetCount(usize),
    #[error("compactness must be positive and finite, got {0}")]
    Compactness(f64),
    #[error("iterations must be at least 1")]
    Iterations,
    #[error("min_region_fraction must be in [0, 1), got {0}")]
    RegionFraction(f64),
    #[error("image has {pixels} pixels, fewer than the {target} requested segments")]
    TooFewPixels { pixels: usize, target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
    pub min_region_fraction: f64,
}

impl SlicParams {
    pub fn new(target_count: usize) -> Result<Self, SlicError> {
        let params = SlicParams {
            target_count,
            compactness: 10.0,
            iterations: 10,
            min_region_fraction: 0.25,
        };
        params.validate()?;
        Ok(params)
    }

    /// Defaults with `K` chosen from the image size.
    pub fn for_image(width: usize, height: usize) -> Result<Self, SlicError> {
        Self::new(choose_target_count(width, height)?)
    }

    pub fn with_compactness(mut self, compactness: f64) -> Self {
        self.compactness = compactness;
        self
    }

    pub fn validate(&self) -> Result<(), SlicError> {
        if !(MIN_SEGMENTS..=MAX_SEGMENTS).contains(&self.target_count) {
            return Err(SlicError::TargetCount(self.target_count));
        }
        if !(self.compactness.is_finite() && self.compactness > 0.0) {
            return Err(SlicError::Compactness(self.compactness));
        }
        if self.iterations == 0 {
            return Err(SlicError::Iterations);
        }
        if !(0.0..1.0).contains(&self.min_region_fraction) {
            return Err(SlicError::RegionFraction(self.min_region_fraction));
        }
        Ok(())
    }
}

/// `K = clamp(round(width * height / 22500), 5, 12)`.
pub fn choose_target_count(width: usize, height: usize) -> Result<usize, SlicError> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(SlicError::Degenerate { width, height });
    }
    let rounded = (width * height + AREA_PER_SEGMENT / 2) / AREA_PER_SEGMENT;
    Ok(rounded.clamp(MIN_SEGMENTS, MAX_SEGMENTS))
}

/// Per-pixel segment labels in `0..segment_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    segment_count: usize,
}

impl SuperpixelMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.segment_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Number of 4-neighbor pixel pairs whose labels differ.
    pub fn boundary_length(&self) -> usize {
        let (w, h) = (self.width, self.height);
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                let l = self.labels[y * w + x];
                if x + 1 < w && self.labels[y * w + x + 1] != l {
                    count += 1;
                }
                if y + 1 < h && self.labels[(y + 1) * w + x] != l {
                    count += 1;
                }
            }
        }
        count
    }

    /// Number of 4-connected components carrying each label.
    pub fn components_per_segment(&self) -> Vec<usize> {
        let (_, comp_label, _) = connected_components(self.width, self.height, &self.labels);
        let mut per = vec![0; self.segment_count];
        for l in comp_label {
            per[l as usize] += 1;
        }
        per
    }
}

#[derive(Clone, Copy)]
struct Lab {
    l: f64,
    a: f64,
    b: f64,
}

fn srgb_to_linear(c: u8) -> f64 {
    let v = c as f64 / 255.0;
    if v <= 0.04045 {
        v / 12.92
    } else {
        libm::pow((v + 0.055) / 1.055, 2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        libm::cbrt(t)
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// sRGB (D65) to CIELAB.
fn to_lab(rgb: [u8; 3], linear: &[f64; 256]) -> Lab {
    let [r, g, b] = rgb.map(|c| linear[c as usize]);
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let (fx, fy, fz) = (lab_f(x), lab_f(y), lab_f(z));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

fn lab_dist2(p: &Lab, c: &Center) -> f64 {
    let (dl, da, db) = (p.l - c.l, p.a - c.a, p.b - c.b);
    dl * dl + da * da + db * db
}

#[derive(Clone, Copy)]
struct Center {
    l: f64,
    a: f64,
    b: f64,
    x: f64,
    y: f64,
}

/// Segments `image` into at most `params.target_count` connected superpixels.
pub fn slic_segment(image: &RasterImage, params: &SlicParams) -> Result<SuperpixelMap, SlicError> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let k = params.target_count;
    if n < k {
        return Err(SlicError::TooFewPixels { pixels: n, target: k });
    }

    let mut linear = [0.0f64; 256];
    for (c, slot) in linear.iter_mut().enumerate() {
        *slot = srgb_to_linear(c as u8);
    }
    let lab: Vec<Lab> = image.pixels().iter().map(|p| to_lab(*p, &linear)).collect();
    let step = libm::sqrt(n as f64 / k as f64);

    let mut centers = seed_centers(w, h, k, step, &lab);
    let spatial_weight = (params.compactness / step) * (params.compactness / step);

    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = libm::floor(c.x - step).max(0.0) as usize;
            let x1 = (libm::ceil(c.x + step) as usize).min(w - 1);
            let y0 = libm::floor(c.y - step).max(0.0) as usize;
            let y1 = (libm::ceil(c.y + step) as usize).min(h - 1);
            for y in y0..=y1 {
                let dy = y as f64 - c.y;
                for x in x0..=x1 {
                    let idx = y * w + x;
                    let dx = x as f64 - c.x;
                    let d = lab_dist2(&lab[idx], c) + (dx * dx + dy * dy) * spatial_weight;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        // Pixels outside every window fall back to the globally nearest center.
        for idx in 0..n {
            if labels[idx] != u32::MAX {
                continue;
            }
            let (x, y) = ((idx % w) as f64, (idx / w) as f64);
            let mut best = (f64::INFINITY, 0u32);
            for (ci, c) in centers.iter().enumerate() {
                let (dx, dy) = (x - c.x, y - c.y);
                let d = lab_dist2(&lab[idx], c) + (dx * dx + dy * dy) * spatial_weight;
                if d < best.0 {
                    best = (d, ci as u32);
                }
            }
            labels[idx] = best.1;
        }

        let mut sums = vec![[0.0f64; 5]; k];
        let mut counts = vec![0usize; k];
        for (idx, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            let p = &lab[idx];
            s[0] += p.l;
            s[1] += p.a;
            s[2] += p.b;
            s[3] += (idx % w) as f64;
            s[4] += (idx / w) as f64;
            counts[l as usize] += 1;
        }
        for ((c, s), &count) in centers.iter_mut().zip(&sums).zip(&counts) {
            if count > 0 {
                let inv = 1.0 / count as f64;
                *c = Center {
                    l: s[0] * inv,
                    a: s[1] * inv,
                    b: s[2] * inv,
                    x: s[3] * inv,
                    y: s[4] * inv,
                };
            }
        }
    }

    let min_size = libm::floor(params.min_region_fraction * n as f64 / k as f64) as usize;
    let (labels, segment_count) = enforce_connectivity(w, h, &labels, min_size);
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        segment_count,
    })
}

/// Places exactly `k` centers: `round(h / step)` rows with the seeds split
/// as evenly as possible between them, each row spaced evenly across the
/// width, then moves each to the lowest-gradient pixel in its 3x3 patch.
fn seed_centers(w: usize, h: usize, k: usize, step: f64, lab: &[Lab]) -> Vec<Center> {
    let rows = (libm::round(h as f64 / step) as usize).clamp(1, k);
    let gradient = |x: usize, y: usize| -> f64 {
        let at = |x: usize, y: usize| &lab[y * w + x];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let d = |p: &Lab, q: &Lab| {
            let (dl, da, db) = (p.l - q.l, p.a - q.a, p.b - q.b);
            dl * dl + da * da + db * db
        };
        d(at(xr, y), at(xl, y)) + d(at(x, yd), at(x, yu))
    };

    let mut centers = Vec::with_capacity(k);
    for r in 0..rows {
        let in_row = k / rows + usize::from(r < k % rows);
        let cy = ((r as f64 + 0.5) * h as f64 / rows as f64) as usize;
        for c in 0..in_row {
            let cx = ((c as f64 + 0.5) * w as f64 / in_row as f64) as usize;
            let (mut bx, mut by) = (cx.min(w - 1), cy.min(h - 1));
            let mut best = gradient(bx, by);
            for ny in by.saturating_sub(1)..=(by + 1).min(h - 1) {
                for nx in bx.saturating_sub(1)..=(bx + 1).min(w - 1) {
                    let g = gradient(nx, ny);
                    if g < best {
                        best = g;
                        (bx, by) = (nx, ny);
                    }
                }
            }
            let p = lab[by * w + bx];
            centers.push(Center {
                l: p.l,
                a: p.a,
                b: p.b,
                x: bx as f64,
                y: by as f64,
            });
        }
    }
    centers
}

/// 4-connected components in scan order: per-pixel component id, the label
/// of each component, and each component's size.
fn connected_components(w: usize, h: usize, labels: &[u32]) -> (Vec<u32>, Vec<u32>, Vec<usize>) {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = comp_label.len() as u32;
        let label = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = (idx % w, idx / w);
            let mut visit = |j: usize| {
                if comp[j] == u32::MAX && labels[j] == label {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        comp_label.push(label);
        comp_size.push(size);
    }
    (comp, comp_label, comp_size)
}

/// Folds every non-largest fragment of a label into its largest settled
/// neighbor, then merges whole segments below `min_size` (smallest first)
/// into their largest neighbor while more than [`MIN_SEGMENTS`] remain.
/// Returns dense labels numbered by first appearance in scan order.
fn enforce_connectivity(w: usize, h: usize, labels: &[u32], min_size: usize) -> (Vec<u32>, usize) {
    let (comp, comp_label, comp_size) = connected_components(w, h, labels);
    let n_comp = comp_label.len();
    let n_labels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);

    let mut comp_adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_comp];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x];
            for j in [(x + 1 < w).then(|| y * w + x + 1), (y + 1 < h).then(|| (y + 1) * w + x)]
                .into_iter()
                .flatten()
            {
                let b = comp[j];
                if a != b {
                    comp_adj[a as usize].insert(b);
                    comp_adj[b as usize].insert(a);
                }
            }
        }
    }

    // The largest component of each label (first in scan order on ties) anchors it.
    let mut primary: Vec<Option<usize>> = vec![None; n_labels];
    for c in 0..n_comp {
        let l = comp_label[c] as usize;
        if primary[l].is_none_or(|p| comp_size[c] > comp_size[p]) {
            primary[l] = Some(c);
        }
    }
    let mut seg_size = vec![0usize; n_labels];
    let mut settled = vec![false; n_comp];
    let mut owner = comp_label.clone();
    for (l, p) in primary.iter().enumerate() {
        if let Some(p) = *p {
            settled[p] = true;
            seg_size[l] = comp_size[p];
        }
    }
    let mut remaining = settled.iter().filter(|s| !**s).count();
    while remaining > 0 {
        let before = remaining;
        for c in 0..n_comp {
            if settled[c] {
                continue;
            }
            let target = comp_adj[c]
                .iter()
                .filter(|&&nb| settled[nb as usize])
                .map(|&nb| owner[nb as usize])
                .max_by(|&a, &b| seg_size[a as usize].cmp(&seg_size[b as usize]).then(b.cmp(&a)));
            if let Some(t) = target {
                owner[c] = t;
                seg_size[t as usize] += comp_size[c];
                settled[c] = true;
                remaining -= 1;
            }
        }
        if remaining == before {
            break;
        }
    }

    // Segment-level adjacency after fragments are absorbed.
    let mut seg_adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_labels];
    for c in 0..n_comp {
        for &nb in &comp_adj[c] {
            let (a, b) = (owner[c], owner[nb as usize]);
            if a != b {
                seg_adj[a as usize].insert(b);
            }
        }
    }
    let mut alive: Vec<bool> = seg_size.iter().map(|&s| s > 0).collect();
    let mut live_count = alive.iter().filter(|a| **a).count();
    let mut merged_into: Vec<u32> = (0..n_labels as u32).collect();
    while live_count > MIN_SEGMENTS {
        let smallest = (0..n_labels)
            .filter(|&l| alive[l] && seg_size[l] < min_size && !seg_adj[l].is_empty())
            .min_by(|&a, &b| seg_size[a].cmp(&seg_size[b]).then(a.cmp(&b)));
        let Some(s) = smallest else { break };
        let t = *seg_adj[s]
            .iter()
            .max_by(|&&a, &&b| seg_size[a as usize].cmp(&seg_size[b as usize]).then(b.cmp(&a)))
            .expect("non-empty adjacency");
        let neighbors = core::mem::take(&mut seg_adj[s]);
        for &nb in &neighbors {
            let set = &mut seg_adj[nb as usize];
            set.remove(&(s as u32));
            if nb != t {
                set.insert(t);
                seg_adj[t as usize].insert(nb);
            }
        }
        seg_adj[t as usize].remove(&t);
        seg_size[t as usize] += seg_size[s];
        seg_size[s] = 0;
        alive[s] = false;
        merged_into[s] = t;
        live_count -= 1;
    }

    let resolve = |mut l: u32| {
        while merged_into[l as usize] != l {
            l = merged_into[l as usize];
        }
        l
    };
    let mut dense = vec![u32::MAX; n_labels];
    let mut next = 0u32;
    let out = comp
        .iter()
        .map(|&c| {
            let l = resolve(owner[c as usize]) as usize;
            if dense[l] == u32::MAX {
                dense[l] = next;
                next += 1;
            }
            dense[l]
        })
        .collect();
    (out, next as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_count_examples() {
        assert_eq!(choose_target_count(512, 512).unwrap(), 12);
        assert_eq!(choose_target_count(300, 300).unwrap(), 5);
        assert_eq!(choose_target_count(450, 450).unwrap(), 9);
        assert_eq!(choose_target_count(4000, 3000).unwrap(), 12);
        assert!(matches!(
            choose_target_count(31, 400),
            Err(SlicError::Degenerate { .. })
        ));
    }

    #[test]
    fn params_are_validated() {
        assert!(matches!(SlicParams::new(4), Err(SlicError::TargetCount(4))));
        assert!(matches!(SlicParams::new(13), Err(SlicError::TargetCount(13))));
        let p = SlicParams::new(9).unwrap();
        assert_eq!((p.compactness, p.iterations, p.min_region_fraction), (10.0, 10, 0.25));
        assert!(p.with_compactness(0.0).validate().is_err());
    }

    #[test]
    fn uniform_gray_gives_grid_blocks() {
        let img = RasterImage::filled(450, 450, [128, 128, 128]).unwrap();
        let map = slic_segment(&img, &SlicParams::new(9).unwrap()).unwrap();
        assert_eq!(map.segment_count(), 9);
        for size in map.segment_sizes() {
            // 150 x 150 = 22500, allowing for ties along block edges.
            assert!((size as i64 - 22_500).abs() < 1_500, "{size}");
        }
        // Block centers land in distinct segments laid out as a 3x3 grid.
        let mut seen = BTreeSet::new();
        for by in 0..3 {
            for bx in 0..3 {
                seen.insert(map.label(75 + 150 * bx, 75 + 150 * by));
            }
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn lab_of_white_and_black() {
        let mut linear = [0.0; 256];
        for (c, slot) in linear.iter_mut().enumerate() {
            *slot = srgb_to_linear(c as u8);
        }
        let white = to_lab([255, 255, 255], &linear);
        assert!((white.l - 100.0).abs() < 1e-3 && white.a.abs() < 1e-2 && white.b.abs() < 1e-2);
        let black = to_lab([0, 0, 0], &linear);
        assert!(black.l.abs() < 1e-9);
    }

    #[test]
    fn connectivity_folds_fragments() {
        // Label 0 split in two by label 1's column; the smaller fragment
        // joins its neighbor so every label ends up connected.
        let w = 6;
        let h = 4;
        let mut labels = vec![0u32; w * h];
        for y in 0..h {
            labels[y * w + 2] = 1;
            labels[y * w + 5] = 2;
        }
        labels[4] = 2;
        let (out, count) = enforce_connectivity(w, h, &labels, 0);
        let map = SuperpixelMap {
            width: w,
            height: h,
            labels: out,
            segment_count: count,
        };
        assert_eq!(count, 3);
        assert!(map.components_per_segment().iter().all(|&c| c == 1));
    }
}
