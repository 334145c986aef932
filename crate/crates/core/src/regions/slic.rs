use crate::error::{Error, Result};

use super::SegmentLabels;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicCenter {
    pub rgb: [f64; 3],
    pub y: f64,
    pub x: f64,
}

#[derive(Debug, Clone)]
pub struct SlicResult {
    /// Labels after connectivity enforcement.
    pub labels: SegmentLabels,
    /// Centers used for the final assignment pass.
    pub centers: Vec<SlicCenter>,
    /// Step `S = sqrt(H W / k)` of the grid.
    pub step: f64,
}

impl SlicCenter {
    /// `||color|| + (m / S) ||xy||`
    pub fn distance(&self, rgb: &[f64], y: f64, x: f64, spatial_weight: f64) -> f64 {
        let dc = ((self.rgb[0] - rgb[0]).powi(2) + (self.rgb[1] - rgb[1]).powi(2) + (self.rgb[2] - rgb[2]).powi(2)).sqrt();
        let ds = ((self.y - y).powi(2) + (self.x - x).powi(2)).sqrt();
        dc + spatial_weight * ds
    }
}

/// SLIC superpixels on an RGB image (`h * w * 3` values in `[0, 1]`).
pub fn slic_segment(rgb: &[f64], h: usize, w: usize, k: usize, compactness: f64, iters: usize) -> Result<SegmentLabels> {
    Ok(slic_with_centers(rgb, h, w, k, compactness, iters)?.labels)
}

/// Centers start on a regular grid of about `k` cells (exactly `k` when `k`
/// factors into the frame's aspect); pixel coordinates are cell centers.
pub fn slic_with_centers(rgb: &[f64], h: usize, w: usize, k: usize, compactness: f64, iters: usize) -> Result<SlicResult> {
    if rgb.len() != h * w * 3 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("slic: buffer of {} values is not {h}x{w}x3", rgb.len())));
    }
    if k == 0 || k > h * w {
        return Err(Error::invalid(format!("slic: k = {k} must be in 1..={}", h * w)));
    }
    let step = ((h * w) as f64 / k as f64).sqrt();
    let weight = compactness / step;
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.min(k));
    let nx = ((k as f64 / ny as f64).round() as usize).clamp(1, w);
    let pix = |i: usize| &rgb[3 * i..3 * i + 3];

    let mut centers: Vec<SlicCenter> = (0..ny)
        .flat_map(|gy| (0..nx).map(move |gx| (gy, gx)))
        .map(|(gy, gx)| {
            let y = (gy as f64 + 0.5) * h as f64 / ny as f64;
            let x = (gx as f64 + 0.5) * w as f64 / nx as f64;
            let (py, px) = ((y as usize).min(h - 1), (x as usize).min(w - 1));
            let c = pix(py * w + px);
            SlicCenter {
                rgb: [c[0], c[1], c[2]],
                y,
                x,
            }
        })
        .collect();

    let mut labels = vec![0usize; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    let mut assign = |centers: &[SlicCenter], labels: &mut Vec<usize>| {
        best.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            // 2S x 2S window around the center
            let y0 = (c.y - step).floor().max(0.0) as usize;
            let y1 = ((c.y + step).ceil() as usize).min(h);
            let x0 = (c.x - step).floor().max(0.0) as usize;
            let x1 = ((c.x + step).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * w + x;
                    let d = c.distance(pix(i), y as f64 + 0.5, x as f64 + 0.5, weight);
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
    };
    assign(&centers, &mut labels);
    for _ in 0..iters {
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let p = pix(i);
            let a = &mut acc[l];
            a[0] += p[0];
            a[1] += p[1];
            a[2] += p[2];
            a[3] += (i / w) as f64 + 0.5;
            a[4] += (i % w) as f64 + 0.5;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = SlicCenter {
                    rgb: [a[0] / a[5], a[1] / a[5], a[2] / a[5]],
                    y: a[3] / a[5],
                    x: a[4] / a[5],
                };
            }
        }
        assign(&centers, &mut labels);
    }

    let labels = enforce_connectivity(h, w, labels);
    Ok(SlicResult { labels, centers, step })
}

/// 4-connected components of a label map: (component id per pixel, sizes).
fn components(h: usize, w: usize, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[start] {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Repeatedly merges the smallest orphan (a component that is not the
/// largest of its label) into its largest adjacent component until every
/// label is connected.
fn enforce_connectivity(h: usize, w: usize, mut labels: Vec<usize>) -> SegmentLabels {
    loop {
        let (comp, sizes) = components(h, w, &labels);
        // largest component per label, ties to the first found
        let mut main: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        let mut first_pixel = vec![usize::MAX; sizes.len()];
        for (i, &c) in comp.iter().enumerate() {
            if first_pixel[c] == usize::MAX {
                first_pixel[c] = i;
                let e = main.entry(labels[i]).or_insert(c);
                if sizes[c] > sizes[*e] {
                    *e = c;
                }
            }
        }
        let orphan = (0..sizes.len())
            .filter(|&c| main[&labels[first_pixel[c]]] != c)
            .min_by_key(|&c| (sizes[c], c));
        let Some(orphan) = orphan else {
            return SegmentLabels::canonical(h, w, &labels);
        };
        let mut target: Option<usize> = None;
        for i in (0..h * w).filter(|&i| comp[i] == orphan) {
            let (y, x) = (i / w, i % w);
            let neighbors = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in neighbors.into_iter().flatten() {
                let c = comp[j];
                if c != orphan && target.map_or(true, |t| (sizes[c], std::cmp::Reverse(c)) > (sizes[t], std::cmp::Reverse(t))) {
                    target = Some(c);
                }
            }
        }
        let new_label = labels[first_pixel[target.expect("an orphan always has a neighbor")]];
        for i in 0..h * w {
            if comp[i] == orphan {
                labels[i] = new_label;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_cluster() {
        let img = vec![0.3; 8 * 8 * 3];
        let l = slic_segment(&img, 8, 8, 1, 10.0, 3).unwrap();
        assert!(l.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn uniform_image_gives_grid_cells() {
        let img = vec![0.5; 16 * 16 * 3];
        let l = slic_segment(&img, 16, 16, 4, 10.0, 0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = (y / 8) * 2 + x / 8;
                assert_eq!(l.labels[y * 16 + x], want);
            }
        }
    }

    #[test]
    fn too_many_clusters() {
        assert!(slic_segment(&[0.0; 12], 2, 2, 5, 10.0, 1).is_err());
    }

    #[test]
    fn connectivity_merges_orphans() {
        // label 0 split in two by a column of label 1
        let labels = vec![0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let out = enforce_connectivity(3, 4, labels);
        assert!(out.is_partition());
        assert_eq!(out.num_segments(), 2);
        // the single orphan column merged into the larger neighbor (label 1)
        assert_eq!(out.labels[0], out.labels[1]);
    }

    #[test]
    fn outputs_are_connected_partitions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let img: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
            let l = slic_segment(&img, 32, 32, 16, 1.0, 5).unwrap();
            assert!(l.is_partition());
            let (_, sizes) = components(32, 32, &l.labels);
            assert_eq!(sizes.len(), l.num_segments());
        }
    }
}
