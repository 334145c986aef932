use crate::error::{Error, Result};

use super::SegmentLabels;

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest edge weight inside each component's spanning tree.
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = w;
    }
}

/// Edges of the 8-connected grid as (weight, a, b) with a < b, sorted by
/// weight, then endpoints.
pub(crate) fn grid_edges(rgb: &[f64], h: usize, w: usize) -> Vec<(f64, usize, usize)> {
    let diff = |a: usize, b: usize| {
        (0..3).map(|c| (rgb[3 * a + c] - rgb[3 * b + c]).powi(2)).sum::<f64>().sqrt()
    };
    let mut edges = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((diff(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((diff(i, i + w), i, i + w));
                if x + 1 < w {
                    edges.push((diff(i, i + w + 1), i, i + w + 1));
                }
                if x > 0 {
                    edges.push((diff(i, i + w - 1), i, i + w - 1));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    edges
}

/// Felzenszwalb-Huttenlocher graph segmentation of an `h * w * 3` image.
/// Components A and B joined by an edge of weight `w` merge when
/// `w <= min(Int(A) + scale/|A|, Int(B) + scale/|B|)`; a final pass over the
/// same edge order absorbs components smaller than `min_size`.
pub fn fh_segment(rgb: &[f64], h: usize, w: usize, scale: f64, min_size: usize) -> Result<SegmentLabels> {
    if rgb.len() != h * w * 3 {
        return Err(Error::invalid(format!("fh: buffer of {} values is not {h}x{w}x3", rgb.len())));
    }
    if !(scale > 0.0) || min_size == 0 {
        return Err(Error::invalid(format!("fh: need scale > 0 and min_size >= 1, got {scale}, {min_size}")));
    }
    let edges = grid_edges(rgb, h, w);
    let mut ds = DisjointSet::new(h * w);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + scale / ds.size[ra] as f64;
        let tb = ds.internal[rb] + scale / ds.size[rb] as f64;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < min_size || ds.size[rb] < min_size) {
            ds.union(ra, rb, wt);
        }
    }
    let roots: Vec<usize> = (0..h * w).map(|i| ds.find(i)).collect();
    Ok(SegmentLabels::canonical(h, w, &roots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_image_one_segment() {
        let l = fh_segment(&vec![17.0; 10 * 10 * 3], 10, 10, 500.0, 1).unwrap();
        assert_eq!(l.num_segments(), 1);
    }

    #[test]
    fn two_tone_two_segments() {
        let (h, w) = (8, 8);
        let img: Vec<f64> = (0..h * w).flat_map(|i| [if i % w < w / 2 { 0.0 } else { 255.0 }; 3]).collect();
        let l = fh_segment(&img, h, w, 10.0, 1).unwrap();
        assert_eq!(l.num_segments(), 2);
        assert_ne!(l.labels[0], l.labels[w - 1]);
    }

    #[test]
    fn min_size_is_enforced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let img: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
        let l = fh_segment(&img, 12, 12, 50.0, 10).unwrap();
        let mut counts = vec![0; l.num_segments()];
        for &v in &l.labels {
            counts[v] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 10), "{counts:?}");
    }

    #[test]
    fn edge_count() {
        let (h, w) = (3, 4);
        // horizontal + vertical + two diagonals
        let want = h * (w - 1) + (h - 1) * w + 2 * (h - 1) * (w - 1);
        assert_eq!(grid_edges(&vec![0.0; h * w * 3], h, w).len(), want);
    }
}
