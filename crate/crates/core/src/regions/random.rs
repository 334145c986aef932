use rand::Rng;

use super::{Region, RegionGenConfig, SizeMode};

/// `boxes_per_frame` boxes with pixel aspect ratio (width / height) and size
/// drawn from the configured ranges, placed uniformly inside the frame.
/// Candidates that do not fit the frame are rejected and redrawn.
pub fn gen_random_boxes(frame: (usize, usize), t: usize, config: &RegionGenConfig, rng: &mut impl Rng) -> Vec<Region> {
    let (h, w) = (frame.0 as f64, frame.1 as f64);
    let (la, lb) = (config.aspect[0].ln(), config.aspect[1].ln());
    let mut out = Vec::with_capacity(config.boxes_per_frame);
    while out.len() < config.boxes_per_frame {
        let s = sample(rng, config.size[0], config.size[1]);
        let area = match config.size_mode {
            SizeMode::Area => s,
            SizeMode::Side => s * s,
        };
        let aspect = sample(rng, la, lb).exp();
        // fractions of the frame extents
        let bw = (area * aspect * h / w).sqrt();
        let bh = area / bw;
        if bw > 1.0 || bh > 1.0 {
            continue;
        }
        let x0 = sample(rng, 0.0, 1.0 - bw);
        let y0 = sample(rng, 0.0, 1.0 - bh);
        out.push(Region {
            t,
            xmin: x0,
            ymin: y0,
            xmax: (x0 + bw).min(1.0),
            ymax: (y0 + bh).min(1.0),
        });
    }
    out
}

fn sample(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn default_count_and_determinism() {
        let cfg = RegionGenConfig::default();
        let a = gen_random_boxes((32, 32), 0, &cfg, &mut rng_for(1, "t", 0));
        let b = gen_random_boxes((32, 32), 0, &cfg, &mut rng_for(1, "t", 0));
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn constraints_hold_on_non_square_frames() {
        let cfg = RegionGenConfig::default();
        let mut rng = rng_for(2, "t", 0);
        let (h, w) = (24.0, 40.0);
        for _ in 0..500 {
            for r in gen_random_boxes((24, 40), 0, &cfg, &mut rng) {
                r.validate().unwrap();
                let aspect = r.width() * w / (r.height() * h);
                assert!((0.5 - 1e-9..=2.0 + 1e-9).contains(&aspect), "{aspect}");
                assert!((0.1 - 1e-9..=0.5 + 1e-9).contains(&r.area()));
            }
        }
    }
}
