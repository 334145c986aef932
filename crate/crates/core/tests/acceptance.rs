//! Acceptance run: one PASS/FAIL line per criterion. Every reference value
//! comes from an oracle written here, independently of the library code.
//!
//! `ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::collections::HashMap;
use std::time::Instant;

use constcl::backbone::{ClipMeta, REGION_BRANCH};
use constcl::check::{check_objective, TOLERANCE};
use constcl::heads::{roi_align, Roi, RoiSampling, CONTEXT_HEAD};
use constcl::loss::{dense_loss, global_loss, global_loss_per_video, info_nce, region_loss, LossConfig, RegionMode};
use constcl::model::ModelConfig;
use constcl::params::{Init, ParamKind, ParamStore};
use constcl::regions::{fh_segment, gen_random_boxes, segments_to_boxes, slic_segment, RegionGenConfig, SegmentLabels};
use constcl::rng::rng_for;
use constcl::sampling::{select_slice_pair, SliceStrategy};
use constcl::synth::probes::{run_probes, EvalConfig};
use constcl::synth::{generate_dataset, DataConfig};
use constcl::train::{lr_at_step, sgd_momentum_step, OptimizerState, Schedule, SgdConfig, StepConfig, Trainer};
use constcl::{DType, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, f64, fn() -> Outcome); 10] = [
        (1, "gradient integrity", 120.0, c1_gradients),
        (2, "roialign oracle", 30.0, c2_roialign),
        (3, "loss oracles", 30.0, c3_losses),
        (4, "segmentation", 60.0, c4_segmentation),
        (5, "region constraints", 10.0, c5_regions),
        (6, "degradation equivalence", 120.0, c6_degradation),
        (7, "branch mechanics", 120.0, c7_branches),
        (8, "learning signal", 1200.0, c8_learning),
        (9, "schedule and optimizer", 10.0, c9_schedule),
        (10, "temporal sampling", 10.0, c10_sampling),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let secs = t0.elapsed().as_secs_f64();
        let pass = out.pass && secs < budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {id:>2} ({name}): {} [{secs:.1}s of {budget:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn unit_rows(rng: &mut impl Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = rand_vec(rng, c);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    Tensor::f64(rows.concat(), &[rows.len(), c]).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- 1

fn c1_gradients() -> Outcome {
    let loss = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let r = check_objective(&loss, seed).expect("gradcheck ran");
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{:.1e}", r.max_rel_error));
    }
    outcome(
        worst < TOLERANCE,
        format!("max rel error {worst:.2e} over 5 seeds [{}], full model + both heads + both losses", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 2

/// Clamped bilinear interpolant of one channel, cell centers at j + 0.5.
fn interp(map: &[f64], h: usize, w: usize, c: usize, ch: usize, y: f64, x: f64) -> f64 {
    let axis = |u: f64, n: usize| {
        let p = (u - 0.5).max(0.0).min((n - 1) as f64);
        let i = p.floor() as usize;
        let i1 = (i + 1).min(n - 1);
        (i, i1, p - i as f64)
    };
    let (y0, y1, fy) = axis(y, h);
    let (x0, x1, fx) = axis(x, w);
    let at = |yy: usize, xx: usize| map[(yy * w + xx) * c + ch];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn fine_grid_mean(map: &[f64], h: usize, w: usize, c: usize, roi: &Roi) -> Vec<f64> {
    let n = 256;
    let (dy, dx) = ((roi.y1 - roi.y0) / n as f64, (roi.x1 - roi.x0) / n as f64);
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += interp(map, h, w, c, ch, roi.y0 + (i as f64 + 0.5) * dy, roi.x0 + (j as f64 + 0.5) * dx);
                }
            }
            s / (n * n) as f64
        })
        .collect()
}

fn c2_roialign() -> Outcome {
    let mut rng = rng_for(2, "acceptance.roi", 0);
    let mut worst: f64 = 0.0;
    let mut lin: f64 = 0.0;
    for _ in 0..100 {
        let (h, w, c) = (rng.gen_range(2..8), rng.gen_range(2..8), 3);
        let f = rand_vec(&mut rng, h * w * c);
        let g = rand_vec(&mut rng, h * w * c);
        let y0 = rng.gen_range(0.0..h as f64 - 0.2);
        let x0 = rng.gen_range(0.0..w as f64 - 0.2);
        let roi = Roi {
            batch: 0,
            t: 0,
            y0,
            x0,
            y1: rng.gen_range(y0 + 0.1..=h as f64),
            x1: rng.gen_range(x0 + 0.1..=w as f64),
        };
        let pool = |v: &[f64]| {
            let t = Tensor::f64(v.to_vec(), &[1, 1, h, w, c]).unwrap();
            roi_align(&t, &[roi], RoiSampling::Exact).unwrap().to_vec()
        };
        let got = pool(&f);
        let want = fine_grid_mean(&f, h, w, c, &roi);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let pg = pool(&g);
        for ((m, x), y) in pool(&mix).iter().zip(&got).zip(&pg) {
            lin = lin.max((m - (a * x + b * y)).abs());
        }
    }
    outcome(
        worst < 1e-3 && lin < 1e-10,
        format!("max |roialign - 256x256 oracle| {worst:.2e} (< 1e-3), linearity {lin:.1e} (< 1e-10), 100 pairs"),
    )
}

// ---------------------------------------------------------------- 3

fn nce_oracle(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(a, p) / tau).exp();
    let mut den = pos;
    for n in negs {
        den += (dot(a, n) / tau).exp();
    }
    -(pos / den).ln()
}

fn argmax_row(src: &[f64], targets: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for j in 1..targets.len() {
        if dot(src, &targets[j]) > dot(src, &targets[best]) {
            best = j;
        }
    }
    best
}

fn c3_losses() -> Outcome {
    let mut rng = rng_for(3, "acceptance.loss", 0);
    let cfg = LossConfig::default();
    let c = 6;
    let mut worst: f64 = 0.0;
    let mut index_mismatch = 0;
    for _ in 0..50 {
        // info_nce
        let a = unit_rows(&mut rng, 1, c).remove(0);
        let p = unit_rows(&mut rng, 1, c).remove(0);
        let negs = unit_rows(&mut rng, 5, c);
        let tau = rng.gen_range(0.05..1.0);
        let got = info_nce(&Tensor::f64(a.clone(), &[c]).unwrap(), &Tensor::f64(p.clone(), &[c]).unwrap(), Some(&tensor(&negs)), tau)
            .unwrap()
            .item();
        worst = worst.max((got - nce_oracle(&a, &p, &negs, tau)).abs());

        // global loss: 2N anchors, positive = the other view, negatives = all
        // other views except self
        let n = rng.gen_range(2..6);
        let zg = unit_rows(&mut rng, n, c);
        let zp = unit_rows(&mut rng, n, c);
        let all: Vec<Vec<f64>> = zg.iter().chain(&zp).cloned().collect();
        let mut per_video = vec![0.0; n];
        for i in 0..2 * n {
            let partner = (i + n) % (2 * n);
            let negs: Vec<Vec<f64>> = (0..2 * n).filter(|&k| k != i && k != partner).map(|k| all[k].clone()).collect();
            per_video[i % n] += 0.5 * nce_oracle(&all[i], &all[partner], &negs, cfg.tau_global);
        }
        let got = global_loss_per_video(&tensor(&zg), &tensor(&zp), cfg.tau_global).unwrap().to_vec();
        for (g, w) in got.iter().zip(&per_video) {
            worst = worst.max((g - w).abs());
        }
        let mean = per_video.iter().sum::<f64>() / n as f64;
        worst = worst.max((global_loss(&tensor(&zg), &tensor(&zp), cfg.tau_global).unwrap().item() - mean).abs());

        // region loss: match by cosine of source to target features, then
        // InfoNCE of z against the matched target
        let (nr, mr) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let z = unit_rows(&mut rng, nr, c);
        let hs = unit_rows(&mut rng, nr, c);
        let hp = unit_rows(&mut rng, mr, c);
        let negs = unit_rows(&mut rng, 7, c);
        let (got, idx) = region_loss(&tensor(&z), &tensor(&hp), &tensor(&hs), Some(&tensor(&negs)), &cfg).unwrap();
        for i in 0..nr {
            let j = argmax_row(&hs[i], &hp);
            index_mismatch += usize::from(idx[i] != j);
            worst = worst.max((got.to_vec()[i] - nce_oracle(&z[i], &hp[j], &negs, cfg.tau_region)).abs());
        }

        // dense loss: every voxel of z paired with its most similar voxel
        let p = rng.gen_range(2..7);
        let dz = unit_rows(&mut rng, p, c);
        let dzp = unit_rows(&mut rng, p, c);
        let want: f64 = (0..p)
            .map(|i| nce_oracle(&dz[i], &dzp[argmax_row(&dz[i], &dzp)], &negs, cfg.tau_region))
            .sum();
        let got = dense_loss(&tensor(&dz), &tensor(&dzp), None, Some(&tensor(&negs)), &cfg).unwrap().item();
        worst = worst.max((got - want).abs());
    }

    // hand values
    let e = |v: Vec<f64>| Tensor::f64(v, &[2]).unwrap();
    let x = vec![1.0, 0.0];
    let ln2 = info_nce(&e(x.clone()), &e(x.clone()), Some(&tensor(&[x.clone()])), 0.1).unwrap().item();
    let ln3 = info_nce(&e(x.clone()), &e(x.clone()), Some(&tensor(&[x.clone(), x.clone()])), 0.1).unwrap().item();
    // positive cosine 1, one negative at cosine 0.5, tau 0.1: -log(e^10 / (e^10 + e^5))
    let half = vec![0.5, 0.75f64.sqrt()];
    let l5 = info_nce(&e(x.clone()), &e(x.clone()), Some(&tensor(&[half])), 0.1).unwrap().item();
    let hand = [
        (ln2 - 2f64.ln()).abs(),
        (ln3 - 3f64.ln()).abs(),
        (l5 - (-5f64).exp().ln_1p()).abs(),
    ];
    let hand_worst = hand.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 1e-10 && hand_worst < 1e-9 && index_mismatch == 0,
        format!(
            "max |loss - oracle| {worst:.1e} over 50 instances x 4 losses (< 1e-10), hand values ln2/ln3/ln(1+e^-5) off by {:.1e}/{:.1e}/{:.1e} (< 1e-9), match mismatches {index_mismatch}",
            hand[0], hand[1], hand[2]
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Plain FH with a relabel-everything union, independent of the library's
/// disjoint-set forest.
fn fh_oracle(rgb: &[f64], h: usize, w: usize, scale: f64, min_size: usize) -> Vec<usize> {
    let n = h * w;
    let mut edges = Vec::new();
    let diff = |a: usize, b: usize| (0..3).map(|c| (rgb[3 * a + c] - rgb[3 * b + c]).powi(2)).sum::<f64>().sqrt();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut push = |yy: usize, xx: usize| {
                let j = yy * w + xx;
                edges.push((diff(i, j), i.min(j), i.max(j)));
            };
            if x + 1 < w {
                push(y, x + 1);
            }
            if y + 1 < h {
                push(y + 1, x);
                if x + 1 < w {
                    push(y + 1, x + 1);
                }
                if x > 0 {
                    push(y + 1, x - 1);
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut internal = vec![0.0f64; n];
    let merge = |comp: &mut Vec<usize>, size: &mut Vec<usize>, internal: &mut Vec<f64>, a: usize, b: usize, wt: f64| {
        for c in comp.iter_mut() {
            if *c == b {
                *c = a;
            }
        }
        size[a] += size[b];
        internal[a] = wt;
    };
    for &(wt, a, b) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca == cb {
            continue;
        }
        let ta = internal[ca] + scale / size[ca] as f64;
        let tb = internal[cb] + scale / size[cb] as f64;
        if wt <= ta.min(tb) {
            merge(&mut comp, &mut size, &mut internal, ca, cb, wt);
        }
    }
    for &(wt, a, b) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca != cb && (size[ca] < min_size || size[cb] < min_size) {
            merge(&mut comp, &mut size, &mut internal, ca, cb, wt);
        }
    }
    canonical(&comp)
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn connected_partition(l: &SegmentLabels) -> bool {
    let (h, w) = (l.height, l.width);
    let n = l.num_segments();
    let mut seen = vec![false; h * w];
    let mut components = 0;
    for s in 0..h * w {
        if seen[s] {
            continue;
        }
        components += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut nb = Vec::new();
            if y > 0 {
                nb.push(i - w);
            }
            if y + 1 < h {
                nb.push(i + w);
            }
            if x > 0 {
                nb.push(i - 1);
            }
            if x + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if !seen[j] && l.labels[j] == l.labels[i] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    let all_used = (0..n).all(|k| l.labels.contains(&k));
    l.labels.len() == h * w && all_used && components == n
}

fn c4_segmentation() -> Outcome {
    let mut rng = rng_for(4, "acceptance.seg", 0);
    let mut mismatches = 0;
    let mut runs = 0;
    let mut segment_counts = Vec::new();
    for _ in 0..20 {
        let img: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
        // the stated settings, plus smaller ones where the answer is not a
        // single segment
        for (s, c) in [(500.0, 500), (1000.0, 1000), (150.0, 5), (300.0, 10), (60.0, 1)] {
            let got = fh_segment(&img, 12, 12, s, c).unwrap();
            let want = fh_oracle(&img, 12, 12, s, c);
            mismatches += usize::from(canonical(&got.labels) != want);
            runs += 1;
            if c == 5 {
                segment_counts.push(got.num_segments());
            }
        }
    }
    // two-tone and constant images, large enough for min size 1000
    let (h, w) = (48, 48);
    let two: Vec<f64> = (0..h * w).flat_map(|i| [if i % w < w / 2 { 20.0 } else { 230.0 }; 3]).collect();
    let flat = vec![128.0; h * w * 3];
    let mut tone_ok = true;
    for (s, c) in [(500.0, 500), (1000.0, 1000)] {
        tone_ok &= fh_segment(&two, h, w, s, c).unwrap().num_segments() == 2;
        tone_ok &= fh_segment(&flat, h, w, s, c).unwrap().num_segments() == 1;
    }
    // SLIC with 16 superpixels on sprite frames
    let videos = generate_dataset(&DataConfig {
        videos: 4,
        ..DataConfig::default()
    })
    .unwrap();
    let mut slic_ok = true;
    let mut slic_counts = Vec::new();
    for v in &videos {
        let s = v.frames.shape().to_vec();
        let len = s[1] * s[2] * 3;
        for t in (0..s[0]).step_by(16) {
            let rgb = &v.frames.data()[t * len..(t + 1) * len];
            let l = slic_segment(rgb, s[1], s[2], 16, 10.0, 10).unwrap();
            slic_ok &= connected_partition(&l) && l.num_segments() >= 1;
            slic_counts.push(l.num_segments());
        }
    }
    let (lo, hi) = (slic_counts.iter().min().unwrap(), slic_counts.iter().max().unwrap());
    outcome(
        mismatches == 0 && tone_ok && slic_ok,
        format!(
            "FH vs union-find oracle: {mismatches} mismatches in {runs} runs (s=c in {{500,1000}} plus 3 finer settings, finer segment counts {}..{}); two-tone/constant {}; SLIC k=16 connected partitions {} ({lo}..{hi} segments)",
            segment_counts.iter().min().unwrap(),
            segment_counts.iter().max().unwrap(),
            if tone_ok { "2/1" } else { "wrong" },
            if slic_ok { "ok" } else { "invalid" }
        ),
    )
}

// ---------------------------------------------------------------- 5

fn c5_regions() -> Outcome {
    let cfg = RegionGenConfig::default();
    let mut rng = rng_for(5, "acceptance.boxes", 0);
    let mut bad = 0;
    let (h, w) = (32usize, 48usize);
    for k in 0..10_000 {
        let frame = if k % 2 == 0 { (h, w) } else { (w, h) };
        for r in gen_random_boxes(frame, 0, &RegionGenConfig { boxes_per_frame: 1, ..cfg.clone() }, &mut rng) {
            let (bw, bh) = (r.xmax - r.xmin, r.ymax - r.ymin);
            let aspect = (bw * frame.1 as f64) / (bh * frame.0 as f64);
            let area = bw * bh;
            let ok = (0.5 - 1e-9..=2.0 + 1e-9).contains(&aspect)
                && (0.1 - 1e-9..=0.5 + 1e-9).contains(&area)
                && r.xmin >= 0.0
                && r.ymin >= 0.0
                && r.xmax <= 1.0
                && r.ymax <= 1.0;
            bad += usize::from(!ok);
        }
    }
    // a single rectangle segment of every size in a 40x40 frame
    let n = 40;
    let mut filter_errors = 0;
    for rh in 1..=n {
        for rw in 1..=n {
            let labels: Vec<usize> = (0..n * n).map(|i| usize::from(!(i / n < rh && i % n < rw))).collect();
            let labels = SegmentLabels {
                height: n,
                width: n,
                labels: canonical(&labels),
            };
            let boxes = segments_to_boxes(&labels, 0, [0.05, 0.7]);
            let (fw, fh) = (rw as f64 / n as f64, rh as f64 / n as f64);
            let in_band = |v: f64| (0.05..=0.7).contains(&v);
            let rect_kept = boxes.iter().any(|b| b.xmin == 0.0 && b.ymin == 0.0 && (b.xmax - fw).abs() < 1e-12 && (b.ymax - fh).abs() < 1e-12);
            // the complement touches the far corner, so its box spans the frame
            let expected = usize::from(in_band(fw) && in_band(fh));
            filter_errors += usize::from(rect_kept != (expected == 1) || boxes.len() != expected);
        }
    }
    outcome(
        bad == 0 && filter_errors == 0,
        format!("{bad} of 10^4 boxes outside aspect [0.5,2] / area [0.1,0.5]; filter band errors {filter_errors} of {} segment sizes", n * n),
    )
}

// ---------------------------------------------------------------- 6, 7

fn small_videos(n: usize, seed: u64) -> Vec<Tensor> {
    generate_dataset(&DataConfig {
        videos: n,
        seed,
        ..DataConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(|v| v.frames)
    .collect()
}

fn c6_degradation() -> Outcome {
    let videos = small_videos(8, 6);
    let run = |step: StepConfig| {
        let mut t = Trainer::new(ModelConfig::default(), step).unwrap();
        t.train_until(&videos, 20, None).unwrap()
    };
    let mut no_context = StepConfig::default();
    no_context.sampling.context_length = 0;
    no_context.loss.mode = RegionMode::Contextualized;
    let mut vanilla = StepConfig::default();
    vanilla.loss.mode = RegionMode::VanillaRegion;
    vanilla.sampling.context_length = 0;
    let a = run(no_context.clone());
    let b = run(vanilla);
    let routed = no_context.loss.effective_mode(0) == RegionMode::VanillaRegion;
    let identical = a == b && a.iter().all(|r| r.l_total.is_finite());
    outcome(
        routed && identical,
        format!(
            "context_length=0 routes to {:?}; 20 LossReports {} (last L_total {:.6})",
            no_context.loss.effective_mode(0),
            if identical { "bit-identical" } else { "differ" },
            a.last().map_or(f64::NAN, |r| r.l_total)
        ),
    )
}

fn c7_branches() -> Outcome {
    let videos = small_videos(8, 7);
    let mut step = StepConfig::default();
    step.loss.omega = 0.0;
    let mut t = Trainer::new(ModelConfig::default(), step).unwrap();
    let snapshot = |t: &Trainer| -> Vec<(String, Vec<u64>)> {
        t.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(REGION_BRANCH) || p.name.starts_with(CONTEXT_HEAD))
            .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let trunk = |t: &Trainer| -> Vec<u64> {
        t.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("backbone.res4"))
            .flat_map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let before = snapshot(&t);
    let trunk_before = trunk(&t);
    t.train_until(&videos, 50, None).unwrap();
    let frozen = snapshot(&t) == before && !before.is_empty();
    let trunk_moved = trunk(&t) != trunk_before;

    // omega = 0.01: each loss alone reaches the C4 parameters
    let mut step = StepConfig::default();
    step.loss.omega = 0.01;
    let t = Trainer::new(ModelConfig::default(), step).unwrap();
    let batch = t.sample_batch(&videos, 0).unwrap();
    let losses = t.losses(&batch).unwrap();
    let norm_of = |g: &constcl::GradMap| -> f64 {
        t.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("backbone.res4") && p.kind != ParamKind::Buffer)
            .map(|(_, p)| g.get(&p.tensor).map_or(0.0, |x| x.data().iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
            .sqrt()
    };
    let g_global = norm_of(&losses.global.mean().backward().unwrap());
    let region = losses.region.as_ref().expect("region term active");
    let g_region = norm_of(&region.mean().scale(0.01).backward().unwrap());
    outcome(
        frozen && trunk_moved && g_global > 0.0 && g_region > 0.0,
        format!(
            "omega=0: {} C5_r/context tensors bit-unchanged over 50 steps: {frozen} (trunk moved: {trunk_moved}); omega=0.01: |dL_g/dC4| {g_global:.3e}, |omega dL_r/dC4| {g_region:.3e}",
            before.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_learning() -> Outcome {
    let mut passes = [0usize; 3];
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let train = small_videos(64, seed);
        let held_out = generate_dataset(&DataConfig {
            seed: seed + 1000,
            ..DataConfig::default()
        })
        .unwrap();
        let mut step = StepConfig::default();
        step.train.seed = seed;
        let mut t = Trainer::new(ModelConfig::default(), step.clone()).unwrap();
        let eval = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        let objective_before = t.probe_objective(&train, 16).unwrap();
        let base = run_probes(&t.model, &t.store, &held_out, &step.sampling, &eval).unwrap();
        let reports = t.train_until(&train, step.train.total_steps, None).unwrap();
        let objective_after = t.probe_objective(&train, 16).unwrap();
        let after = run_probes(&t.model, &t.store, &held_out, &step.sampling, &eval).unwrap();
        let tail: Vec<f64> = reports.iter().rev().take(20).map(|r| r.l_total).collect();
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;

        let a = objective_after < 0.5 * objective_before;
        let b = after.correspondence >= base.correspondence + 0.15;
        let c = after.linear_probe >= 0.25 + 0.15;
        for (k, ok) in [a, b, c].into_iter().enumerate() {
            passes[k] += usize::from(ok);
        }
        lines.push(format!(
            "seed {seed}: L_total {objective_before:.3}->{objective_after:.3} (fixed batches; per-step {:.3}->last-20 mean {tail_mean:.3}) {}, corr {:.3} vs random {:.3} {}, probe {:.3} {}, track IoU {:.3}->{:.3}",
            reports[0].l_total,
            if a { "ok" } else { "no" },
            after.correspondence,
            base.correspondence,
            if b { "ok" } else { "no" },
            after.linear_probe,
            if c { "ok" } else { "no" },
            base.track_iou,
            after.track_iou
        ));
    }
    let pass = passes.iter().all(|&p| p >= 2);
    outcome(
        pass,
        format!(
            "majority passes (a) {}/3 (b) {}/3 (c) {}/3\n    {}",
            passes[0],
            passes[1],
            passes[2],
            lines.join("\n    ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    for (peak, warm, total) in [(40.96, 10, 110), (0.2, 50, 500), (1.0, 0, 100)] {
        let s = Schedule {
            peak_lr: peak,
            warmup_steps: warm,
            total_steps: total,
        };
        let mid = warm + (total - warm) / 2;
        let checks = [(0, if warm == 0 { peak } else { 0.0 }), (warm, peak), (mid, peak / 2.0), (total, 0.0)];
        for (step, want) in checks {
            worst = worst.max((lr_at_step(step, &s).unwrap() - want).abs());
        }
    }

    // two SGD steps on w = 1 with a constant gradient of 1
    let mut store = ParamStore::new(DType::F64, 0);
    let id = store.add("w", ParamKind::Kernel, &[1], Init::Ones).unwrap();
    let mut state = OptimizerState::new(&store);
    let cfg = SgdConfig {
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let (mut w, mut v) = (1.0f64, 0.0f64);
    let mut sgd_exact = true;
    for _ in 0..2 {
        let grads = store.get(id).sum().backward().unwrap();
        sgd_momentum_step(&mut store, &grads, &mut state, 0.1, &cfg).unwrap();
        v = 0.9 * v + 1.0;
        w -= 0.1 * v;
        sgd_exact &= store.get(id).data()[0] == w;
    }
    sgd_exact &= (w - 0.71).abs() < 1e-15 && (v - 1.9).abs() < 1e-15;

    // split run: 3 steps, checkpoint, reload into a fresh trainer, 3 more
    let loss = LossConfig::default();
    let mut step = constcl::check::toy_step_config(&loss, 9);
    step.train.dtype = DType::F32;
    let model = constcl::check::toy_model_config();
    let videos: Vec<Tensor> = {
        let mut rng = rng_for(9, "acceptance.videos", 0);
        (0..4)
            .map(|_| Tensor::f64((0..12 * 12 * 12 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(), &[12, 12, 12, 3]).unwrap())
            .collect()
    };
    let mut whole = Trainer::new(model.clone(), step.clone()).unwrap();
    let whole_reports = whole.train_until(&videos, 6, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(model.clone(), step.clone()).unwrap();
    let mut split_reports = first.train_until(&videos, 3, None).unwrap();
    first.save(dir.path()).unwrap();
    let mut second = Trainer::new(model, step).unwrap();
    second.load(dir.path()).unwrap();
    split_reports.extend(second.train_until(&videos, 6, None).unwrap());
    let resumed = split_reports == whole_reports && second.store.checksum() == whole.store.checksum();
    outcome(
        worst < 1e-12 && sgd_exact && resumed,
        format!(
            "lr endpoints/midpoints max error {worst:.1e}; two-step SGD w=0.71 v=1.9 {}; split 3+3 run vs 6 steps {}",
            if sgd_exact { "exact" } else { "mismatch" },
            if resumed { "bit-exact" } else { "differs" }
        ),
    )
}

// ---------------------------------------------------------------- 10

fn c10_sampling() -> Outcome {
    let mut rng = rng_for(10, "acceptance.slices", 0);
    let mut cases = 0;
    let mut errors = 0;
    for stride in 1..=4 {
        for la in 1..=8 {
            for lb in 1..=8 {
                for sa in 0..24 {
                    for sb in 0..24 {
                        let a = ClipMeta { start: sa, stride, len: la };
                        let b = ClipMeta { start: sb, stride, len: lb };
                        cases += 1;
                        if select_slice_pair(SliceStrategy::Center, &a, &b, &mut rng) != (la / 2, lb / 2) {
                            errors += 1;
                        }
                        let got = select_slice_pair(SliceStrategy::Nearest, &a, &b, &mut rng);
                        if got != nearest_oracle(&a, &b) {
                            errors += 1;
                        }
                    }
                }
            }
        }
    }
    // the disjoint example: clip A frames [0, 32), clip B frames [64, 96)
    let a = ClipMeta { start: 0, stride: 8, len: 4 };
    let b = ClipMeta { start: 64, stride: 8, len: 4 };
    let facing = select_slice_pair(SliceStrategy::Nearest, &a, &b, &mut rng) == (3, 0);
    outcome(
        errors == 0 && facing,
        format!("{errors} disagreements with the exhaustive scan over {cases} clip pairs (T' <= 8, strides 1-4); disjoint clips -> facing ends: {facing}"),
    )
}

/// Scans every feature-frame pair: smallest mapped video-frame distance,
/// then pairs with both frames in the clips' shared range, then the
/// earliest; for disjoint clips this lands on the facing ends.
fn nearest_oracle(a: &ClipMeta, b: &ClipMeta) -> (usize, usize) {
    let frame = |m: &ClipMeta, i: usize| m.start + i * m.stride;
    let lo = a.start.max(b.start);
    let hi = (a.start + a.len * a.stride).min(b.start + b.len * b.stride);
    let mut pairs: Vec<(usize, bool, usize, usize)> = Vec::new();
    for i in 0..a.len {
        for j in 0..b.len {
            let (fa, fb) = (frame(a, i), frame(b, j));
            let inside = lo <= fa && fa < hi && lo <= fb && fb < hi;
            pairs.push((fa.abs_diff(fb), !inside, i, j));
        }
    }
    let best = pairs.iter().min().unwrap();
    if hi <= lo {
        // disjoint: the facing ends must be the minimizer
        let facing = if a.start < b.start { (a.len - 1, 0) } else { (0, b.len - 1) };
        assert_eq!((best.2, best.3), facing, "disjoint clips {a:?} {b:?}");
    }
    (best.2, best.3)
}
