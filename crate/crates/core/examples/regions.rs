// Region proposals for one synthetic frame with each of the three methods.

use constcl::regions::{regions_for_frame, FhConfig, RegionGenConfig, RegionMethod};
use constcl::synth::{generate_sprite_video, SpriteWorld};

fn main() -> constcl::Result<()> {
    let video = generate_sprite_video(&SpriteWorld::default(), 3)?;
    println!("video {:?}, label {}", video.frames.shape(), video.label);
    for gt in &video.boxes[0] {
        let r = gt.region;
        println!("  sprite {} at ({:.2},{:.2})-({:.2},{:.2})", gt.id, r.xmin, r.ymin, r.xmax, r.ymax);
    }

    // FH at scale 500 / min size 500 merges a 32x32 frame into one or two
    // segments that the size filter then drops; the last entry is a finer setting
    let fine = FhConfig { scale: 100.0, min_size: 20 };
    let runs = [
        (RegionMethod::Random, FhConfig::default()),
        (RegionMethod::Slic, FhConfig::default()),
        (RegionMethod::Fh, FhConfig::default()),
        (RegionMethod::Fh, fine),
    ];
    for (method, fh) in runs {
        let config = RegionGenConfig {
            method,
            fh: fh.clone(),
            ..RegionGenConfig::default()
        };
        let boxes = regions_for_frame(&video.frames, 0, &config)?;
        println!("{method:?} {fh:?}: {} boxes", boxes.len());
        for r in boxes.iter().take(4) {
            println!("  ({:.2},{:.2})-({:.2},{:.2}) area {:.3}", r.xmin, r.ymin, r.xmax, r.ymax, r.area());
        }
    }
    Ok(())
}
