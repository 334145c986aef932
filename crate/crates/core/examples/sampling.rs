// Two augmented views of one video and the feature frames the region loss
// would pair up.

use constcl::backbone::BackboneConfig;
use constcl::rng::rng_for;
use constcl::sampling::{sample_view_pair, select_slice_pair, SamplingConfig, SliceStrategy};
use constcl::synth::{generate_sprite_video, SpriteWorld};

fn main() -> constcl::Result<()> {
    let video = generate_sprite_video(&SpriteWorld::default(), 1)?;
    let config = SamplingConfig::default();
    let mut rng = rng_for(1, "example.views", 0);

    for _ in 0..3 {
        let pair = sample_view_pair(&video.frames, &config, &mut rng)?;
        let (a, b) = (pair.x.meta(), pair.x_prime.meta());
        println!(
            "x: frames {:?} flip {}   x': frames {:?} flip {}",
            a.span(),
            pair.x.augmentation.flip,
            b.span(),
            pair.x_prime.augmentation.flip
        );
        let f = BackboneConfig::default().total_stride()[0];
        let (fa, fb) = (a.downsample(f, a.len / f), b.downsample(f, b.len / f));
        for strategy in [SliceStrategy::Center, SliceStrategy::Nearest] {
            let (i, j) = select_slice_pair(strategy, &fa, &fb, &mut rng);
            println!("  {strategy:?}: feature frames ({i}, {j}) = video frames ({}, {})", fa.video_frame(i), fb.video_frame(j));
        }
    }
    Ok(())
}
