// Builds the default two-branch backbone and runs one clip through it.

use constcl::backbone::ClipMeta;
use constcl::model::{Model, ModelConfig};
use constcl::rng::rng_for;
use constcl::{DType, Tensor};
use rand::Rng;

fn main() -> constcl::Result<()> {
    let config = ModelConfig::default();
    let (model, store) = Model::build(config.clone(), DType::F32, 0)?;
    println!("{} parameter tensors, checksum {:016x}", store.iter().count(), store.checksum());
    println!("total stride {:?}, embedding channels {}", config.backbone.total_stride(), model.channels());

    let mut rng = rng_for(0, "example.clip", 0);
    let (t, s) = (16, 32);
    let clip = Tensor::f64((0..t * s * s * 3).map(|_| rng.gen::<f64>()).collect(), &[t, s, s, 3])?;
    let meta = [ClipMeta { start: 0, stride: 2, len: t }];

    let mut stats = Vec::new();
    let ends = model.encode(&store, &[&clip], &meta, false, &mut stats)?;
    for (name, map) in [("C4", &ends.c4), ("C5 global", &ends.c5_g), ("C5 region", &ends.c5_r)] {
        println!("{name:<10} {:?}  first frame maps to video frame {}", map.values.shape(), map.meta[0].video_frame(0));
    }
    let z = model.global_embedding(&store, &ends.c5_g.values, false, &mut stats)?;
    let norm: f64 = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("global embedding {:?}, norm {norm:.6}", z.shape());
    Ok(())
}
