// ROIAlign on a tiny feature map, then the vanilla and contextualized region
// heads on the pooled features.

use constcl::heads::{roi_align, ContextHead, ContextSet, HeadsConfig, Roi, RoiSampling, VanillaRegionHead};
use constcl::params::ParamStore;
use constcl::{DType, Tensor};

fn main() -> constcl::Result<()> {
    // one frame, 4x4 cells, 2 channels: channel 0 is the column index, channel 1 the row
    let (h, w) = (4, 4);
    let data: Vec<f64> = (0..h * w).flat_map(|i| [(i % w) as f64, (i / w) as f64]).collect();
    let map = Tensor::f64(data, &[1, 1, h, w, 2])?;
    let rois = [
        Roi { batch: 0, t: 0, y0: 0.0, x0: 0.0, y1: 4.0, x1: 4.0 },
        Roi { batch: 0, t: 0, y0: 1.0, x0: 2.0, y1: 2.0, x1: 3.0 },
        Roi { batch: 0, t: 0, y0: 0.5, x0: 0.5, y1: 1.5, x1: 3.5 },
    ];
    for sampling in [RoiSampling::Exact, RoiSampling::Grid { bins: 1, samples: 2 }] {
        let pooled = roi_align(&map, &rois, sampling)?;
        println!("{sampling:?}: {:?}", pooled.to_vec());
    }

    let channels = 8;
    let config = HeadsConfig::default();
    let mut store = ParamStore::new(DType::F64, 0);
    let vanilla = VanillaRegionHead::new(&mut store, channels, &config)?;
    let context = ContextHead::new(&mut store, channels, &config)?;

    let h = Tensor::f64((0..3 * channels).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, channels])?;
    let tokens = Tensor::f64((0..5 * channels).map(|i| (i as f64 * 0.11).cos()).collect(), &[5, channels])?;
    let positions: Vec<[f64; 3]> = (0..5).map(|k| [k as f64 / 4.0, 0.5, 0.5]).collect();
    let ctx = ContextSet::new(tokens, positions)?;
    let queries = [[0.5, 0.2, 0.2], [0.5, 0.5, 0.5], [0.5, 0.8, 0.8]];

    let zv = vanilla.forward(&store, &h)?;
    let zc = context.forward(&store, &h, &queries, &ctx)?;
    println!("vanilla {:?}, with 5 context tokens {:?}", zv.shape(), zc.shape());
    // an empty context is refused: that configuration belongs to the vanilla head
    if let Err(e) = context.forward(&store, &h, &queries, &ContextSet::empty()) {
        println!("empty context: {e}");
    }
    Ok(())
}
