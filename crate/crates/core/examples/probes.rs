// Generates a small sprite dataset, writes it to disk, and scores an
// untrained model with the three probes.

use constcl::model::{Model, ModelConfig};
use constcl::sampling::SamplingConfig;
use constcl::synth::probes::{run_probes, EvalConfig};
use constcl::synth::{generate_dataset, read_dataset, write_dataset, DataConfig};
use constcl::DType;

fn main() -> constcl::Result<()> {
    let data = DataConfig { videos: 16, seed: 7, ..DataConfig::default() };
    let videos = generate_dataset(&data)?;
    let dir = std::env::temp_dir().join("constcl-example-data");
    write_dataset(&dir, &data, &videos)?;
    let videos = read_dataset(&dir)?;
    let mut per_class = [0usize; constcl::synth::NUM_CLASSES];
    for v in &videos {
        per_class[v.label] += 1;
    }
    println!("{} videos in {}, per class {per_class:?}", videos.len(), dir.display());

    let (model, store) = Model::build(ModelConfig::default(), DType::F32, 0)?;
    let report = run_probes(&model, &store, &videos, &SamplingConfig::default(), &EvalConfig::default())?;
    println!(
        "random init: correspondence {:.3}, linear probe {:.3} (chance 0.25), tracking IoU {:.3}",
        report.correspondence, report.linear_probe, report.track_iou
    );
    Ok(())
}
