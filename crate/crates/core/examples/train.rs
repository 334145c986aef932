// A short training run on generated sprites, checkpointed halfway and
// resumed in a fresh trainer.
//
//   cargo run --release --example train -- 40

use constcl::model::ModelConfig;
use constcl::synth::{generate_dataset, DataConfig};
use constcl::train::{StepConfig, Trainer};

fn main() -> constcl::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let videos: Vec<_> = generate_dataset(&DataConfig { videos: 16, ..DataConfig::default() })?
        .into_iter()
        .map(|v| v.frames)
        .collect();

    let mut step = StepConfig::default();
    step.train.total_steps = steps;
    step.train.warmup_steps = steps / 5;
    let mut trainer = Trainer::new(ModelConfig::default(), step.clone())?;
    let half = steps / 2;
    for r in trainer.train_until(&videos, half, None)? {
        println!("step {:>3}  L_g {:.4}  L_r {:.4}  L {:.4}  lr {:.4}", r.step, r.l_g, r.l_r, r.l_total, r.lr);
    }

    let dir = std::env::temp_dir().join("constcl-example-ckpt");
    trainer.save(&dir)?;
    let mut resumed = Trainer::new(ModelConfig::default(), step)?;
    resumed.load(&dir)?;
    println!("resumed at step {} from {}", resumed.step_index(), dir.display());
    for r in resumed.train_until(&videos, steps, None)? {
        println!("step {:>3}  L_g {:.4}  L_r {:.4}  L {:.4}  lr {:.4}", r.step, r.l_g, r.l_r, r.l_total, r.lr);
    }
    Ok(())
}
