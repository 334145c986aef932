// Loading a run config with command-line style overrides, and what a typo
// looks like.

use constcl::config::RunConfig;

fn main() -> constcl::Result<()> {
    let doc = r#"{ "loss": { "omega": 0.05 }, "train": { "total_steps": 200, "warmup_steps": 20 } }"#;
    let config = RunConfig::from_str(doc, &["regions.method=fh".into(), "train.batch_size=8".into()])?;
    println!(
        "omega {}  steps {}  batch {}  regions {:?}",
        config.loss.omega, config.train.total_steps, config.train.batch_size, config.regions.method
    );

    for bad in ["loss.omgea=1", "train.batch_size=0", "train.batch_size=\"eight\""] {
        match RunConfig::from_str("{}", &[bad.into()]) {
            Ok(_) => println!("{bad}: accepted"),
            Err(e) => println!("{bad}: {e}"),
        }
    }
    Ok(())
}
