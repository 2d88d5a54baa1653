// Running a JSON-configured experiment with repeats, then summarizing the
// traces by median and quantiles, as the command line tool does.

use std::path::Path;

use supac::experiment::{aggregate, run_experiment, ExperimentConfig, DEFAULT_QUANTILES};

pub fn run_example() -> supac::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/supac_quadratic.json");
    let cfg = ExperimentConfig::load(&path)?;
    let dir = std::env::temp_dir().join(format!("supac_example_{}", std::process::id()));
    let files = run_experiment(&cfg, &dir)?;
    println!("wrote {files:?} and manifest.json to {}", dir.display());

    let summary = dir.join("summary.csv");
    aggregate(&dir, &DEFAULT_QUANTILES, &summary)?;
    print!("{}", std::fs::read_to_string(&summary)?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
