//! Sweeps guidance strength on the breed world: retrieval improves while
//! reference similarity drops.

use guidecap::cli::sweep::{run_sweep, SweepConfig};
use guidecap::corpus::{make_synthetic_world, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("guidecap-sweep-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let (world, corpus) = make_synthetic_world(&WorldSpec::builtin(&[16, 8, 4, 4], 0.7)?, 2)?;
    world.save(&dir.join("world.json"))?;
    corpus.save(&dir.join("corpus.jsonl"))?;

    let config = SweepConfig {
        corpus: dir.join("corpus.jsonl"),
        scorer: format!("tabular:{}", dir.join("world.json").display()),
        world: Some(dir.join("world.json")),
        gammas: vec![1.0, 1.2, 1.5, 2.0, 3.0],
        ..SweepConfig::default()
    };
    let out = run_sweep(&config)?;
    print!("{}", out.to_csv()?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
