//! Greedy decoding of one class at increasing guidance strength.

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::scorer::TabularScorer;
use guidecap::{Conditioning, DecodeParams, Decoder, GuidanceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (world, _) = make_synthetic_world(&WorldSpec::builtin(&[16, 8, 4, 4], 0.7)?, 0)?;
    let scorer = TabularScorer::new(world.clone())?;
    let cond = Conditioning::for_class(0, world.classes.len());
    for gamma in [1.0, 1.5, 2.0, 3.0] {
        let guidance = GuidanceSpec::Cfg { gamma };
        let decoder = Decoder::new(&scorer, None, &guidance, DecodeParams::greedy(8))?;
        let out = decoder.greedy(&cond)?;
        println!("gamma {gamma:<4} -> {:<12} score {:.3}", out.text, out.score);
    }
    Ok(())
}
