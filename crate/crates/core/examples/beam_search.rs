//! Beam search returns ranked hypotheses; width 1 is greedy.

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::scorer::TabularScorer;
use guidecap::{Conditioning, DecodeParams, Decoder, GuidanceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (world, _) = make_synthetic_world(&WorldSpec::builtin(&[4, 2], 0.6)?, 0)?;
    let scorer = TabularScorer::new(world.clone())?;
    let guidance = GuidanceSpec::Cfg { gamma: 1.5 };
    let cond = Conditioning::for_class(1, world.classes.len());
    let decoder = Decoder::new(&scorer, None, &guidance, DecodeParams::beam(8, 4))?;
    for (rank, h) in decoder.beam(&cond, 4)?.iter().enumerate() {
        println!("#{rank} {:<12} {:.4}", h.text, h.score);
    }
    let greedy = Decoder::new(&scorer, None, &guidance, DecodeParams::greedy(8))?.greedy(&cond)?;
    let narrow = Decoder::new(&scorer, None, &guidance, DecodeParams::beam(8, 1))?.decode(&cond)?;
    println!("greedy {:?} == width-1 beam {:?}: {}", greedy.text, narrow.text, greedy.tokens == narrow.tokens);
    Ok(())
}
