//! Language-model guidance: the world marginal stands in for the language
//! model, and alpha = beta reproduces classifier-free guidance exactly.

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::scorer::TabularScorer;
use guidecap::{Conditioning, DecodeParams, Decoder, GuidanceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (world, _) = make_synthetic_world(&WorldSpec::builtin(&[8, 4], 0.7)?, 0)?;
    let scorer = TabularScorer::new(world.clone())?;
    let cond = Conditioning::for_class(2, world.classes.len());
    let params = DecodeParams::greedy(8);
    for (alpha, beta) in [(1.0, 0.0), (2.0, 1.0), (2.0, 2.0), (3.0, 1.5)] {
        let guidance = GuidanceSpec::Lm { alpha, beta, prompt: Vec::new() };
        let out = Decoder::new(&scorer, Some(&scorer), &guidance, params)?.greedy(&cond)?;
        println!("lm alpha {alpha} beta {beta} -> {}", out.text);
    }
    let cfg = Decoder::new(&scorer, None, &GuidanceSpec::Cfg { gamma: 2.0 }, params)?.greedy(&cond)?;
    println!("cfg gamma 2        -> {}", cfg.text);
    Ok(())
}
