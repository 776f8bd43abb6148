//! Trains a conditional n-gram scorer with conditioning dropout and decodes
//! with classifier-free guidance on top of it.

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::scorer::{train_ngram, NGramConfig};
use guidecap::{Conditioning, DecodeParams, Decoder, GuidanceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = WorldSpec { refs_per_item: 40, ..WorldSpec::builtin(&[4, 2], 0.7)? };
    let (world, corpus) = make_synthetic_world(&spec, 0)?;
    for mask_prob in [0.1, 0.5] {
        let config = NGramConfig { order: 3, mask_prob, ..NGramConfig::default() };
        let model = train_ngram(&corpus, &world.vocab, &config)?;
        println!("mask probability {mask_prob}");
        for gamma in [1.0, 3.0] {
            let guidance = GuidanceSpec::Cfg { gamma };
            let decoder = Decoder::new(&model, None, &guidance, DecodeParams::greedy(8))?;
            let texts: Vec<String> = world
                .class_ids()
                .map(|c| decoder.greedy(&Conditioning::for_class(c, world.classes.len())).map(|r| r.text))
                .collect::<Result<_, _>>()?;
            println!("  gamma {gamma}: {}", texts.join(" | "));
        }
    }
    Ok(())
}
