//! Serves a tabular scorer over the wire protocol and decodes through it.

use std::sync::Arc;
use std::time::Duration;

use guidecap::corpus::{make_synthetic_world, WorldSpec};
use guidecap::scorer::wire::{Backend, LoopbackServer};
use guidecap::scorer::{RemoteOptions, RemoteScorer, TabularScorer};
use guidecap::{Conditioning, DecodeParams, Decoder, GuidanceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (world, _) = make_synthetic_world(&WorldSpec::builtin(&[4, 4], 0.7)?, 0)?;
    let local = Arc::new(TabularScorer::new(world.clone())?);
    let server = LoopbackServer::spawn(Backend::new(local.clone()))?;
    let options = RemoteOptions { connections: 2, timeout: Duration::from_secs(5), vocab: Some(world.vocab.clone()) };
    let remote = RemoteScorer::handshake(&server.addr().to_string(), options)?;
    println!("server at {} says {:?}", server.addr(), remote.hello());

    let guidance = GuidanceSpec::Cfg { gamma: 2.0 };
    let params = DecodeParams::greedy(8);
    for class in world.class_ids().take(4) {
        let cond = Conditioning::for_class(class, world.classes.len());
        let a = Decoder::new(local.as_ref(), None, &guidance, params)?.greedy(&cond)?;
        let b = Decoder::new(&remote, None, &guidance, params)?.greedy(&cond)?;
        println!(
            "class {class}: local {:<10} remote {:<10} same score bits: {}",
            a.text,
            b.text,
            a.score.to_bits() == b.score.to_bits()
        );
    }
    Ok(())
}
