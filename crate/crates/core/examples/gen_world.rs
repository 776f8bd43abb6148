//! Builds the builtin breed world and prints its shape.

use guidecap::corpus::{make_synthetic_world, world_consistency_check, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = WorldSpec::builtin(&[4, 2, 2], 0.7)?;
    let (world, corpus) = make_synthetic_world(&spec, 0)?;
    println!(
        "{} classes, {} tokens, {} captions in the support",
        world.classes.len(),
        world.vocab.size(),
        world.support_size()
    );
    for class in world.class_ids().take(3) {
        for s in &world.sequences[&class] {
            println!("  class {class}: {:<12} p={:.2}", world.vocab.decode(&s.tokens), s.p);
        }
    }
    let item = &corpus.items[0];
    println!("first item {} references {:?}", item.id, item.references);
    println!("consistent: {}", world_consistency_check(&world).is_ok());
    Ok(())
}
