//! Builds a few-shot prompt from the bundled descriptive captions.

use guidecap::cli::prompts::{build_prompts, parse_captions, PromptOptions, DEFAULT_BATCH_ITEMS, DESCRIPTIVE};
use guidecap::Vocabulary;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let vocab = Vocabulary::demo();
    let captions = parse_captions(DESCRIPTIVE);
    let options = PromptOptions { n: 3, seed: 7, in_order: false, items: None, batch_items: DEFAULT_BATCH_ITEMS };
    let file = build_prompts(&captions, &vocab, &options)?;
    let prompt = file.prompt_for(0);
    println!("{} tokens", prompt.len());
    println!("{}", vocab.decode(prompt).replace("<nl>", "\n"));
    Ok(())
}
