//! Scores a handful of captions with every metric and prints a CSV report.

use guidecap::metrics::{evaluate, synthetic_embed, write_csv, EvalInput, SyntheticEmbedder};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let candidates: Vec<String> =
        ["a black dog runs across the green field", "a red car on a street", "a cat on a sofa"]
            .map(String::from)
            .to_vec();
    let references: Vec<Vec<String>> = vec![
        vec!["a black dog running across a field".into(), "a dog runs on the grass".into()],
        vec!["a red car parked on the street".into()],
        vec!["a grey cat naps on a couch".into(), "a cat sleeping on the sofa".into()],
    ];
    let images: Vec<_> = references.iter().map(|r| synthetic_embed(&r[0])).collect();
    let phrases = vec!["dog".to_string(), "car".into(), "cat".into()];
    let report = evaluate(&EvalInput {
        label: "demo",
        candidates: &candidates,
        references: &references,
        images: &images,
        embedder: &SyntheticEmbedder,
        ks: &[1],
        phrases: Some(&phrases),
        truth: Some(&phrases),
    })?;
    write_csv(std::io::stdout(), &[report])?;
    Ok(())
}
