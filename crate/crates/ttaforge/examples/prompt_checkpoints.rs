//! Prompt checkpoints and detector weight export in the shared binary
//! container format, enabling one stored prompt set per target domain.
//!
//! ```bash
//! cargo run --example prompt_checkpoints
//! ```

use ttaforge::backend::{ToyDetector, ToyDetectorConfig};
use ttaforge::container::Container;
use ttaforge::data;
use ttaforge::prompts::PromptSet;

fn main() -> ttaforge::Result<()> {
    let detector = ToyDetector::new(
        &ToyDetectorConfig {
            seed: 7,
            class_colors: Some(data::SOURCE_COLORS.to_vec()),
            ..Default::default()
        },
        &data::shape_categories(),
    )?;

    let dir = std::env::temp_dir().join("ttaforge_checkpoints");
    std::fs::create_dir_all(&dir).unwrap();

    // frozen detector weights: tagged f32 sections behind an 18-byte header
    let weights_path = dir.join("detector.bin");
    detector.save_weights(&weights_path)?;
    let container = Container::load(&weights_path)?;
    println!("detector container (seed {}):", container.seed);
    for s in &container.sections {
        println!(
            "  {:<5} {:>4} x {}",
            s.tag,
            s.matrix.rows(),
            s.matrix.cols()
        );
    }

    // prompt checkpoint: PT + one PI section per layer
    let mut prompts = PromptSet::with_prompt_count(&detector, 10);
    prompts.text.set(0, 0, 0.125);
    prompts.visual[1].set(3, 7, -0.5);
    let prompt_path = dir.join("prompts_gauss3.bin");
    prompts.save(&prompt_path, 7)?;
    let (reloaded, seed) = PromptSet::load(&prompt_path)?;
    println!(
        "\nprompt checkpoint: seed {seed}, text {:?}, {} visual tensors, round-trip equal: {}",
        reloaded.text.shape(),
        reloaded.visual.len(),
        reloaded == prompts
    );
    println!("files under {}", dir.display());
    Ok(())
}
