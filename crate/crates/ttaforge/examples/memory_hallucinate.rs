//! Memory hallucination: paste stored instances onto an image that produced
//! no pseudo-labels, and dump the overlays for inspection.
//!
//! ```bash
//! cargo run --example memory_hallucinate
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use ttaforge::backend::{ToyEmbedder, ToyEmbedderConfig};
use ttaforge::core::Detection;
use ttaforge::data::{self, SyntheticSpec, TargetShift};
use ttaforge::hallucinate::{dump_hallucination, hallucinate, HallucinationConfig};
use ttaforge::memory::InstanceMemory;

fn main() -> ttaforge::Result<()> {
    let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
    let spec = SyntheticSpec::new(6, 64, 33, TargetShift::None)?;

    let mut memory = InstanceMemory::new(3, 20);
    for i in 0..6 {
        let g = data::generate_image(&spec, i);
        let labels: Vec<Detection> = g
            .objects
            .iter()
            .map(|(b, cat)| {
                let mut scores = vec![0.05; 3];
                scores[*cat] = 0.9;
                Detection::from_scores(*b, scores).unwrap()
            })
            .collect();
        memory.harvest(&g.image, &labels, &embedder, 0.3, i)?;
    }
    println!("memory holds {} instances", memory.total_len());

    let config = HallucinationConfig::default();
    let negative = ttaforge::core::Image::filled(64, 64, 0.3)?;
    let dir = std::env::temp_dir().join("ttaforge_halluc_dump");
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for i in 0..4 {
        let (image, targets) = hallucinate(&negative, &memory, &config, &mut rng)?;
        println!(
            "hallucination {i}: {} instances, categories {:?}, weights {:?}",
            targets.len(),
            targets.iter().map(|t| t.category).collect::<Vec<_>>(),
            targets
                .iter()
                .map(|t| (t.weight * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
        dump_hallucination(&dir, i, &image, &targets)?;
    }
    println!("overlays written to {}", dir.display());
    Ok(())
}
