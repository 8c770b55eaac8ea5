//! Instance memory mechanics: score-gated harvesting, replace-lowest
//! insertion, prototypes, sampling, and the on-disk dump.
//!
//! ```bash
//! cargo run --example instance_memory
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use ttaforge::backend::{ToyEmbedder, ToyEmbedderConfig};
use ttaforge::core::{BoundingBox, Detection};
use ttaforge::data::{self, SyntheticSpec, TargetShift};
use ttaforge::memory::InstanceMemory;

fn main() -> ttaforge::Result<()> {
    let embedder = ToyEmbedder::new(&ToyEmbedderConfig::default());
    let mut memory = InstanceMemory::new(3, 5);

    let spec = SyntheticSpec::new(8, 64, 3, TargetShift::None)?;
    for i in 0..8 {
        let generated = data::generate_image(&spec, i);
        // use the generator's own objects as stand-in pseudo-labels with a
        // synthetic confidence ramp
        let labels: Vec<Detection> = generated
            .objects
            .iter()
            .enumerate()
            .map(|(j, (b, cat))| {
                let mut scores = vec![0.05; 3];
                scores[*cat] = 0.4 + 0.07 * (i as f64) + 0.01 * j as f64;
                Detection::from_scores(*b, scores).unwrap()
            })
            .collect();
        let inserted = memory.harvest(&generated.image, &labels, &embedder, 0.3, i)?;
        println!(
            "image {i}: {} labels, {} inserted, occupancy {:?}, min scores {:?}",
            labels.len(),
            inserted.len(),
            memory.occupancy(),
            (0..3)
                .map(|c| memory
                    .queue(c)
                    .min_score()
                    .map(|s| (s * 100.0).round() / 100.0))
                .collect::<Vec<_>>()
        );
    }

    println!("\nprototypes (first 4 dims):");
    for (c, v) in memory.prototypes() {
        println!(
            "  {}: [{:.3}, {:.3}, {:.3}, {:.3}, ...]",
            data::shape_categories().name(c),
            v[0],
            v[1],
            v[2],
            v[3]
        );
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let sample = memory.sample(4, &mut rng);
    println!("\nsampled {} triplets with replacement:", sample.len());
    for t in &sample {
        println!(
            "  category {} score {:.2} crop {}x{}",
            t.category, t.score, t.crop.width, t.crop.height
        );
    }

    let dir = std::env::temp_dir().join("ttaforge_memory_dump");
    memory.dump(&dir, &data::shape_categories())?;
    println!("\ndumped memory to {}", dir.display());

    // a degenerate pseudo-label is skipped, not fatal
    let off_image = Detection::from_scores(
        BoundingBox::new(90.0, 90.0, 99.0, 99.0)?,
        vec![0.9, 0.1, 0.1],
    )
    .unwrap();
    let img = data::generate_image(&spec, 0).image;
    memory.harvest(&img, &[off_image], &embedder, 0.3, 99)?;
    println!(
        "degenerate crops skipped so far: {}",
        memory.skipped_degenerate()
    );
    Ok(())
}
