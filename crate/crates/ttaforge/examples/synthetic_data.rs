//! Generate the synthetic shape-detection benchmark: a clean source split
//! and a palette-shifted, corrupted target split.
//!
//! ```bash
//! cargo run --example synthetic_data
//! ```

use ttaforge::augment::CorruptionKind;
use ttaforge::data::{generate, load, SyntheticSpec, TargetShift};

fn main() -> ttaforge::Result<()> {
    let root = std::env::temp_dir().join("ttaforge_synthetic_demo");

    let source = SyntheticSpec::new(20, 64, 11, TargetShift::None)?;
    let src = generate(&source, &root.join("source"))?;
    println!(
        "source split: {} images, {} annotations",
        src.num_images(),
        src.file.annotations.len()
    );

    let target = SyntheticSpec::new(
        20,
        64,
        11,
        TargetShift::PaletteWithCorruption(CorruptionKind::GaussianNoise, 3),
    )?;
    let tgt = generate(&target, &root.join("target"))?;
    println!(
        "target split: {} images, {} annotations (palette shift + gaussian severity 3)",
        tgt.num_images(),
        tgt.file.annotations.len()
    );

    // round trip through the annotation document
    let reloaded = load(&root.join("target"))?;
    println!(
        "reloaded target: {} categories: {:?}",
        reloaded.categories.len(),
        reloaded.categories.names()
    );
    let first = &reloaded.file.images[0];
    let img = reloaded.load_image(first)?;
    println!("first image {} is {}x{}", first.file, img.width, img.height);

    let per_class = reloaded
        .file
        .annotations
        .iter()
        .fold([0usize; 3], |mut acc, a| {
            acc[a.category_id] += 1;
            acc
        });
    println!("objects per class: {per_class:?}");
    println!("datasets under {}", root.display());
    Ok(())
}
