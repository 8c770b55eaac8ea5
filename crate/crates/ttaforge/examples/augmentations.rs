//! Weak/strong augmentation and the seeded corruption ladder, written out
//! as PNG files for eyeballing.
//!
//! ```bash
//! cargo run --example augmentations
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use ttaforge::augment::{corrupt, strong, weak, AugmentationSpec, CorruptionKind, CorruptionSpec};
use ttaforge::core::BoundingBox;
use ttaforge::data::{self, write_png, SyntheticSpec, TargetShift};

fn main() -> ttaforge::Result<()> {
    let spec = SyntheticSpec::new(1, 64, 12, TargetShift::None)?;
    let image = data::generate_image(&spec, 0).image;
    let dir = std::env::temp_dir().join("ttaforge_augment_demo");
    std::fs::create_dir_all(&dir).unwrap();
    write_png(&dir.join("original.png"), &image)?;

    let aug = AugmentationSpec {
        resize_scales: vec![64, 80, 96],
        ..Default::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(4);

    let (weak_img, t) = weak(&image, &aug, &mut rng);
    write_png(&dir.join("weak.png"), &weak_img)?;
    let box_ = BoundingBox::new(10.0, 10.0, 30.0, 30.0)?;
    let mapped = t.apply_box(&box_);
    println!(
        "weak: resized to {}x{}, box (10,10,30,30) -> ({:.0},{:.0},{:.0},{:.0})",
        weak_img.width, weak_img.height, mapped.x1, mapped.y1, mapped.x2, mapped.y2
    );

    for i in 0..3 {
        let (strong_img, _) = strong(&image, &aug, &mut rng);
        write_png(&dir.join(format!("strong_{i}.png")), &strong_img)?;
    }
    println!("strong: three draws written (resize + one color op + erasing)");

    for kind in [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ] {
        for severity in [1u8, 3, 5] {
            let cs = CorruptionSpec::new(kind, severity, 7)?;
            let corrupted = corrupt(&image, &cs);
            write_png(
                &dir.join(format!("{}_{severity}.png", kind.name())),
                &corrupted,
            )?;
        }
        println!("corruption {:?}: severities 1/3/5 written", kind);
    }
    println!("all outputs under {}", dir.display());
    Ok(())
}
