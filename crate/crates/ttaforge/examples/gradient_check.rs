//! Validate the hand-derived prompt gradients against central finite
//! differences on a small random instance.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use ttaforge::backend::{DetectorBackend, ToyDetector, ToyDetectorConfig, TrainTarget};
use ttaforge::core::{BoundingBox, CategorySpace, Image};
use ttaforge::prompts::PromptSet;

fn main() -> ttaforge::Result<()> {
    let cats = CategorySpace::new(vec!["a".into(), "b".into()])?;
    let detector = ToyDetector::new(
        &ToyDetectorConfig {
            seed: 17,
            ..Default::default()
        },
        &cats,
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let pixels = (0..16 * 16 * 3)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let image = Image::new(16, 16, pixels)?;
    let mut prompts = PromptSet::with_prompt_count(&detector, 2);
    for i in 0..prompts.tensor_count() {
        for v in prompts.tensor_mut(i).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let targets = vec![TrainTarget {
        box_: BoundingBox::new(2.0, 3.0, 11.0, 12.0)?,
        category: 0,
        weight: 1.0,
    }];

    let (loss, grad) = detector.loss_and_grad(&image, &targets, &prompts)?;
    println!("loss: cls={:.6} loc={:.6}", loss.cls, loss.loc);

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut components = 0usize;
    for t_idx in 0..prompts.tensor_count() {
        for i in 0..prompts.tensor(t_idx).data().len() {
            let mut p = prompts.clone();
            let base = p.tensor(t_idx).data()[i];
            p.tensor_mut(t_idx).data_mut()[i] = base + h;
            let plus = detector.loss_and_grad(&image, &targets, &p)?.0.total();
            p.tensor_mut(t_idx).data_mut()[i] = base - h;
            let minus = detector.loss_and_grad(&image, &targets, &p)?.0.total();
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.tensor(t_idx).data()[i];
            let err = if fd.abs() < 1e-8 && a.abs() < 1e-8 {
                (fd - a).abs()
            } else {
                (fd - a).abs() / fd.abs().max(a.abs())
            };
            worst = worst.max(err);
            components += 1;
        }
    }
    println!("checked {components} prompt components, worst relative error {worst:.2e}");
    assert!(worst < 1e-3);
    println!("analytic gradients agree with finite differences");
    Ok(())
}
