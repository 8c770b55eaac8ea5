//! Teacher EMA dynamics: the teacher-student gap contracts geometrically in
//! the momentum coefficient, which is what keeps pseudo-labels stable.
//!
//! ```bash
//! cargo run --example ema_teacher
//! ```

use ttaforge::backend::ToyDetector;
use ttaforge::backend::ToyDetectorConfig;
use ttaforge::data;
use ttaforge::prompts::{ema_update, PromptSet};

fn main() -> ttaforge::Result<()> {
    let detector = ToyDetector::new(&ToyDetectorConfig::default(), &data::shape_categories())?;

    // teacher starts at 1, student pinned at 0
    let mut teacher = PromptSet::with_prompt_count(&detector, 4);
    for i in 0..teacher.tensor_count() {
        for v in teacher.tensor_mut(i).data_mut() {
            *v = 1.0;
        }
    }
    let student = PromptSet::with_prompt_count(&detector, 4);

    let gamma = 0.999;
    println!("gamma = {gamma}; gap after k steps (expected gamma^k):");
    let mut current = teacher;
    let mut step = 0u32;
    for checkpoint in [1u32, 10, 100, 1000] {
        while step < checkpoint {
            current = ema_update(&current, &student, gamma)?;
            step += 1;
        }
        let gap = current.text.get(0, 0);
        println!(
            "  k={checkpoint:<5} gap={gap:.9}  expected={:.9}",
            gamma.powi(checkpoint as i32)
        );
    }
    Ok(())
}
