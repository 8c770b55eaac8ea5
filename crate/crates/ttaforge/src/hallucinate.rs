//! Memory hallucination: paste stored instance crops onto a test image that
//! produced no pseudo-labels, fabricating positives for the student.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::backend::TrainTarget;
use crate::core::{iou, resize_bilinear, BoundingBox, Image};
use crate::error::{Result, TtaError};
use crate::memory::InstanceMemory;

#[derive(Debug, Clone, Copy)]
pub struct HallucinationConfig {
    /// Most instances pasted onto one negative image.
    pub max_instances: usize,
    /// Placement is retried while a candidate overlaps an already placed
    /// box with IoU above this.
    pub th_iou: f64,
    pub max_retries: usize,
    /// Beta-distribution shape for the mixing coefficient. The default
    /// (8, 2) has mean 0.8, so pasted instances dominate the blend and stay
    /// detectable.
    pub beta_a: f64,
    pub beta_b: f64,
    /// Multiplicative scale jitter applied to the crop before pasting,
    /// clamped so the scaled crop fits inside the image.
    pub scale_range: (f64, f64),
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        HallucinationConfig {
            max_instances: 3,
            th_iou: 0.2,
            max_retries: 10,
            beta_a: 8.0,
            beta_b: 2.0,
            scale_range: (0.5, 1.5),
        }
    }
}

impl HallucinationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_instances < 1 {
            return Err(TtaError::Invalid("max_instances must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.th_iou) {
            return Err(TtaError::Invalid(format!(
                "th_iou {} outside [0, 1]",
                self.th_iou
            )));
        }
        if self.max_retries < 1 {
            return Err(TtaError::Invalid("max_retries must be >= 1".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(TtaError::Invalid(format!(
                "bad scale range {:?}",
                self.scale_range
            )));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(TtaError::Invalid(
                "beta shape parameters must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `lambda * instance + (1 - lambda) * region`, elementwise.
pub fn blend(region: &Image, instance: &Image, lambda: f64) -> Result<Image> {
    if region.width != instance.width || region.height != instance.height {
        return Err(TtaError::shape(
            "blend",
            format!("{}x{}", region.width, region.height),
            format!("{}x{}", instance.width, instance.height),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TtaError::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = region.clone();
    for (o, i) in out.pixels_mut().iter_mut().zip(instance.pixels()) {
        *o = lambda * i + (1.0 - lambda) * *o;
    }
    Ok(out)
}

/// Hallucinate positives onto a negative image.
///
/// Draws 1..=`max_instances` stored triplets, scale-jitters each crop
/// (clamped to fit), Beta-samples a per-instance mixing coefficient, and
/// places each crop at a uniform position, rejecting positions that overlap
/// an already placed box with IoU above `th_iou` for up to `max_retries`
/// attempts before dropping the instance. Emitted pseudo-labels carry the
/// stored score as their loss weight. Pixels outside the pasted boxes are
/// untouched.
pub fn hallucinate(
    negative: &Image,
    memory: &InstanceMemory,
    config: &HallucinationConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Vec<TrainTarget>)> {
    config.validate()?;
    if memory.is_empty() {
        return Err(TtaError::NoMemory);
    }
    let beta = Beta::new(config.beta_a, config.beta_b)
        .map_err(|e| TtaError::Invalid(format!("beta distribution: {e}")))?;
    let n = rng.random_range(1..=config.max_instances);
    let triplets = memory.sample(n, rng);

    let mut image = negative.clone();
    let mut placed: Vec<BoundingBox> = Vec::new();
    let mut targets: Vec<TrainTarget> = Vec::new();
    for t in triplets {
        let scale = rng.random_range(config.scale_range.0..=config.scale_range.1);
        let mut w = ((t.crop.width as f64 * scale).round() as usize).max(1);
        let mut h = ((t.crop.height as f64 * scale).round() as usize).max(1);
        w = w.min(image.width);
        h = h.min(image.height);
        let instance = resize_bilinear(&t.crop, w, h);
        let lambda = beta.sample(rng).clamp(0.0, 1.0);

        let mut accepted: Option<(usize, usize)> = None;
        for _ in 0..config.max_retries {
            let x = rng.random_range(0..=image.width - w);
            let y = rng.random_range(0..=image.height - h);
            let candidate = BoundingBox {
                x1: x as f64,
                y1: y as f64,
                x2: (x + w) as f64,
                y2: (y + h) as f64,
            };
            if placed.iter().all(|p| iou(p, &candidate) <= config.th_iou) {
                accepted = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = accepted else {
            continue; // dropped after max_retries failed placements
        };
        for dy in 0..h {
            for dx in 0..w {
                for c in 0..3 {
                    let bg = image.get(x + dx, y + dy, c);
                    let fg = instance.get(dx, dy, c);
                    image.set(x + dx, y + dy, c, lambda * fg + (1.0 - lambda) * bg);
                }
            }
        }
        let box_ = BoundingBox {
            x1: x as f64,
            y1: y as f64,
            x2: (x + w) as f64,
            y2: (y + h) as f64,
        };
        placed.push(box_);
        targets.push(TrainTarget {
            box_,
            category: t.category,
            weight: t.score,
        });
    }
    Ok((image, targets))
}

/// Debug dump: the hallucinated image with label-box outlines burned in,
/// plus a JSON sidecar of the emitted pseudo-labels.
pub fn dump_hallucination(
    dir: &std::path::Path,
    index: usize,
    image: &Image,
    targets: &[TrainTarget],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TtaError::io(dir, e))?;
    let mut overlay = image.clone();
    for t in targets {
        let (x1, y1) = (t.box_.x1 as usize, t.box_.y1 as usize);
        let (x2, y2) = (
            (t.box_.x2 as usize).min(image.width) - 1,
            (t.box_.y2 as usize).min(image.height) - 1,
        );
        for x in x1..=x2 {
            for y in [y1, y2] {
                overlay.set(x, y, 0, 1.0);
                overlay.set(x, y, 1, 0.1);
                overlay.set(x, y, 2, 0.1);
            }
        }
        for y in y1..=y2 {
            for x in [x1, x2] {
                overlay.set(x, y, 0, 1.0);
                overlay.set(x, y, 1, 0.1);
                overlay.set(x, y, 2, 0.1);
            }
        }
    }
    crate::data::write_png(&dir.join(format!("halluc_{index:04}.png")), &overlay)?;
    let labels: Vec<serde_json::Value> = targets
        .iter()
        .map(|t| {
            serde_json::json!({
                "bbox": [t.box_.x1, t.box_.y1, t.box_.width(), t.box_.height()],
                "category_id": t.category,
                "weight": t.weight,
            })
        })
        .collect();
    let path = dir.join(format!("halluc_{index:04}.json"));
    let text = serde_json::to_string_pretty(&labels).expect("serializable");
    std::fs::write(&path, text).map_err(|e| TtaError::io(&path, e))
}
