//! Learnable prompt state: the additive text-prompt tensor, per-layer visual
//! prompt tokens, warm-start initialization, and the teacher EMA update.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::DetectorBackend;
use crate::container::Container;
use crate::core::Image;
use crate::error::{Result, TtaError};
use crate::tensor::Mat;

/// Student or teacher prompt parameters.
///
/// `text` has one row per category (added to the class embeddings);
/// `visual` holds one `m x d_i` tensor per encoder layer, concatenated in
/// front of the image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub text: Mat,
    pub visual: Vec<Mat>,
}

impl PromptSet {
    /// Zero text prompt and no visual prompt tokens: the prompt-free
    /// zero-shot configuration used by direct testing.
    pub fn zero_shot(backend: &dyn DetectorBackend) -> Self {
        PromptSet {
            text: init_text(backend.num_categories(), backend.text_dim()),
            visual: (0..backend.num_layers())
                .map(|i| Mat::zeros(0, backend.layer_dim(i)))
                .collect(),
        }
    }

    /// Zero-initialized prompts with `m` visual tokens per layer.
    pub fn with_prompt_count(backend: &dyn DetectorBackend, m: usize) -> Self {
        PromptSet {
            text: init_text(backend.num_categories(), backend.text_dim()),
            visual: (0..backend.num_layers())
                .map(|i| Mat::zeros(m, backend.layer_dim(i)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PromptSet {
            text: Mat::zeros(self.text.rows(), self.text.cols()),
            visual: self
                .visual
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &PromptSet) -> bool {
        self.text.shape() == other.text.shape()
            && self.visual.len() == other.visual.len()
            && self
                .visual
                .iter()
                .zip(&other.visual)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn tensor_count(&self) -> usize {
        1 + self.visual.len()
    }

    /// Tensor 0 is the text prompt; tensor `i >= 1` is visual layer `i - 1`.
    pub fn tensor(&self, idx: usize) -> &Mat {
        if idx == 0 {
            &self.text
        } else {
            &self.visual[idx - 1]
        }
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Mat {
        if idx == 0 {
            &mut self.text
        } else {
            &mut self.visual[idx - 1]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.visual.iter().all(Mat::is_finite)
    }

    /// Largest absolute entry-wise difference across all tensors.
    pub fn max_abs_diff(&self, other: &PromptSet) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.tensor_count() {
            for (a, b) in self.tensor(i).data().iter().zip(other.tensor(i).data()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut c = Container::new(seed);
        c.push("PT", self.text.clone());
        for (i, v) in self.visual.iter().enumerate() {
            c.push(&format!("PI{i}"), v.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let c = Container::load(path)?;
        let text = c
            .section("PT")
            .ok_or_else(|| TtaError::MalformedFile {
                path: path.to_path_buf(),
                line: 0,
                message: "missing PT section".into(),
            })?
            .clone();
        let mut visual = Vec::new();
        for i in 0.. {
            match c.section(&format!("PI{i}")) {
                Some(m) => visual.push(m.clone()),
                None => break,
            }
        }
        if visual.is_empty() {
            return Err(TtaError::MalformedFile {
                path: path.to_path_buf(),
                line: 0,
                message: "missing PI0 section".into(),
            });
        }
        Ok((PromptSet { text, visual }, c.seed))
    }
}

/// Zero text prompt, so the modulated class embeddings start unchanged.
pub fn init_text(num_categories: usize, text_dim: usize) -> Mat {
    Mat::zeros(num_categories, text_dim)
}

/// What warm-start saw: the stream id of the first image and the per-layer
/// pooled token vectors, recorded exactly once per adaptation run.
#[derive(Debug, Clone)]
pub struct WarmStartRecord {
    pub image_id: u64,
    pub pooled: Vec<Vec<f64>>,
}

/// Standard deviation of the symmetry-breaking noise added to each
/// replicated warm-start row.
pub const WARM_START_NOISE_SD: f64 = 1e-4;

/// Initialize visual prompts from the first test image: each layer's prompt
/// rows are the mean of that layer's input image tokens (computed without
/// prompts), replicated `m` times plus tiny seeded noise so the rows can
/// differentiate under gradients.
pub fn warm_start_visual(
    first_image: &Image,
    image_id: u64,
    backend: &dyn DetectorBackend,
    m: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Mat>, WarmStartRecord)> {
    let pooled = backend.layer_input_means(first_image)?;
    let noise = Normal::new(0.0, WARM_START_NOISE_SD).unwrap();
    let mut visual = Vec::with_capacity(pooled.len());
    for layer_mean in &pooled {
        let mut t = Mat::zeros(m, layer_mean.len());
        for r in 0..m {
            let row = t.row_mut(r);
            for (slot, v) in row.iter_mut().zip(layer_mean) {
                // clamp keeps the noise bound strict; at 5 sigma it is
                // effectively never active
                let eps = noise.sample(rng).clamp(-5e-4, 5e-4);
                *slot = v + eps;
            }
        }
        visual.push(t);
    }
    Ok((visual, WarmStartRecord { image_id, pooled }))
}

/// One teacher EMA step: every entry becomes
/// `gamma * teacher + (1 - gamma) * student`.
pub fn ema_update(teacher: &PromptSet, student: &PromptSet, gamma: f64) -> Result<PromptSet> {
    if !teacher.same_shape(student) {
        return Err(TtaError::shape(
            "ema_update",
            "teacher and student prompt shapes equal",
            "mismatched shapes",
        ));
    }
    let mut out = teacher.clone();
    for i in 0..out.tensor_count() {
        let t = out.tensor_mut(i);
        for (tv, sv) in t.data_mut().iter_mut().zip(student.tensor(i).data()) {
            *tv = gamma * *tv + (1.0 - gamma) * sv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyDetector, ToyDetectorConfig};
    use crate::core::CategorySpace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy() -> ToyDetector {
        let cats =
            CategorySpace::new(vec!["square".into(), "disk".into(), "triangle".into()]).unwrap();
        ToyDetector::new(&ToyDetectorConfig::default(), &cats).unwrap()
    }

    #[test]
    fn init_text_is_all_zero() {
        let t = init_text(5, 32);
        assert_eq!(t.shape(), (5, 32));
        assert_eq!(t.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn warm_start_rows_equal_layer_means() {
        let det = toy();
        let img = Image::filled(64, 64, 0.6).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (visual, record) = warm_start_visual(&img, 0, &det, 10, &mut rng).unwrap();
        assert_eq!(visual.len(), det.num_layers());
        for (tensor, pooled) in visual.iter().zip(&record.pooled) {
            assert_eq!(tensor.rows(), 10);
            for r in 0..tensor.rows() {
                for (v, p) in tensor.row(r).iter().zip(pooled) {
                    assert!((v - p).abs() <= 1e-3, "noise exceeded bound");
                }
            }
        }
        // constant image: layer-0 tokens are identical, so the pooled vector
        // equals any single patch projection
        let tokens = det.tokenize(&img).unwrap();
        for (p, t) in record.pooled[0].iter().zip(tokens.row(0)) {
            assert!((p - t).abs() < 1e-9);
        }
    }

    #[test]
    fn warm_start_pool_matches_independent_mean() {
        let det = toy();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pixels = (0..64 * 64 * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let img = Image::new(64, 64, pixels).unwrap();
        let (_, record) = warm_start_visual(&img, 3, &det, 4, &mut rng).unwrap();
        let tokens = det.tokenize(&img).unwrap();
        let mean = tokens.row_mean();
        for (a, b) in record.pooled[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_endpoints() {
        let det = toy();
        let mut student = PromptSet::with_prompt_count(&det, 2);
        student.text.set(0, 0, 1.0);
        let teacher = PromptSet::with_prompt_count(&det, 2);

        let unchanged = ema_update(&teacher, &student, 1.0).unwrap();
        assert_eq!(unchanged, teacher);

        let replaced = ema_update(&teacher, &student, 0.0).unwrap();
        assert_eq!(replaced, student);
    }

    #[test]
    fn ema_geometric_decay() {
        let det = toy();
        let mut teacher = PromptSet::with_prompt_count(&det, 1);
        for i in 0..teacher.tensor_count() {
            for v in teacher.tensor_mut(i).data_mut() {
                *v = 1.0;
            }
        }
        let student = PromptSet::with_prompt_count(&det, 1);
        let gamma: f64 = 0.999;
        let mut t = teacher.clone();
        for _ in 0..3 {
            t = ema_update(&t, &student, gamma).unwrap();
        }
        let expect = gamma.powi(3);
        for (i, v) in t.text.data().iter().enumerate() {
            assert!((v - expect).abs() < 1e-12, "entry {i}");
        }
        let _ = teacher;
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let det = toy();
        let a = PromptSet::with_prompt_count(&det, 2);
        let b = PromptSet::with_prompt_count(&det, 3);
        assert!(ema_update(&a, &b, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = toy();
        let mut p = PromptSet::with_prompt_count(&det, 3);
        p.text.set(1, 2, 0.5);
        p.visual[1].set(0, 7, -0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.bin");
        p.save(&path, 123).unwrap();
        let (back, seed) = PromptSet::load(&path).unwrap();
        assert_eq!(seed, 123);
        assert_eq!(back, p);
    }
}
