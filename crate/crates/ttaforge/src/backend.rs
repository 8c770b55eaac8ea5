//! Detector and embedder backends.
//!
//! The adaptation framework only talks to the two traits here, so a real
//! vision-language detector can be plugged in behind them. The bundled
//! `ToyDetector` / `ToyEmbedder` are fully specified desk-scale stand-ins:
//! deterministic, seeded, and differentiable with respect to the prompt
//! tensors (and nothing else — every fixed weight stays frozen).
//!
//! Forward pass of the toy detector:
//!
//! 1. The image is split into non-overlapping `P x P` patches (row-major)
//!    and each flattened patch is projected to a `d`-dim token.
//! 2. Each encoder layer takes `[prompts_i, tokens]`, computes
//!    `relu(x * W_i + b_i)` per row, adds the mean over all input rows to
//!    every output row (global mixing — this is how prepended prompt tokens
//!    reach the image tokens), then drops the prompt positions.
//! 3. Class scores are `sigmoid(token . (class_embedding + text_prompt) / sqrt(d))`;
//!    a box per token comes from the patch rectangle shifted and scaled by
//!    `tanh`-bounded offsets.
//!
//! The patch projection carries a hand-built appearance prior (per-patch
//! mean color plus rectified edge-asymmetry features) on top of seeded
//! noise, which is what gives the frozen detector usable zero-shot behavior
//! on the synthetic shape data; the class embeddings encode the source
//! palette the same way a pretrained detector encodes source appearance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{snap_f32, Container};
use crate::core::{clamp_box, iou, BoundingBox, CategorySpace, Detection, Image};
use crate::error::{Result, TtaError};
use crate::prompts::PromptSet;
use crate::tensor::{dot, l2_norm, Mat};

/// A pseudo-label used as a training target: box, category, loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTarget {
    pub box_: BoundingBox,
    pub category: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.loc
    }
}

/// Detector seam: prediction plus prompt-gradient computation.
///
/// `predict` must be deterministic given `(image, prompts)`, losses are
/// non-negative, and gradient shapes mirror the prompt shapes exactly.
pub trait DetectorBackend {
    fn num_layers(&self) -> usize;
    fn layer_dim(&self, layer: usize) -> usize;
    fn text_dim(&self) -> usize;
    fn max_text_tokens(&self) -> usize;
    fn num_categories(&self) -> usize;
    fn patch_size(&self) -> usize;

    fn predict(&self, image: &Image, prompts: &PromptSet) -> Result<Vec<Detection>>;

    fn loss_and_grad(
        &self,
        image: &Image,
        targets: &[TrainTarget],
        prompts: &PromptSet,
    ) -> Result<(LossBreakdown, PromptSet)>;

    /// Mean over the token axis of each encoder layer's input image tokens,
    /// computed on a prompt-free forward pass. This is the pooling seam the
    /// warm-start initialization consumes.
    fn layer_input_means(&self, image: &Image) -> Result<Vec<Vec<f64>>>;
}

/// Instance-crop feature extractor seam.
///
/// Output is a deterministic unit vector (L2 norm 1 within 1e-6).
pub trait FeatureEmbedder {
    fn feature_dim(&self) -> usize;
    fn embed(&self, crop: &Image) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct ToyDetectorConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub seed: u64,
    /// Per-class appearance prior baked into the class embeddings. When
    /// absent, colors are drawn from the seed.
    pub class_colors: Option<Vec<[f64; 3]>>,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        ToyDetectorConfig {
            patch_size: 8,
            dim: 32,
            num_layers: 2,
            seed: 7,
            class_colors: None,
        }
    }
}

// Gains of the structured (non-random) weight components. Calibrated once
// against the synthetic shape data and then fixed.
const CLASS_GAIN: f64 = 160.0;
const BRIGHTNESS_PENALTY: f64 = 5.5;
const OFFSET_GAIN: f64 = 5.0;
const SIZE_GAIN: f64 = 0.30;
const PATCH_NOISE_SD: f64 = 0.035;
const LAYER_NOISE_SD: f64 = 0.005;
const BIAS_SD: f64 = 0.01;
const EMBED_NOISE_SD: f64 = 0.05;
const LOC_NOISE_SD: f64 = 0.03;

// Token-dimension layout of the structured features. Dims 0..2 hold the
// patch mean color (R, G, B from DIM_R).
const DIM_R: usize = 0;
const DIM_HPOS: usize = 3; // rectified +horizontal asymmetry
const DIM_HNEG: usize = 4;
const DIM_VPOS: usize = 5;
const DIM_VNEG: usize = 6;
const STRUCTURED_DIMS: usize = 7;

/// Desk-scale frozen detector. All weights derive from `config.seed` and are
/// snapped to f32 so the serialized form reproduces them exactly.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    patch_size: usize,
    dim: usize,
    seed: u64,
    patch_proj: Mat,         // (3 P^2) x d
    layers: Vec<(Mat, Mat)>, // (d x d, 1 x d) per encoder layer
    class_embed: Mat,        // |C| x d
    loc_head: Mat,           // 4 x d
}

impl ToyDetector {
    pub fn new(config: &ToyDetectorConfig, categories: &CategorySpace) -> Result<Self> {
        let p = config.patch_size;
        let d = config.dim;
        if p < 2 || d < STRUCTURED_DIMS + 1 {
            return Err(TtaError::Invalid(format!(
                "toy detector needs patch_size >= 2 and dim > {STRUCTURED_DIMS}, got {p}/{d}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let colors = match &config.class_colors {
            Some(c) => {
                if c.len() != categories.len() {
                    return Err(TtaError::shape(
                        "ToyDetector::new",
                        format!("{} class colors", categories.len()),
                        format!("{}", c.len()),
                    ));
                }
                c.clone()
            }
            None => (0..categories.len())
                .map(|_| {
                    [
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                    ]
                })
                .collect(),
        };

        let patch_proj = build_patch_proj(p, d, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| build_layer(d, &mut rng))
            .collect();
        let class_embed = build_class_embed(&colors, d, &mut rng);
        let loc_head = build_loc_head(d, &mut rng);

        Ok(ToyDetector {
            patch_size: p,
            dim: d,
            seed: config.seed,
            patch_proj,
            layers,
            class_embed,
            loc_head,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_embeddings(&self) -> &Mat {
        &self.class_embed
    }

    fn grid(&self, image: &Image) -> Result<(usize, usize)> {
        if !image.width.is_multiple_of(self.patch_size)
            || !image.height.is_multiple_of(self.patch_size)
        {
            return Err(TtaError::shape(
                "ToyDetector::tokenize",
                format!("dimensions divisible by {}", self.patch_size),
                format!("{}x{}", image.width, image.height),
            ));
        }
        Ok((
            image.width / self.patch_size,
            image.height / self.patch_size,
        ))
    }

    /// Patch rectangle of token `k` in row-major grid order.
    fn patch_rect(&self, k: usize, grid_w: usize) -> BoundingBox {
        let p = self.patch_size as f64;
        let col = (k % grid_w) as f64;
        let row = (k / grid_w) as f64;
        BoundingBox {
            x1: col * p,
            y1: row * p,
            x2: (col + 1.0) * p,
            y2: (row + 1.0) * p,
        }
    }

    /// Split the image into `P x P` patches and project each flattened patch.
    pub fn tokenize(&self, image: &Image) -> Result<Mat> {
        let (gw, gh) = self.grid(image)?;
        let p = self.patch_size;
        let mut tokens = Mat::zeros(gw * gh, self.dim);
        let mut flat = vec![0.0; 3 * p * p];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut i = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            flat[i] = image.get(gx * p + px, gy * p + py, c);
                            i += 1;
                        }
                    }
                }
                let out = tokens.row_mut(gy * gw + gx);
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (i, f) in flat.iter().enumerate() {
                        acc += f * self.patch_proj.get(i, j);
                    }
                    *o = acc;
                }
            }
        }
        Ok(tokens)
    }

    /// Run the encoder stack, concatenating the layer's visual prompts in
    /// front of the tokens and dropping those positions afterwards.
    pub fn encode(&self, tokens: &Mat, visual_prompts: &[Mat]) -> Result<Mat> {
        Ok(self.encode_trace(tokens, visual_prompts)?.output)
    }

    fn encode_trace(&self, tokens: &Mat, visual_prompts: &[Mat]) -> Result<EncodeTrace> {
        if visual_prompts.len() != self.layers.len() {
            return Err(TtaError::shape(
                "ToyDetector::encode",
                format!("{} visual prompt tensors", self.layers.len()),
                format!("{}", visual_prompts.len()),
            ));
        }
        let mut current = tokens.clone();
        let mut layer_traces = Vec::with_capacity(self.layers.len());
        for (prompts, (w, b)) in visual_prompts.iter().zip(&self.layers) {
            if prompts.rows() > 0 && prompts.cols() != self.dim {
                return Err(TtaError::shape(
                    "ToyDetector::encode",
                    format!("prompt dim {}", self.dim),
                    format!("{}", prompts.cols()),
                ));
            }
            let token_rows = current.rows();
            let input = Mat::vstack(prompts, &current)?;
            let mean = input.row_mean();
            let mut pre = input.matmul(w)?;
            for r in 0..pre.rows() {
                let row = pre.row_mut(r);
                for (v, bias) in row.iter_mut().zip(b.row(0)) {
                    *v += bias;
                }
            }
            let mut out = Mat::zeros(input.rows(), self.dim);
            for r in 0..pre.rows() {
                let (orow, prow) = (out.row_mut(r), pre.row(r));
                for j in 0..prow.len() {
                    orow[j] = prow[j].max(0.0) + mean[j];
                }
            }
            let next = out.slice_rows(out.rows() - token_rows, out.rows());
            layer_traces.push(LayerTrace {
                input_tokens: current,
                total_rows: input.rows(),
                pre,
            });
            current = next;
        }
        Ok(EncodeTrace {
            layers: layer_traces,
            output: current,
        })
    }

    /// Add the learnable text prompt to the frozen class embeddings.
    pub fn text_embed(&self, text_prompt: &Mat) -> Result<Mat> {
        if text_prompt.shape() != self.class_embed.shape() {
            return Err(TtaError::shape(
                "ToyDetector::text_embed",
                format!("{:?}", self.class_embed.shape()),
                format!("{:?}", text_prompt.shape()),
            ));
        }
        let mut out = self.class_embed.clone();
        out.add_assign(text_prompt);
        Ok(out)
    }

    fn check_prompts(&self, prompts: &PromptSet) -> Result<()> {
        if prompts.text.shape() != self.class_embed.shape() {
            return Err(TtaError::shape(
                "prompt text tensor",
                format!("{:?}", self.class_embed.shape()),
                format!("{:?}", prompts.text.shape()),
            ));
        }
        if prompts.visual.len() != self.layers.len() {
            return Err(TtaError::shape(
                "prompt visual tensors",
                format!("{}", self.layers.len()),
                format!("{}", prompts.visual.len()),
            ));
        }
        Ok(())
    }

    /// Per-token box from the localization head output.
    fn token_box(&self, rect: &BoundingBox, offsets: &[f64; 4]) -> (f64, f64, f64, f64) {
        let p = self.patch_size as f64;
        let (cx, cy) = rect.center();
        (
            cx + offsets[0] * p,
            cy + offsets[1] * p,
            rect.width() * offsets[2].exp(),
            rect.height() * offsets[3].exp(),
        )
    }

    fn forward(&self, image: &Image, prompts: &PromptSet) -> Result<ForwardTrace> {
        self.check_prompts(prompts)?;
        let (gw, _gh) = self.grid(image)?;
        let tokens = self.tokenize(image)?;
        let encode = self.encode_trace(&tokens, &prompts.visual)?;
        let text = self.text_embed(&prompts.text)?;
        let num_tokens = encode.output.rows();
        let num_classes = text.rows();
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut logits = Mat::zeros(num_tokens, num_classes);
        for k in 0..num_tokens {
            for c in 0..num_classes {
                logits.set(k, c, dot(encode.output.row(k), text.row(c)) * scale);
            }
        }
        let mut offsets = Vec::with_capacity(num_tokens);
        for k in 0..num_tokens {
            let f = encode.output.row(k);
            let mut o = [0.0; 4];
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(self.loc_head.row(j), f).tanh();
            }
            offsets.push(o);
        }
        Ok(ForwardTrace {
            grid_w: gw,
            encode,
            text,
            logits,
            offsets,
        })
    }
}

struct LayerTrace {
    /// Token rows entering this layer, before prompt concatenation.
    input_tokens: Mat,
    /// Row count of the full `[prompts; tokens]` input.
    total_rows: usize,
    /// Pre-activation `input * W + b`.
    pre: Mat,
}

struct EncodeTrace {
    layers: Vec<LayerTrace>,
    output: Mat,
}

struct ForwardTrace {
    grid_w: usize,
    encode: EncodeTrace,
    text: Mat,
    logits: Mat,
    offsets: Vec<[f64; 4]>,
}

impl DetectorBackend for ToyDetector {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn layer_dim(&self, _layer: usize) -> usize {
        self.dim
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    fn max_text_tokens(&self) -> usize {
        256
    }

    fn num_categories(&self) -> usize {
        self.class_embed.rows()
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn predict(&self, image: &Image, prompts: &PromptSet) -> Result<Vec<Detection>> {
        let trace = self.forward(image, prompts)?;
        let num_tokens = trace.logits.rows();
        let mut detections = Vec::with_capacity(num_tokens);
        for k in 0..num_tokens {
            let scores: Vec<f64> = trace.logits.row(k).iter().map(|z| sigmoid(*z)).collect();
            let rect = self.patch_rect(k, trace.grid_w);
            let (cx, cy, w, h) = self.token_box(&rect, &trace.offsets[k]);
            let raw = BoundingBox {
                x1: cx - w / 2.0,
                y1: cy - h / 2.0,
                x2: cx + w / 2.0,
                y2: cy + h / 2.0,
            };
            detections.push(Detection::from_scores(clamp_box(&raw, image), scores)?);
        }
        detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        Ok(detections)
    }

    fn loss_and_grad(
        &self,
        image: &Image,
        targets: &[TrainTarget],
        prompts: &PromptSet,
    ) -> Result<(LossBreakdown, PromptSet)> {
        let trace = self.forward(image, prompts)?;
        let num_tokens = trace.logits.rows();
        let num_classes = trace.logits.cols();
        let p = self.patch_size as f64;

        // Each target claims the token whose patch rectangle overlaps it
        // most; ties go to the lowest token index.
        let mut assignments: Vec<(usize, &TrainTarget)> = Vec::with_capacity(targets.len());
        for t in targets {
            let mut best = (0usize, -1.0f64);
            for k in 0..num_tokens {
                let r = self.patch_rect(k, trace.grid_w);
                let v = iou(&t.box_, &r);
                if v > best.1 {
                    best = (k, v);
                }
            }
            assignments.push((best.0, t));
        }

        // Positive-pair indicator with the maximum contributing weight.
        let mut positive = vec![0.0f64; num_tokens * num_classes];
        for (k, t) in &assignments {
            if t.category >= num_classes {
                return Err(TtaError::Invalid(format!(
                    "target category {} outside space of {num_classes}",
                    t.category
                )));
            }
            let slot = &mut positive[k * num_classes + t.category];
            *slot = slot.max(t.weight);
        }

        let pair_count = (num_tokens * num_classes) as f64;
        let mut l_cls = 0.0;
        let mut d_logits = Mat::zeros(num_tokens, num_classes);
        for k in 0..num_tokens {
            for c in 0..num_classes {
                let z = trace.logits.get(k, c);
                let w = positive[k * num_classes + c];
                if w > 0.0 {
                    l_cls += w * softplus(-z);
                    d_logits.set(k, c, w * (sigmoid(z) - 1.0) / pair_count);
                } else {
                    l_cls += softplus(z);
                    d_logits.set(k, c, sigmoid(z) / pair_count);
                }
            }
        }
        l_cls /= pair_count;

        // Localization: L1 in (cx, cy, w, h) normalized by the patch size,
        // averaged over assigned targets, scaled by the target weight.
        let mut l_loc = 0.0;
        let mut d_offsets = vec![[0.0f64; 4]; num_tokens];
        if !assignments.is_empty() {
            let inv = 1.0 / assignments.len() as f64;
            for (k, t) in &assignments {
                let rect = self.patch_rect(*k, trace.grid_w);
                let o = &trace.offsets[*k];
                let (pcx, pcy) = rect.center();
                let pred = [pcx / p + o[0], pcy / p + o[1], o[2].exp(), o[3].exp()];
                let (tcx, tcy) = t.box_.center();
                let tgt = [tcx / p, tcy / p, t.box_.width() / p, t.box_.height() / p];
                let dparam = [1.0, 1.0, pred[2], pred[3]];
                for j in 0..4 {
                    let diff = pred[j] - tgt[j];
                    l_loc += t.weight * diff.abs() * inv;
                    d_offsets[*k][j] += t.weight * diff.signum() * dparam[j] * inv;
                }
            }
        }

        let breakdown = LossBreakdown {
            cls: l_cls,
            loc: l_loc,
        };
        if !breakdown.total().is_finite() {
            return Err(TtaError::NonFiniteLoss(breakdown.total()));
        }

        // Backward pass. Gradients flow only into the prompt tensors.
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut d_text_embed = Mat::zeros(num_classes, self.dim);
        let mut d_final = Mat::zeros(num_tokens, self.dim);
        for k in 0..num_tokens {
            let f = trace.encode.output.row(k);
            for c in 0..num_classes {
                let g = d_logits.get(k, c) * scale;
                if g == 0.0 {
                    continue;
                }
                let t = trace.text.row(c);
                let drow = d_final.row_mut(k);
                for j in 0..self.dim {
                    drow[j] += g * t[j];
                }
                let trow = d_text_embed.row_mut(c);
                for j in 0..self.dim {
                    trow[j] += g * f[j];
                }
            }
            let o = &trace.offsets[k];
            for j in 0..4 {
                let g = d_offsets[k][j];
                if g == 0.0 {
                    continue;
                }
                let dtanh = g * (1.0 - o[j] * o[j]);
                let wrow = self.loc_head.row(j);
                let drow = d_final.row_mut(k);
                for i in 0..self.dim {
                    drow[i] += dtanh * wrow[i];
                }
            }
        }

        // d(text_embed)/d(text_prompt) is the identity.
        let grad_text = d_text_embed;

        let mut grad_visual: Vec<Mat> = prompts
            .visual
            .iter()
            .map(|m| Mat::zeros(m.rows(), m.cols()))
            .collect();
        let mut d_tokens = d_final;
        for (idx, layer_trace) in trace.encode.layers.iter().enumerate().rev() {
            let (w, _b) = &self.layers[idx];
            let m = prompts.visual[idx].rows();
            let total_rows = layer_trace.total_rows;
            let token_rows = total_rows - m;

            // Output rows: prompt positions were dropped, so only the token
            // rows carry incoming gradient. Mean mixing gives every input
            // row an equal share of the summed token gradient.
            let mut d_mean = vec![0.0; self.dim];
            for r in 0..token_rows {
                for (dm, g) in d_mean.iter_mut().zip(d_tokens.row(r)) {
                    *dm += g;
                }
            }
            let mean_share: Vec<f64> = d_mean.iter().map(|g| g / total_rows as f64).collect();

            let mut d_input = Mat::zeros(total_rows, self.dim);
            for r in 0..total_rows {
                let d_out_row: Option<&[f64]> = if r >= m {
                    Some(d_tokens.row(r - m))
                } else {
                    None
                };
                let pre_row = layer_trace.pre.row(r);
                let din = d_input.row_mut(r);
                if let Some(dout) = d_out_row {
                    // through relu, then through W
                    for j in 0..self.dim {
                        if pre_row[j] > 0.0 {
                            let g = dout[j];
                            if g != 0.0 {
                                for i in 0..self.dim {
                                    din[i] += g * w.get(i, j);
                                }
                            }
                        }
                    }
                }
                for (di, ms) in din.iter_mut().zip(&mean_share) {
                    *di += ms;
                }
            }

            for r in 0..m {
                let g = grad_visual[idx].row_mut(r);
                for (gi, di) in g.iter_mut().zip(d_input.row(r)) {
                    *gi += di;
                }
            }
            d_tokens = d_input.slice_rows(m, total_rows);
        }

        Ok((
            breakdown,
            PromptSet {
                text: grad_text,
                visual: grad_visual,
            },
        ))
    }

    fn layer_input_means(&self, image: &Image) -> Result<Vec<Vec<f64>>> {
        let tokens = self.tokenize(image)?;
        let empty: Vec<Mat> = self
            .layers
            .iter()
            .map(|_| Mat::zeros(0, self.dim))
            .collect();
        let trace = self.encode_trace(&tokens, &empty)?;
        Ok(trace
            .layers
            .iter()
            .map(|l| l.input_tokens.row_mean())
            .collect())
    }
}

impl ToyDetector {
    /// Fixed weights in declaration order, each a tagged f32 section.
    pub fn weights_container(&self) -> Container {
        let mut c = Container::new(self.seed);
        c.push("W0", self.patch_proj.clone());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            c.push(&format!("W{}", i + 1), w.clone());
            c.push(&format!("B{}", i + 1), b.clone());
        }
        c.push("TC", self.class_embed.clone());
        c.push("WLOC", self.loc_head.clone());
        c
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        self.weights_container().save(path)
    }
}

fn build_patch_proj(p: usize, d: usize, rng: &mut ChaCha12Rng) -> Mat {
    let in_dim = 3 * p * p;
    let noise = Normal::new(0.0, PATCH_NOISE_SD).unwrap();
    let mut m = Mat::zeros(in_dim, d);
    for r in 0..in_dim {
        for c in STRUCTURED_DIMS..d {
            m.set(r, c, snap_f32(noise.sample(rng)));
        }
    }
    let per_pixel = 1.0 / (p * p) as f64;
    // Asymmetry features: mean luminance of one half minus the other,
    // rectified into +/- pairs by the first relu layer.
    let half = (p / 2) as f64;
    let asym = 1.0 / (3.0 * half * p as f64);
    for py in 0..p {
        for px in 0..p {
            for ch in 0..3 {
                let r = (py * p + px) * 3 + ch;
                m.set(r, DIM_R + ch, snap_f32(per_pixel));
                let h_sign = if px >= p / 2 { 1.0 } else { -1.0 };
                let v_sign = if py >= p / 2 { 1.0 } else { -1.0 };
                m.set(r, DIM_HPOS, snap_f32(h_sign * asym));
                m.set(r, DIM_HNEG, snap_f32(-h_sign * asym));
                m.set(r, DIM_VPOS, snap_f32(v_sign * asym));
                m.set(r, DIM_VNEG, snap_f32(-v_sign * asym));
            }
        }
    }
    m
}

fn build_layer(d: usize, rng: &mut ChaCha12Rng) -> (Mat, Mat) {
    let noise = Normal::new(0.0, LAYER_NOISE_SD).unwrap();
    let bias_noise = Normal::new(0.0, BIAS_SD).unwrap();
    let mut w = Mat::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            let base = if r == c { 1.0 } else { 0.0 };
            w.set(r, c, snap_f32(base + noise.sample(rng)));
        }
    }
    let mut b = Mat::zeros(1, d);
    for c in 0..d {
        b.set(0, c, snap_f32(bias_noise.sample(rng).abs() + 0.01));
    }
    (w, b)
}

fn build_class_embed(colors: &[[f64; 3]], d: usize, rng: &mut ChaCha12Rng) -> Mat {
    let noise = Normal::new(0.0, EMBED_NOISE_SD).unwrap();
    let n = colors.len() as f64;
    let mut mean = [0.0; 3];
    for c in colors {
        for ch in 0..3 {
            mean[ch] += c[ch] / n;
        }
    }
    let mut m = Mat::zeros(colors.len(), d);
    for (idx, color) in colors.iter().enumerate() {
        for ch in 0..3 {
            let v = CLASS_GAIN * (color[ch] - mean[ch]) - BRIGHTNESS_PENALTY;
            m.set(idx, DIM_R + ch, snap_f32(v));
        }
        for j in STRUCTURED_DIMS..d {
            m.set(idx, j, snap_f32(noise.sample(rng)));
        }
    }
    m
}

fn build_loc_head(d: usize, rng: &mut ChaCha12Rng) -> Mat {
    let noise = Normal::new(0.0, LOC_NOISE_SD).unwrap();
    let mut m = Mat::zeros(4, d);
    for r in 0..4 {
        for c in 0..d {
            m.set(r, c, snap_f32(noise.sample(rng)));
        }
    }
    // Center offsets follow the rectified asymmetry pairs; sizes follow
    // overall feature brightness, which is stable across images.
    m.set(0, DIM_HPOS, snap_f32(m.get(0, DIM_HPOS) + OFFSET_GAIN));
    m.set(0, DIM_HNEG, snap_f32(m.get(0, DIM_HNEG) - OFFSET_GAIN));
    m.set(1, DIM_VPOS, snap_f32(m.get(1, DIM_VPOS) + OFFSET_GAIN));
    m.set(1, DIM_VNEG, snap_f32(m.get(1, DIM_VNEG) - OFFSET_GAIN));
    for ch in 0..3 {
        m.set(2, DIM_R + ch, snap_f32(m.get(2, DIM_R + ch) + SIZE_GAIN));
        m.set(3, DIM_R + ch, snap_f32(m.get(3, DIM_R + ch) + SIZE_GAIN));
    }
    m
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct ToyEmbedderConfig {
    pub feature_dim: usize,
    pub resize: usize,
    pub seed: u64,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig {
            feature_dim: 64,
            resize: 16,
            seed: 99,
        }
    }
}

/// Fixed random projection of a resized crop, L2-normalized.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    proj: Mat, // feature_dim x (resize * resize * 3)
    resize: usize,
}

impl ToyEmbedder {
    pub fn new(config: &ToyEmbedderConfig) -> Self {
        let in_dim = config.resize * config.resize * 3;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let noise = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).unwrap();
        let mut proj = Mat::zeros(config.feature_dim, in_dim);
        for v in proj.data_mut() {
            *v = snap_f32(noise.sample(&mut rng));
        }
        ToyEmbedder {
            proj,
            resize: config.resize,
        }
    }
}

impl FeatureEmbedder for ToyEmbedder {
    fn feature_dim(&self) -> usize {
        self.proj.rows()
    }

    fn embed(&self, crop: &Image) -> Result<Vec<f64>> {
        let resized = crate::core::resize_bilinear(crop, self.resize, self.resize);
        // Mean-centering strips the shared brightness direction so crops of
        // different classes land far apart in the affinity space.
        let mean = resized.mean();
        let flat: Vec<f64> = resized.pixels().iter().map(|p| p - mean).collect();
        let mut out = vec![0.0; self.proj.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.proj.row(r), &flat);
        }
        let norm = l2_norm(&out);
        if norm < 1e-12 {
            // All-zero crops project to zero; map them to a fixed unit vector
            // so the unit-norm contract holds.
            out[0] = 1.0;
            return Ok(out);
        }
        for o in &mut out {
            *o /= norm;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts;

    fn toy_categories() -> CategorySpace {
        CategorySpace::new(vec!["square".into(), "disk".into(), "triangle".into()]).unwrap()
    }

    fn toy() -> ToyDetector {
        ToyDetector::new(&ToyDetectorConfig::default(), &toy_categories()).unwrap()
    }

    fn rand_image(rng: &mut ChaCha12Rng, w: usize, h: usize) -> Image {
        let pixels = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(w, h, pixels).unwrap()
    }

    #[test]
    fn tokenize_grid_arithmetic() {
        let det = toy();
        let img = Image::filled(64, 64, 0.5).unwrap();
        let tokens = det.tokenize(&img).unwrap();
        assert_eq!(tokens.shape(), (64, 32));
    }

    #[test]
    fn tokenize_zero_image_is_zero() {
        let det = toy();
        let img = Image::filled(64, 64, 0.0).unwrap();
        let tokens = det.tokenize(&img).unwrap();
        assert!(tokens.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tokenize_is_local_to_patches() {
        let det = toy();
        let a = Image::filled(64, 64, 0.5).unwrap();
        let mut b = a.clone();
        b.set(3, 2, 1, 0.9); // inside patch (0, 0)
        let ta = det.tokenize(&a).unwrap();
        let tb = det.tokenize(&b).unwrap();
        for k in 0..ta.rows() {
            let differs = ta.row(k) != tb.row(k);
            assert_eq!(differs, k == 0, "token {k}");
        }
    }

    #[test]
    fn tokenize_rejects_indivisible_dims() {
        let det = toy();
        let img = Image::filled(60, 64, 0.5).unwrap();
        assert!(matches!(det.tokenize(&img), Err(TtaError::Shape { .. })));
    }

    #[test]
    fn encode_keeps_token_count_and_reacts_to_prompts() {
        let det = toy();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let img = rand_image(&mut rng, 64, 64);
        let tokens = det.tokenize(&img).unwrap();
        let empty: Vec<Mat> = (0..det.num_layers()).map(|_| Mat::zeros(0, 32)).collect();
        let plain = det.encode(&tokens, &empty).unwrap();
        assert_eq!(plain.rows(), tokens.rows());

        let mut prompts: Vec<Mat> = (0..det.num_layers()).map(|_| Mat::zeros(2, 32)).collect();
        prompts[0].set(0, 5, 1.0);
        let prompted = det.encode(&tokens, &prompts).unwrap();
        assert_eq!(prompted.rows(), tokens.rows());
        let max_diff = plain
            .data()
            .iter()
            .zip(prompted.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "prompts must influence encoded tokens");
    }

    #[test]
    fn text_embed_zero_prompt_is_identity() {
        let det = toy();
        let zero = Mat::zeros(3, 32);
        let e = det.text_embed(&zero).unwrap();
        assert_eq!(&e, det.class_embeddings());
    }

    #[test]
    fn text_embed_additive_inverse_and_locality() {
        let det = toy();
        let mut inv = det.class_embeddings().clone();
        inv.scale(-1.0);
        let e = det.text_embed(&inv).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-12));

        let mut delta = Mat::zeros(3, 32);
        delta.set(1, 4, 0.25);
        let shifted = det.text_embed(&delta).unwrap();
        for c in 0..3 {
            for j in 0..32 {
                let base = det.class_embeddings().get(c, j);
                let expect = if c == 1 && j == 4 { base + 0.25 } else { base };
                assert_eq!(shifted.get(c, j), expect);
            }
        }
    }

    #[test]
    fn predict_is_deterministic_dense_and_bounded() {
        let det = toy();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let img = rand_image(&mut rng, 64, 64);
        let prompts = prompts::PromptSet::zero_shot(&det);
        let a = det.predict(&img, &prompts).unwrap();
        let b = det.predict(&img, &prompts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        for d in &a {
            assert!(d.scores.iter().all(|s| (0.0..1.0).contains(s) && *s > 0.0));
        }
        // sorted descending
        for w in a.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    /// Perturbing a single visual prompt token must move some predicted
    /// score; the mean-mixing term guarantees prompts are never inert.
    #[test]
    fn prompt_perturbation_moves_scores() {
        let config = ToyDetectorConfig {
            class_colors: Some(crate::data::SOURCE_COLORS.to_vec()),
            ..Default::default()
        };
        let det = ToyDetector::new(&config, &toy_categories()).unwrap();
        let spec =
            crate::data::SyntheticSpec::new(1, 64, 21, crate::data::TargetShift::None).unwrap();
        let img = crate::data::generate_image(&spec, 0).image;
        let base = prompts::PromptSet::with_prompt_count(&det, 3);
        let mut nudged = base.clone();
        let v = nudged.visual[0].get(1, DIM_R);
        nudged.visual[0].set(1, DIM_R, v + 1e-3);
        let a = det.predict(&img, &base).unwrap();
        let b = det.predict(&img, &nudged).unwrap();
        let max_shift = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x.score - y.score).abs())
            .fold(0.0f64, f64::max);
        assert!(max_shift > 1e-9, "scores must react to prompt changes");
    }

    #[test]
    fn loss_closed_form_at_half_scores() {
        let det = toy();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = rand_image(&mut rng, 64, 64);
        // text prompt = -class embeddings makes every logit zero
        let mut text = det.class_embeddings().clone();
        text.scale(-1.0);
        let prompts = PromptSet {
            text,
            visual: (0..det.num_layers()).map(|_| Mat::zeros(0, 32)).collect(),
        };
        let (loss, _grad) = det.loss_and_grad(&img, &[], &prompts).unwrap();
        assert!((loss.cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(loss.loc, 0.0);
    }

    #[test]
    fn loss_invariant_to_target_order() {
        let det = toy();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = rand_image(&mut rng, 64, 64);
        let prompts = prompts::PromptSet::zero_shot(&det);
        let t1 = TrainTarget {
            box_: BoundingBox::new(4.0, 4.0, 20.0, 20.0).unwrap(),
            category: 0,
            weight: 1.0,
        };
        let t2 = TrainTarget {
            box_: BoundingBox::new(30.0, 30.0, 50.0, 52.0).unwrap(),
            category: 2,
            weight: 0.7,
        };
        let (la, ga) = det
            .loss_and_grad(&img, &[t1.clone(), t2.clone()], &prompts)
            .unwrap();
        let (lb, gb) = det.loss_and_grad(&img, &[t2, t1], &prompts).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga.text, gb.text);
    }

    #[test]
    fn embedder_outputs_unit_norm_deterministically() {
        let emb = ToyEmbedder::new(&ToyEmbedderConfig::default());
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let crop = rand_image(&mut rng, 9, 13);
        let a = emb.embed(&crop).unwrap();
        let b = emb.embed(&crop).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weights_serialize_identically_after_use() {
        let det = toy();
        let before = det.weights_container().to_bytes();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 64, 64);
        let prompts = prompts::PromptSet::zero_shot(&det);
        let _ = det.predict(&img, &prompts).unwrap();
        let _ = det.loss_and_grad(&img, &[], &prompts).unwrap();
        let after = det.weights_container().to_bytes();
        assert_eq!(before, after);
    }

    /// Central finite differences over every prompt component on a small
    /// instance; the analytic gradient must agree within 1e-3 relative
    /// (1e-8 absolute for near-zero components).
    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cats = CategorySpace::new(vec!["a".into(), "b".into()]).unwrap();
        let config = ToyDetectorConfig {
            patch_size: 8,
            dim: 32,
            num_layers: 2,
            seed: 17,
            class_colors: None,
        };
        let det = ToyDetector::new(&config, &cats).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        for trial in 0..3 {
            let img = rand_image(&mut rng, 16, 16);
            let mut prompts = prompts::PromptSet::with_prompt_count(&det, 2);
            for t in prompts
                .visual
                .iter_mut()
                .chain(std::iter::once(&mut prompts.text))
            {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
            let targets = vec![TrainTarget {
                box_: BoundingBox::new(2.0, 3.0, 11.0, 12.0).unwrap(),
                category: trial % 2,
                weight: 0.8,
            }];
            let (_, grad) = det.loss_and_grad(&img, &targets, &prompts).unwrap();

            let loss_at = |p: &PromptSet| det.loss_and_grad(&img, &targets, p).unwrap().0.total();
            let h = 1e-4;
            let mut worst = 0.0f64;
            for tensor_idx in 0..prompts.tensor_count() {
                for i in 0..prompts.tensor(tensor_idx).data().len() {
                    let mut perturbed = prompts.clone();
                    let base = perturbed.tensor(tensor_idx).data()[i];
                    perturbed.tensor_mut(tensor_idx).data_mut()[i] = base + h;
                    let plus = loss_at(&perturbed);
                    perturbed.tensor_mut(tensor_idx).data_mut()[i] = base - h;
                    let minus = loss_at(&perturbed);
                    let fd = (plus - minus) / (2.0 * h);
                    let a = grad.tensor(tensor_idx).data()[i];
                    let err = if fd.abs() < 1e-8 && a.abs() < 1e-8 {
                        (fd - a).abs()
                    } else {
                        (fd - a).abs() / fd.abs().max(a.abs())
                    };
                    worst = worst.max(err);
                }
            }
            assert!(worst < 1e-3, "trial {trial}: worst relative error {worst}");
        }
    }
}
