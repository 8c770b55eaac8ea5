//! Synthetic shape-detection dataset generation and dataset/prediction I/O.
//!
//! Images contain 1..=4 colored shapes (square, disk, triangle) on a noisy
//! gray background. The source split uses one palette; the target split
//! shifts the palette and optionally applies a corruption, creating the
//! distribution gap the prompts have to bridge. Everything derives from the
//! spec seed; pixel values are quantized to 8 bits before writing so the
//! PNG files round-trip exactly.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{corrupt, CorruptionKind, CorruptionSpec};
use crate::core::{BoundingBox, CategorySpace, Image};
use crate::error::{Result, TtaError};
use crate::evalkit::{GtRecord, PredictionRecord};

/// The three shape classes, in category-index order.
pub fn shape_categories() -> CategorySpace {
    CategorySpace::new(vec!["square".into(), "disk".into(), "triangle".into()]).unwrap()
}

/// Class colors the frozen detector was "pretrained" on.
pub const SOURCE_COLORS: [[f64; 3]; 3] =
    [[0.85, 0.25, 0.25], [0.25, 0.85, 0.25], [0.25, 0.25, 0.85]];
pub const SOURCE_BG: [f64; 3] = [0.30, 0.30, 0.30];

/// Shifted palette of the target domain: the source colors faded toward the
/// background (22% desaturation), so every class degrades symmetrically.
pub const TARGET_COLORS: [[f64; 3]; 3] = [
    [0.729, 0.261, 0.261],
    [0.261, 0.729, 0.261],
    [0.261, 0.261, 0.729],
];
pub const TARGET_BG: [f64; 3] = [0.30, 0.30, 0.30];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetShift {
    /// Clean source-palette split.
    None,
    /// Shifted palette only.
    Palette,
    /// Shifted palette plus a corruption at the given severity.
    PaletteWithCorruption(CorruptionKind, u8),
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Square image edge, a multiple of the backend patch size.
    pub size: usize,
    pub seed: u64,
    pub shift: TargetShift,
    /// Background noise sigma.
    pub bg_noise: f64,
    /// Per-pixel shape color jitter sigma.
    pub color_jitter: f64,
}

impl SyntheticSpec {
    pub fn new(num_images: usize, size: usize, seed: u64, shift: TargetShift) -> Result<Self> {
        if num_images == 0 {
            return Err(TtaError::Invalid("num_images must be >= 1".into()));
        }
        if size < 32 {
            return Err(TtaError::Invalid(format!("image size {size} below 32")));
        }
        if let TargetShift::PaletteWithCorruption(kind, severity) = shift {
            // constructor enforces the severity range
            CorruptionSpec::new(kind, severity, 0)?;
        }
        Ok(SyntheticSpec {
            num_images,
            size,
            seed,
            shift,
            bg_noise: 0.02,
            color_jitter: 0.03,
        })
    }

    fn palette(&self) -> (&[[f64; 3]; 3], &[f64; 3]) {
        match self.shift {
            TargetShift::None => (&SOURCE_COLORS, &SOURCE_BG),
            _ => (&TARGET_COLORS, &TARGET_BG),
        }
    }
}

/// One generated image plus its ground-truth objects, before disk I/O.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub id: u64,
    pub image: Image,
    pub objects: Vec<(BoundingBox, usize)>,
}

const MIN_SHAPE: usize = 18;
const MAX_SHAPE: usize = 20;
const MAX_PLACEMENT_IOU: f64 = 0.3;

fn stream_rng(seed: u64, index: u64, salt: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(
        seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Generate one image deterministically from `(spec.seed, index)`.
pub fn generate_image(spec: &SyntheticSpec, index: u64) -> GeneratedImage {
    let mut rng = stream_rng(spec.seed, index, 1);
    let (colors, bg) = spec.palette();
    let size = spec.size;
    let noise = Normal::new(0.0, spec.bg_noise).unwrap();
    let jitter = Normal::new(0.0, spec.color_jitter).unwrap();

    let mut pixels = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        for c in bg.iter() {
            pixels.push((c + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    let mut image = Image::new(size, size, pixels).unwrap();

    let count = rng.random_range(1..=4usize);
    let mut objects: Vec<(BoundingBox, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..3usize);
        let side = rng.random_range(MIN_SHAPE..=MAX_SHAPE + if class == 2 { 1 } else { 0 });
        let mut placed = None;
        for _ in 0..50 {
            let x = rng.random_range(1..size - side - 1);
            let y = rng.random_range(1..size - side - 1);
            let candidate = BoundingBox {
                x1: x as f64,
                y1: y as f64,
                x2: (x + side) as f64,
                y2: (y + side) as f64,
            };
            if objects
                .iter()
                .all(|(b, _)| crate::core::iou(b, &candidate) <= MAX_PLACEMENT_IOU)
            {
                placed = Some((x, y, candidate));
                break;
            }
        }
        let Some((x, y, box_)) = placed else { continue };
        draw_shape(
            &mut image,
            class,
            x,
            y,
            side,
            &colors[class],
            &jitter,
            &mut rng,
        );
        objects.push((box_, class));
    }

    quantize(&mut image);
    if let TargetShift::PaletteWithCorruption(kind, severity) = spec.shift {
        let corruption_seed = stream_rng(spec.seed, index, 2).random::<u64>();
        let cs = CorruptionSpec::new(kind, severity, corruption_seed).unwrap();
        image = corrupt(&image, &cs);
        quantize(&mut image);
    }
    GeneratedImage {
        id: index,
        image,
        objects,
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_shape(
    image: &mut Image,
    class: usize,
    x: usize,
    y: usize,
    side: usize,
    color: &[f64; 3],
    jitter: &Normal<f64>,
    rng: &mut ChaCha12Rng,
) {
    let s = side as f64;
    for dy in 0..side {
        for dx in 0..side {
            let px = dx as f64 + 0.5;
            let py = dy as f64 + 0.5;
            let inside = match class {
                0 => true,
                1 => {
                    let r = s / 2.0;
                    (px - r).powi(2) + (py - r).powi(2) <= r * r
                }
                _ => {
                    // upward triangle: apex at top center, base at the bottom
                    let t = py / s;
                    (px - s / 2.0).abs() <= t * s / 2.0
                }
            };
            if inside {
                for c in 0..3 {
                    let v = (color[c] + jitter.sample(rng)).clamp(0.0, 1.0);
                    image.set(x + dx, y + dy, c, v);
                }
            }
        }
    }
}

/// Snap every pixel to the 8-bit grid so PNG round-trips are exact.
pub fn quantize(image: &mut Image) {
    for p in image.pixels_mut() {
        *p = (*p * 255.0).round() / 255.0;
    }
}

// --- dataset file format ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<CategoryEntry>,
}

/// A dataset on disk: the parsed annotation document plus its root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub file: DatasetFile,
    pub categories: CategorySpace,
}

impl Dataset {
    pub fn num_images(&self) -> usize {
        self.file.images.len()
    }

    pub fn load_image(&self, entry: &ImageEntry) -> Result<Image> {
        read_png(&self.root.join(&entry.file))
    }

    pub fn ground_truth(&self) -> Vec<GtRecord> {
        self.file
            .annotations
            .iter()
            .map(|a| GtRecord {
                image_id: a.image_id,
                box_: BoundingBox::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3])
                    .expect("validated at load"),
                category: a.category_id,
            })
            .collect()
    }
}

/// Generate the dataset under `out_dir`: PNG images plus `annotations.json`.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<Dataset> {
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| TtaError::io(&images_dir, e))?;

    let cats = shape_categories();
    let mut file = DatasetFile {
        images: Vec::with_capacity(spec.num_images),
        annotations: Vec::new(),
        categories: cats
            .names()
            .iter()
            .enumerate()
            .map(|(id, name)| CategoryEntry {
                id,
                name: name.clone(),
            })
            .collect(),
    };

    for i in 0..spec.num_images {
        let gen = generate_image(spec, i as u64);
        let rel = format!("images/{i:06}.png");
        write_png(&out_dir.join(&rel), &gen.image)?;
        file.images.push(ImageEntry {
            id: gen.id,
            file: rel,
            width: gen.image.width,
            height: gen.image.height,
        });
        for (b, cat) in &gen.objects {
            let (x, y, w, h) = b.to_xywh();
            file.annotations.push(AnnotationEntry {
                image_id: gen.id,
                bbox: [x, y, w, h],
                category_id: *cat,
            });
        }
    }

    let ann_path = out_dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&file).expect("serializable");
    fs::write(&ann_path, json).map_err(|e| TtaError::io(&ann_path, e))?;

    Ok(Dataset {
        root: out_dir.to_path_buf(),
        file,
        categories: cats,
    })
}

/// Load a dataset and verify referential integrity.
pub fn load(root: &Path) -> Result<Dataset> {
    let ann_path = root.join("annotations.json");
    let text = fs::read_to_string(&ann_path).map_err(|e| TtaError::io(&ann_path, e))?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| TtaError::MalformedFile {
        path: ann_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let mut names = Vec::with_capacity(file.categories.len());
    for (i, c) in file.categories.iter().enumerate() {
        if c.id != i {
            return Err(TtaError::MalformedFile {
                path: ann_path.clone(),
                line: 0,
                message: format!("category id {} out of order (expected {i})", c.id),
            });
        }
        names.push(c.name.clone());
    }
    let categories = CategorySpace::new(names)?;

    for (ln, a) in file.annotations.iter().enumerate() {
        if !file.images.iter().any(|im| im.id == a.image_id) {
            return Err(TtaError::MalformedFile {
                path: ann_path.clone(),
                line: ln,
                message: format!("annotation references missing image id {}", a.image_id),
            });
        }
        if a.category_id >= file.categories.len() {
            return Err(TtaError::MalformedFile {
                path: ann_path.clone(),
                line: ln,
                message: format!(
                    "annotation references missing category id {}",
                    a.category_id
                ),
            });
        }
        let im = file
            .images
            .iter()
            .find(|im| im.id == a.image_id)
            .expect("checked above");
        let [x, y, w, h] = a.bbox;
        if w < 0.0
            || h < 0.0
            || x < 0.0
            || y < 0.0
            || x + w > im.width as f64 + 1e-9
            || y + h > im.height as f64 + 1e-9
        {
            return Err(TtaError::MalformedFile {
                path: ann_path.clone(),
                line: ln,
                message: format!("bbox {:?} outside image {}", a.bbox, a.image_id),
            });
        }
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        file,
        categories,
    })
}

// --- predictions ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    image_id: u64,
    bbox: [f64; 4],
    score: f64,
    category_id: usize,
}

/// Line-delimited JSON records, one prediction per line.
pub fn save_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        let (x, y, w, h) = p.box_.to_xywh();
        let line = PredictionLine {
            image_id: p.image_id,
            bbox: [x, y, w, h],
            score: p.score,
            category_id: p.category,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| TtaError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TtaError::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(line).map_err(|e| TtaError::MalformedFile {
                path: path.to_path_buf(),
                line: ln + 1,
                message: e.to_string(),
            })?;
        out.push(PredictionRecord {
            image_id: p.image_id,
            box_: BoundingBox::from_xywh(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3])?,
            score: p.score,
            category: p.category_id,
        });
    }
    Ok(out)
}

// --- PNG I/O ----------------------------------------------------------------

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TtaError::io(path, e))?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| TtaError::Invalid(format!("png encode {}: {e}", path.display())))?;
    let data: Vec<u8> = image
        .pixels()
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| TtaError::Invalid(format!("png encode {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| TtaError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| TtaError::Invalid(format!("png decode {}: {e}", path.display())))?;
    let buf_size = reader
        .output_buffer_size()
        .ok_or_else(|| TtaError::Invalid(format!("{}: png too large", path.display())))?;
    let mut buf = vec![0u8; buf_size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| TtaError::Invalid(format!("png decode {}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(TtaError::Invalid(format!(
            "{}: expected 8-bit RGB png",
            path.display()
        )));
    }
    let pixels = buf[..info.buffer_size()]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    Image::new(info.width as usize, info.height as usize, pixels)
}
