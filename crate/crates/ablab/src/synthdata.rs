//! Synthetic glyph-grid scenes with analytically known annotation
//! distributions, deterministic rendering, and the manifest-based on-disk
//! dataset format.

use crate::blob::{blob_len, read_blob, write_blob, BlobError, BlobTensor};
use crate::geometry::BBox;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom};
use std::path::Path;
use thiserror::Error;

/// Canvas pixels per grid cell.
pub const CELL_PX: usize = 16;
/// Fixed background color.
pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.12];
const PATTERN_P: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scene generation produced no non-empty cell after 10 attempts")]
    EmptyScene,
    #[error("missing blob: {0}")]
    MissingBlob(String),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("shape mismatch in dataset: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Grid side in cells.
    pub grid: usize,
    /// Glyph vocabulary size (annotation vocabulary is this plus background).
    pub vocab: usize,
    /// Per-cell occupancy probability.
    pub density: f64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.grid < 2 {
            return Err(DataError::Config(format!("grid must be >= 2, got {}", self.grid)));
        }
        if self.vocab == 0 || self.vocab > 250 {
            return Err(DataError::Config(format!("vocab must be in [1, 250], got {}", self.vocab)));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(DataError::Config(format!("density must be in [0, 1], got {}", self.density)));
        }
        Ok(())
    }
}

/// A grid of cells, each empty (0) or holding glyph id `g+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub grid: usize,
    pub vocab: usize,
    /// Row-major cell contents, 0 = empty, g+1 = glyph g.
    pub cells: Vec<u8>,
    pub seed: u64,
}

/// A rendered crop at fixed resolution.
#[derive(Debug, Clone)]
pub struct View {
    /// Row-major RGB pixels in [0, 1], shape R x R x 3.
    pub pixels: Vec<f32>,
    pub resolution: usize,
    pub bbox: BBox,
    pub scene_id: usize,
}

/// Vocabulary of glyph annotations plus one background annotation.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationVocab {
    pub glyphs: usize,
}

impl AnnotationVocab {
    /// Total annotation count: glyphs plus background.
    pub fn len(&self) -> usize {
        self.glyphs + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the background annotation (always last).
    pub fn background(&self) -> usize {
        self.glyphs
    }
}

/// Each cell independently non-empty with probability `density`; glyph ids
/// uniform. Retries all-empty draws up to 10 times, then errors.
pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig, seed: u64) -> Result<Scene, DataError> {
    cfg.validate()?;
    for _ in 0..10 {
        let cells: Vec<u8> = (0..cfg.grid * cfg.grid)
            .map(|_| {
                if rng.gen_bool(cfg.density) {
                    rng.gen_range(0..cfg.vocab) as u8 + 1
                } else {
                    0
                }
            })
            .collect();
        if cells.iter().any(|&c| c != 0) {
            return Ok(Scene { grid: cfg.grid, vocab: cfg.vocab, cells, seed });
        }
    }
    Err(DataError::EmptyScene)
}

fn glyph_color(g: usize) -> [f32; 3] {
    // Fixed, well-separated hues via the golden-ratio sequence.
    let hue = ((g as f64 + 1.0) * 0.618_033_988_749_895).fract();
    let (s, v) = (0.85f64, 0.9f64);
    let h6 = hue * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6.fract();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g_, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g_ as f32, b as f32]
}

fn pattern_tone(g: usize, py: usize, px: usize) -> f32 {
    // Deterministic two-tone 4x4 pattern per glyph.
    let mut h = g as u64 ^ 0x9e37_79b9_7f4a_7c15;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ ((py * PATTERN_P + px) as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    if h & 1 == 0 {
        1.0
    } else {
        0.65
    }
}

/// Full-resolution deterministic rasterization of a scene.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub px: usize,
    /// Row-major RGB, px x px x 3.
    pub data: Vec<f32>,
}

pub fn rasterize_scene(scene: &Scene) -> Canvas {
    let px = scene.grid * CELL_PX;
    let mut data = vec![0.0f32; px * px * 3];
    for y in 0..px {
        let cy = y / CELL_PX;
        for x in 0..px {
            let cx = x / CELL_PX;
            let cell = scene.cells[cy * scene.grid + cx];
            let rgb = if cell == 0 {
                BACKGROUND
            } else {
                let g = cell as usize - 1;
                let base = glyph_color(g);
                let py = (y % CELL_PX) * PATTERN_P / CELL_PX;
                let pxx = (x % CELL_PX) * PATTERN_P / CELL_PX;
                let tone = pattern_tone(g, py, pxx);
                [base[0] * tone, base[1] * tone, base[2] * tone]
            };
            let o = (y * px + x) * 3;
            data[o..o + 3].copy_from_slice(&rgb);
        }
    }
    Canvas { px, data }
}

/// Bilinear resampling of the sub-window `bbox` to resolution R.
pub fn render_view(canvas: &Canvas, bbox: &BBox, r: usize, scene_id: usize) -> View {
    let px = canvas.px;
    let mut pixels = vec![0.0f32; r * r * 3];
    for i in 0..r {
        let yn = bbox.y_min + (i as f64 + 0.5) / r as f64 * bbox.height();
        let fy = (yn * px as f64 - 0.5).clamp(0.0, (px - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(px - 1);
        let wy = (fy - y0 as f64) as f32;
        for j in 0..r {
            let xn = bbox.x_min + (j as f64 + 0.5) / r as f64 * bbox.width();
            let fx = (xn * px as f64 - 0.5).clamp(0.0, (px - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(px - 1);
            let wx = (fx - x0 as f64) as f32;
            let o = (i * r + j) * 3;
            for c in 0..3 {
                let v00 = canvas.data[(y0 * px + x0) * 3 + c];
                let v01 = canvas.data[(y0 * px + x1) * 3 + c];
                let v10 = canvas.data[(y1 * px + x0) * 3 + c];
                let v11 = canvas.data[(y1 * px + x1) * 3 + c];
                pixels[o + c] =
                    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    View { pixels, resolution: r, bbox: *bbox, scene_id }
}

/// Exact area-weighted annotation distribution of a crop: glyph weights are
/// visible cell areas, background absorbs empty-cell area. Sums to one.
pub fn true_annotation_dist(scene: &Scene, bbox: &BBox) -> Vec<f64> {
    let g = scene.grid;
    let mut w = vec![0.0f64; scene.vocab + 1];
    let bg = scene.vocab;
    for cy in 0..g {
        let y0 = cy as f64 / g as f64;
        let y1 = (cy + 1) as f64 / g as f64;
        let iy = (bbox.y_max.min(y1) - bbox.y_min.max(y0)).max(0.0);
        if iy == 0.0 {
            continue;
        }
        for cx in 0..g {
            let x0 = cx as f64 / g as f64;
            let x1 = (cx + 1) as f64 / g as f64;
            let ix = (bbox.x_max.min(x1) - bbox.x_min.max(x0)).max(0.0);
            if ix == 0.0 {
                continue;
            }
            let cell = scene.cells[cy * g + cx];
            let idx = if cell == 0 { bg } else { cell as usize - 1 };
            w[idx] += iy * ix;
        }
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for v in &mut w {
            *v /= total;
        }
    } else {
        w[bg] = 1.0;
    }
    w
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestScene {
    scene_id: usize,
    seed: u64,
    blob: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "G")]
    g: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "R")]
    r: usize,
    scenes: Vec<ManifestScene>,
}

/// A dataset loaded from or about to be written to disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: usize,
    pub vocab: usize,
    /// Render resolution recorded with the dataset.
    pub resolution: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn annotation_vocab(&self) -> AnnotationVocab {
        AnnotationVocab { glyphs: self.vocab }
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let blob_name = "scenes.bin";
    let mut w = BufWriter::new(File::create(dir.join(blob_name))?);
    let mut manifest = Manifest {
        version: 1,
        g: ds.grid,
        v: ds.vocab,
        r: ds.resolution,
        scenes: Vec::new(),
    };
    let mut offset = 0u64;
    for (i, scene) in ds.scenes.iter().enumerate() {
        if scene.grid != ds.grid || scene.vocab != ds.vocab {
            return Err(DataError::ShapeMismatch(format!(
                "scene {i} has grid/vocab {}/{} but dataset says {}/{}",
                scene.grid, scene.vocab, ds.grid, ds.vocab
            )));
        }
        let bt = BlobTensor::U8 { dims: vec![scene.grid, scene.grid], data: scene.cells.clone() };
        write_blob(&mut w, &bt)?;
        manifest.scenes.push(ManifestScene {
            scene_id: i,
            seed: scene.seed,
            blob: blob_name.to_string(),
            offset,
        });
        offset += blob_len(&bt) as u64;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| DataError::BadManifest(e.to_string()))?,
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| DataError::BadManifest(format!("cannot read manifest.json: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| DataError::BadManifest(e.to_string()))?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for ms in &manifest.scenes {
        let path = dir.join(&ms.blob);
        if !path.exists() {
            return Err(DataError::MissingBlob(ms.blob.clone()));
        }
        let mut f = BufReader::new(File::open(&path)?);
        f.seek(SeekFrom::Start(ms.offset))?;
        let bt = read_blob(&mut f)?;
        let dims = bt.dims().to_vec();
        if dims != [manifest.g, manifest.g] {
            return Err(DataError::ShapeMismatch(format!(
                "scene {} grid blob has dims {dims:?}, expected [{g}, {g}]",
                ms.scene_id,
                g = manifest.g
            )));
        }
        scenes.push(Scene {
            grid: manifest.g,
            vocab: manifest.v,
            cells: bt.as_u8()?.to_vec(),
            seed: ms.seed,
        });
    }
    Ok(Dataset { grid: manifest.g, vocab: manifest.v, resolution: manifest.r, scenes })
}
