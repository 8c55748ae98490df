//! Procedurally generated shape corpora for end-to-end runs without external data.
//!
//! Four shape classes are drawn at random position, scale, rotation and
//! contrast on non-square canvases with Gaussian noise. Each image gets an
//! IRMA-style code: a per-class prefix plus an orientation digit and a size
//! digit that follow the drawn parameters, so code errors behave like those of
//! a real corpus where visually similar images tend to share sub-codes.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::eval::IrmaCode;
use crate::imaging::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn label(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Code with `o` (orientation) and `s` (size) placeholders.
    fn code_template(self) -> &'static str {
        match self {
            Shape::Disk => "1121-o00-400-70s",
            Shape::Triangle => "1121-o20-310-70s",
            Shape::Cross => "1123-o10-520-61s",
            Shape::Ring => "1124-o30-400-70s",
        }
    }

    /// Membership of a point given in shape-local units (scale 1).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            // equilateral, circumradius 1, one vertex pointing up
            Shape::Triangle => [90.0f64, 210.0, 330.0].iter().all(|deg| {
                let (s, c) = (deg + 180.0).to_radians().sin_cos();
                u * c + v * s <= 0.5
            }),
            Shape::Cross => {
                let (a, b) = (u.abs(), v.abs());
                (a <= 1.0 && b <= 0.3) || (a <= 0.3 && b <= 1.0)
            }
        }
    }

    /// Rotation only shows for shapes without rotational symmetry.
    fn is_oriented(self) -> bool {
        matches!(self, Shape::Triangle | Shape::Cross)
    }
}

/// Corpus size and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive Gaussian noise, in intensity units.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train_per_class: 100,
            test_per_class: 25,
            noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub shape: Shape,
    pub irma_code: IrmaCode,
    /// Already quantized to 8 bits, so it equals the decoded PNG.
    pub image: GrayImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<SyntheticImage>,
    pub test: Vec<SyntheticImage>,
}

const SUPERSAMPLE: usize = 3;

fn render(shape: Shape, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> (Vec<u8>, usize, usize, IrmaCode) {
    let width = rng.random_range(60..=110);
    let height = rng.random_range(60..=110);
    let short = width.min(height) as f64;
    let scale_frac = rng.random_range(0.22..0.40);
    let scale = scale_frac * short;
    let cx = width as f64 / 2.0 + rng.random_range(-0.08..0.08) * short;
    let cy = height as f64 / 2.0 + rng.random_range(-0.08..0.08) * short;
    let angle = rng.random_range(-25.0f64..25.0).to_radians();
    let fg = rng.random_range(0.55..1.0);
    let bg = rng.random_range(0.0..0.05);
    let (sin, cos) = angle.sin_cos();

    let mut samples = Vec::with_capacity(width * height);
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in 0..height {
        for c in 0..width {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = c as f64 + (sx as f64 + 0.5) * step - cx;
                    let y = r as f64 + (sy as f64 + 0.5) * step - cy;
                    let u = (cos * x + sin * y) / scale;
                    let v = (-sin * x + cos * y) / scale;
                    hits += usize::from(shape.contains(u, v));
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let value = bg + (fg - bg) * cover + noise.sample(rng);
            samples.push((value.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }

    let orientation = if !shape.is_oriented() {
        '1'
    } else if angle >= 0.0 {
        '2'
    } else {
        '3'
    };
    let size = if scale_frac >= 0.31 { '2' } else { '1' };
    let code = shape
        .code_template()
        .replace('o', &orientation.to_string())
        .replace('s', &size.to_string());
    let code = IrmaCode::parse(&code).expect("templates are well formed");
    (samples, width, height, code)
}

/// Generates the corpus deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite non-negative sigma");
    let mut split = |name: &str, per_class: usize| {
        let mut out = Vec::with_capacity(per_class * Shape::ALL.len());
        for shape in Shape::ALL {
            for i in 0..per_class {
                let (samples, w, h, irma_code) = render(shape, &mut rng, &noise);
                out.push(SyntheticImage {
                    id: format!("{name}/{}_{i:03}.png", shape.label()),
                    shape,
                    irma_code,
                    image: GrayImage::from_luma8(w, h, &samples).expect("dimensions match samples"),
                });
            }
        }
        out
    };
    let train = split("train", spec.train_per_class);
    let test = split("test", spec.test_per_class);
    SyntheticCorpus { train, test }
}

/// 8-bit grayscale PNG encoding of `img`.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let samples: Vec<u8> = img.pixels().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, samples)
        .expect("buffer length matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("PNG encoding into memory");
    out.into_inner()
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Writes PNGs under `dir/train` and `dir/test` plus `train.csv` and `test.csv`.
pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> std::io::Result<CorpusPaths> {
    let write_split = |images: &[SyntheticImage], manifest: &str| -> std::io::Result<PathBuf> {
        let mut csv = String::from("path,class,irma_code\n");
        for img in images {
            let path = dir.join(&img.id);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, encode_png(&img.image))?;
            csv.push_str(&format!("{},{},{}\n", img.id, img.shape.label(), img.irma_code));
        }
        let manifest = dir.join(manifest);
        fs::write(&manifest, csv)?;
        Ok(manifest)
    };
    fs::create_dir_all(dir)?;
    Ok(CorpusPaths {
        train_manifest: write_split(&corpus.train, "train.csv")?,
        test_manifest: write_split(&corpus.test, "test.csv")?,
    })
}
