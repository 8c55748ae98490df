//! Image decoding, resampling and the discrete Radon transform.
//!
//! Every image is reduced to a square grid of intensities in `[0, 1]` and then
//! projected along `n_p` evenly spaced angles in `[0°, 180°)`. Each projection
//! has exactly `N` offset bins regardless of the source image, which is what
//! keeps feature vectors and barcodes the same length across a corpus.

use image::DynamicImage;
use thiserror::Error;

/// Side lengths accepted by [`normalize_image`].
pub const SUPPORTED_SIDES: [usize; 3] = [16, 32, 64];

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image dimensions {width}x{height} are invalid for {len} pixels")]
    Dimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("pixel {index} has intensity {value} outside [0, 1]")]
    Intensity { index: usize, value: f64 },
    #[error("unsupported normalized size {0} (expected one of 16, 32, 64)")]
    UnsupportedSide(usize),
    #[error("invalid Radon configuration: {0}")]
    Config(String),
    #[error("image side {image} does not match Radon configuration side {config}")]
    SideMismatch { image: usize, config: usize },
}

/// Grayscale image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(pixels.len()) {
            return Err(ImagingError::Dimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::Intensity { index, value });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from 8-bit samples, scaling each by 1/255.
    pub fn from_luma8(width: usize, height: usize, samples: &[u8]) -> Result<Self, ImagingError> {
        Self::new(
            width,
            height,
            samples.iter().map(|&s| f64::from(s) / 255.0).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Square image of side `N`, the input to [`radon_transform`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    side: usize,
    pixels: Vec<f64>,
}

impl NormalizedImage {
    /// Wraps an `side × side` grid. Any side is accepted here so that small
    /// grids can be projected directly; [`normalize_image`] restricts the
    /// sides used by the pipeline.
    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self, ImagingError> {
        let img = GrayImage::new(side, side, pixels)?;
        Ok(Self {
            side,
            pixels: img.pixels,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn total_mass(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

impl From<NormalizedImage> for GrayImage {
    fn from(img: NormalizedImage) -> Self {
        GrayImage {
            width: img.side,
            height: img.side,
            pixels: img.pixels,
        }
    }
}

/// Decodes PNG, BMP or PGM bytes into a grayscale image.
///
/// Color inputs are reduced with the fixed weights `0.299 R + 0.587 G + 0.114 B`.
/// Alpha is ignored.
pub fn to_grayscale(raw: &[u8]) -> Result<GrayImage, ImagingError> {
    let format = image::guess_format(raw).map_err(|e| ImagingError::Decode(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(raw, format)
        .map_err(|e| ImagingError::Decode(format!("{format:?}: {e}")))?;
    from_dynamic(&decoded)
}

fn from_dynamic(decoded: &DynamicImage) -> Result<GrayImage, ImagingError> {
    let width = decoded.width() as usize;
    let height = decoded.height() as usize;
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf
            .as_raw()
            .chunks_exact(2)
            .map(|p| f64::from(p[0]) / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .as_raw()
            .iter()
            .map(|&v| f64::from(v) / 65535.0)
            .collect(),
        DynamicImage::ImageLumaA16(buf) => buf
            .as_raw()
            .chunks_exact(2)
            .map(|p| f64::from(p[0]) / 65535.0)
            .collect(),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .as_raw()
            .chunks_exact(3)
            .map(|p| luma(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])) / 65535.0)
            .collect(),
        _ => decoded
            .to_rgb8()
            .as_raw()
            .chunks_exact(3)
            .map(|p| luma(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])) / 255.0)
            .collect(),
    };
    // luma weights sum to 1 but rounding can overshoot by an ulp
    let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    GrayImage::new(width, height, pixels)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_R * r + LUMA_G * g + LUMA_B * b
}

/// Resamples to `side × side` for one of the [`SUPPORTED_SIDES`].
pub fn normalize_image(img: &GrayImage, side: usize) -> Result<NormalizedImage, ImagingError> {
    if !SUPPORTED_SIDES.contains(&side) {
        return Err(ImagingError::UnsupportedSide(side));
    }
    let resized = resample(img, side, side);
    Ok(NormalizedImage {
        side,
        pixels: resized.pixels,
    })
}

/// Separable resampling: area averaging along an axis that shrinks, bilinear
/// interpolation (pixel-center aligned, edge clamped) along an axis that grows.
/// An axis whose length is unchanged is copied exactly.
pub fn resample(img: &GrayImage, out_width: usize, out_height: usize) -> GrayImage {
    assert!(out_width > 0 && out_height > 0, "output size must be positive");
    let wx = axis_weights(img.width, out_width);
    let wy = axis_weights(img.height, out_height);

    // horizontal pass: height × out_width
    let mut tmp = vec![0.0; img.height * out_width];
    for y in 0..img.height {
        let row = &img.pixels[y * img.width..(y + 1) * img.width];
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * out_width + ox] = taps.iter().map(|&(i, w)| w * row[i]).sum();
        }
    }

    let mut out = vec![0.0; out_width * out_height];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..out_width {
            let v: f64 = taps.iter().map(|&(i, w)| w * tmp[i * out_width + ox]).sum();
            out[oy * out_width + ox] = v.clamp(0.0, 1.0);
        }
    }
    GrayImage {
        width: out_width,
        height: out_height,
        pixels: out,
    }
}

/// Per-output-sample list of `(source index, weight)` taps along one axis.
fn axis_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    if input == output {
        return (0..output).map(|i| vec![(i, 1.0)]).collect();
    }
    if output < input {
        // box filter: output cell o covers [o·s, (o+1)·s) in source units
        let scale = input as f64 / output as f64;
        (0..output)
            .map(|o| {
                let start = o as f64 * scale;
                let end = start + scale;
                let first = start.floor() as usize;
                let last = (end.ceil() as usize).min(input);
                (first..last)
                    .filter_map(|i| {
                        let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            })
            .collect()
    } else {
        let scale = input as f64 / output as f64;
        let max = (input - 1) as f64;
        (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                let frac = src - lo as f64;
                if hi == lo || frac == 0.0 {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (hi, frac)]
                }
            })
            .collect()
    }
}

/// Projection geometry: `projections` angles `θ_j = j·180/projections` degrees
/// over a `side`-bin offset axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonConfig {
    projections: usize,
    side: usize,
    angles: Vec<f64>,
}

impl RadonConfig {
    pub fn new(projections: usize, side: usize) -> Result<Self, ImagingError> {
        if projections == 0 {
            return Err(ImagingError::Config("at least one projection angle is required".into()));
        }
        if side == 0 {
            return Err(ImagingError::Config("side must be positive".into()));
        }
        if projections > u16::MAX as usize || side > u16::MAX as usize {
            return Err(ImagingError::Config(format!(
                "projections ({projections}) and side ({side}) must fit in 16 bits"
            )));
        }
        let angles = (0..projections)
            .map(|j| j as f64 * 180.0 / projections as f64)
            .collect();
        Ok(Self {
            projections,
            side,
            angles,
        })
    }

    pub fn projections(&self) -> usize {
        self.projections
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Angles in degrees, ascending.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Length of the flattened feature vector and of the barcode, `n_p · N`.
    pub fn feature_len(&self) -> usize {
        self.projections * self.side
    }

    /// Width of one offset bin. The `side` bins span `[-side·√2/2, side·√2/2]`.
    pub fn bin_width(&self) -> f64 {
        std::f64::consts::SQRT_2
    }
}

impl std::fmt::Display for RadonConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "N={} n_p={}", self.side, self.projections)
    }
}

/// `n_p × N` projection matrix, one row per angle.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonFeatures {
    config: RadonConfig,
    values: Vec<f64>,
    normalized: bool,
}

impl RadonFeatures {
    /// Wraps a row-major matrix. Entries must be finite and non-negative.
    pub fn from_values(config: RadonConfig, values: Vec<f64>) -> Result<Self, ImagingError> {
        if values.len() != config.feature_len() {
            return Err(ImagingError::Config(format!(
                "expected {} feature values for {config}, got {}",
                config.feature_len(),
                values.len()
            )));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(ImagingError::Intensity { index, value });
        }
        Ok(Self {
            config,
            values,
            normalized: false,
        })
    }

    pub fn config(&self) -> &RadonConfig {
        &self.config
    }

    /// Flattened row-major values, angle-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.config.side;
        &self.values[j * n..(j + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.config.side)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Multiplies every entry by a positive factor. The normalized flag is cleared.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            config: self.config.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            normalized: false,
        }
    }
}

/// Pixel-mass Radon transform.
///
/// Each pixel center `(x, y)`, measured from the image center with `y` pointing
/// up, deposits its whole intensity into the offset bin containing
/// `ρ = x cos θ + y sin θ`. Every pixel lands in exactly one bin per angle, so
/// each row sums to the image mass.
pub fn radon_transform(
    img: &NormalizedImage,
    cfg: &RadonConfig,
) -> Result<RadonFeatures, ImagingError> {
    if img.side != cfg.side {
        return Err(ImagingError::SideMismatch {
            image: img.side,
            config: cfg.side,
        });
    }
    let n = cfg.side;
    let center = (n as f64 - 1.0) / 2.0;
    let half_span = n as f64 * std::f64::consts::SQRT_2 / 2.0;
    let bin_width = cfg.bin_width();
    let mut values = vec![0.0; cfg.feature_len()];

    for (j, &theta) in cfg.angles.iter().enumerate() {
        let (sin, cos) = theta.to_radians().sin_cos();
        let row = &mut values[j * n..(j + 1) * n];
        for r in 0..n {
            let y = center - r as f64;
            for c in 0..n {
                let v = img.pixels[r * n + c];
                if v == 0.0 {
                    continue;
                }
                let x = c as f64 - center;
                let rho = x * cos + y * sin;
                let bin = (((rho + half_span) / bin_width).floor() as isize).clamp(0, n as isize - 1);
                row[bin as usize] += v;
            }
        }
    }
    Ok(RadonFeatures {
        config: cfg.clone(),
        values,
        normalized: false,
    })
}

/// Divides every entry by the matrix maximum. All-zero input passes through.
pub fn normalize_features(f: RadonFeatures) -> RadonFeatures {
    let max = f.values.iter().copied().fold(0.0_f64, f64::max);
    let values = if max > 0.0 {
        f.values.into_iter().map(|v| v / max).collect()
    } else {
        f.values
    };
    RadonFeatures {
        config: f.config,
        values,
        normalized: true,
    }
}
