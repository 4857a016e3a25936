//! Image ingestion, patch extraction, augmentation and ground-truth
//! pyramids.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side of the coarsest pyramid level.
pub const BASE_SIDE: usize = 8;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "gif", "pgm", "ppm"];

/// Where a patch came from: source path, crop offset and dihedral transform
/// index (0 = identity, see [`augment`]).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub row: usize,
    pub col: usize,
    pub transform: u8,
}

/// Channel-major image with values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    provenance: Provenance,
}

impl ImageTensor {
    /// Square image from channel-major data.
    pub fn new(channels: usize, side: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_size(channels, side, side, data)
    }

    pub fn with_size(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(ImageTensor { channels, height, width, data, provenance: Provenance::default() })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self::constant(channels, side, 0.0)
    }

    pub fn constant(channels: usize, side: usize, value: f32) -> Self {
        ImageTensor {
            channels,
            height: side,
            width: side,
            data: vec![value; channels * side * side],
            provenance: Provenance::default(),
        }
    }

    /// 8-bit channel-major samples mapped linearly onto `[-1, 1]`.
    pub fn from_u8(channels: usize, height: usize, width: usize, samples: &[u8]) -> Result<Self> {
        Self::with_size(channels, height, width, samples.iter().map(|&v| v as f32 / 127.5 - 1.0).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Side length; only meaningful for square images.
    pub fn side(&self) -> usize {
        debug_assert!(self.is_square());
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// De-normalizes to 8 bits, rounding half to even and saturating.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_8bit(v)).collect()
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let (w, h) = (self.width as u32, self.height as u32);
        let samples = self.to_u8();
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, samples).expect("sized buffer"))),
            3 => {
                let plane = self.height * self.width;
                let interleaved = (0..plane).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| samples[c * plane + p]).collect();
                Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, interleaved).expect("sized buffer")))
            }
            c => Err(Error::Shape(format!("cannot export a {c}-channel image"))),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// `[-1, 1]` to `0..=255` with round-half-to-even.
pub fn to_8bit(v: f32) -> u8 {
    ((f64::from(v) + 1.0) * 127.5).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Decodes an image, converts it to `channels` and optionally resizes it to
/// `resize x resize` with bicubic (Catmull-Rom) interpolation.
pub fn decode_image(bytes: &[u8], channels: usize, resize: Option<usize>, path: &Path) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let image = match channels {
        1 => {
            let mut gray = img.to_luma8();
            if let Some(side) = resize {
                gray = image::imageops::resize(&gray, side as u32, side as u32, FilterType::CatmullRom);
            }
            ImageTensor::from_u8(1, gray.height() as usize, gray.width() as usize, gray.as_raw())?
        }
        3 => {
            let mut rgb = img.to_rgb8();
            if let Some(side) = resize {
                rgb = image::imageops::resize(&rgb, side as u32, side as u32, FilterType::CatmullRom);
            }
            let (h, w) = (rgb.height() as usize, rgb.width() as usize);
            let raw = rgb.as_raw();
            let planar: Vec<u8> = (0..3).flat_map(|c| (0..h * w).map(move |p| raw[p * 3 + c])).collect();
            ImageTensor::from_u8(3, h, w, &planar)?
        }
        c => return Err(Error::Config(format!("channels must be 1 or 3, got {c}"))),
    };
    Ok(image.with_provenance(Provenance { source: path.display().to_string(), ..Provenance::default() }))
}

/// A decoded source image with the SHA-256 of its file contents.
#[derive(Clone, Debug)]
pub struct SourceImage {
    pub path: PathBuf,
    pub digest: [u8; 32],
    pub image: ImageTensor,
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_sources(paths: &[PathBuf], channels: usize, resize: Option<usize>) -> Result<Vec<SourceImage>> {
    paths
        .iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let digest = Sha256::digest(&bytes).into();
            let image = decode_image(&bytes, channels, resize, path)?;
            Ok(SourceImage { path: path.clone(), digest, image })
        })
        .collect()
}

/// Raster-order `patch_side` crops at `stride`; partial windows at the right
/// and bottom edges are dropped.
pub fn extract_patches(images: &[ImageTensor], patch_side: usize, stride: usize) -> Result<Vec<ImageTensor>> {
    if patch_side == 0 || stride == 0 {
        return Err(Error::Config("patch side and stride must be positive".into()));
    }
    let mut patches = Vec::new();
    for image in images {
        if patch_side > image.height.min(image.width) {
            return Err(Error::Data(format!(
                "patch side {patch_side} exceeds image {}x{} ({})",
                image.height, image.width, image.provenance.source
            )));
        }
        for row in (0..=image.height - patch_side).step_by(stride) {
            for col in (0..=image.width - patch_side).step_by(stride) {
                let mut data = Vec::with_capacity(image.channels * patch_side * patch_side);
                for c in 0..image.channels {
                    for y in row..row + patch_side {
                        let start = (c * image.height + y) * image.width + col;
                        data.extend_from_slice(&image.data[start..start + patch_side]);
                    }
                }
                let provenance = Provenance {
                    row: image.provenance.row + row,
                    col: image.provenance.col + col,
                    ..image.provenance.clone()
                };
                patches.push(ImageTensor::new(image.channels, patch_side, data)?.with_provenance(provenance));
            }
        }
    }
    Ok(patches)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub flip: bool,
}

/// Rotations by 0/90/180/270 degrees (counter-clockwise) when `rotate` is
/// set, each followed by its horizontal mirror when `flip` is set. The
/// transform index stored in the provenance is `2 * quarter_turns + flipped`.
pub fn augment(patch: &ImageTensor, flags: AugmentFlags) -> Vec<ImageTensor> {
    let turns = if flags.rotate { 4 } else { 1 };
    let mut out = Vec::new();
    for quarter in 0..turns {
        let rotated = rotate_quarter(patch, quarter);
        if flags.flip {
            let mirrored = mirror(&rotated);
            out.push(tagged(rotated, 2 * quarter as u8));
            out.push(tagged(mirrored, 2 * quarter as u8 + 1));
        } else {
            out.push(tagged(rotated, 2 * quarter as u8));
        }
    }
    out
}

fn tagged(mut image: ImageTensor, transform: u8) -> ImageTensor {
    image.provenance.transform = transform;
    image
}

fn remap(image: &ImageTensor, source_of: impl Fn(usize, usize) -> (usize, usize)) -> ImageTensor {
    let s = image.side();
    let mut data = Vec::with_capacity(image.data.len());
    for c in 0..image.channels {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = source_of(y, x);
                data.push(image.at(c, sy, sx));
            }
        }
    }
    ImageTensor { data, ..image.clone() }
}

fn rotate_quarter(image: &ImageTensor, quarter: usize) -> ImageTensor {
    let last = image.side() - 1;
    match quarter % 4 {
        0 => image.clone(),
        1 => remap(image, |y, x| (x, last - y)),
        2 => remap(image, |y, x| (last - y, last - x)),
        _ => remap(image, |y, x| (last - x, y)),
    }
}

fn mirror(image: &ImageTensor) -> ImageTensor {
    let last = image.side() - 1;
    remap(image, |y, x| (y, last - x))
}

/// Halves the side by averaging non-overlapping 2x2 blocks.
pub fn downsample2x(image: &ImageTensor) -> Result<ImageTensor> {
    if !image.height.is_multiple_of(2) || !image.width.is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot halve a {}x{} image", image.height, image.width)));
    }
    let (h, w) = (image.height / 2, image.width / 2);
    let mut data = Vec::with_capacity(image.channels * h * w);
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let a = image.at(c, 2 * y, 2 * x);
                let b = image.at(c, 2 * y, 2 * x + 1);
                let d = image.at(c, 2 * y + 1, 2 * x);
                let e = image.at(c, 2 * y + 1, 2 * x + 1);
                data.push((a + b + d + e) * 0.25);
            }
        }
    }
    Ok(ImageTensor { channels: image.channels, height: h, width: w, data, provenance: image.provenance.clone() })
}

/// Side of the finest level of a `stages`-level pyramid.
pub fn pyramid_side(stages: usize) -> usize {
    BASE_SIDE << (stages - 1)
}

/// Images at sides `8, 16, ..., 8 * 2^(k-1)`; index `i` holds stage `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    levels: Vec<ImageTensor>,
}

impl ImagePyramid {
    /// Checks that each level doubles the previous one, starting at 8.
    pub fn from_levels(levels: Vec<ImageTensor>) -> Result<Self> {
        for (i, level) in levels.iter().enumerate() {
            if !level.is_square() || level.side() != BASE_SIDE << i {
                return Err(Error::Shape(format!(
                    "pyramid level {} is {}x{}, expected side {}",
                    i + 1,
                    level.height,
                    level.width,
                    BASE_SIDE << i
                )));
            }
        }
        Ok(ImagePyramid { levels })
    }

    pub fn levels(&self) -> &[ImageTensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<ImageTensor> {
        self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level of stage `stage` (1-based).
    pub fn level(&self, stage: usize) -> &ImageTensor {
        &self.levels[stage - 1]
    }

    pub fn sides(&self) -> Vec<usize> {
        self.levels.iter().map(ImageTensor::side).collect()
    }

    pub fn truncated(&self, depth: usize) -> ImagePyramid {
        ImagePyramid { levels: self.levels[..depth.min(self.levels.len())].to_vec() }
    }
}

/// Repeated 2x area-average downsampling; the last level is `patch` itself.
pub fn build_pyramid(patch: &ImageTensor, stages: usize) -> Result<ImagePyramid> {
    if stages == 0 {
        return Err(Error::Config("a pyramid needs at least one stage".into()));
    }
    if !patch.is_square() || stages > 16 || patch.side() != pyramid_side(stages) {
        return Err(Error::Shape(format!(
            "a {stages}-stage pyramid needs a {0}x{0} patch, got {1}x{2}",
            BASE_SIDE << (stages.min(16) - 1),
            patch.height,
            patch.width
        )));
    }
    let mut levels = vec![patch.clone()];
    for _ in 1..stages {
        let next = downsample2x(levels.last().expect("nonempty"))?;
        levels.push(next);
    }
    levels.reverse();
    Ok(ImagePyramid { levels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split sizes for `n` items: train and validation are rounded, test takes
/// the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(format!("split ratios must be nonnegative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let val = ((ratios[1] * n as f64).round() as usize).min(n - train);
    let test = if ratios[2] == 0.0 { 0 } else { n - train - val };
    Ok([train, val + (n - train - val - test), test])
}

/// Seeded shuffle of source items, cut into train / val / test by `ratios`.
/// Items never appear in two splits.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<[Vec<T>; 3]> {
    let sizes = split_sizes(items.len(), ratios)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok([
        pick(0..sizes[0]),
        pick(sizes[0]..sizes[0] + sizes[1]),
        pick(sizes[0] + sizes[1]..items.len()),
    ])
}

/// Dataset recipe, as found in the `[data]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub path: PathBuf,
    /// Use at most this many source images (seeded choice).
    #[serde(default)]
    pub limit: Option<usize>,
    /// Bicubic resize of every source image to `resize x resize` first.
    #[serde(default)]
    pub resize: Option<usize>,
    /// Defaults to the pyramid's final side.
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Applied to the training split only.
    #[serde(default)]
    pub augment: AugmentFlags,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_stride() -> usize {
    16
}

fn default_splits() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl DataConfig {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        DataConfig {
            name: name.into(),
            path: path.into(),
            limit: None,
            resize: None,
            patch: None,
            stride: default_stride(),
            augment: AugmentFlags::default(),
            splits: default_splits(),
            seed: 0,
        }
    }
}

/// Structured record of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub patch_count: usize,
    pub augmentation: AugmentFlags,
    /// SHA-256 over the per-file digests of the split's sources, in order.
    pub source_checksum: String,
    pub seed: u64,
    pub sources: Vec<String>,
    pub patches: Vec<Provenance>,
}

impl DatasetManifest {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub train: Vec<ImageTensor>,
    pub val: Vec<ImageTensor>,
    pub test: Vec<ImageTensor>,
    pub manifests: [DatasetManifest; 3],
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> &[ImageTensor] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads, splits by source image, then cuts patches of side `side` (and
/// augments the training split).
pub fn prepare_dataset(config: &DataConfig, channels: usize, side: usize) -> Result<PreparedDataset> {
    let mut paths = list_images(&config.path)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images found in {}", config.path.display())));
    }
    if let Some(limit) = config.limit {
        if limit < paths.len() {
            paths.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
            paths.truncate(limit);
            paths.sort();
        }
    }
    let patch_side = config.patch.unwrap_or(side);
    if patch_side != side {
        return Err(Error::Config(format!("patch side {patch_side} must equal the pyramid side {side}")));
    }
    let sources = load_sources(&paths, channels, config.resize)?;
    let splits = split_dataset(&sources, config.splits, config.seed)?;
    let mut sets: Vec<Vec<ImageTensor>> = Vec::new();
    let mut manifests = Vec::new();
    for (split, members) in Split::ALL.into_iter().zip(splits) {
        let flags = if split == Split::Train { config.augment } else { AugmentFlags::default() };
        let images: Vec<ImageTensor> = members.iter().map(|s| s.image.clone()).collect();
        let patches: Vec<ImageTensor> = extract_patches(&images, patch_side, config.stride)?
            .iter()
            .flat_map(|p| augment(p, flags))
            .collect();
        let mut hasher = Sha256::new();
        for s in &members {
            hasher.update(s.digest);
        }
        manifests.push(DatasetManifest {
            name: config.name.clone(),
            split,
            patch_count: patches.len(),
            augmentation: flags,
            source_checksum: hex::encode(hasher.finalize()),
            seed: config.seed,
            sources: members.iter().map(|s| s.path.display().to_string()).collect(),
            patches: patches.iter().map(|p| p.provenance.clone()).collect(),
        });
        sets.push(patches);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(PreparedDataset { train, val, test, manifests: manifests.try_into().expect("three manifests") })
}
