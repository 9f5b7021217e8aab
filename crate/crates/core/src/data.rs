//! Dataset ingestion, the synthetic texture benchmark, and train-time augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PvqaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Defect,
}

/// One preprocessed image: `pixels` is `(H, W, 3)` in `[0, 1]`, `mask` is `(H, W)` with 0/1 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub label: Label,
    pub mask: Option<Array2<u8>>,
    pub category: String,
    pub path: String,
}

impl ImageSample {
    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    /// Ground-truth mask, treating a missing mask as all-normal.
    pub fn mask_or_zeros(&self) -> Array2<u8> {
        match &self.mask {
            Some(m) => m.clone(),
            None => {
                let (h, w, _) = self.pixels.dim();
                Array2::zeros((h, w))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub categories: Vec<String>,
    pub image_size: usize,
}

impl DatasetManifest {
    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Checks the manifest-level invariants.
    pub fn validate(&self) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            if self.category_index(&s.category).is_none() {
                return Err(PvqaeError::Integrity(format!(
                    "sample {} has unregistered category {}",
                    s.path, s.category
                )));
            }
            let (h, w, c) = s.pixels.dim();
            if h != w || h != self.image_size || c != 3 {
                return Err(PvqaeError::Integrity(format!(
                    "sample {} has shape {h}x{w}x{c}, expected {n}x{n}x3",
                    s.path,
                    n = self.image_size
                )));
            }
            if let Some(m) = &s.mask {
                if m.dim() != (h, w) {
                    return Err(PvqaeError::Integrity(format!("mask shape mismatch for {}", s.path)));
                }
            }
        }
        if let Some(s) = self.train.iter().find(|s| s.label != Label::Normal) {
            return Err(PvqaeError::Integrity(format!("train sample {} is not normal", s.path)));
        }
        Ok(())
    }
}

fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f32 / 255.0;
        }
    }
    out
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn array_to_rgb(pixels: &Array3<f32>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(pixels[[y, x, 0]]),
            to_u8(pixels[[y, x, 1]]),
            to_u8(pixels[[y, x, 2]]),
        ])
    })
}

/// Decodes an image file (grayscale promoted to RGB), resizes it bilinearly and scales to `[0, 1]`.
///
/// Returns the preprocessed pixels and the original `(width, height)`.
pub fn read_image(path: &Path, image_size: usize) -> Result<(Array3<f32>, (u32, u32))> {
    let img = image::open(path).map_err(|source| PvqaeError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let dims = rgb.dimensions();
    let size = image_size as u32;
    let resized = if dims == (size, size) {
        rgb
    } else {
        image::imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    Ok((rgb_to_array(&resized), dims))
}

fn read_mask(path: &Path, image_size: usize) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|source| PvqaeError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let size = image_size as u32;
    let resized = if gray.dimensions() == (size, size) {
        gray
    } else {
        image::imageops::resize(&gray, size, size, FilterType::Nearest)
    };
    Ok(Array2::from_shape_fn((image_size, image_size), |(y, x)| {
        u8::from(resized.get_pixel(x as u32, y as u32)[0] > 127)
    }))
}

pub fn save_rgb_png(pixels: &Array3<f32>, path: &Path) -> Result<()> {
    array_to_rgb(pixels).save(path).map_err(|source| PvqaeError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray_png(values: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([values[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| PvqaeError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PvqaeError::io(dir, e))? {
        let path = entry.map_err(|e| PvqaeError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PvqaeError::io(dir, e))? {
        let entry = entry.map_err(|e| PvqaeError::io(dir, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads an MVTec-style directory tree:
/// `<root>/<category>/{train/good, test/<type>, ground_truth/<type>/<stem>_mask.png}`.
pub fn load_dataset(
    root: &Path,
    image_size: usize,
    categories: Option<&[String]>,
) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(PvqaeError::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut cats: Vec<String> = match categories {
        Some(c) => c.to_vec(),
        None => sorted_subdirs(root)?,
    };
    cats.sort();
    cats.dedup();
    if cats.is_empty() {
        return Err(PvqaeError::Config(format!("no categories under {}", root.display())));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for cat in &cats {
        let cat_dir = root.join(cat);
        let train_dir = cat_dir.join("train").join("good");
        if !train_dir.is_dir() {
            return Err(PvqaeError::Config(format!("missing {}", train_dir.display())));
        }
        for path in sorted_pngs(&train_dir)? {
            let (pixels, _) = read_image(&path, image_size)?;
            train.push(ImageSample {
                pixels,
                label: Label::Normal,
                mask: None,
                category: cat.clone(),
                path: path.display().to_string(),
            });
        }

        let test_dir = cat_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        for kind in sorted_subdirs(&test_dir)? {
            let is_good = kind == "good";
            for path in sorted_pngs(&test_dir.join(&kind))? {
                let (pixels, _) = read_image(&path, image_size)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mask_path = cat_dir
                    .join("ground_truth")
                    .join(&kind)
                    .join(format!("{stem}_mask.png"));
                let mask = if is_good {
                    None
                } else if mask_path.is_file() {
                    Some(read_mask(&mask_path, image_size)?)
                } else {
                    return Err(PvqaeError::Integrity(format!(
                        "defect image {} has no mask at {}",
                        path.display(),
                        mask_path.display()
                    )));
                };
                test.push(ImageSample {
                    pixels,
                    label: if is_good { Label::Normal } else { Label::Defect },
                    mask,
                    category: cat.clone(),
                    path: path.display().to_string(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        train,
        test,
        categories: cats,
        image_size,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Parameters of the synthetic texture benchmark. Sample counts are per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_defect: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub coarse_grid: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test_normal: 20,
            n_test_defect: 20,
            image_size: 64,
            n_classes: 2,
            coarse_grid: 4,
            seed: 0,
        }
    }
}

/// Generator-side ground truth kept next to each synthetic sample.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// The image before any defect was injected.
    pub clean: Array3<f32>,
    /// `(g, g)` coarse-cell map: true where the cell holds the detailed texture.
    pub detail_cells: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub train_truth: Vec<SynthTruth>,
    pub test_truth: Vec<SynthTruth>,
}

const TEXTURE_KINDS: usize = 3;

/// Coarse-cell layout of the detailed region for a class.
pub fn class_layout(class: usize, g: usize) -> Array2<bool> {
    let half = g / 2;
    match class % 4 {
        0 => Array2::from_shape_fn((g, g), |(_, j)| j < half.max(1)),
        1 => Array2::from_shape_fn((g, g), |(i, _)| i >= half),
        2 => {
            let lo = g / 4;
            let hi = g - g / 4;
            Array2::from_shape_fn((g, g), |(i, j)| i >= lo && i < hi && j >= lo && j < hi)
        }
        _ => Array2::from_shape_fn((g, g), |(i, j)| i + j < g),
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Side of the texture blocks in pixels.
const BLOCK: usize = 4;

/// Sign of pixel `(y, x)` inside a block whose random state is `state`.
fn texture_sign(kind: usize, state: bool, y: usize, x: usize) -> bool {
    let (dy, dx) = (y % BLOCK, x % BLOCK);
    match kind {
        // flat blocks
        0 => state,
        // blocks split into left and right halves
        1 => state == (dx < BLOCK / 2),
        // blocks split along the diagonal
        _ => state == (dx >= dy),
    }
}

/// Colours shared by every image of a class.
#[derive(Debug, Clone, Copy)]
struct Palette {
    base: [f32; 3],
    tint: [f32; 3],
}

impl Palette {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: std::array::from_fn(|_| rng.gen_range(0.35..0.65)),
            tint: std::array::from_fn(|_| rng.gen_range(0.15..0.25)),
        }
    }
}

/// Per-image texture parameters.
#[derive(Debug, Clone, Copy)]
struct Style {
    kind: usize,
    base: [f32; 3],
    tint: [f32; 3],
}

impl Style {
    fn texel(&self, state: bool, y: usize, x: usize, c: usize, rng: &mut ChaCha8Rng) -> f32 {
        let sign = if texture_sign(self.kind, state, y, x) { 1.0 } else { -1.0 };
        quantize(self.base[c] + sign * self.tint[c] + rng.gen_range(-0.03..0.03))
    }
}

fn render_normal(class: usize, palette: &Palette, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (SynthTruth, Style) {
    let n = spec.image_size;
    let cell = n / spec.coarse_grid;
    let layout = class_layout(class, spec.coarse_grid);
    let gain = rng.gen_range(0.9..1.1f32);
    let style = Style {
        kind: class % TEXTURE_KINDS,
        base: std::array::from_fn(|c| palette.base[c] + rng.gen_range(-0.03..0.03)),
        tint: std::array::from_fn(|c| gain * palette.tint[c]),
    };
    let blocks = n.div_ceil(BLOCK);
    let states = Array2::from_shape_simple_fn((blocks, blocks), || rng.gen_bool(0.5));
    let mut pixels = Array3::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                pixels[[y, x, c]] = if layout[[y / cell, x / cell]] {
                    style.texel(states[[y / BLOCK, x / BLOCK]], y, x, c, rng)
                } else {
                    quantize(style.base[c])
                };
            }
        }
    }
    let truth = SynthTruth {
        clean: pixels,
        detail_cells: layout,
    };
    (truth, style)
}

/// Top-left corner of a `side` square whose pixels all lie in cells where `layout == want`.
fn place_in_region(layout: &Array2<bool>, cell: usize, side: usize, want: bool, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let n = layout.dim().0 * cell;
    (0..64).find_map(|_| {
        let y0 = rng.gen_range(0..=n - side);
        let x0 = rng.gen_range(0..=n - side);
        let fits = (y0 / cell..=(y0 + side - 1) / cell)
            .all(|i| (x0 / cell..=(x0 + side - 1) / cell).all(|j| layout[[i, j]] == want));
        fits.then_some((y0, x0))
    })
}

/// Injects one square defect and returns the defective image with its exact footprint.
///
/// Kinds, drawn uniformly: the class texture spilling into a flat region, a flat scar inside the
/// textured region, and a speckled or solid intensity shift anywhere.
fn inject_defect(truth: &SynthTruth, style: &Style, rng: &mut ChaCha8Rng) -> (Array3<f32>, Array2<u8>) {
    let clean = &truth.clean;
    let (n, _, _) = clean.dim();
    let cell = n / truth.detail_cells.dim().0;
    let side = rng.gen_range(10..=16).min(n);
    let mut footprint = Array2::<u8>::zeros((n, n));
    let mut pixels = clean.clone();
    let kind = rng.gen_range(0..3);
    let spot = match kind {
        0 => place_in_region(&truth.detail_cells, cell, side, false, rng),
        1 => place_in_region(&truth.detail_cells, cell, side, true, rng),
        _ => None,
    };
    if let Some((y0, x0)) = spot {
        let states = Array2::from_shape_simple_fn((n.div_ceil(BLOCK), n.div_ceil(BLOCK)), || rng.gen_bool(0.5));
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for c in 0..3 {
                    pixels[[y, x, c]] = if kind == 0 {
                        style.texel(states[[y / BLOCK, x / BLOCK]], y, x, c, rng)
                    } else {
                        quantize(style.base[c])
                    };
                }
            }
        }
    } else {
        let y0 = rng.gen_range(0..=n - side);
        let x0 = rng.gen_range(0..=n - side);
        let speckled = rng.gen_bool(0.5);
        let magnitude = rng.gen_range(0.2..0.3f32);
        let flip = rng.gen_bool(0.5);
        // speckle flips the sign per 2x2 block
        let signs = Array2::from_shape_simple_fn((side.div_ceil(2), side.div_ceil(2)), || rng.gen_bool(0.5));
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let up = if speckled { signs[[(y - y0) / 2, (x - x0) / 2]] } else { flip };
                let shift = if up { magnitude } else { -magnitude };
                for c in 0..3 {
                    pixels[[y, x, c]] = quantize(clean[[y, x, c]] + shift);
                }
            }
        }
    }
    for ((y, x), m) in footprint.indexed_iter_mut() {
        *m = u8::from((0..3).any(|c| pixels[[y, x, c]] != clean[[y, x, c]]));
    }
    (pixels, footprint)
}

/// Builds the synthetic texture benchmark; a pure function of `spec`.
///
/// Each class pairs a flat region with a class-specific detailed texture laid out on the
/// coarse cell grid. Defect samples carry one injected square defect.
pub fn synth_texture_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.n_train == 0 || spec.n_test_normal == 0 || spec.n_test_defect == 0 || spec.n_classes == 0
    {
        return Err(PvqaeError::Config("synthetic sample counts must be >= 1".into()));
    }
    if spec.coarse_grid == 0 || spec.image_size % spec.coarse_grid != 0 {
        return Err(PvqaeError::Config(format!(
            "image_size {} is not divisible by coarse grid {}",
            spec.image_size, spec.coarse_grid
        )));
    }
    if spec.image_size / spec.coarse_grid < 2 || spec.image_size < 24 {
        return Err(PvqaeError::Config("synthetic images must be at least 24 px with cells >= 2 px".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categories: Vec<String> = (0..spec.n_classes).map(|k| format!("texture_{k:02}")).collect();
    let mut train = Vec::new();
    let mut train_truth = Vec::new();
    let mut test = Vec::new();
    let mut test_truth = Vec::new();
    for (class, cat) in categories.iter().enumerate() {
        let palette = Palette::draw(&mut rng);
        for i in 0..spec.n_train {
            let (truth, _) = render_normal(class, &palette, spec, &mut rng);
            train.push(ImageSample {
                pixels: truth.clean.clone(),
                label: Label::Normal,
                mask: None,
                category: cat.clone(),
                path: format!("synthetic/{cat}/train/good/{i:03}"),
            });
            train_truth.push(truth);
        }
        for i in 0..spec.n_test_normal {
            let (truth, _) = render_normal(class, &palette, spec, &mut rng);
            test.push(ImageSample {
                pixels: truth.clean.clone(),
                label: Label::Normal,
                mask: None,
                category: cat.clone(),
                path: format!("synthetic/{cat}/test/good/{i:03}"),
            });
            test_truth.push(truth);
        }
        for i in 0..spec.n_test_defect {
            let (truth, style) = render_normal(class, &palette, spec, &mut rng);
            let (pixels, mask) = inject_defect(&truth, &style, &mut rng);
            test.push(ImageSample {
                pixels,
                label: Label::Defect,
                mask: Some(mask),
                category: cat.clone(),
                path: format!("synthetic/{cat}/test/defect/{i:03}"),
            });
            test_truth.push(truth);
        }
    }
    Ok(SynthDataset {
        manifest: DatasetManifest {
            train,
            test,
            categories,
            image_size: spec.image_size,
        },
        train_truth,
        test_truth,
    })
}

/// Writes a manifest as an MVTec-style tree readable by [`load_dataset`].
pub fn write_mvtec_layout(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| PvqaeError::io(p, e));
    for cat in &manifest.categories {
        let cat_dir = root.join(cat);
        let train_dir = cat_dir.join("train").join("good");
        mkdir(&train_dir)?;
        for (i, s) in manifest.train.iter().filter(|s| &s.category == cat).enumerate() {
            save_rgb_png(&s.pixels, &train_dir.join(format!("{i:03}.png")))?;
        }
        let good_dir = cat_dir.join("test").join("good");
        let defect_dir = cat_dir.join("test").join("defect");
        let gt_dir = cat_dir.join("ground_truth").join("defect");
        mkdir(&good_dir)?;
        let (mut n_good, mut n_defect) = (0, 0);
        for s in manifest.test.iter().filter(|s| &s.category == cat) {
            match s.label {
                Label::Normal => {
                    save_rgb_png(&s.pixels, &good_dir.join(format!("{n_good:03}.png")))?;
                    n_good += 1;
                }
                Label::Defect => {
                    mkdir(&defect_dir)?;
                    mkdir(&gt_dir)?;
                    save_rgb_png(&s.pixels, &defect_dir.join(format!("{n_defect:03}.png")))?;
                    let mask = s.mask_or_zeros().mapv(|v| if v > 0 { 255 } else { 0 });
                    save_gray_png(&mask, &gt_dir.join(format!("{n_defect:03}_mask.png")))?;
                    n_defect += 1;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Half-range of the brightness, contrast and saturation factors.
    pub jitter_strength: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            jitter_strength: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            jitter_strength: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.hflip_prob) || !ok(self.vflip_prob) || !(self.jitter_strength >= 0.0) {
            return Err(PvqaeError::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

fn gray(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(pixels: &mut Array3<f32>, strength: f64, rng: &mut impl Rng) {
    let s = strength as f32;
    let brightness = 1.0 + rng.gen_range(-s..=s);
    let contrast = 1.0 + rng.gen_range(-s..=s);
    let saturation = 1.0 + rng.gen_range(-s..=s);
    pixels.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let (h, w, _) = pixels.dim();
    let mean_gray = pixels
        .lanes(Axis(2))
        .into_iter()
        .map(|p| gray(&[p[0], p[1], p[2]]))
        .sum::<f32>()
        / (h * w) as f32;
    pixels.mapv_inplace(|v| ((v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));
    for mut px in pixels.lanes_mut(Axis(2)) {
        let g = gray(&[px[0], px[1], px[2]]);
        for c in 0..3 {
            px[c] = (g + (px[c] - g) * saturation).clamp(0.0, 1.0);
        }
    }
}

/// Random flips (shared by pixels and mask) followed by colour jitter. Train-time only.
pub fn augment(sample: &ImageSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> ImageSample {
    let mut out = sample.clone();
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        out.pixels.invert_axis(Axis(1));
        if let Some(m) = out.mask.as_mut() {
            m.invert_axis(Axis(1));
        }
    }
    if cfg.vflip_prob > 0.0 && rng.gen_bool(cfg.vflip_prob) {
        out.pixels.invert_axis(Axis(0));
        if let Some(m) = out.mask.as_mut() {
            m.invert_axis(Axis(0));
        }
    }
    if cfg.jitter_strength > 0.0 {
        color_jitter(&mut out.pixels, cfg.jitter_strength, rng);
    }
    // invert_axis only flips strides; hand back standard layout
    out.pixels = out.pixels.as_standard_layout().to_owned();
    out.mask = out.mask.map(|m| m.as_standard_layout().to_owned());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asymmetric_sample() -> ImageSample {
        let pixels = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y * 16 + x * 4 + c) as f32 / 64.0);
        ImageSample {
            pixels,
            label: Label::Normal,
            mask: Some(Array2::from_shape_fn((4, 4), |(y, x)| u8::from(x == 0 && y < 2))),
            category: "a".into(),
            path: "mem".into(),
        }
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let s = asymmetric_sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, &AugmentationConfig::identity(), &mut rng), s);
    }

    #[test]
    fn hflip_twice_restores_and_reverses_columns() {
        let s = asymmetric_sample();
        let cfg = AugmentationConfig {
            hflip_prob: 1.0,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&s, &cfg, &mut rng);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(once.pixels[[y, x, c]], s.pixels[[y, 3 - x, c]]);
                }
                assert_eq!(once.mask.as_ref().unwrap()[[y, x]], s.mask.as_ref().unwrap()[[y, 3 - x]]);
            }
        }
        let twice = augment(&once, &cfg, &mut rng);
        assert_eq!(twice, s);
    }

    #[test]
    fn jitter_stays_in_unit_range() {
        let s = asymmetric_sample();
        let cfg = AugmentationConfig {
            jitter_strength: 0.9,
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let out = augment(&s, &cfg, &mut rng);
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augmentation_is_deterministic_given_rng() {
        let s = asymmetric_sample();
        let cfg = AugmentationConfig::default();
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn synth_rejects_indivisible_grid() {
        let spec = SynthSpec {
            image_size: 66,
            coarse_grid: 4,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_texture_dataset(&spec), Err(PvqaeError::Config(_))));
    }

    #[test]
    fn synth_counts_and_masks() {
        let spec = SynthSpec {
            n_train: 3,
            n_test_normal: 2,
            n_test_defect: 20,
            n_classes: 1,
            ..SynthSpec::default()
        };
        let ds = synth_texture_dataset(&spec).unwrap();
        assert_eq!(ds.manifest.train.len(), 3);
        let with_mask = ds
            .manifest
            .test
            .iter()
            .filter(|s| s.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v == 1)))
            .count();
        assert_eq!(with_mask, 20);
        ds.manifest.validate().unwrap();
    }

    #[test]
    fn defect_mask_equals_pixel_diff_footprint() {
        let spec = SynthSpec {
            n_train: 1,
            n_test_normal: 1,
            n_test_defect: 25,
            n_classes: 2,
            ..SynthSpec::default()
        };
        let ds = synth_texture_dataset(&spec).unwrap();
        for (s, truth) in ds.manifest.test.iter().zip(&ds.test_truth) {
            let (h, w, _) = s.pixels.dim();
            let diff = Array2::from_shape_fn((h, w), |(y, x)| {
                u8::from((0..3).any(|c| s.pixels[[y, x, c]] != truth.clean[[y, x, c]]))
            });
            assert_eq!(diff, s.mask_or_zeros(), "{}", s.path);
        }
    }

    #[test]
    fn synth_is_pure_function_of_spec() {
        let spec = SynthSpec {
            n_train: 2,
            n_test_normal: 2,
            n_test_defect: 2,
            ..SynthSpec::default()
        };
        let a = synth_texture_dataset(&spec).unwrap();
        let b = synth_texture_dataset(&spec).unwrap();
        assert_eq!(a.manifest.train, b.manifest.train);
        assert_eq!(a.manifest.test, b.manifest.test);
    }

    #[test]
    fn layouts_mix_flat_and_detailed_cells() {
        for class in 0..4 {
            let l = class_layout(class, 4);
            let n = l.iter().filter(|&&d| d).count();
            assert!(n > 0 && n < 16, "class {class}");
        }
    }
}
