//! Synthetic two-domain dataset and grayscale PNG I/O.
//!
//! Source (S) images are filled anti-aliased ellipses on a background that
//! is exactly constant within each image. Target (T) images are dark
//! ellipse outlines on a noisy near-white background: the same shape family
//! with different background statistics, which is the setting where plain
//! cycle-consistent translation corrupts uniform backgrounds.
//!
//! Pixels live in [-1, 1]; files are 8-bit grayscale PNG with
//! `v = byte / 127.5 - 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tdomain\tbackground\tellipses";
/// Sub-samples per pixel side used for anti-aliasing.
const SUPERSAMPLE: usize = 4;
/// Erosion margin (pixels) between shapes and the background mask.
pub const MASK_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    S,
    T,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::S => "S",
            Domain::T => "T",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "S" => Some(Domain::S),
            "T" => Some(Domain::T),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Images per domain.
    pub n_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Source background intensity, uniform per image.
    pub background_lo: f64,
    pub background_hi: f64,
    /// Source fill intensity range.
    pub fill_lo: f64,
    pub fill_hi: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Ellipse semi-axes as a fraction of the image size.
    pub axis_lo: f64,
    pub axis_hi: f64,
    /// Target background level and per-pixel noise.
    pub target_background: f64,
    pub target_noise: f64,
    /// Target outline width in pixels and its (dark) ink range.
    pub outline_width: f64,
    pub ink_lo: f64,
    pub ink_hi: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 400,
            image_size: 32,
            seed: 0,
            background_lo: -0.8,
            background_hi: 0.0,
            fill_lo: 0.3,
            fill_hi: 1.0,
            min_shapes: 1,
            max_shapes: 3,
            axis_lo: 0.08,
            axis_hi: 0.2,
            target_background: 0.9,
            target_noise: 0.05,
            outline_width: 1.2,
            ink_lo: -1.0,
            ink_hi: -0.6,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (-1.0..=1.0).contains(&v);
        let checks = [
            (self.n_images >= 1, "n_images must be at least 1"),
            (self.image_size >= 8, "image_size must be at least 8"),
            (
                self.background_lo <= self.background_hi && in_range(self.background_lo) && in_range(self.background_hi),
                "background range must be ordered within [-1, 1]",
            ),
            (
                self.fill_lo <= self.fill_hi && in_range(self.fill_lo) && in_range(self.fill_hi),
                "fill range must be ordered within [-1, 1]",
            ),
            (
                self.ink_lo <= self.ink_hi && in_range(self.ink_lo) && in_range(self.ink_hi),
                "ink range must be ordered within [-1, 1]",
            ),
            (
                1 <= self.min_shapes && self.min_shapes <= self.max_shapes,
                "shape counts must satisfy 1 <= min_shapes <= max_shapes",
            ),
            (
                0.0 < self.axis_lo && self.axis_lo <= self.axis_hi && self.axis_hi <= 0.5,
                "axis fractions must satisfy 0 < axis_lo <= axis_hi <= 0.5",
            ),
            (in_range(self.target_background), "target_background must lie in [-1, 1]"),
            (self.target_noise >= 0.0 && self.target_noise.is_finite(), "target_noise must be >= 0"),
            (self.outline_width > 0.0 && self.outline_width.is_finite(), "outline_width must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("dataset spec: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Rotated ellipse in pixel coordinates (pixel `(i, j)` covers
/// `[j, j+1) x [i, i+1)`); `intensity` is the fill (S) or ink (T) level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Normalised radius of a point: `< 1` inside, `> 1` outside.
    fn radius2(&self, x: f64, y: f64, grow: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / (self.a + grow)).powi(2) + (v / (self.b + grow)).powi(2)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.radius2(x, y, 0.0) <= 1.0
    }

    /// On the outline band of width `w` centred on the boundary.
    fn on_outline(&self, x: f64, y: f64, w: f64) -> bool {
        let inner = (self.a.min(self.b) - w / 2.0).max(0.0);
        let shrink = inner - self.a.min(self.b);
        self.radius2(x, y, w / 2.0) <= 1.0 && (inner == 0.0 || self.radius2(x, y, shrink) > 1.0)
    }
}

/// Shapes and background level an image was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGeometry {
    pub background: f64,
    pub ellipses: Vec<Ellipse>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `None` when loaded from a folder not named `S` or `T`.
    pub domain: Option<Domain>,
    /// `[1, 1, H, W]`, values in [-1, 1].
    pub pixels: Tensor,
    pub geometry: Option<ImageGeometry>,
}

fn image_id(domain: Domain, i: usize) -> String {
    format!("{}_{i:05}", domain.dir_name().to_lowercase())
}

/// Sub-sample coverage fraction of pixel `(i, j)` under `inside`.
fn coverage(i: usize, j: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut hits = 0;
    for si in 0..SUPERSAMPLE {
        for sj in 0..SUPERSAMPLE {
            let y = i as f64 + (si as f64 + 0.5) * step;
            let x = j as f64 + (sj as f64 + 0.5) * step;
            hits += usize::from(inside(x, y));
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn random_ellipses(spec: &DatasetSpec, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<Ellipse> {
    let size = spec.image_size as f64;
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    (0..count)
        .map(|_| Ellipse {
            cx: rng.gen_range(0.2..=0.8) * size,
            cy: rng.gen_range(0.2..=0.8) * size,
            a: rng.gen_range(spec.axis_lo..=spec.axis_hi) * size,
            b: rng.gen_range(spec.axis_lo..=spec.axis_hi) * size,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(lo..=hi),
        })
        .collect()
}

fn render_one(spec: &DatasetSpec, domain: Domain, index: usize) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((domain as u64) << 32) | index as u64);
    let n = spec.image_size;
    let (background, ellipses, mut px) = match domain {
        Domain::S => {
            let bg = rng.gen_range(spec.background_lo..=spec.background_hi);
            let shapes = random_ellipses(spec, &mut rng, spec.fill_lo, spec.fill_hi);
            (bg, shapes, vec![bg; n * n])
        }
        Domain::T => {
            let shapes = random_ellipses(spec, &mut rng, spec.ink_lo, spec.ink_hi);
            let px = (0..n * n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (spec.target_background + spec.target_noise * z).clamp(-1.0, 1.0)
                })
                .collect();
            (spec.target_background, shapes, px)
        }
    };
    for e in &ellipses {
        for i in 0..n {
            for j in 0..n {
                let cov = match domain {
                    Domain::S => coverage(i, j, |x, y| e.contains(x, y)),
                    Domain::T => coverage(i, j, |x, y| e.on_outline(x, y, spec.outline_width)),
                };
                if cov > 0.0 {
                    let p = &mut px[i * n + j];
                    *p = *p * (1.0 - cov) + e.intensity * cov;
                }
            }
        }
    }
    ImageRecord {
        id: image_id(domain, index),
        domain: Some(domain),
        pixels: Tensor::from_parts(vec![1, 1, n, n], px),
        geometry: Some(ImageGeometry { background, ellipses }),
    }
}

/// Renders both domains in memory (before 8-bit quantisation).
pub fn render(spec: &DatasetSpec) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    spec.validate()?;
    let s = exec::map_range(spec.n_images, |i| render_one(spec, Domain::S, i));
    let t = exec::map_range(spec.n_images, |i| render_one(spec, Domain::T, i));
    Ok((s, t))
}

pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Writes a single-channel `[1, 1, H, W]` or `[1, H, W]`-sized image.
pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = match *pixels.shape() {
        [1, 1, h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: pixels.shape().to_vec(),
                reason: "save_png writes one single-channel image".into(),
            })
        }
    };
    let bytes = pixels.data().iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_png(path: &Path, image_size: usize) -> Result<Tensor> {
    let err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| err(format!("cannot decode: {e}")))?;
    if img.color() != ColorType::L8 {
        return Err(err(format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (image_size, image_size) {
        return Err(err(format!(
            "image is {w}x{h}, expected {image_size}x{image_size} (images are never rescaled)"
        )));
    }
    let data = img.into_luma8().into_raw().into_iter().map(dequantize).collect();
    Ok(Tensor::from_parts(vec![1, 1, h, w], data))
}

fn encode_ellipses(ellipses: &[Ellipse]) -> String {
    let mut out = String::new();
    for (k, e) in ellipses.iter().enumerate() {
        if k > 0 {
            out.push(';');
        }
        write!(out, "{},{},{},{},{},{}", e.cx, e.cy, e.a, e.b, e.theta, e.intensity).expect("write to String");
    }
    out
}

fn decode_ellipses(s: &str) -> Option<Vec<Ellipse>> {
    s.split(';')
        .map(|e| {
            let v: Vec<f64> = e.split(',').map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
            match v[..] {
                [cx, cy, a, b, theta, intensity] => Some(Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    theta,
                    intensity,
                }),
                _ => None,
            }
        })
        .collect()
}

/// One line per image: id, domain, background level, ellipse parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, Domain, ImageGeometry)>,
}

impl Manifest {
    pub fn get(&self, id: &str) -> Option<&ImageGeometry> {
        self.entries.iter().find(|(i, _, _)| i == id).map(|(_, _, g)| g)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for (id, domain, g) in &self.entries {
            let ell = encode_ellipses(&g.ellipses);
            writeln!(out, "{id}\t{}\t{}\t{ell}", domain.dir_name(), g.background).expect("write to String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Dataset("manifest header missing".into()));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Dataset(format!("manifest line {}: malformed record", n + 2));
            let f: Vec<&str> = line.split('\t').collect();
            let [id, domain, bg, ell] = f[..] else {
                return Err(bad());
            };
            let domain = Domain::parse(domain).ok_or_else(bad)?;
            let background = bg.parse().map_err(|_| bad())?;
            let ellipses = decode_ellipses(ell).ok_or_else(bad)?;
            entries.push((id.to_string(), domain, ImageGeometry { background, ellipses }));
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Writes `out_dir/S/*.png`, `out_dir/T/*.png` and `out_dir/manifest.tsv`.
pub fn generate(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    let (s, t) = render(spec)?;
    let mut manifest = Manifest::default();
    for (domain, records) in [(Domain::S, &s), (Domain::T, &t)] {
        let dir = out_dir.join(domain.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let written = exec::map_range(records.len(), |i| save_png(&dir.join(format!("{}.png", records[i].id)), &records[i].pixels));
        written.into_iter().collect::<Result<Vec<()>>>()?;
        for r in records {
            manifest.entries.push((r.id.clone(), domain, r.geometry.clone().expect("rendered with geometry")));
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// PNG files of `dir` in filename order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every PNG of `dir` (sorted by filename). Ids are file stems;
/// the domain is taken from the folder name when it is `S` or `T`.
pub fn load_folder(dir: &Path, image_size: usize) -> Result<Vec<ImageRecord>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} contains no PNG images (empty dataset)", dir.display())));
    }
    let domain = dir.file_name().and_then(|n| n.to_str()).and_then(Domain::parse);
    let pixels = exec::map_range(files.len(), |i| load_png(&files[i], image_size));
    files
        .iter()
        .zip(pixels)
        .map(|(path, px)| {
            Ok(ImageRecord {
                id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                domain,
                pixels: px?,
                geometry: None,
            })
        })
        .collect()
}

/// Loads `root/<domain>` and attaches geometry from `root/manifest.tsv`.
pub fn load_domain(root: &Path, domain: Domain, image_size: usize) -> Result<Vec<ImageRecord>> {
    let mut records = load_folder(&root.join(domain.dir_name()), image_size)?;
    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    for r in &mut records {
        r.geometry = manifest.get(&r.id).cloned();
    }
    Ok(records)
}

/// Stacks record pixels into one `[N, 1, H, W]` batch.
pub fn stack_pixels(records: &[ImageRecord]) -> Result<Tensor> {
    let planes: Vec<Tensor> = records.iter().map(|r| r.pixels.clone()).collect();
    Tensor::stack(&planes)
}

/// True on pixels farther than [`MASK_MARGIN`] pixels (Chebyshev) from any
/// pixel a shape touches. Row-major, `H * W` entries.
pub fn background_mask(record: &ImageRecord) -> Result<Vec<bool>> {
    let g = record
        .geometry
        .as_ref()
        .ok_or_else(|| Error::Dataset(format!("{} has no shape geometry (manifest entry missing)", record.id)))?;
    let [_, _, h, w] = record.pixels.dims4()?;
    let touched: Vec<bool> = (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            g.ellipses.iter().any(|e| coverage(i, j, |x, y| e.radius2(x, y, 0.0) <= 1.0) > 0.0)
        })
        .collect();
    let m = MASK_MARGIN;
    Ok((0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let rows = i.saturating_sub(m)..(i + m + 1).min(h);
            !rows.into_iter().any(|ii| (j.saturating_sub(m)..(j + m + 1).min(w)).any(|jj| touched[ii * w + jj]))
        })
        .collect())
}
