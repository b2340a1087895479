//! Procedural paired segmentation domains.
//!
//! Scenes are filled ellipses and polygons over a textured background. A
//! labelled "source" domain is rendered with a fixed class palette; an
//! unlabelled "target" domain renders different scenes and then applies a
//! style shift (hue rotation, per-class brightness, blur, grain) that leaves
//! the labels untouched.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelops::LabelMap;
use crate::tensor::{Scalar, Tensor};

/// `3 x H x W` RGB image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let hw = height * width;
        let mut data = Vec::with_capacity(3 * hw);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, hw));
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        [self.data[p], self.data[hw + p], self.data[2 * hw + p]]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    /// Item `n` of a `[N, 3, H, W]` batch.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>, n: usize) -> Self {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 3, "image tensors have 3 channels");
        ImageTensor { height: h, width: w, data: t.item_slice(n).iter().map(|v| v.as_f64() as f32).collect() }
    }

    /// 8-bit interleaved RGB, mapped linearly from `[-1, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                out.push(quantize(self.data[c * hw + p]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let hw = height * width;
        if rgb.len() != 3 * hw {
            return Err(Error::Shape(format!("{} bytes for a {height}x{width} RGB image", rgb.len())));
        }
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = rgb[3 * p + c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(ImageTensor { height, width, data })
    }
}

fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { seed: 0, height: 64, width: 64, num_classes: 5, min_shapes: 3, max_shapes: 6 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidArgument(format!("num_classes {} must be in [2, 255]", self.num_classes)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftParams {
    pub hue_rotation: f32,
    /// Additive brightness per class, indexed by class; missing entries are 0.
    pub class_brightness: Vec<f32>,
    pub texture_noise_amplitude: f32,
    pub blur_radius: usize,
}

impl Default for DomainShiftParams {
    fn default() -> Self {
        DomainShiftParams {
            hue_rotation: 40.0,
            class_brightness: vec![0.0, -0.15, 0.1, -0.1, 0.15],
            texture_noise_amplitude: 0.15,
            blur_radius: 1,
        }
    }
}

impl DomainShiftParams {
    pub fn identity() -> Self {
        DomainShiftParams { hue_rotation: 0.0, class_brightness: Vec::new(), texture_noise_amplitude: 0.0, blur_radius: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.class_brightness.iter().find(|b| !(b.abs() <= 0.3)) {
            return Err(Error::InvalidArgument(format!("class brightness offset {b} is outside [-0.3, 0.3]")));
        }
        if !(self.texture_noise_amplitude >= 0.0) || !self.hue_rotation.is_finite() {
            return Err(Error::InvalidArgument("noise amplitude must be >= 0 and hue finite".into()));
        }
        Ok(())
    }
}

/// Order-independent per-sample seed (SplitMix64 finalizer over the pair).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_hsv(class: usize, num_classes: usize) -> [f32; 3] {
    if class == 0 {
        [30.0, 0.15, 0.45]
    } else {
        [(class - 1) as f32 * 360.0 / (num_classes - 1) as f32, 0.7, 0.8]
    }
}

enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, cos: f32, sin: f32 },
    Polygon { pts: Vec<(f32, f32)> },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { pts } => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

struct Placed {
    shape: Shape,
    class: u8,
    rgb: [f32; 3],
    shade: (f32, f32),
}

fn to_signed(rgb: [f32; 3]) -> [f32; 3] {
    rgb.map(|v| v * 2.0 - 1.0)
}

fn jittered_color(rng: &mut ChaCha8Rng, class: usize, num_classes: usize) -> [f32; 3] {
    let [h, s, v] = class_hsv(class, num_classes);
    let h = h + rng.random_range(-8.0..8.0);
    let s = (s + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0);
    let v = (v + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0);
    to_signed(hsv_to_rgb([h, s, v]))
}

/// Source-style rendering of scene `index` and its exact pixel labels.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(ImageTensor, LabelMap)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let bg = jittered_color(&mut rng, 0, c);
    let bg_shade = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let side = h.min(w) as f32;
    let mut placed = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(1..c);
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let shape = if rng.random_bool(0.5) {
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.08..0.25) * side,
                ry: rng.random_range(0.08..0.25) * side,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        } else {
            let k = rng.random_range(3..=5);
            let r = rng.random_range(0.12..0.28) * side;
            let mut angles: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
            angles.sort_by(f32::total_cmp);
            let pts = angles
                .into_iter()
                .map(|a| {
                    let rr = r * rng.random_range(0.6..1.0f32);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect();
            Shape::Polygon { pts }
        };
        let rgb = jittered_color(&mut rng, class, c);
        let shade = (rng.random_range(-0.1..0.1f32), rng.random_range(-0.1..0.1f32));
        placed.push(Placed { shape, class: class as u8, rgb, shade });
    }
    let grain: Vec<f32> = (0..3 * h * w).map(|_| rng.random_range(-0.02..0.02f32)).collect();

    loop {
        let mut labels = vec![0u8; h * w];
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for (si, s) in placed.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        labels[y * w + x] = s.class;
                        owner[y * w + x] = Some(si);
                    }
                }
            }
        }
        if !labels.contains(&0) {
            placed.pop();
            continue;
        }
        let hw = h * w;
        let mut data = vec![0.0f32; 3 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (u, v) = (x as f32 / w as f32 - 0.5, y as f32 / h as f32 - 0.5);
                let (rgb, shade) = match owner[p] {
                    Some(si) => (placed[si].rgb, placed[si].shade),
                    None => (bg, bg_shade),
                };
                let sh = shade.0 * u + shade.1 * v;
                for ch in 0..3 {
                    data[ch * hw + p] = (rgb[ch] + sh + grain[ch * hw + p]).clamp(-1.0, 1.0);
                }
            }
        }
        return Ok((ImageTensor { height: h, width: w, data }, LabelMap::new(h, w, c, labels)?));
    }
}

fn box_blur(data: &mut [f32], h: usize, w: usize, r: usize) {
    let hw = h * w;
    let norm = 1.0 / (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; hw];
    for plane in data.chunks_mut(hw) {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=r as isize {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    s += plane[y * w + xx];
                }
                tmp[y * w + x] = s * norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for d in -(r as isize)..=r as isize {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[yy * w + x];
                }
                plane[y * w + x] = s * norm;
            }
        }
    }
}

/// Target-domain rendering of `img`. Labels are read (for per-class
/// brightness) but never modified.
pub fn apply_domain_shift(img: &ImageTensor, labels: &LabelMap, params: &DomainShiftParams, seed: u64) -> Result<ImageTensor> {
    if img.height != labels.height() || img.width != labels.width() {
        return Err(Error::Shape(format!(
            "image {}x{} vs labels {}x{}",
            img.height,
            img.width,
            labels.height(),
            labels.width()
        )));
    }
    params.validate()?;
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let mut data = img.data.clone();
    if params.hue_rotation != 0.0 {
        for p in 0..hw {
            let rgb = [0, 1, 2].map(|c| (data[c * hw + p] + 1.0) * 0.5);
            let [hh, s, v] = rgb_to_hsv(rgb);
            let out = hsv_to_rgb([hh + params.hue_rotation, s, v]);
            for c in 0..3 {
                data[c * hw + p] = out[c] * 2.0 - 1.0;
            }
        }
    }
    if params.class_brightness.iter().any(|&b| b != 0.0) {
        for (p, &l) in labels.data().iter().enumerate() {
            let b = params.class_brightness.get(l as usize).copied().unwrap_or(0.0);
            for c in 0..3 {
                data[c * hw + p] += b;
            }
        }
    }
    if params.blur_radius > 0 {
        box_blur(&mut data, h, w, params.blur_radius);
    }
    if params.texture_noise_amplitude > 0.0 {
        let a = params.texture_noise_amplitude;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in data.iter_mut() {
            *v += rng.random_range(-a..a);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(ImageTensor { height: h, width: w, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Target,
    /// Held-out target-domain scenes used for probes and qualitative panels.
    Probe,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::Probe => "probe",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Source => 0x5352_4300,
            Split::Target => 0x5447_5400,
            Split::Probe => 0x5052_4200,
        }
    }

    pub fn is_target_domain(self) -> bool {
        !matches!(self, Split::Source)
    }

    /// Scene spec whose seed stream is private to this split.
    pub fn scene_spec(self, spec: &SceneSpec) -> SceneSpec {
        SceneSpec { seed: sample_seed(spec.seed, self.salt()), ..spec.clone() }
    }

    pub fn shift_seed(self, spec: &SceneSpec, index: u64) -> u64 {
        sample_seed(sample_seed(spec.seed, self.salt() ^ 0xFF), index)
    }
}

/// One sample of `split`, in the style of its domain.
pub fn render_sample(spec: &SceneSpec, shift: &DomainShiftParams, split: Split, index: u64) -> Result<(ImageTensor, LabelMap)> {
    let (img, labels) = generate_scene(&split.scene_spec(spec), index)?;
    if split.is_target_domain() {
        let shifted = apply_domain_shift(&img, &labels, shift, split.shift_seed(spec, index))?;
        Ok((shifted, labels))
    } else {
        Ok((img, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub image_path: String,
    pub label_path: String,
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene: SceneSpec,
    pub shift: DomainShiftParams,
    /// Splits whose label files are for evaluation only.
    pub evaluation_only_labels: Vec<Split>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub source: usize,
    pub target: usize,
    pub probe: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_rgb_png(path: &Path, img: &ImageTensor) -> Result<()> {
    write_png(path, img.width as u32, img.height as u32, &img.to_rgb8(), image::ExtendedColorType::Rgb8)
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    write_png(path, labels.width() as u32, labels.height() as u32, labels.data(), image::ExtendedColorType::L8)
}

pub(crate) fn write_png(path: &Path, w: u32, h: u32, bytes: &[u8], color: image::ExtendedColorType) -> Result<()> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(bytes, w, h, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_file(path, &buf)
}

pub fn read_rgb_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    ImageTensor::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn read_label_png(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
    LabelMap::new(img.height() as usize, img.width() as usize, num_classes, img.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Renders every split to `out_dir` and writes the manifest.
pub fn build_dataset(
    spec: &SceneSpec,
    counts: SplitCounts,
    shift: &DomainShiftParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    shift.validate()?;
    let mut entries = Vec::new();
    for (split, n) in [(Split::Source, counts.source), (Split::Target, counts.target), (Split::Probe, counts.probe)] {
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n as u64 {
            let (img, labels) = render_sample(spec, shift, split, i)?;
            let image_path = format!("{}/img_{i:05}.png", split.name());
            let label_path = format!("{}/lbl_{i:05}.png", split.name());
            write_rgb_png(&out_dir.join(&image_path), &img)?;
            write_label_png(&out_dir.join(&label_path), &labels)?;
            entries.push(ManifestEntry {
                split,
                image_path,
                label_path,
                seed: sample_seed(split.scene_spec(spec).seed, i),
                index: i,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        scene: spec.clone(),
        shift: shift.clone(),
        evaluation_only_labels: vec![Split::Target, Split::Probe],
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Read access to a dataset written by [`build_dataset`].
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

/// Target-domain images without labels: the only target view the trainer gets.
#[derive(Clone)]
pub struct TargetImages {
    pub images: Vec<ImageTensor>,
}

/// Images with ground truth, for evaluation.
#[derive(Clone)]
pub struct EvaluationSet {
    pub split: Split,
    pub pairs: Vec<(ImageTensor, LabelMap)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn count(&self, split: Split) -> usize {
        self.manifest.entries.iter().filter(|e| e.split == split).count()
    }

    fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.entries.iter().filter(move |e| e.split == split)
    }

    pub fn source_pairs(&self) -> Result<Vec<(ImageTensor, LabelMap)>> {
        let c = self.manifest.scene.num_classes;
        self.entries(Split::Source)
            .map(|e| {
                Ok((
                    read_rgb_png(&self.root.join(&e.image_path))?,
                    read_label_png(&self.root.join(&e.label_path), c)?,
                ))
            })
            .collect()
    }

    pub fn target_images(&self) -> Result<TargetImages> {
        let images = self
            .entries(Split::Target)
            .map(|e| read_rgb_png(&self.root.join(&e.image_path)))
            .collect::<Result<_>>()?;
        Ok(TargetImages { images })
    }

    pub fn evaluation_set(&self, split: Split) -> Result<EvaluationSet> {
        let c = self.manifest.scene.num_classes;
        let pairs = self
            .entries(split)
            .map(|e| {
                Ok((
                    read_rgb_png(&self.root.join(&e.image_path))?,
                    read_label_png(&self.root.join(&e.label_path), c)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(EvaluationSet { split, pairs })
    }
}
