//! Severity binning, the synthetic back-image generator, corpus manifests,
//! bounding-box crops and training augmentations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::{standard_normal, Tensor};

/// Upper end of the angles drawn for the open-ended most severe bin.
pub const MAX_SAMPLED_ANGLE: f64 = 90.0;

/// Largest angle the generator accepts.
pub const MAX_ANGLE: f64 = 180.0;

fn check_angle(angle_deg: f64) -> Result<()> {
    if angle_deg.is_nan() || angle_deg < 0.0 {
        return Err(Error::invalid(format!("angle must be non-negative, got {angle_deg}")));
    }
    Ok(())
}

/// Normal [0,10], Minor (10,20], Moderate (20,45], Severe above 45.
pub fn general_level(angle_deg: f64) -> Result<usize> {
    check_angle(angle_deg)?;
    Ok(match angle_deg {
        a if a <= 10.0 => 1,
        a if a <= 20.0 => 2,
        a if a <= 45.0 => 3,
        _ => 4,
    })
}

/// Nine five-degree bins up to 45 and one bin for everything beyond.
pub fn fine_level(angle_deg: f64) -> Result<usize> {
    check_angle(angle_deg)?;
    if angle_deg > 45.0 {
        return Ok(10);
    }
    Ok(((angle_deg / 5.0).ceil() as usize).clamp(1, 9))
}

/// General level that contains a fine level.
pub fn fine_to_general(fine: usize) -> usize {
    match fine {
        0..=2 => 1,
        3..=4 => 2,
        5..=9 => 3,
        _ => 4,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    General,
    Fine,
}

impl Scheme {
    pub fn levels(self) -> usize {
        match self {
            Scheme::General => 4,
            Scheme::Fine => 10,
        }
    }

    pub fn level(self, angle_deg: f64) -> Result<usize> {
        match self {
            Scheme::General => general_level(angle_deg),
            Scheme::Fine => fine_level(angle_deg),
        }
    }

    /// Angle interval `[lo, hi]` that corpus sampling draws from for `level`.
    pub fn angle_range(self, level: usize) -> Result<(f64, f64)> {
        let r = match (self, level) {
            (Scheme::General, 1) => (0.0, 10.0),
            (Scheme::General, 2) => (10.0, 20.0),
            (Scheme::General, 3) => (20.0, 45.0),
            (Scheme::General, 4) => (45.0, MAX_SAMPLED_ANGLE),
            (Scheme::Fine, 1..=9) => ((level - 1) as f64 * 5.0, level as f64 * 5.0),
            (Scheme::Fine, 10) => (45.0, MAX_SAMPLED_ANGLE),
            _ => return Err(Error::invalid(format!("level {level} outside the {self:?} scheme"))),
        };
        Ok(r)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Scheme::General),
            "fine" => Ok(Scheme::Fine),
            _ => Err(Error::invalid(format!("unknown scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x: 0,
            y: 0,
            w: width,
            h: height,
        }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// One grayscale image with its angle label. `image` is `1×H×W` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub angle_deg: f64,
    pub bbox: BBox,
    pub general_level: usize,
    pub fine_level: usize,
}

impl Sample {
    pub fn new(image: Tensor, angle_deg: f64, bbox: BBox) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::InvalidShape {
                op: "sample",
                msg: format!("expected a 1×H×W image, got {shape:?}"),
            });
        }
        if !bbox.fits(shape[2], shape[1]) {
            return Err(Error::invalid(format!("bbox {bbox:?} outside a {}×{} image", shape[2], shape[1])));
        }
        Ok(Sample {
            general_level: general_level(angle_deg)?,
            fine_level: fine_level(angle_deg)?,
            image,
            angle_deg,
            bbox,
        })
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn level(&self, scheme: Scheme) -> usize {
        match scheme {
            Scheme::General => self.general_level,
            Scheme::Fine => self.fine_level,
        }
    }
}

/// Generator settings. Lengths are fractions of the canvas: horizontal ones
/// of the half-width, vertical ones of the height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub torso_top: f64,
    pub torso_bottom: f64,
    pub shoulder_half_width: f64,
    pub waist_ratio: f64,
    pub waist_level: f64,
    /// Shoulder-line slope per degree.
    pub tilt_gain: f64,
    /// Brightness of the scapular bump per degree.
    pub bump_gain: f64,
    /// Lateral waist displacement per degree.
    pub waist_gain: f64,
    pub groove_depth: f64,
    pub noise: f64,
    pub width_jitter: f64,
    pub brightness_jitter: f64,
    pub shift_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            torso_top: 0.14,
            torso_bottom: 0.95,
            shoulder_half_width: 0.66,
            waist_ratio: 0.8,
            waist_level: 0.66,
            tilt_gain: 0.0016,
            bump_gain: 0.004,
            waist_gain: 0.0012,
            groove_depth: 0.2,
            noise: 0.02,
            width_jitter: 0.06,
            brightness_jitter: 0.08,
            shift_jitter: 0.02,
            seed: 0,
        }
    }
}

const SYNTH_KEYS: [&str; 16] = [
    "width",
    "height",
    "torso_top",
    "torso_bottom",
    "shoulder_half_width",
    "waist_ratio",
    "waist_level",
    "tilt_gain",
    "bump_gain",
    "waist_gain",
    "groove_depth",
    "noise",
    "width_jitter",
    "brightness_jitter",
    "shift_jitter",
    "seed",
];

impl SynthConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&SYNTH_KEYS)?;
        let mut c = SynthConfig::default();
        kv.apply("width", &mut c.width)?;
        kv.apply("height", &mut c.height)?;
        kv.apply("torso_top", &mut c.torso_top)?;
        kv.apply("torso_bottom", &mut c.torso_bottom)?;
        kv.apply("shoulder_half_width", &mut c.shoulder_half_width)?;
        kv.apply("waist_ratio", &mut c.waist_ratio)?;
        kv.apply("waist_level", &mut c.waist_level)?;
        kv.apply("tilt_gain", &mut c.tilt_gain)?;
        kv.apply("bump_gain", &mut c.bump_gain)?;
        kv.apply("waist_gain", &mut c.waist_gain)?;
        kv.apply("groove_depth", &mut c.groove_depth)?;
        kv.apply("noise", &mut c.noise)?;
        kv.apply("width_jitter", &mut c.width_jitter)?;
        kv.apply("brightness_jitter", &mut c.brightness_jitter)?;
        kv.apply("shift_jitter", &mut c.shift_jitter)?;
        kv.apply("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("width", self.width);
        kv.set("height", self.height);
        kv.set("torso_top", self.torso_top);
        kv.set("torso_bottom", self.torso_bottom);
        kv.set("shoulder_half_width", self.shoulder_half_width);
        kv.set("waist_ratio", self.waist_ratio);
        kv.set("waist_level", self.waist_level);
        kv.set("tilt_gain", self.tilt_gain);
        kv.set("bump_gain", self.bump_gain);
        kv.set("waist_gain", self.waist_gain);
        kv.set("groove_depth", self.groove_depth);
        kv.set("noise", self.noise);
        kv.set("width_jitter", self.width_jitter);
        kv.set("brightness_jitter", self.brightness_jitter);
        kv.set("shift_jitter", self.shift_jitter);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("canvas must be at least 8×8"));
        }
        if !(0.0..1.0).contains(&self.torso_top) || self.torso_bottom <= self.torso_top || self.torso_bottom > 1.0 {
            return Err(Error::invalid("torso must satisfy 0 <= top < bottom <= 1"));
        }
        let non_negative = [
            self.tilt_gain,
            self.bump_gain,
            self.waist_gain,
            self.groove_depth,
            self.noise,
            self.width_jitter,
            self.brightness_jitter,
            self.shift_jitter,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) || !(self.shoulder_half_width > 0.0) {
            return Err(Error::invalid("generator gains and jitters must be non-negative"));
        }
        Ok(())
    }
}

/// Decorrelates `(master, index)` into a per-sample seed (SplitMix64 finalizer).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Lateral offset of a circular arc through the spine's end points that turns
/// by `angle` radians, at height `y` from the chord midpoint.
fn arc_offset(chord: f64, angle: f64, y: f64) -> f64 {
    if angle <= 0.0 {
        return 0.0;
    }
    let half = angle / 2.0;
    let r = chord / (2.0 * half.sin());
    (r * r - y * y).max(0.0).sqrt() - r * half.cos()
}

/// Renders a back silhouette whose asymmetry grows with `angle_deg`.
///
/// The spine bends towards the right, the right shoulder rises, the waist
/// shifts and a scapular bump brightens the right side. Every other feature is
/// mirror-symmetric, so at angle 0 without noise the image equals its mirror.
pub fn synth_back(angle_deg: f64, cfg: &SynthConfig, sample_seed: u64) -> Result<Sample> {
    check_angle(angle_deg)?;
    if angle_deg >= MAX_ANGLE {
        return Err(Error::invalid(format!("angle must be below {MAX_ANGLE}, got {angle_deg}")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let (w, h) = (cfg.width, cfg.height);
    let half_w = w as f64 / 2.0;
    // Vertical units converted to horizontal ones.
    let aspect = h as f64 / half_w;

    let width_scale = 1.0 + cfg.width_jitter * rng.gen_range(-1.0..=1.0);
    let brightness = 0.72 + cfg.brightness_jitter * rng.gen_range(-1.0..=1.0);
    let shift = cfg.shift_jitter * rng.gen_range(-1.0..=1.0);

    let shoulder = cfg.shoulder_half_width * width_scale;
    let top = cfg.torso_top + shift;
    let bottom = (cfg.torso_bottom + shift).min(1.0);
    let waist_v = cfg.waist_level + shift;
    let tilt = cfg.tilt_gain * angle_deg;
    let waist_shift = cfg.waist_gain * angle_deg;
    let bump = cfg.bump_gain * angle_deg;
    let bump_u = 0.45 * shoulder;
    let bump_v = top + 0.17;

    let spine_top = top + 0.06;
    let spine_bottom = bottom - 0.08;
    let chord = spine_bottom - spine_top;
    let spine_mid = (spine_top + spine_bottom) / 2.0;
    let theta = angle_deg.to_radians();

    let background = 0.08;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        let waist_profile = (-((v - waist_v) / 0.15).powi(2)).exp();
        let half_width = shoulder * (1.0 - (1.0 - cfg.waist_ratio) * waist_profile);
        let centre = waist_shift * (-((v - waist_v) / 0.12).powi(2)).exp();
        let spine_u = if (spine_top..=spine_bottom).contains(&v) {
            arc_offset(chord, theta, v - spine_mid) * aspect
        } else {
            0.0
        };
        let groove_fade = ((v - spine_top).min(spine_bottom - v) / 0.04).clamp(0.0, 1.0);
        for x in 0..w {
            let u = (x as f64 + 0.5 - half_w) / half_w;
            let top_u = top + 0.08 * u * u - tilt * u;
            let inside = [
                (half_width - (u - centre).abs()) * half_w,
                (v - top_u) * h as f64,
                (bottom - v) * h as f64,
            ];
            let depth = inside.iter().copied().fold(f64::INFINITY, f64::min);
            let alpha = (depth + 0.5).clamp(0.0, 1.0);
            let mut body = brightness * (1.0 - 0.3 * (u / shoulder).powi(2));
            body -= cfg.groove_depth * groove_fade * (-((u - spine_u) / 0.05).powi(2)).exp();
            let dv = (v - bump_v) * aspect;
            body += bump * (-((u - bump_u).powi(2) + dv * dv) / 0.03).exp();
            let mut px = background + alpha * (body - background);
            if cfg.noise > 0.0 {
                px += cfg.noise * standard_normal(&mut rng);
            }
            data.push(quantize(px));
        }
    }
    let image = Tensor::new(&[1, h, w], data)?;

    let reach = (shoulder + waist_shift + 0.06) * half_w;
    let x0 = (w as f64 - 2.0 * reach.ceil()).max(0.0) as usize / 2;
    let top_min = top - tilt * shoulder - 0.03;
    let y0 = (top_min * h as f64).floor().max(0.0) as usize;
    let y1 = (((bottom + 0.03) * h as f64).ceil() as usize).clamp(y0 + 1, h);
    let bbox = BBox {
        x: x0,
        y: y0,
        w: w - 2 * x0,
        h: y1 - y0,
    };
    Sample::new(image, angle_deg, bbox)
}

/// One manifest line. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub angle_deg: f64,
    pub bbox_x: usize,
    pub bbox_y: usize,
    pub bbox_w: usize,
    pub bbox_h: usize,
}

impl ManifestRow {
    pub fn bbox(&self) -> BBox {
        BBox {
            x: self.bbox_x,
            y: self.bbox_y,
            w: self.bbox_w,
            h: self.bbox_h,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.csv";

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

/// Writes a `1×H×W` tensor as an 8-bit grayscale PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape {
            op: "save_png",
            msg: format!("expected 1×H×W, got {s:?}"),
        });
    }
    let bytes = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(s[2] as u32, s[1] as u32, bytes).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Reads any image as grayscale `1×H×W` in `[0,1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(&[1, h as usize, w as usize], data)
}

/// Draws an angle for `level` and renders it. Deterministic in `(cfg, index)`.
pub fn synth_indexed(cfg: &SynthConfig, scheme: Scheme, level: usize, index: u64) -> Result<Sample> {
    let (lo, hi) = scheme.angle_range(level)?;
    let seed = sample_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen();
    // Draws from (lo, hi]; the lowest bin also admits exactly 0.
    let angle = if lo == 0.0 { hi * u } else { hi - (hi - lo) * u };
    synth_back(angle, cfg, sample_seed(seed, u64::MAX))
}

/// Renders `counts[l]` samples for each level `l + 1` into `dir`, with the
/// images under `dir/images/` and the manifest at `dir/manifest.csv`.
pub fn generate_corpus(cfg: &SynthConfig, counts: &[usize], scheme: Scheme, dir: &Path) -> Result<Vec<ManifestRow>> {
    if counts.len() != scheme.levels() {
        return Err(Error::invalid(format!(
            "expected {} per-level counts, got {}",
            scheme.levels(),
            counts.len()
        )));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid("every level needs at least one sample"));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::new();
    let mut index = 0u64;
    for (l, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let s = synth_indexed(cfg, scheme, l + 1, index)?;
            let rel = format!("images/{index:06}.png");
            save_png(&dir.join(&rel), &s.image)?;
            rows.push(ManifestRow {
                path: rel,
                angle_deg: s.angle_deg,
                bbox_x: s.bbox.x,
                bbox_y: s.bbox.y,
                bbox_w: s.bbox.w,
                bbox_h: s.bbox.h,
            });
            index += 1;
        }
    }
    write_manifest(&dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

/// Loads every sample of a manifest. Levels are re-derived from the angles.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let path: PathBuf = base.join(&row.path);
            let image = load_png(&path)?;
            Sample::new(image, row.angle_deg, row.bbox()).map_err(|e| Error::Format {
                path,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Bilinear resize of the `bbox` region of a `1×H×W` image to `out_h×out_w`,
/// sampling at pixel centres.
pub fn resize_region(image: &Tensor, bbox: BBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape {
            op: "resize",
            msg: format!("expected 1×H×W, got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    if !bbox.fits(w, h) {
        return Err(Error::invalid(format!("bbox {bbox:?} outside a {w}×{h} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let src = image.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|ox| axis(ox, out_w, bbox.w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, ty) = axis(oy, out_h, bbox.h);
        let r0 = &src[(bbox.y + y0) * w + bbox.x..][..bbox.w];
        let r1 = &src[(bbox.y + y1) * w + bbox.x..][..bbox.w];
        for &(x0, x1, tx) in &cols {
            let a = r0[x0] + (r0[x1] - r0[x0]) * tx;
            let b = r1[x0] + (r1[x1] - r1[x0]) * tx;
            out.push(a + (b - a) * ty);
        }
    }
    Tensor::new(&[1, out_h, out_w], out)
}

/// The bounding-box region of a sample, resized to the network input size.
pub fn crop_bbox(s: &Sample, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize_region(&s.image, s.bbox, out_h, out_w)
}

/// Augmentation magnitudes. Zero everywhere is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Largest fraction trimmed from each side of the box.
    pub clip: f64,
    pub flip_prob: f64,
    /// Brightness offset and contrast change range.
    pub jitter: f64,
    /// Box side lengths are scaled by a factor in `[1 − scale, 1 + scale]`.
    pub scale: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            clip: 0.04,
            flip_prob: 0.5,
            jitter: 0.1,
            scale: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy {
        clip: 0.0,
        flip_prob: 0.0,
        jitter: 0.0,
        scale: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..0.5).contains(&self.clip)
            && (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.jitter)
            && (0.0..1.0).contains(&self.scale);
        if !ok {
            return Err(Error::invalid(format!("augmentation policy out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Random box clipping and scaling, horizontal flip and brightness/contrast
/// jitter. The angle label is never touched.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Sample {
    let (w, h) = (s.width(), s.height());
    let mut out = s.clone();
    if policy.scale > 0.0 {
        let f = 1.0 + policy.scale * rng.gen_range(-1.0..=1.0);
        out.bbox = scale_box(out.bbox, f, w, h);
    }
    if policy.clip > 0.0 {
        let b = out.bbox;
        let mut cut = |len: usize| (policy.clip * rng.gen::<f64>() * len as f64).floor() as usize;
        let (l, r, t, btm) = (cut(b.w), cut(b.w), cut(b.h), cut(b.h));
        if l + r < b.w && t + btm < b.h {
            out.bbox = BBox {
                x: b.x + l,
                y: b.y + t,
                w: b.w - l - r,
                h: b.h - t - btm,
            };
        }
    }
    if policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob {
        out.image = out.image.flip_width();
        out.bbox.x = w - out.bbox.x - out.bbox.w;
    }
    if policy.jitter > 0.0 {
        let offset = policy.jitter * rng.gen_range(-1.0..=1.0);
        let contrast = 1.0 + policy.jitter * rng.gen_range(-1.0..=1.0);
        out.image = out.image.map(|v| ((v - 0.5) * contrast + 0.5 + offset).clamp(0.0, 1.0));
    }
    out
}

fn scale_box(b: BBox, f: f64, w: usize, h: usize) -> BBox {
    let resize = |start: usize, len: usize, limit: usize| {
        let centre = start as f64 + len as f64 / 2.0;
        let new_len = ((len as f64 * f).round() as usize).clamp(1, limit);
        let lo = (centre - new_len as f64 / 2.0).round().clamp(0.0, (limit - new_len) as f64) as usize;
        (lo, new_len)
    };
    let (x, bw) = resize(b.x, b.w, w);
    let (y, bh) = resize(b.y, b.h, h);
    BBox { x, y, w: bw, h: bh }
}

/// Stacks crops of `samples` into an `N×1×size×size` batch.
pub fn batch_images(samples: &[&Sample], size: usize) -> Result<Tensor> {
    let crops = samples
        .iter()
        .map(|s| crop_bbox(s, size, size))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&crops)
}

/// Sum of absolute differences between an image and its mirror.
pub fn asymmetry_energy(image: &Tensor) -> f64 {
    let flipped = image.flip_width();
    image.data().iter().zip(flipped.data()).map(|(a, b)| (a - b).abs()).sum()
}
