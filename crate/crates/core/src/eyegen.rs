//! Procedural toy eyes and a controllable domain shift.
//!
//! An eye is a flat-shaded almond opening (sclera) in skin, with an iris
//! disk and a pupil disk. The iris centre moves with the gaze and the pupil
//! is displaced further inside the iris along `(sin yaw, -sin pitch)`, so the
//! label is recoverable from geometry. Masks are sampled at pixel centres and
//! the image is rendered with 2x2 supersampling.
//!
//! The pseudo-real domain is a rendered eye passed through
//! [`apply_domain_shift`] with a fixed [`DomainShiftConfig`].

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageops::blur_plane;
use crate::io::{self, ManifestRow};
use crate::rng::{self, stream};
use crate::types::{Class, ClassMask, Domain, Gaze, GazeSample, ImageTensor};

/// Smallest side accepted by [`render_eye`].
pub const MIN_RENDER_SIZE: usize = 32;

/// Iris travel per unit of `sin(angle)`, as a fraction of the image side.
const IRIS_TRAVEL: f64 = 0.16;
/// Half-width and full-aperture half-height of the eye opening.
const OPENING_HALF_WIDTH: f64 = 0.46;
const OPENING_HALF_HEIGHT: f64 = 0.34;
/// Largest pupil offset inside the iris, as a fraction of `r_iris - r_pupil`.
const PUPIL_OFFSET_LIMIT: f64 = 0.95;
const PUPIL_COLOR: [f64; 3] = [0.04, 0.035, 0.05];

#[derive(Clone, Debug, PartialEq)]
pub struct EyeParams {
    pub yaw: f64,
    pub pitch: f64,
    /// Iris radius as a fraction of the image width, in `(0, 0.5)`.
    pub iris_radius: f64,
    /// Pupil radius as a fraction of the iris radius, in `(0.1, 0.9)`.
    pub pupil_ratio: f64,
    pub sclera_color: [f64; 3],
    pub iris_color: [f64; 3],
    pub skin_color: [f64; 3],
    /// Fraction of the full eye opening, in `(0, 1]`.
    pub eyelid_aperture: f64,
    /// Seeds the iris texture.
    pub seed: u64,
}

impl Default for EyeParams {
    fn default() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            iris_radius: 0.17,
            pupil_ratio: 0.4,
            sclera_color: [0.92, 0.9, 0.88],
            iris_color: [0.35, 0.45, 0.6],
            skin_color: [0.85, 0.68, 0.58],
            eyelid_aperture: 0.85,
            seed: 0,
        }
    }
}

impl EyeParams {
    /// Random appearance for a given gaze.
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R, yaw: f64, pitch: f64) -> Self {
        let jitter = |rng: &mut R, base: [f64; 3], amount: f64| base.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0));
        let iris_bases = [[0.35, 0.45, 0.6], [0.45, 0.3, 0.15], [0.35, 0.5, 0.3], [0.25, 0.18, 0.12]];
        let iris_base = iris_bases[rng.random_range(0..iris_bases.len())];
        Self {
            yaw,
            pitch,
            iris_radius: rng.random_range(0.15..0.19),
            pupil_ratio: rng.random_range(0.3..0.45),
            sclera_color: jitter(rng, [0.92, 0.9, 0.88], 0.05),
            iris_color: jitter(rng, iris_base, 0.06),
            skin_color: jitter(rng, [0.82, 0.66, 0.56], 0.08),
            eyelid_aperture: rng.random_range(0.7..=1.0),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::InvalidParams(f.to_string()));
        if !(self.yaw.is_finite() && self.yaw.abs() < std::f64::consts::FRAC_PI_2) {
            return bad("yaw");
        }
        if !(self.pitch.is_finite() && self.pitch.abs() < std::f64::consts::FRAC_PI_2) {
            return bad("pitch");
        }
        if !(self.iris_radius > 0.0 && self.iris_radius < 0.5) {
            return bad("iris_radius");
        }
        if !(self.pupil_ratio > 0.1 && self.pupil_ratio < 0.9) {
            return bad("pupil_ratio");
        }
        if !(self.eyelid_aperture > 0.0 && self.eyelid_aperture <= 1.0) {
            return bad("eyelid_aperture");
        }
        for (name, c) in [("sclera_color", self.sclera_color), ("iris_color", self.iris_color), ("skin_color", self.skin_color)] {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(name);
            }
        }
        Ok(())
    }
}

/// Eye geometry in pixel units for one image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeGeometry {
    pub iris_center: (f64, f64),
    pub iris_radius: f64,
    pub pupil_center: (f64, f64),
    pub pupil_radius: f64,
    opening: (f64, f64, f64, f64),
}

impl EyeGeometry {
    pub fn new(p: &EyeParams, size: usize) -> Self {
        let s = size as f64;
        let (cx, cy) = (s / 2.0, s / 2.0);
        let (sy, sp) = (p.yaw.sin(), p.pitch.sin());
        let iris_center = (cx + IRIS_TRAVEL * s * sy, cy - IRIS_TRAVEL * s * sp);
        let iris_radius = p.iris_radius * s;
        let pupil_radius = p.pupil_ratio * iris_radius;
        let slack = iris_radius - pupil_radius;
        let (mut dx, mut dy) = (slack * sy, -slack * sp);
        let len = (dx * dx + dy * dy).sqrt();
        let limit = PUPIL_OFFSET_LIMIT * slack;
        if len > limit {
            dx *= limit / len;
            dy *= limit / len;
        }
        let pupil_center = (iris_center.0 + dx, iris_center.1 + dy);
        let opening = (cx, cy, OPENING_HALF_WIDTH * s, OPENING_HALF_HEIGHT * s * p.eyelid_aperture);
        Self { iris_center, iris_radius, pupil_center, pupil_radius, opening }
    }

    /// Whether `(x, y)` lies inside the eye opening. Upper and lower lids are
    /// parabolic arcs meeting at the eye corners.
    pub fn in_opening(&self, x: f64, y: f64) -> bool {
        let (cx, cy, a, b) = self.opening;
        let u = (x - cx) / a;
        if u.abs() >= 1.0 {
            return false;
        }
        let half = b * (1.0 - u * u);
        (y - cy).abs() < half
    }

    pub fn classify(&self, x: f64, y: f64) -> Class {
        if !self.in_opening(x, y) {
            return Class::Background;
        }
        let d2 = |c: (f64, f64)| (x - c.0).powi(2) + (y - c.1).powi(2);
        if d2(self.pupil_center) < self.pupil_radius.powi(2) {
            Class::Pupil
        } else if d2(self.iris_center) < self.iris_radius.powi(2) {
            Class::Iris
        } else {
            Class::Background
        }
    }

    /// Distance from `(x, y)` to the upper lid, negative outside the opening.
    fn upper_lid_distance(&self, x: f64, y: f64) -> f64 {
        let (cx, cy, a, b) = self.opening;
        let u = ((x - cx) / a).clamp(-1.0, 1.0);
        y - (cy - b * (1.0 - u * u))
    }
}

/// Render an eye. Returns the image, its exact mask and the labelled sample.
pub fn render_eye(params: &EyeParams, size: usize) -> Result<(ImageTensor, ClassMask, GazeSample)> {
    params.validate()?;
    if size < MIN_RENDER_SIZE {
        return Err(Error::InvalidParams("size".into()));
    }
    let geo = EyeGeometry::new(params, size);
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            labels[y * size + x] = geo.classify(x as f64 + 0.5, y as f64 + 0.5) as u8;
        }
    }
    let mask = ClassMask::new(size, size, labels)?;

    // Radial iris texture: a few angular stripes with seeded phases.
    let mut trng = rng::rng(params.seed);
    let phases: Vec<(f64, f64)> = (0..3).map(|k| ((5 + 4 * k) as f64, trng.random_range(0.0..std::f64::consts::TAU))).collect();
    let shade = |x: f64, y: f64| -> [f64; 3] {
        match geo.classify(x, y) {
            Class::Pupil => PUPIL_COLOR,
            Class::Iris => {
                let (dx, dy) = (x - geo.iris_center.0, y - geo.iris_center.1);
                let r = (dx * dx + dy * dy).sqrt() / geo.iris_radius;
                let theta = dy.atan2(dx);
                let stripes: f64 = phases.iter().map(|(f, ph)| (f * theta + ph).sin()).sum::<f64>() / 3.0;
                let limbus = if r > 0.85 { 0.6 } else { 1.0 };
                params.iris_color.map(|c| c * limbus * (0.85 + 0.15 * stripes))
            }
            Class::Background if geo.in_opening(x, y) => {
                let lid = geo.upper_lid_distance(x, y);
                let shadow = 1.0 - 0.35 * (-lid / (0.04 * size as f64)).exp();
                params.sclera_color.map(|c| c * shadow)
            }
            Class::Background => params.skin_color,
        }
    };
    let mut data = vec![0.0f32; 3 * size * size];
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let c = shade(x as f64 + sx, y as f64 + sy);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[(k * size + y) * size + x] = (acc[k] / 4.0).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let image = ImageTensor::new(size, size, data)?;
    let sample = GazeSample {
        image: image.clone(),
        gaze: Gaze::from_yaw_pitch(params.yaw, params.pitch),
        domain: Domain::Synthetic,
        mask: Some(mask.clone()),
    };
    Ok((image, mask, sample))
}

/// Simulated camera/appearance shift applied to rendered eyes.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShiftConfig {
    pub blur_sigma: f64,
    /// Per-channel multipliers in `[0.5, 1.5]`.
    pub color_gain: [f64; 3],
    pub noise_sigma: f64,
    /// Darkening at the image corners, in `[0, 1]`.
    pub vignette_strength: f64,
    pub seed: u64,
}

impl DomainShiftConfig {
    pub fn identity() -> Self {
        Self { blur_sigma: 0.0, color_gain: [1.0; 3], noise_sigma: 0.0, vignette_strength: 0.0, seed: 0 }
    }

    /// The fixed shift that defines the pseudo-real domain.
    pub fn pseudo_real(seed: u64) -> Self {
        Self { blur_sigma: 0.8, color_gain: [1.3, 0.85, 0.6], noise_sigma: 0.02, vignette_strength: 0.45, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidParams("blur_sigma".into()));
        }
        if self.color_gain.iter().any(|g| !(0.5..=1.5).contains(g)) {
            return Err(Error::InvalidParams("color_gain".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParams("noise_sigma".into()));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::InvalidParams("vignette_strength".into()));
        }
        Ok(())
    }
}

/// Unclamped shift result, one `f64` plane per channel. Exposed so the
/// blur's mass preservation can be checked before clamping.
pub fn domain_shift_planes(image: &ImageTensor, cfg: &DomainShiftConfig) -> Result<[Vec<f64>; 3]> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut planes: [Vec<f64>; 3] = [0, 1, 2].map(|c| image.plane(c).iter().map(|&v| v as f64 * cfg.color_gain[c]).collect::<Vec<f64>>());
    if cfg.blur_sigma > 0.0 {
        for p in planes.iter_mut() {
            *p = blur_plane(p, h, w, cfg.blur_sigma);
        }
    }
    if cfg.vignette_strength > 0.0 {
        let (cy, cx) = ((h as f64) / 2.0, (w as f64) / 2.0);
        let rmax2 = cy * cy + cx * cx;
        for y in 0..h {
            for x in 0..w {
                let r2 = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)) / rmax2;
                let f = 1.0 - cfg.vignette_strength * r2;
                for p in planes.iter_mut() {
                    p[y * w + x] *= f;
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut r = rng::rng(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for p in planes.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(&mut r);
            }
        }
    }
    Ok(planes)
}

pub fn apply_domain_shift(image: &ImageTensor, cfg: &DomainShiftConfig) -> Result<ImageTensor> {
    if *cfg == DomainShiftConfig::identity().with_seed(cfg.seed) {
        return Ok(image.clone());
    }
    let planes = domain_shift_planes(image, cfg)?;
    let data = planes.iter().flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32)).collect();
    ImageTensor::new(image.height(), image.width(), data)
}

/// Options for dataset generation.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n: usize,
    /// Gaze angles are drawn uniformly from `[-gaze_range, gaze_range]` for
    /// both yaw and pitch.
    pub gaze_range: f64,
    pub shift: Option<DomainShiftConfig>,
    pub size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n: usize, gaze_range: f64, shift: Option<DomainShiftConfig>, size: usize, seed: u64) -> Self {
        Self { n, gaze_range, shift, size, seed }
    }
}

/// Render sample `index` of a dataset. Each sample owns a seed derived from
/// `(seed, index)`, so samples can be produced in any order.
pub fn render_sample(spec: &DatasetSpec, index: usize) -> Result<GazeSample> {
    let mut r = rng::item_rng(spec.seed, stream::EYE_PARAMS, index as u64);
    let (yaw, pitch) = if spec.gaze_range > 0.0 {
        (r.random_range(-spec.gaze_range..=spec.gaze_range), r.random_range(-spec.gaze_range..=spec.gaze_range))
    } else {
        (0.0, 0.0)
    };
    let params = EyeParams::sample(&mut r, yaw, pitch);
    let (image, _, mut sample) = render_eye(&params, spec.size)?;
    if let Some(shift) = &spec.shift {
        let cfg = shift.with_seed(rng::derive_seed(spec.seed, stream::DOMAIN_SHIFT, index as u64));
        sample.image = apply_domain_shift(&image, &cfg)?;
        sample.domain = Domain::Real;
    }
    Ok(sample)
}

/// Render a whole dataset in memory.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<GazeSample>> {
    if spec.n == 0 {
        return Err(Error::EmptyDataset);
    }
    (0..spec.n).map(|i| render_sample(spec, i)).collect()
}

/// Write samples as `images/NNNNN.png`, `masks/NNNNN.png` and
/// `manifest.csv` under `out_dir`; returns the manifest path.
pub fn write_dataset(samples: &[GazeSample], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/{i:05}.png");
        io::save_image(&s.image, &out_dir.join(&image_path))?;
        let mask_path = match &s.mask {
            Some(m) => {
                let p = format!("masks/{i:05}.png");
                io::save_mask(m, &out_dir.join(&p))?;
                p
            }
            None => String::new(),
        };
        rows.push(ManifestRow {
            image_path,
            mask_path,
            yaw_deg: s.gaze.yaw().to_degrees(),
            pitch_deg: s.gaze.pitch().to_degrees(),
            domain: s.domain.as_str().to_string(),
            head_yaw_deg: None,
            head_pitch_deg: None,
        });
    }
    let manifest = out_dir.join("manifest.csv");
    io::write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<PathBuf> {
    write_dataset(&generate_samples(spec)?, out_dir)
}

/// Load every row of a manifest as a validated sample.
pub fn load_manifest(path: &Path) -> Result<Vec<GazeSample>> {
    let base = io::manifest_dir(path);
    let rows = io::read_manifest(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let domain = Domain::parse(&row.domain)
                .ok_or_else(|| Error::ParseError { line: i + 2, message: format!("unknown domain `{}`", row.domain) })?;
            let image_file = row.image_file(&base);
            if !image_file.exists() {
                return Err(Error::MissingImage(image_file));
            }
            let image = io::load_image(&image_file)?;
            let mask = match row.mask_file(&base) {
                Some(p) if !p.exists() => return Err(Error::MissingImage(p)),
                Some(p) => {
                    let m = io::load_mask(&p)?;
                    if !m.matches_image(&image) {
                        return Err(Error::MaskMismatch(format!("{} does not match its image", p.display())));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok(GazeSample { image, gaze: Gaze::from_degrees(row.yaw_deg, row.pitch_deg), domain, mask })
        })
        .collect()
}
