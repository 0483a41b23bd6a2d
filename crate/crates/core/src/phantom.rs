//! Synthetic paired CT/CECT slices of an elliptical thorax and heart.
//!
//! Geometry is drawn in image-fraction coordinates (origin at the image
//! centre, one unit = image width), so the same seed gives the same anatomy
//! at any raster size. A slice holds a soft-tissue body on air, two lungs, a
//! pericardial sac (epicardial fat around a myocardial heart ellipse) and
//! four elliptical chambers. The heart mask is the pericardial sac. In the unenhanced CT every chamber holds blood at
//! `hu_blood_unenhanced`; the CECT raises the left atrium and ventricle to
//! one value drawn from `hu_left_enhanced_range` and the right chambers to
//! one value from `hu_right_enhanced_range`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, Slice};
use crate::loss::{hu_to_unit, TrainingSample};
use crate::registration::{downsample_to, resample, Interpolation, RigidTransform2D};
use crate::seed;
use crate::tensor::Tensor;

/// Largest augmentation rotation, degrees.
pub const AUGMENT_MAX_DEG: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Raster size of generated slices.
    pub image_size: usize,
    pub fov_mm: f32,
    pub slice_thickness_mm: f32,
    pub hu_air: f32,
    pub hu_soft_tissue: f32,
    pub hu_fat: f32,
    pub hu_lung: f32,
    pub hu_blood_unenhanced: f32,
    pub hu_myocardium: f32,
    pub hu_left_enhanced_range: [f32; 2],
    pub hu_right_enhanced_range: [f32; 2],
    pub noise_sigma: f32,
    /// Epicardial fat layer around the myocardium, fraction of the image.
    pub fat_thickness: f64,
    /// Heart centre jitter, fraction of the image.
    pub center_jitter: f64,
    /// Extra per-chamber centre jitter, fraction of the image.
    pub chamber_jitter: f64,
    /// Relative size jitter of the whole heart, one draw per phantom: all
    /// chamber radii scale with it.
    pub radius_jitter: f64,
    /// Extra relative jitter of each chamber axis.
    pub chamber_radius_jitter: f64,
    pub rotation_jitter_deg: f64,
    /// Minimum myocardium between chambers and around them, fraction of the image.
    pub wall_thickness: f64,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            fov_mm: 200.0,
            slice_thickness_mm: 3.0,
            hu_air: -1000.0,
            hu_soft_tissue: 40.0,
            hu_fat: -100.0,
            hu_lung: -800.0,
            hu_blood_unenhanced: 40.0,
            hu_myocardium: 50.0,
            hu_left_enhanced_range: [350.0, 500.0],
            hu_right_enhanced_range: [120.0, 250.0],
            noise_sigma: 15.0,
            fat_thickness: 0.04,
            center_jitter: 0.10,
            chamber_jitter: 0.02,
            radius_jitter: 0.25,
            chamber_radius_jitter: 0.08,
            rotation_jitter_deg: 20.0,
            wall_thickness: 0.02,
            max_retries: 200,
        }
    }
}

impl PhantomConfig {
    /// Threshold that separates left from right chambers.
    pub const SEPARATING_HU: f32 = 300.0;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        let [l0, l1] = self.hu_left_enhanced_range;
        let [r0, r1] = self.hu_right_enhanced_range;
        if !(l0 <= l1 && r0 <= r1) {
            return bad("enhancement ranges must be [low, high]".into());
        }
        if !(l0 > Self::SEPARATING_HU) {
            return bad(format!("left enhancement minimum {l0} must exceed 300 HU"));
        }
        if !(r1 < Self::SEPARATING_HU) {
            return bad(format!("right enhancement maximum {r1} must stay below 300 HU"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(self.fov_mm > 0.0 && self.slice_thickness_mm > 0.0) {
            return bad("fov_mm and slice_thickness_mm must be positive".into());
        }
        let fractions = [
            self.center_jitter,
            self.chamber_jitter,
            self.radius_jitter,
            self.chamber_radius_jitter,
            self.wall_thickness,
            self.fat_thickness,
        ];
        if fractions.iter().any(|f| !(0.0..0.5).contains(f)) {
            return bad("jitter and wall fractions must lie in [0, 0.5)".into());
        }
        if !(0.0..=90.0).contains(&self.rotation_jitter_deg) {
            return bad("rotation_jitter_deg must lie in [0, 90]".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn pixel_spacing(&self) -> [f32; 2] {
        let s = self.fov_mm / self.image_size as f32;
        [s, s]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chamber {
    RightVentricle,
    LeftVentricle,
    RightAtrium,
    LeftAtrium,
}

impl Chamber {
    pub const ALL: [Chamber; 4] = [
        Chamber::RightVentricle,
        Chamber::LeftVentricle,
        Chamber::RightAtrium,
        Chamber::LeftAtrium,
    ];

    pub fn is_left(self) -> bool {
        matches!(self, Chamber::LeftVentricle | Chamber::LeftAtrium)
    }

    /// Nominal centre and semi-axes in units of the heart semi-axes.
    fn layout(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Chamber::RightVentricle => ([-0.38, -0.26], [0.28, 0.28]),
            Chamber::LeftVentricle => ([0.38, -0.24], [0.30, 0.30]),
            Chamber::RightAtrium => ([-0.38, 0.42], [0.24, 0.22]),
            Chamber::LeftAtrium => ([0.38, 0.42], [0.24, 0.22]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    center: [f64; 2],
    axes: [f64; 2],
    /// Orientation, radians.
    angle: f64,
}

impl Ellipse {
    fn value(&self, p: [f64; 2]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        u * u + v * v
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        self.value(p) <= 1.0
    }

    fn grown(&self, by: f64) -> Self {
        Self {
            axes: [self.axes[0] + by, self.axes[1] + by],
            ..*self
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            axes: [self.axes[0] * f, self.axes[1] * f],
            ..*self
        }
    }
}

/// Sampled anatomy and enhancement of one phantom case.
#[derive(Clone, Debug, PartialEq)]
struct Anatomy {
    body: Ellipse,
    lungs: [Ellipse; 2],
    /// Heart plus epicardial fat; the heart mask.
    pericardium: Ellipse,
    heart: Ellipse,
    chambers: [(Chamber, Ellipse); 4],
    hu_left: f32,
    hu_right: f32,
}

const BODY: Ellipse = Ellipse {
    center: [0.0, 0.02],
    axes: [0.46, 0.38],
    angle: 0.0,
};
const HEART_AXES: [f64; 2] = [0.27, 0.22];
const HEART_CENTER: [f64; 2] = [0.03, 0.02];
const HEART_BASE_DEG: f64 = -25.0;

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn sample_chambers(cfg: &PhantomConfig, heart: &Ellipse, rng: &mut ChaCha8Rng) -> [(Chamber, Ellipse); 4] {
    let (s, c) = heart.angle.sin_cos();
    Chamber::ALL.map(|ch| {
        let ([lx, ly], [ax, ay]) = ch.layout();
        let (ox, oy) = (lx * heart.axes[0], ly * heart.axes[1]);
        let center = [
            heart.center[0] + c * ox - s * oy + uniform(rng, cfg.chamber_jitter),
            heart.center[1] + s * ox + c * oy + uniform(rng, cfg.chamber_jitter),
        ];
        let axes = [
            ax * heart.axes[0] * (1.0 + uniform(rng, cfg.chamber_radius_jitter)),
            ay * heart.axes[1] * (1.0 + uniform(rng, cfg.chamber_radius_jitter)),
        ];
        let angle = heart.angle + uniform(rng, 10f64.to_radians());
        (ch, Ellipse { center, axes, angle })
    })
}

/// Chambers, grown by half a wall, must not meet, and grown by a full wall
/// must stay inside the heart; the pericardium must stay inside the body.
/// Checked on the render grid.
fn geometry_ok(a: &Anatomy, size: usize, wall: f64) -> bool {
    let grown: Vec<Ellipse> = a.chambers.iter().map(|(_, e)| e.grown(wall / 2.0)).collect();
    let shell: Vec<Ellipse> = a.chambers.iter().map(|(_, e)| e.grown(wall)).collect();
    for y in 0..size {
        for x in 0..size {
            let p = grid_point(x, y, size);
            if grown.iter().filter(|e| e.contains(p)).count() > 1 {
                return false;
            }
            if shell.iter().any(|e| e.contains(p)) && !a.heart.contains(p) {
                return false;
            }
            if a.pericardium.contains(p) && !a.body.contains(p) {
                return false;
            }
        }
    }
    // a chamber must cover at least one pixel at the render size
    a.chambers
        .iter()
        .all(|(_, e)| (0..size * size).any(|i| e.contains(grid_point(i % size, i / size, size))))
}

fn grid_point(x: usize, y: usize, size: usize) -> [f64; 2] {
    let n = size as f64;
    [(x as f64 + 0.5) / n - 0.5, (y as f64 + 0.5) / n - 0.5]
}

fn sample_anatomy(cfg: &PhantomConfig, case_seed: u64) -> Result<Anatomy> {
    // enhancement has its own stream so palette changes never move the anatomy
    let mut contrast = seed::rng(seed::derive(case_seed, "phantom/enhancement"));
    let hu_left = uniform_in(&mut contrast, cfg.hu_left_enhanced_range);
    let hu_right = uniform_in(&mut contrast, cfg.hu_right_enhanced_range);
    let mut rng = seed::rng(seed::derive(case_seed, "phantom/anatomy"));
    for _ in 0..cfg.max_retries {
        let heart_center = [
            HEART_CENTER[0] + uniform(&mut rng, cfg.center_jitter),
            HEART_CENTER[1] + uniform(&mut rng, cfg.center_jitter),
        ];
        let heart_scale = 1.0 + uniform(&mut rng, cfg.radius_jitter);
        let heart = Ellipse {
            center: heart_center,
            axes: [HEART_AXES[0] * heart_scale, HEART_AXES[1] * heart_scale],
            angle: (HEART_BASE_DEG + uniform(&mut rng, cfg.rotation_jitter_deg)).to_radians(),
        };
        let lungs = [-1.0, 1.0].map(|side: f64| Ellipse {
            center: [side * 0.23 + uniform(&mut rng, 0.01), -0.02 + uniform(&mut rng, 0.01)],
            axes: [0.15 * (1.0 + uniform(&mut rng, 0.1)), 0.25 * (1.0 + uniform(&mut rng, 0.1))],
            angle: side * 0.1,
        });
        let chambers = sample_chambers(cfg, &heart, &mut rng);
        let anatomy = Anatomy {
            body: BODY,
            lungs,
            pericardium: heart.grown(cfg.fat_thickness),
            heart,
            chambers,
            hu_left,
            hu_right,
        };
        if geometry_ok(&anatomy, cfg.image_size, cfg.wall_thickness) {
            return Ok(anatomy);
        }
    }
    Err(Error::Phantom(format!(
        "no non-overlapping chamber layout after {} attempts (seed {case_seed})",
        cfg.max_retries
    )))
}

/// One paired slice with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub ct: Slice,
    pub cect: Slice,
    /// Left atrium and ventricle.
    pub chamber_mask: Mask,
    pub heart_mask: Mask,
    /// `chamber_mask.count()`.
    pub chamber_area_px: usize,
    pub hu_left: f32,
    pub hu_right: f32,
    /// Rigid transform applied to `cect` and `chamber_mask`, if any.
    pub displacement: Option<RigidTransform2D>,
}

impl PhantomPair {
    /// Tensors in normalised units, each `[1, 1, S, S]`.
    pub fn to_sample(&self) -> TrainingSample {
        let shape = [1, 1, self.ct.height, self.ct.width];
        let unit = |s: &Slice| Tensor::from_fn(&shape, |i| hu_to_unit(f64::from(s.data[i])));
        let bin = |m: &Mask| Tensor::from_fn(&shape, |i| if m.data[i] { 1.0 } else { 0.0 });
        TrainingSample {
            ct: unit(&self.ct),
            cect: unit(&self.cect),
            chamber_mask: bin(&self.chamber_mask),
            heart_mask: bin(&self.heart_mask),
        }
    }

    /// Box-filter the images of `self` to `size × size`. `clean_cect` is the
    /// noiseless CECT at `self`'s resolution: the chamber mask becomes the
    /// heart-mask pixels whose filtered noiseless value reaches
    /// [`PhantomConfig::SEPARATING_HU`], so a partial-volume pixel counts as
    /// chamber exactly when thresholding a perfect CECT would count it. The
    /// heart mask keeps pixels at least half covered.
    fn downsample(&self, clean_cect: &Slice, size: usize) -> Result<Self> {
        let heart_mask = Mask::from_slice(&downsample_to(&self.heart_mask.to_slice(self.ct.spacing), size)?);
        let clean = downsample_to(clean_cect, size)?;
        let chamber_mask = Mask {
            data: clean
                .data
                .iter()
                .zip(&heart_mask.data)
                .map(|(&v, &h)| h && v >= PhantomConfig::SEPARATING_HU)
                .collect(),
            ..heart_mask.clone()
        };
        Ok(Self {
            ct: downsample_to(&self.ct, size)?,
            cect: downsample_to(&self.cect, size)?,
            chamber_area_px: chamber_mask.count(),
            chamber_mask,
            heart_mask,
            ..self.clone()
        })
    }

    /// Move the CECT and its chamber mask by `t`, as an unregistered
    /// acquisition would be. The heart mask stays on the CT.
    pub fn displaced(&self, t: RigidTransform2D, fill_hu: f32) -> Self {
        let chamber = resample(
            &self.chamber_mask.to_slice(self.ct.spacing),
            &t,
            Interpolation::Nearest,
            0.0,
        );
        let chamber_mask = Mask::from_slice(&chamber);
        Self {
            cect: resample(&self.cect, &t, Interpolation::Bilinear, fill_hu),
            chamber_area_px: chamber_mask.count(),
            chamber_mask,
            displacement: Some(t),
            ..self.clone()
        }
    }
}

/// Noiseless slice at `cfg.image_size`.
fn render(cfg: &PhantomConfig, a: &Anatomy, chamber_scale: f64) -> PhantomPair {
    let n = cfg.image_size;
    let spacing = cfg.pixel_spacing();
    let chambers: Vec<(Chamber, Ellipse)> = a
        .chambers
        .iter()
        .map(|&(c, e)| (c, e.scaled(chamber_scale)))
        .collect();
    let mut ct = Slice::filled(n, n, spacing, cfg.hu_air);
    let mut cect = ct.clone();
    let mut chamber_mask = Mask::empty(n, n);
    let mut heart_mask = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let p = grid_point(x, y, n);
            let i = y * n + x;
            heart_mask.data[i] = a.pericardium.contains(p);
            let (base, enhanced) = if a.heart.contains(p) {
                match chambers.iter().find(|(_, e)| e.contains(p)) {
                    Some((c, _)) if c.is_left() => {
                        chamber_mask.data[i] = true;
                        (cfg.hu_blood_unenhanced, a.hu_left)
                    }
                    Some(_) => (cfg.hu_blood_unenhanced, a.hu_right),
                    None => (cfg.hu_myocardium, cfg.hu_myocardium),
                }
            } else if a.pericardium.contains(p) {
                (cfg.hu_fat, cfg.hu_fat)
            } else if a.lungs.iter().any(|l| l.contains(p)) {
                (cfg.hu_lung, cfg.hu_lung)
            } else if a.body.contains(p) {
                (cfg.hu_soft_tissue, cfg.hu_soft_tissue)
            } else {
                (cfg.hu_air, cfg.hu_air)
            };
            ct.data[i] = base;
            cect.data[i] = enhanced;
        }
    }
    PhantomPair {
        ct,
        cect,
        chamber_area_px: chamber_mask.count(),
        chamber_mask,
        heart_mask,
        hu_left: a.hu_left,
        hu_right: a.hu_right,
        displacement: None,
    }
}

/// Chamber size factor for slice `k` of `depth`: largest mid-stack,
/// shrinking smoothly toward both ends.
pub fn chamber_scale(k: usize, depth: usize) -> f64 {
    if depth <= 1 {
        return 1.0;
    }
    let half = (depth - 1) as f64 / 2.0;
    let t = (k as f64 - half) / half;
    1.0 - 0.2 * t * t
}

fn add_noise(pair: &mut PhantomPair, sigma: f32, noise_seed: u64) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
        let mut rng = seed::rng(noise_seed);
        for v in pair.ct.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        for v in pair.cect.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

/// A stack of `depth` slices sharing anatomy and enhancement; chamber radii
/// vary smoothly along the stack and noise is independent per slice.
/// Slices are rendered at `cfg.image_size` and box-downsampled to
/// `output_size`.
pub fn generate_case_at(
    cfg: &PhantomConfig,
    case_seed: u64,
    depth: usize,
    output_size: usize,
) -> Result<Vec<PhantomPair>> {
    cfg.validate()?;
    if depth == 0 {
        return Err(Error::Config("a case needs at least one slice".into()));
    }
    if output_size == 0 || output_size > cfg.image_size {
        return Err(Error::Config(format!(
            "output size {output_size} must lie in 1..={}",
            cfg.image_size
        )));
    }
    let anatomy = sample_anatomy(cfg, case_seed)?;
    (0..depth)
        .map(|k| {
            let clean = render(cfg, &anatomy, chamber_scale(k, depth));
            let mut noisy = clean.clone();
            add_noise(
                &mut noisy,
                cfg.noise_sigma,
                seed::derive_indexed(case_seed, "phantom/noise", k as u64),
            );
            if output_size == cfg.image_size {
                Ok(noisy)
            } else {
                noisy.downsample(&clean.cect, output_size)
            }
        })
        .collect()
}

pub fn generate_case(cfg: &PhantomConfig, case_seed: u64, depth: usize) -> Result<Vec<PhantomPair>> {
    generate_case_at(cfg, case_seed, depth, cfg.image_size)
}

pub fn generate_pair(cfg: &PhantomConfig, seed: u64) -> Result<PhantomPair> {
    Ok(generate_case(cfg, seed, 1)?.remove(0))
}

/// One slice rendered at `cfg.image_size` and downsampled to `output_size`.
pub fn generate_pair_at(cfg: &PhantomConfig, seed: u64, output_size: usize) -> Result<PhantomPair> {
    Ok(generate_case_at(cfg, seed, 1, output_size)?.remove(0))
}

/// Rotate every image and mask of `pair` by `theta_deg` about the centre:
/// bilinear for images with `fill_hu` outside the frame, nearest-neighbour
/// for masks with 0 outside.
pub fn rotate_pair(pair: &PhantomPair, theta_deg: f64, fill_hu: f32) -> PhantomPair {
    if theta_deg == 0.0 {
        return pair.clone();
    }
    let t = RigidTransform2D::rotation(theta_deg);
    let spacing = pair.ct.spacing;
    let mask = |m: &Mask| Mask::from_slice(&resample(&m.to_slice(spacing), &t, Interpolation::Nearest, 0.0));
    let chamber_mask = mask(&pair.chamber_mask);
    PhantomPair {
        ct: resample(&pair.ct, &t, Interpolation::Bilinear, fill_hu),
        cect: resample(&pair.cect, &t, Interpolation::Bilinear, fill_hu),
        chamber_area_px: chamber_mask.count(),
        chamber_mask,
        heart_mask: mask(&pair.heart_mask),
        ..pair.clone()
    }
}

/// Random rotation with θ ~ Uniform(−25°, 25°).
pub fn augment(pair: &PhantomPair, seed: u64, fill_hu: f32) -> PhantomPair {
    let theta = seed::rng(seed).random_range(-AUGMENT_MAX_DEG..=AUGMENT_MAX_DEG);
    rotate_pair(pair, theta, fill_hu)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 120:10:20 partition of `0..n`. Validation and test sets get
/// `round(n/15)` and `round(2n/15)` items, at least one each.
pub fn split_dataset(n: usize, seed: u64) -> Result<Split> {
    let val = ((n as f64 / 15.0).round() as usize).max(1);
    let test = ((2.0 * n as f64 / 15.0).round() as usize).max(1);
    if n < val + test + 1 {
        return Err(Error::Usage(format!(
            "cannot split {n} cases into non-empty train/val/test sets"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive(seed, "split"));
    // Fisher–Yates, spelled out so the permutation is independent of crate internals
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let test_set = idx[..test].to_vec();
    let val_set = idx[test..test + val].to_vec();
    let train = idx[test + val..].to_vec();
    Ok(Split {
        train,
        val: val_set,
        test: test_set,
    })
}

/// One generated case after optional downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub index: usize,
    pub seed: u64,
    pub slices: Vec<PhantomPair>,
}

impl PhantomCase {
    pub fn slice_thickness_mm(cfg: &PhantomConfig) -> f32 {
        cfg.slice_thickness_mm
    }

    /// Total chamber volume in ml from the stored masks.
    pub fn chamber_volume_ml(&self, thickness_mm: f32) -> f64 {
        self.slices
            .iter()
            .map(|p| p.chamber_area_px as f64 * p.ct.pixel_area_mm2() * f64::from(thickness_mm))
            .sum::<f64>()
            / 1000.0
    }
}

/// `count` cases of `depth` slices generated at `cfg.image_size` and
/// box-downsampled to `output_size`. Case `i` uses seed
/// `derive_indexed(seed, "case", i)`.
pub fn build_dataset(
    cfg: &PhantomConfig,
    count: usize,
    depth: usize,
    output_size: usize,
    seed: u64,
) -> Result<Vec<PhantomCase>> {
    use rayon::prelude::*;
    if count == 0 {
        return Err(Error::Usage("dataset needs at least one case".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let case_seed = seed::derive_indexed(seed, "case", i as u64);
            let slices = generate_case_at(cfg, case_seed, depth, output_size)?;
            Ok(PhantomCase {
                index: i,
                seed: case_seed,
                slices,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, noise: f32) -> PhantomConfig {
        PhantomConfig {
            image_size: size,
            noise_sigma: noise,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_left_chambers_exceed_threshold() {
        for s in 0..10 {
            let p = generate_pair(&cfg(96, 0.0), s).unwrap();
            let inside: Vec<f32> = (0..p.cect.len())
                .filter(|&i| p.chamber_mask.data[i])
                .map(|i| p.cect.data[i])
                .collect();
            assert!(!inside.is_empty());
            assert!(inside.iter().all(|&v| v >= 301.0), "seed {s}");
            // and nothing else in the image reaches 300
            for i in 0..p.cect.len() {
                if !p.chamber_mask.data[i] {
                    assert!(p.cect.data[i] < 300.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let c = cfg(64, 15.0);
        assert_eq!(generate_pair(&c, 9).unwrap(), generate_pair(&c, 9).unwrap());
        assert_ne!(generate_pair(&c, 9).unwrap().ct, generate_pair(&c, 10).unwrap().ct);
    }

    #[test]
    fn contrast_is_confined_to_the_heart() {
        let p = generate_pair(&cfg(80, 0.0), 4).unwrap();
        for i in 0..p.ct.len() {
            if !p.heart_mask.data[i] {
                assert_eq!(p.ct.data[i], p.cect.data[i]);
            }
        }
        assert!(p.chamber_mask.is_subset_of(&p.heart_mask));
        assert_eq!(p.chamber_area_px, p.chamber_mask.count());

        let noisy = generate_pair(&cfg(80, 15.0), 4).unwrap();
        for i in 0..p.ct.len() {
            if !noisy.heart_mask.data[i] {
                assert!((noisy.ct.data[i] - noisy.cect.data[i]).abs() <= 6.0 * 15.0 * 2f32.sqrt());
            }
        }
    }

    #[test]
    fn invalid_palettes_are_rejected() {
        let mut c = PhantomConfig::default();
        c.hu_left_enhanced_range = [290.0, 400.0];
        assert!(c.validate().is_err());
        let mut c = PhantomConfig::default();
        c.hu_right_enhanced_range = [100.0, 300.0];
        assert!(c.validate().is_err());
        let mut c = PhantomConfig::default();
        c.noise_sigma = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn impossible_geometry_errors_after_retries() {
        let c = PhantomConfig {
            image_size: 32,
            wall_thickness: 0.3,
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(generate_pair(&c, 1), Err(Error::Phantom(_))));
    }

    #[test]
    fn zero_rotation_is_identity_and_quarter_turn_is_exact_for_masks() {
        let p = generate_pair(&cfg(48, 15.0), 2).unwrap();
        assert_eq!(rotate_pair(&p, 0.0, -1000.0), p);
        let r = rotate_pair(&p, 90.0, -1000.0);
        let n = 48;
        // output(x, y) = input(R⁻¹(x, y)); for +90° about the centre that is
        // input(y, n−1−x)
        for y in 0..n {
            for x in 0..n {
                assert_eq!(r.chamber_mask.at(x, y), p.chamber_mask.at(y, n - 1 - x));
                assert_eq!(r.heart_mask.at(x, y), p.heart_mask.at(y, n - 1 - x));
            }
        }
        assert_eq!(r.chamber_area_px, p.chamber_area_px);
    }

    #[test]
    fn augmentation_keeps_masks_nested_and_areas_close() {
        let p = generate_pair(&cfg(64, 15.0), 3).unwrap();
        for s in 0..30 {
            let a = augment(&p, s, -1000.0);
            assert!(a.chamber_mask.is_subset_of(&a.heart_mask));
            // perimeter of the chamber mask, 4-neighbour boundary pixels
            let m = &p.chamber_mask;
            let perimeter = (0..m.data.len())
                .filter(|&i| {
                    let (x, y) = (i % 64, i / 64);
                    m.data[i]
                        && (x == 0 || y == 0 || x == 63 || y == 63
                            || !m.at(x - 1, y) || !m.at(x + 1, y) || !m.at(x, y - 1) || !m.at(x, y + 1))
                })
                .count();
            let diff = (a.chamber_area_px as i64 - p.chamber_area_px as i64).unsigned_abs() as usize;
            assert!(diff <= 2 * perimeter, "seed {s}: {diff} vs perimeter {perimeter}");
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(150, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 10, 20));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
        let s15 = split_dataset(15, 1).unwrap();
        assert_eq!((s15.train.len(), s15.val.len(), s15.test.len()), (12, 1, 2));
        assert_eq!(split_dataset(150, 7).unwrap(), s);
        assert_ne!(split_dataset(150, 8).unwrap(), s);
        assert!(split_dataset(2, 0).is_err());
        assert!(split_dataset(3, 0).is_ok());
    }

    #[test]
    fn downsampling_preserves_mean_and_nesting() {
        let p = generate_pair(&cfg(256, 15.0), 5).unwrap();
        let d = generate_pair_at(&cfg(256, 15.0), 5, 64).unwrap();
        assert!((d.ct.mean() - p.ct.mean()).abs() < 0.5);
        assert!(d.chamber_mask.is_subset_of(&d.heart_mask));
        assert_eq!(d.ct.spacing, [200.0 / 64.0; 2]);
    }

    #[test]
    fn downsampled_noiseless_threshold_is_the_chamber_mask() {
        for size in [16, 32, 64, 128] {
            for seed in 0..4 {
                let p = generate_pair_at(&cfg(256, 0.0), seed, size).unwrap();
                let seg = Mask {
                    data: p
                        .cect
                        .data
                        .iter()
                        .zip(&p.heart_mask.data)
                        .map(|(&v, &h)| h && v >= 300.0)
                        .collect(),
                    ..p.heart_mask.clone()
                };
                assert_eq!(seg, p.chamber_mask, "size {size} seed {seed}");
                assert_eq!(p.chamber_area_px, seg.count());
            }
        }
    }

    #[test]
    fn case_slices_share_anatomy_with_smooth_radii() {
        let slices = generate_case(&cfg(64, 0.0), 11, 5).unwrap();
        let areas: Vec<usize> = slices.iter().map(|p| p.chamber_area_px).collect();
        assert!(areas[2] >= areas[1] && areas[1] >= areas[0], "{areas:?}");
        assert_eq!(areas[0], areas[4]);
        assert!(slices.iter().all(|p| p.heart_mask == slices[0].heart_mask));
    }
}
