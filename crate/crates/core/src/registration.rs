//! Rigid 2-D alignment by mutual-information maximisation, image resampling
//! and box-filter downsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::JointHistogram;
use crate::image::Slice;
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Rotation by `theta_deg` about the image centre followed by a translation
/// of `(tx, ty)` pixels. Maps source coordinates to output coordinates:
/// `p' = R(θ)(p − c) + c + t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
}

impl RigidTransform2D {
    pub const IDENTITY: Self = Self {
        tx: 0.0,
        ty: 0.0,
        theta_deg: 0.0,
    };

    pub fn new(tx: f64, ty: f64, theta_deg: f64) -> Self {
        Self { tx, ty, theta_deg }
    }

    pub fn rotation(theta_deg: f64) -> Self {
        Self::new(0.0, 0.0, theta_deg)
    }

    fn sin_cos(&self) -> (f64, f64) {
        self.theta_deg.to_radians().sin_cos()
    }

    /// Apply to point `(x, y)` with rotation centre `(cx, cy)`.
    pub fn apply(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (s, c) = self.sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx + self.tx, s * dx + c * dy + cy + self.ty)
    }

    pub fn inverse(&self) -> Self {
        // p = R(−θ)(p' − c − t) + c  ⇒  t_inv = −R(−θ)·t
        let (s, c) = self.sin_cos();
        Self {
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
            theta_deg: -self.theta_deg,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let (s, c) = self.sin_cos();
        Self {
            tx: c * other.tx - s * other.ty + self.tx,
            ty: s * other.tx + c * other.ty + self.ty,
            theta_deg: self.theta_deg + other.theta_deg,
        }
    }

    /// Largest translation magnitude and rotation of `self` (pixels, degrees).
    pub fn magnitude(&self) -> (f64, f64) {
        (self.tx.hypot(self.ty), self.theta_deg.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

fn centre(img: &Slice) -> (f64, f64) {
    ((img.width as f64 - 1.0) / 2.0, (img.height as f64 - 1.0) / 2.0)
}

fn sample(img: &Slice, x: f64, y: f64, interp: Interpolation) -> Option<f32> {
    let (w, h) = (img.width as f64, img.height as f64);
    match interp {
        Interpolation::Nearest => {
            let (xr, yr) = (x.round(), y.round());
            if xr < 0.0 || yr < 0.0 || xr > w - 1.0 || yr > h - 1.0 {
                return None;
            }
            Some(img.at(xr as usize, yr as usize))
        }
        Interpolation::Bilinear => {
            if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
                return None;
            }
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let v = |xx: usize, yy: usize| f64::from(img.at(xx, yy));
            let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
            let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
            Some((top * (1.0 - fy) + bottom * fy) as f32)
        }
    }
}

/// `output(p) = img(t⁻¹(p))`; returns the image and a validity mask marking
/// pixels whose source fell inside `img`. Invalid pixels take `fill`.
pub fn resample_with_validity(
    img: &Slice,
    t: &RigidTransform2D,
    interp: Interpolation,
    fill: f32,
) -> (Slice, Vec<bool>) {
    let inv = t.inverse();
    let (cx, cy) = centre(img);
    let mut out = Slice::filled(img.width, img.height, img.spacing, fill);
    let mut valid = vec![false; img.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = inv.apply(x as f64, y as f64, cx, cy);
            if let Some(v) = sample(img, sx, sy, interp) {
                out.data[y * img.width + x] = v;
                valid[y * img.width + x] = true;
            }
        }
    }
    (out, valid)
}

pub fn resample(img: &Slice, t: &RigidTransform2D, interp: Interpolation, fill: f32) -> Slice {
    resample_with_validity(img, t, interp, fill).0
}

/// Mutual information in nats from a `bins × bins` equal-width joint
/// histogram over all pixels.
pub fn mutual_information(a: &Slice, b: &Slice, bins: usize) -> Result<f64> {
    mutual_information_masked(a, b, None, bins)
}

pub fn mutual_information_masked(
    a: &Slice,
    b: &Slice,
    mask: Option<&[bool]>,
    bins: usize,
) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dim(
            "mutual_information",
            format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height),
        ));
    }
    if bins < 2 {
        return Err(Error::Usage(format!("need at least 2 bins, got {bins}")));
    }
    if mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::dim("mutual_information", "mask size differs from image"));
    }
    Ok(JointHistogram::new(&a.data, &b.data, mask, bins).mutual_information())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationOptions {
    pub bins: usize,
    /// Grid half-range and step for both translations, pixels.
    pub grid_translation: f64,
    pub grid_translation_step: f64,
    /// Grid half-range and step for rotation, degrees.
    pub grid_angle: f64,
    pub grid_angle_step: f64,
    /// Number of best grid points refined by the simplex search.
    pub refine_starts: usize,
    pub max_evals: usize,
    pub fill_hu: f32,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            bins: 32,
            grid_translation: 8.0,
            grid_translation_step: 2.0,
            grid_angle: 15.0,
            grid_angle_step: 3.0,
            refine_starts: 3,
            max_evals: 300,
            fill_hu: -1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps `moving` onto `fixed`: `resample(moving, transform) ≈ fixed`.
    pub transform: RigidTransform2D,
    pub mi_initial: f64,
    pub mi_final: f64,
    /// False when the simplex refinement failed to improve on the grid.
    pub converged: bool,
    pub evaluations: usize,
}

fn axis(half: f64, step: f64) -> Vec<f64> {
    let n = (half / step).floor() as i64;
    (-n..=n).map(|i| i as f64 * step).collect()
}

/// Find the rigid transform maximising MI between the resampled `moving`
/// image and `fixed`: exhaustive grid over (tx, ty, θ), then Nelder–Mead
/// from the best grid points. MI is taken over pixels whose source lies
/// inside `moving`.
pub fn register_rigid(
    moving: &Slice,
    fixed: &Slice,
    opts: &RegistrationOptions,
) -> Result<RegistrationResult> {
    if !moving.same_shape(fixed) {
        return Err(Error::dim(
            "register_rigid",
            format!(
                "{}×{} vs {}×{}",
                moving.width, moving.height, fixed.width, fixed.height
            ),
        ));
    }
    if opts.bins < 2 || opts.grid_translation_step <= 0.0 || opts.grid_angle_step <= 0.0 {
        return Err(Error::Config("invalid registration options".into()));
    }
    let mut evaluations = 0usize;
    let mut mi_at = |p: &[f64]| -> f64 {
        evaluations += 1;
        let t = RigidTransform2D::new(p[0], p[1], p[2]);
        let (warped, valid) =
            resample_with_validity(moving, &t, Interpolation::Bilinear, opts.fill_hu);
        JointHistogram::new(&warped.data, &fixed.data, Some(&valid), opts.bins).mutual_information()
    };

    let mi_initial = mi_at(&[0.0, 0.0, 0.0]);
    let mut grid: Vec<([f64; 3], f64)> = Vec::new();
    let shifts = axis(opts.grid_translation, opts.grid_translation_step);
    let angles = axis(opts.grid_angle, opts.grid_angle_step);
    for &th in &angles {
        for &ty in &shifts {
            for &tx in &shifts {
                let p = [tx, ty, th];
                let v = mi_at(&p);
                grid.push((p, v));
            }
        }
    }
    // stable sort keeps grid order among ties, so the result is deterministic
    grid.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (grid_best, grid_mi) = grid[0];

    let mut best = (grid_best, grid_mi);
    let mut improved = false;
    let nm_opts = NelderMeadOptions {
        max_evals: opts.max_evals,
        f_tol: 1e-7,
        x_tol: 0.02,
    };
    for (start, _) in grid.iter().take(opts.refine_starts.max(1)) {
        let steps = [
            opts.grid_translation_step / 2.0,
            opts.grid_translation_step / 2.0,
            opts.grid_angle_step / 2.0,
        ];
        let r = nelder_mead(|p| -mi_at(p), start, &steps, &nm_opts);
        if -r.fx > best.1 {
            best = ([r.x[0], r.x[1], r.x[2]], -r.fx);
            improved = true;
        }
    }
    let (p, mi_final) = if best.1.max(grid_mi) >= mi_initial {
        best
    } else {
        ([0.0; 3], mi_initial)
    };
    Ok(RegistrationResult {
        transform: RigidTransform2D::new(p[0], p[1], p[2]),
        mi_initial,
        mi_final,
        converged: improved,
        evaluations,
    })
}

/// Area-averaging downsample to `size × size`. Each output pixel is the
/// overlap-weighted mean of the source pixels under its footprint.
pub fn downsample_to(img: &Slice, size: usize) -> Result<Slice> {
    if size == 0 || size > img.width || size > img.height {
        return Err(Error::Usage(format!(
            "cannot resample {}×{} to {size}×{size}: only downsampling is supported",
            img.width, img.height
        )));
    }
    // per-axis list of (source index, weight) for each output index
    let weights = |src: usize| -> Vec<Vec<(usize, f64)>> {
        let f = src as f64 / size as f64;
        (0..size)
            .map(|o| {
                let (lo, hi) = (o as f64 * f, (o + 1) as f64 * f);
                let mut w = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        w.push((i, overlap / f));
                    }
                    i += 1;
                }
                w
            })
            .collect()
    };
    let wx = weights(img.width);
    let wy = weights(img.height);
    // rows first, then columns
    let mut tmp = vec![0.0f64; img.height * size];
    for y in 0..img.height {
        for (ox, ws) in wx.iter().enumerate() {
            tmp[y * size + ox] = ws.iter().map(|&(i, w)| w * f64::from(img.at(i, y))).sum();
        }
    }
    let mut data = vec![0.0f32; size * size];
    for (oy, ws) in wy.iter().enumerate() {
        for ox in 0..size {
            data[oy * size + ox] = ws.iter().map(|&(j, w)| w * tmp[j * size + ox]).sum::<f64>() as f32;
        }
    }
    let spacing = [
        img.spacing[0] * img.width as f32 / size as f32,
        img.spacing[1] * img.height as f32 / size as f32,
    ];
    Slice::new(size, size, spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Slice {
        Slice::new(w, h, [1.0, 1.0], (0..w * h).map(|i| ((i * 37) % 101) as f32).collect()).unwrap()
    }

    #[test]
    fn identity_bilinear_is_exact() {
        let img = ramp(17, 12);
        assert_eq!(resample(&img, &RigidTransform2D::IDENTITY, Interpolation::Bilinear, -1000.0), img);
    }

    #[test]
    fn integer_shift_nearest_is_exact() {
        let img = ramp(8, 6);
        let out = resample(&img, &RigidTransform2D::new(1.0, 0.0, 0.0), Interpolation::Nearest, -5.0);
        for y in 0..6 {
            assert_eq!(out.at(0, y), -5.0);
            for x in 1..8 {
                assert_eq!(out.at(x, y), img.at(x - 1, y));
            }
        }
    }

    #[test]
    fn inverse_and_compose_cancel() {
        let t = RigidTransform2D::new(3.2, -2.1, 7.0);
        let id = t.compose(&t.inverse());
        assert!(id.tx.abs() < 1e-12 && id.ty.abs() < 1e-12 && id.theta_deg.abs() < 1e-12);
        let (x, y) = t.apply(5.0, 9.0, 3.5, 3.5);
        let (bx, by) = t.inverse().apply(x, y, 3.5, 3.5);
        assert!((bx - 5.0).abs() < 1e-12 && (by - 9.0).abs() < 1e-12);
        // distances preserved
        let (x2, y2) = t.apply(-4.0, 2.0, 3.5, 3.5);
        let d0 = (9.0f64).hypot(7.0);
        assert!(((x - x2).hypot(y - y2) - d0).abs() < 1e-12);
    }

    #[test]
    fn rotation_round_trip_stays_within_interpolation_blur() {
        // smooth blob image; blur error is measured, not assumed
        let n = 64;
        let img = Slice::new(
            n,
            n,
            [1.0, 1.0],
            (0..n * n)
                .map(|i| {
                    let (x, y) = ((i % n) as f64 - 31.5, (i / n) as f64 - 31.5);
                    (400.0 * (-(x * x + 2.0 * y * y) / 300.0).exp()) as f32
                })
                .collect(),
        )
        .unwrap();
        let there = resample(&img, &RigidTransform2D::rotation(10.0), Interpolation::Bilinear, 0.0);
        let back = resample(&there, &RigidTransform2D::rotation(-10.0), Interpolation::Bilinear, 0.0);
        let mut se = 0.0;
        let mut k = 0;
        for y in 8..n - 8 {
            for x in 8..n - 8 {
                let d = f64::from(back.at(x, y) - img.at(x, y));
                se += d * d;
                k += 1;
            }
        }
        let rmse = (se / k as f64).sqrt();
        assert!(rmse < 2.0, "round-trip rmse {rmse}");
    }

    #[test]
    fn mi_of_image_with_itself_is_its_entropy_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Slice::new(32, 32, [1.0, 1.0], (0..1024).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap();
        let b = Slice::new(32, 32, [1.0, 1.0], (0..1024).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap();
        let h = JointHistogram::new(&a.data, &a.data, None, 32);
        assert!((mutual_information(&a, &a, 32).unwrap() - h.entropy_a()).abs() < 1e-12);
        let ab = mutual_information(&a, &b, 32).unwrap();
        let ba = mutual_information(&b, &a, 32).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!(mutual_information(&a, &b, 1).is_err());
    }

    #[test]
    fn mi_of_independent_noise_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut noise = || {
            Slice::new(128, 128, [1.0, 1.0], (0..128 * 128).map(|_| rng.random::<f32>()).collect()).unwrap()
        };
        let (a, b) = (noise(), noise());
        let mi = mutual_information(&a, &b, 32).unwrap();
        assert!(mi <= 0.05, "{mi}");
    }

    #[test]
    fn mi_of_monotone_remap_equals_entropy_within_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Slice::new(64, 64, [1.0, 1.0], (0..4096).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap();
        let mut b = a.clone();
        for v in &mut b.data {
            *v = v.powi(3) * 50.0 + 2.0;
        }
        let h_a = JointHistogram::new(&a.data, &a.data, None, 16).entropy_a();
        let mi = mutual_information(&a, &b, 16).unwrap();
        assert!(mi <= h_a + 1e-12);
        // nonlinear remap moves bin edges: the joint spreads over
        // neighbouring cells, bounded here by measurement
        assert!(h_a - mi < 0.5 * h_a, "{mi} vs {h_a}");
    }

    #[test]
    fn constant_image_gives_zero_mi() {
        let a = Slice::filled(8, 8, [1.0, 1.0], 3.0);
        let b = ramp(8, 8);
        assert_eq!(mutual_information(&a, &b, 8).unwrap(), 0.0);
    }

    #[test]
    fn downsample_examples() {
        let c = Slice::filled(8, 8, [0.5, 0.5], 42.0);
        let d = downsample_to(&c, 4).unwrap();
        assert!(d.data.iter().all(|&v| v == 42.0));
        assert_eq!(d.spacing, [1.0, 1.0]);

        let checker = Slice::new(
            8,
            8,
            [1.0, 1.0],
            (0..64).map(|i| if (i % 8 + i / 8) % 2 == 0 { 0.0 } else { 100.0 }).collect(),
        )
        .unwrap();
        let d = downsample_to(&checker, 4).unwrap();
        assert!(d.data.iter().all(|&v| v == 50.0));
        assert!(downsample_to(&checker, 9).is_err());
        // non-integer factor preserves the mean
        let r = ramp(10, 10);
        let d = downsample_to(&r, 4).unwrap();
        assert!((d.mean() - r.mean()).abs() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform() -> impl Strategy<Value = RigidTransform2D> {
            (-20.0f64..20.0, -20.0f64..20.0, -45.0f64..45.0).prop_map(|(x, y, t)| RigidTransform2D::new(x, y, t))
        }

        proptest! {
            #[test]
            fn inverse_undoes_and_compose_chains(
                a in transform(), b in transform(),
                x in -50.0f64..50.0, y in -50.0f64..50.0,
            ) {
                let (cx, cy) = (31.5, 31.5);
                let (u, v) = a.apply(x, y, cx, cy);
                let (bx, by) = a.inverse().apply(u, v, cx, cy);
                prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
                let (p, q) = b.apply(x, y, cx, cy);
                let (p, q) = a.apply(p, q, cx, cy);
                let (r, s) = a.compose(&b).apply(x, y, cx, cy);
                prop_assert!((p - r).abs() < 1e-9 && (q - s).abs() < 1e-9);
            }
        }
    }
}
