//! Image-quality, overlap and agreement metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::histogram::JointHistogram;
use crate::image::{Mask, Slice};

/// Default PSNR peak: the width of the working window [−1024, 3071] HU.
pub const DEFAULT_PSNR_PEAK: f64 = 4095.0;
pub const DEFAULT_NMI_BINS: usize = 32;

fn check_shape(op: &'static str, a: &Slice, b: &Slice, mask: Option<&Mask>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(
            op,
            format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height),
        ));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(Error::dim(op, format!("mask {}×{} vs image", m.width, m.height)));
        }
        if m.count() == 0 {
            return Err(Error::Metric(format!("{op}: empty mask")));
        }
    }
    Ok(())
}

/// Normalised mutual information `2·I(a;b) / (H(a) + H(b))` over the masked
/// pixels, each image binned over its own masked range. Two constant
/// images score 1.
pub fn nmi(a: &Slice, b: &Slice, mask: Option<&Mask>, bins: usize) -> Result<f64> {
    check_shape("nmi", a, b, mask)?;
    if bins < 2 {
        return Err(Error::Usage(format!("need at least 2 bins, got {bins}")));
    }
    let h = JointHistogram::new(&a.data, &b.data, mask.map(|m| m.data.as_slice()), bins);
    let denom = h.entropy_a() + h.entropy_b();
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * h.mutual_information() / denom).clamp(0.0, 1.0))
}

/// `10·log10(peak² / MSE)` over masked pixels; `+∞` for identical inputs.
pub fn psnr(a: &Slice, b: &Slice, mask: Option<&Mask>, peak: f64) -> Result<f64> {
    check_shape("psnr", a, b, mask)?;
    if !(peak > 0.0) {
        return Err(Error::Usage(format!("psnr peak must be positive, got {peak}")));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for i in 0..a.len() {
        if mask.is_none_or(|m| m.data[i]) {
            let d = f64::from(a.data[i]) - f64::from(b.data[i]);
            se += d * d;
            n += 1;
        }
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// `(pred ≥ v_th) ∧ heart_mask`.
pub fn threshold_segment(pred: &Slice, v_th: f32, heart_mask: &Mask) -> Result<Mask> {
    if heart_mask.width != pred.width || heart_mask.height != pred.height {
        return Err(Error::dim("threshold_segment", "mask size differs from image"));
    }
    Ok(Mask {
        width: pred.width,
        height: pred.height,
        data: pred
            .data
            .iter()
            .zip(&heart_mask.data)
            .map(|(&v, &h)| h && v >= v_th)
            .collect(),
    })
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim("dice", "mask sizes differ"));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided, from Student's t with n − 2 degrees of freedom.
    pub p_value: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("pearson: {} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Metric(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("pearson: zero variance".into()));
    }
    let rho = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { rho, p_value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    /// Sample standard deviation (n − 1) of the differences.
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Per-pair (mean, difference) with difference = x − y.
    #[serde(skip)]
    pub table: Vec<(f64, f64)>,
}

impl BlandAltman {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mean,diff\n");
        for (m, d) in &self.table {
            out.push_str(&format!("{m},{d}\n"));
        }
        out
    }
}

pub fn bland_altman(x: &[f64], y: &[f64]) -> Result<BlandAltman> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("bland_altman: {} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Metric(format!("bland_altman needs at least 2 pairs, got {n}")));
    }
    let table: Vec<(f64, f64)> = x.iter().zip(y).map(|(&a, &b)| ((a + b) / 2.0, a - b)).collect();
    let mean_diff = table.iter().map(|t| t.1).sum::<f64>() / n as f64;
    let var = table.iter().map(|t| (t.1 - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd_diff = var.sqrt();
    Ok(BlandAltman {
        mean_diff,
        sd_diff,
        loa_low: mean_diff - 1.96 * sd_diff,
        loa_high: mean_diff + 1.96 * sd_diff,
        table,
    })
}

/// `100·|v_pred − v_true| / v_true`.
pub fn volume_percent_error(v_pred: f64, v_true: f64) -> Result<f64> {
    if !(v_true > 0.0) {
        return Err(Error::Metric(format!("reference volume must be positive, got {v_true}")));
    }
    Ok(100.0 * (v_pred - v_true).abs() / v_true)
}

/// Serde adapter writing non-finite floats as `"+inf"`, `"-inf"`, `"nan"`.
pub mod float_repr {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "+inf" | "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanSummary {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

impl From<&BlandAltman> for BlandAltmanSummary {
    fn from(b: &BlandAltman) -> Self {
        Self {
            mean_diff: b.mean_diff,
            sd_diff: b.sd_diff,
            loa_low: b.loa_low,
            loa_high: b.loa_high,
        }
    }
}

/// Aggregate evaluation result. Slice metrics are means over test slices,
/// volume metrics are over test cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmi: f64,
    pub nmi_sd: f64,
    #[serde(with = "float_repr")]
    pub psnr_db: f64,
    #[serde(with = "float_repr")]
    pub psnr_sd: f64,
    pub dice: f64,
    pub dice_sd: f64,
    pub dv_percent: f64,
    pub dv_percent_sd: f64,
    /// Absent when fewer than 3 volumes or a constant series.
    pub pearson_rho: Option<f64>,
    pub pearson_p: Option<f64>,
    pub bland_altman: Option<BlandAltmanSummary>,
    pub slices: usize,
    pub volumes: usize,
    pub psnr_peak: f64,
    pub nmi_bins: usize,
    pub v_th_hu: f64,
}

/// Mean and sample standard deviation; infinite values propagate.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn slice(w: usize, h: usize, data: Vec<f32>) -> Slice {
        Slice::new(w, h, [1.0, 1.0], data).unwrap()
    }

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(bits.len(), 1, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn nmi_self_and_independent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut noise = || slice(128, 128, (0..128 * 128).map(|_| rng.random::<f32>()).collect());
        let (a, b) = (noise(), noise());
        assert!((nmi(&a, &a, None, 32).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&a, &b, None, 32).unwrap() <= 0.05);
        let ab = nmi(&a, &b, None, 32).unwrap();
        let ba = nmi(&b, &a, None, 32).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn nmi_hand_example() {
        // a = [0,0,1,1], b = [0,1,1,1] → H(a)=ln2, H(b)=H(¼,¾),
        // joint {(0,0):¼,(0,1):¼,(1,1):½} → H = 1.5·ln2
        let a = slice(4, 1, vec![0.0, 0.0, 1.0, 1.0]);
        let b = slice(4, 1, vec![0.0, 1.0, 1.0, 1.0]);
        let ln2 = std::f64::consts::LN_2;
        let hb = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let i = ln2 + hb - 1.5 * ln2;
        let want = 2.0 * i / (ln2 + hb);
        assert!((nmi(&a, &b, None, 2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn nmi_is_invariant_to_a_bin_preserving_remap() {
        let a = slice(6, 1, vec![0.0, 1.0, 2.0, 3.0, 3.0, 1.0]);
        let b = slice(6, 1, vec![5.0, 1.0, 2.0, 9.0, 9.0, 0.0]);
        // affine remap keeps every value in the same bin of its own range
        let a2 = slice(6, 1, a.data.iter().map(|v| 7.0 * v - 3.0).collect());
        let x = nmi(&a, &b, None, 4).unwrap();
        let y = nmi(&a2, &b, None, 4).unwrap();
        assert!((x - y).abs() <= 1e-12);
    }

    #[test]
    fn nmi_and_psnr_reject_empty_masks() {
        let a = slice(2, 1, vec![1.0, 2.0]);
        assert!(matches!(nmi(&a, &a, Some(&mask(&[0, 0])), 4), Err(Error::Metric(_))));
        assert!(psnr(&a, &a, Some(&mask(&[0, 0])), 4095.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = slice(4, 1, vec![0.0; 4]);
        let b = slice(4, 1, vec![10.0; 4]);
        let v = psnr(&a, &b, None, 4095.0).unwrap();
        assert!((v - 10.0 * (4095.0f64 * 4095.0 / 100.0).log10()).abs() < 1e-12);
        assert!((v - 52.24).abs() < 0.01);
        let c = slice(4, 1, vec![4095.0; 4]);
        assert!(psnr(&a, &c, None, 4095.0).unwrap().abs() < 1e-12);
        assert_eq!(psnr(&a, &a, None, 4095.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base: Vec<f32> = (0..4096).map(|i| (i % 200) as f32).collect();
        let unit: Vec<f32> = (0..4096).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let a = slice(64, 64, base.clone());
        let mut last = f64::INFINITY;
        for sigma in [1.0f32, 2.0, 5.0, 10.0, 40.0] {
            let b = slice(64, 64, base.iter().zip(&unit).map(|(v, u)| v + sigma * u).collect());
            let p = psnr(&a, &b, None, 4095.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn threshold_examples() {
        let img = slice(4, 1, vec![0.0, 299.9, 300.0, 800.0]);
        let heart = mask(&[1, 1, 1, 0]);
        assert_eq!(threshold_segment(&img, 300.0, &heart).unwrap(), mask(&[0, 0, 1, 0]));
        let zero = slice(4, 1, vec![0.0; 4]);
        assert_eq!(threshold_segment(&zero, 300.0, &heart).unwrap().count(), 0);
        assert_eq!(threshold_segment(&img, -1.0, &heart).unwrap(), heart);
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().rho - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().rho + 1.0).abs() < 1e-12);
        // x̄=3, ȳ=4, Σdxdy=6, Σdx²=10, Σdy²=6 → 6/√60
        let z = [2.0, 4.0, 5.0, 4.0, 5.0];
        let c = pearson(&x, &z).unwrap();
        assert!((c.rho - 6.0 / 60f64.sqrt()).abs() < 1e-12);
        // t = ρ·sqrt(3/(1−ρ²)) = 2.1213, two-sided with 3 df
        assert!((c.p_value - 0.124027).abs() < 1e-5, "{}", c.p_value);
        assert!(pearson(&x, &[1.0; 5]).is_err());
        assert!(pearson(&x[..2], &z[..2]).is_err());
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let y = [2.0, 3.0, 2.5, 9.0, 4.0, 6.5];
        let r = pearson(&x, &y).unwrap().rho;
        let x2: Vec<f64> = x.iter().map(|v| 3.5 * v - 10.0).collect();
        assert!((pearson(&x2, &y).unwrap().rho - r).abs() <= 1e-12);
    }

    #[test]
    fn bland_altman_examples() {
        let x = [1.0, 2.0, 3.0];
        let b = bland_altman(&x, &x).unwrap();
        assert_eq!((b.mean_diff, b.sd_diff, b.loa_low, b.loa_high), (0.0, 0.0, 0.0, 0.0));
        let y: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        let b = bland_altman(&y, &x).unwrap();
        assert_eq!((b.mean_diff, b.sd_diff), (5.0, 0.0));
        let b = bland_altman(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(b.mean_diff, 0.0);
        assert!((b.sd_diff - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((b.loa_high - 2.263).abs() < 1e-3);
        assert!(b.to_csv().starts_with("mean,diff\n0.5,1\n"));
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn bland_altman_limits_cover_gaussian_differences() {
        use rand_distr::{Distribution, Normal};
        // coverage averaged over repeated n = 200 draws; a single draw
        // scatters by about ±1.5 % around 95 %
        let n = Normal::new(0.0, 3.0).unwrap();
        let x: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let mut covered = 0;
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let y: Vec<f64> = x.iter().map(|v| v + 1.0 + n.sample(&mut rng)).collect();
            let b = bland_altman(&y, &x).unwrap();
            covered += b.table.iter().filter(|(_, d)| *d >= b.loa_low && *d <= b.loa_high).count();
        }
        assert!(covered as f64 / 4000.0 >= 0.93, "{covered}");
    }

    #[test]
    fn volume_error_examples() {
        assert_eq!(volume_percent_error(100.0, 100.0).unwrap(), 0.0);
        assert!((volume_percent_error(109.1, 100.0).unwrap() - 9.1).abs() < 1e-9);
        assert_eq!(volume_percent_error(50.0, 100.0).unwrap(), 50.0);
        assert!(volume_percent_error(1.0, 0.0).is_err());
    }

    #[test]
    fn report_json_round_trip_keeps_infinity() {
        let r = EvalReport {
            nmi: 0.91234567890123,
            nmi_sd: 0.01,
            psnr_db: f64::INFINITY,
            psnr_sd: 0.0,
            dice: 0.9,
            dice_sd: 0.02,
            dv_percent: 3.3,
            dv_percent_sd: 1.0,
            pearson_rho: Some(0.97),
            pearson_p: Some(1e-9),
            bland_altman: Some(BlandAltmanSummary {
                mean_diff: 0.1,
                sd_diff: 0.2,
                loa_low: -0.292,
                loa_high: 0.492,
            }),
            slices: 20,
            volumes: 20,
            psnr_peak: 4095.0,
            nmi_bins: 32,
            v_th_hu: 300.0,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr_db\":\"+inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn bits() -> impl Strategy<Value = Vec<bool>> {
            prop::collection::vec(any::<bool>(), 36)
        }

        proptest! {
            #[test]
            fn dice_is_symmetric_and_bounded(a in bits(), b in bits()) {
                let (ma, mb) = (Mask::new(6, 6, a).unwrap(), Mask::new(6, 6, b).unwrap());
                let d = dice(&ma, &mb).unwrap();
                prop_assert_eq!(d, dice(&mb, &ma).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
            }

            #[test]
            fn nmi_is_symmetric_and_bounded(
                a in prop::collection::vec(-1000i16..2000, 64),
                b in prop::collection::vec(-1000i16..2000, 64),
            ) {
                let s = |v: &[i16]| slice(8, 8, v.iter().map(|&x| f32::from(x)).collect());
                let (sa, sb) = (s(&a), s(&b));
                let ab = nmi(&sa, &sb, None, 16).unwrap();
                prop_assert!((ab - nmi(&sb, &sa, None, 16).unwrap()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert!((nmi(&sa, &sa, None, 16).unwrap() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn psnr_of_a_constant_offset(v in prop::collection::vec(-1000i16..2000, 25), d in 1i16..500) {
                let a = slice(5, 5, v.iter().map(|&x| f32::from(x)).collect());
                let b = slice(5, 5, v.iter().map(|&x| f32::from(x + d)).collect());
                let want = 20.0 * (4095.0 / f64::from(d)).log10();
                prop_assert!((psnr(&a, &b, None, 4095.0).unwrap() - want).abs() < 1e-9);
            }

            #[test]
            fn pearson_of_an_affine_map_is_unit(
                x in prop::collection::vec(-100.0f64..100.0, 5..30),
                k in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
                c in -50.0f64..50.0,
            ) {
                let (m, sd) = mean_sd(&x);
                prop_assume!(sd > 1e-3 * m.abs().max(1.0));
                let y: Vec<f64> = x.iter().map(|v| k * v + c).collect();
                let r = pearson(&x, &y).unwrap();
                prop_assert!((r.rho - k.signum()).abs() < 1e-9);
            }
        }
    }
}
