//! SSoS images, the image and k-space distances, PSNR, SSIM and the
//! start-to-peak statistic of contrast dynamics.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{contract_err, param_err, Error, Result};
use crate::phantom::MultiCoilImage;
use crate::sampling::KSpaceFrame;

/// Square root of the sum of squares over coils, `[H, W]`, nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct SSoSImage {
    pub data: Array2<f64>,
}

impl SSoSImage {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return contract_err("SSoS image entries must be finite and nonnegative");
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

pub fn ssos(x: &MultiCoilImage) -> SSoSImage {
    let mut acc = Array2::<f64>::zeros((x.height(), x.width()));
    for plane in x.data.outer_iter() {
        Zip::from(&mut acc).and(&plane).for_each(|a, v| *a += v.norm_sqr());
    }
    SSoSImage { data: acc.mapv_into(f64::sqrt) }
}

/// Norm used by the image distance `d_I`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageNorm {
    /// Entrywise sum of absolute values.
    #[default]
    L1,
    /// Euclidean (Frobenius) norm.
    L2,
}

impl ImageNorm {
    pub fn of_difference(self, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        match self {
            ImageNorm::L1 => Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y).abs()),
            ImageNorm::L2 => Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y).powi(2)).sqrt(),
        }
    }
}

/// `d_I(x, x') = ‖S(x) − S(x')‖`.
pub fn d_image(x: &MultiCoilImage, y: &MultiCoilImage, norm: ImageNorm) -> Result<f64> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return contract_err(format!("d_image shapes {:?} and {:?} differ", x.dims(), y.dims()));
    }
    Ok(norm.of_difference(&ssos(x).data, &ssos(y).data))
}

/// Sum over coils of the Frobenius norm of the masked k-space difference.
pub fn d_freq(k: &KSpaceFrame, other: &KSpaceFrame) -> Result<f64> {
    if k.mask.mask != other.mask.mask {
        return contract_err("d_freq needs identical sampling masks");
    }
    if k.data.dim() != other.data.dim() {
        return contract_err("d_freq inputs differ in shape");
    }
    let mut total = 0.0;
    for (a, b) in k.data.outer_iter().zip(other.data.outer_iter()) {
        let sq = Zip::from(&a).and(&b).and(&k.mask.mask).fold(0.0, |acc, x, y, &m| {
            if m {
                acc + (x - y).norm_sqr()
            } else {
                acc
            }
        });
        total += sq.sqrt();
    }
    Ok(total)
}

fn check_dims(a: &SSoSImage, b: &SSoSImage) -> Result<()> {
    if a.dims() != b.dims() {
        return contract_err(format!("image shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with the peak taken from the reference.
/// Returns `f64::INFINITY` when the images are identical.
pub fn psnr(recon: &SSoSImage, reference: &SSoSImage) -> Result<f64> {
    check_dims(recon, reference)?;
    let n = reference.data.len() as f64;
    let mse = Zip::from(&recon.data).and(&reference.data).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (reference.max() / mse.sqrt()).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Side of the square uniform window.
    pub window: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { k1: 0.01, k2: 0.03, window: 7 }
    }
}

/// Mean structural similarity over all fully contained uniform windows.
///
/// The dynamic range is `max − min` of the reference; a constant reference
/// falls back to its magnitude, and an all-zero one to 1.
pub fn ssim(recon: &SSoSImage, reference: &SSoSImage, params: SsimParams) -> Result<f64> {
    check_dims(recon, reference)?;
    let (h, w) = reference.dims();
    let win = params.window;
    if win == 0 || win > h || win > w {
        return param_err(format!("SSIM window {win} does not fit a {h}x{w} image"));
    }
    let (lo, hi) = reference.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut range = hi - lo;
    if range <= 0.0 {
        range = if hi.abs() > 0.0 { hi.abs() } else { 1.0 };
    }
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in i..i + win {
                for b in j..j + win {
                    let x = recon.data[[a, b]];
                    let y = reference.data[[a, b]];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Frames from the start of enhancement to the peak.
///
/// The start is the first frame exceeding `baseline + threshold_frac·(peak − baseline)`,
/// where the baseline is the mean of the frames before that start. The two are
/// found together by fixed-point iteration, starting from the first frame as
/// baseline.
pub fn start_to_peak(series: &[f64], threshold_frac: f64) -> Result<usize> {
    if series.is_empty() || series.iter().any(|v| !v.is_finite()) {
        return param_err("start_to_peak needs a nonempty finite series");
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return param_err(format!("threshold fraction {threshold_frac} outside (0, 1)"));
    }
    let (peak_idx, peak) = series
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mut baseline = series[0];
    if peak <= baseline {
        return Err(Error::UndefinedDynamics("series never rises above its first frame".into()));
    }
    let mut onset = usize::MAX;
    for _ in 0..series.len() + 1 {
        let threshold = baseline + threshold_frac * (peak - baseline);
        let next = series.iter().position(|&v| v > threshold).unwrap_or(peak_idx);
        if next == onset {
            break;
        }
        onset = next;
        baseline = if onset == 0 { series[0] } else { series[..onset].iter().sum::<f64>() / onset as f64 };
        if peak <= baseline {
            return Err(Error::UndefinedDynamics("peak does not exceed the pre-arrival baseline".into()));
        }
    }
    Ok(peak_idx.saturating_sub(onset))
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub frame: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub vs: usize,
    pub method: String,
}

/// JSON has no infinity, so identical images are written as the string `"inf"`.
fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("unexpected PSNR value {t:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{bolus_curve, GammaVariate, ImageRole};
    use crate::sampling::SamplingMask;
    use ndarray::{array, Array3};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn image(values: Vec<Complex64>, c: usize, h: usize, w: usize) -> MultiCoilImage {
        MultiCoilImage::new(Array3::from_shape_vec((c, h, w), values).unwrap(), 0, ImageRole::GroundTruth).unwrap()
    }

    fn real(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    #[test]
    fn ssos_examples() {
        let two = image(real(&[3.0, 4.0]), 2, 1, 1);
        assert_eq!(ssos(&two).data[[0, 0]], 5.0);
        let one = image(vec![Complex64::new(3.0, -4.0), Complex64::new(-1.0, 0.0)], 1, 1, 2);
        assert_eq!(ssos(&one).data, array![[5.0, 1.0]]);
        let mut rotated = two.clone();
        let phase = Complex64::from_polar(1.0, 0.7);
        rotated.data.mapv_inplace(|v| v * phase);
        assert!((ssos(&rotated).data[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn d_image_two_pixel_example() {
        let a = image(real(&[1.0, 2.0]), 1, 1, 2);
        let b = image(real(&[0.0, 2.0]), 1, 1, 2);
        assert_eq!(d_image(&a, &b, ImageNorm::L1).unwrap(), 1.0);
        assert_eq!(d_image(&b, &a, ImageNorm::L1).unwrap(), 1.0);
        assert_eq!(d_image(&a, &a, ImageNorm::L1).unwrap(), 0.0);
        assert_eq!(d_image(&a, &b, ImageNorm::L2).unwrap(), 1.0);
        let c = image(real(&[0.0, 2.0, 1.0]), 1, 1, 3);
        assert!(d_image(&a, &c, ImageNorm::L1).is_err());
    }

    fn kframe(values: Vec<Complex64>, mask: Vec<bool>, c: usize, h: usize, w: usize) -> KSpaceFrame {
        let mask = SamplingMask::new(Array2::from_shape_vec((h, w), mask).unwrap(), 1).unwrap();
        let mut data = Array3::from_shape_vec((c, h, w), values).unwrap();
        mask.project(&mut data);
        KSpaceFrame::new(data, mask).unwrap()
    }

    #[test]
    fn d_freq_examples() {
        let a = kframe(vec![Complex64::new(3.0, 4.0), Complex64::default()], vec![true, true], 1, 1, 2);
        let z = kframe(vec![Complex64::default(); 2], vec![true, true], 1, 1, 2);
        assert_eq!(d_freq(&a, &z).unwrap(), 5.0);
        assert_eq!(d_freq(&a, &a).unwrap(), 0.0);
        // Off-mask bins are zeroed by construction, so differing inputs there are ignored.
        let b = kframe(vec![Complex64::new(1.0, 0.0), Complex64::new(9.0, 0.0)], vec![true, false], 1, 1, 2);
        let c = kframe(vec![Complex64::new(1.0, 0.0), Complex64::new(-2.0, 0.0)], vec![true, false], 1, 1, 2);
        assert_eq!(d_freq(&b, &c).unwrap(), 0.0);
        assert!(d_freq(&a, &b).is_err());
        // Two coils: norms add per coil rather than in quadrature.
        let two = kframe(real(&[3.0, 4.0]), vec![true], 2, 1, 1);
        let zero = kframe(real(&[0.0, 0.0]), vec![true], 2, 1, 1);
        assert_eq!(d_freq(&two, &zero).unwrap(), 7.0);
    }

    fn s(v: Array2<f64>) -> SSoSImage {
        SSoSImage::new(v).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let r = s(array![[1.0, 0.0]]);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let v = psnr(&s(array![[0.0, 0.0]]), &r).unwrap();
        assert!((v - 3.010_299_956_639_812).abs() < 1e-12);
        let a = s(array![[0.3, 1.7], [2.0, 0.1]]);
        let b = s(array![[0.5, 1.2], [2.4, 0.0]]);
        let scaled = |x: &SSoSImage| s(x.data.mapv(|v| v * 7.5));
        assert!((psnr(&a, &b).unwrap() - psnr(&scaled(&a), &scaled(&b)).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ssim_examples() {
        let a = s(Array2::from_shape_fn((10, 10), |(i, j)| ((i * 3 + j * 7) % 11) as f64));
        assert!((ssim(&a, &a, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let c = s(Array2::from_elem((8, 8), 2.5));
        assert!((ssim(&c, &c, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let z = s(Array2::zeros((8, 8)));
        assert!((ssim(&z, &z, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let noisy = s(a.data.mapv(|v| (v + 3.0) % 11.0));
        let v = ssim(&noisy, &a, SsimParams::default()).unwrap();
        assert!((-1.0..1.0).contains(&v));
        assert!(ssim(&a, &a, SsimParams { window: 11, ..Default::default() }).is_err());
        assert_eq!(SsimParams::default(), SsimParams { k1: 0.01, k2: 0.03, window: 7 });
    }

    #[test]
    fn ssim_matches_single_window_formula() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let y = array![[1.5, 2.0], [2.5, 5.0]];
        let got = ssim(&s(x.clone()), &s(y.clone()), SsimParams { window: 2, ..Default::default() }).unwrap();
        // Direct evaluation with population statistics over the only window.
        let (mx, my) = (2.5, 2.75);
        let vx = (1.5f64.powi(2) + 0.5f64.powi(2) * 2.0 + 1.5f64.powi(2)) / 4.0;
        let vy = ((1.5f64 - 2.75).powi(2) + (2.0f64 - 2.75).powi(2) + (2.5f64 - 2.75).powi(2) + (5.0f64 - 2.75).powi(2)) / 4.0;
        let cxy = ((1.0 - mx) * (1.5 - my) + (2.0 - mx) * (2.0 - my) + (3.0 - mx) * (2.5 - my) + (4.0 - mx) * (5.0 - my)) / 4.0;
        let r = 5.0 - 1.5;
        let (c1, c2) = ((0.01f64 * r).powi(2), (0.03f64 * r).powi(2));
        let expected = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn start_to_peak_on_sampled_gamma_variate() {
        let g = GammaVariate { t0: 4.0, shape: 2.5, scale: 1.3, amplitude: 5.0 };
        let series: Vec<f64> = (0..30).map(|t| bolus_curve(&g, t as f64).unwrap()).collect();
        // Brute force: zero baseline before arrival, so the threshold is 10% of the peak.
        let peak = series.iter().cloned().fold(f64::MIN, f64::max);
        let argmax = series.iter().position(|&v| v == peak).unwrap();
        let onset = series.iter().position(|&v| v > 0.1 * peak).unwrap();
        assert_eq!(start_to_peak(&series, 0.1).unwrap(), argmax - onset);
        let offset: Vec<f64> = series.iter().map(|v| v + 2.0).collect();
        assert_eq!(start_to_peak(&offset, 0.1).unwrap(), argmax - onset);
    }

    #[test]
    fn start_to_peak_is_shift_invariant_and_rejects_constant() {
        let base = [0.1, 0.1, 0.12, 0.5, 1.4, 2.0, 1.6, 1.0, 0.6];
        let d = start_to_peak(&base, 0.1).unwrap();
        let shifted: Vec<f64> = [0.1, 0.1, 0.1].iter().chain(base.iter()).copied().collect();
        assert_eq!(start_to_peak(&shifted, 0.1).unwrap(), d);
        assert!(matches!(start_to_peak(&[1.0; 6], 0.1), Err(Error::UndefinedDynamics(_))));
        assert!(start_to_peak(&base, 0.0).is_err());
    }

    #[test]
    fn metric_record_round_trips_infinity() {
        let r = MetricRecord { frame: 3, psnr_db: f64::INFINITY, ssim: 1.0, vs: 5, method: "grappa".into() };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MetricRecord>(&text).unwrap(), r);
        let finite = MetricRecord { psnr_db: 31.5, ..r };
        assert_eq!(serde_json::from_str::<MetricRecord>(&serde_json::to_string(&finite).unwrap()).unwrap(), finite);
    }

    fn coil_image() -> impl Strategy<Value = MultiCoilImage> {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2 * 3 * 4)
            .prop_map(|v| image(v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect(), 2, 3, 4))
    }

    proptest! {
        #[test]
        fn d_image_is_a_pseudometric(x in coil_image(), y in coil_image(), z in coil_image()) {
            for norm in [ImageNorm::L1, ImageNorm::L2] {
                let xy = d_image(&x, &y, norm).unwrap();
                let yz = d_image(&y, &z, norm).unwrap();
                let xz = d_image(&x, &z, norm).unwrap();
                prop_assert!(xy >= 0.0);
                prop_assert!((xy - d_image(&y, &x, norm).unwrap()).abs() < 1e-12);
                prop_assert!(xz <= xy + yz + 1e-9);
            }
        }

        #[test]
        fn d_freq_single_coil_is_frobenius(v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 12)) {
            let vals: Vec<Complex64> = v.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
            let a = kframe(vals.clone(), vec![true; 12], 1, 3, 4);
            let z = kframe(vec![Complex64::default(); 12], vec![true; 12], 1, 3, 4);
            let fro = vals.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((d_freq(&a, &z).unwrap() - fro).abs() < 1e-12);
        }
    }
}
