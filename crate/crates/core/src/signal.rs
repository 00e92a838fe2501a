//! Windowing, decimation and single-level Haar approximation coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AXES: usize = 3;

/// One accelerometer reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub xyz: [f64; AXES],
    pub label: Option<usize>,
}

/// Fixed-rate 3-axis segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    pub axes: [Vec<f64>; AXES],
    pub rate_hz: f64,
    pub user_id: String,
    pub device_id: String,
    pub label: Option<usize>,
    pub start_time: f64,
}

impl SensorWindow {
    pub fn len(&self) -> usize {
        self.axes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model input: Haar approximation coefficients per axis, plus the decimated
/// samples they came from (for display to a human oracle).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub id: u64,
    pub user_id: String,
    pub device_id: String,
    pub label: Option<usize>,
    /// Rate of `display` samples.
    pub rate_hz: f64,
    /// Rate of the raw stream before decimation.
    pub native_rate_hz: f64,
    /// `[AXES * len]`, axis-major.
    pub coefficients: Vec<f64>,
    /// `[AXES * display_len]`, axis-major.
    pub display: Vec<f64>,
}

impl FeatureWindow {
    pub fn len(&self) -> usize {
        self.coefficients.len() / AXES
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn axis(&self, a: usize) -> &[f64] {
        let n = self.len();
        &self.coefficients[a * n..(a + 1) * n]
    }

    pub fn display_axis(&self, a: usize) -> &[f64] {
        let n = self.display.len() / AXES;
        &self.display[a * n..(a + 1) * n]
    }
}

/// Samples per window for a duration and rate.
pub fn window_length(window_seconds: f64, rate_hz: f64) -> usize {
    (window_seconds * rate_hz).round() as usize
}

/// Splits a time-sorted stream into consecutive non-overlapping windows.
///
/// The trailing partial window is dropped. A window keeps a label only when
/// every sample carries that label; windows mixing labels (or labeled and
/// unlabeled samples) are dropped.
pub fn segment(
    samples: &[Sample],
    window_seconds: f64,
    rate_hz: f64,
    user_id: &str,
    device_id: &str,
) -> Result<Vec<SensorWindow>> {
    if rate_hz <= 0.0 || !rate_hz.is_finite() || window_seconds <= 0.0 {
        return Err(Error::Signal(format!(
            "window {window_seconds} s at {rate_hz} Hz is not a valid segmentation"
        )));
    }
    let len = window_length(window_seconds, rate_hz);
    if len == 0 {
        return Err(Error::Signal(format!(
            "window of {window_seconds} s at {rate_hz} Hz is empty"
        )));
    }
    let mut out = Vec::new();
    for chunk in samples.chunks_exact(len) {
        let first = chunk[0].label;
        if chunk.iter().any(|s| s.label != first) {
            continue;
        }
        let mut axes: [Vec<f64>; AXES] = Default::default();
        for (a, axis) in axes.iter_mut().enumerate() {
            *axis = chunk.iter().map(|s| s.xyz[a]).collect();
        }
        out.push(SensorWindow {
            axes,
            rate_hz,
            user_id: user_id.to_string(),
            device_id: device_id.to_string(),
            label: first,
            start_time: chunk[0].t,
        });
    }
    Ok(out)
}

/// Down-samples a window to `target_hz`.
///
/// Integer rate ratios `k` average each block of `k` samples (a width-`k`
/// moving average read every `k`-th sample); other ratios resample by linear
/// interpolation. Output length is `floor(len * target / rate)`.
pub fn decimate(window: &SensorWindow, target_hz: f64) -> Result<SensorWindow> {
    if target_hz <= 0.0 || window.rate_hz < target_hz {
        return Err(Error::Signal(format!(
            "cannot resample {} Hz to {target_hz} Hz (upsampling)",
            window.rate_hz
        )));
    }
    let ratio = window.rate_hz / target_hz;
    let mut out = window.clone();
    out.rate_hz = target_hz;
    if (ratio - 1.0).abs() < 1e-9 {
        return Ok(out);
    }
    let n = window.len();
    if (ratio - ratio.round()).abs() < 1e-9 {
        let k = ratio.round() as usize;
        for (dst, src) in out.axes.iter_mut().zip(&window.axes) {
            *dst = src
                .chunks_exact(k)
                .map(|b| b.iter().sum::<f64>() / k as f64)
                .collect();
        }
    } else {
        let m = ((n as f64) / ratio + 1e-9).floor() as usize;
        for (dst, src) in out.axes.iter_mut().zip(&window.axes) {
            *dst = (0..m)
                .map(|i| {
                    let pos = i as f64 * ratio;
                    let j = pos.floor() as usize;
                    let frac = pos - j as f64;
                    if j + 1 < n {
                        src[j] * (1.0 - frac) + src[j + 1] * frac
                    } else {
                        src[n - 1]
                    }
                })
                .collect();
        }
    }
    Ok(out)
}

/// Single-level orthonormal Haar approximation: `(x[2k] + x[2k+1]) / sqrt(2)`.
/// An odd trailing sample is ignored.
pub fn haar_approx(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::Signal(format!(
            "Haar transform needs 2 samples, got {}",
            x.len()
        )));
    }
    Ok(x.chunks_exact(2)
        .map(|p| (p[0] + p[1]) * std::f64::consts::FRAC_1_SQRT_2)
        .collect())
}

/// Haar approximation coefficients of each axis.
pub fn dwt_approx(window: &SensorWindow, id: u64, native_rate_hz: f64) -> Result<FeatureWindow> {
    let mut coefficients = Vec::with_capacity(AXES * window.len() / 2);
    let mut display = Vec::with_capacity(AXES * window.len());
    for axis in &window.axes {
        coefficients.extend(haar_approx(axis)?);
        display.extend_from_slice(axis);
    }
    Ok(FeatureWindow {
        id,
        user_id: window.user_id.clone(),
        device_id: window.device_id.clone(),
        label: window.label,
        rate_hz: window.rate_hz,
        native_rate_hz,
        coefficients,
        display,
    })
}

/// Per-axis mean/std standardization fitted on training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; AXES],
    pub std: [f64; AXES],
}

impl Standardizer {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a FeatureWindow>) -> Self {
        let mut sum = [0.0; AXES];
        let mut sq = [0.0; AXES];
        let mut count = 0usize;
        for w in windows {
            for a in 0..AXES {
                for &v in w.axis(a) {
                    sum[a] += v;
                    sq[a] += v * v;
                }
            }
            count += w.len();
        }
        let mut mean = [0.0; AXES];
        let mut std = [1.0; AXES];
        if count > 0 {
            for a in 0..AXES {
                mean[a] = sum[a] / count as f64;
                let var = (sq[a] / count as f64 - mean[a] * mean[a]).max(0.0);
                std[a] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, coefficients: &mut [f64]) {
        let n = coefficients.len() / AXES;
        for (a, chunk) in coefficients.chunks_exact_mut(n).enumerate() {
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - self.mean[a]) / self.std[a]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stream(n: usize, rate: f64, label: impl Fn(usize) -> Option<usize>) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                t: i as f64 / rate,
                xyz: [i as f64, 0.0, 1.0],
                label: label(i),
            })
            .collect()
    }

    fn window(x: Vec<f64>, rate: f64) -> SensorWindow {
        SensorWindow {
            axes: [x.clone(), x.clone(), x],
            rate_hz: rate,
            user_id: "u".into(),
            device_id: "d".into(),
            label: None,
            start_time: 0.0,
        }
    }

    #[test]
    fn segment_drops_partial_tail() {
        let w = segment(&stream(450, 100.0, |_| Some(1)), 2.0, 100.0, "a", "d").unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|w| w.len() == 200 && w.label == Some(1)));
        assert_eq!(w[1].axes[0][0], 200.0);
    }

    #[test]
    fn segment_drops_mixed_labels() {
        let w = segment(
            &stream(200, 100.0, |i| Some(usize::from(i >= 150))),
            2.0,
            100.0,
            "a",
            "d",
        )
        .unwrap();
        assert!(w.is_empty());
        let w = segment(
            &stream(200, 100.0, |i| if i < 3 { None } else { Some(0) }),
            2.0,
            100.0,
            "a",
            "d",
        )
        .unwrap();
        assert!(w.is_empty());
        assert!(segment(&[], 2.0, 100.0, "a", "d").unwrap().is_empty());
    }

    #[test]
    fn hhar_window_is_200_samples() {
        assert_eq!(window_length(2.0, 100.0), 200);
    }

    #[test]
    fn decimation_preserves_dc() {
        let w = window(vec![3.7; 200], 200.0);
        let d = decimate(&w, 100.0).unwrap();
        assert_eq!(d.len(), 100);
        for a in &d.axes {
            assert!(a.iter().all(|v| (v - 3.7).abs() < 1e-9));
        }
        let odd = decimate(&window(vec![-1.25; 200], 150.0), 100.0).unwrap();
        assert_eq!(odd.len(), 133);
        assert!(odd.axes[0].iter().all(|v| (v + 1.25).abs() < 1e-9));
    }

    #[test]
    fn decimation_same_rate_is_identity() {
        let w = window((0..10).map(|i| i as f64 * 0.3).collect(), 100.0);
        assert_eq!(decimate(&w, 100.0).unwrap(), w);
    }

    #[test]
    fn width_two_average_cancels_nyquist_tone() {
        let x: Vec<f64> = (0..200)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let d = decimate(&window(x, 200.0), 100.0).unwrap();
        assert!(d.axes[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampling_rejected() {
        assert!(decimate(&window(vec![0.0; 4], 50.0), 100.0).is_err());
    }

    #[test]
    fn haar_hand_values() {
        let s = std::f64::consts::SQRT_2;
        assert_eq!(haar_approx(&[1., 1., 1., 1.]).unwrap(), vec![s, s]);
        assert_eq!(haar_approx(&[1., -1.]).unwrap(), vec![0.0]);
        let v = haar_approx(&[3., 1., 2., 6.]).unwrap();
        assert_abs_diff_eq!(v[0], 2.828427, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], 5.656854, epsilon = 1e-6);
        assert_eq!(haar_approx(&[1., 2., 3.]).unwrap().len(), 1);
        assert!(haar_approx(&[1.0]).is_err());
    }

    #[test]
    fn standardizer_centers_axes() {
        let w = dwt_approx(
            &window((0..20).map(|i| i as f64).collect(), 100.0),
            0,
            100.0,
        )
        .unwrap();
        let s = Standardizer::fit([&w]);
        let mut c = w.coefficients.clone();
        s.apply(&mut c);
        let m: f64 = c[..10].iter().sum::<f64>() / 10.0;
        assert!(m.abs() < 1e-12);
    }
}
