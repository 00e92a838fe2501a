//! Wall-clock medians of the deployment-critical steps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::train_epochs;
use crate::acquire::{predict_mc_batch, PassStrategy};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::signal::{decimate, dwt_approx, FeatureWindow, SensorWindow, AXES};

/// Median seconds of each measured step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub windows: usize,
    pub passes: usize,
    pub repeats: usize,
    /// Deterministic forward pass of one window.
    pub inference_per_window: f64,
    /// Haar transform of one decimated window.
    pub dwt_per_window: f64,
    /// Decimation of one native-rate window.
    pub decimation_per_window: f64,
    /// One fine-tuning epoch over the sample windows.
    pub incremental_epoch: f64,
    /// One stochastic pass over the whole pool.
    pub stochastic_pass: f64,
    /// Scoring the pool with every pass.
    pub acquisition_total: f64,
    /// `acquisition_total` with the deterministic trunk shared across passes.
    pub acquisition_total_shared_trunk: f64,
}

impl TimingReport {
    /// `acquisition_total / (passes * stochastic_pass)`.
    pub fn pass_ratio(&self) -> f64 {
        self.acquisition_total / (self.passes as f64 * self.stochastic_pass)
    }

    /// The five per-window / per-pool rows plus the derived totals.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("inference_per_window", self.inference_per_window),
            ("dwt_per_window", self.dwt_per_window),
            ("decimation_per_window", self.decimation_per_window),
            ("incremental_epoch", self.incremental_epoch),
            ("stochastic_pass", self.stochastic_pass),
            ("acquisition_total", self.acquisition_total),
            (
                "acquisition_total_shared_trunk",
                self.acquisition_total_shared_trunk,
            ),
        ]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let t0 = Instant::now();
    std::hint::black_box(f()?);
    Ok(t0.elapsed().as_secs_f64())
}

/// Native-rate window rebuilt from stored display samples by linear
/// interpolation, for timing decimation.
fn native_window(w: &FeatureWindow) -> SensorWindow {
    let ratio = w.native_rate_hz / w.rate_hz;
    let mut axes: [Vec<f64>; AXES] = Default::default();
    for (a, out) in axes.iter_mut().enumerate() {
        let src = w.display_axis(a);
        let n = ((src.len() as f64) * ratio).round() as usize;
        *out = (0..n)
            .map(|i| {
                let pos = i as f64 / ratio;
                let j = (pos.floor() as usize).min(src.len() - 1);
                let k = (j + 1).min(src.len() - 1);
                let f = pos - j as f64;
                src[j] * (1.0 - f) + src[k] * f
            })
            .collect();
    }
    SensorWindow {
        axes,
        rate_hz: w.native_rate_hz,
        user_id: w.user_id.clone(),
        device_id: w.device_id.clone(),
        label: w.label,
        start_time: 0.0,
    }
}

fn display_window(w: &FeatureWindow) -> SensorWindow {
    let mut axes: [Vec<f64>; AXES] = Default::default();
    for (a, out) in axes.iter_mut().enumerate() {
        *out = w.display_axis(a).to_vec();
    }
    SensorWindow {
        axes,
        rate_hz: w.rate_hz,
        user_id: w.user_id.clone(),
        device_id: w.device_id.clone(),
        label: w.label,
        start_time: 0.0,
    }
}

/// Times each step `repeats` times and reports medians. Stochastic passes
/// run the full network (no shared trunk) so that the acquisition total is
/// directly comparable with `passes` times one pass.
pub fn bench_timing(
    model: &ModelBundle,
    windows: &[&FeatureWindow],
    passes: usize,
    repeats: usize,
    seed: u64,
) -> Result<TimingReport> {
    if windows.len() < 10 {
        return Err(Error::Data(format!(
            "benchmark needs at least 10 windows, got {}",
            windows.len()
        )));
    }
    if passes == 0 || repeats == 0 {
        return Err(Error::Config(
            "passes and repeats must be at least 1".into(),
        ));
    }
    let natives: Vec<SensorWindow> = windows.iter().map(|w| native_window(w)).collect();
    let displays: Vec<SensorWindow> = windows.iter().map(|w| display_window(w)).collect();
    let n = windows.len() as f64;
    let labeled: Vec<(&FeatureWindow, usize)> = windows
        .iter()
        .filter_map(|w| w.label.map(|l| (*w, l)))
        .collect();

    let mut inference = Vec::new();
    let mut dwt = Vec::new();
    let mut decim = Vec::new();
    let mut epoch = Vec::new();
    let mut pass = Vec::new();
    let mut total = Vec::new();
    let mut shared = Vec::new();
    for r in 0..repeats {
        let mut per = Vec::with_capacity(windows.len());
        for w in windows {
            let input = model.input_tensor(&[*w])?;
            per.push(time(|| model.predict(&input))?);
        }
        inference.push(median(per));
        dwt.push(
            time(|| {
                displays
                    .iter()
                    .map(|d| dwt_approx(d, 0, d.rate_hz))
                    .collect::<Result<Vec<_>>>()
            })? / n,
        );
        decim.push(
            time(|| {
                natives
                    .iter()
                    .map(|d| decimate(d, windows[0].rate_hz))
                    .collect::<Result<Vec<_>>>()
            })? / n,
        );
        let mut m = model.clone();
        epoch.push(time(|| {
            train_epochs(&mut m, &labeled, 1, 32, seed.wrapping_add(r as u64))
        })?);
        pass.push(time(|| {
            predict_mc_batch(model, windows, 1, seed, PassStrategy::FullPasses)
        })?);
        total.push(time(|| {
            predict_mc_batch(model, windows, passes, seed, PassStrategy::FullPasses)
        })?);
        shared.push(time(|| {
            predict_mc_batch(model, windows, passes, seed, PassStrategy::SharedTrunk)
        })?);
    }
    Ok(TimingReport {
        windows: windows.len(),
        passes,
        repeats,
        inference_per_window: median(inference),
        dwt_per_window: median(dwt),
        decimation_per_window: median(decim),
        incremental_epoch: median(epoch),
        stochastic_pass: median(pass),
        acquisition_total: median(total),
        acquisition_total_shared_trunk: median(shared),
    })
}
