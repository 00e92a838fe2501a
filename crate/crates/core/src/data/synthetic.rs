//! Seeded accelerometer-like corpus with known class structure.
//!
//! Class `c` is a posture (a gravity direction) with a periodic motion of
//! class-specific frequency and per-axis amplitude. Each user wears the
//! sensor slightly differently (a rotation of the sensor frame) and moves
//! with their own amplitude, tempo and phase; `user_style` scales how far
//! users deviate from the canonical signatures and `window_style` how much
//! a user's windows vary around their own style.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawStreams;
use crate::rng::{domain, RngStream};
use crate::signal::{window_length, Sample};

const GRAVITY: f64 = 9.81;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_classes: usize,
    pub windows_per_class: usize,
    pub rate_hz: f64,
    #[serde(default = "two")]
    pub window_seconds: f64,
    /// Standard deviation of additive Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Strength of per-user deviations; 0 makes all users identical.
    #[serde(default = "default_style")]
    pub user_style: f64,
    /// Strength of per-window deviations around the user's style; 0 makes
    /// every window of a user and class share one signature.
    #[serde(default)]
    pub window_style: f64,
    pub seed: u64,
}

fn two() -> f64 {
    2.0
}

fn default_noise() -> f64 {
    0.5
}

fn default_style() -> f64 {
    0.25
}

impl SyntheticConfig {
    pub fn new(
        num_users: usize,
        num_classes: usize,
        windows_per_class: usize,
        rate_hz: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_users,
            num_classes,
            windows_per_class,
            rate_hz,
            window_seconds: 2.0,
            noise_std: default_noise(),
            user_style: default_style(),
            window_style: 0.0,
            seed,
        }
    }
}

/// Evenly spread unit vectors (Fibonacci sphere).
fn directions(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = if n == 1 {
                1.0
            } else {
                1.0 - 2.0 * i as f64 / (n - 1) as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), r * th.sin(), z]
        })
        .collect()
}

/// Rotation matrix for `angle` around unit `axis` (Rodrigues).
fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[derive(Clone, Copy)]
struct UserStyle {
    rot: [[f64; 3]; 3],
    amplitude: f64,
    tempo: f64,
    phase: f64,
}

fn random_axis(rng: &mut impl Rng) -> [f64; 3] {
    let v = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0f64),
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn user_style(cfg: &SyntheticConfig, user: usize) -> UserStyle {
    let mut rng = RngStream::root(cfg.seed, domain::SYNTHETIC)
        .derive2(0xA5, user as u64)
        .rng();
    let axis = random_axis(&mut rng);
    let s = cfg.user_style;
    UserStyle {
        rot: rotation(axis, s * rng.random_range(0.5..1.0)),
        amplitude: 1.0 + s * rng.random_range(-1.0..1.0),
        tempo: 1.0 + 0.5 * s * rng.random_range(-1.0..1.0),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// `base` perturbed for one window.
fn window_style(base: &UserStyle, strength: f64, rng: &mut impl Rng) -> UserStyle {
    if strength == 0.0 {
        return *base;
    }
    let axis = random_axis(rng);
    let jitter = rotation(axis, strength * rng.random_range(0.0..1.0));
    UserStyle {
        rot: matmul(&jitter, &base.rot),
        amplitude: base.amplitude * (1.0 + 0.5 * strength * rng.random_range(-1.0..1.0)),
        tempo: base.tempo * (1.0 + 0.25 * strength * rng.random_range(-1.0..1.0)),
        phase: base.phase,
    }
}

/// Generates one labeled stream per user, windows of each class in a
/// shuffled order, aligned to the window grid. With `noise_std == 0` every
/// window also starts at the same phase, so a user's windows of one class
/// are exact copies.
pub fn generate(cfg: &SyntheticConfig) -> RawStreams {
    let noise = cfg.noise_std > 0.0;
    let len = window_length(cfg.window_seconds, cfg.rate_hz);
    let dirs = directions(cfg.num_classes);
    let normal = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise level");
    let mut streams = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let user = user_style(cfg, u);
        let user_rng = RngStream::root(cfg.seed, domain::SYNTHETIC).derive2(0xB7, u as u64);
        let mut order: Vec<usize> = (0..cfg.num_classes)
            .flat_map(|c| std::iter::repeat_n(c, cfg.windows_per_class))
            .collect();
        order.shuffle(&mut user_rng.derive(0).rng());
        let mut samples = Vec::with_capacity(order.len() * len);
        for (w, &c) in order.iter().enumerate() {
            let mut rng = user_rng.derive2(1, w as u64).rng();
            let window_phase = if noise {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            let style = window_style(
                &user,
                cfg.window_style,
                &mut user_rng.derive2(2, w as u64).rng(),
            );
            let freq = (1.0 + 0.75 * c as f64) * style.tempo;
            let g = dirs[c];
            for i in 0..len {
                let n = w * len + i;
                let t = n as f64 / cfg.rate_hz;
                let local = i as f64 / cfg.rate_hz;
                let mut body = [0.0; 3];
                for (a, b) in body.iter_mut().enumerate() {
                    let amp = (1.0 + 0.5 * ((c + a) % 3) as f64) * style.amplitude;
                    let arg =
                        2.0 * PI * freq * local + window_phase + style.phase + a as f64 * PI / 3.0;
                    *b = GRAVITY * g[a] + amp * arg.sin();
                }
                let mut xyz = [0.0; 3];
                for (r, out) in style.rot.iter().zip(xyz.iter_mut()) {
                    *out = r[0] * body[0] + r[1] * body[1] + r[2] * body[2];
                    if noise {
                        *out += normal.sample(&mut rng);
                    }
                }
                samples.push(Sample {
                    t,
                    xyz,
                    label: Some(c),
                });
            }
        }
        streams.push(super::Stream {
            user_id: format!("user{u}"),
            device_id: "sim".to_string(),
            rate_hz: cfg.rate_hz,
            samples,
        });
    }
    RawStreams {
        classes: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        streams,
        skipped_rows: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SyntheticConfig::new(2, 3, 4, 50.0, 9);
        assert_eq!(generate(&cfg), generate(&cfg));
        let other = SyntheticConfig {
            seed: 10,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg), generate(&other));
    }

    #[test]
    fn noiseless_windows_of_a_class_repeat_exactly() {
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            ..SyntheticConfig::new(2, 2, 3, 50.0, 1)
        };
        let corpus = generate(&cfg);
        let len = window_length(2.0, 50.0);
        for s in &corpus.streams {
            let windows: Vec<&[Sample]> = s.samples.chunks(len).collect();
            for a in &windows {
                for b in &windows {
                    if a[0].label == b[0].label {
                        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.xyz == y.xyz));
                    }
                }
            }
        }
    }

    #[test]
    fn class_counts() {
        let corpus = generate(&SyntheticConfig::new(3, 6, 5, 100.0, 2));
        assert_eq!(corpus.streams.len(), 3);
        for s in &corpus.streams {
            assert_eq!(s.samples.len(), 6 * 5 * 200);
        }
    }
}
