use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RawStreams;
use crate::codec;
use crate::error::{Error, Result};
use crate::signal::{decimate, dwt_approx, segment, window_length, FeatureWindow, Sample, AXES};

const MAGIC: &[u8; 8] = b"EBALWIN1";
const VERSION: u32 = 1;
const PROVENANCE_FILE: &str = "provenance.toml";

/// A jump of more than this many sample periods starts a new segment.
const GAP_PERIODS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepParams {
    pub window_seconds: f64,
    pub target_hz: f64,
    #[serde(default = "haar")]
    pub wavelet: String,
    #[serde(default = "one")]
    pub levels: u32,
}

fn haar() -> String {
    "haar".into()
}

fn one() -> u32 {
    1
}

impl PrepParams {
    pub fn new(window_seconds: f64, target_hz: f64) -> Self {
        Self {
            window_seconds,
            target_hz,
            wavelet: haar(),
            levels: 1,
        }
    }

    /// Decimated samples per window.
    pub fn display_length(&self) -> usize {
        window_length(self.window_seconds, self.target_hz)
    }

    /// Coefficients per axis per window.
    pub fn feature_length(&self) -> usize {
        self.display_length() / 2
    }

    fn validate(&self) -> Result<()> {
        if self.wavelet != "haar" || self.levels != 1 {
            return Err(Error::Config(format!(
                "unsupported wavelet {:?} with {} levels (only single-level haar)",
                self.wavelet, self.levels
            )));
        }
        if self.feature_length() == 0 {
            return Err(Error::Config(format!(
                "{} s windows at {} Hz leave no coefficients",
                self.window_seconds, self.target_hz
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 (hex) of the manifest text and preprocessing parameters.
    pub manifest_hash: String,
    pub classes: Vec<String>,
    pub params: PrepParams,
    /// Stored coefficients divided by raw samples they summarize.
    pub compression_ratio: f64,
    pub windows: usize,
    pub labeled_windows: usize,
    /// Windows dropped for impure labels or short length.
    pub dropped_windows: usize,
    pub skipped_rows: usize,
}

/// Preprocessed windows grouped by user.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStore {
    pub provenance: Provenance,
    pub users: BTreeMap<String, Vec<FeatureWindow>>,
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

fn split_at_gaps(samples: &[Sample], rate_hz: f64) -> Vec<&[Sample]> {
    let limit = GAP_PERIODS / rate_hz;
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..samples.len() {
        if samples[i].t - samples[i - 1].t > limit {
            out.push(&samples[start..i]);
            start = i;
        }
    }
    if start < samples.len() {
        out.push(&samples[start..]);
    }
    out
}

fn manifest_hash(manifest_text: &str, params: &PrepParams) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest_text.as_bytes());
    h.update(toml::to_string(params)?.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Segments, decimates and transforms every stream. Window ids follow the
/// sorted (user, device, time) order.
pub fn preprocess_and_store(
    corpus: &RawStreams,
    params: &PrepParams,
    manifest_text: &str,
) -> Result<WindowStore> {
    params.validate()?;
    let d_len = params.display_length();
    let mut users: BTreeMap<String, Vec<FeatureWindow>> = BTreeMap::new();
    let mut streams: Vec<_> = corpus.streams.iter().collect();
    streams.sort_by(|a, b| (&a.user_id, &a.device_id).cmp(&(&b.user_id, &b.device_id)));
    let (mut next_id, mut dropped, mut raw_values, mut coef_values) =
        (0u64, 0usize, 0usize, 0usize);
    for s in streams {
        for piece in split_at_gaps(&s.samples, s.rate_hz) {
            let full = piece.len() / window_length(params.window_seconds, s.rate_hz).max(1);
            let windows = segment(
                piece,
                params.window_seconds,
                s.rate_hz,
                &s.user_id,
                &s.device_id,
            )?;
            dropped += full - windows.len();
            for w in windows {
                let raw = w.len();
                let mut w = decimate(&w, params.target_hz)?;
                if w.len() < d_len {
                    dropped += 1;
                    continue;
                }
                for axis in &mut w.axes {
                    axis.truncate(d_len);
                }
                let mut f = dwt_approx(&w, next_id, s.rate_hz)?;
                raw_values += AXES * raw;
                coef_values += f.coefficients.len();
                quantize(&mut f.coefficients);
                quantize(&mut f.display);
                next_id += 1;
                users.entry(s.user_id.clone()).or_default().push(f);
            }
        }
    }
    let windows = next_id as usize;
    if windows == 0 {
        return Err(Error::Data("no complete windows after segmentation".into()));
    }
    let labeled = users
        .values()
        .flatten()
        .filter(|w| w.label.is_some())
        .count();
    Ok(WindowStore {
        provenance: Provenance {
            manifest_hash: manifest_hash(manifest_text, params)?,
            classes: corpus.classes.clone(),
            params: params.clone(),
            compression_ratio: coef_values as f64 / raw_values as f64,
            windows,
            labeled_windows: labeled,
            dropped_windows: dropped,
            skipped_rows: corpus.skipped_rows,
        },
        users,
    })
}

#[derive(Serialize, Deserialize)]
struct UserHeader {
    user_id: String,
    ids: Vec<u64>,
    devices: Vec<String>,
    /// `-1` marks an unlabeled window.
    labels: Vec<i64>,
    rate_hz: Vec<f64>,
    native_rate_hz: Vec<f64>,
}

fn file_name(user: &str) -> String {
    let safe: String = user
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("user-{safe}.bin")
}

impl WindowStore {
    pub fn classes(&self) -> &[String] {
        &self.provenance.classes
    }

    pub fn feature_length(&self) -> usize {
        self.provenance.params.feature_length()
    }

    pub fn user_ids(&self) -> Vec<&str> {
        self.users.keys().map(String::as_str).collect()
    }

    pub fn windows(&self) -> impl Iterator<Item = &FeatureWindow> {
        self.users.values().flatten()
    }

    /// Labeled windows of one user.
    pub fn labeled(&self, user: &str) -> Vec<&FeatureWindow> {
        self.users
            .get(user)
            .map(|ws| ws.iter().filter(|w| w.label.is_some()).collect())
            .unwrap_or_default()
    }

    /// Users with at least one labeled window.
    pub fn labeled_users(&self) -> Vec<&str> {
        self.users
            .iter()
            .filter(|(_, ws)| ws.iter().any(|w| w.label.is_some()))
            .map(|(u, _)| u.as_str())
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(PROVENANCE_FILE),
            toml::to_string(&self.provenance)?,
        )?;
        let l = self.feature_length();
        let d = self.provenance.params.display_length();
        for (user, ws) in &self.users {
            let header = UserHeader {
                user_id: user.clone(),
                ids: ws.iter().map(|w| w.id).collect(),
                devices: ws.iter().map(|w| w.device_id.clone()).collect(),
                labels: ws
                    .iter()
                    .map(|w| w.label.map_or(-1, |l| l as i64))
                    .collect(),
                rate_hz: ws.iter().map(|w| w.rate_hz).collect(),
                native_rate_hz: ws.iter().map(|w| w.native_rate_hz).collect(),
            };
            let mut out = codec::Writer::new(MAGIC, VERSION, &toml::to_string(&header)?);
            let features: Vec<f64> = ws
                .iter()
                .flat_map(|w| w.coefficients.iter().copied())
                .collect();
            let display: Vec<f64> = ws.iter().flat_map(|w| w.display.iter().copied()).collect();
            out.tensor("features", &[ws.len(), AXES, l], &features);
            out.tensor("display", &[ws.len(), AXES, d], &display);
            std::fs::write(dir.join(file_name(user)), out.finish())?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let provenance: Provenance =
            toml::from_str(&std::fs::read_to_string(dir.join(PROVENANCE_FILE))?)?;
        let l = provenance.params.feature_length();
        let d = provenance.params.display_length();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("user-") && n.ends_with(".bin"))
            })
            .collect();
        files.sort();
        let mut users = BTreeMap::new();
        for path in files {
            let (header, records) = codec::read(&std::fs::read(&path)?, MAGIC, VERSION)?;
            let h: UserHeader = toml::from_str(&header)?;
            let n = h.ids.len();
            let consistent = [
                h.devices.len(),
                h.labels.len(),
                h.rate_hz.len(),
                h.native_rate_hz.len(),
            ]
            .iter()
            .all(|&k| k == n);
            let find = |name: &str, width: usize| -> Result<Vec<f64>> {
                let r = records.iter().find(|r| r.name == name).ok_or_else(|| {
                    Error::Malformed(format!("{}: no {name} record", path.display()))
                })?;
                if r.shape != [n, AXES, width] {
                    return Err(Error::Malformed(format!(
                        "{}: {name} has shape {:?}, expected {:?}",
                        path.display(),
                        r.shape,
                        [n, AXES, width]
                    )));
                }
                Ok(r.to_f64())
            };
            if !consistent {
                return Err(Error::Malformed(format!(
                    "{}: inconsistent window metadata",
                    path.display()
                )));
            }
            let features = find("features", l)?;
            let display = find("display", d)?;
            let classes = provenance.classes.len() as i64;
            let mut ws = Vec::with_capacity(n);
            for i in 0..n {
                let label = match h.labels[i] {
                    -1 => None,
                    c if (0..classes).contains(&c) => Some(c as usize),
                    c => {
                        return Err(Error::Malformed(format!(
                            "{}: label {c} out of range",
                            path.display()
                        )))
                    }
                };
                ws.push(FeatureWindow {
                    id: h.ids[i],
                    user_id: h.user_id.clone(),
                    device_id: h.devices[i].clone(),
                    label,
                    rate_hz: h.rate_hz[i],
                    native_rate_hz: h.native_rate_hz[i],
                    coefficients: features[i * AXES * l..(i + 1) * AXES * l].to_vec(),
                    display: display[i * AXES * d..(i + 1) * AXES * d].to_vec(),
                });
            }
            users.insert(h.user_id, ws);
        }
        Ok(Self { provenance, users })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use crate::data::Stream;

    #[test]
    fn hhar_like_rates_compress_to_a_quarter() {
        let corpus = generate(&SyntheticConfig::new(2, 3, 2, 200.0, 5));
        let store = preprocess_and_store(&corpus, &PrepParams::new(2.0, 100.0), "m").unwrap();
        assert_eq!(store.provenance.windows, 2 * 3 * 2);
        assert_eq!(store.feature_length(), 100);
        assert!((store.provenance.compression_ratio - 0.25).abs() < 1e-12);
        let ids: Vec<u64> = store.windows().map(|w| w.id).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn notch_window_length() {
        let corpus = generate(&SyntheticConfig::new(1, 2, 2, 31.25, 5));
        let store = preprocess_and_store(&corpus, &PrepParams::new(2.0, 31.25), "m").unwrap();
        assert_eq!(store.feature_length(), 31);
        assert!((store.provenance.compression_ratio - 93.0 / 189.0).abs() < 1e-12);
    }

    #[test]
    fn gaps_restart_segmentation() {
        let mk = |t0: f64, n: usize| {
            (0..n).map(move |i| Sample {
                t: t0 + i as f64 * 0.1,
                xyz: [0.0; 3],
                label: Some(0),
            })
        };
        let samples: Vec<Sample> = mk(0.0, 25).chain(mk(100.0, 20)).collect();
        let corpus = RawStreams {
            classes: vec!["a".into()],
            streams: vec![Stream {
                user_id: "u".into(),
                device_id: "d".into(),
                rate_hz: 10.0,
                samples,
            }],
            skipped_rows: 0,
        };
        let store = preprocess_and_store(&corpus, &PrepParams::new(2.0, 10.0), "m").unwrap();
        // 25 -> 1 window (5 left over), 20 -> 1 window.
        assert_eq!(store.provenance.windows, 2);
        assert_eq!(store.users["u"][1].coefficients.len(), 30);
    }

    #[test]
    fn save_load_round_trip() {
        let corpus = generate(&SyntheticConfig::new(2, 2, 2, 50.0, 3));
        let store = preprocess_and_store(&corpus, &PrepParams::new(2.0, 50.0), "m").unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        assert_eq!(WindowStore::load(dir.path()).unwrap(), store);
    }

    #[test]
    fn hash_depends_on_params() {
        let a = manifest_hash("m", &PrepParams::new(2.0, 50.0)).unwrap();
        let b = manifest_hash("m", &PrepParams::new(2.0, 25.0)).unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
    }
}
