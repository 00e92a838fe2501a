//! MC-dropout predictive distributions and acquisition functions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::{clamped_ln, Mode, Tensor};
use crate::rng::{domain, RngStream};
use crate::signal::FeatureWindow;

/// Passes used when nothing else is configured.
pub const DEFAULT_PASSES: usize = 10;

/// `T` stochastic class-probability vectors and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSample {
    pub per_pass: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl PredictiveSample {
    pub fn from_passes(per_pass: Vec<Vec<f64>>) -> Result<Self> {
        let first = per_pass
            .first()
            .ok_or_else(|| Error::Config("predictive sample needs at least one pass".into()))?;
        let c = first.len();
        if c == 0 || per_pass.iter().any(|r| r.len() != c) {
            return Err(Error::Config(
                "passes must share a non-zero class count".into(),
            ));
        }
        let t = per_pass.len() as f64;
        // Offset from the first pass so identical passes give that pass exactly.
        let mean = (0..c)
            .map(|k| {
                let base = per_pass[0][k];
                base + per_pass.iter().map(|r| r[k] - base).sum::<f64>() / t
            })
            .collect();
        Ok(Self { per_pass, mean })
    }

    pub fn passes(&self) -> usize {
        self.per_pass.len()
    }

    pub fn classes(&self) -> usize {
        self.mean.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.mean)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, with the probability floor inside the log.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| if v > 0.0 { v * clamped_ln(v) } else { 0.0 })
        .sum::<f64>()
}

/// Entropy of the mean prediction.
pub fn max_entropy(sample: &PredictiveSample) -> f64 {
    entropy(&sample.mean).max(0.0)
}

/// Mutual information between the label and the dropout mask: entropy of the
/// mean minus the mean per-pass entropy.
///
/// Evaluated as the average divergence of each pass from the mean, which is
/// the same quantity term by term and cannot go negative.
pub fn bald(sample: &PredictiveSample) -> f64 {
    let log_mean: Vec<f64> = sample.mean.iter().map(|&m| clamped_ln(m)).collect();
    let total: f64 = sample
        .per_pass
        .iter()
        .map(|row| {
            row.iter()
                .zip(&log_mean)
                .map(|(&p, lm)| {
                    if p > 0.0 {
                        p * (clamped_ln(p) - lm)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .sum();
    (total / sample.passes() as f64).max(0.0)
}

/// One minus the largest mean class probability.
pub fn variation_ratio(sample: &PredictiveSample) -> f64 {
    let max = sample
        .mean
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (1.0 - max).clamp(0.0, 1.0)
}

/// Uniform deviate in `[0, 1)` from the stream.
pub fn random_score(rng: RngStream) -> f64 {
    rng.rng().random::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionFn {
    #[serde(rename = "maxentropy")]
    MaxEntropy,
    Bald,
    #[serde(rename = "varratio")]
    VariationRatio,
    Random,
}

impl AcquisitionFn {
    pub const ALL: [AcquisitionFn; 4] = [
        AcquisitionFn::MaxEntropy,
        AcquisitionFn::Bald,
        AcquisitionFn::VariationRatio,
        AcquisitionFn::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AcquisitionFn::MaxEntropy => "maxentropy",
            AcquisitionFn::Bald => "bald",
            AcquisitionFn::VariationRatio => "varratio",
            AcquisitionFn::Random => "random",
        }
    }

    /// Score of a predictive sample; `None` for random acquisition.
    pub fn score(self, sample: &PredictiveSample) -> Option<f64> {
        match self {
            AcquisitionFn::MaxEntropy => Some(max_entropy(sample)),
            AcquisitionFn::Bald => Some(bald(sample)),
            AcquisitionFn::VariationRatio => Some(variation_ratio(sample)),
            AcquisitionFn::Random => None,
        }
    }
}

impl fmt::Display for AcquisitionFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcquisitionFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxentropy" | "max-entropy" | "entropy" => Ok(AcquisitionFn::MaxEntropy),
            "bald" => Ok(AcquisitionFn::Bald),
            "varratio" | "variation-ratio" | "vr" => Ok(AcquisitionFn::VariationRatio),
            "random" => Ok(AcquisitionFn::Random),
            _ => Err(Error::UnknownFunction(s.to_string())),
        }
    }
}

/// How stochastic passes are evaluated. Both give bit-identical results;
/// `SharedTrunk` evaluates the deterministic layers before the first dropout
/// once per window instead of once per pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassStrategy {
    #[default]
    SharedTrunk,
    FullPasses,
}

/// Dropout stream of one (window, pass).
pub fn mc_stream(seed: u64, window_id: u64, pass: usize) -> RngStream {
    RngStream::root(seed, domain::MC).derive2(window_id, pass as u64)
}

const CHUNK: usize = 64;

/// MC-dropout predictions for many windows.
///
/// Pass `t` of window `w` draws its masks from `mc_stream(seed, w.id, t)`,
/// so results do not depend on how windows are ordered or chunked.
pub fn predict_mc_batch(
    model: &ModelBundle,
    windows: &[&FeatureWindow],
    passes: usize,
    seed: u64,
    strategy: PassStrategy,
) -> Result<Vec<PredictiveSample>> {
    if passes == 0 {
        return Err(Error::Config("need at least one stochastic pass".into()));
    }
    let net = &model.network;
    let split = match strategy {
        PassStrategy::SharedTrunk => net.stochastic_start(),
        PassStrategy::FullPasses => 0,
    };
    let classes = model.num_classes();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let input = model.input_tensor(chunk)?;
        let trunk: Tensor = net.forward_range(0, split, input, Mode::StochasticEval, &[])?;
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(passes); chunk.len()];
        for t in 0..passes {
            let streams: Vec<RngStream> = chunk.iter().map(|w| mc_stream(seed, w.id, t)).collect();
            let probs = net.forward_range(
                split,
                net.layers.len(),
                trunk.clone(),
                Mode::StochasticEval,
                &streams,
            )?;
            for (i, row) in probs.data().chunks_exact(classes).enumerate() {
                rows[i].push(row.to_vec());
            }
        }
        for r in rows {
            out.push(PredictiveSample::from_passes(r)?);
        }
    }
    Ok(out)
}

pub fn predict_mc(
    model: &ModelBundle,
    window: &FeatureWindow,
    passes: usize,
    seed: u64,
) -> Result<PredictiveSample> {
    Ok(predict_mc_batch(model, &[window], passes, seed, PassStrategy::SharedTrunk)?.remove(0))
}

/// `ceil(eta * n)`, robust to `eta * n` landing a hair above an integer.
pub fn acquisition_size(eta: f64, n: usize) -> usize {
    let x = eta * n as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize;
    k.min(n)
}

/// Pool indices by descending score; equal scores keep ascending index order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scored and ranked pool with the selected prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionBatch {
    pub function: AcquisitionFn,
    pub eta: f64,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub selected: Vec<usize>,
}

impl AcquisitionBatch {
    pub fn from_scores(function: AcquisitionFn, eta: f64, scores: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
        }
        let ranking = rank(&scores);
        let k = acquisition_size(eta, scores.len());
        let selected = ranking[..k].to_vec();
        Ok(Self {
            function,
            eta,
            scores,
            ranking,
            selected,
        })
    }
}

/// Scores every pool window and selects the top `ceil(eta * |pool|)`.
pub fn select(
    pool: &[&FeatureWindow],
    model: &ModelBundle,
    function: AcquisitionFn,
    eta: f64,
    passes: usize,
    seed: u64,
) -> Result<AcquisitionBatch> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    if pool.is_empty() && eta > 0.0 {
        return Err(Error::Config("cannot acquire from an empty pool".into()));
    }
    let scores = match function {
        AcquisitionFn::Random => {
            let root = RngStream::root(seed, domain::RANDOM_SCORE);
            pool.iter()
                .map(|w| random_score(root.derive(w.id)))
                .collect()
        }
        f => predict_mc_batch(model, pool, passes, seed, PassStrategy::SharedTrunk)?
            .iter()
            .map(|s| f.score(s).expect("non-random function has a score"))
            .collect(),
    };
    AcquisitionBatch::from_scores(function, eta, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sample(rows: Vec<Vec<f64>>) -> PredictiveSample {
        PredictiveSample::from_passes(rows).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert_eq!(max_entropy(&sample(vec![vec![0.0, 1.0, 0.0]])), 0.0);
        assert_abs_diff_eq!(
            max_entropy(&sample(vec![vec![1.0 / 6.0; 6]])),
            1.791759,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            max_entropy(&sample(vec![vec![0.7, 0.3]])),
            0.6108643020548935,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bald_values() {
        let same = sample(vec![vec![0.2, 0.5, 0.3]; 7]);
        assert_eq!(bald(&same), 0.0);
        let split = sample(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(bald(&split), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn variation_ratio_values() {
        assert_eq!(variation_ratio(&sample(vec![vec![0.0, 1.0]])), 0.0);
        assert_abs_diff_eq!(
            variation_ratio(&sample(vec![vec![0.25; 4]])),
            0.75,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            variation_ratio(&sample(vec![vec![0.5, 0.3, 0.2]])),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_pass_mean_is_the_row() {
        let s = sample(vec![vec![0.1, 0.2, 0.7]]);
        assert_eq!(s.mean, vec![0.1, 0.2, 0.7]);
    }

    #[test]
    fn random_scores_are_seeded() {
        let a = random_score(RngStream::new(1, 2));
        assert_eq!(a, random_score(RngStream::new(1, 2)));
        assert_ne!(a, random_score(RngStream::new(1, 3)));
        assert!((0.0..1.0).contains(&a));
        let root = RngStream::root(9, domain::RANDOM_SCORE);
        let mean = (0..100_000u64)
            .map(|i| random_score(root.derive(i)))
            .sum::<f64>()
            / 1e5;
        assert!((0.49..=0.51).contains(&mean), "{mean}");
    }

    #[test]
    fn acquisition_sizes() {
        assert_eq!(acquisition_size(0.5, 123), 62);
        assert_eq!(acquisition_size(0.0, 123), 0);
        assert_eq!(acquisition_size(1.0, 123), 123);
        assert_eq!(acquisition_size(0.2, 10), 2);
        assert_eq!(acquisition_size(0.7, 10), 7);
        assert_eq!(acquisition_size(0.4, 609), 244);
    }

    #[test]
    fn ranking_is_stable_on_ties() {
        assert_eq!(rank(&[0.5, 0.9, 0.5, 0.9, 0.1]), vec![1, 3, 0, 2, 4]);
    }

    #[test]
    fn unknown_function_rejected() {
        assert!(matches!(
            "entropyish".parse::<AcquisitionFn>(),
            Err(Error::UnknownFunction(_))
        ));
        for f in AcquisitionFn::ALL {
            assert_eq!(f.name().parse::<AcquisitionFn>().unwrap(), f);
        }
    }

    #[test]
    fn eta_bounds() {
        assert!(AcquisitionBatch::from_scores(AcquisitionFn::Random, 1.5, vec![0.0]).is_err());
        let b = AcquisitionBatch::from_scores(AcquisitionFn::Random, 0.0, vec![0.3, 0.1]).unwrap();
        assert!(b.selected.is_empty());
        assert_eq!(b.scores.len(), 2);
    }
}
