//! Label requests and the label sources that answer them.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::AcquisitionFn;
use crate::rng::{domain, RngStream};
use crate::signal::{FeatureWindow, AXES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Labeled,
    Skipped,
}

/// One acquired window awaiting a label. Never carries the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: u64,
    pub window_id: u64,
    /// Position in the acquisition ranking (0 = most informative).
    pub rank: usize,
    pub score: f64,
    pub function: AcquisitionFn,
    pub classes: Vec<String>,
    /// Decimated samples per axis, for display.
    pub samples: [Vec<f64>; AXES],
    pub rate_hz: f64,
    pub state: TaskState,
}

impl LabelTask {
    pub fn new(
        task_id: u64,
        rank: usize,
        score: f64,
        function: AcquisitionFn,
        window: &FeatureWindow,
        classes: &[String],
    ) -> Self {
        let mut samples: [Vec<f64>; AXES] = Default::default();
        for (a, s) in samples.iter_mut().enumerate() {
            *s = window.display_axis(a).to_vec();
        }
        Self {
            task_id,
            window_id: window.id,
            rank,
            score,
            function,
            classes: classes.to_vec(),
            samples,
            rate_hz: window.rate_hz,
            state: TaskState::Pending,
        }
    }
}

/// Anything that can answer label requests. `None` means the window is skipped.
pub trait Oracle {
    fn answer(&mut self, task: &LabelTask) -> Option<usize>;
}

/// Answers from hidden ground truth, optionally flipping a fraction `noise`
/// of answers to a uniformly chosen wrong class.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    hidden: HashMap<u64, usize>,
    classes: usize,
    noise: f64,
    seed: u64,
}

impl SimulatedOracle {
    pub fn new(hidden: HashMap<u64, usize>, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            hidden,
            classes,
            noise: noise.clamp(0.0, 1.0),
            seed,
        }
    }

    /// Ground truth taken from the windows themselves.
    pub fn from_windows<'a>(
        windows: impl IntoIterator<Item = &'a FeatureWindow>,
        classes: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        let hidden = windows
            .into_iter()
            .filter_map(|w| w.label.map(|l| (w.id, l)))
            .collect();
        Self::new(hidden, classes, noise, seed)
    }

    pub fn label_for(&self, window_id: u64) -> Option<usize> {
        let truth = *self.hidden.get(&window_id)?;
        if self.noise == 0.0 || self.classes < 2 {
            return Some(truth);
        }
        let mut rng = RngStream::root(self.seed, domain::ORACLE)
            .derive(window_id)
            .rng();
        if rng.random::<f64>() < self.noise {
            let offset = rng.random_range(1..self.classes);
            Some((truth + offset) % self.classes)
        } else {
            Some(truth)
        }
    }
}

impl Oracle for SimulatedOracle {
    fn answer(&mut self, task: &LabelTask) -> Option<usize> {
        self.label_for(task.window_id)
    }
}
