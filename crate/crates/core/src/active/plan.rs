use serde::{Deserialize, Serialize};

use crate::acquire::AcquisitionFn;
use crate::error::{Error, Result};

/// How labels are acquired within one η cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AcquisitionMode {
    /// Score once, acquire `ceil(eta * |pool|)`, fine-tune once.
    #[default]
    SingleShot,
    /// Reach the same total in `steps` rounds of score, acquire, fine-tune.
    Iterative { steps: usize },
}

/// Windows used for incremental fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTuneData {
    /// Only the newly acquired windows.
    #[default]
    AcquiredOnly,
    /// Acquired windows plus the baseline's training windows.
    WithSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Users to hold out in turn; empty means every labeled user.
    pub held_out_users: Vec<String>,
    pub pool_fraction: f64,
    pub eta_grid: Vec<f64>,
    pub functions: Vec<AcquisitionFn>,
    pub baseline_epochs: usize,
    pub incremental_epochs: usize,
    /// Stochastic passes per prediction.
    pub passes: usize,
    /// Seeds of the active-learning cells (split, scoring, fine-tuning).
    pub seeds: Vec<u64>,
    /// Seed of baseline training.
    pub baseline_seed: u64,
    pub batch_size: usize,
    /// Probability that the simulated oracle answers a wrong class.
    pub label_noise: f64,
    pub mode: AcquisitionMode,
    pub fine_tune: FineTuneData,
    /// Upper limit on pool size in windows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_cap: Option<usize>,
    /// Fit per-axis input standardization on the baseline's training windows.
    pub standardize: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            held_out_users: Vec::new(),
            pool_fraction: 0.7,
            eta_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            functions: vec![AcquisitionFn::VariationRatio],
            baseline_epochs: 50,
            incremental_epochs: 10,
            passes: 10,
            seeds: vec![0],
            baseline_seed: 0,
            batch_size: 32,
            label_noise: 0.0,
            mode: AcquisitionMode::SingleShot,
            fine_tune: FineTuneData::AcquiredOnly,
            pool_cap: None,
            standardize: false,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.pool_fraction > 0.0 && self.pool_fraction < 1.0) {
            return bad(format!(
                "pool_fraction {} outside (0, 1)",
                self.pool_fraction
            ));
        }
        if self.baseline_epochs == 0 || self.incremental_epochs == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if self.passes == 0 || self.batch_size == 0 {
            return bad("passes and batch_size must be at least 1".into());
        }
        if let Some(e) = self.eta_grid.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return bad(format!("eta {e} outside [0, 1]"));
        }
        if self.eta_grid.is_empty() || self.functions.is_empty() || self.seeds.is_empty() {
            return bad("eta_grid, functions and seeds must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 1]", self.label_noise));
        }
        if let AcquisitionMode::Iterative { steps: 0 } = self.mode {
            return bad("iterative mode needs at least one step".into());
        }
        if self.pool_cap == Some(0) {
            return bad("pool_cap must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let p = ExperimentPlan::default();
        assert_eq!(p.pool_fraction, 0.7);
        assert_eq!(
            (p.baseline_epochs, p.incremental_epochs, p.passes),
            (50, 10, 10)
        );
        assert_eq!(p.eta_grid.len(), 6);
        p.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_tables() {
        let p = ExperimentPlan {
            mode: AcquisitionMode::Iterative { steps: 3 },
            pool_cap: Some(50),
            functions: vec![AcquisitionFn::Bald, AcquisitionFn::Random],
            ..ExperimentPlan::default()
        };
        let text = toml::to_string(&p).unwrap();
        assert_eq!(toml::from_str::<ExperimentPlan>(&text).unwrap(), p);
        let partial: ExperimentPlan =
            toml::from_str("seeds = [1, 2]\nfunctions = [\"varratio\"]").unwrap();
        assert_eq!(partial.seeds, vec![1, 2]);
        assert_eq!(partial.baseline_epochs, 50);
    }

    #[test]
    fn invalid_plans_rejected() {
        for p in [
            ExperimentPlan {
                pool_fraction: 1.0,
                ..Default::default()
            },
            ExperimentPlan {
                incremental_epochs: 0,
                ..Default::default()
            },
            ExperimentPlan {
                eta_grid: vec![1.5],
                ..Default::default()
            },
            ExperimentPlan {
                mode: AcquisitionMode::Iterative { steps: 0 },
                ..Default::default()
            },
        ] {
            assert!(p.validate().is_err());
        }
    }
}
