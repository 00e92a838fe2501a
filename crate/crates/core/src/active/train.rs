use log::{debug, warn};
use rand::seq::SliceRandom;

use super::plan::ExperimentPlan;
use crate::acquire::{predict_mc_batch, PassStrategy};
use crate::data::WindowStore;
use crate::error::{Error, Result};
use crate::metrics::Evaluation;
use crate::model::{HarnetConfig, ModelBundle};
use crate::rng::{domain, RngStream};
use crate::signal::{FeatureWindow, Standardizer};

/// Seeded shuffle of `windows` into a pool of `ceil(fraction * n)` windows
/// (at most `n - 1`, so the test set is never empty) and a test set.
pub fn split_pool_test<'a>(
    windows: &[&'a FeatureWindow],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a FeatureWindow>, Vec<&'a FeatureWindow>)> {
    let n = windows.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 windows to split, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "pool fraction {fraction} outside (0, 1)"
        )));
    }
    let mut order: Vec<&FeatureWindow> = windows.to_vec();
    order.sort_by_key(|w| w.id);
    order.shuffle(&mut RngStream::root(seed, domain::SPLIT).rng());
    let x = fraction * n as f64;
    let pool_len = ((x - 1e-9 * x).ceil() as usize).clamp(1, n - 1);
    let test = order.split_off(pool_len);
    Ok((order, test))
}

/// Trains for `epochs` over labeled `(window, class)` pairs with seeded
/// shuffling and dropout. Returns the mean loss of each epoch.
pub fn train_epochs(
    model: &mut ModelBundle,
    data: &[(&FeatureWindow, usize)],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let classes = model.num_classes();
    if let Some((_, c)) = data.iter().find(|(_, c)| *c >= classes) {
        return Err(Error::TargetOutOfRange {
            target: *c,
            classes,
        });
    }
    let batch_size = batch_size.max(1);
    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(
            &mut RngStream::root(seed, domain::SHUFFLE)
                .derive(epoch as u64)
                .rng(),
        );
        let dropout = RngStream::root(seed, domain::DROPOUT).derive(epoch as u64);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let windows: Vec<&FeatureWindow> = batch.iter().map(|&i| data[i].0).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let streams: Vec<RngStream> = windows.iter().map(|w| dropout.derive(w.id)).collect();
            let input = model.input_tensor(&windows)?;
            model.optimizer_mut();
            let ModelBundle {
                network, optimizer, ..
            } = model;
            let loss = network.train_step(
                optimizer.as_mut().expect("created above"),
                &input,
                &targets,
                &streams,
            )?;
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Class predictions: argmax of the MC-dropout mean over `passes` passes.
pub fn predict_classes(
    model: &ModelBundle,
    windows: &[&FeatureWindow],
    passes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(
        predict_mc_batch(model, windows, passes, seed, PassStrategy::SharedTrunk)?
            .iter()
            .map(|s| s.argmax())
            .collect(),
    )
}

/// Accuracy and f1 of the MC-mean prediction on labeled windows.
pub fn evaluate(
    model: &ModelBundle,
    windows: &[&FeatureWindow],
    passes: usize,
    seed: u64,
) -> Result<Evaluation> {
    let truth: Vec<usize> = windows
        .iter()
        .map(|w| {
            w.label
                .ok_or_else(|| Error::Data(format!("window {} has no label", w.id)))
        })
        .collect::<Result<_>>()?;
    let predicted = predict_classes(model, windows, passes, seed)?;
    Ok(Evaluation::from_predictions(
        model.num_classes(),
        &truth,
        &predicted,
    ))
}

/// Labeled windows of every user except `held_out`.
pub fn source_windows<'a>(store: &'a WindowStore, held_out: &str) -> Vec<&'a FeatureWindow> {
    store
        .users
        .iter()
        .filter(|(u, _)| u.as_str() != held_out)
        .flat_map(|(_, ws)| ws.iter().filter(|w| w.label.is_some()))
        .collect()
}

/// Model config sized for a store.
pub fn config_for(store: &WindowStore, base: &HarnetConfig) -> HarnetConfig {
    HarnetConfig {
        num_classes: store.classes().len(),
        input_length: store.feature_length(),
        ..base.clone()
    }
}

/// Trains a fresh model on every user but `held_out`.
pub fn train_baseline(
    store: &WindowStore,
    held_out: &str,
    base: &HarnetConfig,
    plan: &ExperimentPlan,
) -> Result<ModelBundle> {
    let source = source_windows(store, held_out);
    if source.is_empty() {
        return Err(Error::Data(format!(
            "no labeled training windows outside user {held_out:?}"
        )));
    }
    let mut config = config_for(store, base);
    if plan.standardize {
        config.input_standardizer = Some(Standardizer::fit(source.iter().copied()));
    }
    let mut model = ModelBundle::build(config, plan.baseline_seed)?;
    let data: Vec<(&FeatureWindow, usize)> = source
        .iter()
        .map(|w| (*w, w.label.expect("filtered")))
        .collect();
    train_epochs(
        &mut model,
        &data,
        plan.baseline_epochs,
        plan.batch_size,
        plan.baseline_seed,
    )?;
    Ok(model)
}

/// Baseline of one held-out user with its evaluation on that user's test split.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub user: String,
    pub model: ModelBundle,
    pub evaluation: Evaluation,
}

/// Leave-one-user-out baselines. Users without labeled windows are skipped.
pub fn train_baseline_loocv(
    store: &WindowStore,
    base: &HarnetConfig,
    plan: &ExperimentPlan,
) -> Result<Vec<Baseline>> {
    plan.validate()?;
    let users = held_out_users(store, plan);
    if store.labeled_users().len() < 2 {
        return Err(Error::Data(
            "leave-one-user-out needs at least 2 labeled users".into(),
        ));
    }
    let mut out = Vec::new();
    for user in users {
        let labeled = store.labeled(&user);
        if labeled.len() < 2 {
            warn!("skipping user {user}: {} labeled windows", labeled.len());
            continue;
        }
        let model = train_baseline(store, &user, base, plan)?;
        let (_, test) = split_pool_test(&labeled, plan.pool_fraction, plan.baseline_seed)?;
        let evaluation = evaluate(&model, &test, plan.passes, plan.baseline_seed)?;
        out.push(Baseline {
            user,
            model,
            evaluation,
        });
    }
    Ok(out)
}

/// Users named by the plan, or every labeled user.
pub fn held_out_users(store: &WindowStore, plan: &ExperimentPlan) -> Vec<String> {
    if plan.held_out_users.is_empty() {
        store
            .labeled_users()
            .into_iter()
            .map(String::from)
            .collect()
    } else {
        plan.held_out_users.clone()
    }
}
