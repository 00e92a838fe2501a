use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Instant;

use activehar::acquire::AcquisitionFn;
use activehar::active::results::{
    summarize, write_baselines_csv, write_cells_csv, write_summary_json,
};
use activehar::active::{
    bench_timing, evaluate, held_out_users, run_incremental, source_windows, sweep, train_baseline,
    user_split, BaselineRecord, CellRecord, FineTuneData,
};
use activehar::data::{ingest, preprocess_and_store, DatasetManifest, PrepParams, WindowStore};
use activehar::oracle::SimulatedOracle;
use activehar::signal::FeatureWindow;
use activehar::{ModelBundle, RunConfig};
use activehar_service::AppState;
use log::{info, warn};

use crate::{Cli, Command, Failure, OracleKind};

type Outcome<T = ()> = Result<T, Failure>;

pub const RESULTS_FILE: &str = "results.csv";
pub const BASELINES_FILE: &str = "baselines.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.bin";
pub const TIMING_FILE: &str = "timing.json";

/// File name of a held-out user's baseline.
pub fn baseline_file(user: &str) -> String {
    format!("model_{user}.bin")
}

pub fn run(cli: Cli) -> Outcome {
    let mut config = match &cli.plan {
        Some(p) => {
            RunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let config = config.resolve()?;
    match cli.command {
        Command::Prep { manifest, out } => prep(config, manifest, out),
        Command::Baseline { store, out } => baseline(config, store, out),
        Command::Active {
            store,
            model,
            user,
            eta,
            function,
            oracle,
            port,
            out,
        } => active(
            config, store, model, &user, eta, function, oracle, port, out,
        ),
        Command::Sweep { store, models, out } => sweep_cmd(config, store, models, out),
        Command::Bench {
            store,
            model,
            windows,
            repeats,
            out,
        } => bench(config, store, model, windows, repeats, out),
        Command::Serve {
            store,
            model,
            port,
            host,
            static_dir,
        } => serve(
            config,
            store,
            model,
            SocketAddr::new(host, port),
            static_dir,
        ),
    }
}

/// The flag if given, else the config value.
fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Outcome<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Failure::Usage(format!("missing --{name} (or `{name}` in the config)")))
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig, default: &str) -> PathBuf {
    flag.or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Outcome<T> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", what.display())))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    Ok(BufWriter::new(io(File::create(path), path)?))
}

fn load_store(path: &Path) -> Outcome<WindowStore> {
    let store = WindowStore::load(path)
        .map_err(|e| Failure::Data(format!("store {}: {e}", path.display())))?;
    info!(
        "store {}: {} users, {} windows",
        path.display(),
        store.users.len(),
        store.windows().count()
    );
    Ok(store)
}

fn load_model(path: &Path) -> Outcome<ModelBundle> {
    ModelBundle::load(path).map_err(|e| Failure::Data(format!("model {}: {e}", path.display())))
}

fn finish(config: &RunConfig, out: &Path) -> Outcome {
    let path = config.write_resolved(out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn first_seed(config: &RunConfig) -> u64 {
    config.plan.seeds[0]
}

fn prep(mut config: RunConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let manifest_path = pick(manifest, &config.manifest, "manifest")?;
    let out = pick(out, &config.store, "out")?;
    let mut m = DatasetManifest::load(&manifest_path)
        .map_err(|e| Failure::Data(format!("{}: {e}", manifest_path.display())))?;
    if let (Some(seed), Some(s)) = (config.seed, m.synthetic.as_mut()) {
        s.seed = seed;
    }
    let t0 = Instant::now();
    let raw = ingest(&m)?;
    let params = PrepParams::new(m.window_seconds, m.target_hz);
    let store = preprocess_and_store(&raw, &params, &m.to_toml()?)?;
    store.save(&out)?;
    let p = &store.provenance;
    info!(
        "{} windows ({} labeled, {} dropped) from {} users in {:.1}s",
        store.windows().count(),
        p.labeled_windows,
        p.dropped_windows,
        store.users.len(),
        t0.elapsed().as_secs_f64()
    );
    config.manifest = Some(manifest_path);
    config.store = Some(out.clone());
    finish(&config, &out)
}

fn baseline(mut config: RunConfig, store_path: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let store_path = pick(store_path, &config.store, "store")?;
    let out = out_dir(out, &config, "runs/baseline");
    let store = load_store(&store_path)?;
    io(std::fs::create_dir_all(&out), &out)?;
    let plan = &config.plan;
    let mut records = Vec::new();
    for user in held_out_users(&store, plan) {
        let t0 = Instant::now();
        let train_windows = source_windows(&store, &user).len();
        let trained = train_baseline(&store, &user, &config.model, plan).and_then(|model| {
            let (_, test) = user_split(&store, &user, plan, first_seed(&config))?;
            let evaluation = evaluate(&model, &test, plan.passes, first_seed(&config))?;
            Ok((model, evaluation))
        });
        let train_seconds = t0.elapsed().as_secs_f64();
        let (evaluation, error) = match trained {
            Ok((model, evaluation)) => {
                model.save(out.join(baseline_file(&user)))?;
                info!(
                    "baseline {user}: accuracy {:.4} macro-f1 {:.4}",
                    evaluation.accuracy, evaluation.macro_f1
                );
                (Some(evaluation), None)
            }
            Err(e) => {
                warn!("baseline {user} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        records.push(BaselineRecord {
            user,
            train_windows,
            evaluation,
            error,
            train_seconds,
        });
    }
    write_baselines_csv(&records, create(&out.join(BASELINES_FILE))?)?;
    if records.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime("every baseline failed".into()));
    }
    config.store = Some(store_path);
    finish(&config, &out)
}

#[allow(clippy::too_many_arguments)]
fn active(
    mut config: RunConfig,
    store_path: Option<PathBuf>,
    model_path: Option<PathBuf>,
    user: &str,
    eta: f64,
    function: AcquisitionFn,
    oracle: OracleKind,
    port: u16,
    out: Option<PathBuf>,
) -> Outcome {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Failure::Usage(format!("--eta {eta} outside [0, 1]")));
    }
    let store_path = pick(store_path, &config.store, "store")?;
    let model_path = pick(model_path, &config.model_path, "model")?;
    let out = out_dir(out, &config, "runs/active");
    let store = load_store(&store_path)?;
    let baseline = load_model(&model_path)?;
    if !store.users.contains_key(user) {
        return Err(Failure::Data(format!("user {user:?} is not in the store")));
    }
    let seed = first_seed(&config);
    let plan = &config.plan;
    let (model, record) = match oracle {
        OracleKind::Simulated => {
            let (pool, test) = user_split(&store, user, plan, seed)?;
            let replay = match plan.fine_tune {
                FineTuneData::WithSource => source_windows(&store, user),
                FineTuneData::AcquiredOnly => Vec::new(),
            };
            let classes = store.classes().to_vec();
            let mut o = SimulatedOracle::from_windows(
                pool.iter().copied(),
                classes.len(),
                plan.label_noise,
                seed,
            );
            run_incremental(
                &baseline, user, &pool, &test, &replay, eta, function, &classes, &mut o, plan, seed,
            )?
        }
        OracleKind::Http => http_session(store, baseline, &config, user, eta, function, port)?,
    };
    io(std::fs::create_dir_all(&out), &out)?;
    model.save(out.join(MODEL_FILE))?;
    write_cells_csv(
        std::slice::from_ref(&record),
        create(&out.join(RESULTS_FILE))?,
    )?;
    let report = serde_json::json!({
        "user": user,
        "eta": eta,
        "function": function,
        "seed": seed,
        "pool_size": record.pool_size,
        "acquired": record.acquired.len(),
        "skipped": record.skipped,
        "pre": record.pre,
        "post": record.post,
        "trajectory": record.trajectory,
    });
    println!("{report}");
    config.store = Some(store_path);
    config.model_path = Some(model_path);
    finish(&config, &out)
}

fn runtime() -> Outcome<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(format!("async runtime: {e}")))
}

/// Serves one session on `port` and waits until its labels are in and the
/// model is updated.
fn http_session(
    store: WindowStore,
    model: ModelBundle,
    config: &RunConfig,
    user: &str,
    eta: f64,
    function: AcquisitionFn,
    port: u16,
) -> Outcome<(ModelBundle, CellRecord)> {
    let seed = first_seed(config);
    let state = AppState::new(store, model, config.plan.clone(), seed);
    let addr = SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port);
    runtime()?.block_on(async {
        let st = state.clone();
        let user = user.to_string();
        let id = tokio::task::spawn_blocking(move || {
            st.create_session(&user, function, eta, Some(seed))
        })
        .await
        .map_err(|e| Failure::Runtime(e.to_string()))?
        .map_err(|e| match e.status.as_u16() {
            404 => Failure::Data(e.message),
            400 => Failure::Usage(e.message),
            _ => Failure::Runtime(e.message),
        })?;
        let k = state
            .with_session(id, |s| s.k())
            .map_err(|e| Failure::Runtime(e.message))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Runtime(format!("bind {addr}: {e}")))?;
        info!("session {id}: {k} tasks waiting at http://{addr}/session/{id}/next");
        let server = tokio::spawn(activehar_service::serve_on(listener, state.clone()));
        let session = state
            .wait_for_update(id)
            .await
            .map_err(|e| Failure::Runtime(e.message));
        server.abort();
        let session = session?;
        Ok((session.model.clone(), CellRecord::from_session(&session)))
    })
}

fn sweep_cmd(
    mut config: RunConfig,
    store_path: Option<PathBuf>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Outcome {
    let store_path = pick(store_path, &config.store, "store")?;
    let out = out_dir(out, &config, "runs/sweep");
    let store = load_store(&store_path)?;
    let mut baselines = HashMap::new();
    if let Some(dir) = &models {
        for user in held_out_users(&store, &config.plan) {
            let path = dir.join(baseline_file(&user));
            if path.exists() {
                baselines.insert(user, load_model(&path)?);
            }
        }
        info!(
            "{} baselines loaded from {}",
            baselines.len(),
            dir.display()
        );
    }
    let t0 = Instant::now();
    let result = sweep(&store, &config.model, &config.plan, &baselines)?;
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    info!(
        "{} cells ({failed} failed) in {:.1}s",
        result.cells.len(),
        t0.elapsed().as_secs_f64()
    );
    io(std::fs::create_dir_all(&out), &out)?;
    write_cells_csv(&result.cells, create(&out.join(RESULTS_FILE))?)?;
    write_baselines_csv(&result.baselines, create(&out.join(BASELINES_FILE))?)?;
    write_summary_json(&summarize(&result), create(&out.join(SUMMARY_FILE))?)?;
    config.store = Some(store_path);
    finish(&config, &out)
}

fn bench(
    mut config: RunConfig,
    store_path: Option<PathBuf>,
    model_path: Option<PathBuf>,
    windows: usize,
    repeats: usize,
    out: Option<PathBuf>,
) -> Outcome {
    if windows == 0 || repeats == 0 {
        return Err(Failure::Usage(
            "--windows and --repeats must be at least 1".into(),
        ));
    }
    let store_path = pick(store_path, &config.store, "store")?;
    let model_path = pick(model_path, &config.model_path, "model")?;
    let out = out_dir(out, &config, "runs/bench");
    let store = load_store(&store_path)?;
    let model = load_model(&model_path)?;
    let sample: Vec<&FeatureWindow> = store.windows().take(windows).collect();
    if sample.is_empty() {
        return Err(Failure::Data("store has no windows".into()));
    }
    let report = bench_timing(
        &model,
        &sample,
        config.plan.passes,
        repeats,
        first_seed(&config),
    )?;
    for (name, secs) in report.rows() {
        info!("{name:<32} {:>12.3} ms", secs * 1e3);
    }
    io(std::fs::create_dir_all(&out), &out)?;
    let path = out.join(TIMING_FILE);
    io(
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&report).expect("timing report serializes"),
        ),
        &path,
    )?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("timing report serializes")
    );
    config.store = Some(store_path);
    config.model_path = Some(model_path);
    finish(&config, &out)
}

fn serve(
    mut config: RunConfig,
    store_path: Option<PathBuf>,
    model_path: Option<PathBuf>,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
) -> Outcome {
    let store_path = pick(store_path, &config.store, "store")?;
    let model_path = pick(model_path, &config.model_path, "model")?;
    let store = load_store(&store_path)?;
    let model = load_model(&model_path)?;
    if model.num_classes() != store.classes().len() {
        return Err(Failure::Data(format!(
            "model has {} classes, store has {}",
            model.num_classes(),
            store.classes().len()
        )));
    }
    let mut state = AppState::new(store, model, config.plan.clone(), first_seed(&config));
    if let Some(dir) = static_dir {
        if !dir.is_dir() {
            return Err(Failure::Data(format!(
                "static dir {} not found",
                dir.display()
            )));
        }
        state = state.with_static_dir(dir);
    }
    config.store = Some(store_path);
    config.model_path = Some(model_path);
    let out = out_dir(None, &config, "runs/serve");
    finish(&config, &out)?;
    runtime()?
        .block_on(activehar_service::serve(state, addr))
        .map_err(|e| Failure::Runtime(format!("serve on {addr}: {e}")))
}
