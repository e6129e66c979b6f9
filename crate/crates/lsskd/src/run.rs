//! The training driver: data subset, epoch loop, evaluation, and the
//! per-epoch metrics, checkpoint and store files under `out.dir`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lsskd_core::data::{class_counts, stratified_subset};
use lsskd_core::distill::{PredictionStore, StoreLayout};
use lsskd_core::network::StudentNetwork;
use lsskd_core::train::{evaluate, train_epoch, EpochMetrics, Objective, Sgd};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::ConfigFile;
use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::{metrics, store_file};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STORE_FILE: &str = "store.lsps";
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub objective: Objective,
    /// A `last.ckpt` to continue from; its `store.lsps` sibling is read too.
    pub resume: Option<PathBuf>,
    /// Stop after this epoch even if the schedule runs longer.
    pub stop_after: Option<u32>,
    /// Record per-epoch wall time; off writes 0 so repeated runs are byte-identical.
    pub record_wall: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { objective: Objective::Lsskd, resume: None, stop_after: None, record_wall: true }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub last_checkpoint: PathBuf,
}

struct State {
    net: StudentNetwork<f32>,
    opt: Sgd<f32>,
    store: PredictionStore<f32>,
    metrics: Vec<EpochMetrics>,
}

fn fresh(cfg: &ConfigFile, data: &Dataset, layout: StoreLayout) -> CliResult<State> {
    let mut net = StudentNetwork::new(cfg.backbone(data.meta.classes, data.meta.image_shape))?;
    net.init_parameters(cfg.seed);
    let opt = Sgd::new(net.params());
    Ok(State { net, opt, store: PredictionStore::new(layout), metrics: Vec::new() })
}

fn resume(cfg: &ConfigFile, data: &Dataset, layout: StoreLayout, path: &Path, out: &Path, objective: Objective) -> CliResult<State> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.digest != cfg.digest() {
        return Err(CliError::Config { path: path.to_path_buf(), detail: "checkpoint was written under a different model configuration".into() });
    }
    let (net, opt) = ckpt
        .restore_training(cfg.backbone(data.meta.classes, data.meta.image_shape))
        .map_err(|e| CliError::format(path, e))?;
    let store_path = path.with_file_name(STORE_FILE);
    let store = store_file::read(&store_path, layout)?;
    if objective == Objective::Lsskd && store.current_epoch() != ckpt.epoch {
        return Err(CliError::format(
            &store_path,
            format!("store holds epoch {} but the checkpoint epoch {}", store.current_epoch(), ckpt.epoch),
        ));
    }
    let csv = out.join(METRICS_FILE);
    let text = std::fs::read_to_string(&csv).map_err(|e| CliError::io(&csv, e))?;
    let mut rows = metrics::parse(&text).map_err(|e| CliError::format(&csv, e))?;
    rows.retain(|m| m.epoch <= ckpt.epoch);
    if rows.len() != ckpt.epoch as usize {
        return Err(CliError::format(&csv, format!("{} rows up to epoch {}", rows.len(), ckpt.epoch)));
    }
    Ok(State { net, opt, store, metrics: rows })
}

/// Trains to `train.epochs` (or `stop_after`), evaluating the final head
/// after every epoch. `log` receives progress lines.
pub fn run_training(cfg: &ConfigFile, data: &Dataset, opts: &RunOptions, log: &mut dyn FnMut(&str)) -> CliResult<RunOutcome> {
    let tc = cfg.train_config(opts.objective);
    tc.validate().map_err(|e| CliError::Config { path: PathBuf::new(), detail: e.to_string() })?;
    let classes = data.meta.classes;
    let train = if tc.fewshot_fraction < 1.0 {
        let subset = stratified_subset(&data.train, classes, tc.fewshot_fraction, tc.seed).map_err(|e| CliError::Data(e.to_string()))?;
        let counts = class_counts(&subset, classes).iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        log(&format!("fewshot fraction={} retained={} per_class={counts}", tc.fewshot_fraction, subset.len()));
        subset
    } else {
        data.train.clone()
    };
    let layout = StoreLayout { classes, transforms: lsskd_core::ss_task::ROTATIONS, stages: cfg.model_stages };
    let out = cfg.out_dir.as_path();
    let mut st = match &opts.resume {
        Some(p) => resume(cfg, data, layout, p, out, opts.objective)?,
        None => fresh(cfg, data, layout)?,
    };
    let digest = cfg.digest();
    let mut best = st.metrics.iter().map(|m| m.test_top1).fold(f64::NEG_INFINITY, f64::max);
    let start = st.metrics.len() as u32 + 1;
    let end = opts.stop_after.map_or(tc.epochs, |s| s.min(tc.epochs));
    let last = out.join(LAST_CHECKPOINT);
    for epoch in start..=end {
        let t = Instant::now();
        let summary = train_epoch(&mut st.net, &mut st.opt, &mut st.store, &train, epoch, &tc)?;
        let acc = evaluate(&st.net, &data.test, EVAL_BATCH)?;
        let wall = if opts.record_wall { t.elapsed().as_secs_f64() } else { 0.0 };
        let m = EpochMetrics::new(&summary, epoch, acc, wall);
        st.metrics.push(m);
        write_atomic(&out.join(METRICS_FILE), metrics::render(&st.metrics).as_bytes())?;
        let ckpt = Checkpoint::from_training(digest, epoch, &st.net, &st.opt);
        ckpt.write(&last)?;
        if m.test_top1 > best {
            best = m.test_top1;
            ckpt.write(&out.join(BEST_CHECKPOINT))?;
        }
        store_file::write(&st.store, &out.join(STORE_FILE))?;
        log(&format!(
            "epoch {epoch}/{} lr={} loss={:.4} top1={:.2} top5={:.2} softened={} wall={:.1}s",
            tc.epochs, m.lr, m.train_total, m.test_top1, m.test_top5, summary.softened, wall
        ));
    }
    Ok(RunOutcome { metrics: st.metrics, last_checkpoint: last })
}
