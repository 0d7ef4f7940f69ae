//! The staged pipeline: gen -> cluster -> train -> cam -> refine -> eval.
//!
//! Expensive intermediate products (dataset, trained network, per-sample affinity fields)
//! are memoized in a [`Cache`] keyed on the configuration fields that determine them, so the
//! ablation grid and sweeps retrain only when a training-relevant setting changes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;
use wsseg_core::eval::{
    aggregate, dice, evaluate_pair, metrics_csv, BinaryMask, MetricRecord, MetricReport,
};
use wsseg_core::nn::{save_checkpoint, TinyNet};
use wsseg_core::numerics::{write_pgm, write_wcf};
use wsseg_core::oracle::{grid_prompts, PromptMask};
use wsseg_core::pam::{
    aggregate_affinity, pairwise_affinity, pseudo_label, random_walk, transition_matrix,
    AffinityField,
};
use wsseg_core::sce::{
    assignments_csv, attach_subclass_labels, cluster_subclasses, compute_cams, run_sce_probe,
    threshold_upsample, train_sce, Cam, EpochLog, FrozenExtractor, ProbeRow, SubClassAssignment,
};
use wsseg_core::synth::{export_dataset, generate_dataset, split_dataset, Sample};
use wsseg_core::{Field2D, LabelMap};

use crate::config::RunConfig;
use crate::{write_file, HarnessError, Stage};

type Slot<T> = Arc<Mutex<Option<Arc<T>>>>;

/// Compute-once map: concurrent callers with the same key wait for a single computation.
struct Memo<T> {
    slots: Mutex<HashMap<String, Slot<T>>>,
}

impl<T> Default for Memo<T> {
    fn default() -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
        }
    }
}

impl<T> Memo<T> {
    fn get_or_try<E>(&self, key: String, f: impl FnOnce() -> Result<T, E>) -> Result<Arc<T>, E> {
        let slot = self.slots.lock().unwrap().entry(key).or_default().clone();
        let mut guard = slot.lock().unwrap();
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(f()?);
        *guard = Some(v.clone());
        Ok(v)
    }
}

pub struct Data {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub struct Trained {
    pub net: TinyNet,
    pub log: Vec<EpochLog>,
    pub assignment: Option<SubClassAssignment>,
}

#[derive(Default)]
pub struct Cache {
    data: Memo<Data>,
    models: Memo<Trained>,
    affinity: Memo<Vec<AffinityField>>,
}

impl Cache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn key(parts: &impl Serialize) -> String {
    serde_json::to_string(parts).expect("cache key serializes")
}

fn data_key(cfg: &RunConfig) -> String {
    key(&(&cfg.synth, cfg.split, cfg.seeds().split))
}

fn load_data(cfg: &RunConfig, cache: &Cache) -> Result<Arc<Data>, HarnessError> {
    cache.data.get_or_try(data_key(cfg), || {
        let err = |e| HarnessError::stage(Stage::Gen, e);
        let d = generate_dataset(&cfg.synth).map_err(err)?;
        let [train, val, test] = split_dataset(
            &d,
            (cfg.split[0], cfg.split[1], cfg.split[2]),
            cfg.seeds().split,
        )
        .map_err(err)?;
        Ok(Data {
            train: train.samples,
            val: val.samples,
            test: test.samples,
        })
    })
}

/// Every sample of the configured dataset, ordered train, val, test.
pub(crate) fn load_all_samples(
    cfg: &RunConfig,
    cache: &Cache,
) -> Result<Vec<Sample>, HarnessError> {
    let d = load_data(cfg, cache)?;
    Ok([&d.train[..], &d.val, &d.test].concat())
}

fn model_key(cfg: &RunConfig) -> String {
    let s = cfg.seeds();
    let clustering = cfg
        .sce_on
        .then_some((cfg.sce.k, cfg.sce.feature_dim, s.cluster, s.features));
    key(&(
        data_key(cfg),
        cfg.net_config(),
        cfg.train_config(),
        clustering,
    ))
}

fn train_model(cfg: &RunConfig, data: &Data, cache: &Cache) -> Result<Arc<Trained>, HarnessError> {
    cache.models.get_or_try(model_key(cfg), || {
        let mut train = data.train.clone();
        let mut val = data.val.clone();
        let assignment = if cfg.sce_on {
            let err = |e| HarnessError::stage(Stage::Cluster, e);
            let extractor =
                FrozenExtractor::new(cfg.sce.feature_dim, cfg.seeds().features).map_err(err)?;
            let (a, model) = cluster_subclasses(
                &train,
                cfg.synth.n_classes,
                cfg.sce.k,
                &extractor,
                cfg.seeds().cluster,
            )
            .map_err(err)?;
            attach_subclass_labels(&mut train, &a, cfg.synth.n_classes).map_err(err)?;
            let val_assignment = model.assign(&val).map_err(err)?;
            attach_subclass_labels(&mut val, &val_assignment, cfg.synth.n_classes).map_err(err)?;
            Some(a)
        } else {
            None
        };
        let err = |e| HarnessError::stage(Stage::Train, e);
        let net = TinyNet::new(cfg.net_config()).map_err(err)?;
        let (net, log) = train_sce(net, &train, &val, &cfg.train_config()).map_err(err)?;
        Ok(Trained {
            net,
            log,
            assignment,
        })
    })
}

fn affinity_key(cfg: &RunConfig) -> String {
    let fs = cfg.net_config().feature_size();
    key(&(data_key(cfg), &cfg.oracle, cfg.refine.grid, fs))
}

fn affinity_fields(
    cfg: &RunConfig,
    samples: &[Sample],
    cache: &Cache,
) -> Result<Arc<Vec<AffinityField>>, HarnessError> {
    cache.affinity.get_or_try(affinity_key(cfg), || {
        let err = |e| HarnessError::stage(Stage::Refine, e);
        let oracle = cfg.oracle.build().map_err(err)?;
        let fs = cfg.net_config().feature_size();
        samples
            .par_iter()
            .map(|s| {
                let masks = grid_prompts(&s.id, cfg.synth.image_size, cfg.refine.grid)?
                    .iter()
                    .map(|p| oracle.mask(s, p))
                    .collect::<wsseg_core::Result<Vec<PromptMask>>>()?;
                aggregate_affinity(&masks, fs, fs)
            })
            .collect::<wsseg_core::Result<Vec<_>>>()
            .map_err(err)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineRow {
    pub sample_id: String,
    pub class: usize,
    pub pre_dice: f64,
    pub post_dice: f64,
}

pub const REFINE_HEADER: &str = "sample_id,class,pre_dice,post_dice";

pub fn refine_csv(rows: &[RefineRow]) -> String {
    let mut out = format!("{REFINE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.sample_id, r.class, r.pre_dice, r.post_dice
        )
        .unwrap();
    }
    out
}

fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_p,loss_s,val_cam_dice\n");
    for e in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            e.epoch, e.loss_p, e.loss_s, e.val_cam_dice
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub report: Option<MetricReport>,
    pub records: Vec<MetricRecord>,
    pub refine: Vec<RefineRow>,
    pub train_log: Vec<EpochLog>,
    pub checkpoint: Option<String>,
}

impl RunReport {
    pub fn dice(&self) -> f64 {
        self.report.as_ref().map_or(f64::NAN, |r| r.dsc)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    n: usize,
    dsc: f64,
    jaccard: f64,
    assd: f64,
    hd95: f64,
    skipped: usize,
    checkpoint: &'a str,
}

/// Runs every stage through `eval`.
pub fn run_pipeline(
    cfg: &RunConfig,
    out: Option<&Path>,
    cache: &Cache,
) -> Result<RunReport, HarnessError> {
    run_until(cfg, Stage::Eval, out, cache)
}

/// Runs the pipeline up to and including `last`. Artifacts of each finished stage are
/// written before the next stage starts; a failing stage leaves an `error.txt` naming it.
pub fn run_until(
    cfg: &RunConfig,
    last: Stage,
    out: Option<&Path>,
    cache: &Cache,
) -> Result<RunReport, HarnessError> {
    let result = run_stages(cfg, last, out, cache);
    if let (Err(e), Some(dir)) = (&result, out) {
        let _ = write_file(e.stage_name(), &dir.join("error.txt"), format!("{e}\n"));
    }
    result
}

fn run_stages(
    cfg: &RunConfig,
    last: Stage,
    out: Option<&Path>,
    cache: &Cache,
) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut report = RunReport {
        config: cfg.clone(),
        report: None,
        records: Vec::new(),
        refine: Vec::new(),
        train_log: Vec::new(),
        checkpoint: None,
    };
    if let Some(dir) = out {
        write_file(Stage::Config, &dir.join("config.json"), cfg.to_json())?;
    }
    let data = load_data(&cfg, cache)?;
    if last == Stage::Gen {
        if let Some(dir) = out {
            let all = wsseg_core::synth::Dataset {
                n_classes: cfg.synth.n_classes,
                image_size: cfg.synth.image_size,
                samples: [&data.train[..], &data.val, &data.test].concat(),
            };
            export_dataset(&all, &dir.join("data"))
                .map_err(|e| HarnessError::stage(Stage::Gen, e))?;
        }
        return Ok(report);
    }

    let trained = train_model(&cfg, &data, cache)?;
    if let (Some(dir), Some(a)) = (out, &trained.assignment) {
        write_file(
            Stage::Cluster,
            &dir.join("assignments.csv"),
            assignments_csv(a),
        )?;
    }
    if last == Stage::Cluster {
        return Ok(report);
    }
    report.train_log = trained.log.clone();
    report.checkpoint = Some(trained.net.fingerprint());
    if let Some(dir) = out {
        write_file(
            Stage::Train,
            &dir.join("train_log.csv"),
            train_log_csv(&trained.log),
        )?;
        save_checkpoint(&trained.net, &dir.join("checkpoint.wck"))
            .map_err(|e| HarnessError::stage(Stage::Train, e))?;
    }
    if last == Stage::Train {
        return Ok(report);
    }

    let samples = &data.train;
    let cams =
        compute_cams(&trained.net, samples).map_err(|e| HarnessError::stage(Stage::Cam, e))?;
    if let Some(dir) = out.filter(|_| cfg.dump_maps) {
        dump_cams(&dir.join("cams"), &cams, Stage::Cam)?;
    }
    if last == Stage::Cam {
        return Ok(report);
    }

    let refined = if cfg.pam_on {
        let fields = affinity_fields(&cfg, samples, cache)?;
        cams.par_iter()
            .zip(fields.par_iter())
            .map(|(cams, field)| {
                let t = transition_matrix(
                    &pairwise_affinity(field, cfg.refine.gamma)?,
                    cfg.refine.beta,
                )?;
                cams.iter()
                    .map(|c| random_walk(&t, c, cfg.refine.t))
                    .collect()
            })
            .collect::<wsseg_core::Result<Vec<Vec<Cam>>>>()
            .map_err(|e| HarnessError::stage(Stage::Refine, e))?
    } else {
        cams.clone()
    };
    report.refine = refine_rows(samples, &cams, &refined, cfg.refine.theta)
        .map_err(|e| HarnessError::stage(Stage::Refine, e))?;
    if let Some(dir) = out {
        write_file(
            Stage::Refine,
            &dir.join("refine.csv"),
            refine_csv(&report.refine),
        )?;
        if cfg.dump_maps {
            dump_cams(&dir.join("refined"), &refined, Stage::Refine)?;
        }
    }
    if last == Stage::Refine {
        return Ok(report);
    }

    let labels =
        pseudo_labels(&cfg, samples, &refined).map_err(|e| HarnessError::stage(Stage::Eval, e))?;
    report.records = samples
        .iter()
        .zip(&labels)
        .flat_map(|(s, l)| s.present_classes().map(move |c| (s, l, c)))
        .map(|(s, l, c)| {
            let gt = BinaryMask::from_labels(&s.gt_mask, c as u16 + 1);
            evaluate_pair(&s.id, c, &BinaryMask::from_labels(l, c as u16 + 1), &gt)
        })
        .collect::<wsseg_core::Result<Vec<_>>>()
        .map_err(|e| HarnessError::stage(Stage::Eval, e))?;
    let metrics = aggregate(&report.records).map_err(|e| HarnessError::stage(Stage::Eval, e))?;
    if let Some(dir) = out {
        write_file(
            Stage::Eval,
            &dir.join("metrics.csv"),
            metrics_csv(&report.records),
        )?;
        let summary = Summary {
            n: metrics.n,
            dsc: metrics.dsc,
            jaccard: metrics.jaccard,
            assd: metrics.assd,
            hd95: metrics.hd95,
            skipped: metrics.skipped,
            checkpoint: report.checkpoint.as_deref().unwrap_or(""),
        };
        write_file(
            Stage::Eval,
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).unwrap(),
        )?;
        if cfg.dump_maps {
            for (s, l) in samples.iter().zip(&labels) {
                let p = dir.join("pseudo").join(format!("{}.pgm", s.id));
                write_pgm(&p, l).map_err(|e| HarnessError::stage(Stage::Eval, e))?;
            }
        }
    }
    report.report = Some(metrics);
    Ok(report)
}

fn refine_rows(
    samples: &[Sample],
    pre: &[Vec<Cam>],
    post: &[Vec<Cam>],
    theta: f64,
) -> wsseg_core::Result<Vec<RefineRow>> {
    let mut rows = Vec::new();
    for ((s, a), b) in samples.iter().zip(pre).zip(post) {
        let (h, w) = s.gt_mask.shape();
        for (ca, cb) in a.iter().zip(b) {
            let gt = BinaryMask::from_labels(&s.gt_mask, ca.class as u16 + 1);
            rows.push(RefineRow {
                sample_id: s.id.clone(),
                class: ca.class,
                pre_dice: dice(&threshold_upsample(&ca.map, theta, h, w)?, &gt)?,
                post_dice: dice(&threshold_upsample(&cb.map, theta, h, w)?, &gt)?,
            });
        }
    }
    Ok(rows)
}

/// Image-resolution pseudo-label maps; absent classes contribute an all-zero CAM.
fn pseudo_labels(
    cfg: &RunConfig,
    samples: &[Sample],
    cams: &[Vec<Cam>],
) -> wsseg_core::Result<Vec<LabelMap>> {
    let fs = cfg.net_config().feature_size();
    let zero = Field2D::zeros(fs, fs);
    samples
        .iter()
        .zip(cams)
        .map(|(s, cams)| {
            let per_class: Vec<&Field2D> = (0..cfg.synth.n_classes)
                .map(|c| cams.iter().find(|m| m.class == c).map_or(&zero, |m| &m.map))
                .collect();
            let (h, w) = s.gt_mask.shape();
            pseudo_label(&per_class, cfg.refine.theta, (fs, fs))?.upsample_nearest(h, w)
        })
        .collect()
}

fn dump_cams(dir: &Path, cams: &[Vec<Cam>], stage: Stage) -> Result<(), HarnessError> {
    for c in cams.iter().flatten() {
        let p = dir.join(format!("{}_c{}.wcf", c.sample_id, c.class));
        write_wcf(&p, &c.map).map_err(|e| HarnessError::stage(stage, e))?;
    }
    Ok(())
}

/// Frozen-sub-head probe on the run's data and clustering; writes `probe.csv`.
pub fn run_probe(
    cfg: &RunConfig,
    eval_every: usize,
    out: Option<&Path>,
    cache: &Cache,
) -> Result<Vec<ProbeRow>, HarnessError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = load_data(&cfg, cache)?;
    let err = |e| HarnessError::stage(Stage::Probe, e);
    let extractor = FrozenExtractor::new(cfg.sce.feature_dim, cfg.seeds().features).map_err(err)?;
    let mut train = data.train.clone();
    let (a, model) = cluster_subclasses(
        &train,
        cfg.synth.n_classes,
        cfg.sce.k,
        &extractor,
        cfg.seeds().cluster,
    )
    .map_err(|e| HarnessError::stage(Stage::Cluster, e))?;
    attach_subclass_labels(&mut train, &a, cfg.synth.n_classes).map_err(err)?;
    let mut val = data.val.clone();
    let va = model.assign(&val).map_err(err)?;
    attach_subclass_labels(&mut val, &va, cfg.synth.n_classes).map_err(err)?;
    let net = TinyNet::new(cfg.net_config()).map_err(err)?;
    let (_, rows) = run_sce_probe(net, &train, &val, &cfg.sce.train, eval_every).map_err(err)?;
    if let Some(dir) = out {
        write_file(Stage::Config, &dir.join("config.json"), cfg.to_json())?;
        write_file(
            Stage::Probe,
            &dir.join("probe.csv"),
            wsseg_core::sce::probe_csv(&rows),
        )?;
    }
    Ok(rows)
}
