use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use mtu_core::datapipe::{
    classic_augment, crrp, read_image_png, read_mask_png, read_scene, scene_seed, synth_scenes, tile, tile_scene,
    write_mask_png, write_probability_png, write_probability_raw, AugmentConfig, CrrpLog, PasteFailure, Prediction,
    Scene,
};
use mtu_core::inference::predict_image;
use mtu_core::io::{write_atomic, write_json};
use mtu_core::metrics::{evaluate_masks, roc_sweep_many, tau_grid, DetectionCounts, DetectionReport};
use mtu_core::postprocess::{adaptive_threshold, cluster8, threshold, RegionRecord};
use mtu_core::train::{train, StepLog};
use mtu_core::{BinaryMask, Error, MtuNet, ProbabilityMap};
use rayon::prelude::*;
use serde::Serialize;

use crate::settings::{self, Binarize};
use crate::{dataset, Cli, Command, Global};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let jobs = g.jobs();
    if jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()).into());
    }
    // Only the first build succeeds; later calls in the same process keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Augment(a) => augment(g, a),
        Command::Tile(a) => tile_cmd(g, a),
        Command::Train(a) => train_cmd(g, a, jobs),
        Command::Predict(a) => predict(g, a),
        Command::Cluster(a) => cluster(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Roc(a) => roc(g, a),
    }
}

fn config(g: &Global) -> Option<&Path> {
    g.config.as_deref()
}

fn read_scenes(dir: &Path) -> Result<Vec<Scene>> {
    dataset::entries(dir)?
        .par_iter()
        .map(|e| read_scene(e).with_context(|| format!("reading scene {}", e.id)))
        .collect()
}

fn synth(g: &Global, a: &crate::SynthArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::SynthSettings = settings::load(config(g))?;
    s.count = a.count.unwrap_or(s.count);
    s.size = a.size.unwrap_or(s.size);
    s.seed = g.seed.unwrap_or(s.seed);
    let scenes = synth_scenes(s.count, s.size, &s.targets, &s.noise, s.seed)?;
    dataset::write(out, &scenes)?;
    settings::echo(out, "synth", &s)?;
    info!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn augment(g: &Global, a: &crate::AugmentArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::AugmentSettings = settings::load(config(g))?;
    s.crrp.paste_count = a.paste_count.unwrap_or(s.crrp.paste_count);
    if a.classic && s.classic.is_none() {
        s.classic = Some(AugmentConfig::default());
    }
    s.seed = g.seed.unwrap_or(s.seed);
    s.crrp.validate()?;

    let scenes = read_scenes(&a.data)?;
    let results: Vec<(Scene, CrrpLog)> = scenes
        .par_iter()
        .map(|scene| {
            let regions = cluster8(scene.mask());
            let (mut scene, log) = if regions.is_empty() {
                let failures = (0..s.crrp.paste_count)
                    .map(|paste_index| PasteFailure {
                        paste_index,
                        reason: "scene has no target to copy".into(),
                    })
                    .collect();
                let log = CrrpLog {
                    scene_id: scene.id.clone(),
                    pastes: Vec::new(),
                    failures,
                };
                (scene.clone(), log)
            } else {
                crrp(scene, &regions, &s.crrp, scene_seed(s.seed, &scene.id))?
            };
            if let Some(cfg) = &s.classic {
                scene = classic_augment(&scene, cfg, scene_seed(s.seed, &format!("{}#classic", scene.id)))?.0;
            }
            Ok((scene, log))
        })
        .collect::<mtu_core::Result<_>>()?;
    let (scenes, logs): (Vec<Scene>, Vec<CrrpLog>) = results.into_iter().unzip();
    dataset::write(out, &scenes)?;
    write_json(out.join("paste_log.json"), &logs)?;
    settings::echo(out, "augment", &s)?;
    let pasted: usize = logs.iter().map(|l| l.pastes.len()).sum();
    info!("{pasted} pastes over {} scenes", scenes.len());
    Ok(())
}

fn tile_cmd(g: &Global, a: &crate::TileArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::TileSettings = settings::load(config(g))?;
    s.tile_size = a.tile_size.unwrap_or(s.tile_size);
    let scenes = read_scenes(&a.data)?;
    let mut tiles = Vec::new();
    let mut layouts = BTreeMap::new();
    for scene in &scenes {
        layouts.insert(scene.id.clone(), tile(scene.mask(), s.tile_size)?.layout());
        tiles.extend(tile_scene(scene, s.tile_size)?.into_iter().map(|(t, _)| t));
    }
    dataset::write(out, &tiles)?;
    write_json(out.join("layouts.json"), &layouts)?;
    settings::echo(out, "tile", &s)?;
    Ok(())
}

fn train_cmd(g: &Global, a: &crate::TrainArgs, jobs: usize) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::TrainSettings = settings::load(config(g))?;
    let t = &mut s.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.max_steps = a.steps.or(t.max_steps);
    t.loss = a.loss.unwrap_or(t.loss);
    t.loss_config.gamma = a.gamma.unwrap_or(t.loss_config.gamma);
    t.loss_config.smooth = a.smooth.unwrap_or(t.loss_config.smooth);
    t.loss_config.differentiate_iou |= a.differentiate_iou;
    if a.no_augment {
        t.augment = None;
    }
    // A settings file may pin the worker count; --jobs still wins.
    if g.jobs.is_some() || g.config.is_none() {
        t.jobs = jobs;
    }
    if let Some(seed) = g.seed {
        t.seed = seed;
        s.model.seed = seed;
    }
    if a.no_mvtm {
        s.variant.mvtm = false;
    }
    s.model.validate()?;
    s.train.validate()?;

    let entries = dataset::entries(&a.data)?;
    let scenes: Vec<Scene> = entries
        .iter()
        .filter(|e| e.split == mtu_core::datapipe::Split::Train)
        .map(|e| read_scene(e).with_context(|| format!("reading scene {}", e.id)))
        .collect::<Result<_>>()?;
    let mut net: MtuNet<f32> = MtuNet::new(s.model.clone(), s.variant)?;
    let logs = train(&mut net, &scenes, &s.train, |l| {
        if l.step % 10 == 0 || l.step == 1 {
            info!("step {} lr {:.4} loss {:.5} iou {:.4}", l.step, l.lr, l.loss, l.train_iou);
        }
    })?;

    let mut csv = String::from(StepLog::CSV_HEADER);
    csv.push('\n');
    for l in &logs {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    write_atomic(out.join("train_log.csv"), csv.as_bytes())?;
    net.save(out.join("model.mtuw"))?;
    settings::echo(out, "train", &s)?;
    Ok(())
}

fn predict(g: &Global, a: &crate::PredictArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::PredictSettings = settings::load(config(g))?;
    s.raw |= a.raw;
    let net = MtuNet::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    dataset::entries(&a.data)?.par_iter().try_for_each(|e| -> Result<()> {
        let image = read_image_png(&e.image_path).with_context(|| format!("reading image {}", e.id))?;
        let map = predict_image(&net, &image)?;
        if s.raw {
            write_probability_raw(out.join(format!("{}.f32", e.id)), &map)?;
        } else {
            write_probability_png(out.join(format!("{}.png", e.id)), &map)?;
        }
        Ok(())
    })?;
    settings::echo(out, "predict", &s)?;
    Ok(())
}

fn binarize(given_tau: Option<f64>, adaptive: bool, current: Binarize) -> Result<Binarize> {
    let chosen = match (given_tau, adaptive) {
        (Some(t), _) => Binarize::Fixed(t),
        (None, true) => Binarize::Adaptive,
        (None, false) => current,
    };
    chosen.validate()
}

/// The mask a prediction stands for, and the threshold that produced it.
fn to_mask(pred: Prediction, rule: Binarize) -> (BinaryMask, Option<f64>) {
    match pred {
        Prediction::Mask(m) => (m, None),
        Prediction::Map(map) => {
            let tau = match rule {
                Binarize::Fixed(t) => t,
                Binarize::Adaptive => adaptive_threshold(&map),
            };
            (threshold(&map, tau), Some(tau))
        }
    }
}

#[derive(Serialize)]
struct RegionFile<'a> {
    id: &'a str,
    tau: Option<f64>,
    regions: Vec<RegionRecord>,
}

fn cluster(g: &Global, a: &crate::ClusterArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::ClusterSettings = settings::load(config(g))?;
    s.threshold = binarize(a.tau, a.adaptive_tau, s.threshold)?;
    dataset::predictions(&a.pred_dir)?
        .par_iter()
        .try_for_each(|(id, path)| -> Result<()> {
            let (mask, tau) = to_mask(dataset::read_prediction(path)?, s.threshold);
            let regions = cluster8(&mask).iter().map(|r| r.record()).collect();
            write_mask_png(out.join("masks").join(format!("{id}.png")), &mask)?;
            write_json(out.join("regions").join(format!("{id}.json")), &RegionFile { id, tau, regions })?;
            Ok(())
        })?;
    settings::echo(out, "cluster", &s)?;
    Ok(())
}

fn paired(gt_dir: &Path, pred_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    dataset::predictions(pred_dir)?
        .into_iter()
        .map(|(id, pred)| {
            let gt = dataset::gt_path(gt_dir, &id)?;
            Ok((id, gt, pred))
        })
        .collect()
}

#[derive(Serialize)]
struct ImageCounts {
    id: String,
    tau: Option<f64>,
    #[serde(flatten)]
    counts: DetectionCounts,
}

fn eval(g: &Global, a: &crate::EvalArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::EvalSettings = settings::load(config(g))?;
    s.threshold = binarize(a.tau, a.adaptive_tau, s.threshold)?;
    s.d_thresh = a.d_thresh.unwrap_or(s.d_thresh);
    let per_image: Vec<ImageCounts> = paired(&a.gt_dir, &a.pred_dir)?
        .par_iter()
        .map(|(id, gt, pred)| {
            let gt = read_mask_png(gt)?;
            let (mask, tau) = to_mask(dataset::read_prediction(pred)?, s.threshold);
            let counts = evaluate_masks(&gt, &mask, s.d_thresh).with_context(|| format!("evaluating {id}"))?;
            Ok(ImageCounts {
                id: id.clone(),
                tau,
                counts,
            })
        })
        .collect::<Result<_>>()?;
    let pooled: DetectionCounts = per_image.iter().map(|c| c.counts).sum();
    let report = DetectionReport::from_counts(pooled, s.d_thresh)?;
    write_json(out.join("report.json"), &report)?;
    write_json(out.join("per_image.json"), &per_image)?;
    settings::echo(out, "eval", &s)?;
    println!("pd {:.6} fa {:.6e} iou {:.6}", report.pd, report.fa, report.iou);
    Ok(())
}

fn roc(g: &Global, a: &crate::RocArgs) -> Result<()> {
    let out = g.out()?;
    let mut s: settings::RocSettings = settings::load(config(g))?;
    s.taus = a.taus.unwrap_or(s.taus);
    s.d_thresh = a.d_thresh.unwrap_or(s.d_thresh);
    if s.taus < 2 {
        return Err(Error::Config(format!("need at least 2 thresholds, got {}", s.taus)).into());
    }
    let loaded: Vec<(ProbabilityMap<f64>, BinaryMask)> = paired(&a.gt_dir, &a.pred_dir)?
        .par_iter()
        .map(|(id, gt, pred)| match dataset::read_prediction(pred)? {
            Prediction::Map(map) => Ok((map, read_mask_png(gt)?)),
            Prediction::Mask(_) => Err(Error::Data(format!("{id}: ROC needs probability maps, found a mask")).into()),
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = loaded.iter().map(|(m, g)| (m, g)).collect();
    let curve = roc_sweep_many(&pairs, &tau_grid(s.taus), s.d_thresh)?;
    write_atomic(out.join("roc.csv"), curve.to_csv().as_bytes())?;
    write_atomic(out.join("roc_fa_pd.csv"), curve.fa_pd_csv().as_bytes())?;
    write_atomic(out.join("roc_tau_pd.csv"), curve.tau_pd_csv().as_bytes())?;
    write_atomic(out.join("roc_tau_fa.csv"), curve.tau_fa_csv().as_bytes())?;
    settings::echo(out, "roc", &s)?;
    Ok(())
}
