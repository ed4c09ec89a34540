//! Teacher pretraining, student distillation, evaluation and the ablation
//! grid.
//!
//! One training run is strictly sequential and single-threaded, so equal
//! configs reproduce bit-identical metrics; the ablation grid fans distinct
//! runs out across threads. The frozen teacher's outputs on the student
//! pool are precomputed once per run — the teacher never sees gradients and
//! its per-sample outputs cannot depend on batch composition, so caching is
//! numerically identical to re-running it every step.

use crate::affinity::{build_pixel_pairs, AffinityCtx};
use crate::autograd::{softmax_channels_fwd, Graph, NodeId};
use crate::checkpoint;
use crate::composer::{total_loss, DiceCtx, FocalCtx, LossBreakdown};
use crate::config::{ExperimentConfig, ModuleFlags, SegLossKind};
use crate::data::{generate_site, leave_one_site_out, load_dataset, site_spec, SiteDataset};
use crate::error::{Error, Result};
use crate::kernel::{gram_scale, AlignmentProjector};
use crate::logits::LogitsCtx;
use crate::models::{build_model, SegNetwork};
use crate::rng::{child_seed, rng_from};
use crate::tensor::{argmax_labels, LabelMap};
use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

// ---------------------------------------------------------------------------
// optimizer and schedule
// ---------------------------------------------------------------------------

/// Adam with the usual bias correction, one state slot per named parameter.
struct Adam {
    m: BTreeMap<String, Array4<f64>>,
    v: BTreeMap<String, Array4<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, name: &str, param: &mut Array4<f64>, grad: &Array4<f64>, lr: f64) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array4::zeros(param.raw_dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array4::zeros(param.raw_dim()));
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            });
    }
}

/// Triangular cyclic schedule: starts at the maximum rate, descends to the
/// minimum over `half_period` steps, climbs back, and repeats.
pub fn cyclic_lr(step: usize, max_lr: f64, min_lr: f64, half_period: usize) -> f64 {
    let half = half_period.max(1);
    let pos = step % (2 * half);
    let tri = if pos <= half {
        pos as f64 / half as f64
    } else {
        (2 * half - pos) as f64 / half as f64
    };
    max_lr - (max_lr - min_lr) * tri
}

// ---------------------------------------------------------------------------
// report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-step loss breakdowns of this epoch.
    pub mean: LossBreakdown,
    /// Learning rate at the epoch's last step.
    pub lr_end: f64,
    /// Per-site dice of the deterministic end-of-epoch evaluation.
    pub dice: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub model_name: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mean dice over the evaluation sites at the best epoch.
    pub best_dice: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_seconds: f64,
}

/// One optimizer step as logged to `metrics.csv`.
#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub eval_dice: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut out = String::from("step,epoch,seg,logits,kernel,affinity,total,lr,eval_dice\n");
    for r in rows {
        let ed = r.eval_dice.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.breakdown.seg,
            r.breakdown.logits,
            r.breakdown.kernel,
            r.breakdown.affinity,
            r.breakdown.total,
            r.lr,
            ed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// data plumbing
// ---------------------------------------------------------------------------

/// Concatenated training samples with their site of origin.
pub struct TrainPool {
    pub images: Array4<f64>,
    pub labels: Array3<u32>,
    pub site_ids: Vec<String>,
}

impl TrainPool {
    pub fn from_sites(sites: &[SiteDataset]) -> Result<Self> {
        if sites.is_empty() || sites.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("training pool: empty dataset".into()));
        }
        let views: Vec<ArrayView4<f64>> = sites.iter().map(|s| s.images.view()).collect();
        let images = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Data(format!("training pool: {e}")))?;
        let mask_views: Vec<_> = sites.iter().map(|s| s.masks.view()).collect();
        let labels = ndarray::concatenate(Axis(0), &mask_views)
            .map_err(|e| Error::Data(format!("training pool: {e}")))?;
        let mut site_ids = Vec::new();
        for s in sites {
            site_ids.extend(std::iter::repeat(s.site_id.clone()).take(s.len()));
        }
        Ok(TrainPool {
            images,
            labels,
            site_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idxs: &[usize]) -> (Array4<f64>, Array3<u32>) {
        let (_, c, h, w) = self.images.dim();
        let mut imgs = Array4::zeros((idxs.len(), c, h, w));
        let mut labs = Array3::zeros((idxs.len(), h, w));
        for (k, &i) in idxs.iter().enumerate() {
            imgs.index_axis_mut(Axis(0), k)
                .assign(&self.images.index_axis(Axis(0), i));
            labs.index_axis_mut(Axis(0), k)
                .assign(&self.labels.index_axis(Axis(0), i));
        }
        (imgs, labs)
    }
}

/// Generate (or load) the datasets for every configured site.
pub fn build_site_datasets(config: &ExperimentConfig) -> Result<Vec<SiteDataset>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.sites.len());
    for id in &config.sites {
        let ds = if let Some(dir) = &config.data_dir_path() {
            load_dataset(&dir.join(id))?
        } else {
            let spec = site_spec(id)?;
            generate_site(
                &spec,
                config.data.samples_per_site,
                (config.data.image_size, config.data.image_size),
                child_seed(config.seed, &["data", id]),
            )?
        };
        out.push(ds);
    }
    Ok(out)
}

impl ExperimentConfig {
    fn data_dir_path(&self) -> Option<PathBuf> {
        self.data.data_dir.as_ref().map(PathBuf::from)
    }
}

// ---------------------------------------------------------------------------
// teacher output cache
// ---------------------------------------------------------------------------

/// Frozen-teacher outputs for every sample of the student pool: softened
/// distributions for the logits term, argmax labels for pair construction,
/// tapped features for the kernel term.
struct TeacherCache {
    probs: Array4<f64>,
    labels: Array3<u32>,
    taps: BTreeMap<String, Array4<f64>>,
}

fn build_teacher_cache(
    teacher: &SegNetwork,
    pool: &TrainPool,
    tap_names: &[String],
    temperature: f64,
    batch_size: usize,
) -> Result<TeacherCache> {
    let n = pool.len();
    let tap_refs: Vec<&str> = tap_names.iter().map(|s| s.as_str()).collect();
    let mut probs: Option<Array4<f64>> = None;
    let mut labels: Option<Array3<u32>> = None;
    let mut taps: BTreeMap<String, Array4<f64>> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let (imgs, _) = pool.gather(&idxs);
        let (logits, feats) = teacher.forward_with_features(&imgs.view(), &tap_refs)?;
        let scaled = logits.mapv(|v| v / temperature);
        let p = softmax_channels_fwd(&scaled.view());
        let lab = argmax_labels(&logits, teacher.spec.num_classes as u32)?;
        let (_, c, h, w) = p.dim();
        let probs_all = probs.get_or_insert_with(|| Array4::zeros((n, c, h, w)));
        let labels_all = labels.get_or_insert_with(|| Array3::zeros((n, h, w)));
        for (k, &i) in idxs.iter().enumerate() {
            probs_all
                .index_axis_mut(Axis(0), i)
                .assign(&p.index_axis(Axis(0), k));
            labels_all
                .index_axis_mut(Axis(0), i)
                .assign(&lab.array().index_axis(Axis(0), k));
        }
        for (name, f) in feats {
            let (_, fc, fh, fw) = f.dim();
            let slot = taps
                .entry(name)
                .or_insert_with(|| Array4::zeros((n, fc, fh, fw)));
            for (k, &i) in idxs.iter().enumerate() {
                slot.index_axis_mut(Axis(0), i)
                    .assign(&f.index_axis(Axis(0), k));
            }
        }
        start = end;
    }
    Ok(TeacherCache {
        probs: probs.expect("nonempty pool"),
        labels: labels.expect("nonempty pool"),
        taps,
    })
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

/// Tap channel count for an architecture, by tap id.
fn tap_channels(model: &SegNetwork, tap: &str) -> Result<usize> {
    let ws = &model.spec.encoder_widths;
    if tap == "enc_last" || tap == "bottleneck" {
        return Ok(*ws.last().unwrap());
    }
    if let Some(stripped) = tap.strip_prefix("enc") {
        if let Ok(i) = stripped.parse::<usize>() {
            if i >= 1 && i <= ws.len() {
                return Ok(ws[i - 1]);
            }
        }
    }
    Err(Error::Lookup(format!(
        "unknown tap `{tap}` for model {}",
        model.spec.name
    )))
}

struct DistillSetup<'a> {
    teacher: &'a SegNetwork,
    cache: TeacherCache,
    /// (tap name, student projector, teacher projector), in config order.
    projectors: Vec<(String, AlignmentProjector, AlignmentProjector)>,
}

/// Shared supervised/distillation loop. `distill: None` is plain
/// supervised training; modules are enabled by the config flags.
fn run_training(
    config: &ExperimentConfig,
    model_name: &str,
    pool: &TrainPool,
    eval_sites: &[SiteDataset],
    mut distill: Option<DistillSetup>,
    out_dir: Option<&Path>,
) -> Result<(SegNetwork, TrainReport)> {
    config.validate()?;
    let t0 = Instant::now();
    let mut model = build_model(model_name, 2, config.seed)?;
    let mut adam = Adam::new();
    let mut shuffle_rng = rng_from(child_seed(config.seed, &["shuffle", model_name]));

    let flags = if distill.is_some() {
        config.module_flags
    } else {
        ModuleFlags::default()
    };
    let batches_per_epoch = pool.len().div_ceil(config.batch_size);
    let half_period = config
        .optimizer
        .schedule_step
        .unwrap_or(2 * batches_per_epoch);

    let mut rows: Vec<StepRow> = Vec::new();
    let mut epoch_records = Vec::with_capacity(config.epochs);
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<SegNetwork> = None;
    let mut step = 0usize;

    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_sum = LossBreakdown {
            seg: 0.0,
            logits: 0.0,
            kernel: 0.0,
            affinity: 0.0,
            total: 0.0,
        };
        let mut lr_end = config.optimizer.learning_rate;
        for chunk in indices.chunks(config.batch_size) {
            let lr = cyclic_lr(
                step,
                config.optimizer.learning_rate,
                config.optimizer.min_lr,
                half_period,
            );
            lr_end = lr;
            let (imgs, labs) = pool.gather(chunk);

            let mut g = Graph::new();
            let x = g.constant(imgs);
            let (logits, tap_nodes, mut param_nodes) = model.forward_tape(&mut g, x, &tap_list(config, flags))?;
            let probs = g.softmax_channels(logits);

            // supervised segmentation loss
            let seg_node = match config.seg.seg_loss {
                SegLossKind::Dice => g.dice_loss(
                    probs,
                    DiceCtx {
                        labels: labs.clone(),
                        smooth: config.seg.smooth,
                    },
                ),
                SegLossKind::Focal => g.focal_loss(
                    probs,
                    FocalCtx {
                        labels: labs.clone(),
                        gamma: config.seg.gamma,
                        epsilon: config.epsilon,
                    },
                ),
                SegLossKind::DiceFocal => {
                    let d = g.dice_loss(
                        probs,
                        DiceCtx {
                            labels: labs.clone(),
                            smooth: config.seg.smooth,
                        },
                    );
                    let f = g.focal_loss(
                        probs,
                        FocalCtx {
                            labels: labs,
                            gamma: config.seg.gamma,
                            epsilon: config.epsilon,
                        },
                    );
                    g.weighted_sum(vec![(d, 1.0), (f, 1.0)])
                }
            };

            let mut lm_node = None;
            let mut kmm_node = None;
            let mut aam_node = None;
            if let Some(setup) = distill.as_mut() {
                let (_, tc, th, tw) = setup.cache.probs.dim();
                if flags.use_lm {
                    let mut tprobs = Array4::zeros((chunk.len(), tc, th, tw));
                    for (k, &i) in chunk.iter().enumerate() {
                        tprobs
                            .index_axis_mut(Axis(0), k)
                            .assign(&setup.cache.probs.index_axis(Axis(0), i));
                    }
                    let ctx = LogitsCtx {
                        teacher_probs: tprobs,
                        epsilon: config.epsilon,
                        reverse: config.logits.kl_reverse,
                        temperature: config.logits.temperature,
                    };
                    lm_node = Some(g.logits_kl(logits, ctx)?);
                }
                if flags.use_aam {
                    let mut tlabs = Array3::zeros((chunk.len(), th, tw));
                    for (k, &i) in chunk.iter().enumerate() {
                        tlabs
                            .index_axis_mut(Axis(0), k)
                            .assign(&setup.cache.labels.index_axis(Axis(0), i));
                    }
                    let teacher_labels = LabelMap::new(tlabs, 2)?;
                    let pairs = Arc::new(build_pixel_pairs(
                        &teacher_labels,
                        config.neighborhood_radius,
                    )?);
                    // match the student probability map to the label-map
                    // resolution before pairing
                    let probs_at_labels = g.resize_bilinear(probs, th, tw)?;
                    aam_node = Some(g.affinity_loss(
                        probs_at_labels,
                        AffinityCtx {
                            pairs,
                            margin: config.margin,
                            epsilon: config.epsilon,
                            per_class_kl: config.affinity.per_class_kl,
                        },
                    ));
                }
                if flags.use_kmm {
                    let mut tap_losses = Vec::new();
                    for (tap, proj_s, proj_t) in &setup.projectors {
                        let s_node = tap_nodes[tap];
                        let (_, _, sh, sw) = g.value4(s_node).dim();
                        let t_all = &setup.cache.taps[tap];
                        let (_, cc, hh, ww) = t_all.dim();
                        let mut t_batch = Array4::zeros((chunk.len(), cc, hh, ww));
                        for (k, &i) in chunk.iter().enumerate() {
                            t_batch
                                .index_axis_mut(Axis(0), k)
                                .assign(&t_all.index_axis(Axis(0), i));
                        }
                        let common_hw = (sh.min(hh), sw.min(ww));
                        let ws_node = g.leaf(proj_s.weights.clone());
                        let wt_node = g.leaf(proj_t.weights.clone());
                        param_nodes.push((format!("proj_s.{tap}.w"), ws_node));
                        param_nodes.push((format!("proj_t.{tap}.w"), wt_node));
                        let s_aligned =
                            crate::kernel::align_features_node(&mut g, s_node, ws_node, common_hw)?;
                        let t_const = g.constant(t_batch);
                        let t_aligned =
                            crate::kernel::align_features_node(&mut g, t_const, wt_node, common_hw)?;
                        let scale = gram_scale(
                            proj_s.c_out(),
                            common_hw.0,
                            common_hw.1,
                            config.kernel.raw_gram,
                        );
                        let ks = g.gram(s_aligned, scale);
                        let kt = g.gram(t_aligned, scale);
                        tap_losses.push((g.kernel_loss(ks, kt)?, 1.0));
                    }
                    kmm_node = Some(g.weighted_sum(tap_losses));
                }
            }

            // compose the total objective; the breakdown guards against
            // non-finite components before any parameter moves
            let sv = g.scalar(seg_node);
            let lv = lm_node.map_or(0.0, |n| g.scalar(n));
            let kv = kmm_node.map_or(0.0, |n| g.scalar(n));
            let av = aam_node.map_or(0.0, |n| g.scalar(n));
            let breakdown = total_loss(sv, lv, kv, av, &config.loss_weights, &flags)
                .map_err(|e| match e {
                    Error::NumericAbort { component, .. } => Error::NumericAbort {
                        component,
                        epoch,
                        step,
                    },
                    other => other,
                })?;

            let mut parts = vec![(seg_node, 1.0)];
            if let Some(n) = lm_node {
                parts.push((n, config.loss_weights.lambda1));
            }
            if let Some(n) = kmm_node {
                parts.push((n, config.loss_weights.lambda2));
            }
            if let Some(n) = aam_node {
                parts.push((n, config.loss_weights.lambda3));
            }
            let total_node = g.weighted_sum(parts);
            g.backward(total_node);

            adam.begin_step();
            {
                let mut grads: BTreeMap<String, Array4<f64>> = BTreeMap::new();
                for (name, node) in &param_nodes {
                    if let Some(gr) = g.grad(*node) {
                        grads.insert(
                            name.clone(),
                            gr.clone().into_dimensionality::<ndarray::Ix4>().unwrap(),
                        );
                    }
                }
                for (name, param) in model.named_params_mut() {
                    if let Some(gr) = grads.get(&name) {
                        adam.update(&name, param, gr, lr);
                    }
                }
                if let Some(setup) = distill.as_mut() {
                    for (tap, proj_s, proj_t) in &mut setup.projectors {
                        if let Some(gr) = grads.get(&format!("proj_s.{tap}.w")) {
                            adam.update(&format!("proj_s.{tap}.w"), &mut proj_s.weights, gr, lr);
                        }
                        if let Some(gr) = grads.get(&format!("proj_t.{tap}.w")) {
                            adam.update(&format!("proj_t.{tap}.w"), &mut proj_t.weights, gr, lr);
                        }
                    }
                }
            }

            epoch_sum.seg += breakdown.seg;
            epoch_sum.logits += breakdown.logits;
            epoch_sum.kernel += breakdown.kernel;
            epoch_sum.affinity += breakdown.affinity;
            epoch_sum.total += breakdown.total;
            rows.push(StepRow {
                step,
                epoch,
                breakdown,
                lr,
                eval_dice: None,
            });
            step += 1;
        }

        let dice = evaluate(&model, eval_sites)?;
        let mean_dice = dice.values().sum::<f64>() / dice.len() as f64;
        if let Some(last) = rows.last_mut() {
            last.eval_dice = Some(mean_dice);
        }
        if mean_dice > best_dice {
            best_dice = mean_dice;
            best_epoch = epoch;
            best_params = Some(model.clone());
        }
        let nb = batches_per_epoch as f64;
        epoch_records.push(EpochRecord {
            epoch,
            mean: LossBreakdown {
                seg: epoch_sum.seg / nb,
                logits: epoch_sum.logits / nb,
                kernel: epoch_sum.kernel / nb,
                affinity: epoch_sum.affinity / nb,
                total: epoch_sum.total / nb,
            },
            lr_end,
            dice,
        });
    }

    let best = best_params.expect("at least one epoch");
    let mut checkpoint_path = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join("best.ckpt");
        checkpoint::save(&ckpt, &best)?;
        write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        checkpoint_path = Some(ckpt);
    }
    let report = TrainReport {
        config: config.clone(),
        model_name: model_name.to_string(),
        epochs: epoch_records,
        best_epoch,
        best_dice,
        checkpoint_path,
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;
    }
    Ok((best, report))
}

fn tap_list(config: &ExperimentConfig, flags: ModuleFlags) -> Vec<&str> {
    if flags.use_kmm {
        config.kernel.tap_layers.iter().map(|s| s.as_str()).collect()
    } else {
        Vec::new()
    }
}

/// Supervised training with the segmentation loss only. Used for teacher
/// pretraining and as the student baseline.
pub fn train_supervised(
    config: &ExperimentConfig,
    model_name: &str,
    train_sites: &[SiteDataset],
    eval_sites: &[SiteDataset],
    out_dir: Option<&Path>,
) -> Result<(SegNetwork, TrainReport)> {
    let pool = TrainPool::from_sites(train_sites)?;
    run_training(config, model_name, &pool, eval_sites, None, out_dir)
}

/// Pretrain the teacher on its own sites; checkpoint selection by best
/// training-site dice.
pub fn train_teacher(
    config: &ExperimentConfig,
    teacher_train: &[SiteDataset],
    out_dir: Option<&Path>,
) -> Result<(SegNetwork, TrainReport)> {
    train_supervised(config, &config.teacher_name, teacher_train, teacher_train, out_dir)
}

/// Distill the student from a frozen, pretrained teacher. Per batch: the
/// teacher's cached outputs drive the enabled modules, ground truth drives
/// the segmentation loss, and the weighted total is backpropagated into the
/// student and both alignment projectors. Checkpoint selection by best
/// held-out-site dice.
pub fn distill_student(
    config: &ExperimentConfig,
    teacher: &SegNetwork,
    student_train: &[SiteDataset],
    eval_set: &SiteDataset,
    out_dir: Option<&Path>,
) -> Result<(SegNetwork, TrainReport)> {
    let pool = TrainPool::from_sites(student_train)?;
    let flags = config.module_flags;
    let tap_names: Vec<String> = if flags.use_kmm {
        config.kernel.tap_layers.clone()
    } else {
        Vec::new()
    };
    let needs_teacher = flags.use_lm || flags.use_aam || flags.use_kmm;
    let cache = if needs_teacher {
        build_teacher_cache(
            teacher,
            &pool,
            &tap_names,
            config.logits.temperature,
            config.batch_size,
        )?
    } else {
        TeacherCache {
            probs: Array4::zeros((pool.len(), 1, 1, 1)),
            labels: Array3::zeros((pool.len(), 1, 1)),
            taps: BTreeMap::new(),
        }
    };
    // student tap channels come from the architecture, teacher tap channels
    // from the cached features
    let student_model = build_model(&config.student_name, 2, config.seed)?;
    let mut projectors = Vec::new();
    for tap in &tap_names {
        let cs = tap_channels(&student_model, tap)?;
        let ct = tap_channels(teacher, tap)?;
        let ps = AlignmentProjector::new(
            cs,
            config.kernel.common_dim,
            child_seed(config.seed, &["proj_s", tap]),
        );
        let pt = AlignmentProjector::new(
            ct,
            config.kernel.common_dim,
            child_seed(config.seed, &["proj_t", tap]),
        );
        projectors.push((tap.clone(), ps, pt));
    }
    let setup = DistillSetup {
        teacher,
        cache,
        projectors,
    };
    let eval_sites = std::slice::from_ref(eval_set);
    run_training(
        config,
        &config.student_name,
        &pool,
        eval_sites,
        Some(setup),
        out_dir,
    )
}

/// Deterministic per-site mean dice of a model's argmax predictions.
pub fn evaluate(model: &SegNetwork, datasets: &[SiteDataset]) -> Result<BTreeMap<String, f64>> {
    if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let mut out = BTreeMap::new();
    for ds in datasets {
        let n = ds.len();
        let mut dice_sum = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + 16).min(n);
            let imgs = ds
                .images
                .slice(ndarray::s![start..end, .., .., ..])
                .to_owned();
            let logits = model.forward(&imgs.view())?;
            let pred = argmax_labels(&logits, 2)?;
            for k in 0..(end - start) {
                let p = LabelMap::new(
                    pred.array()
                        .index_axis(Axis(0), k)
                        .to_owned()
                        .insert_axis(Axis(0)),
                    2,
                )?;
                let gt = LabelMap::new(
                    ds.masks
                        .index_axis(Axis(0), start + k)
                        .to_owned()
                        .insert_axis(Axis(0)),
                    2,
                )?;
                dice_sum += crate::composer::dice_score(&p, &gt)?;
            }
            start = end;
        }
        out.insert(ds.site_id.clone(), dice_sum / n as f64);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// experiment orchestration
// ---------------------------------------------------------------------------

/// The module-flag rows of the component-effectiveness table, in its
/// canonical order.
pub fn paper_grid() -> Vec<ModuleFlags> {
    let f = |aam, kmm, lm| ModuleFlags {
        use_aam: aam,
        use_kmm: kmm,
        use_lm: lm,
    };
    vec![
        f(false, false, false),
        f(false, false, true),
        f(true, false, false),
        f(false, true, false),
        f(false, true, true),
        f(true, false, true),
        f(true, true, false),
        f(true, true, true),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub combo: String,
    pub target: String,
    pub seed: u64,
    pub dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub combos: Vec<String>,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    /// Mean dice over seeds, indexed `[combo][target]`.
    pub mean: Vec<Vec<f64>>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Mean over every (target, seed) cell of one combo row.
    pub fn combo_mean(&self, combo_idx: usize) -> f64 {
        let row = &self.mean[combo_idx];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}", "combo"));
        for t in &self.targets {
            out.push_str(&format!("{t:>10}"));
        }
        out.push_str(&format!("{:>10}\n", "mean"));
        for (i, c) in self.combos.iter().enumerate() {
            out.push_str(&format!("{c:<16}"));
            for v in &self.mean[i] {
                out.push_str(&format!("{v:>10.4}"));
            }
            out.push_str(&format!("{:>10.4}\n", self.combo_mean(i)));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("combo");
        for t in &self.targets {
            out.push_str(&format!(",{t}"));
        }
        out.push_str(",mean\n");
        for (i, c) in self.combos.iter().enumerate() {
            out.push_str(c);
            for v in &self.mean[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.combo_mean(i)));
        }
        out
    }
}

/// One leave-one-site-out experiment: pretrain the teacher for
/// (seed, target), then distill the student once per module-flag combo.
/// Returns the best held-out dice per combo.
fn run_target_seed(
    base: &ExperimentConfig,
    grid: &[ModuleFlags],
    seed: u64,
    target: &str,
) -> Result<Vec<f64>> {
    let mut config = base.clone();
    config.seed = seed;
    config.target_site = target.to_string();
    config.validate()?;
    let sites = build_site_datasets(&config)?;
    let (teacher_sites, student_sites, eval_site) =
        leave_one_site_out(sites, target, config.data.teacher_fraction)?;
    let (teacher, _) = train_teacher(&config, &teacher_sites, None)?;
    let mut dices = Vec::with_capacity(grid.len());
    for flags in grid {
        let mut c = config.clone();
        c.module_flags = *flags;
        let (_, report) = distill_student(&c, &teacher, &student_sites, &eval_site, None)?;
        dices.push(report.best_dice);
    }
    Ok(dices)
}

/// Run the full (combo x target x seed) grid, distributing independent
/// (target, seed) experiments across threads. Results are deterministic:
/// every cell is produced by an isolated RNG stream keyed on its own
/// (seed, target) and assembled in fixed order.
pub fn run_ablation(
    base: &ExperimentConfig,
    grid: &[ModuleFlags],
    seeds: &[u64],
    targets: &[String],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("ablation grid: must not be empty".into()));
    }
    if seeds.is_empty() || targets.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation: seeds and targets must not be empty".into(),
        ));
    }
    let jobs: Vec<(u64, String)> = seeds
        .iter()
        .flat_map(|&s| targets.iter().map(move |t| (s, t.clone())))
        .collect();
    let results: Result<Vec<((u64, String), Vec<f64>)>> = jobs
        .par_iter()
        .map(|(seed, target)| {
            run_target_seed(base, grid, *seed, target).map(|d| ((*seed, target.clone()), d))
        })
        .collect();
    let results = results?;

    let combos: Vec<String> = grid.iter().map(|f| f.label()).collect();
    let mut cells = Vec::new();
    let mut mean = vec![vec![0.0; targets.len()]; grid.len()];
    for (ti, target) in targets.iter().enumerate() {
        for (ci, combo) in combos.iter().enumerate() {
            let mut acc = 0.0;
            for &seed in seeds {
                let (_, dices) = results
                    .iter()
                    .find(|((s, t), _)| *s == seed && t == target)
                    .expect("every job completed");
                acc += dices[ci];
                cells.push(AblationCell {
                    combo: combo.clone(),
                    target: target.clone(),
                    seed,
                    dice: dices[ci],
                });
            }
            mean[ci][ti] = acc / seeds.len() as f64;
        }
    }
    let table = AblationTable {
        combos,
        targets: targets.to_vec(),
        seeds: seeds.to_vec(),
        mean,
        cells,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv())?;
        std::fs::write(
            dir.join("ablation_cells.json"),
            serde_json::to_vec_pretty(&table)?,
        )?;
        std::fs::write(dir.join("ablation.txt"), table.render_text())?;
    }
    Ok(table)
}
