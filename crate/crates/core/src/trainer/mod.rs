//! Alternating two-stage training.
//!
//! Stage 1 runs Adam on the backbone and head for every mini-batch of the
//! training split with the rotation frozen. Every `t_thre` mini-batches
//! stage 2 draws per-concept batches from the concept subset and takes one
//! curvilinear step on `Q`.

pub mod config;
pub mod model;
pub mod report;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

pub use config::{TrainConfig, TrainMode, CONFIG_KEYS};
pub use model::{HcwModel, Inference};
pub use report::{EpochRecord, QUpdateRecord, TrainReport};

use crate::data::{write_text, Dataset, SplitTag};
use crate::error::{HcwError, Result};
use crate::hcw::{
    ema_update, hcw_forward_tape, reduce_activation_tape, BatchStats, Mode, StatsGradient,
};
use crate::net::{
    adam_step, argmax_rows, backbone_forward, cross_entropy, head_forward, AdamConfig, AdamState,
    Architecture, ParamGrads,
};
use crate::qopt::{alignment_objective, curvilinear_update, ConceptBatchSet, LineSearch};
use crate::rng::SeededRng;
use crate::sc_loss::{sc_loss, ScLossConfig};
use crate::tensor::Tensor;
use crate::tree::ConceptId;

/// Per-concept sample cap for one rotation update.
pub const CONCEPT_BATCH: usize = 8;
const ORTHO_TOL: f64 = 1e-8;
pub const REPORT_FILE: &str = "report.csv";
pub const Q_TRACE_FILE: &str = "q_trace.csv";

/// Loss, accuracy count and parameter gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub ce_loss: f64,
    pub sc_loss: f64,
    pub correct: usize,
    pub grads: ParamGrads,
    /// Present in train mode.
    pub stats: Option<BatchStats>,
}

/// Forward and backward pass for one batch. `classes` are head targets,
/// `labels` the matching leaf concepts (used by the semantic loss).
pub fn loss_and_grads(
    model: &HcwModel,
    images: &Tensor,
    classes: &[usize],
    labels: &[ConceptId],
    sc: Option<&ScLossConfig>,
    mode: Mode,
) -> Result<StepOutput> {
    let (mut tape, z) = backbone_forward(&model.arch, &model.params, images)?;
    let (zhat, stats) = hcw_forward_tape(
        &mut tape,
        z,
        &model.whitening,
        &model.q,
        mode,
        StatsGradient::Through,
    )?;
    let logits = head_forward(&model.params, &mut tape, zhat)?;
    let (ce, dlogits) = cross_entropy(tape.value(logits), classes)?;
    let correct = argmax_rows(tape.value(logits))
        .iter()
        .zip(classes)
        .filter(|(p, c)| p == c)
        .count();
    let mut upstream = vec![(logits, dlogits)];
    let mut sc_value = 0.0;
    if let Some(cfg) = sc {
        let reduced = reduce_activation_tape(&mut tape, zhat, model.pool_window)?;
        let d = model.latent_dim();
        let rows: Vec<Vec<f64>> = tape
            .value(reduced)
            .data()
            .chunks(d)
            .map(|r| r.to_vec())
            .collect();
        let out = sc_loss(&rows, labels, &model.tree, cfg)?;
        sc_value = out.total;
        let flat: Vec<f64> = out.grads.into_iter().flatten().collect();
        upstream.push((reduced, Tensor::from_vec(&[rows.len(), d], flat)?));
    }
    let grads = tape.backward(upstream)?;
    let loss = ce + sc_value;
    if !loss.is_finite() {
        return Err(HcwError::numeric(format!("training loss became {loss}")));
    }
    Ok(StepOutput {
        loss,
        ce_loss: ce,
        sc_loss: sc_value,
        correct,
        grads,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation model.
    pub model: HcwModel,
    pub report: TrainReport,
}

/// Concept-subset positions (indices into `concept_idx`) of every concept's
/// samples, with descendants included.
fn concept_pools(ds: &Dataset, concept_idx: &[usize]) -> Result<Vec<Vec<usize>>> {
    let tree = &ds.tree;
    tree.ids()
        .map(|c| {
            let members = tree.subtree(c);
            let pool: Vec<usize> = concept_idx
                .iter()
                .enumerate()
                .filter(|(_, &i)| members.contains(&ds.labels[i]))
                .map(|(p, _)| p)
                .collect();
            if pool.is_empty() {
                Err(HcwError::validation(format!(
                    "concept {} has no samples in the concept subset",
                    tree.name(c)
                )))
            } else {
                Ok(pool)
            }
        })
        .collect()
}

fn full_concept_batches(
    model: &HcwModel,
    ds: &Dataset,
    concept_idx: &[usize],
    pools: &[Vec<usize>],
) -> Result<ConceptBatchSet> {
    let vectors = model.whitened_means(&ds.images.gather(concept_idx))?;
    let batches = pools
        .iter()
        .map(|pool| pool.iter().map(|&p| vectors[p].clone()).collect())
        .collect();
    ConceptBatchSet::new(model.latent_dim(), batches)
}

fn sampled_concept_batches(
    model: &HcwModel,
    ds: &Dataset,
    concept_idx: &[usize],
    pools: &[Vec<usize>],
    rng: &mut SeededRng,
) -> Result<ConceptBatchSet> {
    let picks: Vec<Vec<usize>> = pools
        .iter()
        .map(|pool| {
            let mut p = pool.clone();
            rng.shuffle(&mut p);
            p.truncate(CONCEPT_BATCH.min(p.len()));
            p
        })
        .collect();
    let needed: BTreeSet<usize> = picks.iter().flatten().copied().collect();
    let needed: Vec<usize> = needed.into_iter().collect();
    let images: Vec<usize> = needed.iter().map(|&p| concept_idx[p]).collect();
    let vectors = model.whitened_means(&ds.images.gather(&images))?;
    let batches = picks
        .iter()
        .map(|pick| {
            pick.iter()
                .map(|p| vectors[needed.binary_search(p).expect("drawn from needed")].clone())
                .collect()
        })
        .collect();
    ConceptBatchSet::new(model.latent_dim(), batches)
}

fn report_header(cfg: &TrainConfig) -> String {
    let mut h = cfg.summary();
    if cfg.lr != 0.1 {
        let _ = write!(h, " (lr differs from the reference setting 0.1)");
    }
    h
}

/// Runs the full schedule and returns the best-validation model. The test
/// split is evaluated on that model at the end.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let leaves = ds.tree.leaves();
    let arch = Architecture::new(ds.channels(), ds.image_size(), cfg.latent_dim, leaves.len());
    let mut init_rng = SeededRng::with_stream(cfg.seed, 0);
    let mut model = HcwModel::init(
        arch,
        ds.tree.clone(),
        cfg.ema_decay,
        cfg.eps,
        cfg.pool_window,
        &mut init_rng,
    )?;
    let classes = ds.class_indices()?;
    let train_idx = ds.indices(SplitTag::Train);
    let val_idx = ds.indices(SplitTag::Val);
    let concept_idx = ds.concept_subset_indices();
    if train_idx.len() < 2 {
        return Err(HcwError::validation(
            "training split needs at least two samples",
        ));
    }
    let pools = concept_pools(ds, &concept_idx)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        eps: 1e-8,
    };
    let mut adam = AdamState::new(&model.params);
    let sc_cfg = cfg.mode.uses_sc_loss().then_some(cfg.sc);
    let hierarchy = cfg.mode.hierarchy();
    let search = LineSearch::default();
    let mut rng = SeededRng::with_stream(cfg.seed, 1);
    let mut report = TrainReport {
        header: report_header(cfg),
        ..Default::default()
    };
    let mut best: Option<(f64, f64, HcwModel)> = None;
    let mut global_batch = 0usize;
    let mut accepts = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let q_bits = model.q.matrix().to_bits();
            let images = ds.images.gather(batch);
            let batch_classes: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
            let batch_labels: Vec<ConceptId> = batch.iter().map(|&i| ds.labels[i]).collect();
            let step = loss_and_grads(
                &model,
                &images,
                &batch_classes,
                &batch_labels,
                sc_cfg.as_ref(),
                Mode::Train,
            )?;
            adam_step(&mut model.params, &step.grads, &mut adam, &adam_cfg)?;
            ema_update(
                &mut model.whitening,
                step.stats.as_ref().expect("train mode"),
            )?;
            loss_sum += step.loss * batch.len() as f64;
            correct += step.correct;
            seen += batch.len();
            if model.q.matrix().to_bits() != q_bits {
                return Err(HcwError::Usage(
                    "rotation changed outside a stage-2 trigger".into(),
                ));
            }
            global_batch += 1;
            if global_batch.is_multiple_of(cfg.t_thre) {
                let set = sampled_concept_batches(&model, ds, &concept_idx, &pools, &mut rng)?;
                let outcome = curvilinear_update(&model.q, &set, &model.tree, hierarchy, &search)?;
                let full = full_concept_batches(&model, ds, &concept_idx, &pools)?;
                let full_before = alignment_objective(&model.q, &full, &model.tree, hierarchy)?;
                let full_after = alignment_objective(&outcome.q, &full, &model.tree, hierarchy)?;
                let residual = outcome.q.residual();
                if residual > ORTHO_TOL {
                    return Err(HcwError::numeric(format!(
                        "rotation lost orthogonality (residual {residual:e})"
                    )));
                }
                accepts += usize::from(outcome.accepted());
                report.q_updates.push(QUpdateRecord {
                    trigger: report.q_updates.len() + 1,
                    epoch,
                    batch: global_batch,
                    objective_before: outcome.objective_before,
                    objective_after: outcome.objective_after,
                    full_objective_before: full_before,
                    full_objective_after: full_after,
                    eta: outcome.eta_used,
                    trials: outcome.trials,
                    accepted: outcome.accepted(),
                    orthogonality_residual: residual,
                });
                model.q = outcome.q;
            }
        }
        let val = loss_and_accuracy(&model, ds, &val_idx, &classes)?;
        let full = full_concept_batches(&model, ds, &concept_idx, &pools)?;
        let align = alignment_objective(&model.q, &full, &model.tree, hierarchy)?;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.0,
            val_acc: val.1,
            align_obj: align,
            q_accepts: accepts,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _)) => val.1 > *acc || (val.1 == *acc && val.0 < *loss),
        };
        if better {
            best = Some((val.1, val.0, model.clone()));
            report.best_epoch = epoch;
        }
    }
    let model = best.map_or(model, |(_, _, m)| m);
    let test_idx = ds.indices(SplitTag::Test);
    let (test_loss, test_acc) = loss_and_accuracy(&model, ds, &test_idx, &classes)?;
    report.test_loss = Some(test_loss);
    report.test_accuracy = Some(test_acc);
    Ok(TrainOutcome { model, report })
}

/// Trains from a dataset directory and writes the checkpoint directory.
pub fn train_to_dir(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport> {
    let ds = Dataset::load(data_dir)?;
    let outcome = train(cfg, &ds)?;
    outcome.model.save(out_dir, cfg)?;
    write_text(&out_dir.join(REPORT_FILE), &outcome.report.to_csv())?;
    write_text(&out_dir.join(Q_TRACE_FILE), &outcome.report.q_trace_csv())?;
    Ok(outcome.report)
}

fn loss_and_accuracy(
    model: &HcwModel,
    ds: &Dataset,
    idx: &[usize],
    classes: &[usize],
) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Err(HcwError::validation("cannot evaluate an empty split"));
    }
    let out = model.infer(&ds.images.gather(idx))?;
    let targets: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
    let (loss, _) = cross_entropy(&out.logits, &targets)?;
    let correct = argmax_rows(&out.logits)
        .iter()
        .zip(&targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok((loss, correct as f64 / idx.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub split: SplitTag,
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
    /// `(leaf name, accuracy)` in class order.
    pub per_class_accuracy: Vec<(String, f64)>,
    pub mean_brother_distance: f64,
    pub mean_cousin_distance: f64,
    pub brother_pairs: usize,
    pub cousin_pairs: usize,
    pub centroid_brother_distance: f64,
    pub centroid_cousin_distance: f64,
}

impl EvalMetrics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "split = {}", self.split);
        let _ = writeln!(out, "samples = {}", self.samples);
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "loss = {:.6}", self.loss);
        for (name, acc) in &self.per_class_accuracy {
            let _ = writeln!(out, "accuracy.{name} = {acc:.6}");
        }
        let _ = writeln!(
            out,
            "mean_brother_distance = {:.6}",
            self.mean_brother_distance
        );
        let _ = writeln!(
            out,
            "mean_cousin_distance = {:.6}",
            self.mean_cousin_distance
        );
        let _ = writeln!(out, "brother_pairs = {}", self.brother_pairs);
        let _ = writeln!(out, "cousin_pairs = {}", self.cousin_pairs);
        let _ = writeln!(
            out,
            "centroid_brother_distance = {:.6}",
            self.centroid_brother_distance
        );
        let _ = writeln!(
            out,
            "centroid_cousin_distance = {:.6}",
            self.centroid_cousin_distance
        );
        out
    }
}

fn mean_or_zero(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Checks that a dataset can be fed to a model.
pub fn check_compatible(model: &HcwModel, ds: &Dataset) -> Result<()> {
    if ds.tree != model.tree {
        return Err(HcwError::validation(
            "dataset tree differs from the model's tree",
        ));
    }
    let (_, c, h, _) = ds.images.dims4()?;
    if c != model.arch.in_channels || h != model.arch.image_size {
        return Err(HcwError::validation(format!(
            "dataset images are {c}x{h}x{h}, model expects {0}x{1}x{1}",
            model.arch.in_channels, model.arch.image_size
        )));
    }
    Ok(())
}

/// Eval-mode metrics on one split. Distances use every brother and cousin
/// sample pair of the split.
pub fn evaluate(model: &HcwModel, ds: &Dataset, split: SplitTag) -> Result<EvalMetrics> {
    check_compatible(model, ds)?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(HcwError::validation(format!("split {split} is empty")));
    }
    let classes = ds.class_indices()?;
    let out = model.infer(&ds.images.gather(&idx))?;
    let targets: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
    let (loss, _) = cross_entropy(&out.logits, &targets)?;
    let preds = argmax_rows(&out.logits);
    let leaves = model.tree.leaves();
    let k = leaves.len();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (p, t) in preds.iter().zip(&targets) {
        totals[*t] += 1;
        hits[*t] += usize::from(p == t);
    }
    let accuracy = hits.iter().sum::<usize>() as f64 / idx.len() as f64;
    let per_class_accuracy = leaves
        .iter()
        .enumerate()
        .map(|(c, &l)| {
            (
                model.tree.name(l).to_string(),
                mean_or_zero(hits[c] as f64, totals[c]),
            )
        })
        .collect();

    let d = model.latent_dim();
    let rows: Vec<&[f64]> = out.reduced.data().chunks(d).collect();
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let relation = |a: usize, b: usize| -> Result<(bool, bool)> {
        let rel = model.tree.relations(leaves[a])?;
        Ok((
            rel.brothers.contains(&leaves[b]),
            rel.cousins.contains(&leaves[b]),
        ))
    };
    let mut rel_table = vec![(false, false); k * k];
    for a in 0..k {
        for b in 0..k {
            rel_table[a * k + b] = relation(a, b)?;
        }
    }
    let (mut bsum, mut bn, mut csum, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (is_b, is_c) = rel_table[targets[i] * k + targets[j]];
            if is_b {
                bsum += dist(rows[i], rows[j]);
                bn += 1;
            } else if is_c {
                csum += dist(rows[i], rows[j]);
                cn += 1;
            }
        }
    }
    let mut centroids = vec![vec![0.0; d]; k];
    for (row, &t) in rows.iter().zip(&targets) {
        for (a, b) in centroids[t].iter_mut().zip(*row) {
            *a += b;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&totals) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let (mut cbs, mut cbn, mut ccs, mut ccn) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..k {
        for b in a + 1..k {
            if totals[a] == 0 || totals[b] == 0 {
                continue;
            }
            let (is_b, is_c) = rel_table[a * k + b];
            if is_b {
                cbs += dist(&centroids[a], &centroids[b]);
                cbn += 1;
            } else if is_c {
                ccs += dist(&centroids[a], &centroids[b]);
                ccn += 1;
            }
        }
    }
    Ok(EvalMetrics {
        split,
        samples: idx.len(),
        accuracy,
        loss,
        per_class_accuracy,
        mean_brother_distance: mean_or_zero(bsum, bn),
        mean_cousin_distance: mean_or_zero(csum, cn),
        brother_pairs: bn,
        cousin_pairs: cn,
        centroid_brother_distance: mean_or_zero(cbs, cbn),
        centroid_cousin_distance: mean_or_zero(ccs, ccn),
    })
}
