//! Epochs, folds, cross-validation and the α sweep.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, class_counts, hill_climb_split_counts, SampleRecord, SplitAssignment, NUM_OPS};
use crate::error::{Error, Result};
use crate::loss::{
    add_confusion, argmax_confusion, image_loss, image_loss_backward_logits, ClassWeights,
    EvalReport, LossConfig,
};
use crate::model::{save_checkpoint_with_hash, Mode, Network};
use crate::rng::{stream, Stream};
use crate::train::config::RunConfig;
use crate::train::optimizer::{adam_step, OptimizerState};
use crate::train::runlog::{EpochRecord, RunLog};
use crate::train::stop::StopState;

/// The independent random streams a training run draws from.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            shuffle: stream(seed, Stream::Shuffle),
            augment: stream(seed, Stream::Augment),
            dropout: stream(seed, Stream::Dropout),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub steps: usize,
    pub skipped: usize,
    pub mean_loss: f64,
    pub mean_supervised: f64,
    pub mean_unsupervised: f64,
    /// Total loss of every step, in visiting order.
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

/// One pass over `records` in shuffled order, one sample per step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut Network,
    records: &[&SampleRecord],
    weights: &ClassWeights,
    loss_cfg: &LossConfig,
    opt: &mut OptimizerState,
    rngs: &mut TrainRngs,
    augment_samples: bool,
    epoch: usize,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let mut stats = EpochStats::default();
    let (mut sup, mut unsup) = (0.0, 0.0);
    for (step, &i) in order.iter().enumerate() {
        let rec = records[i];
        if rec.roi.count() == 0 {
            stats.skipped += 1;
            stats
                .warnings
                .push(format!("epoch {epoch}: skipped {} (empty roi)", rec.case_id));
            continue;
        }
        let op = if augment_samples {
            rngs.augment.random_range(0..NUM_OPS)
        } else {
            0
        };
        let sample = augment(rec, op)?;
        let ctx = |e| with_context(e, epoch, step);
        let (probs, cache) = net
            .forward(&sample.image, Mode::Train, &mut rngs.dropout)
            .map_err(ctx)?;
        let (loss, grad) =
            image_loss_backward_logits(&probs, &sample.labels, &sample.roi, weights, loss_cfg)?;
        if !loss.total.is_finite() {
            return Err(ctx(Error::NonFinite(format!(
                "loss is {} on {}",
                loss.total, rec.case_id
            ))));
        }
        let (grads, _) = net.backward_logits(&cache, &grad).map_err(ctx)?;
        grads.check_finite().map_err(ctx)?;
        adam_step(net.params_mut(), &grads.tensors, opt)?;
        stats.steps += 1;
        stats.losses.push(loss.total);
        sup += loss.supervised;
        unsup += loss.unsupervised;
    }
    if stats.steps > 0 {
        let n = stats.steps as f64;
        stats.mean_loss = stats.losses.iter().sum::<f64>() / n;
        stats.mean_supervised = sup / n;
        stats.mean_unsupervised = unsup / n;
    }
    Ok(stats)
}

/// Eval-mode metrics over `records`. BACC only covers classes with a
/// nonzero weight, so classes absent from training are excluded.
pub fn evaluate(
    net: &Network,
    records: &[&SampleRecord],
    weights: &ClassWeights,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    let c = net.config.num_classes;
    let per: Vec<_> = records
        .par_iter()
        .filter(|r| r.roi.count() > 0)
        .map(|r| {
            let probs = net.predict_probs(&r.image)?;
            let loss = image_loss(&probs, &r.labels, &r.roi, weights, loss_cfg)?;
            let confusion = argmax_confusion(&probs, &r.labels, &r.roi)?;
            Ok((confusion, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0u64; c]; c];
    let (mut sup, mut unsup, mut ent, mut unl) = (0.0, 0.0, 0.0, 0usize);
    for (m, l) in &per {
        add_confusion(&mut confusion, m);
        sup += l.supervised;
        unsup += l.unsupervised;
        ent += l.mean_unlabeled_entropy * l.unlabeled as f64;
        unl += l.unlabeled;
    }
    let n = per.len().max(1) as f64;
    let mut report = EvalReport::from_confusion(confusion, sup / n, unsup / n);
    report.mean_unlabeled_entropy = if unl == 0 { 0.0 } else { ent / unl as f64 };
    let eligible: Vec<bool> = weights.weights.iter().map(|&w| w > 0.0).collect();
    Ok(report.restrict_bacc(&eligible))
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Network at the last significant improvement.
    pub best: Network,
    pub best_report: EvalReport,
    pub best_epoch: Option<usize>,
    pub last: Network,
    pub last_report: EvalReport,
    /// Held-out metrics of the freshly initialised network.
    pub initial_report: EvalReport,
    pub epochs_run: usize,
    pub warnings: Vec<String>,
}

/// Maps each record to its fold through the case ids of a split.
pub fn fold_of_records(records: &[SampleRecord], split: &SplitAssignment) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            split.fold_of_case.get(&r.case_id).copied().ok_or_else(|| {
                Error::InvalidInput(format!("case {} missing from the split", r.case_id))
            })
        })
        .collect()
}

/// Trains on every fold except `fold` and monitors early stopping on it.
///
/// With `out_dir`, writes `best.ckpt` on every significant improvement and
/// `final.ckpt` at the end.
pub fn run_fold(
    records: &[SampleRecord],
    fold_of: &[usize],
    fold: usize,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    log: &mut RunLog,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if fold_of.len() != records.len() {
        return Err(Error::InvalidInput(format!(
            "{} fold indices for {} records",
            fold_of.len(),
            records.len()
        )));
    }
    if fold >= cfg.folds {
        return Err(Error::InvalidParameter(format!(
            "fold {fold} out of range for {} folds",
            cfg.folds
        )));
    }
    let c = cfg.network.num_classes;
    let (held, train): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(fold_of)
        .partition(|(_, &f)| f == fold);
    let held: Vec<&SampleRecord> = held.into_iter().map(|(r, _)| r).collect();
    let train: Vec<&SampleRecord> = train.into_iter().map(|(r, _)| r).collect();

    let per_case = train
        .iter()
        .map(|r| r.class_counts(c))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..per_case.len()).collect();
    let weights = ClassWeights::from_counts(&class_counts(&per_case, &all, c)?)?;

    let hash = cfg.hash();
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut net = Network::build(&cfg.network, cfg.seed)?;
    let mut opt = OptimizerState::new(net.params().into_iter().map(|(_, t)| t), cfg.train.optimizer);
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut stop = StopState::new(cfg.train.stop);

    let initial_report = evaluate(&net, &held, &weights, &cfg.loss)?;
    let mut best = (net.clone(), initial_report.clone(), None);
    let mut last_report = initial_report.clone();
    let mut warnings = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..cfg.train.max_epochs {
        let t0 = Instant::now();
        let stats = train_epoch(
            &mut net,
            &train,
            &weights,
            &cfg.loss,
            &mut opt,
            &mut rngs,
            cfg.train.augment,
            epoch,
        )?;
        warnings.extend(stats.warnings);
        let report = evaluate(&net, &held, &weights, &cfg.loss)?;
        let decision = stop.update(report.bacc);
        epochs_run = epoch + 1;
        if decision.significant {
            best = (net.clone(), report.clone(), Some(epoch));
            if let Some(d) = out_dir {
                save_checkpoint_with_hash(&net, Some(&hash), d.join("best.ckpt"))?;
            }
        }
        log.push(EpochRecord {
            fold,
            epoch,
            train_loss: stats.mean_loss,
            train_supervised: stats.mean_supervised,
            train_unsupervised: stats.mean_unsupervised,
            val_bacc: report.bacc,
            val_unlabeled_entropy: report.mean_unlabeled_entropy,
            significant: decision.significant,
            wall_time_s: t0.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config_hash: hash.clone(),
        })?;
        last_report = report;
        if decision.stop {
            break;
        }
    }
    if let Some(d) = out_dir {
        save_checkpoint_with_hash(&net, Some(&hash), d.join("final.ckpt"))?;
    }
    let (best_net, best_report, best_epoch) = best;
    Ok(FoldOutcome {
        fold,
        best: best_net,
        best_report,
        best_epoch,
        last: net,
        last_report,
        initial_report,
        epochs_run,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub seed: u64,
    pub config_hash: String,
    pub alpha: f64,
    pub split: SplitAssignment,
    pub folds: Vec<FoldSummary>,
    /// Mean of the per-fold best BACC.
    pub mean_bacc: f64,
    pub pooled_confusion: Vec<Vec<u64>>,
    pub pooled_bacc: f64,
}

/// Splits by hill climbing, then runs every fold.
pub fn run_cv(
    records: &[SampleRecord],
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    log: &mut RunLog,
) -> Result<CvReport> {
    cfg.validate()?;
    let c = cfg.network.num_classes;
    let ids: Vec<String> = records.iter().map(|r| r.case_id.clone()).collect();
    let counts = records
        .iter()
        .map(|r| r.class_counts(c))
        .collect::<Result<Vec<_>>>()?;
    let split = hill_climb_split_counts(
        &ids,
        &counts,
        cfg.folds,
        cfg.split_stale_iters,
        &mut stream(cfg.seed, Stream::Split),
    )?;
    let fold_of = fold_of_records(records, &split)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut pooled = vec![vec![0u64; c]; c];
    for f in 0..cfg.folds {
        let dir = out_dir.map(|d| d.join(format!("fold_{f}")));
        let o = run_fold(records, &fold_of, f, cfg, dir.as_deref(), log)?;
        add_confusion(&mut pooled, &o.best_report.confusion);
        folds.push(FoldSummary {
            fold: f,
            best_epoch: o.best_epoch,
            epochs_run: o.epochs_run,
            report: o.best_report,
        });
    }
    let mean_bacc = folds.iter().map(|f| f.report.bacc).sum::<f64>() / folds.len() as f64;
    Ok(CvReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        alpha: cfg.loss.alpha,
        split,
        folds,
        mean_bacc,
        pooled_bacc: crate::loss::balanced_accuracy(&pooled),
        pooled_confusion: pooled,
    })
}

/// Cross-validation once per α; returns the reports and the per-epoch log.
pub fn run_alpha_sweep(
    records: &[SampleRecord],
    cfg: &RunConfig,
    alphas: &[f64],
    out_dir: Option<&Path>,
) -> Result<(Vec<CvReport>, Vec<(f64, EpochRecord)>)> {
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.loss.alpha = alpha;
        let dir = out_dir.map(|d| d.join(format!("alpha_{alpha}")));
        let mut log = match &dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                RunLog::to_file(d.join("runlog.jsonl"))
            }
            None => RunLog::in_memory(),
        };
        reports.push(run_cv(records, &c, dir.as_deref(), &mut log)?);
        curves.extend(log.records.into_iter().map(|r| (alpha, r)));
    }
    Ok((reports, curves))
}

/// `alpha,epoch,fold,bacc,seed,config_hash` rows for plotting accuracy curves.
pub fn write_curves_csv(path: impl AsRef<Path>, curves: &[(f64, EpochRecord)]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("alpha,epoch,fold,bacc,seed,config_hash\n");
    for (a, r) in curves {
        text.push_str(&format!(
            "{a},{},{},{:.6},{},{}\n",
            r.epoch, r.fold, r.val_bacc, r.seed, r.config_hash
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;
    use crate::tensor::{LabelMap, Mask, Tensor};

    /// Left half dark and flat, right half bright and noisy.
    fn toy(seed: u64) -> SampleRecord {
        let (h, w) = (12, 12);
        let mut rng = stream(seed, Stream::Synth);
        let img: Vec<f32> = (0..h * w)
            .map(|i| {
                if i % w < w / 2 {
                    0.0
                } else {
                    1.0 + rng.random_range(-0.5f32..0.5)
                }
            })
            .collect();
        let labels: Vec<u8> = (0..h * w).map(|i| (i % w >= w / 2) as u8).collect();
        SampleRecord::new(
            format!("t{seed}"),
            Tensor::from_vec(&[1, h, w], img).unwrap(),
            LabelMap::new(h, w, labels).unwrap(),
            Mask::full(h, w).unwrap(),
        )
        .unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig {
            network: NetworkConfig {
                kernels_per_layer: 4,
                num_dilated_layers: 2,
                head_widths: vec![8],
                num_classes: 2,
                dropout_rate: 0.0,
                ..NetworkConfig::default()
            },
            folds: 2,
            seed: 5,
            ..RunConfig::default()
        };
        cfg.train.optimizer.learning_rate = 1e-2;
        cfg.train.max_epochs = 3;
        cfg
    }

    #[test]
    fn empty_epoch_is_a_no_op() {
        let cfg = tiny_cfg();
        let mut net = Network::build(&cfg.network, 0).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(net.params().into_iter().map(|(_, t)| t), cfg.train.optimizer);
        let stats = train_epoch(
            &mut net,
            &[],
            &ClassWeights::uniform(2),
            &cfg.loss,
            &mut opt,
            &mut TrainRngs::new(0),
            true,
            0,
        )
        .unwrap();
        assert_eq!(stats, EpochStats::default());
        assert_eq!(net, before);
    }

    #[test]
    fn empty_roi_is_skipped_with_a_warning() {
        let cfg = tiny_cfg();
        let mut net = Network::build(&cfg.network, 0).unwrap();
        let mut opt = OptimizerState::new(net.params().into_iter().map(|(_, t)| t), cfg.train.optimizer);
        let mut r = toy(1);
        r.labels = LabelMap::filled(12, 12, crate::tensor::UNLABELED).unwrap();
        r.roi = Mask::new(12, 12, vec![false; 144]).unwrap();
        let stats = train_epoch(
            &mut net,
            &[&r, &toy(2)],
            &ClassWeights::uniform(2),
            &cfg.loss,
            &mut opt,
            &mut TrainRngs::new(0),
            true,
            0,
        )
        .unwrap();
        assert_eq!((stats.steps, stats.skipped), (1, 1));
        assert!(stats.warnings[0].contains("empty roi"));
    }

    #[test]
    fn training_loss_falls_on_a_separable_toy() {
        let cfg = tiny_cfg();
        let recs: Vec<SampleRecord> = (0..30).map(toy).collect();
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let mut net = Network::build(&cfg.network, 1).unwrap();
        let mut opt = OptimizerState::new(net.params().into_iter().map(|(_, t)| t), cfg.train.optimizer);
        let stats = train_epoch(
            &mut net,
            &refs,
            &ClassWeights::uniform(2),
            &cfg.loss,
            &mut opt,
            &mut TrainRngs::new(1),
            true,
            0,
        )
        .unwrap();
        let third = stats.losses.len() / 3;
        let head: f64 = stats.losses[..third].iter().sum::<f64>() / third as f64;
        let tail: f64 = stats.losses[2 * third..].iter().sum::<f64>() / (stats.losses.len() - 2 * third) as f64;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn fold_index_checked_and_absent_class_has_zero_weight() {
        let cfg = tiny_cfg();
        let recs: Vec<SampleRecord> = (0..4).map(toy).collect();
        let mut log = RunLog::in_memory();
        assert!(matches!(
            run_fold(&recs, &[0, 0, 1, 1], 2, &cfg, None, &mut log),
            Err(Error::InvalidParameter(_))
        ));
        // Training records only know class 0; class 1 must drop out of BACC.
        let mut only0 = recs.clone();
        for r in &mut only0[..2] {
            for l in r.labels.data.iter_mut() {
                if *l == 1 {
                    *l = crate::tensor::UNLABELED;
                }
            }
        }
        let mut c = cfg.clone();
        c.train.max_epochs = 1;
        let o = run_fold(&only0, &[0, 0, 1, 1], 1, &c, None, &mut log).unwrap();
        assert_eq!(o.best_report.bacc, o.best_report.per_class_acc[0].unwrap());
    }

    #[test]
    fn cv_mean_matches_fold_reports() {
        let mut cfg = tiny_cfg();
        cfg.train.max_epochs = 1;
        cfg.split_stale_iters = 20;
        let recs: Vec<SampleRecord> = (0..6).map(toy).collect();
        let r = run_cv(&recs, &cfg, None, &mut RunLog::in_memory()).unwrap();
        let mean = r.folds.iter().map(|f| f.report.bacc).sum::<f64>() / 2.0;
        assert!((mean - r.mean_bacc).abs() < 1e-9);
        assert_eq!(r.split.fold_of_case.len(), 6);
    }
}
