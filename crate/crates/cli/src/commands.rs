use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use dfcn::data::{
    crop_lungs, hill_climb_split, read_pgm, synth_suite, DatasetManifest, Provenance,
    SampleRecord, SplitAssignment, SynthConfig, DEFAULT_CLASSES,
};
use dfcn::gradcheck::{run_suite, small_config};
use dfcn::model::{
    ablation_grid, argmax_labels, load_checkpoint, param_count_closed_form, read_checkpoint_info,
    receptive_field, sampling_coverage, Layer,
};
use dfcn::rng::{stream, Stream};
use dfcn::tensor::{read_tensor_file, write_label_file, write_tensor_file};
use dfcn::train::{
    config_hash, fold_of_records, run_alpha_sweep, run_cv, run_fold, write_curves_csv, RunConfig,
    RunLog,
};
use dfcn::{Error, EvalReport, Network, NetworkConfig, Tensor};

use crate::error::{CliError, CliResult};
use crate::overlay::{encode_ppm, overlay_rgb};
use crate::{
    CvArgs, GradcheckArgs, ImportArgs, InspectArgs, PredictArgs, SplitArgs, SynthArgs, TrainArgs,
};

/// What `dfcn split` writes and `dfcn train --split` reads.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub seed: u64,
    pub config_hash: String,
    pub max_stale_iters: usize,
    pub split: SplitAssignment,
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    seed: u64,
    config_hash: String,
    fold: usize,
    train_cases: usize,
    held_out_cases: usize,
    best_epoch: Option<usize>,
    epochs_run: usize,
    initial: &'a EvalReport,
    best: &'a EvalReport,
    last: &'a EvalReport,
    warnings: &'a [String],
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// A fresh log file; an older one from a previous run is replaced.
fn fresh_log(path: PathBuf) -> CliResult<RunLog> {
    match fs::remove_file(&path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_error(&path, e)),
    }
    Ok(RunLog::to_file(path))
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> CliResult<Vec<SampleRecord>> {
    let manifest = DatasetManifest::load(path)?;
    if manifest.num_classes() != cfg.network.num_classes {
        return Err(Error::ConfigMismatch(format!(
            "manifest has {} classes, network.num_classes is {}",
            manifest.num_classes(),
            cfg.network.num_classes
        ))
        .into());
    }
    Ok(manifest.load_all()?)
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let records = load_dataset(&a.manifest, &cfg)?;
    let split = match &a.split {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            let f: SplitFile = serde_json::from_str(&text).map_err(Error::from)?;
            if f.split.folds != cfg.folds {
                return Err(Error::ConfigMismatch(format!(
                    "split has {} folds, config has {}",
                    f.split.folds, cfg.folds
                ))
                .into());
            }
            f.split
        }
        None => {
            let c = cfg.network.num_classes;
            let ids: Vec<String> = records.iter().map(|r| r.case_id.clone()).collect();
            let counts = records
                .iter()
                .map(|r| r.class_counts(c))
                .collect::<dfcn::Result<Vec<_>>>()?;
            dfcn::data::hill_climb_split_counts(
                &ids,
                &counts,
                cfg.folds,
                cfg.split_stale_iters,
                &mut stream(cfg.seed, Stream::Split),
            )?
        }
    };
    let fold_of = fold_of_records(&records, &split)?;
    create_dir(&a.out)?;
    let mut log = fresh_log(a.out.join("runlog.jsonl"))?;
    let o = run_fold(&records, &fold_of, a.fold, &cfg, Some(&a.out), &mut log)?;
    let held = fold_of.iter().filter(|&&f| f == a.fold).count();
    write_json(
        &a.out.join("report.json"),
        &TrainReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            fold: a.fold,
            train_cases: records.len() - held,
            held_out_cases: held,
            best_epoch: o.best_epoch,
            epochs_run: o.epochs_run,
            initial: &o.initial_report,
            best: &o.best_report,
            last: &o.last_report,
            warnings: &o.warnings,
        },
    )?;
    for w in &o.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "fold {}: {} epochs, best held-out BACC {:.4} at epoch {}",
        a.fold,
        o.epochs_run,
        o.best_report.bacc,
        o.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

pub fn cv(a: CvArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let records = load_dataset(&a.manifest, &cfg)?;
    create_dir(&a.out)?;
    match &a.sweep_alpha {
        Some(alphas) => {
            if alphas.is_empty() {
                return Err(CliError::Usage("--sweep-alpha needs at least one value".into()));
            }
            let (reports, curves) = run_alpha_sweep(&records, &cfg, alphas, Some(&a.out))?;
            write_json(&a.out.join("sweep.json"), &reports)?;
            write_curves_csv(a.out.join("curves.csv"), &curves)?;
            for r in &reports {
                println!("alpha {}: mean BACC {:.4}, pooled BACC {:.4}", r.alpha, r.mean_bacc, r.pooled_bacc);
            }
        }
        None => {
            let mut log = fresh_log(a.out.join("runlog.jsonl"))?;
            let r = run_cv(&records, &cfg, Some(&a.out), &mut log)?;
            write_json(&a.out.join("cv_report.json"), &r)?;
            for f in &r.folds {
                println!("fold {}: BACC {:.4}", f.fold, f.report.bacc);
            }
            println!("mean BACC {:.4}, pooled BACC {:.4}", r.mean_bacc, r.pooled_bacc);
        }
    }
    Ok(())
}

fn read_image(path: &Path) -> CliResult<Tensor> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    Ok(if is_pgm {
        read_pgm(path)?.to_tensor()?
    } else {
        read_tensor_file(path)?
    })
}

pub fn predict(a: PredictArgs) -> CliResult {
    let info = read_checkpoint_info(&a.checkpoint)?;
    let net = load_checkpoint(&a.checkpoint)?;
    let image = read_image(&a.image)?;
    let probs = net.predict_probs(&image)?;
    probs.check_finite("class probabilities")?;
    let labels = argmax_labels(&probs);
    create_dir(&a.out)?;
    write_label_file(&labels, a.out.join("labels.tsr"))?;
    write_tensor_file(&probs, a.out.join("probs.tsr"))?;

    let hash = info.config_hash.clone().unwrap_or_else(|| config_hash(&info.config));
    let comments = [format!("dfcn seed={} config_hash={hash}", info.seed)];
    let ppm = encode_ppm(labels.height, labels.width, &overlay_rgb(&image, &labels), &comments);
    let path = a.out.join("overlay.ppm");
    fs::write(&path, ppm).map_err(|e| io_error(&path, e))?;

    let c = net.config.num_classes;
    let mut fractions = vec![0.0; c];
    for &l in &labels.data {
        fractions[l as usize] += 1.0 / labels.data.len() as f64;
    }
    write_json(
        &a.out.join("predict.json"),
        &json!({
            "seed": info.seed,
            "config_hash": hash,
            "checkpoint": a.checkpoint,
            "image": a.image,
            "height": labels.height,
            "width": labels.width,
            "class_fractions": fractions,
        }),
    )?;
    println!("{}×{} prediction written to {}", labels.height, labels.width, a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> CliResult {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let s = hill_climb_split(&manifest, a.folds, a.iters, &mut stream(a.seed, Stream::Split))?;
    let file = SplitFile {
        seed: a.seed,
        config_hash: config_hash(&json!({ "folds": a.folds, "max_stale_iters": a.iters })),
        max_stale_iters: a.iters,
        split: s,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &file)?;
    let sizes: Vec<usize> = (0..a.folds).map(|f| file.split.cases_in(f).len()).collect();
    println!(
        "{} folds, sizes {sizes:?}, mean entropy {:.6} after {} accepted swaps",
        a.folds,
        file.split.mean_entropy,
        file.split.accepted_scores.len().saturating_sub(1)
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        height: a.size,
        width: a.size,
        unlabeled_fraction: a.unlabeled_fraction,
        ..SynthConfig::default()
    };
    let records = synth_suite(&cfg, a.seed, a.count)?;
    let classes: Vec<String> = DEFAULT_CLASSES[..a.classes.min(DEFAULT_CLASSES.len())]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let provenance = Provenance {
        seed: a.seed,
        config_hash: config_hash(&json!({ "synth": cfg, "count": a.count })),
    };
    DatasetManifest::write_dataset(&a.out, &classes, &records, Some(provenance))?;
    println!("{} mosaics written to {}", records.len(), a.out.display());
    Ok(())
}

fn layer_params(l: &Layer) -> usize {
    l.conv.weight.len() + l.conv.bias.len() + l.norm.as_ref().map_or(0, |n| 2 * n.channels())
}

fn print_layers(net: &Network) {
    println!("{:<12} {:>6} {:>6} {:>6} {:>5} {:>9}", "layer", "kernel", "in", "out", "dil", "params");
    if let Some(n) = &net.input_norm {
        println!("{:<12} {:>6} {:>6} {:>6} {:>5} {:>9}", "input_norm", "-", n.channels(), n.channels(), "-", 2 * n.channels());
    }
    let rows = net
        .dilated
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("dilated_{i}"), l))
        .chain(net.head.iter().enumerate().map(|(i, l)| (format!("head_{i}"), l)));
    for (name, l) in rows {
        let k = l.conv.kernel_size();
        println!(
            "{:<12} {:>6} {:>6} {:>6} {:>5} {:>9}",
            name,
            format!("{k}x{k}"),
            l.conv.in_channels(),
            l.conv.out_channels(),
            l.conv.dilation,
            layer_params(l)
        );
    }
}

fn inspect_one(cfg: &NetworkConfig) -> CliResult {
    let net = Network::build(cfg, 0)?;
    print_layers(&net);
    println!("parameters: {} (closed form {})", net.param_count(), param_count_closed_form(cfg));
    println!("dilations: {:?}", cfg.dilations());
    println!("receptive field: {}", receptive_field(cfg));
    println!("{:>6} {:>5} {:>5} {:>9} {:>8} {:>8}", "layers", "dil", "rf", "offsets", "density", "path_cv");
    for p in &sampling_coverage(cfg).prefixes {
        println!(
            "{:>6} {:>5} {:>5} {:>9} {:>8.4} {:>8.3}",
            p.layers, p.dilation, p.receptive_field, p.offsets, p.density, p.path_cv
        );
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    if !a.table2 {
        return inspect_one(&cfg.network);
    }
    println!(
        "{:<26} {:>10} {:>10} {:>8} {:>5} {:>6}",
        "configuration", "params", "published", "dev %", "rf", "alpha"
    );
    for row in ablation_grid() {
        let n = param_count_closed_form(&row.config);
        let published = row.published_params_e5 * 1e5;
        println!(
            "{:<26} {:>10} {:>10.0} {:>+8.2} {:>5} {:>6}",
            row.name,
            n,
            published,
            (n as f64 - published) / published * 100.0,
            receptive_field(&row.config),
            row.alpha
        );
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let net_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.network,
        None => small_config(),
    };
    let report = run_suite(&net_cfg, a.seed)?;
    for r in &report.results {
        let mark = if r.max_rel_error <= report.tolerance && r.checked > 0 { "ok  " } else { "FAIL" };
        println!(
            "{mark} {:<36} max rel err {:.3e}  ({} checked, {} kinks skipped)",
            r.name, r.max_rel_error, r.checked, r.skipped_kinks
        );
    }
    let worst = report.worst().map_or(0.0, |r| r.max_rel_error);
    if report.passed() {
        println!("all {} checks within {:.0e} (worst {worst:.3e})", report.results.len(), report.tolerance);
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds {:.0e}",
            report.tolerance
        )))
    }
}

pub fn import(a: ImportArgs) -> CliResult {
    let text = fs::read_to_string(&a.list).map_err(|e| io_error(&a.list, e))?;
    let base = a.list.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut dropped = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, image, labels, mask] = cols[..] else {
            return Err(Error::Format(format!(
                "{}:{}: expected 4 columns case_id,image,labels,mask",
                a.list.display(),
                n + 1
            ))
            .into());
        };
        let image = read_pgm(base.join(image))?.to_tensor()?;
        let labels = read_pgm(base.join(labels))?.to_labels()?;
        let mask = read_pgm(base.join(mask))?.to_mask()?;
        for crop in crop_lungs(id, &image, &labels, &mask, true)? {
            if crop.annotated || a.keep_unannotated {
                records.push(crop.record);
            } else {
                dropped += 1;
            }
        }
    }
    let classes: Vec<String> = DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect();
    DatasetManifest::write_dataset(&a.out, &classes, &records, None)?;
    println!(
        "{} crops written to {} ({dropped} without annotation dropped)",
        records.len(),
        a.out.display()
    );
    Ok(())
}
