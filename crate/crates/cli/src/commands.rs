use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use dualdomain::container;
use dualdomain::kspace::{apply_mask, make_gaussian_mask, zero_filled_recon, SamplingMask};
use dualdomain::metrics::{evaluate, paired_t_test, EvalReport, Method, TTestResult};
use dualdomain::synthdata::{build_dataset, load_mask, load_volume, save_mask, Dataset, MANIFEST_FILE};
use dualdomain::training::{
    load_checkpoint, save_checkpoint, train_baseline, train_hybrid, Checkpoint, FitReport, TrainedModel,
};
use dualdomain::{Error, MagnitudeImage, Result};

use crate::config::ExperimentConfig;
use crate::plot;

/// Prints progress unless `--quiet`.
pub struct Reporter {
    pub quiet: bool,
}

impl Reporter {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn open_dataset(root: &Path) -> Result<Dataset> {
    if !root.join(MANIFEST_FILE).is_file() {
        return Err(Error::Config(format!(
            "no dataset at {} (missing {MANIFEST_FILE}); run generate-data first",
            root.display()
        )));
    }
    Dataset::open(root)
}

pub fn generate_data(config: &ExperimentConfig, out_dir: &Path, log: &Reporter) -> Result<()> {
    config.data.phantom.validate()?;
    let d = &config.data;
    create_dir(out_dir)?;
    let split = build_dataset(d.num_subjects, d.slices_per_subject, d.height, d.width, &d.phantom, d.split, out_dir)?;
    log.say(format!(
        "generated {} subjects x {} slices of {}x{} in {} (train {}, validation {}, test {})",
        d.num_subjects,
        d.slices_per_subject,
        d.height,
        d.width,
        out_dir.display(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    ));
    Ok(())
}

pub fn mask_file_name(acceleration: f64, seed: u64) -> String {
    format!("mask_r{acceleration}_s{seed}.cks")
}

pub fn make_masks(
    height: usize,
    width: usize,
    accelerations: &[f64],
    seeds: &[u64],
    center_fraction: f64,
    out_dir: &Path,
    log: &Reporter,
) -> Result<()> {
    // Validate every combination before writing anything.
    let masks = accelerations
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .map(|(r, s)| make_gaussian_mask(height, width, r, center_fraction, s))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    for mask in &masks {
        let path = out_dir.join(mask_file_name(mask.acceleration, mask.seed));
        save_mask(mask, &path)?;
        plot::mask_preview(mask.pattern(), &path.with_extension("png"))?;
        log.say(format!(
            "{}: R = {}, sampled fraction {:.4} ({} of {})",
            path.display(),
            mask.acceleration,
            mask.sampled_fraction(),
            mask.sampled_count(),
            height * width
        ));
    }
    Ok(())
}

fn hybrid_checkpoint_path(out: &Path) -> PathBuf {
    out.join("hybrid.cks")
}

fn baseline_checkpoint_path(out: &Path) -> PathBuf {
    out.join("baseline.cks")
}

pub fn train(config: &ExperimentConfig, data_root: &Path, out_dir: &Path, log: &Reporter) -> Result<()> {
    config.validate()?;
    let dataset = open_dataset(data_root)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("experiment.toml"), config.to_toml())?;

    let finish = |name: &str, checkpoint: &Checkpoint, report: &FitReport| -> Result<()> {
        let path = out_dir.join(format!("{name}.cks"));
        save_checkpoint(&path, checkpoint)?;
        write_file(&out_dir.join(format!("{name}_log.csv")), report.log_csv())?;
        log.say(format!(
            "{name}: best epoch {} of {}, validation NRMSE {:.4}%, sha256 {}",
            report.best_epoch,
            report.history.len(),
            100.0 * report.best_val_nrmse,
            sha256_hex(&path)?
        ));
        Ok(())
    };

    let started = Instant::now();
    let (checkpoint, report) = train_hybrid(&dataset, &config.freq_net, &config.image_net, &config.train)?;
    finish("hybrid", &checkpoint, &report)?;
    if config.train_baseline {
        let (checkpoint, report) = train_baseline(&dataset, &config.baseline_net, &config.train)?;
        finish("baseline", &checkpoint, &report)?;
    }
    log.say(format!("training took {:.1} s", started.elapsed().as_secs_f64()));
    Ok(())
}

fn model_recon(model: &TrainedModel, k: &dualdomain::ComplexKSpace) -> Result<MagnitudeImage> {
    match model {
        TrainedModel::Hybrid(m) => Ok(m.forward(k)?.image),
        TrainedModel::Baseline(m) => m.forward(k),
    }
}

#[derive(Serialize)]
struct EvalSummary {
    test_subjects: Vec<String>,
    acceleration: f64,
    aggregates: Vec<dualdomain::metrics::AggregateRow>,
    /// Paired t-test of per-slice NRMSE, model minus baseline.
    nrmse_t_test: Option<TTestResult>,
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub baseline: Option<PathBuf>,
    pub acceleration: Option<f64>,
    pub slice: Option<usize>,
    pub reference_mode: bool,
}

pub fn evaluate_cmd(
    config: &ExperimentConfig,
    args: &EvaluateArgs,
    data_root: &Path,
    out_dir: &Path,
    log: &Reporter,
) -> Result<()> {
    let dataset = open_dataset(data_root)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let baseline = args.baseline.as_deref().map(load_checkpoint).transpose()?;
    let test = dataset.load_all(&dataset.split().test)?;
    let first = test
        .first()
        .ok_or_else(|| Error::Config("dataset has no test subjects".into()))?;
    let (h, w) = first.shape();
    let tc = &checkpoint.train_config;
    let acceleration = args.acceleration.unwrap_or(tc.acceleration);

    let (mask, methods) = if args.reference_mode {
        let full = SamplingMask::from_pattern(Array2::ones((h, w)), 1.0, 1.0, 0)?;
        (full, vec![Method::new("reference", zero_filled_recon)])
    } else {
        let mask = make_gaussian_mask(h, w, acceleration, tc.center_fraction, tc.seed)?;
        let name = checkpoint.model.kind();
        let mut methods = vec![Method::zero_filled()];
        if let TrainedModel::Hybrid(m) = &checkpoint.model {
            methods.push(Method::new("hybrid-frequency-stage", move |k| Ok(m.forward(k)?.intermediate)));
        }
        methods.push(Method::new(name, |k| model_recon(&checkpoint.model, k)));
        if let Some(b) = &baseline {
            methods.push(Method::new("baseline", |k| model_recon(&b.model, k)));
        }
        (mask, methods)
    };
    let started = Instant::now();
    let report = evaluate(&methods, &test, &mask, &config.metrics)?;
    let primary = if args.reference_mode { "reference" } else { checkpoint.model.kind() };

    let nrmse_t_test = match (&baseline, args.reference_mode) {
        (Some(_), false) => {
            let a = report.method(primary).expect("model evaluated").nrmse_values();
            let b = report.method("baseline").expect("baseline evaluated").nrmse_values();
            match paired_t_test(&a, &b) {
                Ok(t) => Some(t),
                Err(Error::DegenerateTest(msg)) => {
                    log.say(format!("paired t-test not reported: {msg}"));
                    None
                }
                Err(e) => return Err(e),
            }
        }
        _ => None,
    };

    create_dir(out_dir)?;
    write_file(&out_dir.join("report.csv"), report.to_csv())?;
    let summary = EvalSummary {
        test_subjects: dataset.split().test.clone(),
        acceleration: mask.acceleration,
        aggregates: report.aggregates(),
        nrmse_t_test,
    };
    write_file(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&summary).expect("report serializes"),
    )?;
    write_curve(&report, out_dir)?;
    write_panel(&report, &methods, primary, first, args.slice, &mask, out_dir)?;

    for row in report.aggregates().iter().filter(|r| r.level == "slice") {
        log.say(format!(
            "{:<24} SSIM {:.4}  NRMSE {:.3}%  PSNR {:.2} dB  ({} slices)",
            row.model,
            row.ssim.mean.unwrap_or(f64::NAN),
            row.nrmse_percent.mean.unwrap_or(f64::NAN),
            row.psnr.mean.unwrap_or(f64::NAN),
            row.count
        ));
    }
    if let Some(t) = &summary.nrmse_t_test {
        log.say(format!("paired t-test on NRMSE vs baseline: t = {:.3}, p = {:.3e}", t.t, t.p));
    }
    log.say(format!("evaluated in {:.1} s; outputs in {}", started.elapsed().as_secs_f64(), out_dir.display()));
    Ok(())
}

fn write_curve(report: &EvalReport, out_dir: &Path) -> Result<()> {
    let curves: Vec<(String, Vec<f64>)> = report
        .methods
        .iter()
        .map(|m| (m.model.clone(), m.nrmse_curve()))
        .collect();
    let mut csv = String::from("slice_index");
    for (name, _) in &curves {
        csv.push_str(&format!(",{name}"));
    }
    csv.push('\n');
    let n = curves.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for i in 0..n {
        csv.push_str(&i.to_string());
        for (_, c) in &curves {
            csv.push_str(&format!(",{}", c.get(i).copied().unwrap_or(f64::NAN)));
        }
        csv.push('\n');
    }
    write_file(&out_dir.join("nrmse_curve.csv"), csv)?;
    let series: Vec<&[f64]> = curves.iter().map(|c| c.1.as_slice()).collect();
    plot::line_plot(&series, &out_dir.join("nrmse_curve.png"))
}

fn write_panel(
    report: &EvalReport,
    methods: &[Method<'_>],
    primary: &str,
    volume: &dualdomain::synthdata::Volume,
    slice: Option<usize>,
    mask: &SamplingMask,
    out_dir: &Path,
) -> Result<()> {
    let n = volume.slices().len();
    let index = slice.unwrap_or(n / 2);
    let full = volume
        .slices()
        .get(index)
        .ok_or_else(|| Error::Config(format!("slice {index} out of range (volume has {n})")))?;
    let undersampled = apply_mask(full, mask)?;
    let reference = zero_filled_recon(full)?;
    let zero_filled = zero_filled_recon(&undersampled)?;
    let method = methods
        .iter()
        .find(|m| m.name == primary)
        .expect("primary method present");
    debug_assert!(report.method(primary).is_some());
    let recon = (method.recon)(&undersampled)?;
    let (r, z, p) = (reference.data(), zero_filled.data(), recon.data());

    let mut csv = String::from("row,col,zero_filled,reconstruction,reference\n");
    for ((y, x), v) in r.indexed_iter() {
        csv.push_str(&format!("{y},{x},{},{},{v}\n", z[[y, x]], p[[y, x]]));
    }
    write_file(&out_dir.join("panel.csv"), csv)?;
    let white = r.iter().copied().fold(0.0, f64::max);
    plot::image_panel(&[z, p, r], white, 4, &out_dir.join("panel.png"))
}

#[derive(Serialize)]
struct MagnitudeHeader {
    format_version: u32,
    kind: String,
    dtype: String,
    shape: [usize; 3],
    subject_id: String,
}

/// Reconstructs every slice of a (possibly already undersampled) volume and
/// writes the magnitude volume as float64 in a CKS1 container.
pub fn reconstruct(
    checkpoint: &Path,
    input: &Path,
    mask: Option<&Path>,
    output: &Path,
    log: &Reporter,
) -> Result<()> {
    let checkpoint = load_checkpoint(checkpoint)?;
    let volume = load_volume(input)?;
    let mask = mask.map(load_mask).transpose()?;
    let started = Instant::now();
    let images = volume
        .slices()
        .iter()
        .map(|k| {
            let k = match &mask {
                Some(m) => apply_mask(k, m)?,
                None => k.clone(),
            };
            model_recon(&checkpoint.model, &k)
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed = started.elapsed().as_secs_f64();
    let (h, w) = volume.shape();
    let header = MagnitudeHeader {
        format_version: container::FORMAT_VERSION,
        kind: "magnitude-volume".into(),
        dtype: "float64-le".into(),
        shape: [images.len(), h, w],
        subject_id: volume.subject_id.clone(),
    };
    let payload: Vec<u8> = images
        .iter()
        .flat_map(|im| im.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .collect();
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    container::write(output, &header, &payload)?;
    log.say(format!(
        "reconstructed {} slices of {}x{} in {:.3} s -> {}",
        images.len(),
        h,
        w,
        elapsed,
        output.display()
    ));
    Ok(())
}

pub fn default_checkpoint(out_dir: &Path) -> PathBuf {
    hybrid_checkpoint_path(out_dir)
}

pub fn default_baseline(out_dir: &Path) -> Option<PathBuf> {
    Some(baseline_checkpoint_path(out_dir)).filter(|p| p.is_file())
}
