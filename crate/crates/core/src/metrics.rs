//! Reconstruction quality metrics, paired t-tests and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayBase, Data, Dimension};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::kspace::{apply_mask, zero_filled_recon, ComplexKSpace, MagnitudeImage, SamplingMask};
use crate::synthdata::Volume;

fn check_shapes<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

fn rmse<S1, S2, D>(pred: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let sse: f64 = pred.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (sse / pred.len() as f64).sqrt()
}

/// `(min, max)` of the reference.
fn extent<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Root-mean-square error divided by the range of the reference.
pub fn nrmse<S1, S2, D>(pred: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(pred, reference)?;
    let (lo, hi) = extent(reference.iter());
    if !(hi > lo) {
        return Err(Error::DegenerateReference("reference has zero range".into()));
    }
    Ok(rmse(pred, reference) / (hi - lo))
}

/// Peak signal-to-noise ratio in dB, peak taken from the reference.
pub fn psnr<S1, S2, D>(pred: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_shapes(pred, reference)?;
    let (lo, peak) = extent(reference.iter());
    if !(peak > 0.0) {
        return Err(Error::DegenerateReference("reference peak is not positive".into()));
    }
    let e = rmse(pred, reference);
    if e == 0.0 {
        return Err(Error::InfinitePsnr);
    }
    // Route through NRMSE so PSNR = 20·log10(max / (NRMSE·range)) holds bit for bit.
    let e = if peak > lo { e / (peak - lo) * (peak - lo) } else { e };
    Ok(20.0 * (peak / e).log10())
}

/// SSIM window and stabilizer constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimOptions {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Sums over every `window`-wide run along both axes (valid positions only).
fn box_sums(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            rows[[y, ox]] = (ox..ox + window).map(|xx| x[[y, xx]]).sum();
        }
    }
    Array2::from_shape_fn((oh, ow), |(oy, ox)| (oy..oy + window).map(|yy| rows[[yy, ox]]).sum())
}

/// Mean structural similarity over all `window × window` positions, using
/// uniform weights and population statistics per window.
pub fn ssim(pred: &Array2<f64>, reference: &Array2<f64>, dynamic_range: f64, options: &SsimOptions) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (h, w) = reference.dim();
    let win = options.window;
    if win == 0 || win > h || win > w {
        return Err(Error::Config(format!("SSIM window {win} does not fit a {h}x{w} image")));
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::InvalidInput(format!("dynamic range must be > 0, got {dynamic_range}")));
    }
    let c1 = (options.k1 * dynamic_range).powi(2);
    let c2 = (options.k2 * dynamic_range).powi(2);
    let n = (win * win) as f64;
    let sa = box_sums(pred, win);
    let sb = box_sums(reference, win);
    let saa = box_sums(&(pred * pred), win);
    let sbb = box_sums(&(reference * reference), win);
    let sab = box_sums(&(pred * reference), win);
    let mut total = 0.0;
    for i in 0..sa.len() {
        let (ma, mb) = (sa.as_slice().unwrap()[i] / n, sb.as_slice().unwrap()[i] / n);
        let va = saa.as_slice().unwrap()[i] / n - ma * ma;
        let vb = sbb.as_slice().unwrap()[i] / n - mb * mb;
        let cov = sab.as_slice().unwrap()[i] / n - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok((total / sa.len() as f64).clamp(-1.0, 1.0))
}

/// SSIM with the dynamic range taken from the reference.
pub fn ssim_default(pred: &Array2<f64>, reference: &Array2<f64>, options: &SsimOptions) -> Result<f64> {
    let (lo, hi) = extent(reference.iter());
    // constant references fall back to unit range
    let range = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    ssim(pred, reference, range, options)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
    pub mean_difference: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        return Err(Error::DegenerateTest("differences have zero variance".into()));
    }
    let df = (n - 1) as f64;
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult {
        t,
        p,
        df,
        mean_difference: mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject_id: String,
    pub slice_index: usize,
    pub nrmse: f64,
    pub ssim: f64,
    /// `f64::INFINITY` when the reconstruction equals the reference.
    pub psnr: f64,
}

/// Metrics of one slice against its fully sampled reference.
pub fn slice_metrics(
    subject_id: &str,
    slice_index: usize,
    recon: &MagnitudeImage,
    reference: &MagnitudeImage,
    options: &SsimOptions,
) -> Result<SliceMetrics> {
    let (p, r) = (recon.data(), reference.data());
    let psnr = match psnr(p, r) {
        Err(Error::InfinitePsnr) => f64::INFINITY,
        other => other?,
    };
    Ok(SliceMetrics {
        subject_id: subject_id.to_string(),
        slice_index,
        nrmse: nrmse(p, r)?,
        ssim: ssim_default(p, r, options)?,
        psnr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    /// `None` if any value is non-finite (infinite PSNR).
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MeanStd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return MeanStd { mean: None, std: None };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub acceleration: f64,
    /// `"slice"` or `"volume"`: whether each averaged sample is a slice or
    /// the mean over a subject's slices.
    pub level: String,
    pub count: usize,
    pub ssim: MeanStd,
    pub nrmse_percent: MeanStd,
    pub psnr: MeanStd,
}

/// Per-slice results of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub model: String,
    pub acceleration: f64,
    pub slices: Vec<SliceMetrics>,
}

impl MethodReport {
    pub fn nrmse_values(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.nrmse).collect()
    }

    pub fn mean_nrmse(&self) -> f64 {
        self.nrmse_values().iter().sum::<f64>() / self.slices.len() as f64
    }

    /// Mean NRMSE per slice index across subjects.
    pub fn nrmse_curve(&self) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.slices {
            let e = acc.entry(s.slice_index).or_insert((0.0, 0));
            e.0 += s.nrmse;
            e.1 += 1;
        }
        let len = acc.keys().next_back().map_or(0, |k| k + 1);
        let mut curve = vec![f64::NAN; len];
        for (k, (sum, n)) in acc {
            curve[k] = sum / n as f64;
        }
        curve
    }

    fn aggregate(&self, level: &str, rows: &[(f64, f64, f64)]) -> AggregateRow {
        let col = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        AggregateRow {
            model: self.model.clone(),
            acceleration: self.acceleration,
            level: level.into(),
            count: rows.len(),
            ssim: MeanStd::of(&col(|r| r.0)),
            nrmse_percent: MeanStd::of(&col(|r| 100.0 * r.1)),
            psnr: MeanStd::of(&col(|r| r.2)),
        }
    }

    /// Table rows at slice level and at volume level.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let per_slice: Vec<_> = self.slices.iter().map(|s| (s.ssim, s.nrmse, s.psnr)).collect();
        let mut groups: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for s in &self.slices {
            groups.entry(&s.subject_id).or_default().push((s.ssim, s.nrmse, s.psnr));
        }
        let per_volume: Vec<_> = groups
            .values()
            .map(|v| {
                let n = v.len() as f64;
                (
                    v.iter().map(|r| r.0).sum::<f64>() / n,
                    v.iter().map(|r| r.1).sum::<f64>() / n,
                    v.iter().map(|r| r.2).sum::<f64>() / n,
                )
            })
            .collect();
        vec![self.aggregate("slice", &per_slice), self.aggregate("volume", &per_volume)]
    }
}

/// Per-slice metrics for every evaluated method plus their summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
}

fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "nan".into()
    }
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.model == name)
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        self.methods.iter().flat_map(MethodReport::aggregates).collect()
    }

    /// One row per slice per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,acceleration,subject_id,slice_index,ssim,nrmse,psnr\n");
        for m in &self.methods {
            for s in &m.slices {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    m.model,
                    m.acceleration,
                    s.subject_id,
                    s.slice_index,
                    fmt_float(s.ssim),
                    fmt_float(s.nrmse),
                    fmt_float(s.psnr)
                )
                .unwrap();
            }
        }
        out
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(&self.aggregates()).expect("aggregates serialize")
    }
}

/// A named reconstruction method under evaluation.
pub struct Method<'a> {
    pub name: String,
    pub recon: Box<dyn Fn(&ComplexKSpace) -> Result<MagnitudeImage> + Sync + 'a>,
}

impl<'a> Method<'a> {
    pub fn new(name: impl Into<String>, recon: impl Fn(&ComplexKSpace) -> Result<MagnitudeImage> + Sync + 'a) -> Self {
        Method {
            name: name.into(),
            recon: Box::new(recon),
        }
    }

    pub fn zero_filled() -> Self {
        Method::new("zero-filled", zero_filled_recon)
    }
}

/// Undersamples every slice with `mask`, reconstructs it with each method
/// and scores it against the magnitude of the fully sampled slice.
pub fn evaluate(
    methods: &[Method<'_>],
    volumes: &[Volume],
    mask: &SamplingMask,
    options: &SsimOptions,
) -> Result<EvalReport> {
    let jobs: Vec<(&Volume, usize)> = volumes
        .iter()
        .flat_map(|v| (0..v.slices().len()).map(move |i| (v, i)))
        .collect();
    let per_slice: Vec<Vec<SliceMetrics>> = jobs
        .par_iter()
        .map(|(v, i)| {
            let full = &v.slices()[*i];
            let reference = zero_filled_recon(full)?;
            let undersampled = apply_mask(full, mask)?;
            methods
                .iter()
                .map(|m| {
                    let recon = (m.recon)(&undersampled)?;
                    if recon.shape() != reference.shape() {
                        return Err(Error::InvalidInput(format!(
                            "{} produced shape {:?}, reference is {:?}",
                            m.name,
                            recon.shape(),
                            reference.shape()
                        )));
                    }
                    slice_metrics(&v.subject_id, *i, &recon, &reference, options)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let methods = methods
        .iter()
        .enumerate()
        .map(|(k, m)| MethodReport {
            model: m.name.clone(),
            acceleration: mask.acceleration,
            slices: per_slice.iter().map(|row| row[k].clone()).collect(),
        })
        .collect();
    Ok(EvalReport { methods })
}

/// Whether the maximum of `curve` sits in the first or last `fraction` of
/// its indices (at least one index on each side).
pub fn peak_at_edges(curve: &[f64], fraction: f64) -> bool {
    if curve.is_empty() {
        return false;
    }
    let n = curve.len();
    let edge = ((fraction * n as f64).ceil() as usize).max(1);
    let argmax = curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    argmax < edge || argmax >= n - edge
}
