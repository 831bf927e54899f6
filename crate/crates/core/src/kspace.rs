//! Complex k-space grids, centered orthonormal Fourier transforms,
//! Gaussian undersampling masks and the scalar normalizers used on both
//! sides of the magnitude-iDFT bridge.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array, Array2, Array3, Axis, Dimension, Zip};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spread of the Gaussian sampling density, as a fraction of the shorter
/// grid side.
pub const MASK_SIGMA_FRACTION: f64 = 0.15;

/// Default side fraction of the fully sampled k-space center.
pub const DEFAULT_CENTER_FRACTION: f64 = 0.08;

fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a Complex64>, what: &str) -> Result<()> {
    if values.into_iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

/// One slice of complex frequency samples, zero frequency at the grid center.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexKSpace {
    data: Array2<Complex64>,
}

impl ComplexKSpace {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("k-space grid is empty".into()));
        }
        ensure_finite(data.iter(), "k-space")?;
        Ok(ComplexKSpace { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexKSpace {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Split into a `(2, height, width)` real array: channel 0 holds the
    /// real parts, channel 1 the imaginary parts.
    pub fn to_channels(&self) -> Array3<f64> {
        complex_to_channels(&self.data)
    }

    pub fn from_channels(channels: &Array3<f64>) -> Result<Self> {
        ComplexKSpace::new(channels_to_complex(channels)?)
    }
}

pub fn complex_to_channels(data: &Array2<Complex64>) -> Array3<f64> {
    let (h, w) = data.dim();
    let mut out = Array3::zeros((2, h, w));
    for ((y, x), z) in data.indexed_iter() {
        out[[0, y, x]] = z.re;
        out[[1, y, x]] = z.im;
    }
    out
}

pub fn channels_to_complex(channels: &Array3<f64>) -> Result<Array2<Complex64>> {
    let (c, h, w) = channels.dim();
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 channels, got {c}")));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        Complex64::new(channels[[0, y, x]], channels[[1, y, x]])
    }))
}

/// A non-negative real image.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeImage {
    data: Array2<f64>,
}

impl MagnitudeImage {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "magnitude image must be finite and non-negative, found {v}"
            )));
        }
        Ok(MagnitudeImage { data })
    }

    /// Clamps negative values to zero.
    pub fn from_clamped(mut data: Array2<f64>) -> Result<Self> {
        data.mapv_inplace(|v| v.max(0.0));
        MagnitudeImage::new(data)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// Moves index 0 to the center (`n / 2`).
fn fftshift_axis(data: &mut Array2<Complex64>, axis: usize) {
    let n = data.len_of(Axis(axis));
    let shift = n / 2;
    if shift == 0 {
        return;
    }
    for mut lane in data.lanes_mut(Axis(axis)) {
        let v: Vec<Complex64> = lane.iter().copied().collect();
        for (i, z) in v.into_iter().enumerate() {
            lane[(i + shift) % n] = z;
        }
    }
}

/// Inverse of [`fftshift_axis`].
fn ifftshift_axis(data: &mut Array2<Complex64>, axis: usize) {
    let n = data.len_of(Axis(axis));
    let shift = n / 2;
    if shift == 0 {
        return;
    }
    for mut lane in data.lanes_mut(Axis(axis)) {
        let v: Vec<Complex64> = lane.iter().copied().collect();
        for i in 0..n {
            lane[i] = v[(i + shift) % n];
        }
    }
}

/// Unnormalized 2D FFT in place, rows then columns.
fn fft2_inplace(data: &mut Array2<Complex64>, direction: FftDirection) {
    let (h, w) = data.dim();
    let row_fft = plan(w, direction);
    let col_fft = plan(h, direction);
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in data.rows_mut() {
        let b = &mut buf[..w];
        b.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
        row_fft.process(b);
        row.iter_mut().zip(b.iter()).for_each(|(d, s)| *d = *s);
    }
    for mut col in data.columns_mut() {
        let b = &mut buf[..h];
        b.iter_mut().zip(col.iter()).for_each(|(d, s)| *d = *s);
        col_fft.process(b);
        col.iter_mut().zip(b.iter()).for_each(|(d, s)| *d = *s);
    }
}

fn centered_transform(input: &Array2<Complex64>, direction: FftDirection) -> Array2<Complex64> {
    let mut data = input.to_owned();
    ifftshift_axis(&mut data, 0);
    ifftshift_axis(&mut data, 1);
    fft2_inplace(&mut data, direction);
    fftshift_axis(&mut data, 0);
    fftshift_axis(&mut data, 1);
    let scale = 1.0 / (data.len() as f64).sqrt();
    data.mapv_inplace(|z| z * scale);
    data
}

/// Centered forward transform without the finiteness check, for hot loops
/// whose inputs are already validated.
pub(crate) fn fft2c_unchecked(image: &Array2<Complex64>) -> Array2<Complex64> {
    centered_transform(image, FftDirection::Forward)
}

pub(crate) fn ifft2c_unchecked(kspace: &Array2<Complex64>) -> Array2<Complex64> {
    centered_transform(kspace, FftDirection::Inverse)
}

/// Centered, orthonormal 2D DFT: zero frequency lands at `(h / 2, w / 2)`.
pub fn fft2c(image: &Array2<Complex64>) -> Result<ComplexKSpace> {
    ensure_finite(image.iter(), "image")?;
    ComplexKSpace::new(fft2c_unchecked(image))
}

/// Inverse of [`fft2c`].
pub fn ifft2c(kspace: &ComplexKSpace) -> Result<Array2<Complex64>> {
    Ok(ifft2c_unchecked(kspace.data()))
}

pub fn magnitude(x: &Array2<Complex64>) -> Result<MagnitudeImage> {
    ensure_finite(x.iter(), "complex grid")?;
    MagnitudeImage::new(x.mapv(|z| z.norm()))
}

pub fn zero_filled_recon(undersampled: &ComplexKSpace) -> Result<MagnitudeImage> {
    magnitude(&ifft2c(undersampled)?)
}

/// Binary k-space sampling pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    #[serde(skip)]
    pattern: Array2<u8>,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

impl SamplingMask {
    /// Wraps an existing pattern; values must be 0 or 1.
    pub fn from_pattern(
        pattern: Array2<u8>,
        acceleration: f64,
        center_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if pattern.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(SamplingMask {
            pattern,
            acceleration,
            center_fraction,
            seed,
        })
    }

    pub fn pattern(&self) -> &Array2<u8> {
        &self.pattern
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pattern.dim()
    }

    pub fn sampled_count(&self) -> usize {
        self.pattern.iter().filter(|&&v| v == 1).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_count() as f64 / self.pattern.len() as f64
    }

    pub fn is_sampled(&self, y: usize, x: usize) -> bool {
        self.pattern[[y, x]] == 1
    }
}

/// Half-open row and column ranges of the fully sampled center block.
pub fn center_block(
    height: usize,
    width: usize,
    center_fraction: f64,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let side = |n: usize| ((center_fraction * n as f64).round() as usize).clamp(1, n);
    let (ch, cw) = (side(height), side(width));
    let r0 = height / 2 - ch / 2;
    let c0 = width / 2 - cw / 2;
    (r0..r0 + ch, c0..c0 + cw)
}

/// Number of samples a mask of the given size acquires at `acceleration`.
pub fn sample_budget(height: usize, width: usize, acceleration: f64) -> usize {
    ((height * width) as f64 / acceleration).round() as usize
}

/// Draws a 2D Gaussian variable-density mask.
///
/// The central block is always acquired; the rest of the budget
/// (`round(H·W/R)` locations in total) is drawn without replacement with
/// probability proportional to an isotropic Gaussian centered on the zero
/// frequency, standard deviation `0.15·min(H, W)`.
pub fn make_gaussian_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(Error::Config("mask dimensions must be positive".into()));
    }
    if !(acceleration.is_finite() && acceleration > 1.0) {
        return Err(Error::Config(format!(
            "acceleration must be > 1, got {acceleration}"
        )));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::Config(format!(
            "center fraction must lie in (0, 1), got {center_fraction}"
        )));
    }
    let budget = sample_budget(height, width, acceleration);
    let (rows, cols) = center_block(height, width, center_fraction);
    let center_count = rows.len() * cols.len();
    if center_count > budget {
        return Err(Error::Config(format!(
            "center block of {center_count} samples exceeds the budget of {budget} at R = {acceleration}"
        )));
    }

    let mut pattern = Array2::<u8>::zeros((height, width));
    for y in rows.clone() {
        for x in cols.clone() {
            pattern[[y, x]] = 1;
        }
    }

    let candidates: Vec<(usize, usize)> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .filter(|(y, x)| !(rows.contains(y) && cols.contains(x)))
        .collect();
    let sigma = MASK_SIGMA_FRACTION * height.min(width) as f64;
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let weight = |i: usize| {
        let (y, x) = candidates[i];
        let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        // floor keeps far corners drawable once the core is exhausted
        (-r2 / (2.0 * sigma * sigma)).exp().max(1e-300)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = rand::seq::index::sample_weighted(
        &mut rng,
        candidates.len(),
        weight,
        budget - center_count,
    )
    .map_err(|e| Error::Config(format!("mask sampling failed: {e}")))?;
    for i in drawn.iter() {
        let (y, x) = candidates[i];
        pattern[[y, x]] = 1;
    }

    Ok(SamplingMask {
        pattern,
        acceleration,
        center_fraction,
        seed,
    })
}

pub fn apply_mask(kspace: &ComplexKSpace, mask: &SamplingMask) -> Result<ComplexKSpace> {
    if kspace.shape() != mask.shape() {
        return Err(Error::InvalidInput(format!(
            "k-space shape {:?} does not match mask shape {:?}",
            kspace.shape(),
            mask.shape()
        )));
    }
    let data = Zip::from(kspace.data())
        .and(mask.pattern())
        .map_collect(|&z, &m| if m == 1 { z } else { Complex64::new(0.0, 0.0) });
    Ok(ComplexKSpace { data })
}

/// Scalar mean and (population) standard deviation of a training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(mean.is_finite() && std.is_finite()) {
            return Err(Error::Statistics("statistics must be finite".into()));
        }
        if std <= 0.0 {
            return Err(Error::Statistics(format!(
                "standard deviation must be positive, got {std}"
            )));
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity() -> Self {
        NormStats {
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Two-pass mean and population standard deviation over `values`.
    pub fn from_values<I>(values: I) -> Result<Self>
    where
        I: Iterator<Item = f64> + Clone,
    {
        let (count, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        if count == 0 {
            return Err(Error::Statistics("no samples".into()));
        }
        let mean = sum / count as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        // Constant data leaves only round-off in the variance.
        if !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs() {
            return Err(Error::Statistics("samples have zero variance".into()));
        }
        NormStats::new(mean, var.sqrt())
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Statistics over every element of every real grid.
pub fn compute_norm_stats(samples: &[Array2<f64>]) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::Statistics("empty sample collection".into()));
    }
    NormStats::from_values(samples.iter().flat_map(|g| g.iter().copied()))
}

/// Statistics over the real and imaginary parts of every k-space, pooled.
pub fn compute_complex_norm_stats(samples: &[ComplexKSpace]) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::Statistics("empty sample collection".into()));
    }
    NormStats::from_values(
        samples
            .iter()
            .flat_map(|k| k.data().iter().flat_map(|z| [z.re, z.im])),
    )
}

pub fn normalize<D: Dimension>(x: &Array<f64, D>, stats: &NormStats) -> Array<f64, D> {
    x.mapv(|v| stats.normalize_value(v))
}

pub fn denormalize<D: Dimension>(x: &Array<f64, D>, stats: &NormStats) -> Array<f64, D> {
    x.mapv(|v| stats.denormalize_value(v))
}

/// Applies the scalar normalizer to the real and imaginary parts alike.
pub fn normalize_complex(x: &Array2<Complex64>, stats: &NormStats) -> Array2<Complex64> {
    x.mapv(|z| Complex64::new(stats.normalize_value(z.re), stats.normalize_value(z.im)))
}

pub fn denormalize_complex(x: &Array2<Complex64>, stats: &NormStats) -> Array2<Complex64> {
    x.mapv(|z| Complex64::new(stats.denormalize_value(z.re), stats.denormalize_value(z.im)))
}

/// Largest violation of `K(k) = conj(K(-k))` on the centered grid.
pub fn hermitian_deviation(kspace: &ComplexKSpace) -> f64 {
    let (h, w) = kspace.shape();
    let d = kspace.data();
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let my = (h - y) % h;
            let mx = (w - x) % w;
            worst = worst.max((d[[y, x]] - d[[my, mx]].conj()).norm());
        }
    }
    worst
}
