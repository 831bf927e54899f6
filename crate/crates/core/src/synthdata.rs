//! Synthetic single-coil raw k-space.
//!
//! Subjects are stacks of 3D ellipsoids sliced axially, multiplied by a
//! smooth random phase field and transformed to k-space with additive
//! complex Gaussian noise. The phase makes every slice's k-space
//! non-Hermitian, as genuine raw data is.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, FORMAT_VERSION};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kspace::{fft2c, hermitian_deviation, ComplexKSpace, SamplingMask};

pub const MIN_PHANTOM_SIDE: usize = 16;

/// Relative threshold below which a slice counts as Hermitian.
pub const HERMITIAN_TOLERANCE: f64 = 1e-3;

const VOLUME_DTYPE: &str = "complex64-le-interleaved";
const MASK_DTYPE: &str = "uint8";
pub const VOLUME_DIR: &str = "volumes";
pub const MANIFEST_FILE: &str = "split.json";

/// In-plane scale of the phantom relative to the field of view. Leaving a
/// background margin, as real acquisitions do, makes k-space oversampled
/// with respect to the object.
const OBJECT_EXTENT: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub num_ellipses: usize,
    pub intensity_range: (f64, f64),
    /// Correlation length of the phase field, in pixels.
    pub phase_smoothness: f64,
    /// Per-component standard deviation of k-space noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            num_ellipses: 8,
            intensity_range: (0.2, 1.0),
            phase_smoothness: 32.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity_range;
        if self.num_ellipses == 0 {
            return Err(Error::Config("num_ellipses must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "intensity range must be finite with low < high, got ({lo}, {hi})"
            )));
        }
        if !(self.phase_smoothness > 0.0) || self.phase_smoothness.is_nan() {
            return Err(Error::Config("phase_smoothness must be > 0".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Axis-aligned-in-z ellipsoid in normalized coordinates (`[-1, 1]` per axis).
#[derive(Clone, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
    angle: f64,
    intensity: f64,
}

#[derive(Clone, Debug)]
struct PlaneWave {
    /// Cycles per pixel along x, y, z.
    freq: [f64; 3],
    offset: f64,
    amplitude: f64,
}

/// Everything that defines one subject, independent of slice position.
#[derive(Clone, Debug)]
struct SubjectLayout {
    ellipsoids: Vec<Ellipsoid>,
    phase: Vec<PlaneWave>,
    phase_offset: f64,
}

impl SubjectLayout {
    fn random(spec: &PhantomSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = spec.intensity_range;
        let mut ellipsoids = Vec::with_capacity(spec.num_ellipses);
        // outer shell spans the whole slab so every slice has some signal
        ellipsoids.push(Ellipsoid {
            center: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0],
            semi_axes: [rng.random_range(0.65..0.85), rng.random_range(0.75..0.9), 1.0],
            angle: rng.random_range(-0.2..0.2),
            intensity: rng.random_range(lo..hi),
        });
        for _ in 1..spec.num_ellipses {
            let c = rng.random_range(0.3..0.9);
            ellipsoids.push(Ellipsoid {
                center: [
                    rng.random_range(-0.45..0.45),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5) * c,
                ],
                semi_axes: [rng.random_range(0.08..0.35), rng.random_range(0.08..0.4), c],
                angle: rng.random_range(0.0..PI),
                intensity: rng.random_range(lo..hi) * 0.5,
            });
        }
        let phase = (0..4)
            .map(|_| {
                let theta = rng.random_range(0.0..2.0 * PI);
                let tilt = rng.random_range(-0.5..0.5);
                let f = 1.0 / spec.phase_smoothness;
                PlaneWave {
                    freq: [f * theta.cos(), f * theta.sin(), f * tilt],
                    offset: rng.random_range(0.0..2.0 * PI),
                    amplitude: rng.random_range(0.4..0.9),
                }
            })
            .collect();
        SubjectLayout {
            ellipsoids,
            phase,
            phase_offset: rng.random_range(-PI..PI),
        }
    }

    /// Complex image of the axial slice at normalized height `z`.
    fn slice(&self, height: usize, width: usize, z: f64) -> Array2<Complex64> {
        let (hy, hx) = (height as f64 / 2.0, width as f64 / 2.0);
        let z_pixels = z * hy;
        Array2::from_shape_fn((height, width), |(y, x)| {
            let ny = (y as f64 - hy) / (hy * OBJECT_EXTENT);
            let nx = (x as f64 - hx) / (hx * OBJECT_EXTENT);
            let mut value = 0.0;
            for e in &self.ellipsoids {
                let dz = (z - e.center[2]) / e.semi_axes[2];
                let shrink = 1.0 - dz * dz;
                if shrink <= 0.0 {
                    continue;
                }
                let scale = shrink.sqrt();
                let (dx, dy) = (nx - e.center[0], ny - e.center[1]);
                let (s, c) = e.angle.sin_cos();
                let u = (c * dx + s * dy) / (e.semi_axes[0] * scale);
                let v = (-s * dx + c * dy) / (e.semi_axes[1] * scale);
                if u * u + v * v <= 1.0 {
                    value += e.intensity;
                }
            }
            if value == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let (py, px) = (y as f64 - hy, x as f64 - hx);
            let phi = self.phase_offset
                + self
                    .phase
                    .iter()
                    .map(|w| {
                        w.amplitude
                            * (2.0 * PI * (w.freq[0] * px + w.freq[1] * py + w.freq[2] * z_pixels)
                                + w.offset)
                                .cos()
                    })
                    .sum::<f64>();
            Complex64::from_polar(value, phi)
        })
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_PHANTOM_SIDE || width < MIN_PHANTOM_SIDE {
        return Err(Error::Config(format!(
            "phantom dimensions must be at least {MIN_PHANTOM_SIDE}, got {height}x{width}"
        )));
    }
    Ok(())
}

/// A single complex phantom slice (the subject's central slice).
pub fn gen_phantom_image(height: usize, width: usize, spec: &PhantomSpec) -> Result<Array2<Complex64>> {
    spec.validate()?;
    check_dims(height, width)?;
    Ok(SubjectLayout::random(spec, spec.seed).slice(height, width, 0.0))
}

/// `fft2c(image)` plus complex Gaussian noise of `noise_std` per component.
pub fn simulate_kspace(image: &Array2<Complex64>, noise_std: f64, seed: u64) -> Result<ComplexKSpace> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let clean = fft2c(image)?;
    if noise_std == 0.0 {
        return Ok(clean);
    }
    let normal = Normal::new(0.0, noise_std).expect("validated noise std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = clean
        .into_data()
        .mapv(|z| z + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
    ComplexKSpace::new(noisy)
}

/// Normalized axial position of slice `index` out of `count`.
pub fn slice_position(index: usize, count: usize) -> f64 {
    0.95 * (2.0 * (index as f64 + 0.5) / count as f64 - 1.0)
}

/// A subject's fully sampled k-space, one grid per slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub seed: u64,
    slices: Vec<ComplexKSpace>,
    acquisition_dims: (usize, usize),
}

impl Volume {
    /// Samples are rounded to single precision, the storage precision of
    /// the container, so that a save/load round trip is exact.
    pub fn new(subject_id: impl Into<String>, seed: u64, slices: Vec<ComplexKSpace>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidInput("volume has no slices".into()))?
            .shape();
        if let Some(bad) = slices.iter().find(|s| s.shape() != first) {
            return Err(Error::InvalidInput(format!(
                "slice shape {:?} differs from {:?}",
                bad.shape(),
                first
            )));
        }
        let slices = slices
            .into_iter()
            .map(|s| {
                ComplexKSpace::new(
                    s.into_data()
                        .mapv(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Volume {
            subject_id: subject_id.into(),
            seed,
            slices,
            acquisition_dims: first,
        })
    }

    pub fn slices(&self) -> &[ComplexKSpace] {
        &self.slices
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn acquisition_dims(&self) -> (usize, usize) {
        self.acquisition_dims
    }

    /// Fails if any slice is Hermitian-symmetric to within
    /// [`HERMITIAN_TOLERANCE`] of its peak magnitude.
    pub fn check_non_hermitian(&self) -> Result<()> {
        for (i, s) in self.slices.iter().enumerate() {
            let peak = s.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
            if hermitian_deviation(s) <= HERMITIAN_TOLERANCE * peak {
                return Err(Error::InvalidInput(format!(
                    "slice {i} of {} is Hermitian-symmetric",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    format_version: u32,
    kind: String,
    dtype: String,
    /// `[slices, height, width]`
    shape: [usize; 3],
    acquisition_dims: [usize; 2],
    subject_id: String,
    seed: u64,
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let (h, w) = volume.shape();
    let header = VolumeHeader {
        format_version: FORMAT_VERSION,
        kind: "volume".into(),
        dtype: VOLUME_DTYPE.into(),
        shape: [volume.slices.len(), h, w],
        acquisition_dims: [volume.acquisition_dims.0, volume.acquisition_dims.1],
        subject_id: volume.subject_id.clone(),
        seed: volume.seed,
    };
    let payload = container::f32s_to_bytes(
        volume
            .slices
            .iter()
            .flat_map(|s| s.data().iter().flat_map(|z| [z.re as f32, z.im as f32])),
    );
    container::write(path, &header, &payload)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload): (VolumeHeader, _) = container::read(path)?;
    if header.kind != "volume" {
        return Err(Error::format(path, format!("expected a volume, found {:?}", header.kind)));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    if header.dtype != VOLUME_DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let [n, h, w] = header.shape;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, "header shape has a zero dimension"));
    }
    let expected = n * h * w * 8;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "header shape {:?} implies {expected} payload bytes, found {}",
                header.shape,
                payload.len()
            ),
        ));
    }
    let values = container::bytes_to_f32s(&payload);
    let slices = values
        .chunks_exact(2 * h * w)
        .map(|chunk| {
            let data = Array2::from_shape_fn((h, w), |(y, x)| {
                let i = 2 * (y * w + x);
                Complex64::new(chunk[i] as f64, chunk[i + 1] as f64)
            });
            ComplexKSpace::new(data).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut volume = Volume::new(header.subject_id, header.seed, slices)?;
    volume.acquisition_dims = (header.acquisition_dims[0], header.acquisition_dims[1]);
    Ok(volume)
}

/// Subject ids per split; the three lists never share a subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Config(format!("subject {id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// On-disk description of a generated dataset (`split.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub slices_per_subject: usize,
    pub phantom: PhantomSpec,
    pub volume_dir: String,
    pub split: DatasetSplit,
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:03}")
}

fn generate_volume(
    index: usize,
    slices: usize,
    height: usize,
    width: usize,
    spec: &PhantomSpec,
) -> Result<Volume> {
    let seed = derive_seed(spec.seed, index as u64);
    let layout = SubjectLayout::random(spec, seed);
    let kspaces = (0..slices)
        .map(|s| {
            let image = layout.slice(height, width, slice_position(s, slices));
            simulate_kspace(&image, spec.noise_std, derive_seed(seed, 1 + s as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let volume = Volume::new(subject_id(index), seed, kspaces)?;
    volume.check_non_hermitian()?;
    Ok(volume)
}

/// Generates `num_subjects` volumes under `out_dir/volumes/` and writes the
/// split manifest to `out_dir/split.json`.
pub fn build_dataset(
    num_subjects: usize,
    slices_per_subject: usize,
    height: usize,
    width: usize,
    spec_template: &PhantomSpec,
    split_counts: (usize, usize, usize),
    out_dir: &Path,
) -> Result<DatasetSplit> {
    spec_template.validate()?;
    check_dims(height, width)?;
    let (n_train, n_val, n_test) = split_counts;
    if n_train + n_val + n_test != num_subjects {
        return Err(Error::Config(format!(
            "split counts {n_train}/{n_val}/{n_test} do not sum to {num_subjects} subjects"
        )));
    }
    if num_subjects == 0 || slices_per_subject == 0 {
        return Err(Error::Config("need at least one subject and one slice".into()));
    }
    let volume_dir = out_dir.join(VOLUME_DIR);
    fs::create_dir_all(&volume_dir).map_err(|e| Error::io(&volume_dir, e))?;

    (0..num_subjects).into_par_iter().try_for_each(|i| {
        let v = generate_volume(i, slices_per_subject, height, width, spec_template)?;
        save_volume(&v, &volume_dir.join(format!("{}.cks", v.subject_id)))
    })?;

    let mut ids: Vec<String> = (0..num_subjects).map(subject_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec_template.seed, u64::MAX)));
    let split = DatasetSplit {
        train: ids[..n_train].to_vec(),
        validation: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    split.validate()?;
    let manifest = SplitManifest {
        format_version: FORMAT_VERSION,
        height,
        width,
        slices_per_subject,
        phantom: spec_template.clone(),
        volume_dir: VOLUME_DIR.into(),
        split: split.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(split)
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SplitManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    manifest.split.validate()?;
    Ok(manifest)
}

/// Read access to a generated dataset. Every volume load is recorded, so
/// callers can verify which subjects a computation touched.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: SplitManifest,
    access_log: Mutex<Vec<String>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            access_log: Mutex::new(Vec::new()),
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.manifest.split
    }

    pub fn volume_path(&self, subject_id: &str) -> PathBuf {
        self.root
            .join(&self.manifest.volume_dir)
            .join(format!("{subject_id}.cks"))
    }

    pub fn load(&self, subject_id: &str) -> Result<Volume> {
        self.access_log.lock().unwrap().push(subject_id.to_string());
        load_volume(&self.volume_path(subject_id))
    }

    pub fn load_all(&self, ids: &[String]) -> Result<Vec<Volume>> {
        ids.iter().map(|id| self.load(id)).collect()
    }

    /// Subject ids loaded so far, in access order.
    pub fn accessed(&self) -> Vec<String> {
        self.access_log.lock().unwrap().clone()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().unwrap().clear();
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskHeader {
    format_version: u32,
    kind: String,
    dtype: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskSidecar {
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
    sampled_count: usize,
}

pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the pattern as a `CKS1` uint8 grid and its parameters to a JSON
/// sidecar next to it.
pub fn save_mask(mask: &SamplingMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let header = MaskHeader {
        format_version: FORMAT_VERSION,
        kind: "mask".into(),
        dtype: MASK_DTYPE.into(),
        shape: [h, w],
    };
    let payload: Vec<u8> = mask.pattern().iter().copied().collect();
    container::write(path, &header, &payload)?;
    let sidecar = MaskSidecar {
        acceleration: mask.acceleration,
        center_fraction: mask.center_fraction,
        seed: mask.seed,
        sampled_count: mask.sampled_count(),
    };
    let side = mask_sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    let (header, payload): (MaskHeader, _) = container::read(path)?;
    if header.kind != "mask" || header.dtype != MASK_DTYPE {
        return Err(Error::format(path, "not a uint8 mask container"));
    }
    let [h, w] = header.shape;
    if payload.len() != h * w {
        return Err(Error::format(
            path,
            format!("mask shape {h}x{w} does not match {} payload bytes", payload.len()),
        ));
    }
    let side = mask_sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: MaskSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let pattern = Array2::from_shape_vec((h, w), payload).expect("length checked");
    let mask = SamplingMask::from_pattern(pattern, meta.acceleration, meta.center_fraction, meta.seed)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if mask.sampled_count() != meta.sampled_count {
        return Err(Error::format(path, "sampled count disagrees with sidecar"));
    }
    Ok(mask)
}
