use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{Checkpoint, TrainedModel};
use super::loss::{dual_domain_loss_with_grad, nrmse_with_grad};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kspace::{
    apply_mask, complex_to_channels, compute_complex_norm_stats, compute_norm_stats, make_gaussian_mask,
    normalize_complex, zero_filled_recon, ComplexKSpace, MagnitudeImage, NormStats, SamplingMask,
    DEFAULT_CENTER_FRACTION,
};
use crate::metrics::nrmse;
use crate::nets::{BaselineModel, HybridModel, UNetConfig};
use crate::synthdata::{Dataset, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// One mask for every volume and epoch.
    Fixed,
    /// A fresh mask each epoch (augmentation); validation keeps the epoch-0 mask.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w1: 0.001,
            w2: 0.999,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            acceleration: 4.0,
            center_fraction: DEFAULT_CENTER_FRACTION,
            mask_mode: MaskMode::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1 + self.w2 > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0 with a positive sum, got {} and {}",
                self.w1, self.w2
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        if !(self.acceleration > 1.0) {
            return Err(Error::Config(format!("acceleration must be > 1, got {}", self.acceleration)));
        }
        Ok(())
    }
}

/// Which mask undersamples the data in a given epoch.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    height: usize,
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
    mode: MaskMode,
    base: SamplingMask,
}

impl MaskPlan {
    pub fn new(height: usize, width: usize, config: &TrainConfig) -> Result<Self> {
        let base = make_gaussian_mask(height, width, config.acceleration, config.center_fraction, config.seed)?;
        Ok(MaskPlan {
            height,
            width,
            acceleration: config.acceleration,
            center_fraction: config.center_fraction,
            seed: config.seed,
            mode: config.mask_mode,
            base,
        })
    }

    /// The epoch-0 mask, also used for statistics and validation.
    pub fn base(&self) -> &SamplingMask {
        &self.base
    }

    pub fn for_epoch(&self, epoch: usize) -> Result<SamplingMask> {
        match (self.mode, epoch) {
            (MaskMode::Fixed, _) | (MaskMode::PerEpoch, 0) => Ok(self.base.clone()),
            (MaskMode::PerEpoch, e) => make_gaussian_mask(
                self.height,
                self.width,
                self.acceleration,
                self.center_fraction,
                derive_seed(self.seed, e as u64),
            ),
        }
    }
}

/// Undersampled input and fully sampled targets for one slice.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub undersampled: ComplexKSpace,
    /// Normalized fully sampled k-space, `(2, H, W)`.
    pub kspace_target: Array3<f64>,
    pub image_target: Array2<f64>,
}

impl TrainSample {
    pub fn new(full: &ComplexKSpace, mask: &SamplingMask, kspace_stats: &NormStats) -> Result<Self> {
        Ok(TrainSample {
            undersampled: apply_mask(full, mask)?,
            kspace_target: complex_to_channels(&normalize_complex(full.data(), kspace_stats)),
            image_target: zero_filled_recon(full)?.into_data(),
        })
    }
}

pub fn make_samples(volumes: &[Volume], mask: &SamplingMask, kspace_stats: &NormStats) -> Result<Vec<TrainSample>> {
    volumes
        .iter()
        .flat_map(|v| v.slices())
        .map(|s| TrainSample::new(s, mask, kspace_stats))
        .collect()
}

/// A model the training loop can optimize.
pub trait Trainable: Sync {
    fn param_groups(&self) -> Vec<&[f64]>;
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;
    /// Loss of one sample; accumulates its gradient into `grads`.
    fn sample_loss(&self, sample: &TrainSample, config: &TrainConfig, grads: &mut [Vec<f64>]) -> Result<f64>;
    fn reconstruct(&self, undersampled: &ComplexKSpace) -> Result<MagnitudeImage>;
    /// Statistics of the k-space normalizer, used to build training targets.
    fn kspace_stats(&self) -> NormStats;
}

impl Trainable for HybridModel {
    fn param_groups(&self) -> Vec<&[f64]> {
        vec![self.freq_net.params(), self.image_net.params()]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.freq_net.params_mut(), self.image_net.params_mut()]
    }

    fn sample_loss(&self, sample: &TrainSample, config: &TrainConfig, grads: &mut [Vec<f64>]) -> Result<f64> {
        let (out, tape) = self.forward_train(&sample.undersampled)?;
        let (terms, gk, gi) = dual_domain_loss_with_grad(
            &out.kspace_norm,
            &sample.kspace_target,
            &out.image_raw,
            &sample.image_target,
            config.w1,
            config.w2,
        )?;
        let (freq, image) = grads.split_at_mut(1);
        self.backward(&tape, &gk, &gi, &mut freq[0], &mut image[0]);
        Ok(terms.total)
    }

    fn reconstruct(&self, undersampled: &ComplexKSpace) -> Result<MagnitudeImage> {
        Ok(self.forward(undersampled)?.image)
    }

    fn kspace_stats(&self) -> NormStats {
        self.kspace_stats
    }
}

impl Trainable for BaselineModel {
    fn param_groups(&self) -> Vec<&[f64]> {
        vec![self.net.params()]
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.net.params_mut()]
    }

    /// Image-domain NRMSE only; the loss weights do not apply.
    fn sample_loss(&self, sample: &TrainSample, _config: &TrainConfig, grads: &mut [Vec<f64>]) -> Result<f64> {
        let (out, tape) = self.forward_train(&sample.undersampled)?;
        let (loss, g) = nrmse_with_grad(&out, &sample.image_target)?;
        self.backward(&tape, &g, &mut grads[0]);
        Ok(loss)
    }

    fn reconstruct(&self, undersampled: &ComplexKSpace) -> Result<MagnitudeImage> {
        self.forward(undersampled)
    }

    fn kspace_stats(&self) -> NormStats {
        NormStats::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nrmse: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_nrmse: f64,
    pub history: Vec<EpochLog>,
}

impl FitReport {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_nrmse,wall_seconds\n");
        for e in &self.history {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_nrmse, e.wall_seconds));
        }
        out
    }
}

fn mean_validation_nrmse<M: Trainable>(model: &M, samples: &[TrainSample]) -> Result<f64> {
    let values: Vec<f64> = samples
        .par_iter()
        .map(|s| nrmse(model.reconstruct(&s.undersampled)?.data(), &s.image_target))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mini-batch Adam on the model's loss. Validation NRMSE is measured after
/// every epoch and the model is left holding the parameters of the best
/// epoch. Deterministic given `config.seed`, independent of thread count.
pub fn fit<M: Trainable>(model: &mut M, train: &[Volume], validation: &[Volume], config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let (h, w) = train[0].shape();
    let plan = MaskPlan::new(h, w, config)?;
    let kspace_stats = model.kspace_stats();
    let val_samples = make_samples(validation, plan.base(), &kspace_stats)?;
    let slices: Vec<&ComplexKSpace> = train.iter().flat_map(|v| v.slices()).collect();

    let sizes: Vec<usize> = model.param_groups().iter().map(|g| g.len()).collect();
    let mut opt = Adam::new(config.learning_rate, &sizes);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    let mut train_mask_epoch = usize::MAX;
    let mut samples: Vec<TrainSample> = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mask = plan.for_epoch(epoch)?;
        if train_mask_epoch == usize::MAX || config.mask_mode == MaskMode::PerEpoch {
            samples = slices
                .iter()
                .map(|s| TrainSample::new(s, &mask, &kspace_stats))
                .collect::<Result<_>>()?;
            train_mask_epoch = epoch;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1_000_000 + epoch as u64)));

        let mut loss_sum = 0.0;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                    let loss = model.sample_loss(&samples[i], config, &mut grads)?;
                    Ok((loss, grads))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for (loss, grads) in &results {
                batch_loss += loss * scale;
                for (t, g) in total.iter_mut().zip(grads) {
                    t.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
                }
            }
            if !batch_loss.is_finite() || total.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: batch_index,
                    detail: format!("non-finite loss or gradient (loss = {batch_loss}) on samples {batch:?}"),
                });
            }
            loss_sum += batch_loss * batch.len() as f64;
            opt.step(&mut model.param_groups_mut(), &total);
        }

        let val_nrmse = mean_validation_nrmse(model, &val_samples)?;
        history.push(EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / samples.len() as f64,
            val_nrmse,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_nrmse < *v) {
            let params = model.param_groups().iter().map(|g| g.to_vec()).collect();
            best = Some((epoch + 1, val_nrmse, params));
        }
    }

    let (best_epoch, best_val_nrmse, params) = best.expect("at least one epoch");
    for (dst, src) in model.param_groups_mut().into_iter().zip(params) {
        dst.copy_from_slice(&src);
    }
    Ok(FitReport {
        best_epoch,
        best_val_nrmse,
        history,
    })
}

/// k-space statistics over the undersampled training k-spaces (real and
/// imaginary parts pooled) and image statistics over their zero-filled
/// reconstructions.
pub fn compute_training_stats(train_volumes: &[Volume], mask: &SamplingMask) -> Result<(NormStats, NormStats)> {
    if train_volumes.is_empty() {
        return Err(Error::Statistics("empty training split".into()));
    }
    let undersampled: Vec<ComplexKSpace> = train_volumes
        .iter()
        .flat_map(|v| v.slices())
        .map(|s| apply_mask(s, mask))
        .collect::<Result<_>>()?;
    let kspace_stats = compute_complex_norm_stats(&undersampled)?;
    let images: Vec<Array2<f64>> = undersampled
        .iter()
        .map(|k| zero_filled_recon(k).map(MagnitudeImage::into_data))
        .collect::<Result<_>>()?;
    let image_stats = compute_norm_stats(&images)?;
    Ok((kspace_stats, image_stats))
}

/// Loads the training and validation subjects through `dataset`, computes
/// normalization statistics from the training subjects only, and trains a
/// hybrid model. Test subjects are never read.
pub fn train_hybrid(
    dataset: &Dataset,
    freq_config: &UNetConfig,
    image_config: &UNetConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, FitReport)> {
    config.validate()?;
    let train = dataset.load_all(&dataset.split().train)?;
    let validation = dataset.load_all(&dataset.split().validation)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (h, w) = train[0].shape();
    let plan = MaskPlan::new(h, w, config)?;
    let (kspace_stats, image_stats) = compute_training_stats(&train, plan.base())?;
    let mut model = HybridModel::new(
        freq_config.clone(),
        image_config.clone(),
        kspace_stats,
        image_stats,
        config.seed,
    )?;
    let report = fit(&mut model, &train, &validation, config)?;
    let checkpoint = Checkpoint {
        model: TrainedModel::Hybrid(model),
        epoch: report.best_epoch,
        validation_nrmse: report.best_val_nrmse,
        train_config: config.clone(),
        seed: config.seed,
    };
    Ok((checkpoint, report))
}

/// The image-domain-only comparator under the same budget and statistics.
pub fn train_baseline(
    dataset: &Dataset,
    image_config: &UNetConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, FitReport)> {
    config.validate()?;
    let train = dataset.load_all(&dataset.split().train)?;
    let validation = dataset.load_all(&dataset.split().validation)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (h, w) = train[0].shape();
    let plan = MaskPlan::new(h, w, config)?;
    let (_, image_stats) = compute_training_stats(&train, plan.base())?;
    let mut model = BaselineModel::new(image_config.clone(), image_stats, config.seed)?;
    let report = fit(&mut model, &train, &validation, config)?;
    let checkpoint = Checkpoint {
        model: TrainedModel::Baseline(model),
        epoch: report.best_epoch,
        validation_nrmse: report.best_val_nrmse,
        train_config: config.clone(),
        seed: config.seed,
    };
    Ok((checkpoint, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, PhantomSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(dir: &std::path::Path) -> Dataset {
        build_dataset(4, 2, 16, 16, &PhantomSpec::default(), (2, 1, 1), dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { w1: 0.0, w2: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoke_fit_is_finite_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let run = || {
            train_hybrid(&ds, &UNetConfig::frequency(1, 2), &UNetConfig::image(1, 2, false), &tiny_config()).unwrap()
        };
        let (a, ra) = run();
        let (b, _) = run();
        assert!(ra.best_val_nrmse.is_finite());
        let (TrainedModel::Hybrid(ma), TrainedModel::Hybrid(mb)) = (&a.model, &b.model) else {
            panic!("expected hybrid checkpoints")
        };
        assert_eq!(ma.freq_net.params(), mb.freq_net.params());
        assert_eq!(ma.image_net.params(), mb.image_net.params());
    }

    #[test]
    fn no_test_subject_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        ds.clear_access_log();
        train_hybrid(&ds, &UNetConfig::frequency(1, 2), &UNetConfig::image(1, 2, false), &tiny_config()).unwrap();
        train_baseline(&ds, &UNetConfig::image(1, 2, true), &tiny_config()).unwrap();
        let accessed = ds.accessed();
        assert!(!accessed.is_empty());
        for id in &ds.split().test {
            assert!(!accessed.contains(id), "test subject {id} was read");
        }
    }

    #[test]
    fn best_epoch_has_minimal_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let config = TrainConfig { epochs: 3, learning_rate: 3e-3, ..tiny_config() };
        let (_, report) = train_baseline(&ds, &UNetConfig::image(1, 2, true), &config).unwrap();
        let min = report.history.iter().map(|e| e.val_nrmse).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_nrmse, min);
        assert_eq!(report.history[report.best_epoch - 1].val_nrmse, min);
        assert_eq!(report.log_csv().lines().count(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let train = ds.load_all(&ds.split().train).unwrap();
        let val = ds.load_all(&ds.split().validation).unwrap();
        let mut model = BaselineModel::new(UNetConfig::image(1, 2, true), NormStats::identity(), 0).unwrap();
        model.net.params_mut()[0] = f64::NAN;
        let err = fit(&mut model, &train, &val, &tiny_config()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, batch: 0, .. }), "{err}");
    }

    #[test]
    fn empty_split_is_config_error() {
        let mut model = BaselineModel::new(UNetConfig::image(1, 2, true), NormStats::identity(), 0).unwrap();
        assert!(matches!(fit(&mut model, &[], &[], &tiny_config()), Err(Error::Config(_))));
    }

    #[test]
    fn training_stats_contract() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut vols = ds.load_all(&ds.split().train).unwrap();
        let mask = make_gaussian_mask(16, 16, 4.0, 0.08, 0).unwrap();
        let a = compute_training_stats(&vols, &mask).unwrap();
        assert_eq!(a, compute_training_stats(&vols, &mask).unwrap());
        vols.reverse();
        let b = compute_training_stats(&vols, &mask).unwrap();
        assert!((a.0.mean - b.0.mean).abs() <= 1e-12 * a.0.std);
        assert!((a.0.std - b.0.std).abs() <= 1e-12 * a.0.std);
        assert!((a.1.mean - b.1.mean).abs() <= 1e-12 * a.1.std);

        let zero = Volume::new("z", 0, vec![ComplexKSpace::zeros(16, 16)]).unwrap();
        assert!(matches!(compute_training_stats(&[zero], &mask), Err(Error::Statistics(_))));
        assert!(compute_training_stats(&[], &mask).is_err());
    }

    #[test]
    fn per_epoch_masks_differ() {
        let config = TrainConfig { mask_mode: MaskMode::PerEpoch, ..TrainConfig::default() };
        let plan = MaskPlan::new(32, 32, &config).unwrap();
        assert_eq!(&plan.for_epoch(0).unwrap(), plan.base());
        assert_ne!(plan.for_epoch(1).unwrap(), plan.for_epoch(2).unwrap());
        let fixed = MaskPlan::new(32, 32, &TrainConfig::default()).unwrap();
        assert_eq!(fixed.for_epoch(5).unwrap(), *fixed.base());
    }
}
