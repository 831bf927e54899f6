use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::TrainConfig;
use crate::container::{self, bytes_to_f64s, f64s_to_bytes, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::kspace::NormStats;
use crate::nets::{BaselineModel, HybridModel, ParamEntry, UNet, UNetConfig};

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Hybrid(HybridModel),
    Baseline(BaselineModel),
}

impl TrainedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainedModel::Hybrid(_) => "hybrid",
            TrainedModel::Baseline(_) => "baseline",
        }
    }

    pub fn image_stats(&self) -> NormStats {
        match self {
            TrainedModel::Hybrid(m) => m.image_stats,
            TrainedModel::Baseline(m) => m.image_stats,
        }
    }

    fn nets(&self) -> Vec<(&'static str, &UNet)> {
        match self {
            TrainedModel::Hybrid(m) => vec![("freq", &m.freq_net), ("image", &m.image_net)],
            TrainedModel::Baseline(m) => vec![("image", &m.net)],
        }
    }
}

/// A trained model together with everything needed to reproduce its outputs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TrainedModel,
    /// Epoch (1-based) of the stored parameters.
    pub epoch: usize,
    pub validation_nrmse: f64,
    pub train_config: TrainConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the float64 payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    kind: String,
    dtype: String,
    freq_config: Option<UNetConfig>,
    image_config: UNetConfig,
    kspace_stats: Option<NormStats>,
    image_stats: NormStats,
    seed: u64,
    epoch: usize,
    validation_nrmse: f64,
    train_config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

const DTYPE: &str = "float64-le";

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let (freq_config, image_config, kspace_stats) = match &checkpoint.model {
        TrainedModel::Hybrid(m) => (
            Some(m.freq_net.config().clone()),
            m.image_net.config().clone(),
            Some(m.kspace_stats),
        ),
        TrainedModel::Baseline(m) => (None, m.net.config().clone(), None),
    };
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut base = 0;
    for (prefix, net) in checkpoint.model.nets() {
        for entry in net.layout() {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{}", entry.name),
                shape: entry.shape.clone(),
                offset: base + entry.offset,
            });
        }
        base += net.num_params();
        payload.extend_from_slice(&f64s_to_bytes(net.params().iter().copied()));
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: checkpoint.model.kind().to_string(),
        dtype: DTYPE.to_string(),
        freq_config,
        image_config,
        kspace_stats,
        image_stats: checkpoint.model.image_stats(),
        seed: checkpoint.seed,
        epoch: checkpoint.epoch,
        validation_nrmse: checkpoint.validation_nrmse,
        train_config: checkpoint.train_config.clone(),
        tensors,
    };
    container::write(path, &header, &payload)
}

/// Copies the stored tensors into `net`, checking that names and shapes
/// match the layout the configuration implies.
fn fill_net(
    net: &mut UNet,
    prefix: &str,
    tensors: &mut std::slice::Iter<'_, TensorEntry>,
    values: &[f64],
    path: &Path,
) -> Result<()> {
    let layout: Vec<ParamEntry> = net.layout().to_vec();
    let params = net.params_mut();
    for entry in layout {
        let expected = format!("{prefix}.{}", entry.name);
        let stored = tensors
            .next()
            .ok_or_else(|| Error::format(path, format!("missing tensor {expected}")))?;
        if stored.name != expected || stored.shape != entry.shape {
            return Err(Error::format(
                path,
                format!(
                    "tensor {} {:?} does not match expected {expected} {:?}",
                    stored.name, stored.shape, entry.shape
                ),
            ));
        }
        let n = entry.len();
        let src = values
            .get(stored.offset..stored.offset + n)
            .ok_or_else(|| Error::format(path, format!("tensor {expected} runs past the payload")))?;
        params[entry.offset..entry.offset + n].copy_from_slice(src);
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload): (CheckpointHeader, _) = container::read(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    if header.dtype != DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    if payload.len() % 8 != 0 {
        return Err(Error::format(path, "payload bytes are not a whole number of float64 values"));
    }
    let values = bytes_to_f64s(&payload);
    let mut tensors = header.tensors.iter();
    let model = match (header.kind.as_str(), header.freq_config, header.kspace_stats) {
        ("hybrid", Some(freq), Some(ks)) => {
            let mut m = HybridModel::new(freq, header.image_config, ks, header.image_stats, header.seed)?;
            fill_net(&mut m.freq_net, "freq", &mut tensors, &values, path)?;
            fill_net(&mut m.image_net, "image", &mut tensors, &values, path)?;
            TrainedModel::Hybrid(m)
        }
        ("baseline", None, None) => {
            let mut m = BaselineModel::new(header.image_config, header.image_stats, header.seed)?;
            fill_net(&mut m.net, "image", &mut tensors, &values, path)?;
            TrainedModel::Baseline(m)
        }
        (kind, _, _) => return Err(Error::format(path, format!("inconsistent header for model kind {kind:?}"))),
    };
    if tensors.next().is_some() {
        return Err(Error::format(path, "unexpected extra tensors"));
    }
    let stored: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if stored != values.len() {
        return Err(Error::format(
            path,
            format!("payload bytes hold {} values but tensors need {stored}", values.len()),
        ));
    }
    Ok(Checkpoint {
        model,
        epoch: header.epoch,
        validation_nrmse: header.validation_nrmse,
        train_config: header.train_config,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::make_gaussian_mask;
    use crate::synthdata::{gen_phantom_image, simulate_kspace, PhantomSpec};

    fn hybrid() -> HybridModel {
        let mut m = HybridModel::new(
            UNetConfig::frequency(1, 2),
            UNetConfig::image(1, 2, false),
            NormStats::new(0.1234567, 0.987654321).unwrap(),
            NormStats::new(0.3, 1.0 / 3.0).unwrap(),
            7,
        )
        .unwrap();
        for (i, p) in m.freq_net.params_mut().iter_mut().enumerate() {
            *p += (i as f64 * 0.37).sin() * 1e-2;
        }
        m
    }

    #[test]
    fn reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cks");
        let ck = Checkpoint {
            model: TrainedModel::Hybrid(hybrid()),
            epoch: 3,
            validation_nrmse: 0.1 + 0.2,
            train_config: TrainConfig::default(),
            seed: 7,
        };
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let (TrainedModel::Hybrid(a), TrainedModel::Hybrid(b)) = (&ck.model, &back.model) else {
            panic!("kind changed")
        };
        assert_eq!(a.freq_net.params(), b.freq_net.params());
        assert_eq!(a.image_net.params(), b.image_net.params());
        assert_eq!(a.kspace_stats, b.kspace_stats);
        assert_eq!(a.image_stats, b.image_stats);
        assert_eq!(back.validation_nrmse, ck.validation_nrmse);
        assert_eq!(back.train_config, ck.train_config);
        assert_eq!(back.epoch, 3);

        let img = gen_phantom_image(16, 16, &PhantomSpec::default()).unwrap();
        let k = simulate_kspace(&img, 0.0, 0).unwrap();
        let mask = make_gaussian_mask(16, 16, 4.0, 0.08, 0).unwrap();
        let u = crate::kspace::apply_mask(&k, &mask).unwrap();
        assert_eq!(a.forward(&u).unwrap().image, b.forward(&u).unwrap().image);
    }

    #[test]
    fn baseline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.cks");
        let m = BaselineModel::new(UNetConfig::image(1, 2, true), NormStats::identity(), 1).unwrap();
        let ck = Checkpoint {
            model: TrainedModel::Baseline(m),
            epoch: 1,
            validation_nrmse: 0.5,
            train_config: TrainConfig::default(),
            seed: 1,
        };
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let (TrainedModel::Baseline(a), TrainedModel::Baseline(b)) = (&ck.model, &back.model) else {
            panic!("kind changed")
        };
        assert_eq!(a.net.params(), b.net.params());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cks");
        let ck = Checkpoint {
            model: TrainedModel::Hybrid(hybrid()),
            epoch: 1,
            validation_nrmse: 0.5,
            train_config: TrainConfig::default(),
            seed: 7,
        };
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");
    }
}
