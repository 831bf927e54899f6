use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use super::unet::{UNet, UNetConfig, UNetTape};
use crate::error::{Error, Result};
use crate::kspace::{
    channels_to_complex, complex_to_channels, fft2c_unchecked, ifft2c_unchecked, normalize_complex,
    zero_filled_recon, ComplexKSpace, MagnitudeImage, NormStats,
};

/// Upper bound on trainable parameters for a hybrid model.
pub const MAX_PARAMS: usize = 100_000_000;

fn ensure_finite(x: &Array3<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}

/// Intermediate state of the magnitude-iDFT bridge, kept for its backward pass.
#[derive(Clone, Debug)]
pub struct BridgeTape {
    image: Array2<Complex64>,
    magnitude: Array2<f64>,
}

impl BridgeTape {
    /// `|iDFT(denormalized k-space)|`, before image normalization.
    pub fn magnitude(&self) -> &Array2<f64> {
        &self.magnitude
    }
}

/// Denormalize with the k-space statistics, inverse transform, take the
/// modulus, normalize with the image statistics. Maps a `(2, H, W)` array
/// to `(1, H, W)`.
pub fn bridge_forward(
    kspace_norm: &Array3<f64>,
    kspace_stats: &NormStats,
    image_stats: &NormStats,
) -> Result<(Array3<f64>, BridgeTape)> {
    ensure_finite(kspace_norm, "bridge input")?;
    let kspace = channels_to_complex(&kspace_norm.mapv(|v| kspace_stats.denormalize_value(v)))?;
    let image = ifft2c_unchecked(&kspace);
    let magnitude = image.mapv(|z| z.norm());
    let out = magnitude
        .mapv(|m| image_stats.normalize_value(m))
        .insert_axis(Axis(0));
    Ok((out, BridgeTape { image, magnitude }))
}

/// Vector-Jacobian product of [`bridge_forward`]. The modulus uses the
/// subgradient 0 at the origin.
pub fn bridge_backward(
    tape: &BridgeTape,
    g_out: &Array3<f64>,
    kspace_stats: &NormStats,
    image_stats: &NormStats,
) -> Array3<f64> {
    let g_mag = g_out.index_axis(Axis(0), 0);
    let mut g_image = Array2::<Complex64>::zeros(tape.image.dim());
    ndarray::Zip::from(&mut g_image)
        .and(&tape.image)
        .and(&tape.magnitude)
        .and(&g_mag)
        .for_each(|g, &z, &m, &gm| {
            if m > 0.0 {
                *g = z * (gm / (image_stats.std * m));
            }
        });
    // the centered iDFT is unitary, so its adjoint is the forward DFT
    let g_kspace = fft2c_unchecked(&g_image);
    complex_to_channels(&g_kspace).mapv(|v| v * kspace_stats.std)
}

/// Everything the forward pass of the hybrid produces for one slice.
#[derive(Clone, Debug)]
pub struct HybridOutput {
    /// Final reconstruction, clamped to non-negative intensities.
    pub image: MagnitudeImage,
    /// Image-network output mapped back to intensity units, unclamped.
    pub image_raw: Array2<f64>,
    /// Normalized k-space estimate of the frequency network, `(2, H, W)`.
    pub kspace_norm: Array3<f64>,
    /// Magnitude image between the two networks.
    pub intermediate: MagnitudeImage,
}

/// Activations of a full training forward pass.
#[derive(Clone, Debug)]
pub struct HybridTape {
    freq: UNetTape,
    bridge: BridgeTape,
    image: UNetTape,
}

/// Frequency-domain residual U-net, magnitude-iDFT bridge and image-domain
/// U-net, with the training-set statistics of both normalizers.
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub freq_net: UNet,
    pub image_net: UNet,
    pub kspace_stats: NormStats,
    pub image_stats: NormStats,
}

impl HybridModel {
    pub fn new(
        freq_config: UNetConfig,
        image_config: UNetConfig,
        kspace_stats: NormStats,
        image_stats: NormStats,
        seed: u64,
    ) -> Result<Self> {
        if freq_config.in_channels != 2 || freq_config.out_channels != 2 {
            return Err(Error::Config("frequency network must map 2 channels to 2".into()));
        }
        if image_config.in_channels != 1 || image_config.out_channels != 1 {
            return Err(Error::Config("image network must map 1 channel to 1".into()));
        }
        let model = HybridModel {
            freq_net: UNet::new(freq_config, crate::derive_seed(seed, 0))?,
            image_net: UNet::new(image_config, crate::derive_seed(seed, 1))?,
            kspace_stats,
            image_stats,
        };
        if model.num_params() >= MAX_PARAMS {
            return Err(Error::Config(format!(
                "{} parameters exceeds the limit of {MAX_PARAMS}",
                model.num_params()
            )));
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.freq_net.num_params() + self.image_net.num_params()
    }

    /// Normalized undersampled k-space as `(real, imaginary)` channels.
    pub fn normalize_input(&self, f_u: &ComplexKSpace) -> Array3<f64> {
        complex_to_channels(&normalize_complex(f_u.data(), &self.kspace_stats))
    }

    pub fn freq_net_forward(&self, f_u_norm: &Array3<f64>) -> Result<Array3<f64>> {
        self.freq_net.infer(f_u_norm)
    }

    pub fn bridge(&self, kspace_norm: &Array3<f64>) -> Result<(Array3<f64>, BridgeTape)> {
        bridge_forward(kspace_norm, &self.kspace_stats, &self.image_stats)
    }

    fn image_raw(&self, out_norm: &Array3<f64>) -> Array2<f64> {
        out_norm
            .index_axis(Axis(0), 0)
            .mapv(|v| self.image_stats.denormalize_value(v))
    }

    /// Image network on the normalized bridge output; the result is
    /// denormalized and clamped to non-negative intensities.
    pub fn image_net_forward(&self, f0_norm: &Array3<f64>) -> Result<MagnitudeImage> {
        let out = self.image_net.infer(f0_norm)?;
        MagnitudeImage::from_clamped(self.image_raw(&out))
    }

    /// Full pipeline from undersampled k-space, keeping activations for
    /// [`HybridModel::backward`].
    pub fn forward_train(&self, f_u: &ComplexKSpace) -> Result<(HybridOutput, HybridTape)> {
        let input = self.normalize_input(f_u);
        let (kspace_norm, freq) = self.freq_net.forward(&input)?;
        let (f0_norm, bridge) = self.bridge(&kspace_norm)?;
        let (out_norm, image) = self.image_net.forward(&f0_norm)?;
        let image_raw = self.image_raw(&out_norm);
        let output = HybridOutput {
            image: MagnitudeImage::from_clamped(image_raw.clone())?,
            image_raw,
            kspace_norm,
            intermediate: MagnitudeImage::new(bridge.magnitude.clone())?,
        };
        Ok((output, HybridTape { freq, bridge, image }))
    }

    pub fn forward(&self, f_u: &ComplexKSpace) -> Result<HybridOutput> {
        self.forward_train(f_u).map(|(out, _)| out)
    }

    /// Backpropagates the loss gradients with respect to the normalized
    /// k-space estimate and the unclamped image, accumulating into
    /// `freq_grads` and `image_grads`.
    pub fn backward(
        &self,
        tape: &HybridTape,
        g_kspace_norm: &Array3<f64>,
        g_image_raw: &Array2<f64>,
        freq_grads: &mut [f64],
        image_grads: &mut [f64],
    ) {
        let g_out = g_image_raw.mapv(|g| g * self.image_stats.std).insert_axis(Axis(0));
        let g_f0 = self.image_net.backward(&tape.image, &g_out, image_grads);
        let g_k = bridge_backward(&tape.bridge, &g_f0, &self.kspace_stats, &self.image_stats) + g_kspace_norm;
        self.freq_net.backward(&tape.freq, &g_k, freq_grads);
    }
}

/// Image-domain-only comparator: a residual U-net on the normalized
/// zero-filled reconstruction.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub net: UNet,
    pub image_stats: NormStats,
}

impl BaselineModel {
    pub fn new(config: UNetConfig, image_stats: NormStats, seed: u64) -> Result<Self> {
        if config.in_channels != 1 || config.out_channels != 1 {
            return Err(Error::Config("baseline network must map 1 channel to 1".into()));
        }
        let config = UNetConfig { residual: true, ..config };
        Ok(BaselineModel {
            net: UNet::new(config, crate::derive_seed(seed, 1))?,
            image_stats,
        })
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn normalize_input(&self, f_u: &ComplexKSpace) -> Result<Array3<f64>> {
        let zf = zero_filled_recon(f_u)?;
        Ok(zf
            .data()
            .mapv(|v| self.image_stats.normalize_value(v))
            .insert_axis(Axis(0)))
    }

    /// Returns the unclamped intensity-scale output and the tape.
    pub fn forward_train(&self, f_u: &ComplexKSpace) -> Result<(Array2<f64>, UNetTape)> {
        let (out, tape) = self.net.forward(&self.normalize_input(f_u)?)?;
        Ok((
            out.index_axis(Axis(0), 0)
                .mapv(|v| self.image_stats.denormalize_value(v)),
            tape,
        ))
    }

    pub fn forward(&self, f_u: &ComplexKSpace) -> Result<MagnitudeImage> {
        MagnitudeImage::from_clamped(self.forward_train(f_u)?.0)
    }

    pub fn backward(&self, tape: &UNetTape, g_image_raw: &Array2<f64>, grads: &mut [f64]) {
        let g_out = g_image_raw.mapv(|g| g * self.image_stats.std).insert_axis(Axis(0));
        self.net.backward(tape, &g_out, grads);
    }
}
