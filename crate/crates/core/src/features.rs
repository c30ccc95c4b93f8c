//! U-Net-style 3D encoder/decoder producing the feature pyramid X0–X8.
//!
//! X0 is a stride-1 stem block at full resolution, X1–X4 are stride-2
//! encoder blocks and X5–X8 are stride-2 transposed-convolution decoder
//! blocks whose inputs concatenate the matching encoder map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm, concat, conv3d, conv3d_transpose, kaiming_uniform, BatchNormState, ModelParams, NormMode, Real, Tensor,
};
use crate::volume::Volume;

pub const UNET_PREFIX: &str = "unet.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Channel width at resolution levels 0–4.
    pub channels: [usize; 5],
    pub kernel: usize,
    /// Decoder blocks X5–X8; disabling them leaves X0–X4 only.
    pub image_decoder: bool,
    /// Classes of the optional segmentation head on X8.
    pub seg_classes: Option<usize>,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32, 64, 128],
            kernel: 3,
            image_decoder: true,
            seg_classes: None,
        }
    }
}

impl UnetConfig {
    /// Channel widths of the maps in pyramid order.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        let c = self.channels;
        let mut out = c.to_vec();
        if self.image_decoder {
            out.extend([c[3], c[2], c[1], c[0]]);
        }
        out
    }

    /// Feature maps in the pyramid (9 with the decoder, 5 without).
    pub fn num_maps(&self) -> usize {
        if self.image_decoder {
            9
        } else {
            5
        }
    }
}

/// Multi-resolution image features; each map is `[1, C, D, H, W]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Real> {
    pub maps: Vec<Tensor<T>>,
    pub seg_logits: Option<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn bottleneck(&self) -> &Tensor<T> {
        &self.maps[4]
    }

    pub fn total_channels(&self) -> usize {
        self.maps.iter().map(|m| m.shape()[1]).sum()
    }
}

fn add_conv<T: Real, R: Rng>(
    p: &mut ModelParams<T>,
    rng: &mut R,
    name: &str,
    shape: [usize; 5],
    fan_in: usize,
) -> Result<()> {
    p.insert(format!("{name}.w"), kaiming_uniform(rng, &shape, fan_in))?;
    Ok(())
}

fn add_bn<T: Real>(p: &mut ModelParams<T>, name: &str, c: usize) -> Result<()> {
    p.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()))?;
    p.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
    p.insert_norm(name.to_string(), BatchNormState::new(c))
}

fn block_names() -> ([&'static str; 5], [&'static str; 4]) {
    (
        ["unet.stem", "unet.down1", "unet.down2", "unet.down3", "unet.down4"],
        ["unet.up1", "unet.up2", "unet.up3", "unet.up4"],
    )
}

/// Register all U-Net parameters under the `unet.` prefix.
pub fn init_unet<T: Real, R: Rng>(p: &mut ModelParams<T>, rng: &mut R, cfg: &UnetConfig) -> Result<()> {
    let k = cfg.kernel;
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    let k3 = k * k * k;
    let c = cfg.channels;
    let (enc, dec) = block_names();
    let mut cin = 1;
    for (i, name) in enc.iter().enumerate() {
        add_conv(p, rng, &format!("{name}.conv"), [c[i], cin, k, k, k], cin * k3)?;
        add_bn(p, &format!("{name}.bn"), c[i])?;
        cin = c[i];
    }
    if cfg.image_decoder {
        for (j, name) in dec.iter().enumerate() {
            let level = 3 - j;
            let cin = if j == 0 { c[4] } else { 2 * c[level + 1] };
            add_conv(p, rng, &format!("{name}.conv"), [cin, c[level], k, k, k], cin * k3)?;
            add_bn(p, &format!("{name}.bn"), c[level])?;
        }
    }
    if let Some(classes) = cfg.seg_classes {
        if !cfg.image_decoder {
            return Err(Error::Config("the segmentation head reads X8 and needs the image decoder".into()));
        }
        add_conv(p, rng, "unet.seg.conv", [classes, c[0], 1, 1, 1], c[0])?;
        p.insert("unet.seg.bias", Tensor::zeros(&[classes]))?;
    }
    Ok(())
}

fn bn_relu<T: Real>(p: &mut ModelParams<T>, x: &Tensor<T>, name: &str, mode: NormMode) -> Result<Tensor<T>> {
    let gamma = p.get(&format!("{name}.gamma"))?.clone();
    let beta = p.get(&format!("{name}.beta"))?.clone();
    let state = p.norm_mut(name)?;
    Ok(batchnorm(x, &gamma, &beta, state, mode)?.relu())
}

/// Shape `[1, 1, D, H, W]` view of a volume's intensities.
pub fn volume_tensor<T: Real>(vol: &Volume) -> Tensor<T> {
    let [d, h, w] = vol.dims;
    let data = vol.data.iter().map(|&v| T::from_real(v as f64)).collect();
    Tensor::new(&[1, 1, d, h, w], data).expect("volume dims are consistent")
}

pub fn check_divisible(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::Config(format!(
            "volume dims {dims:?} must be multiples of 16; pad the volume to the next multiple"
        )));
    }
    Ok(())
}

/// Run the encoder (and decoder, if configured) on a `[1, 1, D, H, W]` input.
pub fn unet_forward<T: Real>(
    input: &Tensor<T>,
    p: &mut ModelParams<T>,
    cfg: &UnetConfig,
    mode: NormMode,
) -> Result<FeaturePyramid<T>> {
    let s = input.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape("unet_forward", "input", format!("expected [N, 1, D, H, W], got {s:?}")));
    }
    check_divisible([s[2], s[3], s[4]])?;
    let pad = cfg.kernel / 2;
    let (enc, dec) = block_names();
    let mut maps: Vec<Tensor<T>> = Vec::with_capacity(9);
    let mut x = input.clone();
    for (i, name) in enc.iter().enumerate() {
        let w = p.get(&format!("{name}.conv.w"))?.clone();
        let stride = if i == 0 { 1 } else { 2 };
        x = bn_relu(p, &conv3d(&x, &w, None, stride, pad)?, &format!("{name}.bn"), mode)?;
        maps.push(x.clone());
    }
    if cfg.image_decoder {
        for (j, name) in dec.iter().enumerate() {
            let level = 3 - j;
            let inp = if j == 0 { x.clone() } else { concat(&[x.clone(), maps[level + 1].clone()], 1)? };
            let w = p.get(&format!("{name}.conv.w"))?.clone();
            x = bn_relu(p, &conv3d_transpose(&inp, &w, None, 2, pad, 1)?, &format!("{name}.bn"), mode)?;
            maps.push(x.clone());
        }
    }
    let seg_logits = match cfg.seg_classes {
        Some(_) => {
            let w = p.get("unet.seg.conv.w")?.clone();
            let b = p.get("unet.seg.bias")?.clone();
            Some(conv3d(maps.last().unwrap(), &w, Some(&b), 1, 0)?)
        }
        None => None,
    };
    Ok(FeaturePyramid { maps, seg_logits })
}
