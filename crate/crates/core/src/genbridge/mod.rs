//! Vector to image generation: the analytic toy generator/embedder pair, the
//! subprocess bridge for external models, PGM/PPM I/O and fidelity metrics.

mod bridge;
mod pnm;
mod toy;

pub use bridge::{bridge_generate, BridgeConfig, BridgeMode, BridgeOutput, BRIDGE_TIMEOUT_ENV};
pub use pnm::{decode_pnm, encode_pnm, quantize, read_pnm, write_pnm};
pub use toy::{PoseSurrogate, QualitySurrogate, ToyGenerator, DEFAULT_GAIN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::cosine_similarity;

/// Row-major image with interleaved channels and pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Pixels are clamped to `[0, 1]`; non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!("invalid image shape {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite pixel value".into()));
        }
        pixels.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// A vector to image map, optionally differentiable.
pub trait Generator: Send + Sync {
    fn generate(&self, v: &[f64]) -> Result<Image>;

    /// Vector-Jacobian product of [`Generator::generate`] at `v`;
    /// `Ok(None)` when the generator is a black box.
    fn vjp(&self, _v: &[f64], _image_cotangent: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// An image to embedding map (the face-recognition model).
pub trait Embedder: Send + Sync {
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;

    /// Image cotangent for an embedding cotangent, if differentiable.
    fn embed_vjp(&self, _image: &Image, _cotangent: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// An image to scalar measurement (pose in degrees, quality score).
pub trait ScalarEvaluator: Send + Sync {
    fn value(&self, image: &Image) -> Result<f64>;

    /// Gradient of [`ScalarEvaluator::value`] with respect to the pixels.
    fn gradient(&self, _image: &Image) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Mean squared pixel difference.
pub fn reconstruction_mse(rec: &Image, gt: &Image) -> Result<f64> {
    if rec.shape() != gt.shape() {
        return Err(Error::Shape(format!("images {:?} and {:?}", rec.shape(), gt.shape())));
    }
    let sum: f64 = rec.pixels.iter().zip(&gt.pixels).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / rec.pixels.len() as f64)
}

/// `1 − cos(emb_rec, emb_gt)`.
pub fn identity_similarity_loss(emb_rec: &[f64], emb_gt: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(emb_rec, emb_gt)?)
}
