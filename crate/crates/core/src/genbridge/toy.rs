//! Analytic generator/embedder pair: an orthonormal linear map into pixel
//! space with a clamp, and its left inverse.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{Embedder, Generator, Image, ScalarEvaluator};
use crate::error::{Error, Result};
use crate::numkit::{dot, norm, RngState, RowMatrix};

/// Gain giving per-pixel excursions with rms `4/√p` for unit directions.
pub const DEFAULT_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    /// p×d, orthonormal columns.
    basis: RowMatrix,
    gain: f64,
    height: usize,
    width: usize,
}

impl ToyGenerator {
    /// Random orthonormal basis of a `height·width` grayscale pixel space.
    pub fn new(dim: usize, height: usize, width: usize, gain: f64, seed: u64) -> Result<Self> {
        let p = height * width;
        if dim == 0 || p < dim {
            return Err(Error::Config(format!(
                "toy generator needs 1 <= dim <= pixels, got dim {dim} for {height}x{width}"
            )));
        }
        let mut g = RngState::new(seed, 0x70).rng();
        let a = DMatrix::<f64>::from_fn(p, dim, |_, _| StandardNormal.sample(&mut g));
        let qr = a.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut basis = RowMatrix::zeros(p, dim);
        for j in 0..dim {
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..p {
                basis[(i, j)] = s * q[(i, j)];
            }
        }
        ToyGenerator::from_basis(basis, height, width, gain)
    }

    /// The default 24×24 generator for `dim`-dimensional vectors.
    pub fn with_defaults(dim: usize, seed: u64) -> Result<Self> {
        ToyGenerator::new(dim, 24, 24, DEFAULT_GAIN, seed)
    }

    pub fn from_basis(basis: RowMatrix, height: usize, width: usize, gain: f64) -> Result<Self> {
        if basis.nrows() != height * width || basis.ncols() == 0 {
            return Err(Error::Shape(format!(
                "basis {}x{} for a {height}x{width} image",
                basis.nrows(),
                basis.ncols()
            )));
        }
        if !(gain >= 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("gain must be finite and >= 0, got {gain}")));
        }
        let gram = basis.transpose().matmul(&basis)?;
        let d = basis.ncols();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - want).abs() > 1e-8 {
                    return Err(Error::Domain("basis columns are not orthonormal".into()));
                }
            }
        }
        Ok(ToyGenerator {
            basis,
            gain,
            height,
            width,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn pixel_count(&self) -> usize {
        self.basis.nrows()
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn basis(&self) -> &RowMatrix {
        &self.basis
    }

    fn check_vector(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!("vector of length {} for generator of dim {}", v.len(), self.dim())));
        }
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::Domain("cannot generate from the zero vector".into()));
        }
        Ok(n)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.shape() != (self.height, self.width, 1) {
            return Err(Error::Shape(format!(
                "image {:?} for a {}x{} grayscale generator",
                img.shape(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    /// Pre-clamp pixel values `0.5 + β·W·v̂`.
    fn raw_pixels(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_vector(v)?;
        let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
        let y = self.basis.matvec(&unit)?;
        Ok(y.into_iter().map(|y| 0.5 + self.gain * y).collect())
    }

    pub fn generate(&self, v: &[f64]) -> Result<Image> {
        Image::new(self.height, self.width, 1, self.raw_pixels(v)?)
    }

    /// `Wᵀ·(pixels − 0.5)/β`, before normalization.
    pub fn embed_raw(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_image(img)?;
        if self.gain == 0.0 {
            return Err(Error::Domain("zero-gain generator has no inverse".into()));
        }
        let centered: Vec<f64> = img.pixels().iter().map(|x| (x - 0.5) / self.gain).collect();
        self.basis.tr_matvec(&centered)
    }

    pub fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let pre = self.embed_raw(img)?;
        let n = norm(&pre);
        if n == 0.0 {
            return Err(Error::Domain("image embeds to the zero vector".into()));
        }
        Ok(pre.into_iter().map(|x| x / n).collect())
    }

    /// Exact VJP of [`ToyGenerator::generate`]; clamped pixels pass no gradient.
    pub fn vjp(&self, v: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_pixels(v)?;
        if cot.len() != raw.len() {
            return Err(Error::Shape(format!("cotangent of length {} for {} pixels", cot.len(), raw.len())));
        }
        let masked: Vec<f64> = raw
            .iter()
            .zip(cot)
            .map(|(&r, &c)| if (0.0..=1.0).contains(&r) { self.gain * c } else { 0.0 })
            .collect();
        let g_unit = self.basis.tr_matvec(&masked)?;
        Ok(project_out(v, &g_unit))
    }

    /// Pixel cotangent for a cotangent on the normalized embedding.
    pub fn embed_vjp(&self, img: &Image, cot: &[f64]) -> Result<Vec<f64>> {
        let pre = self.embed_raw(img)?;
        if cot.len() != pre.len() {
            return Err(Error::Shape(format!("cotangent of length {} for dim {}", cot.len(), pre.len())));
        }
        if norm(&pre) == 0.0 {
            return Err(Error::Domain("image embeds to the zero vector".into()));
        }
        let g_pre = project_out(&pre, cot);
        Ok(self.basis.matvec(&g_pre)?.into_iter().map(|x| x / self.gain).collect())
    }
}

/// Jacobian of `x ↦ x/‖x‖` applied to `g`: `(g − x̂⟨x̂, g⟩)/‖x‖`.
fn project_out(x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let c = dot(x, g) / (n * n);
    x.iter().zip(g).map(|(xi, gi)| (gi - c * xi) / n).collect()
}

impl Generator for ToyGenerator {
    fn generate(&self, v: &[f64]) -> Result<Image> {
        ToyGenerator::generate(self, v)
    }

    fn vjp(&self, v: &[f64], image_cotangent: &[f64]) -> Result<Option<Vec<f64>>> {
        ToyGenerator::vjp(self, v, image_cotangent).map(Some)
    }
}

impl Embedder for ToyGenerator {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        ToyGenerator::embed(self, image)
    }

    fn embed_vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Option<Vec<f64>>> {
        ToyGenerator::embed_vjp(self, image, cotangent).map(Some)
    }
}

/// Pose in degrees: `90·⟨u, embed(image)⟩`.
#[derive(Debug, Clone)]
pub struct PoseSurrogate {
    generator: Arc<ToyGenerator>,
    axis: Vec<f64>,
}

impl PoseSurrogate {
    /// `axis` is normalized.
    pub fn new(generator: Arc<ToyGenerator>, axis: &[f64]) -> Result<Self> {
        if axis.len() != generator.dim() {
            return Err(Error::Shape("pose axis does not match generator dimension".into()));
        }
        let n = norm(axis);
        if n == 0.0 {
            return Err(Error::Domain("pose axis is the zero vector".into()));
        }
        Ok(PoseSurrogate {
            generator,
            axis: axis.iter().map(|x| x / n).collect(),
        })
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }
}

impl ScalarEvaluator for PoseSurrogate {
    fn value(&self, image: &Image) -> Result<f64> {
        Ok(90.0 * dot(&self.axis, &self.generator.embed(image)?))
    }

    fn gradient(&self, image: &Image) -> Result<Option<Vec<f64>>> {
        let cot: Vec<f64> = self.axis.iter().map(|a| 90.0 * a).collect();
        self.generator.embed_vjp(image, &cot).map(Some)
    }
}

/// Quality score `q0 + q1·‖embed_raw(image)‖`.
#[derive(Debug, Clone)]
pub struct QualitySurrogate {
    generator: Arc<ToyGenerator>,
    pub offset: f64,
    pub scale: f64,
}

impl QualitySurrogate {
    pub fn new(generator: Arc<ToyGenerator>, offset: f64, scale: f64) -> Self {
        QualitySurrogate {
            generator,
            offset,
            scale,
        }
    }
}

impl ScalarEvaluator for QualitySurrogate {
    fn value(&self, image: &Image) -> Result<f64> {
        Ok(self.offset + self.scale * norm(&self.generator.embed_raw(image)?))
    }

    fn gradient(&self, image: &Image) -> Result<Option<Vec<f64>>> {
        let pre = self.generator.embed_raw(image)?;
        let n = norm(&pre);
        if n == 0.0 {
            return Err(Error::Domain("quality gradient undefined at a blank image".into()));
        }
        let g = self.generator.basis.matvec(&pre)?;
        let s = self.scale / (n * self.generator.gain);
        Ok(Some(g.into_iter().map(|x| s * x).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::cosine_similarity;

    fn random_vec(d: usize, seed: u64) -> Vec<f64> {
        let mut g = RngState::new(seed, 1).rng();
        (0..d).map(|_| StandardNormal.sample(&mut g)).collect()
    }

    fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(b).max(1e-300)
    }

    #[test]
    fn basis_is_orthonormal() {
        let g = ToyGenerator::with_defaults(512, 1).unwrap();
        assert_eq!(g.pixel_count(), 576);
        let gram = g.basis().transpose().matmul(g.basis()).unwrap();
        for i in 0..512 {
            for j in 0..512 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direction_only_and_zero_gain() {
        let g = ToyGenerator::new(16, 6, 6, DEFAULT_GAIN, 2).unwrap();
        let v = random_vec(16, 3);
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.generate(&v).unwrap(), g.generate(&v2).unwrap());
        let flat = ToyGenerator::new(16, 6, 6, 0.0, 2).unwrap();
        assert!(flat.generate(&v).unwrap().pixels().iter().all(|&p| p == 0.5));
        let blank = Image::filled(6, 6, 1, 0.5).unwrap();
        assert!(matches!(g.embed(&blank), Err(Error::Domain(_))));
        assert!(matches!(g.generate(&[0.0; 16]), Err(Error::Domain(_))));
    }

    #[test]
    fn clamping_is_rare() {
        let g = ToyGenerator::with_defaults(512, 5).unwrap();
        let mut clamped = 0;
        let mut total = 0;
        for s in 0..200 {
            let raw = g.raw_pixels(&random_vec(512, s)).unwrap();
            clamped += raw.iter().filter(|r| !(0.0..=1.0).contains(*r)).count();
            total += raw.len();
        }
        let frac = clamped as f64 / total as f64;
        assert!(frac > 0.0 && frac < 0.01, "clamped fraction {frac}");
    }

    #[test]
    fn round_trip_cosine() {
        let g = ToyGenerator::with_defaults(512, 6).unwrap();
        let mut worst_free: f64 = 1.0;
        let mut worst: f64 = 1.0;
        let mut free = 0;
        for s in 0..1000 {
            let v = random_vec(512, 100 + s);
            let c = cosine_similarity(&g.embed(&g.generate(&v).unwrap()).unwrap(), &v).unwrap();
            if g.raw_pixels(&v).unwrap().iter().all(|r| (0.0..=1.0).contains(r)) {
                free += 1;
                worst_free = worst_free.min(c);
            }
            worst = worst.min(c);
        }
        assert!(free > 0);
        assert!(worst_free > 0.999, "worst unclamped round-trip cosine {worst_free}");
        // the default gain clamps a few pixels per image, which costs a little
        assert!(worst > 0.995, "worst round-trip cosine {worst}");
        let e1 = crate::numkit::FeatureVector::basis(512, 0);
        let back = g.embed(&g.generate(&e1).unwrap()).unwrap();
        assert!(cosine_similarity(&back, &e1).unwrap() > 0.999);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let g = ToyGenerator::new(24, 8, 8, 1.0, 7).unwrap();
        let mut checked = 0;
        for s in 0..5 {
            let v = random_vec(24, 20 + s);
            let cot = random_vec(64, 40 + s);
            let f = |x: &[f64]| {
                let img = g.generate(x).unwrap();
                dot(img.pixels(), &cot)
            };
            let fd = central(f, &v, 1e-6);
            let an = g.vjp(&v, &cot).unwrap();
            let raw = g.raw_pixels(&v).unwrap();
            if raw.iter().all(|r| (0.0..=1.0).contains(r)) {
                assert!(rel_err(&an, &fd) < 1e-5, "rel err {}", rel_err(&an, &fd));
                checked += 1;
            }
        }
        assert!(checked > 0);
        let v = random_vec(24, 1);
        assert!(g.vjp(&v, &[0.0; 64]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vjp_ignores_clamped_pixels() {
        let g = ToyGenerator::new(4, 3, 3, 50.0, 8).unwrap();
        let v = random_vec(4, 2);
        let raw = g.raw_pixels(&v).unwrap();
        let cot: Vec<f64> = raw.iter().map(|r| if (0.0..=1.0).contains(r) { 0.0 } else { 1.0 }).collect();
        assert!(cot.iter().any(|&c| c == 1.0));
        assert!(g.vjp(&v, &cot).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn surrogate_gradients() {
        let g = Arc::new(ToyGenerator::new(24, 8, 8, 1.0, 9).unwrap());
        let pose = PoseSurrogate::new(g.clone(), &random_vec(24, 3)).unwrap();
        let quality = QualitySurrogate::new(g.clone(), 1.0, 27.0);
        let img = g.generate(&random_vec(24, 4)).unwrap();
        let px = img.pixels().to_vec();
        let as_img = |p: &[f64]| Image::new(8, 8, 1, p.to_vec()).unwrap();
        let fd_pose = central(|p| pose.value(&as_img(p)).unwrap(), &px, 1e-7);
        let fd_q = central(|p| quality.value(&as_img(p)).unwrap(), &px, 1e-7);
        assert!(rel_err(&pose.gradient(&img).unwrap().unwrap(), &fd_pose) < 1e-5);
        assert!(rel_err(&quality.gradient(&img).unwrap().unwrap(), &fd_q) < 1e-5);
    }
}
