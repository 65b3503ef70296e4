use autograd::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Batch of images, `[batch, channels, height, width]`, row-major.
///
/// Values are normalized to `[0, 1]` unless a caller says otherwise (noisy
/// diffusion states are unbounded).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlanes(Tensor);

impl ImagePlanes {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self(Tensor::new(&shape, data)))
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self(Tensor::zeros(&shape))
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self(Tensor::full(&shape, value))
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self(Tensor::new(&shape, data))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 {
            return Err(Error::Shape(format!("expected rank 4, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    /// Standard normal draws.
    pub fn randn(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self(Tensor::new(&shape, data))
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    #[inline]
    fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape();
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.0.data_mut()[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let [_, _, h, w] = self.shape();
        let start = self.index(n, c, 0, 0);
        &self.0.data()[start..start + h * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.map(f))
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self(self.0.zip_map(&other.0, f)))
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    /// Single batch item as a batch of one.
    pub fn item(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape();
        let len = c * h * w;
        Self(Tensor::new(&[1, c, h, w], self.0.data()[n * len..(n + 1) * len].to_vec()))
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[ImagePlanes]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
        let [_, c, h, w] = first.shape();
        let mut data = Vec::new();
        let mut n = 0;
        for it in items {
            let [bn, bc, bh, bw] = it.shape();
            if (bc, bh, bw) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "stack of {:?} with {:?}",
                    first.shape(),
                    it.shape()
                )));
            }
            data.extend_from_slice(it.data());
            n += bn;
        }
        Self::new([n, c, h, w], data)
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn all_finite(&self) -> bool {
        self.0.all_finite()
    }
}

impl From<ImagePlanes> for Tensor {
    fn from(p: ImagePlanes) -> Self {
        p.0
    }
}
