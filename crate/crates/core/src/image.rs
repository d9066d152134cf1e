//! Planar `f64` images (`[C, H, W]`, row-major).

use sha2::{Digest, Sha256};

use crate::tensor::{Tensor, TensorError};

/// BT.601 luma weights for RGB.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(TensorError::Shape {
                op: "image",
                detail: format!("{channels}x{height}x{width} image with {} values", data.len()),
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Single-channel luminance: BT.601 for RGB, the plane itself for gray.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect();
        Image { channels: 1, height: self.height, width: self.width, data }
    }

    /// SHA-256 over the dimensions and the raw little-endian sample bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.channels, self.height, self.width] {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.height, self.width], self.data.clone()).expect("valid image dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            [1, c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(TensorError::Shape { op: "image", detail: format!("cannot view {:?} as an image", t.shape()) }),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width, "crop window out of bounds");
        Image::from_fn(self.channels, height, width, |c, y, x| self.get(c, top + y, left + x))
    }

    /// Reflect-pad (mirror without repeating the edge) on the bottom/right to `height×width`.
    pub fn pad_reflect_to(&self, height: usize, width: usize) -> Image {
        assert!(height >= self.height && width >= self.width);
        Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, reflect_index(y as isize, self.height), reflect_index(x as isize, self.width))
        })
    }
}

/// Mirror an index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}
