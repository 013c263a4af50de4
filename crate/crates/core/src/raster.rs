//! Multi-channel real-valued rasters and bilinear sampling.
//!
//! Pixel centers sit at integer coordinates with the origin at the top-left
//! pixel center, `x` to the right and `y` down.

use crate::error::{Error, Result};

/// Out-of-bounds policy for bilinear reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Clamp-to-edge.
    #[default]
    Clamp,
    /// Taps outside the grid read zero.
    Zero,
}

/// Row-major interleaved raster of `channels` reals per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "raster buffer holds {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a raster by evaluating `f(x, y, out)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut r = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) * channels;
                f(x, y, &mut r.data[i..i + channels]);
            }
        }
        r
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Raster, what: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                what,
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        if self.channels != other.channels {
            return Err(Error::Argument(format!(
                "{what}: channel count {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    /// Keeps one channel.
    pub fn channel(&self, c: usize) -> Raster {
        Raster::from_fn(self.width, self.height, 1, |x, y, out| out[0] = self.get(x, y, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.check_same_shape(other, "mean_abs_diff")?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Mean absolute difference restricted to pixels where `mask > 0.5`.
    /// Returns 0 when the mask is empty.
    pub fn masked_mean_abs_diff(&self, other: &Raster, mask: &Raster) -> Result<f64> {
        self.check_same_shape(other, "masked_mean_abs_diff")?;
        if mask.dims() != self.dims() {
            return Err(Error::Dimension {
                what: "masked_mean_abs_diff mask",
                expected: self.dims(),
                actual: mask.dims(),
            });
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(x, y, 0) > 0.5 {
                    for (a, b) in self.pixel(x, y).iter().zip(other.pixel(x, y)) {
                        sum += (a - b).abs();
                    }
                    n += self.channels;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Bilinear read at continuous `(x, y)` into `out` (one value per channel).
    pub fn sample_into(&self, x: f64, y: f64, border: Border, out: &mut [f64]) {
        let taps = BilinearTaps::new(x, y, self.width, self.height, border);
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..4 {
            if let Some(i) = taps.index[t] {
                let w = taps.weight[t];
                if w != 0.0 {
                    let px = &self.data[i * self.channels..(i + 1) * self.channels];
                    for (o, v) in out.iter_mut().zip(px) {
                        *o += w * v;
                    }
                }
            }
        }
    }

    /// Single-channel convenience read.
    pub fn sample_scalar(&self, x: f64, y: f64, c: usize, border: Border) -> f64 {
        let taps = BilinearTaps::new(x, y, self.width, self.height, border);
        let mut v = 0.0;
        for t in 0..4 {
            if let Some(i) = taps.index[t] {
                v += taps.weight[t] * self.data[i * self.channels + c];
            }
        }
        v
    }

    /// Bilinear read plus its partial derivatives with respect to `x` and `y`
    /// (the piecewise-linear subgradient; derivatives are taken on the cell
    /// that contains the point).
    pub fn sample_with_grad(
        &self,
        x: f64,
        y: f64,
        border: Border,
        value: &mut [f64],
        d_dx: &mut [f64],
        d_dy: &mut [f64],
    ) {
        let taps = BilinearTaps::new(x, y, self.width, self.height, border);
        for s in [&mut *value, &mut *d_dx, &mut *d_dy] {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        for t in 0..4 {
            if let Some(i) = taps.index[t] {
                let px = &self.data[i * self.channels..(i + 1) * self.channels];
                for c in 0..self.channels {
                    value[c] += taps.weight[t] * px[c];
                    d_dx[c] += taps.dw_dx[t] * px[c];
                    d_dy[c] += taps.dw_dy[t] * px[c];
                }
            }
        }
    }

    /// Adjoint of [`Raster::sample_into`]: accumulates `grad` (one value per
    /// channel) into the taps read at `(x, y)`.
    pub fn splat_add(&mut self, x: f64, y: f64, border: Border, grad: &[f64]) {
        let taps = BilinearTaps::new(x, y, self.width, self.height, border);
        for t in 0..4 {
            if let Some(i) = taps.index[t] {
                let w = taps.weight[t];
                if w != 0.0 {
                    let px = &mut self.data[i * self.channels..(i + 1) * self.channels];
                    for (p, g) in px.iter_mut().zip(grad) {
                        *p += w * g;
                    }
                }
            }
        }
    }
}

/// The four taps of a bilinear read: flat pixel indices (None for zero-fill
/// taps outside the grid), weights and weight derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps {
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    pub dw_dx: [f64; 4],
    pub dw_dy: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize, border: Border) -> Self {
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f as i64;
        let y0 = y0f as i64;
        let (w, h) = (width as i64, height as i64);
        let idx = |xi: i64, yi: i64| -> Option<usize> {
            match border {
                Border::Clamp => {
                    let xc = xi.clamp(0, w - 1);
                    let yc = yi.clamp(0, h - 1);
                    Some((yc * w + xc) as usize)
                }
                Border::Zero => {
                    if xi < 0 || yi < 0 || xi >= w || yi >= h {
                        None
                    } else {
                        Some((yi * w + xi) as usize)
                    }
                }
            }
        };
        Self {
            index: [
                idx(x0, y0),
                idx(x0 + 1, y0),
                idx(x0, y0 + 1),
                idx(x0 + 1, y0 + 1),
            ],
            weight: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            dw_dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
            dw_dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
        }
    }
}
