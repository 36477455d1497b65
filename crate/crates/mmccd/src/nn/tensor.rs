use super::Real;

/// Dense activation tensor in `[channels, batch, height, width]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_data(channels: usize, batch: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * batch * height * width, "tensor buffer size");
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    /// Elements per channel (`batch * height * width`).
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.batch, self.height, self.width)
            == (other.channels, other.batch, other.height, other.width)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Pixels of sample `n` in channel `c`.
    pub fn image(&self, c: usize, n: usize) -> &[T] {
        let s = self.spatial();
        let start = c * self.plane() + n * s;
        &self.data[start..start + s]
    }

    pub fn image_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let s = self.spatial();
        let start = c * self.plane() + n * s;
        &mut self.data[start..start + s]
    }

    /// Stacks `self` over `other` along channels.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width),
            "concat shape"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_data(self.channels + other.channels, self.batch, self.height, self.width, data)
    }

    /// Inverse of [`Tensor::concat_channels`]: splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let cut = first * self.plane();
        (
            Self::from_data(first, self.batch, self.height, self.width, self.data[..cut].to_vec()),
            Self::from_data(
                self.channels - first,
                self.batch,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2x2 average pooling.
    pub fn avg_pool2(&self) -> Self {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, self.batch, h2, w2);
        let quarter = T::from_f64_lossy(0.25);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.image(c, n);
                let dst = out.image_mut(c, n);
                for y in 0..h2 {
                    for x in 0..w2 {
                        let i = 2 * y * self.width + 2 * x;
                        dst[y * w2 + x] =
                            (src[i] + src[i + 1] + src[i + self.width] + src[i + self.width + 1]) * quarter;
                    }
                }
            }
        }
        out
    }

    /// Gradient of [`Tensor::avg_pool2`] back to the `2h x 2w` input.
    pub fn avg_pool2_backward(&self) -> Self {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Self::zeros(self.channels, self.batch, h, w);
        let quarter = T::from_f64_lossy(0.25);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.image(c, n).to_vec();
                let dst = out.image_mut(c, n);
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(y / 2) * self.width + x / 2] * quarter;
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Self {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Self::zeros(self.channels, self.batch, h, w);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.image(c, n).to_vec();
                let dst = out.image_mut(c, n);
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(y / 2) * self.width + x / 2];
                    }
                }
            }
        }
        out
    }

    /// Gradient of [`Tensor::upsample2`]: sums each 2x2 block.
    pub fn upsample2_backward(&self) -> Self {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut out = Self::zeros(self.channels, self.batch, h2, w2);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let src = self.image(c, n).to_vec();
                let dst = out.image_mut(c, n);
                for y in 0..h2 {
                    for x in 0..w2 {
                        let i = 2 * y * self.width + 2 * x;
                        dst[y * w2 + x] = src[i] + src[i + 1] + src[i + self.width] + src[i + self.width + 1];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_data(1, 2, 2, 2, (0..8).map(|v| v as f32).collect());
        let b = Tensor::from_data(2, 2, 2, 2, (8..24).map(|v| v as f32).collect());
        let c = a.concat_channels(&b);
        assert_eq!(c.channels, 3);
        assert_eq!(c.split_channels(1), (a, b));
    }

    #[test]
    fn pooling_adjoints() {
        // <pool(x), y> == <x, pool_backward(y)> and likewise for upsampling
        let x = Tensor::from_data(2, 1, 4, 4, (0..32).map(|v| (v as f64 * 0.37).sin()).collect());
        let y = Tensor::from_data(2, 1, 2, 2, (0..8).map(|v| (v as f64 * 1.3).cos()).collect());
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&x.avg_pool2(), &y) - dot(&x, &y.avg_pool2_backward())).abs() < 1e-12);
        assert!((dot(&y.upsample2(), &x) - dot(&y, &x.upsample2_backward())).abs() < 1e-12);
    }
}
