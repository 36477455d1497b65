use rand::Rng;

use super::{Real, Tensor};

/// Trainable buffer with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(len: usize, bound: f64, rng: &mut R) -> Self {
        let value = (0..len)
            .map(|_| T::from_f64_lossy(if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 }))
            .collect();
        Self {
            value,
            grad: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Same-padded 1x1 or 3x3 convolution, stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
    input_shape: (usize, usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::uniform(out_channels * in_channels * kernel * kernel, bound, rng),
            bias: Param::zeros(out_channels),
            cache: None,
            input_shape: (0, 0, 0),
        }
    }

    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::zeros(out_channels * in_channels * kernel * kernel),
            bias: Param::zeros(out_channels),
            cache: None,
            input_shape: (0, 0, 0),
        }
    }

    fn cols_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        self.input_shape = (x.batch, x.height, x.width);
        let plane = x.plane();
        let mut out = Tensor::zeros(self.out_channels, x.batch, x.height, x.width);
        for (o, chunk) in out.data.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        let cols = if self.kernel == 3 { im2col(x) } else { x.clone() };
        T::gemm(
            false,
            false,
            self.out_channels,
            plane,
            self.cols_rows(),
            T::one(),
            &self.weight.value,
            &cols.data,
            T::one(),
            &mut out.data,
        );
        self.cache = train.then_some(cols);
        out
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cols = self.cache.take().expect("conv backward without a training forward");
        let plane = grad.plane();
        for (o, chunk) in grad.data.chunks(plane).enumerate() {
            let mut s = T::zero();
            for &g in chunk {
                s += g;
            }
            self.bias.grad[o] += s;
        }
        T::gemm(
            false,
            true,
            self.out_channels,
            self.cols_rows(),
            plane,
            T::one(),
            &grad.data,
            &cols.data,
            T::one(),
            &mut self.weight.grad,
        );
        let (batch, h, w) = self.input_shape;
        let mut dcols = Tensor::zeros(self.cols_rows(), batch, h, w);
        T::gemm(
            true,
            false,
            self.cols_rows(),
            plane,
            self.out_channels,
            T::one(),
            &self.weight.value,
            &grad.data,
            T::zero(),
            &mut dcols.data,
        );
        if self.kernel == 3 {
            col2im(&dcols, self.in_channels)
        } else {
            dcols
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

fn im2col<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n, h, w) = (x.channels, x.batch, x.height, x.width);
    let mut cols = Tensor::zeros(c * 9, n, h, w);
    let plane = x.plane();
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let dst = &mut cols.data[row * plane..(row + 1) * plane];
                for b in 0..n {
                    let src = x.image(ci, b);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[(b * h + y) * w..(b * h + y + 1) * w];
                        match kx {
                            0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                            1 => dst_row.copy_from_slice(src_row),
                            _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &Tensor<T>, channels: usize) -> Tensor<T> {
    let (n, h, w) = (cols.batch, cols.height, cols.width);
    let mut x = Tensor::zeros(channels, n, h, w);
    let plane = cols.plane();
    for ci in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let src = &cols.data[row * plane..(row + 1) * plane];
                for b in 0..n {
                    let dst = x.image_mut(ci, b);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &src[(b * h + y) * w..(b * h + y + 1) * w];
                        let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                for i in 0..w - 1 {
                                    dst_row[i] += src_row[i + 1];
                                }
                            }
                            1 => {
                                for i in 0..w {
                                    dst_row[i] += src_row[i];
                                }
                            }
                            _ => {
                                for i in 1..w {
                                    dst_row[i] += src_row[i - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Fully connected layer on row-major `[rows, in]` matrices.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Vec<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::uniform(outputs * inputs, bound, rng),
            bias: Param::zeros(outputs),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[T], rows: usize, train: bool) -> Vec<T> {
        assert_eq!(x.len(), rows * self.inputs, "linear input size");
        let mut out: Vec<T> = (0..rows).flat_map(|_| self.bias.value.iter().copied()).collect();
        T::gemm(false, true, rows, self.outputs, self.inputs, T::one(), x, &self.weight.value, T::one(), &mut out);
        self.cache = train.then(|| x.to_vec());
        out
    }

    pub fn backward(&mut self, grad: &[T], rows: usize) -> Vec<T> {
        let x = self.cache.take().expect("linear backward without a training forward");
        for r in 0..rows {
            for o in 0..self.outputs {
                self.bias.grad[o] += grad[r * self.outputs + o];
            }
        }
        T::gemm(true, false, self.outputs, self.inputs, rows, T::one(), grad, &x, T::one(), &mut self.weight.grad);
        let mut dx = vec![T::zero(); rows * self.inputs];
        T::gemm(false, false, rows, self.inputs, self.outputs, T::one(), grad, &self.weight.value, T::zero(), &mut dx);
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// `x * sigmoid(x)`, caching its input for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Silu<T> {
    cache: Option<Vec<T>>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Silu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward_vec(&mut self, x: &[T], train: bool) -> Vec<T> {
        let out = x.iter().map(|&v| v * sigmoid(v)).collect();
        self.cache = train.then(|| x.to_vec());
        out
    }

    pub fn backward_vec(&mut self, grad: &[T]) -> Vec<T> {
        let x = self.cache.take().expect("silu backward without a training forward");
        x.iter()
            .zip(grad)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * (s + v * s * (T::one() - s))
            })
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        Tensor::from_data(x.channels, x.batch, x.height, x.width, self.forward_vec(&x.data, train))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        Tensor::from_data(grad.channels, grad.batch, grad.height, grad.width, self.backward_vec(&grad.data))
    }
}

/// Sinusoidal step embedding, `[steps.len(), dim]` row-major.
pub fn sinusoidal_embedding<T: Real>(steps: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); steps.len() * dim];
    for (r, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[r * dim + i] = T::from_f64_lossy(arg.sin());
            out[r * dim + half + i] = T::from_f64_lossy(arg.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros(conv.out_channels, x.batch, x.height, x.width);
        for o in 0..conv.out_channels {
            for n in 0..x.batch {
                for y in 0..x.height as isize {
                    for xx in 0..x.width as isize {
                        let mut s = conv.bias.value[o];
                        for c in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                        continue;
                                    }
                                    let wi = ((o * conv.in_channels + c) as isize * k + ky) * k + kx;
                                    s += conv.weight.value[wi as usize]
                                        * x.image(c, n)[sy as usize * x.width + sx as usize];
                                }
                            }
                        }
                        out.image_mut(o, n)[y as usize * x.width + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [1, 3] {
            let mut conv = Conv2d::<f64>::new(3, 4, kernel, &mut rng);
            conv.bias = Param::uniform(4, 0.5, &mut rng);
            let x = Tensor::from_data(3, 2, 5, 6, (0..180).map(|_| rng.random_range(-1.0..1.0)).collect());
            let fast = conv.forward(&x, false);
            let slow = direct_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv_nobias(x), g> == <x, backward(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let x = Tensor::from_data(2, 2, 4, 5, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect());
        let g = Tensor::from_data(3, 2, 4, 5, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = conv.forward(&x, true);
        let dx = conv.backward(&g);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn zeroed_conv_outputs_zero() {
        let mut conv = Conv2d::<f32>::zeroed(2, 1, 3);
        let x = Tensor::from_data(2, 1, 4, 4, vec![1.5; 32]);
        assert!(conv.forward(&x, false).data.iter().all(|&v| v == 0.0));
    }
}
