use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_embedding, Conv2d, Linear, Param, Silu};
use super::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum UnetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("non-finite network output ({0}); training diverged")]
    NonFinite(&'static str),
}

/// Optional information bottleneck at the lowest resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "channels")]
pub enum Latent {
    #[default]
    None,
    /// Linear projection to `channels` feature maps and back.
    Bottleneck(usize),
    /// Gaussian latent with `channels` maps; mean and log-variance heads.
    Variational(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub base_width: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    pub time_embedding: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_connections: bool,
    pub latent: Latent,
    /// Side length of the square input.
    pub input_size: usize,
    /// Seed for parameter initialization and variational sampling.
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 3,
            time_embedding: false,
            in_channels: 1,
            out_channels: 1,
            skip_connections: true,
            latent: Latent::None,
            input_size: 128,
            seed: 0,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<(), UnetError> {
        let bad = |m: &str| Err(UnetError::InvalidConfig(m.to_string()));
        if self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("widths and channel counts must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        let factor = 1usize << self.depth.min(30);
        if self.input_size % factor != 0 {
            return bad("input size must be divisible by 2^depth");
        }
        if self.input_size / factor < 4 {
            return bad("depth leaves a bottleneck smaller than 4x4");
        }
        if self.time_embedding && self.base_width < 2 {
            return bad("time embedding needs base_width >= 2");
        }
        match self.latent {
            Latent::Bottleneck(0) | Latent::Variational(0) => bad("latent channels must be positive"),
            _ => Ok(()),
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(2))
    }

    fn embed_dim(&self) -> usize {
        4 * self.base_width
    }

    fn sinusoid_dim(&self) -> usize {
        self.base_width.max(2) / 2 * 2
    }
}

#[derive(Debug, Clone)]
struct ResBlock<T> {
    act1: Silu<T>,
    conv1: Conv2d<T>,
    time_proj: Option<Linear<T>>,
    act2: Silu<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Real> ResBlock<T> {
    fn new<R: Rng>(cin: usize, cout: usize, embed: Option<usize>, rng: &mut R) -> Self {
        Self {
            act1: Silu::new(),
            conv1: Conv2d::new(cin, cout, 3, rng),
            time_proj: embed.map(|e| Linear::new(e, cout, rng)),
            act2: Silu::new(),
            conv2: Conv2d::new(cout, cout, 3, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, embed: Option<&[T]>, train: bool) -> Tensor<T> {
        let a = self.act1.forward(x, train);
        let mut h = self.conv1.forward(&a, train);
        if let (Some(proj), Some(e)) = (self.time_proj.as_mut(), embed) {
            let shift = proj.forward(e, h.batch, train);
            let cout = h.channels;
            for c in 0..cout {
                for n in 0..h.batch {
                    let s = shift[n * cout + c];
                    h.image_mut(c, n).iter_mut().for_each(|v| *v += s);
                }
            }
        }
        let a2 = self.act2.forward(&h, train);
        let mut out = self.conv2.forward(&a2, train);
        match self.shortcut.as_mut() {
            Some(sc) => out.add_assign(&sc.forward(x, train)),
            None => out.add_assign(x),
        }
        out
    }

    /// Returns the input gradient and, with time conditioning, the gradient
    /// with respect to the shared embedding.
    fn backward(&mut self, grad: &Tensor<T>) -> (Tensor<T>, Option<Vec<T>>) {
        let da2 = self.conv2.backward(grad);
        let dh = self.act2.backward(&da2);
        let d_embed = self.time_proj.as_mut().map(|proj| {
            let cout = dh.channels;
            let mut dshift = vec![T::zero(); dh.batch * cout];
            for c in 0..cout {
                for n in 0..dh.batch {
                    let mut s = T::zero();
                    for &g in dh.image(c, n) {
                        s += g;
                    }
                    dshift[n * cout + c] = s;
                }
            }
            proj.backward(&dshift, dh.batch)
        });
        let da = self.conv1.backward(&dh);
        let mut dx = self.act1.backward(&da);
        match self.shortcut.as_mut() {
            Some(sc) => dx.add_assign(&sc.backward(grad)),
            None => dx.add_assign(grad),
        }
        (dx, d_embed)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        if let Some(p) = self.time_proj.as_mut() {
            p.visit_params(&format!("{prefix}.time_proj"), f);
        }
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_params(&format!("{prefix}.shortcut"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct TimeMlp<T> {
    lin1: Linear<T>,
    act1: Silu<T>,
    lin2: Linear<T>,
    act2: Silu<T>,
}

#[derive(Debug, Clone)]
struct LatentLayers<T> {
    mean: Conv2d<T>,
    log_var: Option<Conv2d<T>>,
    decode: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct LatentCache<T> {
    mean: Vec<T>,
    log_var: Vec<T>,
    noise: Vec<T>,
}

/// Encoder-decoder with a residual block per resolution, optional skip
/// connections, optional additive step embedding and an optional latent
/// bottleneck. The output convolution starts at zero.
#[derive(Debug, Clone)]
pub struct Unet<T> {
    config: UnetConfig,
    conv_in: Conv2d<T>,
    encoders: Vec<ResBlock<T>>,
    middle: ResBlock<T>,
    latent: Option<LatentLayers<T>>,
    decoders: Vec<ResBlock<T>>,
    act_out: Silu<T>,
    conv_out: Conv2d<T>,
    time_mlp: Option<TimeMlp<T>>,
    sampler: ChaCha8Rng,
    latent_cache: Option<LatentCache<T>>,
    last_kl: f64,
    train_batch: usize,
}

impl<T: Real> Unet<T> {
    pub fn new(config: UnetConfig) -> Result<Self, UnetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = config.time_embedding.then(|| config.embed_dim());
        let time_mlp = config.time_embedding.then(|| TimeMlp {
            lin1: Linear::new(config.sinusoid_dim(), config.embed_dim(), &mut rng),
            act1: Silu::new(),
            lin2: Linear::new(config.embed_dim(), config.embed_dim(), &mut rng),
            act2: Silu::new(),
        });
        let conv_in = Conv2d::new(config.in_channels, config.base_width, 3, &mut rng);
        let d = config.depth;
        let encoders = (0..d)
            .map(|l| {
                let cin = if l == 0 { config.base_width } else { config.width(l - 1) };
                ResBlock::new(cin, config.width(l), embed, &mut rng)
            })
            .collect();
        let middle = ResBlock::new(config.width(d - 1), config.width(d), embed, &mut rng);
        let latent = match config.latent {
            Latent::None => None,
            Latent::Bottleneck(k) => Some(LatentLayers {
                mean: Conv2d::new(config.width(d), k, 1, &mut rng),
                log_var: None,
                decode: Conv2d::new(k, config.width(d), 1, &mut rng),
            }),
            Latent::Variational(k) => Some(LatentLayers {
                mean: Conv2d::new(config.width(d), k, 1, &mut rng),
                log_var: Some(Conv2d::zeroed(config.width(d), k, 1)),
                decode: Conv2d::new(k, config.width(d), 1, &mut rng),
            }),
        };
        let decoders = (0..d)
            .map(|l| {
                let below = if l == d - 1 { config.width(d) } else { config.width(l + 1) };
                let skip = if config.skip_connections { config.width(l) } else { 0 };
                ResBlock::new(below + skip, config.width(l), embed, &mut rng)
            })
            .collect();
        let sampler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_1a7e);
        Ok(Self {
            conv_out: Conv2d::zeroed(config.base_width, config.out_channels, 3),
            config,
            conv_in,
            encoders,
            middle,
            latent,
            decoders,
            act_out: Silu::new(),
            time_mlp,
            sampler,
            latent_cache: None,
            last_kl: 0.0,
            train_batch: 0,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// KL divergence (mean over the batch) of the last training forward of a
    /// variational network; 0 otherwise.
    pub fn last_kl(&self) -> f64 {
        self.last_kl
    }

    fn embed(&mut self, steps: Option<&[usize]>, batch: usize, train: bool) -> Result<Option<Vec<T>>, UnetError> {
        let Some(mlp) = self.time_mlp.as_mut() else {
            return Ok(None);
        };
        let steps = steps.ok_or_else(|| UnetError::InvalidConfig("step indices required".into()))?;
        if steps.len() != batch {
            return Err(UnetError::InvalidConfig("one step index per sample required".into()));
        }
        let sin = sinusoidal_embedding::<T>(steps, self.config.sinusoid_dim());
        let h = mlp.lin1.forward(&sin, batch, train);
        let h = mlp.act1.forward_vec(&h, train);
        let h = mlp.lin2.forward(&h, batch, train);
        Ok(Some(mlp.act2.forward_vec(&h, train)))
    }

    /// Runs the network. `train` keeps activations for [`Unet::backward`] and
    /// samples the variational latent; evaluation uses the latent mean.
    pub fn forward(&mut self, x: &Tensor<T>, steps: Option<&[usize]>, train: bool) -> Result<Tensor<T>, UnetError> {
        let c = &self.config;
        if x.channels != c.in_channels || x.height != c.input_size || x.width != c.input_size {
            return Err(UnetError::InvalidConfig(format!(
                "expected input {}x{}x{}, got {}x{}x{}",
                c.in_channels, c.input_size, c.input_size, x.channels, x.height, x.width
            )));
        }
        let embed = self.embed(steps, x.batch, train)?;
        let e = embed.as_deref();
        let mut h = self.conv_in.forward(x, train);
        let mut skips = Vec::with_capacity(self.encoders.len());
        for enc in self.encoders.iter_mut() {
            h = enc.forward(&h, e, train);
            let pooled = h.avg_pool2();
            if self.config.skip_connections {
                skips.push(h);
            }
            h = pooled;
        }
        h = self.middle.forward(&h, e, train);
        if let Some(lat) = self.latent.as_mut() {
            let mean = lat.mean.forward(&h, train);
            let z = match lat.log_var.as_mut() {
                Some(lv_conv) if train => {
                    let log_var = lv_conv.forward(&h, train);
                    let noise: Vec<T> = (0..mean.data.len())
                        .map(|_| T::from_f64_lossy(self.sampler.sample::<f64, _>(StandardNormal)))
                        .collect();
                    let mut z = mean.clone();
                    let half = T::from_f64_lossy(0.5);
                    let mut kl = 0.0;
                    for i in 0..z.data.len() {
                        let lv = log_var.data[i];
                        z.data[i] = mean.data[i] + (lv * half).exp() * noise[i];
                        let (m, lvf) = (mean.data[i].as_f64(), lv.as_f64());
                        kl += -0.5 * (1.0 + lvf - m * m - lvf.exp());
                    }
                    self.last_kl = kl / x.batch as f64;
                    self.latent_cache = Some(LatentCache {
                        mean: mean.data,
                        log_var: log_var.data,
                        noise,
                    });
                    z
                }
                _ => mean,
            };
            h = lat.decode.forward(&z, train);
        }
        for (l, dec) in self.decoders.iter_mut().enumerate().rev() {
            h = h.upsample2();
            if self.config.skip_connections {
                h = h.concat_channels(&skips[l]);
            }
            h = dec.forward(&h, e, train);
        }
        let a = self.act_out.forward(&h, train);
        let out = self.conv_out.forward(&a, train);
        self.train_batch = x.batch;
        if !out.is_finite() {
            return Err(UnetError::NonFinite("forward"));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for the last training forward given
    /// the output gradient. A variational network adds `kl_weight` times the
    /// gradient of the batch-mean KL term.
    pub fn backward(&mut self, grad: &Tensor<T>, kl_weight: f64) {
        let da = self.conv_out.backward(grad);
        let mut g = self.act_out.backward(&da);
        let mut d_embed: Option<Vec<T>> = None;
        let add_embed = |d: Option<Vec<T>>, acc: &mut Option<Vec<T>>| {
            if let Some(d) = d {
                match acc {
                    Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += *y),
                    None => *acc = Some(d),
                }
            }
        };
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; self.decoders.len()];
        for l in 0..self.decoders.len() {
            let (dcat, de) = self.decoders[l].backward(&g);
            add_embed(de, &mut d_embed);
            let below = if self.config.skip_connections {
                let (below, skip) = dcat.split_channels(dcat.channels - self.config.width(l));
                skip_grads[l] = Some(skip);
                below
            } else {
                dcat
            };
            g = below.upsample2_backward();
        }
        if let Some(lat) = self.latent.as_mut() {
            let dz = lat.decode.backward(&g);
            match (lat.log_var.as_mut(), self.latent_cache.take()) {
                (Some(lv_conv), Some(cache)) => {
                    let scale = kl_weight / self.train_batch as f64;
                    let mut dmean = dz.clone();
                    let mut dlv = dz.clone();
                    for i in 0..dz.data.len() {
                        let m = cache.mean[i].as_f64();
                        let lv = cache.log_var[i].as_f64();
                        let std = (0.5 * lv).exp();
                        let dzi = dz.data[i].as_f64();
                        dmean.data[i] = T::from_f64_lossy(dzi + scale * m);
                        dlv.data[i] =
                            T::from_f64_lossy(dzi * cache.noise[i].as_f64() * 0.5 * std + scale * 0.5 * (lv.exp() - 1.0));
                    }
                    g = lat.mean.backward(&dmean);
                    g.add_assign(&lv_conv.backward(&dlv));
                }
                _ => g = lat.mean.backward(&dz),
            }
        }
        let (dm, de) = self.middle.backward(&g);
        add_embed(de, &mut d_embed);
        g = dm;
        for l in (0..self.encoders.len()).rev() {
            let mut dh = g.avg_pool2_backward();
            if let Some(skip) = skip_grads[l].take() {
                dh.add_assign(&skip);
            }
            let (dx, de) = self.encoders[l].backward(&dh);
            add_embed(de, &mut d_embed);
            g = dx;
        }
        let _ = self.conv_in.backward(&g);
        if let (Some(mlp), Some(d)) = (self.time_mlp.as_mut(), d_embed) {
            let d = mlp.act2.backward_vec(&d);
            let d = mlp.lin2.backward(&d, self.train_batch);
            let d = mlp.act1.backward_vec(&d);
            let _ = mlp.lin1.backward(&d, self.train_batch);
        }
    }

    /// Visits every trainable buffer in a fixed order with a stable name.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(mlp) = self.time_mlp.as_mut() {
            mlp.lin1.visit_params("time.lin1", f);
            mlp.lin2.visit_params("time.lin2", f);
        }
        self.conv_in.visit_params("conv_in", f);
        for (l, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_params(&format!("enc{l}"), f);
        }
        self.middle.visit_params("mid", f);
        if let Some(lat) = self.latent.as_mut() {
            lat.mean.visit_params("latent.mean", f);
            if let Some(lv) = lat.log_var.as_mut() {
                lv.visit_params("latent.log_var", f);
            }
            lat.decode.visit_params("latent.decode", f);
        }
        for (l, dec) in self.decoders.iter_mut().enumerate() {
            dec.visit_params(&format!("dec{l}"), f);
        }
        self.conv_out.visit_params("conv_out", f);
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }
}
