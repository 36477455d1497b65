//! Network roles, image/tensor conversion and the checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mmccd_core::{Image, ScheduleDescriptor};
use serde::{Deserialize, Serialize};

use crate::nn::{Tensor, Unet, UnetConfig, UnetError};

const MAGIC: &[u8; 8] = b"MMCCDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a network is trained to do; fixes its channel layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    /// `(y_t, masked x, t) -> y_0`, two input channels.
    Denoiser,
    /// `(x_t, t) -> x_0`, one input channel.
    UnconditionalDenoiser,
    /// One modality to the other, or an image to its reconstruction.
    Translator,
    /// Reconstruction through a bottleneck without skips.
    Autoencoder,
    /// As `Autoencoder` with a Gaussian latent.
    VariationalAutoencoder,
    /// Skip-connected reconstruction of a noise-corrupted input.
    DenoisingAutoencoder,
}

impl NetworkRole {
    pub fn in_channels(self) -> usize {
        match self {
            NetworkRole::Denoiser => 2,
            _ => 1,
        }
    }

    pub fn time_conditioned(self) -> bool {
        matches!(self, NetworkRole::Denoiser | NetworkRole::UnconditionalDenoiser)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Network(#[from] UnetError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// A UNet together with the metadata needed to use it.
#[derive(Debug, Clone)]
pub struct Network {
    pub role: NetworkRole,
    pub unet: Unet<f32>,
    /// Noise schedule the network was trained against, for diffusion roles.
    pub schedule: Option<ScheduleDescriptor>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Free-form provenance (method, modalities, sweep values).
    pub metadata: BTreeMap<String, String>,
}

impl Network {
    /// Builds a fresh network; channel counts and time conditioning are
    /// forced by the role.
    pub fn new(role: NetworkRole, mut config: UnetConfig, schedule: Option<ScheduleDescriptor>) -> Result<Self, ModelError> {
        config.in_channels = role.in_channels();
        config.out_channels = 1;
        config.time_embedding = role.time_conditioned();
        if role.time_conditioned() && schedule.is_none() {
            return Err(ModelError::Format("diffusion roles need a schedule".into()));
        }
        Ok(Self {
            role,
            unet: Unet::new(config)?,
            schedule,
            step: 0,
            metadata: BTreeMap::new(),
        })
    }

    pub fn input_size(&self) -> usize {
        self.unet.config().input_size
    }

    /// Evaluation-mode forward on a batch of `[channels][batch]` images.
    pub fn predict(&mut self, inputs: &[Vec<&Image>], steps: Option<&[usize]>) -> Result<Vec<Image>, ModelError> {
        let x = stack(inputs)?;
        let out = self.unet.forward(&x, steps, false)?;
        Ok(unstack(&out))
    }

    pub fn save(&mut self, path: &Path) -> Result<(), ModelError> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        self.unet.visit_params(&mut |name, p| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                len: p.len(),
            });
            for v in &p.value {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            role: self.role,
            config: self.unet.config().clone(),
            schedule: self.schedule,
            step: self.step,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            f.write_all(&data)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ModelError::Format(format!("{} is not a checkpoint", path.display())));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| ModelError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ModelError::Format(e.to_string()))?;
        if header.format_version > CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "checkpoint version {} is newer than supported {}",
                header.format_version, CHECKPOINT_VERSION
            )));
        }
        let mut net = Network {
            role: header.role,
            unet: Unet::new(header.config)?,
            schedule: header.schedule,
            step: header.step,
            metadata: header.metadata,
        };
        let mut data = &bytes[16 + len..];
        let mut entries = header.tensors.iter();
        let mut failure: Option<String> = None;
        net.unet.visit_params(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.len == p.len() && data.len() >= 4 * e.len => {
                    for (v, chunk) in p.value.iter_mut().zip(data[..4 * e.len].chunks_exact(4)) {
                        *v = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
                    }
                    data = &data[4 * e.len..];
                }
                _ => failure = Some(format!("tensor {name} missing or mis-sized")),
            }
        });
        if let Some(f) = failure {
            return Err(ModelError::Format(f));
        }
        if entries.next().is_some() || !data.is_empty() {
            return Err(ModelError::Format("trailing tensors in checkpoint".into()));
        }
        Ok(net)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    role: NetworkRole,
    config: UnetConfig,
    schedule: Option<ScheduleDescriptor>,
    step: u64,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Packs `inputs[channel][sample]` into a tensor.
pub fn stack(inputs: &[Vec<&Image>]) -> Result<Tensor<f32>, ModelError> {
    let channels = inputs.len();
    let batch = inputs.first().map_or(0, Vec::len);
    let (h, w) = inputs
        .first()
        .and_then(|c| c.first())
        .map(|i| i.shape())
        .ok_or_else(|| ModelError::Format("empty batch".into()))?;
    let mut data = Vec::with_capacity(channels * batch * h * w);
    for channel in inputs {
        if channel.len() != batch {
            return Err(ModelError::Format("ragged batch".into()));
        }
        for img in channel {
            if img.shape() != (h, w) {
                return Err(ModelError::Format("mixed image shapes in batch".into()));
            }
            data.extend(img.as_slice().iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_data(channels, batch, h, w, data))
}

/// Splits the first channel of a tensor into images.
pub fn unstack(t: &Tensor<f32>) -> Vec<Image> {
    (0..t.batch)
        .map(|n| {
            let data = t.image(0, n).iter().map(|&v| f64::from(v)).collect();
            Image::from_vec(t.height, t.width, data).expect("tensor plane matches its shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UnetConfig {
        UnetConfig {
            base_width: 4,
            depth: 2,
            input_size: 16,
            seed: 5,
            ..UnetConfig::default()
        }
    }

    #[test]
    fn untrained_denoiser_predicts_zero() {
        let mut net = Network::new(NetworkRole::Denoiser, tiny(), Some(ScheduleDescriptor::default())).unwrap();
        let a = Image::filled(16, 16, 0.7);
        let out = net.predict(&[vec![&a], vec![&a]], Some(&[10])).unwrap();
        assert!(out[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = Network::new(NetworkRole::Translator, tiny(), None).unwrap();
        net.unet.visit_params(&mut |_, p| p.value.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3));
        net.step = 42;
        net.metadata.insert("method".into(), "cyclic_unet".into());
        net.save(&path).unwrap();
        let mut back = Network::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.role, NetworkRole::Translator);
        assert_eq!(back.metadata["method"], "cyclic_unet");
        let img = Image::from_fn(16, 16, |r, c| (r * c) as f64 / 256.0);
        let a = net.predict(&[vec![&img]], None).unwrap();
        let b = back.predict(&[vec![&img]], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Network::load(&path), Err(ModelError::Format(_))));
    }
}
