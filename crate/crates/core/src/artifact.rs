//! Versioned model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "SPMODEL1" | u32 version
//! str config (TOML) | str normalizer (JSON) | str labels (JSON) | str profiles (JSON)
//! u32 tensor count, then per tensor: str name | u32 rows | u32 cols | f32 data
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Nets are stored layer by
//! layer as `{net}.{i}.w` and `{net}.{i}.b`; hidden layers are ReLU and the
//! last layer of each net is linear.

use std::io::{Read, Write};

use crate::codebook::Codebook;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::events::{read_f32, read_str, read_u32, write_str};
use crate::features::NormalizerState;
use crate::linalg::Matrix;
use crate::nn::{Activation, Dense, DenseNet};
use crate::objective::LabelBinning;
use crate::population::TokenProfile;
use crate::trainer::VqModel;

pub const MAGIC: &[u8; 8] = b"SPMODEL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: Config,
    pub normalizer: NormalizerState,
    pub labels: LabelBinning,
    pub model: VqModel,
    pub profiles: Vec<TokenProfile>,
}

struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format(format!("{what}: {e}")))
}

fn net_tensors(prefix: &str, net: &DenseNet, out: &mut Vec<Tensor>) {
    for (i, l) in net.layers.iter().enumerate() {
        out.push(Tensor {
            name: format!("{prefix}.{i}.w"),
            rows: l.w.rows,
            cols: l.w.cols,
            data: l.w.data.clone(),
        });
        out.push(Tensor {
            name: format!("{prefix}.{i}.b"),
            rows: 1,
            cols: l.b.len(),
            data: l.b.clone(),
        });
    }
}

fn take_net(prefix: &str, tensors: &mut std::collections::VecDeque<Tensor>, dropout: f64) -> Result<DenseNet> {
    let mut layers = Vec::new();
    while tensors.front().is_some_and(|t| t.name == format!("{prefix}.{}.w", layers.len())) {
        let w = tensors.pop_front().expect("front checked");
        let b = tensors
            .pop_front()
            .filter(|b| b.name == format!("{prefix}.{}.b", layers.len()) && b.rows == 1)
            .ok_or_else(|| Error::Format(format!("{} has no bias", w.name)))?;
        layers.push(Dense {
            w: Matrix::from_vec(w.rows, w.cols, w.data).map_err(|e| Error::Format(e.to_string()))?,
            b: b.data,
            act: Activation::Relu,
        });
    }
    if let Some(last) = layers.last_mut() {
        last.act = Activation::Identity;
    }
    DenseNet::from_layers(layers, dropout).map_err(|e| Error::Format(format!("{prefix}: {e}")))
}

fn take(tensors: &mut std::collections::VecDeque<Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .pop_front()
        .filter(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("expected tensor {name}")))
}

impl ModelArtifact {
    fn tensors(&self) -> Vec<Tensor> {
        let mut t = Vec::new();
        net_tensors("encoder", &self.model.encoder, &mut t);
        net_tensors("decoder", &self.model.decoder, &mut t);
        for (h, net) in self.model.heads.iter().enumerate() {
            net_tensors(&format!("head{h}"), net, &mut t);
        }
        let cb = &self.model.codebook;
        for (name, m) in [("codebook.entries", &cb.entries), ("codebook.sum_ema", &cb.sum_ema)] {
            t.push(Tensor {
                name: name.into(),
                rows: m.rows,
                cols: m.cols,
                data: m.data.clone(),
            });
        }
        t.push(Tensor {
            name: "codebook.usage_ema".into(),
            rows: 1,
            cols: cb.usage_ema.len(),
            data: cb.usage_ema.clone(),
        });
        t
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &self.config.to_toml()?)?;
        write_str(&mut w, &json(&self.normalizer)?)?;
        write_str(&mut w, &json(&self.labels)?)?;
        write_str(&mut w, &json(&self.profiles)?)?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in &tensors {
            write_str(&mut w, &t.name)?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        Self::read_inner(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format("artifact is truncated".into()),
            other => other,
        })
    }

    fn read_inner<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model artifact (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("artifact version {version}, expected {VERSION}")));
        }
        let config = Config::from_toml(&read_str(&mut r)?).map_err(|e| Error::Format(e.to_string()))?;
        let normalizer: NormalizerState = from_json(&read_str(&mut r)?, "normalizer")?;
        let labels: LabelBinning = from_json(&read_str(&mut r)?, "labels")?;
        let profiles: Vec<TokenProfile> = from_json(&read_str(&mut r)?, "profiles")?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = std::collections::VecDeque::with_capacity(n);
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|l| *l <= 1 << 28)
                .ok_or_else(|| Error::Format(format!("tensor {name} is implausibly large")))?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from(read_f32(&mut r)?));
            }
            tensors.push_back(Tensor { name, rows, cols, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after artifact".into()));
        }
        let dropout = config.model.dropout;
        let encoder = take_net("encoder", &mut tensors, dropout)?;
        let decoder = take_net("decoder", &mut tensors, dropout)?;
        let heads = (0..3)
            .map(|h| take_net(&format!("head{h}"), &mut tensors, 0.0))
            .collect::<Result<Vec<_>>>()?;
        let entries = take(&mut tensors, "codebook.entries")?;
        let sum_ema = take(&mut tensors, "codebook.sum_ema")?;
        let usage = take(&mut tensors, "codebook.usage_ema")?;
        if !tensors.is_empty() {
            return Err(Error::Format(format!("unexpected tensor {}", tensors[0].name)));
        }
        let cb = &config.codebook;
        let codebook = Codebook {
            entries: Matrix::from_vec(entries.rows, entries.cols, entries.data)?,
            usage_ema: usage.data,
            sum_ema: Matrix::from_vec(sum_ema.rows, sum_ema.cols, sum_ema.data)?,
            decay: cb.decay,
            dead_fraction: cb.dead_fraction,
            revival_interval: cb.revival_interval,
            warmup_steps: cb.warmup_steps,
            revival_noise: cb.revival_noise,
        };
        if codebook.entries.cols != encoder.output_dim()
            || codebook.usage_ema.len() != codebook.entries.rows
            || codebook.sum_ema.rows != codebook.entries.rows
            || decoder.input_dim() != encoder.output_dim()
            || heads.iter().any(|h| h.input_dim() != encoder.output_dim())
        {
            return Err(Error::Format("artifact tensors do not fit together".into()));
        }
        if normalizer.layout().len() != encoder.input_dim() {
            return Err(Error::Format(format!(
                "normalizer width {} vs encoder input {}",
                normalizer.layout().len(),
                encoder.input_dim()
            )));
        }
        Ok(Self {
            config,
            normalizer,
            labels,
            model: VqModel {
                encoder,
                decoder,
                heads,
                codebook,
            },
            profiles,
        })
    }
}
