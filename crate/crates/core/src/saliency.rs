//! Convolutional saliency-map encoder/decoder with residual blocks.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulbsc_autodiff::{checkpoint, Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::dataset::SaliencyMap;
use crate::error::{Error, Result};
use crate::nn::{Conv, ResBlock};
use crate::vq::Codebook;

/// Number of stride-2 stages on each side of the codec.
pub const STAGES: usize = 3;
const DOWNSAMPLE: usize = 1 << STAGES;

/// Layer widths of the codec. Serialized into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    /// Channels after the first and second stage.
    pub channels: [usize; 2],
    pub latent_channels: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            height: 64,
            width: 64,
            channels: [16, 32],
            latent_channels: 8,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(Error::invalid(
                "codec input size",
                format!("{}x{} must be positive multiples of {DOWNSAMPLE}", self.height, self.width),
            ));
        }
        if self.channels.contains(&0) || self.latent_channels == 0 {
            return Err(Error::invalid("codec channels", format!("{self:?}")));
        }
        Ok(())
    }

    /// `(h', w', c')` of the latent grid.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.height / DOWNSAMPLE, self.width / DOWNSAMPLE, self.latent_channels)
    }
}

/// Encoder output grid, stored row-major as (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl Latent {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height * width * channels == 0 || values.len() != height * width * channels {
            return Err(Error::invalid(
                "latent",
                format!("{height}x{width}x{channels} with {} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent", "non-finite value"));
        }
        Ok(Latent {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Latent {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[(row * self.width + col) * self.channels + ch]
    }

    /// Converts one sample of a channel-major `[C, H, W]` buffer.
    pub(crate) fn from_chw<T: Scalar>(chw: &[T], channels: usize, height: usize, width: usize) -> Self {
        let mut values = vec![0.0f32; chw.len()];
        for ch in 0..channels {
            for r in 0..height {
                for c in 0..width {
                    values[(r * width + c) * channels + ch] = chw[(ch * height + r) * width + c].as_f64() as f32;
                }
            }
        }
        Latent {
            height,
            width,
            channels,
            values,
        }
    }

    pub(crate) fn to_chw<T: Scalar>(&self, out: &mut Vec<T>) {
        let (h, w, ch_n) = self.shape();
        let start = out.len();
        out.resize(start + self.values.len(), T::zero());
        for r in 0..h {
            for c in 0..w {
                for ch in 0..ch_n {
                    out[start + (ch * h + r) * w + c] = T::from_f64(self.at(r, c, ch) as f64);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc: [Conv; 3],
    enc_res: [ResBlock; 2],
    dec: [Conv; 3],
    dec_res: [ResBlock; 2],
}

/// Encoder and decoder weights plus their architecture.
#[derive(Clone, Debug)]
pub struct SaliencyCodec<T: Scalar = f32> {
    arch: Arch,
    store: ParamStore<T>,
    layers: Layers,
}

impl<T: Scalar> SaliencyCodec<T> {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2] = arch.channels;
        let cl = arch.latent_channels;
        let s = &mut store;
        let layers = Layers {
            enc: [
                Conv::new(s, "enc.conv1", 1, c1, false, &mut rng),
                Conv::new(s, "enc.conv2", c1, c2, false, &mut rng),
                Conv::new(s, "enc.conv3", c2, cl, false, &mut rng),
            ],
            enc_res: [
                ResBlock::new(s, "enc.res1", c1, &mut rng),
                ResBlock::new(s, "enc.res2", c2, &mut rng),
            ],
            dec: [
                Conv::new(s, "dec.tconv1", cl, c2, true, &mut rng),
                Conv::new(s, "dec.tconv2", c2, c1, true, &mut rng),
                Conv::new(s, "dec.tconv3", c1, 1, true, &mut rng),
            ],
            dec_res: [
                ResBlock::new(s, "dec.res1", c2, &mut rng),
                ResBlock::new(s, "dec.res2", c1, &mut rng),
            ],
        };
        Ok(SaliencyCodec { arch, store, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same weights at another precision.
    pub fn cast<U: Scalar>(&self) -> SaliencyCodec<U> {
        SaliencyCodec {
            arch: self.arch,
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    /// `x: [N, 1, H, W]` to `[N, c', h', w']`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> ulbsc_autodiff::Result<Var> {
        let l = &self.layers;
        let h = l.enc[0].forward(g, p, x, 2)?;
        let h = g.relu(h)?;
        let h = l.enc_res[0].forward(g, p, h)?;
        let h = l.enc[1].forward(g, p, h, 2)?;
        let h = g.relu(h)?;
        let h = l.enc_res[1].forward(g, p, h)?;
        l.enc[2].forward(g, p, h, 2)
    }

    /// `z: [N, c', h', w']` to `[N, 1, H, W]` in `[0, 1]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> ulbsc_autodiff::Result<Var> {
        let l = &self.layers;
        let h = l.dec[0].forward(g, p, z, 2)?;
        let h = g.relu(h)?;
        let h = l.dec_res[0].forward(g, p, h)?;
        let h = l.dec[1].forward(g, p, h, 2)?;
        let h = g.relu(h)?;
        let h = l.dec_res[1].forward(g, p, h)?;
        let h = l.dec[2].forward(g, p, h, 2)?;
        g.sigmoid(h)
    }

    /// Stacks maps into an `[n, 1, h, w]` input tensor.
    pub fn batch_tensor(&self, maps: &[&SaliencyMap]) -> Result<Tensor<T>> {
        let (h, w) = (self.arch.height, self.arch.width);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::invalid(
                    "saliency map",
                    format!("{}x{} given, codec expects {h}x{w}", m.height(), m.width()),
                ));
            }
            data.extend(m.values().iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new([maps.len(), 1, h, w], data)?)
    }

    pub fn encode_batch(&self, maps: &[&SaliencyMap]) -> Result<Vec<Latent>> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false)?;
        let x = g.constant(self.batch_tensor(maps)?)?;
        let z = self.encode_graph(&mut g, &p, x)?;
        let (lh, lw, lc) = self.arch.latent_shape();
        let per = lh * lw * lc;
        Ok(g.value(z)
            .data()
            .chunks(per)
            .map(|chw| Latent::from_chw(chw, lc, lh, lw))
            .collect())
    }

    pub fn encode(&self, map: &SaliencyMap) -> Result<Latent> {
        Ok(self.encode_batch(&[map])?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[&Latent]) -> Result<Vec<SaliencyMap>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let (lh, lw, lc) = self.arch.latent_shape();
        let mut data = Vec::with_capacity(latents.len() * lh * lw * lc);
        for l in latents {
            if l.shape() != (lh, lw, lc) {
                return Err(Error::invalid(
                    "latent",
                    format!("shape {:?}, codec expects {:?}", l.shape(), (lh, lw, lc)),
                ));
            }
            l.to_chw(&mut data);
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false)?;
        let z = g.constant(Tensor::new([latents.len(), lc, lh, lw], data)?)?;
        let y = self.decode_graph(&mut g, &p, z)?;
        let (h, w) = (self.arch.height, self.arch.width);
        g.value(y)
            .data()
            .chunks(h * w)
            .map(|px| SaliencyMap::new(h, w, px.iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect()))
            .collect()
    }

    pub fn decode(&self, latent: &Latent) -> Result<SaliencyMap> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }
}

const CODEBOOK_FILE: &str = "codebook.bin";

#[derive(Serialize, Deserialize)]
struct CodebookEntry {
    n_idx: usize,
    dim: usize,
    granularity: usize,
    blob: String,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    kind: String,
    arch: Arch,
    codebook: Option<CodebookEntry>,
}

impl SaliencyCodec<f32> {
    /// Writes the codec weights and, if given, the codebook into `dir`.
    pub fn save(&self, dir: &Path, codebook: Option<&Codebook>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = CodecMeta {
            kind: "saliency-codec".into(),
            arch: self.arch,
            codebook: codebook.map(|cb| CodebookEntry {
                n_idx: cb.len(),
                dim: cb.dim(),
                granularity: cb.granularity(),
                blob: CODEBOOK_FILE.into(),
            }),
        };
        if let Some(cb) = codebook {
            std::fs::write(dir.join(CODEBOOK_FILE), checkpoint::f32_to_le_bytes(cb.words().iter().copied()))?;
        }
        checkpoint::save(dir, &self.store, serde_json::to_value(meta)?)?;
        Ok(())
    }

    /// Reads a codec written by [`SaliencyCodec::save`], validating every shape.
    pub fn load(dir: &Path) -> Result<(Self, Option<Codebook>)> {
        let (manifest, values) = checkpoint::load(dir)?;
        let meta: CodecMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| Error::Format(format!("codec metadata: {e}")))?;
        if meta.kind != "saliency-codec" {
            return Err(Error::Format(format!("checkpoint holds `{}`, not a saliency codec", meta.kind)));
        }
        let mut codec = SaliencyCodec::new(meta.arch, 0)?;
        codec.store.load_values(&values)?;
        let codebook = match meta.codebook {
            None => None,
            Some(entry) => {
                if entry.blob.contains(['/', '\\']) || entry.blob.contains("..") {
                    return Err(Error::Format(format!("codebook blob name `{}`", entry.blob)));
                }
                let words = checkpoint::f32_from_le_bytes(&std::fs::read(dir.join(&entry.blob))?)?;
                let (_, _, c) = meta.arch.latent_shape();
                let cb = Codebook::new(entry.granularity, c, words)?;
                if cb.len() != entry.n_idx || cb.dim() != entry.dim {
                    return Err(Error::Format(format!(
                        "codebook blob holds {}x{}, manifest says {}x{}",
                        cb.len(),
                        cb.dim(),
                        entry.n_idx,
                        entry.dim
                    )));
                }
                Some(cb)
            }
        };
        Ok((codec, codebook))
    }
}

/// `mean((m - m_hat)^2) + lambda * 0.5 * mean(z^2)`.
///
/// The second term is the negative log-density of a standard normal prior on
/// the latent without its constant.
pub fn loss_sal(m: &SaliencyMap, m_hat: &SaliencyMap, z: &Latent, lambda: f64) -> Result<f64> {
    if (m.height(), m.width()) != (m_hat.height(), m_hat.width()) {
        return Err(Error::invalid(
            "loss_sal",
            format!(
                "map shapes {}x{} and {}x{} differ",
                m.height(),
                m.width(),
                m_hat.height(),
                m_hat.width()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} outside [0, 1]")));
    }
    let n = m.values().len() as f64;
    let mse = m
        .values()
        .iter()
        .zip(m_hat.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n;
    let prior = z.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / z.values().len() as f64;
    Ok(mse + lambda * 0.5 * prior)
}
