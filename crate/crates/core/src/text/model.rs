//! Transformer text codec with a linear channel encoder/decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulbsc_autodiff::{checkpoint, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::vocab::{TokenSequence, Vocabulary, DEFAULT_L_MAX, PAD};
use crate::error::{Error, Result};
use crate::nn::{uniform, Linear};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextArch {
    pub l_max: usize,
    /// Embedding width.
    pub d_model: usize,
    pub d_ff: usize,
    /// Channel symbols per token.
    pub k_sym: usize,
}

impl Default for TextArch {
    fn default() -> Self {
        TextArch {
            l_max: DEFAULT_L_MAX,
            d_model: 32,
            d_ff: 64,
            k_sym: 16,
        }
    }
}

impl TextArch {
    /// Channel symbols per caption.
    pub fn symbols(&self) -> usize {
        self.l_max * self.k_sym
    }

    fn validate(&self) -> Result<()> {
        if self.l_max < 2 || self.d_model == 0 || self.d_ff == 0 || self.k_sym == 0 {
            return Err(Error::invalid("text architecture", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Post-norm single-head transformer layer.
#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

impl Block {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let ln = |s: &mut ParamStore<T>, n: &str| {
            (
                s.add(format!("{name}.{n}.gamma"), Tensor::full([d], T::one())),
                s.add(format!("{name}.{n}.beta"), Tensor::zeros([d])),
            )
        };
        Block {
            q: Linear::new(s, &format!("{name}.q"), d, d, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, rng),
            ln1: ln(s, "ln1"),
            ff1: Linear::new(s, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::new(s, &format!("{name}.ff2"), ff, d, rng),
            ln2: ln(s, "ln2"),
        }
    }

    /// `x: [B, L, d]`; `mask`, if given, is added to the `[B, L, L]` attention scores.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> ulbsc_autodiff::Result<Var> {
        let d = g.shape(x)[2];
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let scores = g.matmul_t(q, k, false, true)?;
        let mut scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores)?;
        let h = g.matmul(attn, v)?;
        let h = self.o.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let x = g.layer_norm(x, p[self.ln1.0], p[self.ln1.1], LN_EPS)?;
        let f = self.ff1.forward(g, p, x)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, p, f)?;
        let x = g.add(x, f)?;
        g.layer_norm(x, p[self.ln2.0], p[self.ln2.1], LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    embed: ParamId,
    enc: Block,
    chan_enc: Linear,
    chan_dec: Linear,
    dec: Block,
    head: Linear,
}

/// Semantic and channel codec of the caption branch.
#[derive(Clone, Debug)]
pub struct TextCodec<T: Scalar = f32> {
    arch: TextArch,
    vocab: Vocabulary,
    store: ParamStore<T>,
    layers: Layers,
}

/// Sinusoidal position table `[l_max, d]`.
pub fn positional_encoding(l_max: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; l_max * d];
    for pos in 0..l_max {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Per-position decoder output: probabilities and the greedy choice.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[l_max][vocab]` row-stochastic matrix.
    pub probs: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
}

impl<T: Scalar> TextCodec<T> {
    pub fn new(arch: TextArch, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = arch.d_model;
        let embed = s.add("embed", uniform(&mut rng, &[vocab.len(), d], 1.0));
        let layers = Layers {
            embed,
            enc: Block::new(&mut s, "enc", d, arch.d_ff, &mut rng),
            chan_enc: Linear::new(&mut s, "chan_enc", d, arch.k_sym, &mut rng),
            chan_dec: Linear::new(&mut s, "chan_dec", arch.k_sym, d, &mut rng),
            dec: Block::new(&mut s, "dec", d, arch.d_ff, &mut rng),
            head: Linear::new(&mut s, "head", d, vocab.len(), &mut rng),
        };
        Ok(TextCodec {
            arch,
            vocab,
            store: s,
            layers,
        })
    }

    pub fn arch(&self) -> &TextArch {
        &self.arch
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> TextCodec<U> {
        TextCodec {
            arch: self.arch,
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
        }
    }

    fn check_tokens(&self, batch: &[&TokenSequence]) -> Result<()> {
        for t in batch {
            if t.ids.len() != self.arch.l_max {
                return Err(Error::invalid(
                    "token sequence",
                    format!("length {}, codec expects {}", t.ids.len(), self.arch.l_max),
                ));
            }
            if let Some(&bad) = t.ids.iter().find(|&&i| i >= self.vocab.len()) {
                return Err(Error::invalid("token sequence", format!("id {bad} outside vocabulary")));
            }
        }
        Ok(())
    }

    /// Semantic encoder: tokens to `[B, L, d]` features.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &Bound, batch: &[&TokenSequence]) -> Result<Var> {
        self.check_tokens(batch)?;
        let (b, l, d) = (batch.len(), self.arch.l_max, self.arch.d_model);
        let ids: Vec<usize> = batch.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let e = g.embedding(p[self.layers.embed], &ids)?;
        let e = g.reshape(e, &[b, l, d])?;
        let pe = positional_encoding(l, d);
        let pe_b: Vec<f64> = (0..b).flat_map(|_| pe.iter().copied()).collect();
        let pe = g.constant(Tensor::from_f64([b, l, d], &pe_b)?)?;
        let x = g.add(e, pe)?;
        let mut mask = Vec::with_capacity(b * l * l);
        for t in batch {
            for _ in 0..l {
                mask.extend(t.ids.iter().map(|&id| if id == PAD { MASKED } else { 0.0 }));
            }
        }
        let mask = g.constant(Tensor::from_f64([b, l, l], &mask)?)?;
        Ok(self.layers.enc.forward(g, p, x, Some(mask))?)
    }

    /// Channel encoder: `[B, L, d]` features to `[B, N]` unit-power symbols.
    pub fn channel_encode_graph(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let b = g.shape(features)[0];
        let s = self.layers.chan_enc.forward(g, p, features)?;
        let s = g.reshape(s, &[b, self.arch.symbols()])?;
        Ok(g.normalize_rows(s)?)
    }

    /// Channel and semantic decoder: `[B, N]` received symbols to `[B, L, vocab]` logits.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &Bound, received: Var) -> Result<Var> {
        let b = g.shape(received)[0];
        let s = g.reshape(received, &[b, self.arch.l_max, self.arch.k_sym])?;
        let h = self.layers.chan_dec.forward(g, p, s)?;
        let h = self.layers.dec.forward(g, p, h, None)?;
        Ok(self.layers.head.forward(g, p, h)?)
    }

    /// Features `[L, d]` of one token sequence.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false)?;
        let f = self.encode_graph(&mut g, &p, &[tokens])?;
        Ok(g.value(f).clone().reshape([self.arch.l_max, self.arch.d_model])?)
    }

    /// Unit-power channel symbols for `[L, d]` features.
    pub fn channel_encode(&self, features: &Tensor<T>) -> Result<Vec<f64>> {
        let (l, d) = (self.arch.l_max, self.arch.d_model);
        if features.shape() != [l, d] {
            return Err(Error::invalid(
                "text features",
                format!("shape {:?}, expected [{l}, {d}]", features.shape()),
            ));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false)?;
        let f = g.constant(features.clone().reshape([1, l, d])?)?;
        let z = self.channel_encode_graph(&mut g, &p, f)?;
        Ok(g.value(z).to_f64_vec())
    }

    /// Token probabilities and greedy tokens for one received symbol vector.
    pub fn decode_text(&self, received: &[f64]) -> Result<Decoded> {
        let n = self.arch.symbols();
        if received.len() != n {
            return Err(Error::invalid(
                "received symbols",
                format!("{} given, expected {n}", received.len()),
            ));
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false)?;
        let r = g.constant(Tensor::from_f64([1, n], received)?)?;
        let logits = self.decode_graph(&mut g, &p, r)?;
        let probs = g.softmax(logits)?;
        let v = self.vocab.len();
        let rows: Vec<Vec<f64>> = g.value(probs).to_f64_vec().chunks(v).map(<[f64]>::to_vec).collect();
        let tokens = g.value(logits).to_f64_vec().chunks(v).map(argmax).collect();
        Ok(Decoded { probs: rows, tokens })
    }

    /// Noiseless-or-not round trip of one caption through `channel`.
    pub fn transmit(&self, caption: &str, channel: impl FnOnce(&[f64]) -> Result<Vec<f64>>) -> Result<String> {
        let tokens = self.vocab.tokenize(caption, self.arch.l_max)?;
        let z = self.channel_encode(&self.encode_text(&tokens)?)?;
        let received = channel(&z)?;
        Ok(self.vocab.detokenize(&self.decode_text(&received)?.tokens))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct TextMeta {
    kind: String,
    arch: TextArch,
    vocab: Vec<String>,
    #[serde(default)]
    eta: Option<f64>,
}

impl TextCodec<f32> {
    pub fn save(&self, dir: &Path, eta: Option<f64>) -> Result<()> {
        let meta = TextMeta {
            kind: "text-codec".into(),
            arch: self.arch,
            vocab: self.vocab.words().to_vec(),
            eta,
        };
        checkpoint::save(dir, &self.store, serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, values) = checkpoint::load(dir)?;
        let meta: TextMeta = serde_json::from_value(manifest.metadata)
            .map_err(|e| Error::Format(format!("text codec metadata: {e}")))?;
        if meta.kind != "text-codec" {
            return Err(Error::Format(format!("checkpoint holds `{}`, not a text codec", meta.kind)));
        }
        let mut codec = TextCodec::new(meta.arch, Vocabulary::from_words(meta.vocab)?, 0)?;
        codec.store.load_values(&values)?;
        Ok(codec)
    }
}

/// Mean of `-ln p(target)` over non-pad positions of one sequence.
///
/// Probabilities below `1e-12` are clamped; the returned count says how many were.
pub fn loss_ce(probs: &[Vec<f64>], targets: &[usize]) -> Result<(f64, usize)> {
    if probs.len() != targets.len() {
        return Err(Error::invalid(
            "loss_ce",
            format!("{} rows for {} targets", probs.len(), targets.len()),
        ));
    }
    let (mut total, mut count, mut clamped) = (0.0, 0usize, 0usize);
    for (row, &t) in probs.iter().zip(targets) {
        if t == PAD {
            continue;
        }
        let p = *row
            .get(t)
            .ok_or_else(|| Error::invalid("loss_ce", format!("target {t} outside {} classes", row.len())))?;
        if p < 1e-12 {
            clamped += 1;
            log::warn!("probability {p:e} of target {t} clamped to 1e-12");
        }
        total -= p.max(1e-12).ln();
        count += 1;
    }
    Ok((if count == 0 { 0.0 } else { total / count as f64 }, clamped))
}
