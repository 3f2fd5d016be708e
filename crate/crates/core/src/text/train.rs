//! Alternating MINE / codec training of the caption link.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use ulbsc_autodiff::{Adam, Graph, Tensor};

use super::mine::{self, MineNet};
use super::model::{TextArch, TextCodec};
use super::vocab::{TokenSequence, Vocabulary, PAD};
use crate::channel::noise_variance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextTrainConfig {
    pub arch: TextArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the mutual-information term.
    pub eta: f64,
    /// Training SNR is drawn uniformly from this range (dB) for every batch.
    pub snr_range: (f64, f64),
    pub mine_hidden: usize,
    pub mine_lr: f64,
    pub seed: u64,
}

impl Default for TextTrainConfig {
    fn default() -> Self {
        TextTrainConfig {
            arch: TextArch::default(),
            epochs: 30,
            batch: 32,
            lr: 2e-3,
            eta: 0.1,
            snr_range: (-3.0, 15.0),
            mine_hidden: 32,
            mine_lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextEpochStats {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches.
    pub ce: f64,
    /// Mean MI estimate of the codec steps, in nats.
    pub mi: f64,
    /// Noiseless cross-entropy on a fixed probe set after the epoch.
    pub probe_ce: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextTrainReport {
    pub epochs: Vec<TextEpochStats>,
}

pub struct TrainedText {
    pub codec: TextCodec<f32>,
    pub mine: MineNet<f32>,
    pub report: TextTrainReport,
}

fn targets(batch: &[&TokenSequence]) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|t| t.ids.iter().map(|&id| (id != PAD).then_some(id)))
        .collect()
}

fn noise(n: usize, snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sigma = noise_variance(snr_db).sqrt();
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            sigma * e
        })
        .collect()
}

/// Noiseless mean cross-entropy of `codec` on `batch`.
fn probe_ce(codec: &TextCodec<f32>, batch: &[&TokenSequence]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(codec.store(), false)?;
    let f = codec.encode_graph(&mut g, &p, batch)?;
    let z = codec.channel_encode_graph(&mut g, &p, f)?;
    let logits = codec.decode_graph(&mut g, &p, z)?;
    let rows = batch.len() * codec.arch().l_max;
    let logits = g.reshape(logits, &[rows, codec.vocab().len()])?;
    let ce = g.cross_entropy(logits, &targets(batch))?;
    Ok(g.value(ce).data()[0] as f64)
}

/// Trains the text codec on `corpus` captions.
pub fn train_text_link(corpus: &[String], cfg: &TextTrainConfig) -> Result<TrainedText> {
    if corpus.is_empty() {
        return Err(Error::invalid("text corpus", "no captions"));
    }
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(Error::invalid("eta", format!("{} outside [0, 1]", cfg.eta)));
    }
    if cfg.batch == 0 || cfg.snr_range.0 > cfg.snr_range.1 {
        return Err(Error::invalid("text training config", format!("{cfg:?}")));
    }
    let vocab = Vocabulary::template();
    let seqs = corpus
        .iter()
        .map(|c| vocab.tokenize(c, cfg.arch.l_max))
        .collect::<Result<Vec<_>>>()?;
    let mut codec = TextCodec::<f32>::new(cfg.arch, vocab, cfg.seed)?;
    let mut mine = MineNet::<f32>::new(cfg.mine_hidden, cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(codec.store(), cfg.lr);
    let mut mine_opt = Adam::new(mine.store(), cfg.mine_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let probe: Vec<&TokenSequence> = seqs.iter().take(64).collect();
    let n_sym = cfg.arch.symbols();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut mi_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let b = batch.len();
            let snr = rng.random_range(cfg.snr_range.0..=cfg.snr_range.1);
            let n = noise(b * n_sym, snr, &mut rng);
            let pairs = b * n_sym;
            let use_mi = cfg.eta > 0.0 && pairs >= mine::MIN_BATCH;

            // (a) statistics network on the current (frozen) codec output
            if use_mi {
                let mut g = Graph::new();
                let p = g.bind(codec.store(), false)?;
                let f = codec.encode_graph(&mut g, &p, &batch)?;
                let z = codec.channel_encode_graph(&mut g, &p, f)?;
                let z = g.value(z).to_f64_vec();
                let zh: Vec<f64> = z.iter().zip(&n).map(|(a, e)| a + e).collect();
                mine::ascend(&mut mine, &mut mine_opt, &z, &zh, &mut rng)?;
            }

            // (b) codec: cross-entropy minus eta times the MI bound
            let mut g = Graph::new();
            let p = g.bind(codec.store(), true)?;
            let f = codec.encode_graph(&mut g, &p, &batch)?;
            let z = codec.channel_encode_graph(&mut g, &p, f)?;
            let nv = g.constant(Tensor::from_f64([b, n_sym], &n)?)?;
            let zh = g.add(z, nv)?;
            let logits = codec.decode_graph(&mut g, &p, zh)?;
            let logits = g.reshape(logits, &[b * cfg.arch.l_max, codec.vocab().len()])?;
            let ce = g.cross_entropy(logits, &targets(&batch))?;
            let ce_val = g.value(ce).data()[0] as f64;
            let mut loss = ce;
            if use_mi {
                let mp = g.bind(mine.store(), false)?;
                let zc = g.reshape(z, &[pairs, 1])?;
                let zhc = g.reshape(zh, &[pairs, 1])?;
                let perm = mine::permutation(pairs, &mut rng);
                let mi = mine.bound_graph(&mut g, &mp, zc, zhc, &perm)?;
                mi_sum += g.value(mi).data()[0] as f64;
                let weighted = g.scale(mi, cfg.eta as f32)?;
                loss = g.sub(ce, weighted)?;
            }
            let grads = g.backward(loss).map_err(|e| Error::Diverged {
                step,
                source: Box::new(e.into()),
            })?;
            codec.store_mut().zero_grad();
            codec.store_mut().accumulate(&grads);
            opt.step(codec.store_mut())?;
            ce_sum += ce_val;
            batches += 1;
            step += 1;
        }
        let stats = TextEpochStats {
            epoch,
            ce: ce_sum / batches as f64,
            mi: mi_sum / batches as f64,
            probe_ce: probe_ce(&codec, &probe)?,
        };
        log::info!(
            "text epoch {epoch}: ce {:.4} mi {:.3} probe ce {:.5}",
            stats.ce,
            stats.mi,
            stats.probe_ce
        );
        epochs.push(stats);
    }
    Ok(TrainedText {
        codec,
        mine,
        report: TextTrainReport { epochs },
    })
}

/// Fraction of captions recovered exactly through `channel`.
pub fn sentence_accuracy(
    codec: &TextCodec<f32>,
    captions: &[String],
    mut channel: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let mut hits = 0;
    for c in captions {
        if codec.transmit(c, &mut channel)? == *c {
            hits += 1;
        }
    }
    Ok(hits as f64 / captions.len().max(1) as f64)
}
