//! Joint training of the saliency codec and its codebook.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use ulbsc_autodiff::{Adam, Graph, ParamId, ParamStore, Tensor};

use crate::assign;
use crate::dataset::SaliencyMap;
use crate::error::{Error, Result};
use crate::saliency::{Arch, Latent, SaliencyCodec};
use crate::pipeline::default_snrs;
use crate::vq::{self, Codebook, IndexGrid};

pub const DEFAULT_LAMBDA: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    /// Leading epochs that train the autoencoder alone before the codebook is
    /// seeded from encoder outputs.
    pub warmup_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta_commit: f64,
    pub n_idx: usize,
    /// Block edge in latent cells; `None` uses one block for the whole latent.
    pub granularity: Option<usize>,
    /// Inject channel noise at this SNR (dB) on the latent during training.
    pub train_snr: Option<f64>,
    /// SNRs (dB) the analog-index numbering is tuned for; empty keeps k-means order.
    #[serde(default = "default_snrs")]
    pub index_snrs: Vec<f64>,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            arch: Arch::default(),
            epochs: 50,
            warmup_epochs: 10,
            batch: 16,
            lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            beta_commit: vq::BETA_COMMIT,
            n_idx: vq::DEFAULT_N_IDX,
            granularity: None,
            train_snr: None,
            index_snrs: default_snrs(),
            seed: 0,
        }
    }
}

impl CodecTrainConfig {
    pub fn granularity(&self) -> usize {
        self.granularity.unwrap_or(self.arch.latent_shape().0)
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let (h, w, _) = self.arch.latent_shape();
        let g = self.granularity();
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::invalid(
                "granularity",
                format!("{g} does not divide the {h}x{w} latent"),
            ));
        }
        if self.batch == 0 || self.n_idx == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("training config", format!("{self:?}")));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub recon_mse: f64,
    /// Reconstruction error through the quantizer; absent during warm-up.
    pub quantized_mse: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub epochs: Vec<EpochStats>,
    /// Reconstruction-plus-prior loss on a fixed probe batch before and after training.
    pub probe_initial: f64,
    pub probe_final: f64,
    /// Whether the final k-means refit replaced the trained codebook.
    pub codebook_refit: bool,
    /// Expected analog-index distortion before and after renumbering the codewords.
    #[serde(default)]
    pub index_assignment: Option<(f64, f64)>,
}

pub struct TrainedCodec {
    pub codec: SaliencyCodec<f32>,
    pub codebook: Codebook,
    pub report: CodecTrainReport,
}

fn codebook_store(cb: &Codebook) -> Result<(ParamStore<f32>, ParamId)> {
    let mut store = ParamStore::new();
    let id = store.add("codebook", Tensor::new([cb.len(), cb.dim()], cb.words().to_vec())?);
    Ok((store, id))
}

/// Reconstruction-plus-prior loss on `maps`, evaluated without gradients.
fn probe_loss(codec: &SaliencyCodec<f32>, maps: &[&SaliencyMap], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(codec.store(), false)?;
    let x = g.constant(codec.batch_tensor(maps)?)?;
    let z = codec.encode_graph(&mut g, &p, x)?;
    let y = codec.decode_graph(&mut g, &p, z)?;
    let mse = g.mse(x, y)?;
    let prior = g.mean_square(z)?;
    Ok(g.value(mse).data()[0] as f64 + lambda * 0.5 * g.value(prior).data()[0] as f64)
}

fn diverged(step: u64) -> impl Fn(ulbsc_autodiff::Error) -> Error {
    move |e| Error::Diverged {
        step,
        source: Box::new(e.into()),
    }
}

/// Trains codec and codebook on `maps`.
pub fn train_codec(maps: &[SaliencyMap], cfg: &CodecTrainConfig) -> Result<TrainedCodec> {
    cfg.validate()?;
    if maps.is_empty() {
        return Err(Error::invalid("training set", "no maps"));
    }
    let mut codec = SaliencyCodec::<f32>::new(cfg.arch, cfg.seed)?;
    let mut adam = Adam::new(codec.store(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let probe: Vec<&SaliencyMap> = maps.iter().take(16).collect();
    let probe_initial = probe_loss(&codec, &probe, cfg.lambda)?;

    let shape = cfg.arch.latent_shape();
    let g_cells = cfg.granularity();
    let lambda = cfg.lambda as f32;
    let mut codebook: Option<(ParamStore<f32>, ParamId, Adam<f32>)> = None;
    let mut order: Vec<usize> = (0..maps.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        if epoch == cfg.warmup_epochs.min(cfg.epochs.saturating_sub(1)) && codebook.is_none() {
            let cb = vq::init_codebook(&encode_all(&codec, maps)?, cfg.n_idx, g_cells, cfg.seed)?;
            let (store, id) = codebook_store(&cb)?;
            let opt = Adam::new(&store, cfg.lr);
            codebook = Some((store, id, opt));
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum, mut q_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&SaliencyMap> = chunk.iter().map(|&i| &maps[i]).collect();
            let n = batch.len();
            let mut g = Graph::new();
            let p = g.bind(codec.store(), true)?;
            let x = g.constant(codec.batch_tensor(&batch)?)?;
            let z = codec.encode_graph(&mut g, &p, x).map_err(diverged(step))?;
            let prior = g.mean_square(z)?;
            let prior = g.scale(prior, 0.5 * lambda)?;
            let z_dec = match cfg.train_snr {
                Some(snr) => {
                    let noise = latent_noise(g.value(z), snr, &mut rng);
                    let nv = g.constant(noise)?;
                    g.add(z, nv)?
                }
                None => z,
            };
            let y = codec.decode_graph(&mut g, &p, z_dec).map_err(diverged(step))?;
            let recon = g.mse(x, y)?;
            let mut loss = g.add(recon, prior)?;
            let mut q_mse = None;
            let cb_bound = match &codebook {
                Some((store, id, _)) => {
                    let cbp = g.bind(store, true)?;
                    let (to_blocks, from_blocks) = vq::batch_block_maps(n, shape, g_cells);
                    let d = g_cells * g_cells * shape.2;
                    let rows = to_blocks.len() / d;
                    let blocks = g.gather(z, &to_blocks, &[rows, d])?;
                    let words = store.value(*id);
                    let idx: Vec<usize> = g
                        .value(blocks)
                        .data()
                        .chunks(d)
                        .map(|b| vq::nearest(words.data(), d, b))
                        .collect();
                    let lookup: Vec<usize> = idx.iter().flat_map(|&k| (0..d).map(move |j| k * d + j)).collect();
                    let zq = g.gather(cbp[*id], &lookup, &[rows, d])?;
                    // straight-through: forward value zq, gradient of identity w.r.t. z
                    let zq_val = g.detach(zq)?;
                    let blocks_val = g.detach(blocks)?;
                    let delta = g.sub(zq_val, blocks_val)?;
                    let st = g.add(blocks, delta)?;
                    let mut zq_shape = g.shape(z).to_vec();
                    zq_shape.truncate(4);
                    let z_st = g.gather(st, &from_blocks, &zq_shape)?;
                    let z_st = match cfg.train_snr {
                        Some(snr) => {
                            let noise = latent_noise(g.value(z_st), snr, &mut rng);
                            let nv = g.constant(noise)?;
                            g.add(z_st, nv)?
                        }
                        None => z_st,
                    };
                    let yq = codec.decode_graph(&mut g, &p, z_st).map_err(diverged(step))?;
                    let recon_q = g.mse(x, yq)?;
                    q_mse = Some(g.value(recon_q).data()[0] as f64);
                    let cb_loss = g.mse(blocks_val, zq)?;
                    let commit = g.mse(blocks, zq_val)?;
                    let commit = g.scale(commit, cfg.beta_commit as f32)?;
                    loss = g.add(loss, recon_q)?;
                    loss = g.add(loss, cb_loss)?;
                    loss = g.add(loss, commit)?;
                    true
                }
                None => false,
            };
            let loss_val = g.value(loss).data()[0] as f64;
            let mse_val = g.value(recon).data()[0] as f64;
            let grads = g.backward(loss).map_err(diverged(step))?;
            codec.store_mut().zero_grad();
            codec.store_mut().accumulate(&grads);
            adam.step(codec.store_mut())?;
            if cb_bound {
                let (store, _, opt) = codebook.as_mut().expect("bound above");
                store.zero_grad();
                store.accumulate(&grads);
                opt.step(store)?;
            }
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    step,
                    source: Box::new(ulbsc_autodiff::Error::NonFinite { op: "loss" }.into()),
                });
            }
            loss_sum += loss_val;
            mse_sum += mse_val;
            q_sum += q_mse.unwrap_or(0.0);
            batches += 1;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            recon_mse: mse_sum / batches as f64,
            quantized_mse: codebook.as_ref().map(|_| q_sum / batches as f64),
        };
        log::info!(
            "codec epoch {epoch}: loss {:.5} recon mse {:.5} quantized mse {:?}",
            stats.loss,
            stats.recon_mse,
            stats.quantized_mse
        );
        epochs.push(stats);
    }

    // A fresh k-means fit on the final latents often revives codewords that
    // gradient updates left unused; keep it only if it quantizes better.
    let latents = encode_all(&codec, maps)?;
    let refit = vq::init_codebook(&latents, cfg.n_idx, g_cells, cfg.seed)?;
    let (codebook, codebook_refit) = match codebook {
        Some((store, id, _)) => {
            let trained = Codebook::new(g_cells, shape.2, store.value(id).data().to_vec())?;
            let (d_trained, d_refit) = (distortion(&latents, &trained)?, distortion(&latents, &refit)?);
            log::info!("codebook distortion: trained {d_trained:.5}, refit {d_refit:.5}");
            if d_refit < d_trained {
                (refit, true)
            } else {
                (trained, false)
            }
        }
        None => (refit, true),
    };
    let (codebook, index_assignment) = if cfg.index_snrs.is_empty() {
        (codebook, None)
    } else {
        let decoded = decode_words(&codec, &codebook)?;
        let a = assign::assign(&decoded, &cfg.index_snrs)?;
        log::info!("index assignment: expected distortion {:.4} -> {:.4}", a.cost_before, a.cost_after);
        (codebook.permuted(&a.order)?, Some((a.cost_before, a.cost_after)))
    };
    let probe_final = probe_loss(&codec, &probe, cfg.lambda)?;
    Ok(TrainedCodec {
        codec,
        codebook,
        report: CodecTrainReport {
            epochs,
            probe_initial,
            probe_final,
            codebook_refit,
            index_assignment,
        },
    })
}

fn encode_all(codec: &SaliencyCodec<f32>, maps: &[SaliencyMap]) -> Result<Vec<Latent>> {
    let refs: Vec<&SaliencyMap> = maps.iter().collect();
    let mut latents = Vec::with_capacity(maps.len());
    for chunk in refs.chunks(64) {
        latents.extend(codec.encode_batch(chunk)?);
    }
    Ok(latents)
}

/// What each codeword decodes to when it fills every block of the latent.
fn decode_words(codec: &SaliencyCodec<f32>, cb: &Codebook) -> Result<Vec<Vec<f32>>> {
    let (h, w, _) = codec.arch().latent_shape();
    let (rows, cols) = (h / cb.granularity(), w / cb.granularity());
    let mut out = Vec::with_capacity(cb.len());
    for chunk in (0..cb.len()).collect::<Vec<_>>().chunks(64) {
        let latents = chunk
            .iter()
            .map(|&i| vq::dequantize(&IndexGrid::new(rows, cols, vec![i; rows * cols])?, cb))
            .collect::<Result<Vec<Latent>>>()?;
        let refs: Vec<&Latent> = latents.iter().collect();
        out.extend(codec.decode_batch(&refs)?.into_iter().map(|m| m.values().to_vec()));
    }
    Ok(out)
}

/// Mean squared latent error after quantization.
fn distortion(latents: &[Latent], cb: &Codebook) -> Result<f64> {
    let mut sum = 0.0;
    for z in latents {
        let (_, zq) = vq::quantize(z, cb)?;
        sum += vq::vq_losses(z, &zq)?.0;
    }
    Ok(sum / latents.len() as f64)
}

/// Gaussian noise at `snr_db` relative to each sample's latent power.
fn latent_noise(z: &Tensor<f32>, snr_db: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = z.shape()[0];
    let per = z.numel() / n;
    let mut out = Vec::with_capacity(z.numel());
    for sample in z.data().chunks(per) {
        let power = sample.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / per as f64;
        let sigma = (power * 10f64.powf(-snr_db / 10.0)).sqrt();
        for _ in 0..per {
            let e: f64 = StandardNormal.sample(rng);
            out.push((sigma * e) as f32);
        }
    }
    Tensor::new(z.shape().to_vec(), out).expect("same shape")
}
