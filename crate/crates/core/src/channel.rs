//! Power normalization, AWGN, and the saliency index transmission modes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::Latent;
use crate::vq::{self, Codebook, IndexGrid};

/// How the saliency branch puts its payload on the channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Unit-power codeword vectors; the receiver re-projects onto the codebook.
    AnalogCodeword,
    /// Bit-packed indices over BPSK with hard decisions.
    DigitalIndex,
    /// Index values as a unit-power PAM amplitude.
    AnalogIndex,
    /// The unquantized latent sent directly, no codebook.
    AnalogBaseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::AnalogCodeword,
        Mode::DigitalIndex,
        Mode::AnalogIndex,
        Mode::AnalogBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::AnalogCodeword => "analog-codeword",
            Mode::DigitalIndex => "digital-index",
            Mode::AnalogIndex => "analog-index",
            Mode::AnalogBaseline => "analog-baseline",
        }
    }

    pub fn uses_codebook(self) -> bool {
        self != Mode::AnalogBaseline
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("mode", format!("`{s}`; expected one of analog-codeword, digital-index, analog-index, analog-baseline")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Bypass noise entirely (the infinite-SNR limit).
    pub noiseless: bool,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, mode: Mode, seed: u64) -> Self {
        ChannelConfig {
            snr_db,
            mode,
            seed,
            noiseless: false,
        }
    }

    pub fn noiseless(mode: Mode, seed: u64) -> Self {
        ChannelConfig {
            snr_db: f64::INFINITY,
            mode,
            seed,
            noiseless: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.noiseless && !self.snr_db.is_finite() {
            return Err(Error::invalid("snr", format!("{} dB", self.snr_db)));
        }
        Ok(())
    }

    /// Seed of the saliency link's noise stream.
    pub fn saliency_seed(&self) -> u64 {
        self.seed
    }

    /// Seed of the text link's noise stream.
    pub fn text_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Noise variance for unit signal power: `10^(-snr/10)`.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Scales `x` to unit mean square.
pub fn normalize_power(x: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize_with_scale(x)?.0)
}

/// Unit-power copy of `x` and the RMS it was divided by.
pub fn normalize_with_scale(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() {
        return Err(ulbsc_autodiff::Error::DegenerateSignal.into());
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    if !(ms > 0.0) || !ms.is_finite() {
        return Err(ulbsc_autodiff::Error::DegenerateSignal.into());
    }
    let rms = ms.sqrt();
    Ok((x.iter().map(|v| v / rms).collect(), rms))
}

/// `x + n` with `n ~ N(0, 10^(-snr/10))` drawn from `rng`.
pub fn awgn<R: Rng + ?Sized>(x: &[f64], snr_db: f64, rng: &mut R) -> Vec<f64> {
    let sigma = noise_variance(snr_db).sqrt();
    x.iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sigma * e
        })
        .collect()
}

/// Empirical moments of injected noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

/// Welford accumulator behind [`NoiseStats`].
#[derive(Clone, Debug, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    fn stats(&self) -> Option<NoiseStats> {
        (self.count > 0).then(|| NoiseStats {
            mean: self.mean,
            variance: if self.count > 1 { self.m2 / (self.count - 1) as f64 } else { 0.0 },
            count: self.count,
        })
    }
}

/// Seeded AWGN source that keeps its stream and statistics across uses.
#[derive(Clone, Debug)]
pub struct Awgn {
    rng: ChaCha8Rng,
    sigma: f64,
    noiseless: bool,
    moments: Moments,
}

impl Awgn {
    pub fn new(snr_db: f64, seed: u64, noiseless: bool) -> Self {
        Awgn {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sigma: noise_variance(snr_db).sqrt(),
            noiseless,
            moments: Moments::default(),
        }
    }

    pub fn apply(&mut self, x: &mut [f64]) {
        self.add_scaled(x, 1.0);
    }

    /// In-phase part of complex noise with total variance σ², i.e. σ²/2 per
    /// real symbol. This is what a coherent BPSK detector sees, giving the
    /// usual `Q(sqrt(2 snr))` bit error rate.
    pub fn apply_in_phase(&mut self, x: &mut [f64]) {
        self.add_scaled(x, std::f64::consts::FRAC_1_SQRT_2);
    }

    fn add_scaled(&mut self, x: &mut [f64], scale: f64) {
        for v in x {
            let n = if self.noiseless {
                0.0
            } else {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                scale * self.sigma * e
            };
            self.moments.push(n);
            *v += n;
        }
    }

    pub fn stats(&self) -> Option<NoiseStats> {
        self.moments.stats()
    }
}

/// Indices recovered by the receiver together with error counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reception {
    pub grid: IndexGrid,
    pub index_errors: usize,
    /// Hard-decision bit errors (digital-index mode only).
    pub bit_errors: usize,
    /// Demodulated values outside `[0, n_idx)` that had to be clamped.
    pub clamped: usize,
}

fn count_errors(sent: &IndexGrid, received: &[usize]) -> usize {
    sent.indices.iter().zip(received).filter(|(a, b)| a != b).count()
}

/// BPSK symbols (bit 0 as +1, bit 1 as -1) of a packed index payload.
pub fn bpsk_modulate(bytes: &[u8], n_bits: usize) -> Vec<f64> {
    (0..n_bits)
        .map(|i| if (bytes[i / 8] >> (7 - i % 8)) & 1 == 1 { -1.0 } else { 1.0 })
        .collect()
}

/// Hard sign decision back to packed bytes.
pub fn bpsk_detect(symbols: &[f64]) -> Vec<u8> {
    let mut out = vec![0u8; symbols.len().div_ceil(8)];
    for (i, &s) in symbols.iter().enumerate() {
        if s < 0.0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Digital-index transmission through an arbitrary symbol channel.
pub fn digital_index_link(
    sent: &IndexGrid,
    n_idx: usize,
    channel: impl FnOnce(&mut [f64]),
) -> Result<Reception> {
    let bytes = vq::pack_indices(&sent.indices, n_idx)?;
    let n_bits = sent.cells() * vq::bits_per_index(n_idx) as usize;
    let tx = bpsk_modulate(&bytes, n_bits);
    let mut rx = tx.clone();
    channel(&mut rx);
    let bit_errors = tx.iter().zip(&rx).filter(|(t, r)| (**t < 0.0) != (**r < 0.0)).count();
    let raw = vq::unpack_indices(&bpsk_detect(&rx), sent.cells(), n_idx)?;
    let clamped = raw.iter().filter(|&&v| v >= n_idx).count();
    let indices: Vec<usize> = raw.into_iter().map(|v| v.min(n_idx - 1)).collect();
    Ok(Reception {
        index_errors: count_errors(sent, &indices),
        grid: IndexGrid::new(sent.rows, sent.cols, indices)?,
        bit_errors,
        clamped,
    })
}

/// Unit-average-power PAM amplitude of index `i` among `n` levels.
pub fn pam_amplitude(i: usize, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    (2.0 * i as f64 - (n - 1.0)) / ((n * n - 1.0) / 3.0).sqrt()
}

/// Nearest PAM level of `y`, and whether it had to be clamped into range.
pub fn pam_decide(y: f64, n: usize) -> (usize, bool) {
    if n <= 1 {
        return (0, false);
    }
    let nf = n as f64;
    let level = ((y * ((nf * nf - 1.0) / 3.0).sqrt() + nf - 1.0) / 2.0).round();
    if level < 0.0 {
        (0, true)
    } else if level > nf - 1.0 {
        (n - 1, true)
    } else {
        (level as usize, false)
    }
}

/// Saliency-branch transmitter/receiver pair with its own noise stream.
#[derive(Clone, Debug)]
pub struct SaliencyLink {
    mode: Mode,
    awgn: Awgn,
    /// Codebook with unit-power codewords, used by analog-codeword mode.
    unit_codebook: Option<Codebook>,
}

impl SaliencyLink {
    pub fn new(cfg: &ChannelConfig, codebook: Option<&Codebook>) -> Result<Self> {
        cfg.validate()?;
        let unit_codebook = match (cfg.mode, codebook) {
            (Mode::AnalogCodeword, Some(cb)) => Some(cb.unit_power()?),
            (Mode::AnalogCodeword, None) => {
                return Err(Error::Payload {
                    mode: cfg.mode.as_str(),
                    detail: "no codebook".into(),
                })
            }
            _ => None,
        };
        Ok(SaliencyLink {
            mode: cfg.mode,
            awgn: Awgn::new(cfg.snr_db, cfg.saliency_seed(), cfg.noiseless),
            unit_codebook,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sends an index grid in one of the three index modes.
    pub fn send_indices(&mut self, sent: &IndexGrid, codebook: &Codebook) -> Result<Reception> {
        let n_idx = codebook.len();
        if let Some(&bad) = sent.indices.iter().find(|&&i| i >= n_idx) {
            return Err(Error::Lookup { index: bad, n_idx });
        }
        match self.mode {
            Mode::DigitalIndex => {
                let awgn = &mut self.awgn;
                digital_index_link(sent, n_idx, |symbols| awgn.apply_in_phase(symbols))
            }
            Mode::AnalogIndex => {
                let mut y: Vec<f64> = sent.indices.iter().map(|&i| pam_amplitude(i, n_idx)).collect();
                self.awgn.apply(&mut y);
                let mut clamped = 0;
                let indices: Vec<usize> = y
                    .iter()
                    .map(|&v| {
                        let (i, c) = pam_decide(v, n_idx);
                        clamped += c as usize;
                        i
                    })
                    .collect();
                Ok(Reception {
                    index_errors: count_errors(sent, &indices),
                    grid: IndexGrid::new(sent.rows, sent.cols, indices)?,
                    bit_errors: 0,
                    clamped,
                })
            }
            Mode::AnalogCodeword => {
                let unit = self.unit_codebook.as_ref().expect("built with the link");
                if unit.dim() != codebook.dim() || unit.len() != n_idx {
                    return Err(Error::Payload {
                        mode: self.mode.as_str(),
                        detail: "codebook differs from the one the link was built with".into(),
                    });
                }
                let mut indices = Vec::with_capacity(sent.cells());
                for &i in &sent.indices {
                    let mut y: Vec<f64> = unit.word(i).iter().map(|&v| v as f64).collect();
                    self.awgn.apply(&mut y);
                    let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
                    indices.push(unit.nearest(&y32));
                }
                Ok(Reception {
                    index_errors: count_errors(sent, &indices),
                    grid: IndexGrid::new(sent.rows, sent.cols, indices)?,
                    bit_errors: 0,
                    clamped: 0,
                })
            }
            Mode::AnalogBaseline => Err(Error::Payload {
                mode: self.mode.as_str(),
                detail: "the baseline carries a latent, not indices".into(),
            }),
        }
    }

    /// Sends a raw latent (analog-baseline mode).
    ///
    /// The latent is normalized to unit power before the channel; its RMS is
    /// treated as noise-free side information and restored at the receiver.
    pub fn send_latent(&mut self, latent: &Latent) -> Result<Latent> {
        if self.mode != Mode::AnalogBaseline {
            return Err(Error::Payload {
                mode: self.mode.as_str(),
                detail: "only the baseline carries a raw latent".into(),
            });
        }
        let x: Vec<f64> = latent.values().iter().map(|&v| v as f64).collect();
        let (mut y, rms) = normalize_with_scale(&x)?;
        self.awgn.apply(&mut y);
        let (h, w, c) = latent.shape();
        Latent::new(h, w, c, y.iter().map(|v| (v * rms) as f32).collect())
    }

    pub fn stats(&self) -> Option<NoiseStats> {
        self.awgn.stats()
    }
}

/// Text-branch link: power normalization then AWGN.
#[derive(Clone, Debug)]
pub struct TextLink {
    awgn: Awgn,
}

impl TextLink {
    pub fn new(cfg: &ChannelConfig) -> Self {
        TextLink {
            awgn: Awgn::new(cfg.snr_db, cfg.text_seed(), cfg.noiseless),
        }
    }

    pub fn send(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        let mut y = normalize_power(z)?;
        self.awgn.apply(&mut y);
        Ok(y)
    }

    pub fn stats(&self) -> Option<NoiseStats> {
        self.awgn.stats()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let y = normalize_power(&[3.0, 4.0]).unwrap();
        assert!((y[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-12);
        assert!((y[1] - 1.1314).abs() < 1e-4);
        assert_eq!(normalize_power(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(
            normalize_power(&[0.0, 0.0]),
            Err(Error::Tensor(ulbsc_autodiff::Error::DegenerateSignal))
        ));
    }

    #[test]
    fn variance_at_10_db() {
        assert!((noise_variance(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(noise_variance(0.0), 1.0);
    }

    #[test]
    fn forced_lsb_flip() {
        let sent = IndexGrid::new(1, 1, vec![0b0000_0001]).unwrap();
        let rx = digital_index_link(&sent, 256, |s| s[7] = -s[7]).unwrap();
        assert_eq!(rx.grid.indices, vec![0]);
        assert_eq!((rx.index_errors, rx.bit_errors), (1, 1));
    }

    #[test]
    fn pam_round_trip_and_power() {
        let n = 256;
        let power = (0..n).map(|i| pam_amplitude(i, n).powi(2)).sum::<f64>() / n as f64;
        assert!((power - 1.0).abs() < 1e-12);
        for i in 0..n {
            assert_eq!(pam_decide(pam_amplitude(i, n), n), (i, false));
        }
        assert_eq!(pam_decide(10.0, n), (n - 1, true));
        assert_eq!(pam_decide(-10.0, n), (0, true));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("qam".parse::<Mode>().is_err());
    }

    #[test]
    fn baseline_rejects_indices() {
        let cb = Codebook::new(1, 1, vec![0.0, 1.0]).unwrap();
        let cfg = ChannelConfig::noiseless(Mode::AnalogBaseline, 0);
        let mut link = SaliencyLink::new(&cfg, Some(&cb)).unwrap();
        let grid = IndexGrid::new(1, 1, vec![1]).unwrap();
        assert!(matches!(link.send_indices(&grid, &cb), Err(Error::Payload { .. })));
        let cfg = ChannelConfig::noiseless(Mode::DigitalIndex, 0);
        let mut link = SaliencyLink::new(&cfg, Some(&cb)).unwrap();
        assert!(matches!(link.send_latent(&Latent::zeros(1, 1, 1)), Err(Error::Payload { .. })));
    }
}
