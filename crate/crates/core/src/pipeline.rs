//! End-to-end link: both branches through the channel, the analog baseline,
//! condition export for an external generator and SNR sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{ChannelConfig, Mode, NoiseStats, SaliencyLink, TextLink};
use crate::dataset::{Caption, SaliencyMap};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{self, OverheadLedger, SaliencyScore, ThresholdPolicy};
use crate::pgm;
use crate::saliency::{Latent, SaliencyCodec};
use crate::text::TextCodec;
use crate::vq::{self, Codebook};

pub const CONDITION_FILE: &str = "condition.json";
pub const MAP_FILE: &str = "saliency.pgm";
pub const MAP_FORMAT: &str = "pgm-p5";
/// JSON schema every exported `condition.json` satisfies.
pub const CONDITION_SCHEMA: &str = include_str!("../schema/condition.schema.json");
pub const CSV_HEADER: [&str; 10] = [
    "snr_db",
    "mode",
    "mae",
    "precision",
    "recall",
    "f_measure",
    "caption_acc",
    "map_bytes",
    "caption_bytes",
    "seed",
];

const DECODE_CHUNK: usize = 64;

/// Synthetic data split used by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: crate::dataset::DEFAULT_TRAIN,
            n_test: crate::dataset::DEFAULT_TEST,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Rendered (map, caption) pairs of the train and test splits.
    pub fn render(&self) -> Result<(Vec<(SaliencyMap, Caption)>, Vec<(SaliencyMap, Caption)>)> {
        let (train, test) = crate::dataset::make_split(self.n_train, self.n_test, self.seed)?;
        Ok((crate::dataset::render_all(&train)?, crate::dataset::render_all(&test)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemConfig {
    pub codec_dir: PathBuf,
    pub text_dir: PathBuf,
    pub channel: ChannelConfig,
    pub policy: ThresholdPolicy,
    pub dataset: DatasetSpec,
    /// Source image size for the ledger; raw RGB of the map size when unset.
    pub original_bytes: Option<u64>,
    pub out_dir: PathBuf,
}

impl SystemConfig {
    pub fn load_system(&self) -> Result<System> {
        System::load(&self.codec_dir, &self.text_dir)
    }
}

/// Trained models of both branches.
pub struct System {
    pub codec: SaliencyCodec<f32>,
    pub codebook: Codebook,
    pub text: TextCodec<f32>,
}

impl System {
    pub fn new(codec: SaliencyCodec<f32>, codebook: Codebook, text: TextCodec<f32>) -> Result<Self> {
        let (h, w, c) = codec.arch().latent_shape();
        let g = codebook.granularity();
        if codebook.channels() != c || h % g != 0 || w % g != 0 {
            return Err(Error::invalid(
                "codebook",
                format!("{g}x{g}x{} blocks do not tile a {h}x{w}x{c} latent", codebook.channels()),
            ));
        }
        Ok(System { codec, codebook, text })
    }

    pub fn load(codec_dir: &Path, text_dir: &Path) -> Result<Self> {
        let (codec, codebook) = SaliencyCodec::load(codec_dir).stage("load codec")?;
        let codebook = codebook.ok_or_else(|| Error::Stage {
            stage: "load codec",
            source: Box::new(Error::Format(format!("{} holds no codebook", codec_dir.display()))),
        })?;
        let text = TextCodec::load(text_dir).stage("load text codec")?;
        System::new(codec, codebook, text)
    }

    pub fn grid_cells(&self) -> usize {
        let (h, w, _) = self.codec.arch().latent_shape();
        let g = self.codebook.granularity();
        (h / g) * (w / g)
    }

    /// Bytes the saliency branch puts on the air in `mode`.
    ///
    /// Index modes carry packed indices; the baseline carries the latent
    /// itself, counted as 32-bit floats.
    pub fn map_bytes(&self, mode: Mode) -> u64 {
        match mode {
            Mode::AnalogBaseline => {
                let (h, w, c) = self.codec.arch().latent_shape();
                (h * w * c * 4) as u64
            }
            _ => vq::payload_bytes(self.grid_cells(), self.codebook.len()) as u64,
        }
    }

    fn original_bytes(&self, configured: Option<u64>) -> u64 {
        configured.unwrap_or_else(|| (self.codec.arch().height * self.codec.arch().width * 3) as u64)
    }
}

/// What the receiver recovered for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub map: SaliencyMap,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub score: SaliencyScore,
    pub caption: String,
    pub caption_ok: bool,
    pub index_errors: usize,
    pub ledger: OverheadLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub mode: Mode,
    /// `None` for a noiseless link.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub policy: ThresholdPolicy,
    pub samples: Vec<SampleResult>,
    /// Means of the per-sample scores.
    pub aggregate: SaliencyScore,
    pub caption_acc: f64,
    pub map_bytes: u64,
    pub mean_caption_bytes: f64,
    pub saliency_noise: Option<NoiseStats>,
    pub text_noise: Option<NoiseStats>,
    pub runtime_secs: f64,
}

fn snr_field(cfg: &ChannelConfig) -> Option<f64> {
    (!cfg.noiseless).then_some(cfg.snr_db)
}

/// Receiver-side latents of every sample after the saliency link.
fn saliency_path(system: &System, latents: &[Latent], link: &mut SaliencyLink) -> Result<(Vec<Latent>, Vec<usize>)> {
    let mut out = Vec::with_capacity(latents.len());
    let mut errors = Vec::with_capacity(latents.len());
    for z in latents {
        if link.mode() == Mode::AnalogBaseline {
            out.push(link.send_latent(z).stage("send saliency")?);
            errors.push(0);
            continue;
        }
        let (grid, _) = vq::quantize(z, &system.codebook).stage("quantize")?;
        let rx = link.send_indices(&grid, &system.codebook).stage("send saliency")?;
        out.push(vq::dequantize(&rx.grid, &system.codebook).stage("dequantize")?);
        errors.push(rx.index_errors);
    }
    Ok((out, errors))
}

fn decode_all(system: &System, latents: &[Latent]) -> Result<Vec<SaliencyMap>> {
    let mut maps = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(DECODE_CHUNK) {
        let refs: Vec<&Latent> = chunk.iter().collect();
        maps.extend(system.codec.decode_batch(&refs).stage("decode saliency")?);
    }
    Ok(maps)
}

fn encode_all(system: &System, pairs: &[(SaliencyMap, Caption)]) -> Result<Vec<Latent>> {
    let mut latents = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DECODE_CHUNK) {
        let refs: Vec<&SaliencyMap> = chunk.iter().map(|(m, _)| m).collect();
        latents.extend(system.codec.encode_batch(&refs).stage("encode saliency")?);
    }
    Ok(latents)
}

fn run_encoded(
    system: &System,
    pairs: &[(SaliencyMap, Caption)],
    latents: &[Latent],
    cfg: &ChannelConfig,
    policy: ThresholdPolicy,
    original_bytes: Option<u64>,
) -> Result<(Vec<Transmission>, LinkReport)> {
    if pairs.is_empty() {
        return Err(Error::invalid("link input", "no samples"));
    }
    cfg.validate().stage("channel config")?;
    let start = Instant::now();
    let mut sal = SaliencyLink::new(cfg, Some(&system.codebook)).stage("saliency link")?;
    let mut txt = TextLink::new(cfg);
    let (received, index_errors) = saliency_path(system, latents, &mut sal)?;
    let maps = decode_all(system, &received)?;

    let original = system.original_bytes(original_bytes);
    let map_bytes = system.map_bytes(cfg.mode);
    let mut out = Vec::with_capacity(pairs.len());
    let mut samples = Vec::with_capacity(pairs.len());
    for (((gt, caption), map), errs) in pairs.iter().zip(maps).zip(index_errors) {
        let caption_hat = system
            .text
            .transmit(caption.as_str(), |z| txt.send(z))
            .stage("text link")?;
        let score = metrics::score_map(&map, gt, policy).stage("score")?;
        samples.push(SampleResult {
            score,
            caption_ok: caption_hat == caption.as_str(),
            caption: caption_hat.clone(),
            index_errors: errs,
            ledger: OverheadLedger::new(original, map_bytes, caption.byte_len() as u64)?,
        });
        out.push(Transmission { map, caption: caption_hat });
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleResult) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let aggregate = SaliencyScore {
        mae: mean(|s| s.score.mae),
        precision: mean(|s| s.score.precision),
        recall: mean(|s| s.score.recall),
        f_measure: mean(|s| s.score.f_measure),
        threshold: mean(|s| s.score.threshold),
    };
    let report = LinkReport {
        mode: cfg.mode,
        snr_db: snr_field(cfg),
        seed: cfg.seed,
        policy,
        aggregate,
        caption_acc: mean(|s| s.caption_ok as u8 as f64),
        map_bytes,
        mean_caption_bytes: mean(|s| s.ledger.caption_payload_bytes as f64),
        saliency_noise: sal.stats(),
        text_noise: txt.stats(),
        runtime_secs: start.elapsed().as_secs_f64(),
        samples,
    };
    Ok((out, report))
}

/// Sends every pair through both branches, in order, on one pair of noise streams.
pub fn run_batch(
    system: &System,
    pairs: &[(SaliencyMap, Caption)],
    cfg: &ChannelConfig,
    policy: ThresholdPolicy,
    original_bytes: Option<u64>,
) -> Result<(Vec<Transmission>, LinkReport)> {
    let latents = encode_all(system, pairs)?;
    run_encoded(system, pairs, &latents, cfg, policy, original_bytes)
}

/// One sample through both branches.
pub fn run_link(
    system: &System,
    map: &SaliencyMap,
    caption: &Caption,
    cfg: &ChannelConfig,
    policy: ThresholdPolicy,
) -> Result<(Transmission, SampleResult)> {
    let pair = [(map.clone(), caption.clone())];
    let (mut out, mut report) = run_batch(system, &pair, cfg, policy, None)?;
    Ok((out.remove(0), report.samples.remove(0)))
}

/// Codebook-free comparison path: the raw latent crosses the channel.
pub fn run_baseline_analog(system: &System, map: &SaliencyMap, cfg: &ChannelConfig) -> Result<SaliencyMap> {
    let cfg = ChannelConfig {
        mode: Mode::AnalogBaseline,
        ..*cfg
    };
    let z = system.codec.encode(map).stage("encode saliency")?;
    let mut link = SaliencyLink::new(&cfg, None).stage("saliency link")?;
    let z_hat = link.send_latent(&z).stage("send saliency")?;
    system.codec.decode(&z_hat).stage("decode saliency")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub snrs: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seed: u64,
    pub policy: ThresholdPolicy,
    pub original_bytes: Option<u64>,
}

/// -3 to 15 dB in 3 dB steps.
pub fn default_snrs() -> Vec<f64> {
    (-3..=15).step_by(3).map(f64::from).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snrs: default_snrs(),
            modes: Mode::ALL.to_vec(),
            seed: 0,
            policy: ThresholdPolicy::Adaptive,
            original_bytes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub mode: String,
    pub mae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub caption_acc: f64,
    pub map_bytes: u64,
    pub caption_bytes: f64,
    pub seed: u64,
}

impl SweepRow {
    pub fn from_report(r: &LinkReport) -> Self {
        SweepRow {
            snr_db: r.snr_db.unwrap_or(f64::INFINITY),
            mode: r.mode.as_str().into(),
            mae: r.aggregate.mae,
            precision: r.aggregate.precision,
            recall: r.aggregate.recall,
            f_measure: r.aggregate.f_measure,
            caption_acc: r.caption_acc,
            map_bytes: r.map_bytes,
            caption_bytes: r.mean_caption_bytes,
            seed: r.seed,
        }
    }
}

/// Runs every SNR point in every mode over `pairs`, writing one CSV row per
/// (point, mode) as soon as it is done.
///
/// Point `i` uses seed `cfg.seed + i` for all modes, so modes at one point
/// see the same noise streams. Rows already written stay flushed on error.
pub fn sweep<W: Write>(
    system: &System,
    pairs: &[(SaliencyMap, Caption)],
    cfg: &SweepConfig,
    out: &mut csv::Writer<W>,
) -> Result<Vec<LinkReport>> {
    let latents = encode_all(system, pairs)?;
    let mut reports = Vec::with_capacity(cfg.snrs.len() * cfg.modes.len());
    for (i, &snr) in cfg.snrs.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        for &mode in &cfg.modes {
            let channel = ChannelConfig::new(snr, mode, seed);
            let (_, report) = run_encoded(system, pairs, &latents, &channel, cfg.policy, cfg.original_bytes)?;
            out.serialize(SweepRow::from_report(&report))?;
            out.flush()?;
            log::info!(
                "{snr:>5} dB {mode:<15} mae {:.4} f {:.4} captions {:.3}",
                report.aggregate.mae,
                report.aggregate.f_measure,
                report.caption_acc
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookInfo {
    pub n_idx: usize,
    pub granularity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBytes {
    pub caption: u64,
    pub map: u64,
}

/// Contents of `condition.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionManifest {
    pub caption: String,
    pub saliency_map: Option<String>,
    pub map_format: String,
    pub codebook: CodebookInfo,
    pub snr_db: Option<f64>,
    pub mode: Mode,
    pub payload_bytes: PayloadBytes,
}

impl ConditionManifest {
    /// Manifest for a received pair; `with_map = false` gives a caption-only condition.
    pub fn new(system: &System, cfg: &ChannelConfig, caption: &str, caption_bytes: u64, with_map: bool) -> Self {
        ConditionManifest {
            caption: caption.into(),
            saliency_map: with_map.then(|| MAP_FILE.into()),
            map_format: MAP_FORMAT.into(),
            codebook: CodebookInfo {
                n_idx: system.codebook.len(),
                granularity: system.codebook.granularity(),
            },
            snr_db: snr_field(cfg),
            mode: cfg.mode,
            payload_bytes: PayloadBytes {
                caption: caption_bytes,
                map: if with_map { system.map_bytes(cfg.mode) } else { 0 },
            },
        }
    }
}

/// Writes `condition.json`, plus `saliency.pgm` when the manifest names a map.
pub fn export_manifest(out_dir: &Path, manifest: &ConditionManifest, map: Option<&SaliencyMap>) -> Result<PathBuf> {
    let value = serde_json::to_value(manifest)?;
    validate_condition(&value)?;
    std::fs::create_dir_all(out_dir)?;
    match (&manifest.saliency_map, map) {
        (Some(rel), Some(m)) => pgm::save(m, &out_dir.join(rel))?,
        (None, _) => {}
        (Some(rel), None) => {
            return Err(Error::invalid("export", format!("manifest names `{rel}` but no map was given")));
        }
    }
    let path = out_dir.join(CONDITION_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&value)?)?;
    Ok(path)
}

fn schema_err(detail: impl Into<String>) -> Error {
    Error::Format(format!("condition.json: {}", detail.into()))
}

fn check_keys(obj: &serde_json::Map<String, Value>, what: &str, keys: &[&str]) -> Result<()> {
    for k in keys {
        if !obj.contains_key(*k) {
            return Err(schema_err(format!("{what} is missing `{k}`")));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(schema_err(format!("{what} has unknown key `{extra}`")));
    }
    Ok(())
}

fn check_count(v: &Value, what: &str, min: u64) -> Result<()> {
    match v.as_u64() {
        Some(n) if n >= min => Ok(()),
        _ => Err(schema_err(format!("`{what}` must be an integer >= {min}, got {v}"))),
    }
}

/// A map path must stay inside the manifest directory.
fn safe_relative(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path.split('/').all(|part| part != "..")
}

/// Checks a parsed document against the published condition schema.
pub fn validate_condition(v: &Value) -> Result<()> {
    let obj = v.as_object().ok_or_else(|| schema_err("top level is not an object"))?;
    check_keys(
        obj,
        "manifest",
        &["caption", "saliency_map", "map_format", "codebook", "snr_db", "mode", "payload_bytes"],
    )?;
    if !obj["caption"].is_string() {
        return Err(schema_err("`caption` must be a string"));
    }
    match &obj["saliency_map"] {
        Value::Null => {}
        Value::String(p) if safe_relative(p) => {}
        other => return Err(schema_err(format!("`saliency_map` must be a relative path or null, got {other}"))),
    }
    if obj["map_format"] != MAP_FORMAT {
        return Err(schema_err(format!("`map_format` must be \"{MAP_FORMAT}\"")));
    }
    let cb = obj["codebook"].as_object().ok_or_else(|| schema_err("`codebook` must be an object"))?;
    check_keys(cb, "codebook", &["n_idx", "granularity"])?;
    check_count(&cb["n_idx"], "codebook.n_idx", 1)?;
    check_count(&cb["granularity"], "codebook.granularity", 1)?;
    if !(obj["snr_db"].is_null() || obj["snr_db"].is_number()) {
        return Err(schema_err("`snr_db` must be a number or null"));
    }
    match obj["mode"].as_str() {
        Some(m) if Mode::ALL.iter().any(|x| x.as_str() == m) => {}
        _ => return Err(schema_err(format!("`mode` {} is not a known mode", obj["mode"]))),
    }
    let pb = obj["payload_bytes"]
        .as_object()
        .ok_or_else(|| schema_err("`payload_bytes` must be an object"))?;
    check_keys(pb, "payload_bytes", &["caption", "map"])?;
    check_count(&pb["caption"], "payload_bytes.caption", 0)?;
    check_count(&pb["map"], "payload_bytes.map", 0)?;
    Ok(())
}

/// Parses and validates `condition.json` bytes.
pub fn parse_condition(bytes: &[u8]) -> Result<ConditionManifest> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| schema_err(e.to_string()))?;
    validate_condition(&v)?;
    serde_json::from_value(v).map_err(|e| schema_err(e.to_string()))
}

/// Reads a manifest directory written by [`export_manifest`].
pub fn load_manifest(dir: &Path) -> Result<(ConditionManifest, Option<SaliencyMap>)> {
    let manifest = parse_condition(&std::fs::read(dir.join(CONDITION_FILE))?)?;
    let map = match &manifest.saliency_map {
        Some(rel) => Some(pgm::load(&dir.join(rel))?),
        None => None,
    };
    Ok((manifest, map))
}

/// Ledger of one caption under the system's codebook settings.
pub fn ledger(system: &System, caption: &str, original_bytes: Option<u64>, caption_only: bool) -> Result<OverheadLedger> {
    metrics::ledger(
        system.original_bytes(original_bytes),
        system.grid_cells(),
        system.codebook.len(),
        caption.len(),
        !caption_only,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc() -> Value {
        json!({
            "caption": "a small circle in the top left",
            "saliency_map": "saliency.pgm",
            "map_format": "pgm-p5",
            "codebook": {"n_idx": 256, "granularity": 8},
            "snr_db": -3.0,
            "mode": "analog-codeword",
            "payload_bytes": {"caption": 30, "map": 1}
        })
    }

    #[test]
    fn accepts_a_well_formed_manifest() {
        validate_condition(&doc()).unwrap();
        let mut d = doc();
        d["saliency_map"] = Value::Null;
        d["snr_db"] = Value::Null;
        validate_condition(&d).unwrap();
    }

    #[test]
    fn rejects_schema_violations() {
        let cases: Vec<(&str, Value)> = vec![
            ("saliency_map", json!("../x.pgm")),
            ("saliency_map", json!("/etc/passwd")),
            ("map_format", json!("png")),
            ("mode", json!("fm")),
            ("snr_db", json!("3")),
            ("caption", json!(3)),
            ("codebook", json!({"n_idx": 0, "granularity": 8})),
            ("payload_bytes", json!({"caption": -1, "map": 1})),
            ("payload_bytes", json!({"caption": 1})),
        ];
        for (key, bad) in cases {
            let mut d = doc();
            d[key] = bad;
            assert!(validate_condition(&d).is_err(), "{key} accepted {d}");
        }
        let mut d = doc();
        d["extra"] = json!(1);
        assert!(validate_condition(&d).is_err());
        assert!(parse_condition(b"[]").is_err());
        assert!(parse_condition(b"{").is_err());
    }

    #[test]
    fn default_sweep_grid() {
        assert_eq!(default_snrs(), vec![-3.0, 0.0, 3.0, 6.0, 9.0, 12.0, 15.0]);
    }
}
