use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ulbsc::channel::{ChannelConfig, Mode};
use ulbsc::codec_train::{train_codec, CodecTrainConfig};
use ulbsc::dataset::{Caption, SaliencyMap};
use ulbsc::metrics::{self, ScoreRow, ThresholdPolicy};
use ulbsc::pipeline::{self, ConditionManifest, DatasetSpec, SweepConfig, System};
use ulbsc::text::{train_text_link, TextTrainConfig};
use ulbsc::Result;

#[derive(Parser)]
#[command(name = "ulbsc", version, about = "Dual-branch ultra-low bitrate link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the saliency autoencoder and its codebook.
    TrainCodec(TrainCodecArgs),
    /// Train the caption transceiver.
    TrainText(TrainTextArgs),
    /// Send test samples through both branches at one SNR and print a JSON report.
    Run(RunArgs),
    /// Sweep SNR and mode, writing one CSV row per point.
    Sweep(SweepArgs),
    /// Print the payload ledger for a caption.
    Ledger(LedgerArgs),
    /// Write condition.json (and saliency.pgm) for one received test sample.
    Export(ExportArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// Seed of the synthetic train/test split.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.data_seed,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "runs/codec")]
    codec: PathBuf,
    #[arg(long, default_value = "runs/text")]
    text: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<System> {
        System::load(&self.codec, &self.text)
    }
}

#[derive(Args)]
struct ChannelArgs {
    /// Channel SNR in dB.
    #[arg(long, required_unless_present = "noiseless", allow_hyphen_values = true)]
    snr: Option<f64>,
    #[arg(long, default_value = "analog-codeword")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bypass channel noise.
    #[arg(long)]
    noiseless: bool,
}

impl ChannelArgs {
    fn config(&self) -> ChannelConfig {
        match self.snr {
            Some(snr) if !self.noiseless => ChannelConfig::new(snr, self.mode, self.seed),
            _ => ChannelConfig::noiseless(self.mode, self.seed),
        }
    }
}

#[derive(Args)]
struct TrainCodecArgs {
    #[arg(long, default_value = "runs/codec")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 256)]
    n_idx: usize,
    /// Block edge in latent cells; one block for the whole latent when omitted.
    #[arg(long)]
    granularity: Option<usize>,
    #[arg(long, default_value_t = ulbsc::codec_train::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Add channel noise at this SNR (dB) to the latent while training.
    #[arg(long, allow_hyphen_values = true)]
    train_snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainTextArgs {
    #[arg(long, default_value = "runs/text")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Weight of the mutual-information term.
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Channel symbols per token.
    #[arg(long, default_value_t = 16)]
    ksym: usize,
    /// Maximum tokens per caption, including start and end.
    #[arg(long, default_value_t = 16)]
    lmax: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    channel: ChannelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Test samples to send.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value = "adaptive")]
    policy: ThresholdPolicy,
    /// Source image bytes for the ledger; raw RGB of the map when omitted.
    #[arg(long)]
    original_bytes: Option<u64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-sample score CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "adaptive")]
    policy: ThresholdPolicy,
    /// Comma-separated SNR list in dB; -3 to 15 in 3 dB steps by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snrs: Option<Vec<f64>>,
    #[arg(long)]
    original_bytes: Option<u64>,
}

#[derive(Args)]
struct LedgerArgs {
    #[arg(long, default_value = "a small circle in the top left")]
    caption: String,
    /// Take the codebook size and grid from this codec checkpoint.
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_idx: usize,
    #[arg(long, default_value_t = 1)]
    cells: usize,
    #[arg(long, default_value_t = 64 * 64 * 3)]
    original_bytes: u64,
    #[arg(long)]
    caption_only: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    channel: ChannelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Test sample to send.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write only the caption condition.
    #[arg(long)]
    caption_only: bool,
}

fn test_pairs(data: &DataArgs, samples: usize) -> Result<Vec<(SaliencyMap, Caption)>> {
    let (_, mut test) = data.spec().render()?;
    test.truncate(samples);
    Ok(test)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match path {
        Some(p) => serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn train_codec_cmd(a: &TrainCodecArgs) -> Result<()> {
    let (train, _) = a.data.spec().render()?;
    let maps: Vec<SaliencyMap> = train.into_iter().map(|(m, _)| m).collect();
    let cfg = CodecTrainConfig {
        epochs: a.epochs,
        warmup_epochs: a.warmup,
        n_idx: a.n_idx,
        granularity: a.granularity,
        lambda: a.lambda,
        train_snr: a.train_snr,
        seed: a.seed,
        ..Default::default()
    };
    let trained = train_codec(&maps, &cfg)?;
    trained.codec.save(&a.out, Some(&trained.codebook))?;
    write_json(Some(&a.out.join("train_report.json")), &trained.report)?;
    log::info!("codec written to {}", a.out.display());
    Ok(())
}

fn train_text_cmd(a: &TrainTextArgs) -> Result<()> {
    let (train, _) = a.data.spec().render()?;
    let corpus: Vec<String> = train.into_iter().map(|(_, c)| c.0).collect();
    let mut cfg = TextTrainConfig {
        epochs: a.epochs,
        eta: a.eta,
        seed: a.seed,
        ..Default::default()
    };
    cfg.arch.k_sym = a.ksym;
    cfg.arch.l_max = a.lmax;
    let trained = train_text_link(&corpus, &cfg)?;
    trained.codec.save(&a.out, Some(a.eta))?;
    write_json(Some(&a.out.join("train_report.json")), &trained.report)?;
    log::info!("text codec written to {}", a.out.display());
    Ok(())
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let system = a.models.load()?;
    let pairs = test_pairs(&a.data, a.samples)?;
    let cfg = a.channel.config();
    let (_, report) = pipeline::run_batch(&system, &pairs, &cfg, a.policy, a.original_bytes)?;
    if let Some(path) = &a.scores {
        let mut w = csv::Writer::from_path(path)?;
        for s in &report.samples {
            w.serialize(ScoreRow {
                snr_db: report.snr_db.unwrap_or(f64::INFINITY),
                mode: cfg.mode.as_str().into(),
                mae: s.score.mae,
                precision: s.score.precision,
                recall: s.score.recall,
                f_measure: s.score.f_measure,
                policy: a.policy.as_str().into(),
                seed: cfg.seed,
            })?;
        }
        w.flush()?;
    }
    write_json(a.report.as_deref(), &report)
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let system = a.models.load()?;
    let pairs = test_pairs(&a.data, a.samples)?;
    let cfg = SweepConfig {
        snrs: a.snrs.clone().unwrap_or_else(pipeline::default_snrs),
        seed: a.seed,
        policy: a.policy,
        original_bytes: a.original_bytes,
        ..Default::default()
    };
    let mut w = csv::Writer::from_path(&a.out)?;
    pipeline::sweep(&system, &pairs, &cfg, &mut w)?;
    Ok(())
}

fn ledger_cmd(a: &LedgerArgs) -> Result<()> {
    let ledger = match &a.codec {
        Some(dir) => {
            let (codec, codebook) = ulbsc::saliency::SaliencyCodec::load(dir)?;
            let cb = codebook.ok_or_else(|| ulbsc::Error::Format(format!("{} holds no codebook", dir.display())))?;
            let (h, w, _) = codec.arch().latent_shape();
            let g = cb.granularity();
            metrics::ledger(a.original_bytes, (h / g) * (w / g), cb.len(), a.caption.len(), !a.caption_only)?
        }
        None => metrics::ledger(a.original_bytes, a.cells, a.n_idx, a.caption.len(), !a.caption_only)?,
    };
    let mut v = serde_json::to_value(ledger)?;
    v["ratio_permille"] = ledger.ratio_permille().into();
    write_json(None, &v)
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let system = a.models.load()?;
    let mut pairs = test_pairs(&a.data, a.index + 1)?;
    if a.index >= pairs.len() {
        return Err(ulbsc::Error::Format(format!("test split has {} samples", pairs.len())));
    }
    let (map, caption) = pairs.swap_remove(a.index);
    let cfg = a.channel.config();
    let (rx, _) = pipeline::run_link(&system, &map, &caption, &cfg, ThresholdPolicy::Adaptive)?;
    let manifest = ConditionManifest::new(&system, &cfg, &rx.caption, caption.byte_len() as u64, !a.caption_only);
    let path = pipeline::export_manifest(&a.out, &manifest, (!a.caption_only).then_some(&rx.map))?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainCodec(a) => train_codec_cmd(a),
        Command::TrainText(a) => train_text_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ledger(a) => ledger_cmd(a),
        Command::Export(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
