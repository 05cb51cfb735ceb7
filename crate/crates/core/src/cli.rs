//! Command-line front end. Every failure is reported on stderr as one JSON
//! line `{"error": kind, "message": text}`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CtrError, Result};
use crate::fcp::{estimate_filter, fcp_weights};
use crate::loss::{Alpha, Objective};
use crate::metrics::{best_assignment, score_report, si_sdr, DEFAULT_PROJ_TAPS};
use crate::pipeline::{
    blockwise_separate, read_json, write_json, AppConfig, BlockReport, EstimateEntry,
    EstimatesManifest, GroundTruthSidecar, SessionManifest, SolverSeparator, write_scene,
};
use crate::scene::{synth_scene, OverlapStyle, SceneMode};
use crate::signal::{stft_with, write_wav, Spectrogram, WavFormat};
use crate::solver::{evaluate_estimates, Parametrization, SupervisionMode};
use crate::subband::SubbandFilter;

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ctr", version, about = "Cross-talk reduction for close-talk microphone sessions")]
pub struct Cli {
    /// TOML configuration file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for scene simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene to WAV files and manifests.
    Simulate(SimulateArgs),
    /// Separate a session block by block.
    Separate(SeparateArgs),
    /// Score estimates against ground-truth references.
    Evaluate(EvaluateArgs),
    /// Print the loss of a set of estimates.
    Loss(LossArgs),
    /// Compare estimated sub-band filters with the ground truth.
    FcpCheck(FcpCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// subband-exact or time-domain.
    #[arg(long, value_parser = parse_kebab::<SceneMode>)]
    pub scene_mode: Option<SceneMode>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub far_mics: Option<usize>,
    #[arg(long)]
    pub duration: Option<f64>,
    /// full or sparse.
    #[arg(long, value_parser = parse_kebab::<OverlapStyle>)]
    pub overlap: Option<OverlapStyle>,
    #[arg(long)]
    pub overlap_ratio: Option<f64>,
    /// pcm16 or float32.
    #[arg(long, value_parser = parse_kebab::<WavFormat>, default_value = "float32")]
    pub wav_format: WavFormat,
}

#[derive(Debug, Args, Default)]
pub struct SolverFlags {
    /// unsupervised or weak.
    #[arg(long, value_parser = parse_kebab::<SupervisionMode>)]
    pub mode: Option<SupervisionMode>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Far-field weight: a number or "1/P".
    #[arg(long)]
    pub alpha: Option<Alpha>,
    /// Activity-loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Past filter taps, including the current frame.
    #[arg(long)]
    pub past_taps: Option<usize>,
    #[arg(long)]
    pub future_taps: Option<usize>,
    /// Weight floor relative to the mixture's peak power.
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub diag_load: Option<f64>,
    /// f-abs or l2.
    #[arg(long, value_parser = parse_kebab::<Objective>)]
    pub objective: Option<Objective>,
    /// direct or mask.
    #[arg(long, value_parser = parse_kebab::<Parametrization>)]
    pub parametrization: Option<Parametrization>,
}

impl SolverFlags {
    fn apply(&self, cfg: &mut AppConfig) {
        let s = &mut cfg.solver;
        if let Some(v) = self.mode {
            s.mode = v;
        }
        if let Some(v) = self.iters {
            s.max_iters = v;
        }
        if let Some(v) = self.objective {
            s.objective = v;
        }
        if let Some(v) = self.parametrization {
            s.parametrization = v;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        let f = &mut cfg.fcp;
        if let Some(v) = self.past_taps {
            f.past_taps = v;
        }
        if let Some(v) = self.future_taps {
            f.future_taps = v;
        }
        if let Some(v) = self.xi {
            f.xi = v;
        }
        if let Some(v) = self.diag_load {
            f.diag_load = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Session manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for estimates, `estimates.json` and `loss_trace.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[arg(long)]
    pub block_len: Option<f64>,
    #[arg(long)]
    pub context: Option<f64>,
    #[arg(long, value_parser = parse_kebab::<WavFormat>, default_value = "float32")]
    pub wav_format: WavFormat,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Session manifest with ground truth.
    #[arg(long)]
    pub references: PathBuf,
    /// Estimates manifest written by `separate`.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Match estimates to references by best SI-SDR instead of speaker id.
    #[arg(long)]
    pub permute: bool,
    #[arg(long, default_value_t = DEFAULT_PROJ_TAPS)]
    pub proj_taps: usize,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Estimates manifest; omitted means the close-talk mixtures themselves.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct FcpCheckArgs {
    /// Simulated session manifest with a ground-truth sidecar.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub past_taps: Option<usize>,
    #[arg(long)]
    pub future_taps: Option<usize>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub diag_load: Option<f64>,
    /// Regress the STFTs of the WAV files instead of the re-synthesised
    /// exact spectrograms.
    #[arg(long)]
    pub from_wav: bool,
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CtrError::config("--threads must be at least 1"));
        }
        // A second initialisation in the same process keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialised");
        }
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CtrError::Json {
        path: PathBuf::from("<stdout>"),
        source,
    })?;
    println!("{text}");
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|source| CtrError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn simulate(cfg: &AppConfig, a: &SimulateArgs) -> Result<()> {
    let mut scene_cfg = cfg.scene.clone();
    if let Some(s) = cfg.seed {
        scene_cfg.seed = s;
    }
    if let Some(v) = a.scene_mode {
        scene_cfg.mode = v;
    }
    if let Some(v) = a.speakers {
        scene_cfg.num_speakers = v;
    }
    if let Some(v) = a.far_mics {
        scene_cfg.num_far = v;
    }
    if let Some(v) = a.duration {
        scene_cfg.duration_s = v;
    }
    if let Some(v) = a.overlap {
        scene_cfg.overlap_style = v;
    }
    if let Some(v) = a.overlap_ratio {
        scene_cfg.overlap_ratio = v;
    }
    let scene = synth_scene(&scene_cfg)?;
    let manifest = write_scene(&scene, &scene_cfg, &a.out, a.wav_format)?;
    log::info!(
        "wrote {} close-talk and {} far-field channels to {}",
        manifest.close_talk.len(),
        manifest.far_field.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct LossTraceReport<'a> {
    speaker_ids: &'a [String],
    blocks: &'a [BlockReport],
}

fn separate(mut cfg: AppConfig, a: &SeparateArgs) -> Result<()> {
    a.solver.apply(&mut cfg);
    if let Some(v) = a.block_len {
        cfg.block.len_s = v;
    }
    if let Some(v) = a.context {
        cfg.block.context_s = v;
    }
    let solve = cfg.solve_config();
    solve.validate()?;
    let (manifest, base) = SessionManifest::load(&a.manifest)?;
    let session = manifest.load_session(&base)?;
    if solve.mode == SupervisionMode::Weak && session.activity.is_none() {
        return Err(CtrError::config("weak mode needs activity in the manifest"));
    }
    let sep = SolverSeparator {
        stft: cfg.stft,
        solve,
    };
    let out = blockwise_separate(&session, &cfg.block, &sep)?;
    create_dir(&a.out)?;
    let mut entries = Vec::new();
    for (id, w) in session.speaker_ids.iter().zip(&out.estimates) {
        let name = PathBuf::from(format!("estimate_{id}.wav"));
        write_wav(&a.out.join(&name), w, a.wav_format)?;
        entries.push(EstimateEntry {
            speaker_id: id.clone(),
            wav_path: name,
        });
    }
    write_json(
        &a.out.join("estimates.json"),
        &EstimatesManifest {
            sample_rate: session.sample_rate,
            estimates: entries,
        },
    )?;
    write_json(
        &a.out.join("loss_trace.json"),
        &LossTraceReport {
            speaker_ids: &session.speaker_ids,
            blocks: &out.blocks,
        },
    )?;
    Ok(())
}

/// Estimates reordered to the session's speaker order.
fn estimates_in_order(
    ids: &[String],
    path: &Path,
) -> Result<Vec<crate::signal::Waveform>> {
    let est: EstimatesManifest = read_json(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut loaded = est.load_waveforms(&base)?;
    if loaded.len() != ids.len() {
        return Err(CtrError::data(format!(
            "{} estimates for {} speakers",
            loaded.len(),
            ids.len()
        )));
    }
    ids.iter()
        .map(|id| {
            let i = loaded
                .iter()
                .position(|(e, _)| e == id)
                .ok_or_else(|| CtrError::data(format!("no estimate for speaker {id:?}")))?;
            Ok(loaded.swap_remove(i).1)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct EvaluationOutput {
    speaker_ids: Vec<String>,
    #[serde(flatten)]
    report: crate::metrics::ScoreReport,
    mean_si_sdr: f64,
    mean_sdr: Option<f64>,
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (manifest, base) = SessionManifest::load(&a.references)?;
    let session = manifest.load_session(&base)?;
    let refs = manifest.load_references(&base)?;
    let est = estimates_in_order(&session.speaker_ids, &a.estimates)?;
    for (e, r) in est.iter().zip(&refs) {
        if e.len() != r.len() {
            return Err(CtrError::data("estimate and reference lengths differ"));
        }
    }
    let assignment = if a.permute {
        let scores = refs
            .iter()
            .map(|r| est.iter().map(|e| si_sdr(e, r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Some(best_assignment(&scores)?)
    } else {
        None
    };
    let report = score_report(&est, &refs, Some(&session.close_talk), assignment, a.proj_taps)?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).map_err(|source| CtrError::Io {
            path: p.clone(),
            source,
        })?;
    }
    let out = EvaluationOutput {
        speaker_ids: session.speaker_ids.clone(),
        mean_si_sdr: report.mean_si_sdr(),
        mean_sdr: report.mean_sdr(),
        report,
    };
    match &a.out {
        Some(p) => write_json(p, &out),
        None => print_json(&out),
    }
}

fn loss(mut cfg: AppConfig, a: &LossArgs) -> Result<()> {
    a.solver.apply(&mut cfg);
    let solve = cfg.solve_config();
    let (manifest, base) = SessionManifest::load(&a.manifest)?;
    let session = manifest.load_session(&base)?;
    let mix = session.mixture_set(&cfg.stft)?;
    let est = match &a.estimates {
        Some(p) => {
            let geom = mix.geometry().clone();
            estimates_in_order(&session.speaker_ids, p)?
                .iter()
                .map(|w| {
                    if w.len() != session.len() {
                        return Err(CtrError::data("estimate length differs from the session"));
                    }
                    Ok(stft_with(&w.samples, &geom))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => mix.close_talk.clone(),
    };
    let (breakdown, _) = evaluate_estimates(&est, &mix, session.activity.as_deref(), &solve)?;
    print_json(&breakdown)
}

#[derive(Debug, Serialize)]
struct TapStats {
    mean: f64,
    median: f64,
    max: f64,
}

impl TapStats {
    fn of(v: &[f64]) -> TapStats {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        TapStats {
            mean: s.iter().sum::<f64>() / n as f64,
            median,
            max: s[n - 1],
        }
    }
}

#[derive(Debug, Serialize)]
struct PathCheck {
    receiver: usize,
    speaker: usize,
    /// Relative tap error per frequency bin.
    per_freq: Vec<f64>,
    stats: TapStats,
}

#[derive(Debug, Serialize)]
struct FcpCheckReport {
    /// `exact-spectrogram` or `wav`.
    domain: &'static str,
    past_taps: usize,
    future_taps: usize,
    paths: Vec<PathCheck>,
    overall: TapStats,
}

/// Tap at lag `l` (frames into the past; negative is future), or zero.
fn tap_at(f: &SubbandFilter, freq: usize, lag: isize) -> num_complex::Complex64 {
    let k = f.past_taps as isize - 1 - lag;
    if (0..f.len() as isize).contains(&k) {
        f.taps[[freq, k as usize]]
    } else {
        num_complex::Complex64::new(0.0, 0.0)
    }
}

fn relative_tap_error(est: &SubbandFilter, truth: &SubbandFilter, freq: usize) -> f64 {
    let lo = -(est.future_taps.max(truth.future_taps) as isize);
    let hi = est.past_taps.max(truth.past_taps) as isize;
    let (mut num, mut den) = (0.0, 0.0);
    for lag in lo..hi {
        let t = tap_at(truth, freq, lag);
        num += (tap_at(est, freq, lag) - t).norm_sqr();
        den += t.norm_sqr();
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

fn fcp_check(mut cfg: AppConfig, a: &FcpCheckArgs) -> Result<()> {
    let f = &mut cfg.fcp;
    if let Some(v) = a.past_taps {
        f.past_taps = v;
    }
    if let Some(v) = a.future_taps {
        f.future_taps = v;
    }
    if let Some(v) = a.xi {
        f.xi = v;
    }
    if let Some(v) = a.diag_load {
        f.diag_load = v;
    }
    cfg.fcp.validate()?;
    let (manifest, base) = SessionManifest::load(&a.manifest)?;
    let gt_path = manifest
        .ground_truth
        .as_ref()
        .and_then(|g| g.filters_path.as_ref())
        .ok_or_else(|| CtrError::data("manifest has no ground-truth filters"))?;
    let gt_path = if gt_path.is_absolute() {
        gt_path.clone()
    } else {
        base.join(gt_path)
    };
    let sidecar: GroundTruthSidecar = read_json(&gt_path)?;
    let session = manifest.load_session(&base)?;
    let refs = manifest.load_references(&base)?;
    let geom = sidecar.scene_config.stft.geometry(session.sample_rate)?;
    // Sub-band scenes are exact only in the STFT domain; their waveforms
    // are not STFT-consistent, so by default the scene is re-synthesised.
    let exact = !a.from_wav && sidecar.mode == SceneMode::SubbandExact;
    let (sources, receivers): (Vec<Spectrogram>, Vec<Spectrogram>) = if exact {
        let scene = synth_scene(&sidecar.scene_config)?;
        for (w, r) in scene.dry_sources.iter().zip(&refs) {
            let diff: f64 = w.samples.iter().zip(&r.samples).map(|(a, b)| (a - b).powi(2)).sum();
            if w.len() != r.len() || diff > 1e-6 * w.energy().max(f64::MIN_POSITIVE) {
                return Err(CtrError::data(
                    "reference WAVs do not match the recorded scene configuration",
                ));
            }
        }
        let mix = scene.mixture_set()?;
        (scene.dry_specs()?, mix.receivers().cloned().collect())
    } else {
        (
            refs.iter().map(|w| stft_with(&w.samples, &geom)).collect(),
            session
                .close_talk
                .iter()
                .chain(&session.far_field)
                .map(|w| stft_with(&w.samples, &geom))
                .collect(),
        )
    };
    let mut checks = Vec::new();
    for p in &sidecar.paths {
        let Some(rec) = &p.subband else { continue };
        let truth = SubbandFilter::try_from(rec)?;
        let ys = receivers
            .get(p.receiver)
            .ok_or_else(|| CtrError::data(format!("receiver {} out of range", p.receiver)))?;
        let zs = sources
            .get(p.speaker)
            .ok_or_else(|| CtrError::data(format!("speaker {} out of range", p.speaker)))?;
        let w = fcp_weights(ys, cfg.fcp.xi)?;
        let est = estimate_filter(zs, ys, &w, &cfg.fcp).map_err(|e| match e {
            CtrError::Numerical { context, message } => CtrError::numerical(
                format!("receiver {}, speaker {}, {context}", p.receiver, p.speaker),
                message,
            ),
            other => other,
        })?;
        if truth.num_freqs() != est.num_freqs() {
            return Err(CtrError::dim("ground-truth filters use a different STFT"));
        }
        let per_freq: Vec<f64> = (0..est.num_freqs())
            .map(|k| relative_tap_error(&est, &truth, k))
            .collect();
        checks.push(PathCheck {
            receiver: p.receiver,
            speaker: p.speaker,
            stats: TapStats::of(&per_freq),
            per_freq,
        });
    }
    if checks.is_empty() {
        return Err(CtrError::data("ground truth holds no sub-band filters"));
    }
    let all: Vec<f64> = checks.iter().flat_map(|c| c.per_freq.iter().copied()).collect();
    print_json(&FcpCheckReport {
        domain: if exact { "exact-spectrogram" } else { "wav" },
        past_taps: cfg.fcp.past_taps,
        future_taps: cfg.fcp.future_taps,
        overall: TapStats::of(&all),
        paths: checks,
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    init_threads(cfg.threads)?;
    match &cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Separate(a) => separate(cfg, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Loss(a) => loss(cfg, a),
        Command::FcpCheck(a) => fcp_check(cfg, a),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", error_line("usage", first));
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string().replace('\n', " ")));
            e.exit_code()
        }
    }
}
