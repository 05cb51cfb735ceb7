//! Session manifests, block-wise separation of long recordings and
//! training-segment cutting.

mod config;

pub use config::{AppConfig, LossSection, SolverSection};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::loss::{LossBreakdown, MixtureSet};
use crate::scene::{intervals_from_mask, mask_from_intervals, Scene, SceneConfig, SceneMode, ScenePath};
use crate::signal::{istft, read_wav, stft_with, write_wav, StftConfig, WavFormat, Waveform};
use crate::solver::{solve, SolveConfig, SolveStatus};
use crate::subband::SubbandFilterRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloseTalkEntry {
    pub speaker_id: String,
    pub wav_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarFieldEntry {
    pub mic_id: String,
    pub wav_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    /// Dry close-talk speech per speaker id.
    pub dry_sources: BTreeMap<String, PathBuf>,
    /// JSON sidecar with the scene's filters and parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters_path: Option<PathBuf>,
}

/// File-level description of a session. Relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub sample_rate: u32,
    pub close_talk: Vec<CloseTalkEntry>,
    #[serde(default)]
    pub far_field: Vec<FarFieldEntry>,
    /// `[on, off)` sample intervals per speaker id.
    #[serde(default)]
    pub activity: BTreeMap<String, Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CtrError {
    CtrError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a JSON document.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|source| CtrError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CtrError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Audio and activity of a session, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub sample_rate: u32,
    pub speaker_ids: Vec<String>,
    pub mic_ids: Vec<String>,
    pub close_talk: Vec<Waveform>,
    pub far_field: Vec<Waveform>,
    /// Per speaker, per sample; `None` when the manifest has no activity.
    pub activity: Option<Vec<Vec<bool>>>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.close_talk[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_speakers(&self) -> usize {
        self.close_talk.len()
    }

    pub fn mixture_set(&self, stft: &StftConfig) -> Result<MixtureSet> {
        let geom = stft.geometry(self.sample_rate)?;
        MixtureSet::new(
            self.close_talk.iter().map(|w| stft_with(&w.samples, &geom)).collect(),
            self.far_field.iter().map(|w| stft_with(&w.samples, &geom)).collect(),
        )
    }
}

fn check_audio(w: &Waveform, sr: u32, len: Option<usize>, path: &Path) -> Result<()> {
    if w.sample_rate != sr {
        return Err(CtrError::data(format!(
            "{}: sample rate {} differs from the manifest's {sr}",
            path.display(),
            w.sample_rate
        )));
    }
    if let Some(n) = len {
        if w.len() != n {
            return Err(CtrError::data(format!(
                "{}: {} samples, expected {n}",
                path.display(),
                w.len()
            )));
        }
    }
    Ok(())
}

impl SessionManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let m: SessionManifest = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    /// Reads all microphone signals and checks rates, lengths and activity.
    pub fn load_session(&self, base: &Path) -> Result<Session> {
        if self.close_talk.is_empty() {
            return Err(CtrError::data("manifest lists no close-talk microphones"));
        }
        let mut ids: Vec<&str> = self.close_talk.iter().map(|e| e.speaker_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CtrError::data("duplicate speaker ids in manifest"));
        }
        let mut close = Vec::new();
        let mut len = None;
        for e in &self.close_talk {
            let p = resolve(base, &e.wav_path);
            let w = read_wav(&p)?;
            check_audio(&w, self.sample_rate, len, &p)?;
            len = Some(w.len());
            close.push(w);
        }
        let mut far = Vec::new();
        for e in &self.far_field {
            let p = resolve(base, &e.wav_path);
            let w = read_wav(&p)?;
            check_audio(&w, self.sample_rate, len, &p)?;
            far.push(w);
        }
        let n = len.unwrap_or(0);
        let activity = self.activity_masks(n)?;
        Ok(Session {
            sample_rate: self.sample_rate,
            speaker_ids: self.close_talk.iter().map(|e| e.speaker_id.clone()).collect(),
            mic_ids: self.far_field.iter().map(|e| e.mic_id.clone()).collect(),
            close_talk: close,
            far_field: far,
            activity,
        })
    }

    /// Sample-level activity in close-talk order. Speakers missing from a
    /// non-empty activity map are an error.
    pub fn activity_masks(&self, n: usize) -> Result<Option<Vec<Vec<bool>>>> {
        if self.activity.is_empty() {
            return Ok(None);
        }
        for id in self.activity.keys() {
            if !self.close_talk.iter().any(|e| &e.speaker_id == id) {
                return Err(CtrError::data(format!("activity for unknown speaker {id:?}")));
            }
        }
        self.close_talk
            .iter()
            .map(|e| {
                let iv = self.activity.get(&e.speaker_id).ok_or_else(|| {
                    CtrError::data(format!("no activity for speaker {:?}", e.speaker_id))
                })?;
                mask_from_intervals(iv, n)
                    .map_err(|err| CtrError::data(format!("speaker {:?}: {err}", e.speaker_id)))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Dry references in close-talk order.
    pub fn load_references(&self, base: &Path) -> Result<Vec<Waveform>> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or_else(|| CtrError::data("manifest has no ground truth"))?;
        self.close_talk
            .iter()
            .map(|e| {
                let p = gt.dry_sources.get(&e.speaker_id).ok_or_else(|| {
                    CtrError::data(format!("no reference for speaker {:?}", e.speaker_id))
                })?;
                let p = resolve(base, p);
                let w = read_wav(&p)?;
                check_audio(&w, self.sample_rate, None, &p)?;
                Ok(w)
            })
            .collect()
    }
}

/// Block-wise processing layout in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockPlan {
    pub len_s: f64,
    pub context_s: f64,
}

impl Default for BlockPlan {
    fn default() -> Self {
        BlockPlan {
            len_s: 8.0,
            context_s: 0.96,
        }
    }
}

/// One processing block in samples: the solver sees `[start, end)`, the
/// output keeps `[emit_start, emit_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub emit_start: usize,
    pub emit_end: usize,
}

impl BlockPlan {
    pub fn emit_len_s(&self) -> f64 {
        self.len_s - 2.0 * self.context_s
    }

    fn samples(&self, sr: u32) -> Result<(usize, usize, usize)> {
        let block = (self.len_s * sr as f64).round() as usize;
        let ctx = (self.context_s * sr as f64).round() as usize;
        if !(self.context_s >= 0.0) || block <= 2 * ctx {
            return Err(CtrError::config(format!(
                "block.len_s ({}) must exceed twice block.context_s ({})",
                self.len_s, self.context_s
            )));
        }
        Ok((block, ctx, block - 2 * ctx))
    }

    /// Blocks covering `n` samples. Block starts advance by the emit length;
    /// the last block is aligned to the session end and emits everything
    /// after its predecessor's emit region. A session no longer than one
    /// block is a single block.
    pub fn blocks(&self, n: usize, sr: u32) -> Result<Vec<Block>> {
        let (block, ctx, emit) = self.samples(sr)?;
        if n <= block {
            return Ok(vec![Block {
                start: 0,
                end: n,
                emit_start: 0,
                emit_end: n,
            }]);
        }
        let mut out: Vec<Block> = Vec::new();
        let mut s = 0;
        loop {
            let last = s + block >= n;
            let start = if last { n - block } else { s };
            let emit_start = out.last().map_or(0, |b| b.emit_end);
            let emit_end = if last { n } else { start + ctx + emit };
            out.push(Block {
                start,
                end: start + block,
                emit_start,
                emit_end,
            });
            if last {
                return Ok(out);
            }
            s += emit;
        }
    }
}

/// Separates one block of normalised signals into per-speaker waveforms of
/// the same length.
pub trait Separator: Sync {
    fn separate(
        &self,
        close_talk: &[Waveform],
        far_field: &[Waveform],
        activity: Option<&[Vec<bool>]>,
    ) -> Result<BlockOutput>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub estimates: Vec<Waveform>,
    pub loss_trace: Vec<LossBreakdown>,
    pub status: Option<SolveStatus>,
}

/// Returns the close-talk mixtures unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Separator for Passthrough {
    fn separate(
        &self,
        close_talk: &[Waveform],
        _far_field: &[Waveform],
        _activity: Option<&[Vec<bool>]>,
    ) -> Result<BlockOutput> {
        Ok(BlockOutput {
            estimates: close_talk.to_vec(),
            loss_trace: Vec::new(),
            status: None,
        })
    }
}

/// STFT, alternating solver, inverse STFT.
#[derive(Debug, Clone)]
pub struct SolverSeparator {
    pub stft: StftConfig,
    pub solve: SolveConfig,
}

impl Separator for SolverSeparator {
    fn separate(
        &self,
        close_talk: &[Waveform],
        far_field: &[Waveform],
        activity: Option<&[Vec<bool>]>,
    ) -> Result<BlockOutput> {
        let sr = close_talk[0].sample_rate;
        let n = close_talk[0].len();
        let geom = self.stft.geometry(sr)?;
        let mix = MixtureSet::new(
            close_talk.iter().map(|w| stft_with(&w.samples, &geom)).collect(),
            far_field.iter().map(|w| stft_with(&w.samples, &geom)).collect(),
        )?;
        let state = solve(&mix, activity, &self.solve)?;
        Ok(BlockOutput {
            estimates: state.estimates.iter().map(|s| istft(s, n)).collect::<Result<_>>()?,
            loss_trace: state.loss_trace,
            status: Some(state.status),
        })
    }
}

/// Block normalisation gain: the sample standard deviation rounded to the
/// nearest power of two, so dividing and multiplying back is exact. A
/// silent channel gets gain 1.
pub fn block_gain(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 && sd.is_finite() {
        2f64.powi(sd.log2().round() as i32)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: Block,
    pub status: Option<SolveStatus>,
    pub loss_trace: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub estimates: Vec<Waveform>,
    pub blocks: Vec<BlockReport>,
}

fn slice_all(ws: &[Waveform], b: &Block) -> Vec<Waveform> {
    ws.iter().map(|w| w.slice(b.start, b.end)).collect()
}

/// Runs `separator` block by block and stitches the emit regions into
/// session-length outputs. Each channel is divided by its block gain before
/// separation; output `c` is multiplied back by close-talk channel `c`'s
/// gain.
pub fn blockwise_separate(
    session: &Session,
    plan: &BlockPlan,
    separator: &dyn Separator,
) -> Result<SessionOutput> {
    let n = session.len();
    let blocks = plan.blocks(n, session.sample_rate)?;
    let results: Vec<Result<BlockOutput>> = blocks
        .par_iter()
        .map(|b| {
            let normalise = |ws: Vec<Waveform>, role: &str| -> (Vec<Waveform>, Vec<f64>) {
                let mut gains = Vec::with_capacity(ws.len());
                let out = ws
                    .into_iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let g = block_gain(&w.samples);
                        if w.samples.iter().all(|&v| v == 0.0) {
                            log::warn!("silent {role} channel {i} in block at sample {}", b.start);
                        }
                        gains.push(g);
                        w.scaled(1.0 / g)
                    })
                    .collect();
                (out, gains)
            };
            let (close, gains) = normalise(slice_all(&session.close_talk, b), "close-talk");
            let (far, _) = normalise(slice_all(&session.far_field, b), "far-field");
            let act: Option<Vec<Vec<bool>>> = session
                .activity
                .as_ref()
                .map(|a| a.iter().map(|d| d[b.start..b.end].to_vec()).collect());
            let mut out = separator.separate(&close, &far, act.as_deref())?;
            if out.estimates.len() != close.len() {
                return Err(CtrError::dim("separator returned the wrong number of outputs"));
            }
            for (e, g) in out.estimates.iter_mut().zip(&gains) {
                if e.len() != b.end - b.start {
                    return Err(CtrError::dim("separator changed the block length"));
                }
                *e = e.scaled(*g);
            }
            Ok(out)
        })
        .collect();
    let mut estimates: Vec<Vec<f64>> = vec![vec![0.0; n]; session.num_speakers()];
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, r) in blocks.iter().zip(results) {
        let out = r?;
        for (dst, src) in estimates.iter_mut().zip(&out.estimates) {
            dst[b.emit_start..b.emit_end]
                .copy_from_slice(&src.samples[b.emit_start - b.start..b.emit_end - b.start]);
        }
        reports.push(BlockReport {
            block: *b,
            status: out.status,
            loss_trace: out.loss_trace,
        });
    }
    Ok(SessionOutput {
        estimates: estimates
            .into_iter()
            .map(|s| Waveform::new(s, session.sample_rate))
            .collect::<Result<_>>()?,
        blocks: reports,
    })
}

/// A fixed-length training window with its activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSegment {
    pub start: usize,
    pub end: usize,
    /// Per speaker, `[on, off)` relative to `start`.
    pub activity: Vec<Vec<[usize; 2]>>,
    /// Whether each speaker meets the minimum active duration.
    pub speaker_active: Vec<bool>,
}

/// Cuts a session into `seg_len_s` windows advancing by
/// `seg_len_s * (1 - overlap)`. A trailing partial window is dropped; a
/// session shorter than one window yields a single window covering it.
pub fn segment_training_windows(
    n: usize,
    sample_rate: u32,
    activity: Option<&[Vec<bool>]>,
    seg_len_s: f64,
    overlap: f64,
    min_active_s: f64,
) -> Result<Vec<TrainingSegment>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(CtrError::config("segment overlap must lie in [0, 1)"));
    }
    let seg = (seg_len_s * sample_rate as f64).round() as usize;
    let hop = ((seg_len_s * (1.0 - overlap)) * sample_rate as f64).round() as usize;
    if seg == 0 || hop == 0 {
        return Err(CtrError::config("segment length and hop must be positive"));
    }
    let bounds: Vec<(usize, usize)> = if n <= seg {
        vec![(0, n)]
    } else {
        (0..)
            .map(|k| k * hop)
            .take_while(|s| s + seg <= n)
            .map(|s| (s, s + seg))
            .collect()
    };
    Ok(bounds
        .into_iter()
        .map(|(s, e)| {
            let (act, present) = match activity {
                None => (Vec::new(), Vec::new()),
                Some(a) => a
                    .iter()
                    .map(|d| {
                        let slice = &d[s..e];
                        (
                            intervals_from_mask(slice),
                            segment_speaker_active(slice, sample_rate, min_active_s),
                        )
                    })
                    .unzip(),
            };
            TrainingSegment {
                start: s,
                end: e,
                activity: act,
                speaker_active: present,
            }
        })
        .collect())
}

/// Whether a speaker has enough activity to be kept unmuted in a segment.
pub fn segment_speaker_active(d: &[bool], sample_rate: u32, min_active_s: f64) -> bool {
    d.iter().filter(|&&v| v).count() as f64 >= min_active_s * sample_rate as f64
}

/// One path of the ground-truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathRecord {
    pub receiver: usize,
    pub speaker: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subband: Option<SubbandFilterRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fir: Option<Vec<f64>>,
}

/// Ground-truth sidecar written next to a simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSidecar {
    pub mode: SceneMode,
    pub num_speakers: usize,
    pub num_far: usize,
    pub t60: f64,
    pub noise_snr_db: Vec<Option<f64>>,
    pub cross_talk_sir_db: Vec<Option<f64>>,
    pub activity: BTreeMap<String, Vec<[usize; 2]>>,
    pub paths: Vec<PathRecord>,
    pub scene_config: SceneConfig,
}

pub fn speaker_id(c: usize) -> String {
    format!("spk{c}")
}

pub fn mic_id(p: usize) -> String {
    format!("far{p}")
}

/// Writes a simulated scene as WAV files, a session manifest
/// (`manifest.json`) and a ground-truth sidecar (`ground_truth.json`).
pub fn write_scene(
    scene: &Scene,
    cfg: &SceneConfig,
    out_dir: &Path,
    format: WavFormat,
) -> Result<SessionManifest> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut close = Vec::new();
    let mut dry = BTreeMap::new();
    let mut activity = BTreeMap::new();
    for c in 0..scene.num_speakers {
        let id = speaker_id(c);
        let name = PathBuf::from(format!("close_talk_{id}.wav"));
        write_wav(&out_dir.join(&name), &scene.mixtures[c], format)?;
        let dname = PathBuf::from(format!("dry_{id}.wav"));
        write_wav(&out_dir.join(&dname), &scene.dry_sources[c], format)?;
        close.push(CloseTalkEntry {
            speaker_id: id.clone(),
            wav_path: name,
        });
        dry.insert(id.clone(), dname);
        activity.insert(id, intervals_from_mask(&scene.activity[c]));
    }
    let mut far = Vec::new();
    for p in 0..scene.num_far {
        let id = mic_id(p);
        let name = PathBuf::from(format!("far_field_{id}.wav"));
        write_wav(&out_dir.join(&name), &scene.mixtures[scene.num_speakers + p], format)?;
        far.push(FarFieldEntry {
            mic_id: id,
            wav_path: name,
        });
    }
    let mut paths = Vec::new();
    for (r, row) in scene.paths.iter().enumerate() {
        for (c, path) in row.iter().enumerate() {
            let (subband, fir) = match path {
                ScenePath::Identity => continue,
                ScenePath::Subband(f) => (Some(SubbandFilterRecord::from(f)), None),
                ScenePath::Fir(h) => (None, Some(h.clone())),
            };
            paths.push(PathRecord {
                receiver: r,
                speaker: c,
                subband,
                fir,
            });
        }
    }
    let sidecar = GroundTruthSidecar {
        mode: scene.mode,
        num_speakers: scene.num_speakers,
        num_far: scene.num_far,
        t60: scene.t60,
        noise_snr_db: scene.noise_snr_db.clone(),
        cross_talk_sir_db: scene.cross_talk_sir_db.clone(),
        activity: activity.clone(),
        paths,
        scene_config: cfg.clone(),
    };
    let gt_name = PathBuf::from("ground_truth.json");
    write_json(&out_dir.join(&gt_name), &sidecar)?;
    let manifest = SessionManifest {
        sample_rate: scene.sample_rate,
        close_talk: close,
        far_field: far,
        activity,
        ground_truth: Some(GroundTruthEntry {
            dry_sources: dry,
            filters_path: Some(gt_name),
        }),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateEntry {
    pub speaker_id: String,
    pub wav_path: PathBuf,
}

/// Output listing written by separation and read by evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesManifest {
    pub sample_rate: u32,
    pub estimates: Vec<EstimateEntry>,
}

impl EstimatesManifest {
    pub fn load_waveforms(&self, base: &Path) -> Result<Vec<(String, Waveform)>> {
        self.estimates
            .iter()
            .map(|e| {
                let p = resolve(base, &e.wav_path);
                let w = read_wav(&p)?;
                check_audio(&w, self.sample_rate, None, &p)?;
                Ok((e.speaker_id.clone(), w))
            })
            .collect()
    }
}
