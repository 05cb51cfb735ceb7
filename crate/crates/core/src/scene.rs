//! Synthetic multi-speaker scenes with one close-talk microphone per speaker
//! and an optional far-field array.
//!
//! Two rendering modes exist. In the sub-band mode every image is an exact
//! per-frequency convolution of the dry source's STFT, so the narrow-band
//! model holds with no approximation error; the mixture spectrograms are the
//! authoritative signals and the waveforms are their inverse STFTs. In the
//! time-domain mode images come from FIR room responses and the narrow-band
//! model holds only approximately.

use std::path::PathBuf;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::loss::MixtureSet;
use crate::signal::{
    fft_convolve, istft, read_wav, stft_with, Spectrogram, StftConfig, StftGeometry, Waveform,
};
use crate::subband::SubbandFilter;

const SPEED_OF_SOUND: f64 = 343.0;
/// Reflection times are drawn up to this horizon regardless of T60, so the
/// random stream does not depend on the sampled reverberation time.
const REFLECTION_HORIZON_S: f64 = 2.0;
const REFLECTION_MEAN_GAP_S: f64 = 0.002;
const REFLECTION_LEVEL: f64 = 0.4;
const SINC_HALF_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SceneMode {
    #[default]
    SubbandExact,
    TimeDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapStyle {
    /// Every speaker talks for the whole scene.
    #[default]
    Full,
    /// Turn-taking conversation with a target overlap ratio.
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// White noise switched on and off in random bursts.
    NoiseBursts,
    /// Resonant AR(2)-filtered noise with a syllable-rate envelope.
    #[default]
    SpeechLike,
    /// Mono WAV files, one per speaker, truncated or zero-padded.
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_speakers: usize,
    pub num_far: usize,
    pub mode: SceneMode,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub t60_range: [f64; 2],
    /// Mouth to own close-talk microphone.
    pub close_talk_dist_range: [f64; 2],
    /// Speaker to another speaker's close-talk microphone.
    pub cross_talk_dist_range: [f64; 2],
    /// Speaker to far-field microphone.
    pub far_dist_range: [f64; 2],
    /// `None` renders noiseless mixtures.
    pub noise_snr_range: Option<[f64; 2]>,
    /// Cross-talk images at each close-talk microphone are rescaled so that
    /// the wearer-to-cross-talk energy ratio falls in this range (dB).
    pub cross_talk_sir_range: Option<[f64; 2]>,
    pub overlap_style: OverlapStyle,
    pub overlap_ratio: f64,
    pub sources: SourceKind,
    /// Past taps (including the current frame) of sub-band filters.
    pub past_taps: usize,
    pub future_taps: usize,
    pub stft: StftConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_speakers: 2,
            num_far: 2,
            mode: SceneMode::SubbandExact,
            duration_s: 4.0,
            sample_rate: 8000,
            t60_range: [0.2, 0.5],
            close_talk_dist_range: [0.1, 0.3],
            cross_talk_dist_range: [1.0, 2.0],
            far_dist_range: [1.0, 2.0],
            noise_snr_range: Some([20.0, 30.0]),
            cross_talk_sir_range: Some([14.2, 15.2]),
            overlap_style: OverlapStyle::Full,
            overlap_ratio: 0.25,
            sources: SourceKind::SpeechLike,
            past_taps: 4,
            future_taps: 0,
            stft: StftConfig::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], allow_zero: bool) -> Result<()> {
    let lo_ok = if allow_zero { r[0] >= 0.0 } else { r[0] > 0.0 };
    if !(lo_ok && r[0] <= r[1] && r[1].is_finite()) {
        return Err(CtrError::config(format!(
            "{name} must be a non-empty positive range, got {r:?}"
        )));
    }
    Ok(())
}

impl SceneConfig {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 1 {
            return Err(CtrError::config("a scene needs at least one speaker"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || self.num_samples() == 0 {
            return Err(CtrError::config("scene duration must be positive"));
        }
        check_range("t60_range", self.t60_range, false)?;
        if self.t60_range[1] > REFLECTION_HORIZON_S {
            return Err(CtrError::config(format!(
                "t60 above {REFLECTION_HORIZON_S} s is not supported"
            )));
        }
        check_range("close_talk_dist_range", self.close_talk_dist_range, false)?;
        check_range("cross_talk_dist_range", self.cross_talk_dist_range, false)?;
        check_range("far_dist_range", self.far_dist_range, false)?;
        if let Some(r) = self.noise_snr_range {
            if !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(CtrError::config(format!("invalid noise_snr_range {r:?}")));
            }
        }
        if let Some(r) = self.cross_talk_sir_range {
            if !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(CtrError::config(format!("invalid cross_talk_sir_range {r:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(CtrError::config("overlap_ratio must lie in [0, 1]"));
        }
        if self.past_taps < 1 {
            return Err(CtrError::config("past_taps must be at least 1"));
        }
        if let SourceKind::Files(f) = &self.sources {
            if f.len() != self.num_speakers {
                return Err(CtrError::config(format!(
                    "{} source files for {} speakers",
                    f.len(),
                    self.num_speakers
                )));
            }
        }
        Ok(())
    }
}

/// Path from a speaker to a microphone.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenePath {
    /// The wearer at their own close-talk microphone: passes unfiltered.
    Identity,
    Subband(SubbandFilter),
    Fir(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub num_speakers: usize,
    pub num_far: usize,
    pub sample_rate: u32,
    pub mode: SceneMode,
    /// Close-talk speech of every speaker, zero outside its activity.
    pub dry_sources: Vec<Waveform>,
    /// Indexed `[receiver][speaker]`; receivers are the close-talk
    /// microphones followed by the far-field ones.
    pub paths: Vec<Vec<ScenePath>>,
    pub images: Vec<Vec<Waveform>>,
    /// Sub-band mode only: exact image spectrograms, `[receiver][speaker]`.
    pub image_specs: Option<Vec<Vec<Spectrogram>>>,
    pub noise: Vec<Waveform>,
    pub mixtures: Vec<Waveform>,
    /// Sub-band mode only: the exact mixture spectrograms.
    pub mixture_specs: Option<Vec<Spectrogram>>,
    /// Per receiver; `None` when noiseless.
    pub noise_snr_db: Vec<Option<f64>>,
    /// Per close-talk microphone, after calibration.
    pub cross_talk_sir_db: Vec<Option<f64>>,
    pub activity: Vec<Vec<bool>>,
    pub t60: f64,
    pub stft: StftConfig,
}

impl Scene {
    pub fn num_receivers(&self) -> usize {
        self.num_speakers + self.num_far
    }

    pub fn num_samples(&self) -> usize {
        self.dry_sources[0].len()
    }

    pub fn close_talk(&self) -> &[Waveform] {
        &self.mixtures[..self.num_speakers]
    }

    pub fn far_field(&self) -> &[Waveform] {
        &self.mixtures[self.num_speakers..]
    }

    /// Mixture spectrograms: the exact ones in sub-band mode, the STFT of the
    /// rendered waveforms otherwise.
    pub fn mixture_set(&self) -> Result<MixtureSet> {
        let specs = match &self.mixture_specs {
            Some(s) => s.clone(),
            None => {
                let geom = self.stft.geometry(self.sample_rate)?;
                self.mixtures.iter().map(|w| stft_with(&w.samples, &geom)).collect()
            }
        };
        let far = specs[self.num_speakers..].to_vec();
        let mut close = specs;
        close.truncate(self.num_speakers);
        MixtureSet::new(close, far)
    }

    pub fn dry_specs(&self) -> Result<Vec<Spectrogram>> {
        let geom = self.stft.geometry(self.sample_rate)?;
        Ok(self.dry_sources.iter().map(|w| stft_with(&w.samples, &geom)).collect())
    }

    pub fn subband_filter(&self, receiver: usize, speaker: usize) -> Option<&SubbandFilter> {
        match &self.paths[receiver][speaker] {
            ScenePath::Subband(f) => Some(f),
            _ => None,
        }
    }
}

/// Turns a sample-level activity vector into sorted `[on, off)` intervals.
pub fn intervals_from_mask(d: &[bool]) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &a) in d.iter().enumerate() {
        match (a, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push([s, i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push([s, d.len()]);
    }
    out
}

/// Builds a sample-level activity vector from sorted, disjoint intervals.
pub fn mask_from_intervals(intervals: &[[usize; 2]], len: usize) -> Result<Vec<bool>> {
    let mut d = vec![false; len];
    let mut prev_end = 0;
    for (i, &[on, off]) in intervals.iter().enumerate() {
        if on >= off || off > len || (i > 0 && on < prev_end) {
            return Err(CtrError::data(format!(
                "activity interval [{on}, {off}) is empty, unsorted, overlapping or out of bounds (length {len})"
            )));
        }
        d[on..off].iter_mut().for_each(|v| *v = true);
        prev_end = off;
    }
    Ok(d)
}

/// Fraction of voiced samples during which at least two speakers talk.
pub fn overlap_ratio(activity: &[Vec<bool>]) -> f64 {
    let n = activity.first().map_or(0, |d| d.len());
    let mut any = 0usize;
    let mut multi = 0usize;
    for i in 0..n {
        let k = activity.iter().filter(|d| d[i]).count();
        any += (k >= 1) as usize;
        multi += (k >= 2) as usize;
    }
    if any == 0 {
        0.0
    } else {
        multi as f64 / any as f64
    }
}

/// Turn-taking activity for `num_speakers` over `n` samples.
///
/// Turns of 0.5 to 1.5 s are assigned round-robin. Transitions either leave a
/// short pause or overlap; the overlap budget is spread evenly over the
/// overlapping transitions so that overlapped time divided by voiced time
/// matches `ratio`. A ratio of 1 makes everyone active everywhere.
pub fn conversation_activity(
    num_speakers: usize,
    n: usize,
    sample_rate: u32,
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<bool>> {
    if ratio >= 1.0 {
        return vec![vec![true; n]; num_speakers];
    }
    let duration = n as f64 / sample_rate as f64;
    let turns = (num_speakers + 1).max((duration / 1.5).round() as usize);
    let len: Vec<f64> = (0..turns).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut is_gap: Vec<bool> = (0..turns - 1).map(|_| rng.random_bool(0.2)).collect();
    let gap_len: Vec<f64> = (0..turns - 1).map(|_| rng.random_range(0.1..0.4)).collect();

    let total_overlap = ratio * len.iter().sum::<f64>() / (1.0 + ratio);
    let cap_all: Vec<f64> = (0..turns - 1)
        .map(|i| 0.45 * len[i].min(len[i + 1]))
        .collect();
    // Turn pauses back into overlaps, largest capacity first, until the
    // budget fits.
    let mut order: Vec<usize> = (0..turns - 1).collect();
    order.sort_by(|&a, &b| cap_all[b].total_cmp(&cap_all[a]));
    for &i in &order {
        let cap: f64 = (0..turns - 1).filter(|&j| !is_gap[j]).map(|j| cap_all[j]).sum();
        if cap >= total_overlap {
            break;
        }
        is_gap[i] = false;
    }
    let cap: Vec<f64> = (0..turns - 1)
        .map(|i| if is_gap[i] { 0.0 } else { cap_all[i] })
        .collect();
    let mut ov = vec![0.0; turns - 1];
    let mut remaining = total_overlap;
    let mut open: Vec<bool> = cap.iter().map(|&c| c > 0.0).collect();
    while remaining > 1e-12 && open.iter().any(|&o| o) {
        let share = remaining / open.iter().filter(|&&o| o).count() as f64;
        for i in 0..turns - 1 {
            if open[i] {
                let add = (cap[i] - ov[i]).min(share);
                ov[i] += add;
                remaining -= add;
                if ov[i] >= cap[i] - 1e-12 {
                    open[i] = false;
                }
            }
        }
    }
    let mut starts = vec![0.0; turns];
    for i in 1..turns {
        let gap = if is_gap[i - 1] { gap_len[i - 1] } else { 0.0 };
        starts[i] = starts[i - 1] + len[i - 1] - ov[i - 1] + gap;
    }
    let scale = n as f64 / (starts[turns - 1] + len[turns - 1]);
    let mut d = vec![vec![false; n]; num_speakers];
    for i in 0..turns {
        let a = ((starts[i] * scale).round() as usize).min(n);
        let b = (((starts[i] + len[i]) * scale).round() as usize).min(n);
        d[i % num_speakers][a..b].iter_mut().for_each(|v| *v = true);
    }
    d
}

/// Activity vectors for a scene configuration.
pub fn gen_conversation_activity(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    let n = cfg.num_samples();
    match cfg.overlap_style {
        OverlapStyle::Full => vec![vec![true; n]; cfg.num_speakers],
        OverlapStyle::Sparse => {
            conversation_activity(cfg.num_speakers, n, cfg.sample_rate, cfg.overlap_ratio, rng)
        }
    }
}

fn normalise(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        x.iter_mut().for_each(|v| *v /= sd);
    }
    x
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Speech-shaped noise: a resonant AR(2) filter with a random formant
/// frequency, modulated by a smoothed random syllable envelope. Unit
/// standard deviation.
pub fn speech_like_source(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let r: f64 = 0.9;
    let theta = rng.random_range(0.05..0.3) * std::f64::consts::PI;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let mut x = vec![0.0; n];
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        let y = e + a1 * y1 + a2 * y2;
        *v = y;
        y2 = y1;
        y1 = y;
    }
    let mut env = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let seg = ((rng.random_range(0.08..0.3) * sr) as usize).max(1);
        let gain = if rng.random_bool(0.75) {
            rng.random_range(0.0..1.0f64).powi(2)
        } else {
            0.0
        };
        let end = (pos + seg).min(n);
        env[pos..end].iter_mut().for_each(|v| *v = gain);
        pos = end;
    }
    let env = moving_average(&env, ((0.02 * sr) as usize).max(1));
    normalise(x.iter().zip(&env).map(|(a, b)| a * b).collect())
}

/// White noise gated by random on/off bursts. Unit standard deviation.
pub fn noise_burst_source(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut x = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let seg = ((rng.random_range(0.1..0.5) * sr) as usize).max(1);
        let on = rng.random_bool(0.7);
        let end = (pos + seg).min(n);
        for v in &mut x[pos..end] {
            let e: f64 = rng.sample(StandardNormal);
            *v = if on { e } else { 0.0 };
        }
        pos = end;
    }
    normalise(x)
}

fn draw_sources(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let n = cfg.num_samples();
    (0..cfg.num_speakers)
        .map(|c| match &cfg.sources {
            SourceKind::SpeechLike => Ok(speech_like_source(n, cfg.sample_rate, rng)),
            SourceKind::NoiseBursts => Ok(noise_burst_source(n, cfg.sample_rate, rng)),
            SourceKind::Files(paths) => {
                let w = read_wav(&paths[c])?;
                if w.sample_rate != cfg.sample_rate {
                    return Err(CtrError::data(format!(
                        "{}: sample rate {} differs from the scene's {}",
                        paths[c].display(),
                        w.sample_rate,
                        cfg.sample_rate
                    )));
                }
                let mut s = w.samples;
                s.resize(n, 0.0);
                Ok(s)
            }
        })
        .collect()
}

/// Random sub-band filter with a dominant tap at the current frame and an
/// exponentially decaying tail over the other taps. `decay` is the
/// per-frame magnitude decay. Each tap is a signed, scaled delay of up to
/// an eighth of a hop (linear phase across frequency), so filtered images stay
/// close to STFT-consistent.
pub fn random_subband_filter(
    past_taps: usize,
    future_taps: usize,
    geom: &StftGeometry,
    gain: f64,
    decay: f64,
    rng: &mut impl Rng,
) -> SubbandFilter {
    let k_len = past_taps + future_taps;
    let current = past_taps - 1;
    let num_freqs = geom.num_freqs();
    let fft = geom.fft_size() as f64;
    let mut taps = Array2::zeros((num_freqs, k_len));
    for k in 0..k_len {
        let lag = k.abs_diff(current) as i32;
        let delay = rng.random_range(0.0..geom.hop as f64 / 8.0);
        let mag = if lag == 0 {
            gain
        } else {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * gain / 3.0 * decay.powi(lag) * rng.random_range(0.3..1.0)
        };
        for f in 0..num_freqs {
            let phase = -std::f64::consts::TAU * f as f64 * delay / fft;
            taps[[f, k]] = Complex64::from_polar(mag, phase);
        }
    }
    SubbandFilter {
        past_taps,
        future_taps,
        taps,
    }
}

/// Reflection arrival times (seconds after the direct path) and signed
/// relative amplitudes, drawn up to a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionDraw {
    pub times_s: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl ReflectionDraw {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut times_s = Vec::new();
        let mut amplitudes = Vec::new();
        let mut t = 0.0;
        loop {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            t += -REFLECTION_MEAN_GAP_S * u.ln();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = sign * rng.random_range(0.2..1.0);
            if t >= REFLECTION_HORIZON_S {
                break;
            }
            times_s.push(t);
            amplitudes.push(a);
        }
        ReflectionDraw {
            times_s,
            amplitudes,
        }
    }

    pub fn none() -> Self {
        ReflectionDraw {
            times_s: Vec::new(),
            amplitudes: Vec::new(),
        }
    }
}

fn add_fractional_impulse(h: &mut Vec<f64>, at: f64, amp: f64) {
    let base = at.floor();
    let frac = at - base;
    let base = base as usize;
    if frac == 0.0 {
        if h.len() <= base {
            h.resize(base + 1, 0.0);
        }
        h[base] += amp;
        return;
    }
    // Hann-windowed sinc centred on `at`.
    let lo = base.saturating_sub(SINC_HALF_LEN - 1);
    let hi = base + SINC_HALF_LEN;
    if h.len() <= hi {
        h.resize(hi + 1, 0.0);
    }
    for (i, v) in h.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let x = i as f64 - at;
        let sinc = (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x);
        let w = 0.5 + 0.5 * (std::f64::consts::PI * x / (SINC_HALF_LEN as f64 + 1.0)).cos();
        *v += amp * sinc * w;
    }
}

/// FIR room response: a fractionally delayed direct path of the given gain
/// plus the drawn reflections within `t60` seconds under an envelope that
/// decays by 60 dB over `t60`.
pub fn room_fir(
    gain: f64,
    delay_samples: f64,
    t60: f64,
    reflections: &ReflectionDraw,
    sample_rate: u32,
) -> Vec<f64> {
    let mut h = Vec::new();
    add_fractional_impulse(&mut h, delay_samples.max(0.0), gain);
    if t60 > 0.0 {
        let sr = sample_rate as f64;
        for (&t, &a) in reflections.times_s.iter().zip(&reflections.amplitudes) {
            if t >= t60 {
                break;
            }
            let env = (-6.9 * t / t60).exp();
            add_fractional_impulse(&mut h, delay_samples + t * sr, gain * REFLECTION_LEVEL * a * env);
        }
    }
    h
}

fn sample_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn wave_energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sum_waves(waves: &[Waveform], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for w in waves {
        for (o, v) in out.iter_mut().zip(&w.samples) {
            *o += v;
        }
    }
    out
}

struct Draws {
    activity: Vec<Vec<bool>>,
    sources: Vec<Vec<f64>>,
    t60: f64,
    own_dist: Vec<f64>,
}

fn common_draws(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Draws> {
    let activity = gen_conversation_activity(cfg, rng);
    let mut sources = draw_sources(cfg, rng)?;
    for (s, d) in sources.iter_mut().zip(&activity) {
        for (v, &a) in s.iter_mut().zip(d) {
            if !a {
                *v = 0.0;
            }
        }
    }
    let t60 = sample_range(rng, cfg.t60_range);
    let own_dist = (0..cfg.num_speakers)
        .map(|_| sample_range(rng, cfg.close_talk_dist_range))
        .collect();
    Ok(Draws {
        activity,
        sources,
        t60,
        own_dist,
    })
}

/// Gain that brings the wearer-to-cross-talk energy ratio to `sir_db`.
fn sir_gain(own_energy: f64, cross_energy: f64, sir_db: f64) -> f64 {
    if own_energy <= 0.0 || cross_energy <= 0.0 {
        return 1.0;
    }
    (own_energy / (cross_energy * 10f64.powf(sir_db / 10.0))).sqrt()
}

fn draw_noise(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    image_sum: &[f64],
) -> (Vec<f64>, Option<f64>) {
    let n = image_sum.len();
    let Some(range) = cfg.noise_snr_range else {
        return (vec![0.0; n], None);
    };
    let snr = sample_range(rng, range);
    let mut noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let power = wave_energy(image_sum) / n as f64;
    let scale = (power / 10f64.powf(snr / 10.0)).sqrt();
    noise.iter_mut().for_each(|v| *v *= scale);
    (noise, Some(snr))
}

/// Renders a scene whose images are exact sub-band convolutions of the dry
/// sources' STFTs.
pub fn synth_subband_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    if cfg.mode != SceneMode::SubbandExact {
        return Err(CtrError::config("synth_subband_scene needs mode = subband-exact"));
    }
    let geom = cfg.stft.geometry(cfg.sample_rate)?;
    let n = cfg.num_samples();
    let frames = geom.num_frames(n);
    if frames < cfg.past_taps + cfg.future_taps {
        return Err(CtrError::config(format!(
            "{frames} frames is shorter than the {} filter taps",
            cfg.past_taps + cfg.future_taps
        )));
    }
    let (c_n, p_n) = (cfg.num_speakers, cfg.num_far);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = common_draws(cfg, &mut rng)?;
    let hop_s = geom.hop as f64 / cfg.sample_rate as f64;
    let decay = 10f64.powf(-3.0 * hop_s / draws.t60);
    let dry_specs: Vec<Spectrogram> = draws.sources.iter().map(|s| stft_with(s, &geom)).collect();

    let mut paths = Vec::with_capacity(c_n + p_n);
    for r in 0..c_n + p_n {
        let mut row = Vec::with_capacity(c_n);
        for c in 0..c_n {
            if r == c {
                row.push(ScenePath::Identity);
                continue;
            }
            let dist = if r < c_n {
                sample_range(&mut rng, cfg.cross_talk_dist_range)
            } else {
                sample_range(&mut rng, cfg.far_dist_range)
            };
            let gain = if r < c_n { draws.own_dist[c] / dist } else { 1.0 / dist };
            row.push(ScenePath::Subband(random_subband_filter(
                cfg.past_taps,
                cfg.future_taps,
                &geom,
                gain,
                decay,
                &mut rng,
            )));
        }
        paths.push(row);
    }

    let render = |path: &ScenePath, c: usize| -> Spectrogram {
        match path {
            ScenePath::Subband(f) => dry_specs[c].with_values(f.apply_values(&dry_specs[c].values)),
            _ => dry_specs[c].clone(),
        }
    };
    let mut image_specs: Vec<Vec<Spectrogram>> = paths
        .iter()
        .map(|row| row.iter().enumerate().map(|(c, p)| render(p, c)).collect())
        .collect();

    let mut sir_db = vec![None; c_n];
    if let Some(range) = cfg.cross_talk_sir_range {
        for r in 0..c_n {
            let target = sample_range(&mut rng, range);
            if c_n < 2 {
                continue;
            }
            let own = image_specs[r][r].energy();
            let mut cross = Spectrogram::zeros(&geom, n);
            for c in (0..c_n).filter(|&c| c != r) {
                cross.values += &image_specs[r][c].values;
            }
            let g = sir_gain(own, cross.energy(), target);
            for c in (0..c_n).filter(|&c| c != r) {
                if let ScenePath::Subband(f) = &mut paths[r][c] {
                    f.scale(g);
                }
                image_specs[r][c] = image_specs[r][c].scaled(g);
            }
            sir_db[r] = Some(target);
        }
    }

    let mut images = Vec::with_capacity(c_n + p_n);
    for (r, row) in image_specs.iter().enumerate() {
        let mut wrow = Vec::with_capacity(c_n);
        for (c, s) in row.iter().enumerate() {
            if r == c {
                wrow.push(Waveform::new(draws.sources[c].clone(), cfg.sample_rate)?);
            } else {
                wrow.push(istft(s, n)?);
            }
        }
        images.push(wrow);
    }

    let mut noise = Vec::new();
    let mut snr = Vec::new();
    let mut mixtures = Vec::new();
    let mut mixture_specs = Vec::new();
    for r in 0..c_n + p_n {
        let img_sum = sum_waves(&images[r], n);
        let (nz, s) = draw_noise(&mut rng, cfg, &img_sum);
        let mut spec = Spectrogram::zeros(&geom, n);
        for s in &image_specs[r] {
            spec.values += &s.values;
        }
        if s.is_some() {
            spec.values += &stft_with(&nz, &geom).values;
        }
        let mix: Vec<f64> = img_sum.iter().zip(&nz).map(|(a, b)| a + b).collect();
        mixtures.push(Waveform::new(mix, cfg.sample_rate)?);
        mixture_specs.push(spec);
        noise.push(Waveform::new(nz, cfg.sample_rate)?);
        snr.push(s);
    }

    Ok(Scene {
        num_speakers: c_n,
        num_far: p_n,
        sample_rate: cfg.sample_rate,
        mode: SceneMode::SubbandExact,
        dry_sources: draws
            .sources
            .into_iter()
            .map(|s| Waveform::new(s, cfg.sample_rate))
            .collect::<Result<_>>()?,
        paths,
        images,
        image_specs: Some(image_specs),
        noise,
        mixtures,
        mixture_specs: Some(mixture_specs),
        noise_snr_db: snr,
        cross_talk_sir_db: sir_db,
        activity: draws.activity,
        t60: draws.t60,
        stft: cfg.stft,
    })
}

/// Renders a scene by FIR convolution in the time domain.
pub fn synth_timedomain_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    if cfg.mode != SceneMode::TimeDomain {
        return Err(CtrError::config("synth_timedomain_scene needs mode = time-domain"));
    }
    let geom = cfg.stft.geometry(cfg.sample_rate)?;
    let n = cfg.num_samples();
    if geom.num_frames(n) < cfg.past_taps + cfg.future_taps {
        return Err(CtrError::config(format!(
            "{} frames is shorter than the {} filter taps",
            geom.num_frames(n),
            cfg.past_taps + cfg.future_taps
        )));
    }
    let (c_n, p_n) = (cfg.num_speakers, cfg.num_far);
    let sr = cfg.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = common_draws(cfg, &mut rng)?;

    let mut paths = Vec::with_capacity(c_n + p_n);
    for r in 0..c_n + p_n {
        let mut row = Vec::with_capacity(c_n);
        for c in 0..c_n {
            if r == c {
                row.push(ScenePath::Identity);
                continue;
            }
            let dist = if r < c_n {
                sample_range(&mut rng, cfg.cross_talk_dist_range)
            } else {
                sample_range(&mut rng, cfg.far_dist_range)
            };
            let own = draws.own_dist[c];
            let delay = ((dist - own) / SPEED_OF_SOUND * sr).max(0.0);
            let refl = ReflectionDraw::sample(&mut rng);
            row.push(ScenePath::Fir(room_fir(own / dist, delay, draws.t60, &refl, cfg.sample_rate)));
        }
        paths.push(row);
    }

    let convolve = |path: &ScenePath, c: usize| -> Vec<f64> {
        match path {
            ScenePath::Fir(h) => {
                let mut y = fft_convolve(&draws.sources[c], h);
                y.truncate(n);
                y
            }
            _ => draws.sources[c].clone(),
        }
    };
    let mut images: Vec<Vec<Vec<f64>>> = paths
        .iter()
        .map(|row| row.iter().enumerate().map(|(c, p)| convolve(p, c)).collect())
        .collect();

    let mut sir_db = vec![None; c_n];
    if let Some(range) = cfg.cross_talk_sir_range {
        for r in 0..c_n {
            let target = sample_range(&mut rng, range);
            if c_n < 2 {
                continue;
            }
            let own = wave_energy(&images[r][r]);
            let mut cross = vec![0.0; n];
            for c in (0..c_n).filter(|&c| c != r) {
                for (a, b) in cross.iter_mut().zip(&images[r][c]) {
                    *a += b;
                }
            }
            let g = sir_gain(own, wave_energy(&cross), target);
            for c in (0..c_n).filter(|&c| c != r) {
                if let ScenePath::Fir(h) = &mut paths[r][c] {
                    h.iter_mut().for_each(|v| *v *= g);
                }
                images[r][c].iter_mut().for_each(|v| *v *= g);
            }
            sir_db[r] = Some(target);
        }
    }

    let images: Vec<Vec<Waveform>> = images
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|s| Waveform::new(s, cfg.sample_rate))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut noise = Vec::new();
    let mut snr = Vec::new();
    let mut mixtures = Vec::new();
    for row in &images {
        let img_sum = sum_waves(row, n);
        let (nz, s) = draw_noise(&mut rng, cfg, &img_sum);
        let mix: Vec<f64> = img_sum.iter().zip(&nz).map(|(a, b)| a + b).collect();
        mixtures.push(Waveform::new(mix, cfg.sample_rate)?);
        noise.push(Waveform::new(nz, cfg.sample_rate)?);
        snr.push(s);
    }

    Ok(Scene {
        num_speakers: c_n,
        num_far: p_n,
        sample_rate: cfg.sample_rate,
        mode: SceneMode::TimeDomain,
        dry_sources: draws
            .sources
            .into_iter()
            .map(|s| Waveform::new(s, cfg.sample_rate))
            .collect::<Result<_>>()?,
        paths,
        images,
        image_specs: None,
        noise,
        mixtures,
        mixture_specs: None,
        noise_snr_db: snr,
        cross_talk_sir_db: sir_db,
        activity: draws.activity,
        t60: draws.t60,
        stft: cfg.stft,
    })
}

/// Dispatches on `cfg.mode`.
pub fn synth_scene(cfg: &SceneConfig) -> Result<Scene> {
    match cfg.mode {
        SceneMode::SubbandExact => synth_subband_scene(cfg),
        SceneMode::TimeDomain => synth_timedomain_scene(cfg),
    }
}

/// Energy of an FIR response split into direct part (up to and including
/// the sinc support around the direct path) and reverberant remainder.
pub fn direct_reverb_split(h: &[f64], delay_samples: f64) -> (f64, f64) {
    let edge = (delay_samples.floor() as usize + SINC_HALF_LEN + 1).min(h.len());
    (wave_energy(&h[..edge]), wave_energy(&h[edge..]))
}
