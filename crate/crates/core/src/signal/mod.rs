//! Waveforms, spectrograms and the sqrt-Hann STFT used by every other module.
//!
//! Framing convention: the signal is zero-padded on the left by `win - hop`
//! samples and on the right by at least as much, then frame `t` covers padded
//! samples `[t * hop, t * hop + win)`. Every original sample is therefore
//! covered by the full set of `win / hop` overlapping windows and the
//! analysis/synthesis pair reconstructs exactly.

mod wav;

pub use wav::{read_wav, write_wav, WavFormat};

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};

/// Real time-domain signal at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CtrError::data("waveform must contain at least one sample"));
        }
        if sample_rate == 0 {
            return Err(CtrError::config("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(CtrError::data(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Population standard deviation of the samples.
    pub fn std_dev(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Square root of the periodic Hann window, used for both analysis and
    /// synthesis.
    #[default]
    SqrtHann,
}

/// STFT settings expressed in milliseconds; resolved against a sample rate
/// by [`StftConfig::geometry`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_ms: 16.0,
            hop_ms: 8.0,
            window: WindowKind::SqrtHann,
        }
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32, what: &str) -> Result<usize> {
    let exact = ms * sample_rate as f64 / 1000.0;
    let rounded = exact.round();
    if !(exact.is_finite() && rounded >= 1.0 && (exact - rounded).abs() < 1e-9) {
        return Err(CtrError::config(format!(
            "{what} of {ms} ms is not an integer number of samples at {sample_rate} Hz"
        )));
    }
    Ok(rounded as usize)
}

impl StftConfig {
    pub fn geometry(&self, sample_rate: u32) -> Result<StftGeometry> {
        let win = ms_to_samples(self.win_ms, sample_rate, "window")?;
        let hop = ms_to_samples(self.hop_ms, sample_rate, "hop")?;
        StftGeometry::new(win, hop, sample_rate)
    }
}

/// STFT framing in samples. The FFT size equals the window length.
#[derive(Debug, Clone, PartialEq)]
pub struct StftGeometry {
    pub win: usize,
    pub hop: usize,
    pub sample_rate: u32,
    window: Vec<f64>,
    /// Overlap-add normalisation: sum over frames of the squared window,
    /// constant across samples for the supported hop/window ratios.
    ola_gain: f64,
}

impl StftGeometry {
    pub fn new(win: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if win < 2 || win % 2 != 0 {
            return Err(CtrError::config(format!(
                "window length must be even and at least 2 samples, got {win}"
            )));
        }
        if hop == 0 || win % hop != 0 || win / hop < 2 {
            return Err(CtrError::config(format!(
                "hop ({hop}) must divide the window ({win}) with at least 2 frames of overlap"
            )));
        }
        let window: Vec<f64> = (0..win)
            .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).sqrt())
            .collect();
        let ola_gain = (0..win / hop).map(|k| window[k * hop].powi(2)).sum::<f64>();
        Ok(StftGeometry {
            win,
            hop,
            sample_rate,
            window,
            ola_gain,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.win
    }

    pub fn num_freqs(&self) -> usize {
        self.win / 2 + 1
    }

    /// Zero padding in front of the signal (`win - hop`).
    pub fn pad(&self) -> usize {
        self.win - self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn ola_gain(&self) -> f64 {
        self.ola_gain
    }

    pub fn num_frames(&self, len: usize) -> usize {
        (self.pad() + len - 1) / self.hop + 1
    }

    /// Original-signal sample span `[start, end)` of frame `t`, in signed
    /// coordinates (may extend below zero or past the end).
    pub fn frame_span(&self, t: usize) -> (i64, i64) {
        let start = (t * self.hop) as i64 - self.pad() as i64;
        (start, start + self.win as i64)
    }
}

/// Complex STFT, indexed `[frame, frequency]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<Complex64>,
    pub geometry: StftGeometry,
    pub original_length: usize,
}

impl Spectrogram {
    pub fn zeros(geometry: &StftGeometry, original_length: usize) -> Self {
        let t = geometry.num_frames(original_length);
        Spectrogram {
            values: Array2::zeros((t, geometry.num_freqs())),
            geometry: geometry.clone(),
            original_length,
        }
    }

    pub fn from_values(
        values: Array2<Complex64>,
        geometry: &StftGeometry,
        original_length: usize,
    ) -> Result<Self> {
        let expected = (geometry.num_frames(original_length), geometry.num_freqs());
        if values.dim() != expected {
            return Err(CtrError::dim(format!(
                "spectrogram shape {:?} does not match geometry {:?}",
                values.dim(),
                expected
            )));
        }
        Ok(Spectrogram {
            values,
            geometry: geometry.clone(),
            original_length,
        })
    }

    /// Same geometry and length, new values.
    pub fn with_values(&self, values: Array2<Complex64>) -> Spectrogram {
        debug_assert_eq!(values.dim(), self.values.dim());
        Spectrogram {
            values,
            geometry: self.geometry.clone(),
            original_length: self.original_length,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_freqs(&self) -> usize {
        self.values.ncols()
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.values.dim() == other.values.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_power(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max)
    }

    /// Energy of the two-sided spectrum, counting interior bins twice.
    /// For `S = stft(x)` this equals `fft_size * ola_gain * ||x||^2`.
    pub fn energy(&self) -> f64 {
        let nf = self.num_freqs();
        let mut total = 0.0;
        for row in self.values.rows() {
            for (f, z) in row.iter().enumerate() {
                let w = if f == 0 || f == nf - 1 { 1.0 } else { 2.0 };
                total += w * z.norm_sqr();
            }
        }
        total
    }

    pub fn add(&self, other: &Spectrogram) -> Result<Spectrogram> {
        if !self.same_shape(other) {
            return Err(CtrError::dim("cannot add spectrograms of different shapes"));
        }
        Ok(self.with_values(&self.values + &other.values))
    }

    pub fn scaled(&self, gain: f64) -> Spectrogram {
        self.with_values(self.values.mapv(|z| z * gain))
    }

    pub fn relative_error(&self, reference: &Spectrogram) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        Zip::from(&self.values)
            .and(&reference.values)
            .for_each(|a, b| {
                num += (a - b).norm_sqr();
                den += b.norm_sqr();
            });
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

fn padded_frames(x: &[f64], geom: &StftGeometry) -> (usize, Vec<f64>) {
    let frames = geom.num_frames(x.len());
    let padded_len = (frames - 1) * geom.hop + geom.win;
    let mut padded = vec![0.0; padded_len];
    padded[geom.pad()..geom.pad() + x.len()].copy_from_slice(x);
    (frames, padded)
}

fn analyse(x: &[f64], geom: &StftGeometry, scale: impl Fn(usize) -> f64) -> Array2<Complex64> {
    let (frames, padded) = padded_frames(x, geom);
    let n = geom.fft_size();
    let nf = geom.num_freqs();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = Array2::zeros((frames, nf));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let seg = &padded[t * geom.hop..t * geom.hop + n];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(geom.window()) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for f in 0..nf {
            out[[t, f]] = buf[f] * scale(f);
        }
    }
    out
}

/// Short-time Fourier transform with the sqrt-Hann window.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let geom = cfg.geometry(w.sample_rate)?;
    Ok(stft_with(&w.samples, &geom))
}

/// STFT of raw samples with an already resolved geometry.
pub fn stft_with(x: &[f64], geom: &StftGeometry) -> Spectrogram {
    assert!(!x.is_empty(), "stft of an empty signal");
    Spectrogram {
        values: analyse(x, geom, |_| 1.0),
        geometry: geom.clone(),
        original_length: x.len(),
    }
}

/// Inverse STFT by weighted overlap-add, trimmed to `length` samples.
///
/// The imaginary parts of the DC and Nyquist bins do not contribute to a
/// real signal and are ignored.
pub fn istft(s: &Spectrogram, length: usize) -> Result<Waveform> {
    let geom = &s.geometry;
    let frames = s.num_frames();
    if length == 0 || geom.num_frames(length) != frames {
        return Err(CtrError::dim(format!(
            "length {length} is inconsistent with {frames} frames (hop {})",
            geom.hop
        )));
    }
    let n = geom.fft_size();
    let nf = geom.num_freqs();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let padded_len = (frames - 1) * geom.hop + n;
    let mut acc = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let norm = 1.0 / (n as f64 * geom.ola_gain());
    for t in 0..frames {
        buf[0] = Complex64::new(s.values[[t, 0]].re, 0.0);
        buf[nf - 1] = Complex64::new(s.values[[t, nf - 1]].re, 0.0);
        for f in 1..nf - 1 {
            let z = s.values[[t, f]];
            buf[f] = z;
            buf[n - f] = z.conj();
        }
        ifft.process(&mut buf);
        let seg = &mut acc[t * geom.hop..t * geom.hop + n];
        for ((a, b), w) in seg.iter_mut().zip(&buf).zip(geom.window()) {
            *a += b.re * w * norm;
        }
    }
    let pad = geom.pad();
    Ok(Waveform {
        samples: acc[pad..pad + length].to_vec(),
        sample_rate: geom.sample_rate,
    })
}

/// Adjoint of [`istft`] with respect to the real inner product
/// `<A, B> = sum Re(conj(A) * B)`: given the gradient of a loss with respect
/// to the synthesised waveform, returns the gradient with respect to the
/// spectrogram entries (real part + i * imaginary part).
pub fn istft_adjoint(grad: &[f64], geom: &StftGeometry) -> Array2<Complex64> {
    let n = geom.fft_size();
    let nf = geom.num_freqs();
    let base = 1.0 / (n as f64 * geom.ola_gain());
    let mut out = analyse(grad, geom, |f| {
        if f == 0 || f == nf - 1 {
            base
        } else {
            2.0 * base
        }
    });
    for mut row in out.rows_mut() {
        row[0].im = 0.0;
        row[nf - 1].im = 0.0;
    }
    out
}

/// Full linear convolution `x * h` (length `x.len() + h.len() - 1`) via FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if h.len() <= 32 || x.len() <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    a[..out_len].iter().map(|z| z.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geom8k() -> StftGeometry {
        StftConfig::default().geometry(8000).unwrap()
    }

    #[test]
    fn geometry_matches_window_settings() {
        let g = geom8k();
        assert_eq!((g.win, g.hop, g.num_freqs()), (128, 64, 65));
        let g16 = StftConfig::default().geometry(16000).unwrap();
        assert_eq!((g16.win, g16.hop, g16.num_freqs()), (256, 128, 129));
        assert!((g.ola_gain() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_integer_sample_counts_rejected() {
        let cfg = StftConfig {
            win_ms: 16.05,
            hop_ms: 8.0,
            window: WindowKind::SqrtHann,
        };
        assert!(matches!(cfg.geometry(8000), Err(CtrError::Config(_))));
        let cfg = StftConfig {
            win_ms: 16.0,
            hop_ms: 6.0,
            window: WindowKind::SqrtHann,
        };
        assert!(cfg.geometry(8000).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let g = geom8k();
        for len in [1, 63, 64, 65, 1000] {
            let s = stft_with(&vec![0.0; len], &g);
            assert!(s.values.iter().all(|z| z.norm() == 0.0));
            let w = istft(&Spectrogram::zeros(&g, len), len).unwrap();
            assert!(w.samples.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn round_trip_short_and_odd_lengths() {
        let g = geom8k();
        for len in [1, 2, 63, 64, 65, 127, 128, 129, 1001] {
            let x = random_signal(len, len as u64);
            let y = istft(&stft_with(&x, &g), len).unwrap();
            let err: f64 = x.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = x.iter().map(|a| a * a).sum();
            assert!((err / norm).sqrt() < 1e-12, "len {len}");
        }
    }

    #[test]
    fn quarter_hop_round_trip() {
        let g = StftGeometry::new(128, 32, 8000).unwrap();
        assert!((g.ola_gain() - 2.0).abs() < 1e-12);
        let x = random_signal(777, 3);
        let y = istft(&stft_with(&x, &g), x.len()).unwrap();
        let err = x
            .iter()
            .zip(&y.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn sinusoid_peak_matches_direct_dft() {
        let g = geom8k();
        let bin = 10usize;
        let x: Vec<f64> = (0..2048)
            .map(|n| (2.0 * PI * bin as f64 * n as f64 / g.win as f64).cos())
            .collect();
        let s = stft_with(&x, &g);
        // A frame fully inside the signal.
        let t = 10;
        let row = s.values.row(t);
        let peak = (0..g.num_freqs())
            .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
            .unwrap();
        assert_eq!(peak, bin);
        // Direct DFT oracle of the same windowed frame.
        let start = t * g.hop - g.pad();
        for k in [0, bin, bin + 1, 30] {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..g.win {
                let v = x[start + m] * g.window()[m];
                acc += Complex64::from_polar(v, -2.0 * PI * (k * m) as f64 / g.win as f64);
            }
            assert!((acc - row[k]).norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn istft_rejects_inconsistent_length() {
        let g = geom8k();
        let s = stft_with(&random_signal(500, 1), &g);
        assert!(istft(&s, 5000).is_err());
        assert!(istft(&s, 0).is_err());
        // Any length mapping to the same frame count is accepted.
        assert!(istft(&s, 480).is_ok());
    }

    #[test]
    fn istft_is_linear() {
        let g = geom8k();
        let a = stft_with(&random_signal(900, 1), &g);
        let b = stft_with(&random_signal(900, 2), &g);
        let sum = istft(&a.add(&b).unwrap(), 900).unwrap();
        let ia = istft(&a, 900).unwrap();
        let ib = istft(&b, 900).unwrap();
        for i in 0..900 {
            assert!((sum.samples[i] - ia.samples[i] - ib.samples[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_is_proportional_to_signal_energy() {
        let g = geom8k();
        let x = random_signal(3000, 9);
        let s = stft_with(&x, &g);
        let e: f64 = x.iter().map(|v| v * v).sum();
        let expected = g.fft_size() as f64 * g.ola_gain() * e;
        assert!((s.energy() - expected).abs() / expected < 1e-10);
    }

    #[test]
    fn istft_adjoint_matches_inner_products() {
        let g = geom8k();
        let n = 700;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = g.num_frames(n);
        let spec = Array2::from_shape_fn((frames, g.num_freqs()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let s = Spectrogram::from_values(spec, &g, n).unwrap();
        let grad = random_signal(n, 5);
        let lhs: f64 = istft(&s, n)
            .unwrap()
            .samples
            .iter()
            .zip(&grad)
            .map(|(a, b)| a * b)
            .sum();
        let adj = istft_adjoint(&grad, &g);
        let rhs: f64 = s
            .values
            .iter()
            .zip(adj.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let x = random_signal(300, 1);
        let h = random_signal(70, 2);
        let fast = fft_convolve(&x, &h);
        assert_eq!(fast.len(), 369);
        for (i, v) in fast.iter().enumerate() {
            let mut direct = 0.0;
            for (j, hv) in h.iter().enumerate() {
                if i >= j && i - j < x.len() {
                    direct += x[i - j] * hv;
                }
            }
            assert!((v - direct).abs() < 1e-10);
        }
    }
}
