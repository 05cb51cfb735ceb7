//! Per-frequency FIR filtering along the frame axis of a spectrogram.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::signal::Spectrogram;

/// Sub-band filter bank: for every frequency, `past + future` complex taps
/// applied to the frame window `[t - past + 1, ..., t + future]`.
///
/// Filtering computes `out(t, f) = sum_k conj(taps[f, k]) * z(t - past + 1 + k, f)`,
/// with frames outside the spectrogram treated as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandFilter {
    pub past_taps: usize,
    pub future_taps: usize,
    /// Indexed `[frequency, tap]`.
    pub taps: Array2<Complex64>,
}

impl SubbandFilter {
    pub fn new(past_taps: usize, future_taps: usize, taps: Array2<Complex64>) -> Result<Self> {
        if past_taps < 1 {
            return Err(CtrError::config("a sub-band filter needs at least one past tap"));
        }
        if taps.ncols() != past_taps + future_taps {
            return Err(CtrError::dim(format!(
                "{} taps per frequency, expected {}",
                taps.ncols(),
                past_taps + future_taps
            )));
        }
        if taps.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(CtrError::data("sub-band filter taps must be finite"));
        }
        Ok(SubbandFilter {
            past_taps,
            future_taps,
            taps,
        })
    }

    pub fn zeros(past_taps: usize, future_taps: usize, num_freqs: usize) -> Self {
        SubbandFilter {
            past_taps,
            future_taps,
            taps: Array2::zeros((num_freqs, past_taps + future_taps)),
        }
    }

    /// Single unit tap at the current frame.
    pub fn identity(past_taps: usize, future_taps: usize, num_freqs: usize) -> Self {
        let mut f = Self::zeros(past_taps, future_taps, num_freqs);
        f.taps.column_mut(past_taps - 1).fill(Complex64::new(1.0, 0.0));
        f
    }

    pub fn len(&self) -> usize {
        self.past_taps + self.future_taps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_freqs(&self) -> usize {
        self.taps.nrows()
    }

    /// Frame offset of tap `k` relative to the output frame.
    fn offset(&self, k: usize) -> isize {
        k as isize - self.past_taps as isize + 1
    }

    pub fn apply(&self, z: &Spectrogram) -> Result<Spectrogram> {
        if z.num_freqs() != self.num_freqs() {
            return Err(CtrError::dim(format!(
                "filter has {} frequencies, spectrogram {}",
                self.num_freqs(),
                z.num_freqs()
            )));
        }
        Ok(z.with_values(self.apply_values(&z.values)))
    }

    pub fn apply_values(&self, z: &Array2<Complex64>) -> Array2<Complex64> {
        let (frames, freqs) = z.dim();
        let mut out = Array2::zeros((frames, freqs));
        self.accumulate(z, &mut out);
        out
    }

    /// `out += filter(z)`.
    pub fn accumulate(&self, z: &Array2<Complex64>, out: &mut Array2<Complex64>) {
        let (frames, freqs) = z.dim();
        let frames = frames as isize;
        for k in 0..self.len() {
            let sh = self.offset(k);
            let lo = (-sh).max(0);
            let hi = (frames - sh).min(frames);
            for t in lo..hi {
                let src = (t + sh) as usize;
                let t = t as usize;
                for f in 0..freqs {
                    out[[t, f]] += self.taps[[f, k]].conj() * z[[src, f]];
                }
            }
        }
    }

    /// `out += filter^H(g)`: the adjoint of [`SubbandFilter::accumulate`]
    /// under the real inner product, used to back-propagate gradients.
    pub fn accumulate_adjoint(&self, g: &Array2<Complex64>, out: &mut Array2<Complex64>) {
        let (frames, freqs) = g.dim();
        let frames = frames as isize;
        for k in 0..self.len() {
            let sh = self.offset(k);
            let lo = (-sh).max(0);
            let hi = (frames - sh).min(frames);
            for t in lo..hi {
                let dst = (t + sh) as usize;
                let t = t as usize;
                for f in 0..freqs {
                    out[[dst, f]] += self.taps[[f, k]] * g[[t, f]];
                }
            }
        }
    }

    pub fn scale(&mut self, gain: f64) {
        self.taps.mapv_inplace(|z| z * gain);
    }
}

/// Serialisable form of a filter: taps as `[re, im]` pairs, `[freq][tap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubbandFilterRecord {
    pub past_taps: usize,
    pub future_taps: usize,
    pub taps: Vec<Vec<[f64; 2]>>,
}

impl From<&SubbandFilter> for SubbandFilterRecord {
    fn from(f: &SubbandFilter) -> Self {
        SubbandFilterRecord {
            past_taps: f.past_taps,
            future_taps: f.future_taps,
            taps: f
                .taps
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
        }
    }
}

impl TryFrom<&SubbandFilterRecord> for SubbandFilter {
    type Error = CtrError;

    fn try_from(r: &SubbandFilterRecord) -> Result<Self> {
        let freqs = r.taps.len();
        let k = r.past_taps + r.future_taps;
        if r.taps.iter().any(|row| row.len() != k) {
            return Err(CtrError::data("ragged sub-band filter record"));
        }
        let taps = Array2::from_shape_fn((freqs, k), |(f, j)| {
            Complex64::new(r.taps[f][j][0], r.taps[f][j][1])
        });
        SubbandFilter::new(r.past_taps, r.future_taps, taps)
    }
}
