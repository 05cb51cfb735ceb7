//! Forward convolutive prediction: per-frequency weighted linear regression
//! from a source estimate to a microphone mixture, and the filtered image it
//! produces.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::signal::Spectrogram;
use crate::subband::SubbandFilter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcpConfig {
    /// Taps over the current and past frames (`t - I + 1 ..= t`).
    pub past_taps: usize,
    /// Taps over future frames (`t + 1 ..= t + J`).
    pub future_taps: usize,
    /// Floor of the weighting term, relative to the mixture's peak power.
    pub xi: f64,
    /// Diagonal loading relative to the mean diagonal of the normal matrix.
    pub diag_load: f64,
}

impl Default for FcpConfig {
    fn default() -> Self {
        FcpConfig {
            past_taps: 30,
            future_taps: 0,
            xi: 1e-3,
            diag_load: 1e-10,
        }
    }
}

impl FcpConfig {
    pub fn num_taps(&self) -> usize {
        self.past_taps + self.future_taps
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_taps < 1 {
            return Err(CtrError::config("fcp.past_taps must be at least 1"));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(CtrError::config("fcp.xi must be positive"));
        }
        if !(self.diag_load >= 0.0 && self.diag_load.is_finite()) {
            return Err(CtrError::config("fcp.diag_load must be non-negative"));
        }
        Ok(())
    }
}

/// Regression weights `lambda(t, f)` of one receiver, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub values: Array2<f64>,
}

/// `lambda(t, f) = xi * max |Y|^2 + |Y(t, f)|^2`, for close-talk and
/// far-field receivers alike.
pub fn fcp_weights(y: &Spectrogram, xi: f64) -> Result<WeightField> {
    if y.values.is_empty() {
        return Err(CtrError::dim("empty mixture spectrogram"));
    }
    let floor = xi * y.max_power();
    if floor <= 0.0 {
        return Err(CtrError::data(
            "all-zero mixture: regression weights are degenerate",
        ));
    }
    Ok(WeightField {
        values: y.values.mapv(|z| floor + z.norm_sqr()),
    })
}

/// Solves `A x = b` for Hermitian positive-definite `A` (row-major, `n x n`)
/// by Cholesky factorisation. Returns `None` when a pivot is not positive
/// relative to the largest diagonal entry.
fn cholesky_solve(a: &mut [Complex64], b: &mut [Complex64], n: usize) -> Option<()> {
    let max_diag = (0..n).map(|i| a[i * n + i].re).fold(0.0, f64::max);
    let tol = max_diag * 1e-14;
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
    }
    // L y = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i].re;
    }
    // L^H x = y
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i].conj() * b[k];
        }
        b[i] = s / a[i * n + i].re;
    }
    Some(())
}

fn solve_bin(
    z_hat: &Array2<Complex64>,
    y: &Array2<Complex64>,
    weights: &Array2<f64>,
    f: usize,
    cfg: &FcpConfig,
) -> Result<Vec<Complex64>> {
    let k_len = cfg.num_taps();
    let frames = z_hat.nrows() as isize;
    let past = cfg.past_taps as isize;
    let mut normal = vec![Complex64::new(0.0, 0.0); k_len * k_len];
    let mut rhs = vec![Complex64::new(0.0, 0.0); k_len];
    let mut window = vec![Complex64::new(0.0, 0.0); k_len];
    for t in 0..frames {
        for (k, w) in window.iter_mut().enumerate() {
            let src = t - past + 1 + k as isize;
            *w = if (0..frames).contains(&src) {
                z_hat[[src as usize, f]]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let inv = 1.0 / weights[[t as usize, f]];
        let y_conj = y[[t as usize, f]].conj() * inv;
        for i in 0..k_len {
            let wi = window[i] * inv;
            if wi == Complex64::new(0.0, 0.0) {
                continue;
            }
            rhs[i] += window[i] * y_conj;
            for j in 0..=i {
                normal[i * k_len + j] += wi * window[j].conj();
            }
        }
    }
    for i in 0..k_len {
        for j in 0..i {
            normal[j * k_len + i] = normal[i * k_len + j].conj();
        }
    }
    let trace: f64 = (0..k_len).map(|i| normal[i * k_len + i].re).sum();
    if trace == 0.0 {
        // A silent estimate in this bin explains nothing; the minimum-norm
        // solution is the zero filter.
        return Ok(vec![Complex64::new(0.0, 0.0); k_len]);
    }
    let load = cfg.diag_load * trace / k_len as f64;
    for i in 0..k_len {
        normal[i * k_len + i] += load;
    }
    cholesky_solve(&mut normal, &mut rhs, k_len).ok_or_else(|| {
        CtrError::numerical(
            format!("frequency bin {f}"),
            "singular normal matrix in filter regression",
        )
    })?;
    Ok(rhs)
}

/// Weighted least-squares filter from `z_hat` to the receiver mixture `y`,
/// solved independently for every frequency via the normal equations.
pub fn estimate_filter(
    z_hat: &Spectrogram,
    y: &Spectrogram,
    weights: &WeightField,
    cfg: &FcpConfig,
) -> Result<SubbandFilter> {
    cfg.validate()?;
    if !z_hat.same_shape(y) || weights.values.dim() != y.values.dim() {
        return Err(CtrError::dim(
            "estimate, mixture and weights must share frames and frequencies",
        ));
    }
    if z_hat.num_frames() < cfg.num_taps() {
        return Err(CtrError::dim(format!(
            "{} frames is fewer than the {} filter taps",
            z_hat.num_frames(),
            cfg.num_taps()
        )));
    }
    let freqs = z_hat.num_freqs();
    let rows: Vec<Vec<Complex64>> = (0..freqs)
        .into_par_iter()
        .map(|f| solve_bin(&z_hat.values, &y.values, &weights.values, f, cfg))
        .collect::<Result<_>>()?;
    let taps = Array2::from_shape_fn((freqs, cfg.num_taps()), |(f, k)| rows[f][k]);
    SubbandFilter::new(cfg.past_taps, cfg.future_taps, taps)
}

/// FCP-estimated image of a speaker at a receiver.
pub fn fcp_image(filter: &SubbandFilter, z_hat: &Spectrogram) -> Result<Spectrogram> {
    filter.apply(z_hat)
}

/// Value of the weighted regression objective for a given filter.
pub fn regression_objective(
    filter: &SubbandFilter,
    z_hat: &Spectrogram,
    y: &Spectrogram,
    weights: &WeightField,
) -> Result<f64> {
    let img = filter.apply(z_hat)?;
    let mut total = 0.0;
    for ((a, b), w) in y.values.iter().zip(img.values.iter()).zip(weights.values.iter()) {
        total += (a - b).norm_sqr() / w;
    }
    Ok(total)
}

/// Filters for every (receiver, speaker) pair. Receivers `0..C` are the
/// close-talk microphones, `C..C+P` the far-field ones; the pair of a
/// close-talk microphone and its own wearer has no filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEstimate {
    pub num_speakers: usize,
    pub num_receivers: usize,
    filters: Vec<Option<SubbandFilter>>,
}

impl FilterEstimate {
    pub fn empty(num_speakers: usize, num_receivers: usize) -> Self {
        FilterEstimate {
            num_speakers,
            num_receivers,
            filters: vec![None; num_speakers * num_receivers],
        }
    }

    pub fn get(&self, receiver: usize, speaker: usize) -> Option<&SubbandFilter> {
        self.filters
            .get(receiver * self.num_speakers + speaker)
            .and_then(|f| f.as_ref())
    }

    pub fn set(&mut self, receiver: usize, speaker: usize, filter: SubbandFilter) {
        self.filters[receiver * self.num_speakers + speaker] = Some(filter);
    }

    pub fn require(&self, receiver: usize, speaker: usize) -> Result<&SubbandFilter> {
        self.get(receiver, speaker).ok_or_else(|| {
            CtrError::config(format!(
                "no filter for speaker {speaker} at receiver {receiver}"
            ))
        })
    }

    /// Whether receiver `r` carries an unfiltered anchor for `speaker`.
    pub fn is_anchor(&self, receiver: usize, speaker: usize) -> bool {
        receiver == speaker && receiver < self.num_speakers
    }
}

/// Estimates filters for all (receiver, speaker) pairs except the anchors.
pub fn estimate_all(
    estimates: &[Spectrogram],
    mixtures: &[Spectrogram],
    weights: &[WeightField],
    cfg: &FcpConfig,
) -> Result<FilterEstimate> {
    let c = estimates.len();
    let mut out = FilterEstimate::empty(c, mixtures.len());
    for (r, (y, w)) in mixtures.iter().zip(weights).enumerate() {
        for (s, z) in estimates.iter().enumerate() {
            if out.is_anchor(r, s) {
                continue;
            }
            let filt = estimate_filter(z, y, w, cfg).map_err(|e| match e {
                CtrError::Numerical { context, message } => CtrError::numerical(
                    format!("receiver {r}, speaker {s}, {context}"),
                    message,
                ),
                other => other,
            })?;
            out.set(r, s, filt);
        }
    }
    Ok(out)
}
