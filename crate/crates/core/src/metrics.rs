//! Separation metrics: SI-SDR, FIR-projection SDR and permutation-resolved
//! scoring. All scores are clamped to `[-MAX_DB, MAX_DB]`.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::signal::{fft_convolve, Waveform};

/// Score assigned to a perfect estimate.
pub const MAX_DB: f64 = 120.0;

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise <= 0.0 {
        return MAX_DB;
    }
    if signal <= 0.0 {
        return -MAX_DB;
    }
    (10.0 * (signal / noise).log10()).clamp(-MAX_DB, MAX_DB)
}

fn check(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(CtrError::dim(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(CtrError::data("all-zero reference signal"));
    }
    Ok(())
}

pub(crate) fn si_sdr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    check(est, reference)?;
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    let er: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = er / rr;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    Ok(ratio_db(target, noise))
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_samples(&est.samples, &reference.samples)
}

/// `out[k] = sum_n a[n] * b[n - k]` for `k` in `0..lags`.
fn cross_correlation(a: &[f64], b: &[f64], lags: usize) -> Vec<f64> {
    let n = b.len();
    let rev: Vec<f64> = b.iter().rev().copied().collect();
    let full = fft_convolve(a, &rev);
    (0..lags).map(|k| full[n - 1 + k]).collect()
}

/// Cholesky solve of a dense symmetric positive-definite system.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

pub(crate) fn sdr_proj_samples(est: &[f64], reference: &[f64], proj_taps: usize) -> Result<f64> {
    check(est, reference)?;
    if proj_taps == 0 {
        return Err(CtrError::config("proj_taps must be at least 1"));
    }
    let n = reference.len();
    let l = proj_taps.min(n);
    // Normal equations of min_h ||est - trunc(ref * h)||^2 with the exact,
    // truncated Gram matrix: R[k+1][j+1] = R[k][j] - ref[N-1-k] ref[N-1-j].
    let first_row = cross_correlation(reference, reference, l);
    let p = cross_correlation(est, reference, l);
    let mut gram = vec![0.0; l * l];
    for j in 0..l {
        gram[j] = first_row[j];
        gram[j * l] = first_row[j];
    }
    for k in 1..l {
        for j in k..l {
            let v = gram[(k - 1) * l + (j - 1)] - reference[n - k] * reference[n - j];
            gram[k * l + j] = v;
            gram[j * l + k] = v;
        }
    }
    let mut h = p.clone();
    let mut a = gram.clone();
    if !cholesky_solve(&mut a, &mut h, l) {
        let load = 1e-10 * (0..l).map(|i| gram[i * l + i]).sum::<f64>() / l as f64;
        let mut a = gram;
        for i in 0..l {
            a[i * l + i] += load;
        }
        h = p;
        if !cholesky_solve(&mut a, &mut h, l) {
            return Err(CtrError::numerical("sdr projection", "singular reference Gram matrix"));
        }
    }
    let mut target = fft_convolve(reference, &h);
    target.truncate(n);
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (e, t) in est.iter().zip(&target) {
        signal += t * t;
        noise += (e - t) * (e - t);
    }
    Ok(ratio_db(signal, noise))
}

/// SDR with the distortion measured after projecting the estimate onto
/// `proj_taps`-tap FIR filterings of the reference.
pub fn sdr_proj(est: &Waveform, reference: &Waveform, proj_taps: usize) -> Result<f64> {
    sdr_proj_samples(&est.samples, &reference.samples, proj_taps)
}

/// Default FIR length of [`sdr_proj`].
pub const DEFAULT_PROJ_TAPS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SiSdr,
    Sdr { proj_taps: usize },
}

impl Metric {
    pub fn eval(&self, est: &Waveform, reference: &Waveform) -> Result<f64> {
        match *self {
            Metric::SiSdr => si_sdr(est, reference),
            Metric::Sdr { proj_taps } => sdr_proj(est, reference, proj_taps),
        }
    }
}

/// Per-reference scores under the estimate-to-reference assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// `assignment[i]` is the estimate matched to reference `i`.
    pub assignment: Vec<usize>,
    pub si_sdr: Vec<f64>,
    pub sdr: Option<Vec<f64>>,
    /// Improvement over the unprocessed mixture, when one was given.
    pub si_sdr_delta: Option<Vec<f64>>,
    pub sdr_delta: Option<Vec<f64>>,
}

impl ScoreReport {
    pub fn mean_si_sdr(&self) -> f64 {
        mean(&self.si_sdr)
    }

    pub fn mean_sdr(&self) -> Option<f64> {
        self.sdr.as_deref().map(mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("reference,estimate,si_sdr,sdr,si_sdr_delta,sdr_delta\n");
        let opt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or(String::new(), |v| format!("{:.6}", v[i]));
        for (i, &e) in self.assignment.iter().enumerate() {
            out.push_str(&format!(
                "{i},{e},{:.6},{},{},{}\n",
                self.si_sdr[i],
                opt(&self.sdr, i),
                opt(&self.si_sdr_delta, i),
                opt(&self.sdr_delta, i)
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Largest speaker count resolved by exhaustive search.
pub const MAX_PERMUTATION_SPEAKERS: usize = 6;

/// Assignment maximising the mean of `scores[ref][est]`; ties go to the
/// lexicographically first permutation.
pub fn best_assignment(scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    let c = scores.len();
    if c == 0 || c > MAX_PERMUTATION_SPEAKERS {
        return Err(CtrError::config(format!(
            "permutation search supports 1 to {MAX_PERMUTATION_SPEAKERS} speakers, got {c}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..c).permutations(c) {
        let total: f64 = perm.iter().enumerate().map(|(i, &e)| scores[i][e]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

fn score_matrix(est: &[Waveform], refs: &[Waveform], metric: Metric) -> Result<Vec<Vec<f64>>> {
    refs.iter()
        .map(|r| est.iter().map(|e| metric.eval(e, r)).collect())
        .collect()
}

/// Matches estimates to references by exhaustive search on `metric`.
pub fn permute_resolve(est: &[Waveform], refs: &[Waveform], metric: Metric) -> Result<ScoreReport> {
    if est.len() != refs.len() {
        return Err(CtrError::dim(format!(
            "{} estimates for {} references",
            est.len(),
            refs.len()
        )));
    }
    let m = score_matrix(est, refs, metric)?;
    let assignment = best_assignment(&m)?;
    let picked: Vec<f64> = assignment.iter().enumerate().map(|(i, &e)| m[i][e]).collect();
    let (si, sdr) = match metric {
        Metric::SiSdr => (picked, None),
        Metric::Sdr { .. } => {
            let si = assignment
                .iter()
                .enumerate()
                .map(|(i, &e)| si_sdr(&est[e], &refs[i]))
                .collect::<Result<_>>()?;
            (si, Some(picked))
        }
    };
    Ok(ScoreReport {
        assignment,
        si_sdr: si,
        sdr,
        si_sdr_delta: None,
        sdr_delta: None,
    })
}

/// Full report: SI-SDR and SDR of each estimate against its reference under
/// the given assignment (or the identity), plus improvements over
/// `mixtures[i]` scored against reference `i`.
pub fn score_report(
    est: &[Waveform],
    refs: &[Waveform],
    mixtures: Option<&[Waveform]>,
    assignment: Option<Vec<usize>>,
    proj_taps: usize,
) -> Result<ScoreReport> {
    if est.len() != refs.len() {
        return Err(CtrError::dim(format!(
            "{} estimates for {} references",
            est.len(),
            refs.len()
        )));
    }
    let assignment = assignment.unwrap_or_else(|| (0..refs.len()).collect());
    let mut si = Vec::new();
    let mut sdr = Vec::new();
    for (i, &e) in assignment.iter().enumerate() {
        si.push(si_sdr(&est[e], &refs[i])?);
        sdr.push(sdr_proj(&est[e], &refs[i], proj_taps)?);
    }
    let (si_d, sdr_d) = match mixtures {
        None => (None, None),
        Some(mix) => {
            if mix.len() != refs.len() {
                return Err(CtrError::dim("one mixture per reference is required"));
            }
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, m) in mix.iter().enumerate() {
                a.push(si[i] - si_sdr(m, &refs[i])?);
                b.push(sdr[i] - sdr_proj(m, &refs[i], proj_taps)?);
            }
            (Some(a), Some(b))
        }
    };
    Ok(ScoreReport {
        assignment,
        si_sdr: si,
        sdr: Some(sdr),
        si_sdr_delta: si_d,
        sdr_delta: sdr_d,
    })
}
