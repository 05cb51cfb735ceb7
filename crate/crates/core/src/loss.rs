//! Mixture-constraint and speaker-activity losses, and frame muting.
//!
//! Receivers are numbered `0..C` for the close-talk microphones (microphone
//! `c` is worn by speaker `c`) followed by `C..C+P` for the far-field
//! microphones.

use std::fmt;

use ndarray::Array2;
use num_complex::Complex64;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{CtrError, Result};
use crate::fcp::FilterEstimate;
use crate::signal::{Spectrogram, StftGeometry, Waveform};

/// Recorded mixtures of one session or block.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSet {
    pub close_talk: Vec<Spectrogram>,
    pub far_field: Vec<Spectrogram>,
}

impl MixtureSet {
    pub fn new(close_talk: Vec<Spectrogram>, far_field: Vec<Spectrogram>) -> Result<Self> {
        let Some(first) = close_talk.first() else {
            return Err(CtrError::config("at least one close-talk microphone is required"));
        };
        if close_talk.iter().chain(&far_field).any(|s| !s.same_shape(first)) {
            return Err(CtrError::dim("all mixtures must share frames and frequencies"));
        }
        Ok(MixtureSet {
            close_talk,
            far_field,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.close_talk.len()
    }

    pub fn num_far(&self) -> usize {
        self.far_field.len()
    }

    pub fn num_receivers(&self) -> usize {
        self.close_talk.len() + self.far_field.len()
    }

    pub fn receiver(&self, r: usize) -> &Spectrogram {
        let c = self.close_talk.len();
        if r < c {
            &self.close_talk[r]
        } else {
            &self.far_field[r - c]
        }
    }

    pub fn receivers(&self) -> impl Iterator<Item = &Spectrogram> {
        self.close_talk.iter().chain(&self.far_field)
    }

    pub fn geometry(&self) -> &StftGeometry {
        &self.close_talk[0].geometry
    }

    pub fn original_length(&self) -> usize {
        self.close_talk[0].original_length
    }
}

/// Reconstruction distance between a recorded and a reconstructed mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Absolute error on real part, imaginary part and magnitude, normalised
    /// by the reference's L1 magnitude.
    #[default]
    FAbs,
    /// Squared error normalised by the reference's energy.
    L2,
}

fn check_pair(y: &Array2<Complex64>, y_hat: &Array2<Complex64>) -> Result<()> {
    if y.dim() != y_hat.dim() {
        return Err(CtrError::dim(format!(
            "reference {:?} and estimate {:?} differ in shape",
            y.dim(),
            y_hat.dim()
        )));
    }
    Ok(())
}

pub(crate) fn f_div_values(y: &Array2<Complex64>, y_hat: &Array2<Complex64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in y.iter().zip(y_hat.iter()) {
        let d = a - b;
        let ma = a.norm();
        num += d.re.abs() + d.im.abs() + (ma - b.norm()).abs();
        den += ma;
    }
    if den == 0.0 {
        return Err(CtrError::data("all-zero reference: the distance is undefined"));
    }
    Ok(num / den)
}

pub(crate) fn l2_values(y: &Array2<Complex64>, y_hat: &Array2<Complex64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in y.iter().zip(y_hat.iter()) {
        num += (a - b).norm_sqr();
        den += a.norm_sqr();
    }
    if den == 0.0 {
        return Err(CtrError::data("all-zero reference: the distance is undefined"));
    }
    Ok(num / den)
}

pub(crate) fn objective_values(
    obj: Objective,
    y: &Array2<Complex64>,
    y_hat: &Array2<Complex64>,
) -> Result<f64> {
    match obj {
        Objective::FAbs => f_div_values(y, y_hat),
        Objective::L2 => l2_values(y, y_hat),
    }
}

/// `sum(|Re(Y - Ŷ)| + |Im(Y - Ŷ)| + ||Y| - |Ŷ||) / sum |Y|`, accumulated in
/// frame-major order.
pub fn f_div(y: &Spectrogram, y_hat: &Spectrogram) -> Result<f64> {
    f_div_values(&y.values, &y_hat.values)
}

/// Reconstruction of receiver `r`: the unfiltered estimate of the wearer (for
/// close-talk receivers) plus the filtered images of everyone else.
pub(crate) fn reconstruct(
    r: usize,
    estimates: &[&Array2<Complex64>],
    filters: &FilterEstimate,
) -> Result<Array2<Complex64>> {
    let Some(first) = estimates.first() else {
        return Err(CtrError::config("no source estimates"));
    };
    let mut acc = Array2::zeros(first.dim());
    for (c, z) in estimates.iter().enumerate() {
        if z.dim() != first.dim() {
            return Err(CtrError::dim("source estimates differ in shape"));
        }
        if filters.is_anchor(r, c) {
            acc += *z;
        } else {
            let filt = filters.require(r, c)?;
            if filt.num_freqs() != z.ncols() {
                return Err(CtrError::dim("filter and estimate frequency counts differ"));
            }
            filt.accumulate(z, &mut acc);
        }
    }
    Ok(acc)
}

fn values_of(estimates: &[Spectrogram]) -> Vec<&Array2<Complex64>> {
    estimates.iter().map(|s| &s.values).collect()
}

/// Close-talk constraint for speaker `c`: `F(Y_c, Ẑ(c) + sum of the other
/// speakers' filtered images)`.
pub fn mc_loss_close_talk(
    c: usize,
    y_c: &Spectrogram,
    estimates: &[Spectrogram],
    filters: &FilterEstimate,
) -> Result<f64> {
    if c >= estimates.len() {
        return Err(CtrError::config(format!("speaker {c} has no estimate")));
    }
    let rec = reconstruct(c, &values_of(estimates), filters)?;
    f_div_values(&y_c.values, &rec)
}

/// Far-field constraint for microphone `p`: `F(Y_p, sum of all filtered
/// images)`.
pub fn mc_loss_far_field(
    p: usize,
    y_p: &Spectrogram,
    estimates: &[Spectrogram],
    filters: &FilterEstimate,
) -> Result<f64> {
    let rec = reconstruct(estimates.len() + p, &values_of(estimates), filters)?;
    f_div_values(&y_p.values, &rec)
}

/// Weight of the far-field terms: a fixed value or the reciprocal of the
/// far-field microphone count. Written as `"1/P"` or a number in
/// configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Alpha {
    #[default]
    InverseP,
    Value(f64),
}

impl Alpha {
    pub fn resolve(&self, num_far: usize) -> Result<f64> {
        match *self {
            Alpha::InverseP if num_far == 0 => Err(CtrError::config(
                "alpha = 1/P needs at least one far-field microphone",
            )),
            Alpha::InverseP => Ok(1.0 / num_far as f64),
            Alpha::Value(v) if v >= 0.0 && v.is_finite() => Ok(v),
            Alpha::Value(v) => Err(CtrError::config(format!("alpha must be >= 0, got {v}"))),
        }
    }
}

impl std::str::FromStr for Alpha {
    type Err = CtrError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("1/p") {
            return Ok(Alpha::InverseP);
        }
        t.parse::<f64>()
            .map(Alpha::Value)
            .map_err(|_| CtrError::config(format!("alpha must be a number or \"1/P\", got {s:?}")))
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::InverseP => f.write_str("1/P"),
            Alpha::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::InverseP => s.serialize_str("1/P"),
            Alpha::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct AlphaVisitor;
        impl Visitor<'_> for AlphaVisitor {
            type Value = Alpha;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or the string \"1/P\"")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Alpha, E> {
                v.parse().map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Alpha, E> {
                Ok(Alpha::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Alpha, E> {
                Ok(Alpha::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Alpha, E> {
                Ok(Alpha::Value(v as f64))
            }
        }
        d.deserialize_any(AlphaVisitor)
    }
}

/// Per-term losses and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mc_close: Vec<f64>,
    pub mc_far: Vec<f64>,
    /// Empty when the activity loss is not in use.
    pub sa: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(mc_close: Vec<f64>, mc_far: Vec<f64>, sa: Vec<f64>, alpha: f64, beta: f64) -> Self {
        let total = mc_close.iter().sum::<f64>()
            + alpha * mc_far.iter().sum::<f64>()
            + beta * sa.iter().sum::<f64>();
        LossBreakdown {
            mc_close,
            mc_far,
            sa,
            alpha,
            beta,
            total,
        }
    }
}

pub(crate) fn mc_terms(
    obj: Objective,
    estimates: &[&Array2<Complex64>],
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if estimates.len() != mixtures.num_speakers() {
        return Err(CtrError::config(format!(
            "{} estimates for {} close-talk microphones",
            estimates.len(),
            mixtures.num_speakers()
        )));
    }
    let mut close = Vec::with_capacity(mixtures.num_speakers());
    let mut far = Vec::with_capacity(mixtures.num_far());
    for (r, y) in mixtures.receivers().enumerate() {
        let rec = reconstruct(r, estimates, filters)?;
        let v = objective_values(obj, &y.values, &rec)?;
        if r < mixtures.num_speakers() {
            close.push(v);
        } else {
            far.push(v);
        }
    }
    Ok((close, far))
}

/// Full mixture-constraint loss with the F distance.
pub fn mc_total(
    estimates: &[Spectrogram],
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    alpha: Alpha,
) -> Result<LossBreakdown> {
    let a = alpha.resolve(mixtures.num_far())?;
    let (close, far) = mc_terms(Objective::FAbs, &values_of(estimates), mixtures, filters)?;
    Ok(LossBreakdown::assemble(close, far, Vec::new(), a, 0.0))
}

/// Frame- and speaker-level activity of one speaker in STFT frame units.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMask {
    pub frame_active: Vec<bool>,
    pub speaker_active: bool,
    pub min_active_s: f64,
}

impl ActivityMask {
    /// A frame is active when its sample span, padding included, touches any
    /// active sample. The speaker counts as present when at least
    /// `min_active_s` seconds are active.
    pub fn from_samples(d: &[bool], geom: &StftGeometry, min_active_s: f64) -> Self {
        let mut prefix = Vec::with_capacity(d.len() + 1);
        prefix.push(0usize);
        for &a in d {
            prefix.push(prefix.last().unwrap() + a as usize);
        }
        let n = d.len() as i64;
        let frames = geom.num_frames(d.len());
        let frame_active = (0..frames)
            .map(|t| {
                let (s, e) = geom.frame_span(t);
                let s = s.clamp(0, n) as usize;
                let e = e.clamp(0, n) as usize;
                prefix[e] > prefix[s]
            })
            .collect();
        let active = prefix[d.len()] as f64;
        ActivityMask {
            frame_active,
            speaker_active: active >= min_active_s * geom.sample_rate as f64,
            min_active_s,
        }
    }

    /// Combined `D(t) * E` factor of frame `t`.
    pub fn factor(&self, t: usize) -> f64 {
        if self.speaker_active && self.frame_active[t] {
            1.0
        } else {
            0.0
        }
    }

    pub(crate) fn apply_values(&self, z: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = z.clone();
        for (t, mut row) in out.rows_mut().into_iter().enumerate() {
            if self.factor(t) == 0.0 {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
        out
    }

    pub fn apply(&self, z: &Spectrogram) -> Result<Spectrogram> {
        if z.num_frames() != self.frame_active.len() {
            return Err(CtrError::dim(format!(
                "mask covers {} frames, spectrogram has {}",
                self.frame_active.len(),
                z.num_frames()
            )));
        }
        Ok(z.with_values(self.apply_values(&z.values)))
    }
}

/// Zeroes the frames of `z` outside the speaker's activity, or everything if
/// the speaker is active for less than `min_active_s`.
pub fn mute(z: &Spectrogram, d: &[bool], min_active_s: f64) -> Result<Spectrogram> {
    if d.len() != z.original_length {
        return Err(CtrError::dim(format!(
            "activity has {} samples, estimate covers {}",
            d.len(),
            z.original_length
        )));
    }
    ActivityMask::from_samples(d, &z.geometry, min_active_s).apply(z)
}

/// Silent-range leakage: the L1 norm of the estimate over silent samples
/// relative to that of the mixture, times the silent fraction. Zero when the
/// speaker is never silent.
pub fn sa_loss(z: &Waveform, y: &Waveform, d: &[bool]) -> Result<f64> {
    let n = d.len();
    if z.len() != n || y.len() != n {
        return Err(CtrError::dim(format!(
            "estimate ({}), mixture ({}) and activity ({n}) lengths differ",
            z.len(),
            y.len()
        )));
    }
    let silent = d.iter().filter(|&&a| !a).count();
    if silent == 0 {
        return Ok(0.0);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), &act) in z.samples.iter().zip(&y.samples).zip(d) {
        if !act {
            num += a.abs();
            den += b.abs();
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            return Ok(0.0);
        }
        return Err(CtrError::data(
            "mixture is exactly zero over the silent range while the estimate is not",
        ));
    }
    Ok(num / den * silent as f64 / n as f64)
}

/// Activity information for weakly supervised evaluation.
#[derive(Debug, Clone)]
pub struct WeakContext {
    pub activity: Vec<Vec<bool>>,
    pub masks: Vec<ActivityMask>,
    /// Time-domain close-talk mixtures.
    pub close_talk: Vec<Waveform>,
    pub beta: f64,
}

impl WeakContext {
    pub fn new(
        activity: Vec<Vec<bool>>,
        mixtures: &MixtureSet,
        min_active_s: f64,
        beta: f64,
    ) -> Result<Self> {
        if activity.len() != mixtures.num_speakers() {
            return Err(CtrError::config(format!(
                "activity for {} speakers, {} close-talk microphones",
                activity.len(),
                mixtures.num_speakers()
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(CtrError::config(format!("beta must be >= 0, got {beta}")));
        }
        let n = mixtures.original_length();
        let geom = mixtures.geometry();
        let mut masks = Vec::new();
        for d in &activity {
            if d.len() != n {
                return Err(CtrError::dim(format!(
                    "activity has {} samples, session has {n}",
                    d.len()
                )));
            }
            masks.push(ActivityMask::from_samples(d, geom, min_active_s));
        }
        let close_talk = mixtures
            .close_talk
            .iter()
            .map(|y| crate::signal::istft(y, n))
            .collect::<Result<_>>()?;
        Ok(WeakContext {
            activity,
            masks,
            close_talk,
            beta,
        })
    }
}

/// Mixture-constraint loss, plus the activity loss when `weak` is given.
/// In the weak case the constraint is evaluated on the muted estimates and
/// the activity loss on the unmuted ones.
pub fn total_loss(
    estimates: &[Spectrogram],
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    alpha: Alpha,
    objective: Objective,
    weak: Option<&WeakContext>,
) -> Result<LossBreakdown> {
    let a = alpha.resolve(mixtures.num_far())?;
    let Some(w) = weak else {
        let (close, far) = mc_terms(objective, &values_of(estimates), mixtures, filters)?;
        return Ok(LossBreakdown::assemble(close, far, Vec::new(), a, 0.0));
    };
    if estimates.len() != w.masks.len() {
        return Err(CtrError::config("activity and estimates differ in speaker count"));
    }
    let muted: Vec<Array2<Complex64>> = estimates
        .iter()
        .zip(&w.masks)
        .map(|(z, m)| m.apply(z).map(|s| s.values))
        .collect::<Result<_>>()?;
    let refs: Vec<&Array2<Complex64>> = muted.iter().collect();
    let (close, far) = mc_terms(objective, &refs, mixtures, filters)?;
    let mut sa = Vec::with_capacity(estimates.len());
    for (c, z) in estimates.iter().enumerate() {
        let zt = crate::signal::istft(z, z.original_length)?;
        let v = sa_loss(&zt, &w.close_talk[c], &w.activity[c])
            .map_err(|e| CtrError::data(format!("speaker {c}: {e}")))?;
        sa.push(v);
    }
    Ok(LossBreakdown::assemble(close, far, sa, a, w.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subband::SubbandFilter;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> StftGeometry {
        StftGeometry::new(16, 8, 8000).unwrap()
    }

    fn random_spec(rng: &mut ChaCha8Rng, len: usize) -> Spectrogram {
        let g = geom();
        let vals = Array2::from_shape_fn((g.num_frames(len), g.num_freqs()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        Spectrogram::from_values(vals, &g, len).unwrap()
    }

    fn random_filter(rng: &mut ChaCha8Rng, k: usize, nf: usize) -> SubbandFilter {
        let taps = Array2::from_shape_fn((nf, k), |_| {
            Complex64::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
        });
        SubbandFilter::new(k, 0, taps).unwrap()
    }

    fn f_oracle(y: &Array2<Complex64>, yh: &Array2<Complex64>) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..y.nrows() {
            for f in 0..y.ncols() {
                let (a, b) = (y[[t, f]], yh[[t, f]]);
                let ma = (a.re * a.re + a.im * a.im).sqrt();
                let mb = (b.re * b.re + b.im * b.im).sqrt();
                num += (a.re - b.re).abs() + (a.im - b.im).abs() + (ma - mb).abs();
                den += ma;
            }
        }
        num / den
    }

    #[test]
    fn f_div_worked_examples() {
        let y = Array2::from_elem((1, 1), Complex64::new(1.0, 0.0));
        let z = Array2::zeros((1, 1));
        assert_eq!(f_div_values(&y, &z).unwrap(), 2.0);
        assert_eq!(f_div_values(&y, &y).unwrap(), 0.0);
        assert!(matches!(f_div_values(&z, &y), Err(CtrError::Data(_))));
    }

    #[test]
    fn f_div_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let a = random_spec(&mut rng, 100);
            let b = random_spec(&mut rng, 100);
            let v = f_div(&a, &b).unwrap();
            assert!((v - f_oracle(&a.values, &b.values)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_estimate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y = random_spec(&mut rng, 100);
        let z = y.scaled(0.0);
        let v = f_div(&y, &z).unwrap();
        assert!((1.0..=3.0).contains(&v));
        let real = y.with_values(y.values.mapv(|z| Complex64::new(z.re, 0.0)));
        assert!((f_div(&real, &z).unwrap() - 2.0).abs() < 1e-12);
    }

    fn two_speaker_setup(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Spectrogram>, MixtureSet, FilterEstimate) {
        let z = vec![random_spec(rng, 200), random_spec(rng, 200)];
        let nf = z[0].num_freqs();
        let mut filters = FilterEstimate::empty(2, 4);
        for r in 0..4 {
            for c in 0..2 {
                if !filters.is_anchor(r, c) {
                    filters.set(r, c, random_filter(rng, 3, nf));
                }
            }
        }
        let refs: Vec<&Array2<Complex64>> = z.iter().map(|s| &s.values).collect();
        let ys: Vec<Spectrogram> = (0..4)
            .map(|r| z[0].with_values(reconstruct(r, &refs, &filters).unwrap()))
            .collect();
        let mix = MixtureSet::new(ys[..2].to_vec(), ys[2..].to_vec()).unwrap();
        (z, mix, filters)
    }

    #[test]
    fn exact_reconstruction_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (z, mix, filters) = two_speaker_setup(&mut rng);
        let b = mc_total(&z, &mix, &filters, Alpha::InverseP).unwrap();
        assert!(b.total < 1e-12);
        assert_eq!(b.alpha, 0.5);
        assert!(mc_loss_close_talk(1, &mix.close_talk[1], &z, &filters).unwrap() < 1e-12);
        assert!(mc_loss_far_field(0, &mix.far_field[0], &z, &filters).unwrap() < 1e-12);
    }

    #[test]
    fn zeroing_an_interferer_increases_close_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (mut z, mix, filters) = two_speaker_setup(&mut rng);
        let base = mc_loss_close_talk(0, &mix.close_talk[0], &z, &filters).unwrap();
        z[1] = z[1].scaled(0.0);
        let after = mc_loss_close_talk(0, &mix.close_talk[0], &z, &filters).unwrap();
        assert!(after > base);
    }

    #[test]
    fn speaker_permutation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (z, mix, filters) = two_speaker_setup(&mut rng);
        let z_perturbed: Vec<Spectrogram> = z.iter().map(|s| s.scaled(0.9)).collect();
        let v = mc_loss_far_field(1, &mix.far_field[1], &z_perturbed, &filters).unwrap();
        let swapped = vec![z_perturbed[1].clone(), z_perturbed[0].clone()];
        let mut sf = FilterEstimate::empty(2, 4);
        for r in 2..4 {
            sf.set(r, 0, filters.get(r, 1).unwrap().clone());
            sf.set(r, 1, filters.get(r, 0).unwrap().clone());
        }
        let w = mc_loss_far_field(1, &mix.far_field[1], &swapped, &sf).unwrap();
        assert!((v - w).abs() < 1e-12);
    }

    #[test]
    fn missing_filter_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (z, mix, _) = two_speaker_setup(&mut rng);
        let empty = FilterEstimate::empty(2, 4);
        assert!(matches!(
            mc_loss_close_talk(0, &mix.close_talk[0], &z, &empty),
            Err(CtrError::Config(_))
        ));
    }

    #[test]
    fn single_speaker_reduces_to_f_div() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let y = random_spec(&mut rng, 100);
        let filters = FilterEstimate::empty(1, 1);
        assert_eq!(
            mc_loss_close_talk(0, &y, std::slice::from_ref(&y), &filters).unwrap(),
            0.0
        );
        let z = y.scaled(0.5);
        assert_eq!(
            mc_loss_close_talk(0, &y, &[z.clone()], &filters).unwrap(),
            f_div(&y, &z).unwrap()
        );
    }

    #[test]
    fn alpha_parsing_and_resolution() {
        assert_eq!("1/P".parse::<Alpha>().unwrap(), Alpha::InverseP);
        assert_eq!("0.25".parse::<Alpha>().unwrap(), Alpha::Value(0.25));
        assert!("half".parse::<Alpha>().is_err());
        assert!(matches!(Alpha::InverseP.resolve(0), Err(CtrError::Config(_))));
        assert_eq!(Alpha::InverseP.resolve(4).unwrap(), 0.25);
        assert_eq!(Alpha::Value(0.0).resolve(0).unwrap(), 0.0);
        let a: Alpha = serde_json::from_str("\"1/P\"").unwrap();
        assert_eq!(a, Alpha::InverseP);
        let a: Alpha = serde_json::from_str("2").unwrap();
        assert_eq!(a, Alpha::Value(2.0));
    }

    #[test]
    fn sa_worked_examples() {
        let w = |v: &[f64]| Waveform::new(v.to_vec(), 8000).unwrap();
        let d = [true, true, false, false];
        let v = sa_loss(&w(&[5.0, 5.0, 1.0, 1.0]), &w(&[2.0; 4]), &d).unwrap();
        assert_eq!(v, 0.25);
        assert_eq!(sa_loss(&w(&[0.0; 4]), &w(&[2.0; 4]), &d).unwrap(), 0.0);
        assert_eq!(sa_loss(&w(&[3.0; 4]), &w(&[2.0; 4]), &[true; 4]).unwrap(), 0.0);
        let silent_mix = w(&[1.0, 1.0, 0.0, 0.0]);
        assert!(sa_loss(&w(&[0.0, 0.0, 1.0, 0.0]), &silent_mix, &d).is_err());
    }

    #[test]
    fn mute_all_active_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let z = random_spec(&mut rng, 1000);
        assert_eq!(mute(&z, &vec![true; 1000], 0.1).unwrap(), z);
    }

    #[test]
    fn mute_short_activity_silences_speaker() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let z = random_spec(&mut rng, 4000);
        let mut d = vec![false; 4000];
        d[100..899].iter_mut().for_each(|v| *v = true);
        let r = mute(&z, &d, 0.1).unwrap();
        assert!(r.values.iter().all(|v| v.norm() == 0.0));
        d[899] = true;
        let r = mute(&z, &d, 0.1).unwrap();
        assert!(r.values.iter().any(|v| v.norm() > 0.0));
    }

    #[test]
    fn frame_mask_matches_brute_force() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
            let m = ActivityMask::from_samples(&d, &g, 0.0);
            for t in 0..g.num_frames(n) {
                let start = t as i64 * g.hop as i64 - g.pad() as i64;
                let expected =
                    (start..start + g.win as i64).any(|i| i >= 0 && i < n as i64 && d[i as usize]);
                assert_eq!(m.frame_active[t], expected, "n {n} t {t}");
            }
        }
    }

    #[test]
    fn muted_frames_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let z = random_spec(&mut rng, 400);
        let mut d = vec![false; 400];
        d[200..400].iter_mut().for_each(|v| *v = true);
        let m = ActivityMask::from_samples(&d, &z.geometry, 0.0);
        let r = m.apply(&z).unwrap();
        let twice = m.apply(&r).unwrap();
        assert_eq!(r, twice);
        for t in 0..r.num_frames() {
            if !m.frame_active[t] {
                assert!(r.values.row(t).iter().all(|v| v.norm() == 0.0));
            }
        }
    }

    proptest! {
        #[test]
        fn f_div_zero_iff_equal(vals in proptest::collection::vec(-5.0f64..5.0, 8), k in 0usize..4, eps in 1e-6f64..1.0) {
            let y = Array2::from_shape_fn((2, 2), |(i, j)| Complex64::new(vals[2 * i + j], vals[4 + 2 * i + j]));
            prop_assume!(y.iter().any(|z| z.norm() > 0.0));
            prop_assert_eq!(f_div_values(&y, &y).unwrap(), 0.0);
            let mut yh = y.clone();
            yh[[k / 2, k % 2]] += Complex64::new(eps, 0.0);
            prop_assert!(f_div_values(&y, &yh).unwrap() > 0.0);
        }

        #[test]
        fn f_div_scale_invariant(seed in 0u64..1000, a in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_spec(&mut rng, 40);
            let yh = random_spec(&mut rng, 40);
            let v = f_div(&y, &yh).unwrap();
            let w = f_div(&y.scaled(a), &yh.scaled(a)).unwrap();
            prop_assert!((v - w).abs() <= 1e-12 * v.max(1.0));
        }

        #[test]
        fn sa_monotone_in_silent_magnitude(seed in 0u64..1000, idx in 0usize..32, bump in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<bool> = (0..32).map(|_| rng.random_bool(0.5)).collect();
            prop_assume!(!d[idx]);
            let y = Waveform::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
            let z = Waveform::new((0..32).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap();
            let mut z2 = z.clone();
            z2.samples[idx] += bump * z2.samples[idx].signum();
            prop_assert!(sa_loss(&z2, &y, &d).unwrap() >= sa_loss(&z, &y, &d).unwrap());
        }
    }
}
