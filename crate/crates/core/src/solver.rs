//! Alternating blind deconvolution: a closed-form filter regression step
//! followed by a preconditioned (sub)gradient step on the source estimates,
//! with the filters held fixed.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CtrError, Result};
use crate::fcp::{estimate_all, fcp_weights, FcpConfig, FilterEstimate, WeightField};
use crate::loss::{
    reconstruct, total_loss, Alpha, LossBreakdown, MixtureSet, Objective, WeakContext,
};
use crate::signal::{istft, istft_adjoint, Spectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    /// Mixture constraint only.
    #[default]
    Unsupervised,
    /// Muting by activity plus the silent-range penalty.
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// Optimise the estimate spectrograms directly.
    #[default]
    Direct,
    /// Optimise complex masks applied to the close-talk mixtures.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Running,
    /// Relative loss change fell below tolerance, or the loss reached zero.
    Converged,
    /// The subgradient vanished.
    Stationary,
    /// Backtracking shrank the step below the floor without finding descent.
    StepUnderflow,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub fcp: FcpConfig,
    pub alpha: Alpha,
    pub beta: f64,
    pub mode: SupervisionMode,
    pub objective: Objective,
    pub parametrization: Parametrization,
    pub backtracking: bool,
    pub shrink: f64,
    pub grow: f64,
    pub sufficient_decrease: f64,
    /// Smoothing of the magnitude term's subgradient near zero.
    pub epsilon_mag: f64,
    /// First step length relative to `||estimates|| / ||direction||`.
    pub initial_step: f64,
    /// Backtracking gives up below `initial step * min_step_ratio`.
    pub min_step_ratio: f64,
    /// Scale each coordinate's step by the mixture magnitude.
    pub precondition: bool,
    pub rel_tol: f64,
    pub tol_window: usize,
    pub abs_tol: f64,
    pub min_active_s: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iters: 100,
            fcp: FcpConfig::default(),
            alpha: Alpha::InverseP,
            beta: 1.0,
            mode: SupervisionMode::Unsupervised,
            objective: Objective::FAbs,
            parametrization: Parametrization::Direct,
            backtracking: true,
            shrink: 0.5,
            grow: 1.5,
            sufficient_decrease: 1e-4,
            epsilon_mag: 1e-8,
            initial_step: 0.1,
            min_step_ratio: 1e-20,
            precondition: true,
            rel_tol: 1e-6,
            tol_window: 5,
            abs_tol: 1e-8,
            min_active_s: 0.1,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        self.fcp.validate()?;
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(CtrError::config("solver.shrink must lie in (0, 1)"));
        }
        if !(self.grow >= 1.0 && self.grow.is_finite()) {
            return Err(CtrError::config("solver.grow must be >= 1"));
        }
        if !(self.sufficient_decrease >= 0.0 && self.sufficient_decrease < 1.0) {
            return Err(CtrError::config("solver.sufficient_decrease must lie in [0, 1)"));
        }
        if !pos(self.epsilon_mag) {
            return Err(CtrError::config("solver.epsilon_mag must be positive"));
        }
        if !pos(self.initial_step) || !pos(self.min_step_ratio) {
            return Err(CtrError::config("solver step sizes must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CtrError::config("loss.beta must be >= 0"));
        }
        if self.tol_window == 0 {
            return Err(CtrError::config("solver.tol_window must be at least 1"));
        }
        Ok(())
    }
}

/// Optimisation state for one scene or block.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorState {
    /// Current estimates `Ẑ(c)`; in mask mode these are `M(c) * Y_c`.
    pub estimates: Vec<Spectrogram>,
    /// Mask mode only.
    pub masks: Option<Vec<Array2<Complex64>>>,
    pub parametrization: Parametrization,
    /// Current step length; zero before the first step.
    pub step_size: f64,
    pub iteration: usize,
    pub loss_trace: Vec<LossBreakdown>,
    pub status: SolveStatus,
    initial_step: f64,
    muted_step_size: f64,
    muted_initial_step: f64,
}

impl SeparatorState {
    fn variables(&self) -> Vec<Array2<Complex64>> {
        match &self.masks {
            Some(m) => m.clone(),
            None => self.estimates.iter().map(|s| s.values.clone()).collect(),
        }
    }

    fn with_variables(&self, vars: Vec<Array2<Complex64>>, mixtures: &MixtureSet) -> Self {
        let mut next = self.clone();
        match self.parametrization {
            Parametrization::Direct => {
                next.estimates = self
                    .estimates
                    .iter()
                    .zip(vars)
                    .map(|(s, v)| s.with_values(v))
                    .collect();
            }
            Parametrization::Mask => {
                next.estimates = estimates_from_masks(&vars, mixtures);
                next.masks = Some(vars);
            }
        }
        next
    }
}

fn estimates_from_masks(masks: &[Array2<Complex64>], mixtures: &MixtureSet) -> Vec<Spectrogram> {
    masks
        .iter()
        .zip(&mixtures.close_talk)
        .map(|(m, y)| y.with_values(m * &y.values))
        .collect()
}

/// Starts every estimate at its close-talk mixture (unit masks in mask mode).
pub fn init_estimates(mixtures: &MixtureSet, cfg: &SolveConfig) -> SeparatorState {
    let masks = match cfg.parametrization {
        Parametrization::Direct => None,
        Parametrization::Mask => Some(
            mixtures
                .close_talk
                .iter()
                .map(|y| Array2::from_elem(y.values.dim(), Complex64::new(1.0, 0.0)))
                .collect::<Vec<_>>(),
        ),
    };
    let estimates = match &masks {
        Some(m) => estimates_from_masks(m, mixtures),
        None => mixtures.close_talk.clone(),
    };
    SeparatorState {
        estimates,
        masks,
        parametrization: cfg.parametrization,
        step_size: 0.0,
        iteration: 0,
        loss_trace: Vec::new(),
        status: SolveStatus::Running,
        initial_step: 0.0,
        muted_step_size: 0.0,
        muted_initial_step: 0.0,
    }
}

fn weights_for(mixtures: &MixtureSet, cfg: &SolveConfig) -> Result<Vec<WeightField>> {
    mixtures.receivers().map(|y| fcp_weights(y, cfg.fcp.xi)).collect()
}

fn muted_estimates(estimates: &[Spectrogram], weak: Option<&WeakContext>) -> Result<Vec<Spectrogram>> {
    match weak {
        None => Ok(estimates.to_vec()),
        Some(w) => estimates.iter().zip(&w.masks).map(|(z, m)| m.apply(z)).collect(),
    }
}

/// Closed-form filters for every (receiver, speaker) pair from the current
/// estimates, muted first when activity is supplied.
pub fn filter_step(
    state: &SeparatorState,
    mixtures: &MixtureSet,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
) -> Result<FilterEstimate> {
    let weights = weights_for(mixtures, cfg)?;
    let est = muted_estimates(&state.estimates, weak)?;
    let ys: Vec<Spectrogram> = mixtures.receivers().cloned().collect();
    estimate_all(&est, &ys, &weights, &cfg.fcp)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the reconstruction distance with respect to `Ŷ`, as
/// `dL/dRe + i dL/dIm`.
fn distance_gradient(
    obj: Objective,
    y: &Array2<Complex64>,
    y_hat: &Array2<Complex64>,
    eps: f64,
) -> Result<Array2<Complex64>> {
    match obj {
        Objective::FAbs => {
            let den: f64 = y.iter().map(|z| z.norm()).sum();
            if den == 0.0 {
                return Err(CtrError::data("all-zero mixture"));
            }
            let mut g = Array2::zeros(y.dim());
            Zip::from(&mut g).and(y).and(y_hat).for_each(|g, &a, &b| {
                let d = a - b;
                let mb = b.norm();
                let m = (mb * mb + eps * eps).sqrt();
                *g = (Complex64::new(-sign(d.re), -sign(d.im)) - b * (sign(a.norm() - mb) / m)) / den;
            });
            Ok(g)
        }
        Objective::L2 => {
            let den: f64 = y.iter().map(|z| z.norm_sqr()).sum();
            if den == 0.0 {
                return Err(CtrError::data("all-zero mixture"));
            }
            Ok((y - y_hat).mapv(|d| d * (-2.0 / den)))
        }
    }
}

fn sa_gradient(z: &[f64], y: &[f64], d: &[bool]) -> Vec<f64> {
    let n = d.len();
    let silent = d.iter().filter(|&&a| !a).count();
    let den: f64 = y.iter().zip(d).filter(|(_, &a)| !a).map(|(v, _)| v.abs()).sum();
    if silent == 0 || den == 0.0 {
        return vec![0.0; n];
    }
    let scale = silent as f64 / n as f64 / den;
    z.iter()
        .zip(d)
        .map(|(v, &a)| if a { 0.0 } else { sign(*v) * scale })
        .collect()
}

/// Gradient of the total loss with respect to the estimates `Ẑ(c)`, with
/// the filters held fixed.
pub fn estimate_gradient(
    estimates: &[Spectrogram],
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
) -> Result<Vec<Array2<Complex64>>> {
    let alpha = cfg.alpha.resolve(mixtures.num_far())?;
    let c_n = mixtures.num_speakers();
    let muted = muted_estimates(estimates, weak)?;
    let refs: Vec<&Array2<Complex64>> = muted.iter().map(|s| &s.values).collect();
    let mut grads: Vec<Array2<Complex64>> =
        estimates.iter().map(|s| Array2::zeros(s.values.dim())).collect();
    for (r, y) in mixtures.receivers().enumerate() {
        let rec = reconstruct(r, &refs, filters)?;
        let w = if r < c_n { 1.0 } else { alpha };
        if w == 0.0 {
            continue;
        }
        let mut gy = distance_gradient(cfg.objective, &y.values, &rec, cfg.epsilon_mag)?;
        if w != 1.0 {
            gy.mapv_inplace(|z| z * w);
        }
        for (c, g) in grads.iter_mut().enumerate() {
            if filters.is_anchor(r, c) {
                *g += &gy;
            } else {
                filters.require(r, c)?.accumulate_adjoint(&gy, g);
            }
        }
    }
    if let Some(wk) = weak {
        for (c, g) in grads.iter_mut().enumerate() {
            let mask = &wk.masks[c];
            for (t, mut row) in g.rows_mut().into_iter().enumerate() {
                if mask.factor(t) == 0.0 {
                    row.fill(Complex64::new(0.0, 0.0));
                }
            }
            if wk.beta > 0.0 {
                let z = &estimates[c];
                let zt = istft(z, z.original_length)?;
                let gt = sa_gradient(&zt.samples, &wk.close_talk[c].samples, &wk.activity[c]);
                let gs = istft_adjoint(&gt, &z.geometry);
                g.scaled_add(Complex64::new(wk.beta, 0.0), &gs);
            }
        }
    }
    Ok(grads)
}

/// Gradient with respect to the optimisation variables of `state`.
fn variable_gradient(
    state: &SeparatorState,
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
) -> Result<Vec<Array2<Complex64>>> {
    let g = estimate_gradient(&state.estimates, mixtures, filters, cfg, weak)?;
    Ok(match state.parametrization {
        Parametrization::Direct => g,
        Parametrization::Mask => g
            .into_iter()
            .zip(&mixtures.close_talk)
            .map(|(g, y)| {
                let mut out = g;
                Zip::from(&mut out).and(&y.values).for_each(|o, yv| *o *= yv.conj());
                out
            })
            .collect(),
    })
}

/// Diagonal preconditioner per speaker: the mixture magnitude with a small
/// floor for direct estimates, its inverse-like counterpart for masks.
fn preconditioner(mixtures: &MixtureSet, cfg: &SolveConfig) -> Option<Vec<Array2<f64>>> {
    if !cfg.precondition {
        return None;
    }
    Some(
        mixtures
            .close_talk
            .iter()
            .map(|y| {
                let mag = y.values.mapv(|z| z.norm());
                let floor = 1e-3 * mag.iter().fold(0.0f64, |a, &b| a.max(b));
                let floor = if floor > 0.0 { floor } else { 1.0 };
                match cfg.parametrization {
                    Parametrization::Direct => mag.mapv(|m| m + floor),
                    Parametrization::Mask => mag.mapv(|m| 1.0 / (m + floor)),
                }
            })
            .collect(),
    )
}

fn norm_sq(xs: &[Array2<Complex64>]) -> f64 {
    xs.iter().flat_map(|a| a.iter()).map(|z| z.norm_sqr()).sum()
}

fn loss_of(
    state: &SeparatorState,
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
) -> Result<LossBreakdown> {
    total_loss(&state.estimates, mixtures, filters, cfg.alpha, cfg.objective, weak)
}

/// Outcome of one source step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SeparatorState,
    pub loss: LossBreakdown,
    pub accepted: bool,
}

/// Gradient and search direction restricted to the frames muted for each
/// speaker.
fn restrict_to_muted(
    grad: &[Array2<Complex64>],
    dir: &[Array2<Complex64>],
    weak: &WeakContext,
) -> (Vec<Array2<Complex64>>, Vec<Array2<Complex64>>) {
    let keep = |xs: &[Array2<Complex64>]| -> Vec<Array2<Complex64>> {
        xs.iter()
            .zip(&weak.masks)
            .map(|(x, m)| {
                let mut out = x.clone();
                for (t, mut row) in out.rows_mut().into_iter().enumerate() {
                    if m.factor(t) != 0.0 {
                        row.fill(Complex64::new(0.0, 0.0));
                    }
                }
                out
            })
            .collect()
    };
    (keep(grad), keep(dir))
}

fn precondition(grad: &[Array2<Complex64>], precond: Option<&[Array2<f64>]>) -> Vec<Array2<Complex64>> {
    match precond {
        Some(p) => grad.iter().zip(p).map(|(g, d)| g * &d.mapv(|v| Complex64::new(v, 0.0))).collect(),
        None => grad.to_vec(),
    }
}

fn slope(grad: &[Array2<Complex64>], dir: &[Array2<Complex64>]) -> f64 {
    grad.iter()
        .zip(dir)
        .flat_map(|(g, d)| g.iter().zip(d.iter()))
        .map(|(g, d)| (g.conj() * d).re)
        .sum()
}

struct Search<'a> {
    state: &'a SeparatorState,
    mixtures: &'a MixtureSet,
    filters: &'a FilterEstimate,
    cfg: &'a SolveConfig,
    weak: Option<&'a WeakContext>,
    current: &'a LossBreakdown,
}

impl Search<'_> {
    /// Backtracking line search along `-dir` from step length `s` (zero:
    /// derive from the variable scale). Returns the accepted state, its loss,
    /// the step length used and the derived initial length (NaN if `s` was
    /// given), or `None` once the step falls below its floor.
    fn run(
        &self,
        grad: &[Array2<Complex64>],
        dir: &[Array2<Complex64>],
        s: f64,
    ) -> Result<Option<(SeparatorState, LossBreakdown, f64, f64)>> {
        let cfg = self.cfg;
        let slope = slope(grad, dir);
        if !(slope > 0.0) {
            return Ok(None);
        }
        let vars = self.state.variables();
        let (mut s, s0) = if s == 0.0 {
            let vn = norm_sq(&vars);
            let dn = norm_sq(dir);
            let s0 = cfg.initial_step * if vn > 0.0 { (vn / dn).sqrt() } else { 1.0 / dn.sqrt() };
            (s0, s0)
        } else {
            (s, f64::NAN)
        };
        loop {
            let cand_vars: Vec<Array2<Complex64>> = vars
                .iter()
                .zip(dir)
                .map(|(v, d)| {
                    let mut out = v.clone();
                    out.scaled_add(Complex64::new(-s, 0.0), d);
                    out
                })
                .collect();
            let cand = self.state.with_variables(cand_vars, self.mixtures);
            let l = loss_of(&cand, self.mixtures, self.filters, cfg, self.weak)?;
            let ok = l.total.is_finite()
                && (!cfg.backtracking
                    || l.total <= self.current.total - cfg.sufficient_decrease * s * slope);
            if ok {
                return Ok(Some((cand, l, s, s0)));
            }
            s *= cfg.shrink;
            let init = if s0.is_nan() { self.state.initial_step } else { s0 };
            if s < init * cfg.min_step_ratio {
                return Ok(None);
            }
        }
    }
}

fn step_internal(
    state: &SeparatorState,
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
    current: &LossBreakdown,
    precond: Option<&[Array2<f64>]>,
) -> Result<StepOutcome> {
    let grad = variable_gradient(state, mixtures, filters, cfg, weak)?;
    let dir = precondition(&grad, precond);
    if !(slope(&grad, &dir) > 0.0) {
        let mut next = state.clone();
        next.status = SolveStatus::Stationary;
        return Ok(StepOutcome {
            state: next,
            loss: current.clone(),
            accepted: false,
        });
    }
    let grow = |s: f64| if cfg.backtracking { s * cfg.grow } else { s };
    let search = Search {
        state,
        mixtures,
        filters,
        cfg,
        weak,
        current,
    };
    let mut best: Option<(SeparatorState, LossBreakdown)> = None;
    if let Some((mut out, loss, s, s0)) = search.run(&grad, &dir, state.step_size)? {
        out.step_size = grow(s);
        if !s0.is_nan() {
            out.initial_step = s0;
        }
        best = Some((out, loss));
    }
    // Muted frames only enter the activity term, whose scale differs from
    // the constraint terms that set the joint step length; they get a
    // second step of their own.
    if let Some(wk) = weak.filter(|w| w.beta > 0.0) {
        let (base, base_loss) = match &best {
            Some((st, l)) => (st.clone(), l.clone()),
            None => (state.clone(), current.clone()),
        };
        let (grad, dir) = if best.is_some() {
            let g = variable_gradient(&base, mixtures, filters, cfg, weak)?;
            let d = precondition(&g, precond);
            (g, d)
        } else {
            (grad, dir)
        };
        let (g, d) = restrict_to_muted(&grad, &dir, wk);
        let muted = SeparatorState {
            initial_step: base.muted_initial_step,
            ..base.clone()
        };
        let search = Search {
            state: &muted,
            current: &base_loss,
            ..search
        };
        if let Some((mut out, loss, s, s0)) = search.run(&g, &d, base.muted_step_size)? {
            out.muted_step_size = grow(s);
            if !s0.is_nan() {
                out.muted_initial_step = s0;
            }
            out.initial_step = base.initial_step;
            best = Some((out, loss));
        }
    }
    if let Some((mut out, loss)) = best {
        out.status = SolveStatus::Running;
        return Ok(StepOutcome {
            state: out,
            loss,
            accepted: true,
        });
    }
    log::warn!("step size underflow during backtracking");
    let mut next = state.clone();
    next.status = SolveStatus::StepUnderflow;
    Ok(StepOutcome {
        state: next,
        loss: current.clone(),
        accepted: false,
    })
}

/// One preconditioned descent step on the estimates with `filters` fixed.
/// With backtracking on, the step is accepted only under sufficient
/// decrease; if the step length underflows the state comes back unchanged
/// with status [`SolveStatus::StepUnderflow`]. In weak mode a second step
/// follows on the muted frames alone.
pub fn source_step(
    state: &SeparatorState,
    mixtures: &MixtureSet,
    filters: &FilterEstimate,
    cfg: &SolveConfig,
    weak: Option<&WeakContext>,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let current = loss_of(state, mixtures, filters, cfg, weak)?;
    let precond = preconditioner(mixtures, cfg);
    step_internal(state, mixtures, filters, cfg, weak, &current, precond.as_deref())
}

fn with_iteration(e: CtrError, it: usize) -> CtrError {
    match e {
        CtrError::Numerical { context, message } => {
            CtrError::numerical(format!("iteration {it}, {context}"), message)
        }
        other => other,
    }
}

fn converged(trace: &[LossBreakdown], cfg: &SolveConfig) -> bool {
    let last = trace.last().map_or(f64::INFINITY, |l| l.total);
    if last <= cfg.abs_tol {
        return true;
    }
    if trace.len() <= cfg.tol_window {
        return false;
    }
    let prev = trace[trace.len() - 1 - cfg.tol_window].total;
    (prev - last).abs() <= cfg.rel_tol * prev.abs()
}

fn weak_context(
    mixtures: &MixtureSet,
    activity: Option<&[Vec<bool>]>,
    cfg: &SolveConfig,
) -> Result<Option<WeakContext>> {
    match cfg.mode {
        SupervisionMode::Unsupervised => Ok(None),
        SupervisionMode::Weak => {
            let a = activity.ok_or_else(|| {
                CtrError::config("weakly supervised mode needs speaker activity")
            })?;
            WeakContext::new(a.to_vec(), mixtures, cfg.min_active_s, cfg.beta).map(Some)
        }
    }
}

/// Loss of fixed estimates with freshly estimated filters, as the solver
/// scores its starting point.
pub fn evaluate_estimates(
    estimates: &[Spectrogram],
    mixtures: &MixtureSet,
    activity: Option<&[Vec<bool>]>,
    cfg: &SolveConfig,
) -> Result<(LossBreakdown, FilterEstimate)> {
    cfg.validate()?;
    if estimates.len() != mixtures.num_speakers()
        || estimates.iter().zip(&mixtures.close_talk).any(|(a, b)| !a.same_shape(b))
    {
        return Err(CtrError::dim("estimates do not match the close-talk mixtures"));
    }
    let weak = weak_context(mixtures, activity, cfg)?;
    let ys: Vec<Spectrogram> = mixtures.receivers().cloned().collect();
    let weights = weights_for(mixtures, cfg)?;
    let est = muted_estimates(estimates, weak.as_ref())?;
    let filters = estimate_all(&est, &ys, &weights, &cfg.fcp)?;
    let loss = total_loss(estimates, mixtures, &filters, cfg.alpha, cfg.objective, weak.as_ref())?;
    Ok((loss, filters))
}

/// Runs alternating filter and source steps from the mixture
/// initialisation. `activity` (per speaker, per sample) is required in
/// weakly supervised mode and ignored otherwise.
pub fn solve(
    mixtures: &MixtureSet,
    activity: Option<&[Vec<bool>]>,
    cfg: &SolveConfig,
) -> Result<SeparatorState> {
    cfg.validate()?;
    cfg.alpha.resolve(mixtures.num_far())?;
    let weak = weak_context(mixtures, activity, cfg)?;
    let weak = weak.as_ref();
    let precond = preconditioner(mixtures, cfg);
    let mut state = init_estimates(mixtures, cfg);
    let mut filters = filter_step(&state, mixtures, cfg, weak).map_err(|e| with_iteration(e, 0))?;
    let mut current = loss_of(&state, mixtures, &filters, cfg, weak)?;
    state.loss_trace.push(current.clone());
    if converged(&state.loss_trace, cfg) {
        state.status = SolveStatus::Converged;
        return Ok(state);
    }
    for it in 1..=cfg.max_iters {
        state.iteration = it;
        let fresh = filter_step(&state, mixtures, cfg, weak).map_err(|e| with_iteration(e, it))?;
        let l = loss_of(&state, mixtures, &fresh, cfg, weak)?;
        if !cfg.backtracking || l.total <= current.total {
            filters = fresh;
            current = l;
        }
        let out = step_internal(&state, mixtures, &filters, cfg, weak, &current, precond.as_deref())
            .map_err(|e| with_iteration(e, it))?;
        let trace = std::mem::take(&mut state.loss_trace);
        state = out.state;
        state.loss_trace = trace;
        state.iteration = it;
        if !state.estimates.iter().all(|s| s.is_finite()) {
            return Err(CtrError::numerical(
                format!("iteration {it}"),
                "non-finite source estimate",
            ));
        }
        current = out.loss;
        state.loss_trace.push(current.clone());
        if !out.accepted {
            log::debug!("solver stopped at iteration {it}: {:?}", state.status);
            return Ok(state);
        }
        if converged(&state.loss_trace, cfg) {
            state.status = SolveStatus::Converged;
            return Ok(state);
        }
    }
    state.status = SolveStatus::MaxIterations;
    Ok(state)
}
