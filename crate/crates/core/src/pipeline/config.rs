use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BlockPlan;
use crate::error::{CtrError, Result};
use crate::fcp::FcpConfig;
use crate::loss::{Alpha, Objective};
use crate::scene::SceneConfig;
use crate::signal::StftConfig;
use crate::solver::{Parametrization, SolveConfig, SupervisionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: Alpha,
    pub beta: f64,
    pub min_active_s: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        LossSection {
            alpha: s.alpha,
            beta: s.beta,
            min_active_s: s.min_active_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_iters: usize,
    pub mode: SupervisionMode,
    pub objective: Objective,
    pub parametrization: Parametrization,
    pub backtracking: bool,
    pub shrink: f64,
    pub grow: f64,
    pub sufficient_decrease: f64,
    pub epsilon_mag: f64,
    pub initial_step: f64,
    pub min_step_ratio: f64,
    pub precondition: bool,
    pub rel_tol: f64,
    pub tol_window: usize,
    pub abs_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        SolverSection {
            max_iters: s.max_iters,
            mode: s.mode,
            objective: s.objective,
            parametrization: s.parametrization,
            backtracking: s.backtracking,
            shrink: s.shrink,
            grow: s.grow,
            sufficient_decrease: s.sufficient_decrease,
            epsilon_mag: s.epsilon_mag,
            initial_step: s.initial_step,
            min_step_ratio: s.min_step_ratio,
            precondition: s.precondition,
            rel_tol: s.rel_tol,
            tol_window: s.tol_window,
            abs_tol: s.abs_tol,
        }
    }
}

/// Contents of a TOML configuration file. Every section and key is
/// optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub stft: StftConfig,
    pub fcp: FcpConfig,
    pub loss: LossSection,
    pub solver: SolverSection,
    pub block: BlockPlan,
    pub scene: SceneConfig,
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CtrError::config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CtrError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text)
            .map_err(|e| CtrError::config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn solve_config(&self) -> SolveConfig {
        let s = &self.solver;
        SolveConfig {
            max_iters: s.max_iters,
            fcp: self.fcp,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            mode: s.mode,
            objective: s.objective,
            parametrization: s.parametrization,
            backtracking: s.backtracking,
            shrink: s.shrink,
            grow: s.grow,
            sufficient_decrease: s.sufficient_decrease,
            epsilon_mag: s.epsilon_mag,
            initial_step: s.initial_step,
            min_step_ratio: s.min_step_ratio,
            precondition: s.precondition,
            rel_tol: s.rel_tol,
            tol_window: s.tol_window,
            abs_tol: s.abs_tol,
            min_active_s: self.loss.min_active_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = AppConfig::from_toml_str("").unwrap();
        assert_eq!(c, AppConfig::default());
        assert_eq!(c.solve_config(), SolveConfig::default());
    }

    #[test]
    fn keys_are_read() {
        let c = AppConfig::from_toml_str(
            r#"
            seed = 9
            [stft]
            win_ms = 32
            hop_ms = 16
            [fcp]
            past_taps = 5
            future_taps = 1
            xi = 0.01
            diag_load = 0.0
            [loss]
            alpha = 0.5
            beta = 2.0
            [solver]
            max_iters = 7
            mode = "weak"
            objective = "l2"
            [block]
            len_s = 4.0
            context_s = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.stft.win_ms, 32.0);
        let s = c.solve_config();
        assert_eq!((s.fcp.past_taps, s.fcp.future_taps), (5, 1));
        assert_eq!(s.alpha, Alpha::Value(0.5));
        assert_eq!(s.mode, SupervisionMode::Weak);
        assert_eq!(s.objective, Objective::L2);
        assert_eq!(c.block.len_s, 4.0);
        let c = AppConfig::from_toml_str("[loss]\nalpha = \"1/P\"").unwrap();
        assert_eq!(c.loss.alpha, Alpha::InverseP);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1", "[fcp]\ntaps = 3", "[nonsense]\n", "[block]\nlen = 3.0"] {
            assert!(matches!(AppConfig::from_toml_str(text), Err(CtrError::Config(_))), "{text}");
        }
    }
}
