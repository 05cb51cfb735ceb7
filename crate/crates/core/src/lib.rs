//! Cross-talk reduction for sessions recorded with close-talk and far-field
//! microphones.
//!
//! Every close-talk microphone is assumed to capture its wearer unfiltered
//! plus convolutive images of the other speakers. The separator alternates a
//! closed-form per-frequency filter regression with descent steps on the
//! source estimates, so that the estimates and their filtered images add up
//! to every recorded mixture.

pub mod cli;
pub mod error;
pub mod fcp;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod signal;
pub mod solver;
pub mod subband;

pub use error::{CtrError, Result};
pub use fcp::{estimate_filter, fcp_image, fcp_weights, FcpConfig, FilterEstimate, WeightField};
pub use loss::{
    f_div, mc_loss_close_talk, mc_loss_far_field, mc_total, mute, sa_loss, total_loss,
    ActivityMask, Alpha, LossBreakdown, MixtureSet, Objective,
};
pub use metrics::{permute_resolve, sdr_proj, si_sdr, ScoreReport};
pub use signal::{istft, stft, Spectrogram, StftConfig, StftGeometry, Waveform};
pub use solver::{solve, SeparatorState, SolveConfig};
pub use subband::SubbandFilter;
