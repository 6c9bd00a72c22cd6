//! Evaluation scores: text accuracy, background preservation, edit attempts and pairwise ratings.

pub mod elo;
pub mod region;
pub mod report;
pub mod text;

pub use elo::{elo, EloConfig, GameResult, Outcome};
pub use region::{attempt_rate, background_mask, crop_mae, region_mae_mse, ssim_region, ATTEMPT_THRESHOLD};
pub use report::{comparison_csv, score_sample, Aggregate, EvalReport, SampleScores};
pub use text::{cer, delta_cer, levenshtein};
