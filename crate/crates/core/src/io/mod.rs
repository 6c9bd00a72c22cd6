pub mod checkpoint;
pub mod config;
pub mod instructions;
pub mod pnm;

pub use checkpoint::Checkpoint;
pub use config::{parse_attention, RunConfig};
pub use instructions::Instructions;
