//! Prompt parameterisations: additive key/value prompts with progressive
//! fusion, and the token-insertion and pool baselines.

mod additive;
mod concat;
mod pool;

pub use additive::{apply_additive, apply_input_level, init_prompts, ppf_fuse, AddPoint, PromptSet};
pub use concat::{ConcatMode, ConcatPromptSet};
pub use pool::{cosine, pool_select, PromptPool};
