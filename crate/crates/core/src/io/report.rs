use serde::{Deserialize, Serialize};

use super::config::RunConfig;

/// Bumped whenever a field of [`Report`] or its payloads changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Envelope of every JSON report; embeds the fully resolved config so a
/// report is reproducible on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub result: T,
}

impl<T> Report<T> {
    pub fn new(command: &str, config: &RunConfig, seed: u64, result: T) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            config: config.clone(),
            result,
        }
    }
}
