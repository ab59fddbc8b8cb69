use std::time::{SystemTime, UNIX_EPOCH};

use bilevel_adapt::problems::ProblemSpec;
use bilevel_adapt::SolverConfig;
use serde::{Deserialize, Serialize};

/// Version of the artifact formats written by this tool.
pub const FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_seconds: f64,
    pub wall_seconds: f64,
}

impl WallClock {
    pub fn now() -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            started_unix_seconds: started,
            wall_seconds: 0.0,
        }
    }
}

/// Everything needed to rerun a solve: the config and the full problem,
/// including generated matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: SolverConfig,
    pub problem: ProblemSpec,
    pub wall_clock: WallClock,
}

impl RunManifest {
    pub fn new(seed: u64, config: SolverConfig, problem: ProblemSpec) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            problem,
            wall_clock: WallClock::now(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, bilevel_adapt::Error> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(bilevel_adapt::Error::Format(format!(
                "manifest version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if let Some(c) = &m.problem.constants {
            c.validate()?;
        }
        m.config.validate()?;
        Ok(m)
    }
}
