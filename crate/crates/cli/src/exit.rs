//! Exit codes and the single `lw-error:` line printed on failure.

use std::fmt;

use lw_core::Error as CoreError;
use serde::Serialize;

pub const USAGE: u8 = 2;
pub const PIPELINE: u8 = 3;
pub const OPTIMIZATION: u8 = 4;
pub const PORT_BUSY: u8 = 5;

/// Bad flags, specs or arguments.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Names the command stage an error escaped from.
#[derive(Debug)]
pub struct Stage(pub &'static str);

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

#[derive(Debug)]
pub struct PortBusy(pub String);

impl fmt::Display for PortBusy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} is already in use", self.0)
    }
}

impl std::error::Error for PortBusy {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Wraps a core failure with the command stage it happened in.
pub fn staged(stage: &'static str) -> impl FnOnce(CoreError) -> anyhow::Error {
    move |e| anyhow::Error::new(e).context(Stage(stage))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub stage: Option<String>,
    pub message: String,
}

impl Failure {
    pub fn classify(err: &anyhow::Error) -> Self {
        let causes: Vec<&(dyn std::error::Error + 'static)> = err.chain().collect();
        let core = || causes.iter().filter_map(|c| c.downcast_ref::<CoreError>());
        let any = |f: &dyn Fn(&CoreError) -> bool| core().any(f);

        let (code, kind) = if causes.iter().any(|c| c.is::<PortBusy>()) {
            (PORT_BUSY, "port-busy")
        } else if causes.iter().any(|c| c.is::<Usage>()) {
            (USAGE, "usage")
        } else if any(&|e| matches!(e, CoreError::Divergence { .. })) {
            (OPTIMIZATION, "divergence")
        } else if any(&|e| matches!(e, CoreError::Contract(_))) {
            (OPTIMIZATION, "contract")
        } else if err.downcast_ref::<Stage>().is_none() && any(&|e| matches!(e, CoreError::Spec(_) | CoreError::Argument(_))) {
            (USAGE, "usage")
        } else {
            (PIPELINE, "pipeline")
        };
        // The innermost named stage is the most specific one.
        let stage = causes
            .iter()
            .rev()
            .filter_map(|c| c.downcast_ref::<CoreError>())
            .find_map(|e| e.stage())
            .map(str::to_string)
            .or_else(|| err.downcast_ref::<Stage>().map(|s| s.0.to_string()));
        let message = format!("{err:#}").replace(['\n', '\r'], " ");
        Failure {
            code,
            kind,
            stage,
            message,
        }
    }

    /// `lw-error: {json}` on one line.
    pub fn line(&self) -> String {
        format!("lw-error: {}", serde_json::to_string(self).expect("plain struct"))
    }
}
