//! Line-delimited JSON on stderr.

use std::path::PathBuf;
use std::time::Instant;

use seqloc::Error;
use serde_json::{json, Map, Value};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_STAGE: u8 = 3;

pub fn event(level: &str, event: &str, fields: Value) {
    let mut obj = Map::new();
    obj.insert("level".into(), level.into());
    obj.insert("event".into(), event.into());
    if let Value::Object(f) = fields {
        obj.extend(f);
    }
    eprintln!("{}", Value::Object(obj));
}

pub fn info(name: &str, fields: Value) {
    event("info", name, fields);
}

#[derive(Debug)]
pub struct Failure {
    pub stage: String,
    pub kind: &'static str,
    pub message: String,
    pub path: Option<PathBuf>,
    pub code: u8,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::NonPositiveDepth(_) => "NonPositiveDepth",
        Error::NonPositiveDisparity(_) => "NonPositiveDisparity",
        Error::InvalidConfig(_) => "InvalidConfig",
        Error::CorruptDataset { .. } => "CorruptDataset",
        Error::BadGeometry(_) => "BadGeometry",
        Error::SequenceTooShort { .. } => "SequenceTooShort",
        Error::MissingVo { .. } => "MissingVo",
        Error::NoPath { .. } => "NoPath",
        Error::EmptyCorrespondences => "EmptyCorrespondences",
        Error::OutOfBounds { .. } => "OutOfBounds",
        Error::DegenerateGeometry(_) => "DegenerateGeometry",
        Error::NoConsensus(_) => "NoConsensus",
        Error::TooFewValidDepths(_) => "TooFewValidDepths",
        Error::NonFiniteGradient => "NonFiniteGradient",
        Error::Edge { source, .. } => kind(source),
        Error::Io { .. } => "Io",
    }
}

impl Failure {
    pub fn from_error(stage: &str, e: Error) -> Self {
        let (path, code) = match &e {
            Error::CorruptDataset { path, .. } | Error::Io { path, .. } => (Some(path.clone()), EXIT_USAGE),
            Error::InvalidConfig(_) => (None, EXIT_USAGE),
            _ => (None, EXIT_STAGE),
        };
        Self {
            stage: stage.into(),
            kind: kind(&e),
            message: e.to_string(),
            path,
            code,
        }
    }

    pub fn usage(message: &str) -> Self {
        Self {
            stage: "args".into(),
            kind: "Usage",
            message: message.into(),
            path: None,
            code: EXIT_USAGE,
        }
    }

    pub fn missing_dataset(path: PathBuf) -> Self {
        Self {
            stage: "dataset".into(),
            kind: "MissingDataset",
            message: format!("no dataset at {}; pass --simulate to generate one", path.display()),
            path: Some(path),
            code: EXIT_USAGE,
        }
    }

    pub fn emit(&self) {
        event(
            "error",
            "failed",
            json!({
                "stage": self.stage,
                "error": self.kind,
                "message": self.message,
                "path": self.path,
                "exit_code": self.code,
            }),
        );
    }
}

/// Runs one stage, logging its start and end.
pub fn stage<T>(name: &str, f: impl FnOnce() -> seqloc::Result<T>) -> Result<T, Failure> {
    info("stage_start", json!({ "stage": name }));
    let t0 = Instant::now();
    let r = f().map_err(|e| Failure::from_error(name, e))?;
    info("stage_done", json!({ "stage": name, "secs": t0.elapsed().as_secs_f64() }));
    Ok(r)
}
