//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every weight bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MlpClassifier;

pub const FORMAT: &str = "fairlora-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    model: MlpClassifier,
}

pub fn to_json(model: &MlpClassifier) -> Result<String> {
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        model: model.clone(),
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_json(text: &str) -> Result<MlpClassifier> {
    let env: Envelope = serde_json::from_str(text)?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            env.format, env.version
        )));
    }
    Ok(env.model)
}

pub fn save(model: &MlpClassifier, path: impl AsRef<Path>) -> Result<()> {
    let mut text = to_json(model)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MlpClassifier> {
    from_json(&std::fs::read_to_string(path)?)
}
