//! A self-contained run description: program, both lists and entry point.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exec::synthesize_identity;
use crate::identity::{IdentityError, IdentityTable};
use crate::instrument::{instrument, InstrumentError, InstrumentedProgram};
use crate::program::{parse_lists, ListError, Lists, Program};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub program: Program,
    /// UntrustedList contents.
    #[serde(default)]
    pub untrusted: String,
    /// SensitiveList contents.
    #[serde(default)]
    pub sensitive: String,
    #[serde(default = "default_entry")]
    pub entry: String,
    /// Image map contents; synthesized from the program when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_map: Option<String>,
}

fn default_entry() -> String {
    "main".to_string()
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Lists(#[from] ListError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error("image map: {0}")]
    Identity(#[from] IdentityError),
    #[error("image map has no span for `{0}`")]
    Unmapped(String),
}

impl Scenario {
    pub fn lists(&self) -> Result<Lists, ListError> {
        parse_lists(&self.untrusted, &self.sensitive)
    }

    pub fn instrument(&self) -> Result<InstrumentedProgram, ScenarioError> {
        Ok(instrument(&self.program, &self.lists()?)?)
    }

    /// Identity table from the image map, or one synthesized for `program`.
    pub fn identity(
        &self,
        program: &InstrumentedProgram,
    ) -> Result<Arc<IdentityTable>, ScenarioError> {
        match &self.image_map {
            Some(map) => identity_from_map(map, program),
            None => Ok(synthesize_identity(program)),
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("scenario serializes");
        out.push('\n');
        out
    }

    pub fn from_json(source: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(source)
    }
}

/// Loads an image map and checks it covers every described function.
pub fn identity_from_map(
    map: &str,
    program: &InstrumentedProgram,
) -> Result<Arc<IdentityTable>, ScenarioError> {
    let table = IdentityTable::load_image_map(map)?;
    if let Some(f) = program
        .functions
        .iter()
        .find(|f| table.id_of(&f.name).is_none())
    {
        return Err(ScenarioError::Unmapped(f.name.clone()));
    }
    Ok(Arc::new(table))
}
