use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth class; malware is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign = 0,
    Malware = 1,
}

impl Label {
    pub fn as_f32(self) -> f32 {
        self as u8 as f32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malware => "malware",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "benign" | "0" => Some(Label::Benign),
            "malware" | "1" => Some(Label::Malware),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One executable's API-call trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiTrace {
    pub id: String,
    pub label: Label,
    #[serde(rename = "api_calls")]
    pub calls: Vec<String>,
    #[serde(default)]
    pub source: String,
}

impl ApiTrace {
    pub fn new(id: impl Into<String>, label: Label, calls: Vec<String>, source: impl Into<String>) -> Result<Self> {
        let trace = ApiTrace {
            id: id.into(),
            label,
            calls,
            source: source.into(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.calls.is_empty() {
            return Err(Error::EmptyTrace(self.id.clone()));
        }
        if let Some(bad) = self
            .calls
            .iter()
            .find(|c| c.is_empty() || c.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidArgument(format!(
                "trace `{}` has malformed call name {bad:?}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }
}
