use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed time sequence; the unit that gets clustered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Segment {
    pub fn new(id: impl Into<String>, t: Vec<f64>, y: Vec<f64>, label: Option<String>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            t,
            y,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidSegment {
            id: self.id.clone(),
            reason,
        };
        if self.t.len() != self.y.len() {
            return Err(fail(format!("|t| = {} but |y| = {}", self.t.len(), self.y.len())));
        }
        if self.t.len() < 2 {
            return Err(fail(format!("needs at least 2 samples, got {}", self.t.len())));
        }
        if self.t.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(fail("contains non-finite values".into()));
        }
        if let Some(i) = self.t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(fail(format!(
                "time stamps not strictly increasing at sample {} ({} then {})",
                i + 1,
                self.t[i],
                self.t[i + 1]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }
}
