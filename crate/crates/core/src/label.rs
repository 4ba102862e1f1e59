use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary factuality verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    True,
    False,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::True => "True",
            Label::False => "False",
        }
    }

    pub fn from_bool(value: bool) -> Self {
        if value {
            Label::True
        } else {
            Label::False
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Label::True => Label::False,
            Label::False => Label::True,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "true" => Ok(Label::True),
            "false" => Ok(Label::False),
            other => Err(format!("not a verdict label: {other:?}")),
        }
    }
}
