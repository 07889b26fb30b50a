//! Domain metadata shared by manifests and generators.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceType {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Low,
    Medium,
    Tall,
    Any,
}

/// Table-level description of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub name: String,
    pub sample_count: usize,
    pub source_type: SourceType,
    pub category: Category,
    /// Typical plant height in meters; `None` when unspecified.
    pub height_m: Option<f64>,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $(Self::$variant => $text,)+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => bail!(Argument, "unknown {} '{other}'", stringify!($ty)),
                }
            }
        }
    };
}

text_enum!(SourceType { Synthetic => "synthetic", Real => "real" });
text_enum!(Category { Low => "low", Medium => "medium", Tall => "tall", Any => "any" });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enums_parse_case_insensitively() {
        assert_eq!("Synthetic".parse::<SourceType>().unwrap(), SourceType::Synthetic);
        assert_eq!(" TALL".parse::<Category>().unwrap(), Category::Tall);
        assert!("huge".parse::<Category>().is_err());
    }
}
