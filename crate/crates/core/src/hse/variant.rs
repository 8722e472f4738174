use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::HseError;

/// How embedding tokens interact with support features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdiKind {
    /// Broadcast addition.
    Sd1,
    /// Broadcast multiplication.
    Sd2,
    /// Token extension plus self-attention.
    Sd3,
    Off,
}

/// How the enhancement coefficient modulates prototype and query features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcmKind {
    /// Coefficient only.
    Gc1,
    /// Coefficient plus residual embedding term.
    Gc2,
    Off,
}

/// Number of appended embedding tokens: one per column, or a single one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdiTokens {
    #[default]
    Width,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantConfig {
    pub sdi: SdiKind,
    pub gcm: GcmKind,
}

impl VariantConfig {
    pub const BASELINE: VariantConfig = VariantConfig {
        sdi: SdiKind::Off,
        gcm: GcmKind::Off,
    };
    pub const FULL: VariantConfig = VariantConfig {
        sdi: SdiKind::Sd3,
        gcm: GcmKind::Gc2,
    };

    /// Baseline, +SDI, +GCM, full: the component ablation rows.
    pub fn component_ablation() -> Vec<VariantConfig> {
        vec![
            Self::BASELINE,
            VariantConfig {
                sdi: SdiKind::Sd3,
                gcm: GcmKind::Off,
            },
            VariantConfig {
                sdi: SdiKind::Off,
                gcm: GcmKind::Gc2,
            },
            Self::FULL,
        ]
    }

    /// Row label used in ablation tables.
    pub fn label(&self) -> String {
        match (self.sdi, self.gcm) {
            (SdiKind::Off, GcmKind::Off) => "Baseline".into(),
            (SdiKind::Sd3, GcmKind::Off) => "Baseline+SDI".into(),
            (SdiKind::Off, GcmKind::Gc2) => "Baseline+GCM".into(),
            (SdiKind::Sd3, GcmKind::Gc2) => "Baseline+GCM+SDI".into(),
            _ => self.to_string(),
        }
    }
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for SdiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SdiKind::Sd1 => "sd1",
            SdiKind::Sd2 => "sd2",
            SdiKind::Sd3 => "sd3",
            SdiKind::Off => "off",
        })
    }
}

impl fmt::Display for GcmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GcmKind::Gc1 => "gc1",
            GcmKind::Gc2 => "gc2",
            GcmKind::Off => "off",
        })
    }
}

impl fmt::Display for VariantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.sdi, self.gcm)
    }
}

impl FromStr for SdiKind {
    type Err = HseError;
    fn from_str(s: &str) -> Result<Self, HseError> {
        match s.trim() {
            "sd1" => Ok(SdiKind::Sd1),
            "sd2" => Ok(SdiKind::Sd2),
            "sd3" => Ok(SdiKind::Sd3),
            "off" | "sdoff" => Ok(SdiKind::Off),
            o => Err(HseError::Argument(format!("unknown SDI kind {o:?}"))),
        }
    }
}

impl FromStr for GcmKind {
    type Err = HseError;
    fn from_str(s: &str) -> Result<Self, HseError> {
        match s.trim() {
            "gc1" => Ok(GcmKind::Gc1),
            "gc2" => Ok(GcmKind::Gc2),
            "off" | "gcoff" => Ok(GcmKind::Off),
            o => Err(HseError::Argument(format!("unknown GCM kind {o:?}"))),
        }
    }
}

/// Parses `"sd3,gc2"`-style pairs.
impl FromStr for VariantConfig {
    type Err = HseError;
    fn from_str(s: &str) -> Result<Self, HseError> {
        let (a, b) = s.split_once(',').ok_or_else(|| {
            HseError::Argument(format!("variant {s:?} is not of the form sdX,gcY"))
        })?;
        Ok(VariantConfig {
            sdi: a.parse()?,
            gcm: b.parse()?,
        })
    }
}

impl FromStr for SdiTokens {
    type Err = HseError;
    fn from_str(s: &str) -> Result<Self, HseError> {
        match s {
            "W" | "w" | "width" => Ok(SdiTokens::Width),
            "1" | "single" => Ok(SdiTokens::Single),
            o => Err(HseError::Argument(format!("unknown SDI token mode {o:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_roundtrip() {
        for v in ["sd3,gc2", "off,off", "sd1,gc1", "sd2,off"] {
            let parsed: VariantConfig = v.parse().unwrap();
            assert_eq!(parsed.to_string(), v);
        }
        assert!("sd4,gc2".parse::<VariantConfig>().is_err());
        assert!("sd3".parse::<VariantConfig>().is_err());
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<String> = VariantConfig::component_ablation()
            .iter()
            .map(|v| v.label())
            .collect();
        assert_eq!(
            labels,
            [
                "Baseline",
                "Baseline+SDI",
                "Baseline+GCM",
                "Baseline+GCM+SDI"
            ]
        );
    }
}
