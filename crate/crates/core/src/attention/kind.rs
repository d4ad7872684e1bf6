use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionBase {
    Content,
    Relative,
    BiRelative,
    BiRope,
    Location,
    LocationS,
    Onestep,
    Monotonic,
    RelaxedMonotonic,
}

impl AttentionBase {
    pub const ALL: [AttentionBase; 9] = [
        AttentionBase::Content,
        AttentionBase::Relative,
        AttentionBase::BiRelative,
        AttentionBase::BiRope,
        AttentionBase::Location,
        AttentionBase::LocationS,
        AttentionBase::Onestep,
        AttentionBase::Monotonic,
        AttentionBase::RelaxedMonotonic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionBase::Content => "content",
            AttentionBase::Relative => "relative",
            AttentionBase::BiRelative => "bi-relative",
            AttentionBase::BiRope => "bi-rope",
            AttentionBase::Location => "location",
            AttentionBase::LocationS => "location-s",
            AttentionBase::Onestep => "onestep",
            AttentionBase::Monotonic => "monotonic",
            AttentionBase::RelaxedMonotonic => "relaxed-monotonic",
        }
    }

    /// Weights come from a Gaussian focus over normalized positions.
    pub fn is_location(self) -> bool {
        matches!(
            self,
            AttentionBase::Location
                | AttentionBase::LocationS
                | AttentionBase::Onestep
                | AttentionBase::Monotonic
                | AttentionBase::RelaxedMonotonic
        )
    }

    /// Keys and values come from the direction-interpolated encodings.
    pub fn uses_direction(self) -> bool {
        matches!(
            self,
            AttentionBase::BiRelative
                | AttentionBase::BiRope
                | AttentionBase::Onestep
                | AttentionBase::Monotonic
                | AttentionBase::RelaxedMonotonic
        )
    }
}

/// A base mechanism plus the content-mixing and PR-reference switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionKind {
    pub base: AttentionBase,
    pub mix_content: bool,
    pub pr_reference: bool,
}

impl AttentionKind {
    pub fn new(base: AttentionBase, mix_content: bool, pr_reference: bool) -> Result<Self> {
        if mix_content && !base.is_location() {
            return Err(Error::contract(format!("+mix requires a location-family base, got {}", base.name())));
        }
        if pr_reference && !mix_content {
            return Err(Error::contract("+pr requires +mix"));
        }
        Ok(AttentionKind {
            base,
            mix_content,
            pr_reference,
        })
    }

    pub fn plain(base: AttentionBase) -> Self {
        AttentionKind {
            base,
            mix_content: false,
            pr_reference: false,
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base.name())?;
        if self.mix_content {
            f.write_str("+mix")?;
        }
        if self.pr_reference {
            f.write_str("+pr")?;
        }
        Ok(())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let head = parts.next().unwrap_or_default();
        let base = AttentionBase::ALL
            .into_iter()
            .find(|b| b.name() == head)
            .ok_or_else(|| Error::contract(format!("unknown attention kind {head:?}")))?;
        let (mut mix, mut pr) = (false, false);
        for flag in parts {
            let slot = match flag {
                "mix" if !pr => &mut mix,
                "pr" => &mut pr,
                _ => return Err(Error::contract(format!("bad attention flag {flag:?} in {s:?}"))),
            };
            if std::mem::replace(slot, true) {
                return Err(Error::contract(format!("repeated attention flag in {s:?}")));
            }
        }
        AttentionKind::new(base, mix, pr)
    }
}

impl Serialize for AttentionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AttentionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_grammar() {
        let k: AttentionKind = "onestep+mix+pr".parse().unwrap();
        assert_eq!(k.base, AttentionBase::Onestep);
        assert!(k.mix_content && k.pr_reference);
        assert_eq!(k.to_string(), "onestep+mix+pr");
        for b in AttentionBase::ALL {
            assert_eq!(b.name().parse::<AttentionKind>().unwrap(), AttentionKind::plain(b));
        }
    }

    #[test]
    fn invalid_combinations() {
        for bad in ["relative+mix", "onestep+pr", "onestep+pr+mix", "onestep+mix+mix", "lstm", "location+x"] {
            assert!(bad.parse::<AttentionKind>().is_err(), "{bad}");
        }
    }
}
