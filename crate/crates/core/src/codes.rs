//! The seventeen MI codes, their category grouping, and a compact label-set type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Category grouping of the MI codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MiCategory {
    MiConsistent,
    MiInconsistent,
    Other,
}

impl MiCategory {
    pub fn display_name(self) -> &'static str {
        match self {
            MiCategory::MiConsistent => "MI-Consistent",
            MiCategory::MiInconsistent => "MI-Inconsistent",
            MiCategory::Other => "Other",
        }
    }
}

/// A motivational-interviewing behavior code assigned to a listener utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MiCode {
    GivingInformation = 0,
    Reflection,
    Support,
    Affirm,
    ClosedQuestion,
    OpenQuestion,
    Persuade,
    SeekingCollaboration,
    Inappropriate,
    Direct,
    EmphasizingAutonomy,
    Grounding,
    PersonalDisclosure,
    Introduction,
    Conclusion,
    ChitChat,
    Other,
}

impl MiCode {
    pub const COUNT: usize = 17;

    pub const ALL: [MiCode; 17] = [
        MiCode::GivingInformation,
        MiCode::Reflection,
        MiCode::Support,
        MiCode::Affirm,
        MiCode::ClosedQuestion,
        MiCode::OpenQuestion,
        MiCode::Persuade,
        MiCode::SeekingCollaboration,
        MiCode::Inappropriate,
        MiCode::Direct,
        MiCode::EmphasizingAutonomy,
        MiCode::Grounding,
        MiCode::PersonalDisclosure,
        MiCode::Introduction,
        MiCode::Conclusion,
        MiCode::ChitChat,
        MiCode::Other,
    ];

    /// Covariate order of the satisfaction model: grouped by category, `Other` omitted.
    pub const REGRESSION_ORDER: [MiCode; 16] = [
        MiCode::Affirm,
        MiCode::EmphasizingAutonomy,
        MiCode::OpenQuestion,
        MiCode::ClosedQuestion,
        MiCode::Persuade,
        MiCode::Reflection,
        MiCode::SeekingCollaboration,
        MiCode::Direct,
        MiCode::Inappropriate,
        MiCode::Grounding,
        MiCode::GivingInformation,
        MiCode::Support,
        MiCode::PersonalDisclosure,
        MiCode::Introduction,
        MiCode::Conclusion,
        MiCode::ChitChat,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<MiCode> {
        MiCode::ALL.get(i).copied()
    }

    pub fn category(self) -> MiCategory {
        use MiCode::*;
        match self {
            Affirm | EmphasizingAutonomy | OpenQuestion | ClosedQuestion | Persuade | Reflection
            | SeekingCollaboration => MiCategory::MiConsistent,
            Direct | Inappropriate => MiCategory::MiInconsistent,
            _ => MiCategory::Other,
        }
    }

    /// Identifier used in label files, model files and the HTTP API.
    pub fn name(self) -> &'static str {
        use MiCode::*;
        match self {
            GivingInformation => "GivingInformation",
            Reflection => "Reflection",
            Support => "Support",
            Affirm => "Affirm",
            ClosedQuestion => "ClosedQuestion",
            OpenQuestion => "OpenQuestion",
            Persuade => "Persuade",
            SeekingCollaboration => "SeekingCollaboration",
            Inappropriate => "Inappropriate",
            Direct => "Direct",
            EmphasizingAutonomy => "EmphasizingAutonomy",
            Grounding => "Grounding",
            PersonalDisclosure => "PersonalDisclosure",
            Introduction => "Introduction",
            Conclusion => "Conclusion",
            ChitChat => "ChitChat",
            Other => "Other",
        }
    }

    /// Human-readable row label used in reports.
    pub fn label(self) -> &'static str {
        use MiCode::*;
        match self {
            GivingInformation => "Giving Information",
            Reflection => "Reflection",
            Support => "Support",
            Affirm => "Affirm",
            ClosedQuestion => "Closed Question",
            OpenQuestion => "Open Question",
            Persuade => "Persuade (with permission)",
            SeekingCollaboration => "Seeking Collaboration",
            Inappropriate => "Inappropriate",
            Direct => "Direct",
            EmphasizingAutonomy => "Emphasizing Autonomy",
            Grounding => "Grounding",
            PersonalDisclosure => "Personal Disclosure",
            Introduction => "Introduction",
            Conclusion => "Conclusion",
            ChitChat => "Chit-Chat",
            Other => "Other",
        }
    }
}

impl fmt::Display for MiCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MiCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MiCode::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownCode(s.to_string()))
    }
}

impl Serialize for MiCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MiCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of MI codes stored as a 17-bit mask. Iteration follows [`MiCode::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CodeSet(u32);

impl CodeSet {
    pub const fn empty() -> Self {
        CodeSet(0)
    }

    pub fn insert(&mut self, code: MiCode) {
        self.0 |= 1 << code.index();
    }

    pub fn remove(&mut self, code: MiCode) {
        self.0 &= !(1 << code.index());
    }

    pub fn contains(self, code: MiCode) -> bool {
        self.0 & (1 << code.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: CodeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn union(self, other: CodeSet) -> CodeSet {
        CodeSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = MiCode> {
        MiCode::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl FromIterator<MiCode> for CodeSet {
    fn from_iter<I: IntoIterator<Item = MiCode>>(iter: I) -> Self {
        let mut set = CodeSet::empty();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl fmt::Display for CodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(MiCode::name).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_mapping() {
        let consistent: Vec<_> = MiCode::ALL
            .iter()
            .filter(|c| c.category() == MiCategory::MiConsistent)
            .copied()
            .collect();
        assert_eq!(consistent.len(), 7);
        assert!(consistent.contains(&MiCode::SeekingCollaboration));
        assert_eq!(MiCode::Direct.category(), MiCategory::MiInconsistent);
        assert_eq!(MiCode::Inappropriate.category(), MiCategory::MiInconsistent);
        for c in [MiCode::Grounding, MiCode::Support, MiCode::ChitChat, MiCode::Other] {
            assert_eq!(c.category(), MiCategory::Other);
        }
    }

    #[test]
    fn names_round_trip_and_indices_are_dense() {
        for (i, c) in MiCode::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(c.name().parse::<MiCode>().unwrap(), *c);
        }
        assert!("Warn".parse::<MiCode>().is_err());
    }

    #[test]
    fn regression_order_covers_everything_but_other() {
        let set: CodeSet = MiCode::REGRESSION_ORDER.into_iter().collect();
        assert_eq!(set.len(), 16);
        assert!(!set.contains(MiCode::Other));
    }

    #[test]
    fn code_set_ops() {
        let mut s = CodeSet::empty();
        s.insert(MiCode::Introduction);
        s.insert(MiCode::OpenQuestion);
        assert_eq!(s.len(), 2);
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![MiCode::OpenQuestion, MiCode::Introduction]
        );
        let one: CodeSet = [MiCode::Introduction].into_iter().collect();
        assert!(one.is_subset(s));
        assert!(!s.is_subset(one));
        s.remove(MiCode::Introduction);
        assert_eq!(s, [MiCode::OpenQuestion].into_iter().collect());
    }
}
