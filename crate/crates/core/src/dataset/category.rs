use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Images per category in the reference corpus.
pub const IMAGES_PER_CATEGORY: u32 = 400;
/// Size of the reference corpus (14 categories x 400 images).
pub const CORPUS_SIZE: u32 = 14 * IMAGES_PER_CATEGORY;

const FIRST_CODE: u32 = 101;

/// Petrographic family a category belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RockGroup {
    IgneousExtrusive,
    IgneousIntrusive,
    Metamorphic,
    Sedimentary,
}

/// One of the 14 thin-section rock categories.
///
/// Variants are declared in category-code order, so `Andesita` is 101 and
/// `Lutita` is 114. Each code owns a contiguous block of 400 global image
/// indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RockCategory {
    Andesita,
    Basalto,
    Riolita,
    Diorita,
    Gabro,
    Granito,
    RocaUltramafica,
    Esquisto,
    Filita,
    Gneis,
    Marmol,
    Arenisca,
    Caliza,
    Lutita,
}

impl RockCategory {
    /// All categories in code order (101..=114).
    pub const ALL: [RockCategory; 14] = [
        RockCategory::Andesita,
        RockCategory::Basalto,
        RockCategory::Riolita,
        RockCategory::Diorita,
        RockCategory::Gabro,
        RockCategory::Granito,
        RockCategory::RocaUltramafica,
        RockCategory::Esquisto,
        RockCategory::Filita,
        RockCategory::Gneis,
        RockCategory::Marmol,
        RockCategory::Arenisca,
        RockCategory::Caliza,
        RockCategory::Lutita,
    ];

    /// Row order used by evaluation reports: grouped by rock family.
    pub const REPORT_ORDER: [RockCategory; 14] = [
        RockCategory::Riolita,
        RockCategory::Andesita,
        RockCategory::Basalto,
        RockCategory::Granito,
        RockCategory::Diorita,
        RockCategory::Gabro,
        RockCategory::RocaUltramafica,
        RockCategory::Filita,
        RockCategory::Esquisto,
        RockCategory::Gneis,
        RockCategory::Marmol,
        RockCategory::Arenisca,
        RockCategory::Lutita,
        RockCategory::Caliza,
    ];

    pub fn code(self) -> u32 {
        FIRST_CODE + self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        code.checked_sub(FIRST_CODE)
            .and_then(|offset| Self::ALL.get(offset as usize).copied())
    }

    /// Display name as used in captions and reports.
    pub fn name(self) -> &'static str {
        match self {
            RockCategory::Andesita => "Andesita",
            RockCategory::Basalto => "Basalto",
            RockCategory::Riolita => "Riolita",
            RockCategory::Diorita => "Diorita",
            RockCategory::Gabro => "Gabro",
            RockCategory::Granito => "Granito",
            RockCategory::RocaUltramafica => "Roca ultramáfica",
            RockCategory::Esquisto => "Esquisto",
            RockCategory::Filita => "Filita",
            RockCategory::Gneis => "Gneis",
            RockCategory::Marmol => "Mármol",
            RockCategory::Arenisca => "Arenisca",
            RockCategory::Caliza => "Caliza",
            RockCategory::Lutita => "Lutita",
        }
    }

    pub fn group(self) -> RockGroup {
        use RockCategory::*;
        match self {
            Riolita | Andesita | Basalto => RockGroup::IgneousExtrusive,
            Granito | Diorita | Gabro | RocaUltramafica => RockGroup::IgneousIntrusive,
            Filita | Esquisto | Gneis | Marmol => RockGroup::Metamorphic,
            Arenisca | Lutita | Caliza => RockGroup::Sedimentary,
        }
    }

    /// Inclusive range of global image indices owned by this category.
    pub fn index_range(self) -> std::ops::RangeInclusive<u32> {
        let offset = self as u32;
        (offset * IMAGES_PER_CATEGORY + 1)..=((offset + 1) * IMAGES_PER_CATEGORY)
    }

    /// Category that owns a global image index, if any.
    pub fn owning_index(index: u32) -> Option<Self> {
        if index == 0 {
            return None;
        }
        Self::ALL
            .get(((index - 1) / IMAGES_PER_CATEGORY) as usize)
            .copied()
    }
}

impl fmt::Display for RockCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Illumination mode of a thin-section photograph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LightType {
    /// Plane-polarized light.
    #[serde(rename = "PPL")]
    Ppl,
    /// Cross-polarized light.
    #[serde(rename = "XPL")]
    Xpl,
}

impl LightType {
    pub fn as_str(self) -> &'static str {
        match self {
            LightType::Ppl => "PPL",
            LightType::Xpl => "XPL",
        }
    }
}

impl fmt::Display for LightType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LightType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PPL" => Ok(LightType::Ppl),
            "XPL" => Ok(LightType::Xpl),
            other => Err(format!("unknown light type {other:?} (expected PPL or XPL)")),
        }
    }
}
