//! Caption grammar: a description is the concatenation
//! `[rock and light] + [texture] + [minerals] + [form and habit] + [relief or interference]`,
//! with sorting and packing clauses only for sandstone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::category::RockCategory;

/// The five parameter groups a caption is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    RockAndLight,
    Texture,
    Minerals,
    FormAndHabit,
    ReliefOrInterference,
}

impl SegmentLabel {
    pub const ALL: [SegmentLabel; 5] = [
        SegmentLabel::RockAndLight,
        SegmentLabel::Texture,
        SegmentLabel::Minerals,
        SegmentLabel::FormAndHabit,
        SegmentLabel::ReliefOrInterference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentLabel::RockAndLight => "rock_and_light",
            SegmentLabel::Texture => "texture",
            SegmentLabel::Minerals => "minerals",
            SegmentLabel::FormAndHabit => "form_and_habit",
            SegmentLabel::ReliefOrInterference => "relief_or_interference",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Caption parameters, one per descriptive clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parameter {
    RockAndLight,
    Texture,
    Minerals,
    FormAndHabit,
    Sorting,
    Packing,
    ReliefOrInterference,
}

/// Whether the category's descriptions include the given parameter.
pub fn parameter_applies(category: RockCategory, parameter: Parameter) -> bool {
    use RockCategory::*;
    match parameter {
        Parameter::RockAndLight
        | Parameter::Texture
        | Parameter::Minerals
        | Parameter::ReliefOrInterference => true,
        Parameter::FormAndHabit => !matches!(category, Lutita | Caliza),
        Parameter::Sorting | Parameter::Packing => category == Arenisca,
    }
}

/// The clauses of one caption. Empty strings mean "absent".
///
/// Clauses are sentence fragments; a trailing period is optional. A clause
/// that starts with a lowercase letter continues the previous sentence
/// (e.g. `"con un hábito tabular"` after the minerals clause).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSegments {
    pub rock_and_light: String,
    pub texture: String,
    pub minerals: String,
    pub form_and_habit: String,
    pub sorting: String,
    pub packing: String,
    pub relief_or_interference: String,
}

impl CaptionSegments {
    fn get(&self, p: Parameter) -> &str {
        match p {
            Parameter::RockAndLight => &self.rock_and_light,
            Parameter::Texture => &self.texture,
            Parameter::Minerals => &self.minerals,
            Parameter::FormAndHabit => &self.form_and_habit,
            Parameter::Sorting => &self.sorting,
            Parameter::Packing => &self.packing,
            Parameter::ReliefOrInterference => &self.relief_or_interference,
        }
    }

    /// Collapses the clauses onto the five scored groups. Sorting and packing
    /// fold into texture, joined as separate sentences.
    pub fn five_groups(&self) -> [String; 5] {
        let strip = |s: &str| s.trim().trim_end_matches('.').trim().to_string();
        let texture = [&self.texture, &self.sorting, &self.packing]
            .into_iter()
            .map(|s| strip(s))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(". ");
        [
            strip(&self.rock_and_light),
            texture,
            strip(&self.minerals),
            strip(&self.form_and_habit),
            strip(&self.relief_or_interference),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("{category}: missing mandatory {parameter:?} segment")]
    MissingSegment {
        category: RockCategory,
        parameter: Parameter,
    },
    #[error("{category}: {parameter:?} is not described for this category")]
    NotApplicable {
        category: RockCategory,
        parameter: Parameter,
    },
}

/// Order in which clauses are written. Sandstone interleaves sorting before
/// the clast form and packing after it.
fn template(category: RockCategory) -> &'static [Parameter] {
    use Parameter::*;
    if category == RockCategory::Arenisca {
        &[RockAndLight, Texture, Minerals, Sorting, FormAndHabit, Packing, ReliefOrInterference]
    } else {
        &[RockAndLight, Texture, Minerals, FormAndHabit, ReliefOrInterference]
    }
}

/// Joins caption clauses into a punctuated description.
pub fn compose_caption(category: RockCategory, parts: &CaptionSegments) -> Result<String, GrammarError> {
    use Parameter::*;
    for p in [RockAndLight, Texture, Minerals, FormAndHabit, Sorting, Packing, ReliefOrInterference] {
        let present = !parts.get(p).trim().trim_end_matches('.').trim().is_empty();
        let applies = parameter_applies(category, p);
        if applies && !present {
            return Err(GrammarError::MissingSegment { category, parameter: p });
        }
        if !applies && present {
            return Err(GrammarError::NotApplicable { category, parameter: p });
        }
    }

    let mut sentences: Vec<String> = Vec::new();
    for &p in template(category) {
        let clause = parts.get(p).trim().trim_end_matches('.').trim();
        let continues = clause.chars().next().is_some_and(char::is_lowercase);
        match sentences.last_mut() {
            Some(last) if continues => {
                last.push_str(", ");
                last.push_str(clause);
            }
            _ => sentences.push(clause.to_string()),
        }
    }
    Ok(sentences
        .iter()
        .map(|s| format!("{s}."))
        .collect::<Vec<_>>()
        .join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn diorita_parts() -> CaptionSegments {
        CaptionSegments {
            rock_and_light: "Se trata de una diorita en luz polarizada paralela".into(),
            texture: "Tiene textura inequigranular alotriomórfica".into(),
            minerals: "Los minerales principales son plagioclasa, feldespato potásico, cuarzo y biotita"
                .into(),
            form_and_habit: "con un hábito tabular, laminar y ecuante".into(),
            relief_or_interference: "El relieve es fuerte".into(),
            ..Default::default()
        }
    }

    #[test]
    fn composes_diorita_row() {
        let text = compose_caption(RockCategory::Diorita, &diorita_parts()).unwrap();
        assert_eq!(
            text,
            "Se trata de una diorita en luz polarizada paralela. Tiene textura inequigranular \
             alotriomórfica. Los minerales principales son plagioclasa, feldespato potásico, cuarzo \
             y biotita, con un hábito tabular, laminar y ecuante. El relieve es fuerte."
        );
    }

    #[test]
    fn composes_arenisca_row() {
        let parts = CaptionSegments {
            rock_and_light: "Se trata de una arenisca vista en luz polarizada paralela.".into(),
            texture: "Tiene textura madura.".into(),
            minerals: "Los minerales principales son cuarzo.".into(),
            sorting: "Un sorteo bueno.".into(),
            form_and_habit: "Contiene clastos redondeados y de esfericidad alta.".into(),
            packing: "El empaquetamiento es tipo tangente.".into(),
            relief_or_interference: "Se nota un relieve fuerte.".into(),
        };
        let text = compose_caption(RockCategory::Arenisca, &parts).unwrap();
        assert_eq!(
            text,
            "Se trata de una arenisca vista en luz polarizada paralela. Tiene textura madura. Los \
             minerales principales son cuarzo. Un sorteo bueno. Contiene clastos redondeados y de \
             esfericidad alta. El empaquetamiento es tipo tangente. Se nota un relieve fuerte."
        );
        assert_eq!(
            parts.five_groups()[1],
            "Tiene textura madura. Un sorteo bueno. El empaquetamiento es tipo tangente"
        );
    }

    #[test]
    fn missing_texture_is_rejected() {
        let mut parts = diorita_parts();
        parts.rock_and_light = "Se trata de una riolita en luz polarizada cruzada".into();
        parts.texture.clear();
        assert_eq!(
            compose_caption(RockCategory::Riolita, &parts),
            Err(GrammarError::MissingSegment {
                category: RockCategory::Riolita,
                parameter: Parameter::Texture
            })
        );
    }

    #[test]
    fn single_segment_is_rejected() {
        let parts = CaptionSegments {
            rock_and_light: "Se trata de un gabro".into(),
            ..Default::default()
        };
        assert!(compose_caption(RockCategory::Gabro, &parts).is_err());
    }

    #[test]
    fn habit_not_allowed_for_lutita() {
        let mut parts = diorita_parts();
        assert!(matches!(
            compose_caption(RockCategory::Lutita, &parts),
            Err(GrammarError::NotApplicable { parameter: Parameter::FormAndHabit, .. })
        ));
        parts.form_and_habit.clear();
        assert!(compose_caption(RockCategory::Lutita, &parts).is_ok());
    }

    #[test]
    fn applicability_table() {
        use RockCategory::*;
        let with_habit = RockCategory::ALL
            .iter()
            .filter(|c| parameter_applies(**c, Parameter::FormAndHabit))
            .count();
        assert_eq!(with_habit, 12);
        assert!(parameter_applies(Arenisca, Parameter::Sorting));
        assert!(!parameter_applies(Caliza, Parameter::Packing));
    }
}
