//! The eight prompt variants: four input patterns crossed with two output
//! patterns, rendered for a sample and its dataset's label schema.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSchema, MemeSample, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InputPattern {
    Vanilla,
    Definition,
    Ocr,
    DefinitionOcr,
}

impl InputPattern {
    pub const ALL: [InputPattern; 4] = [
        InputPattern::Vanilla,
        InputPattern::Definition,
        InputPattern::Ocr,
        InputPattern::DefinitionOcr,
    ];

    pub fn id(self) -> &'static str {
        match self {
            InputPattern::Vanilla => "vn",
            InputPattern::Definition => "def",
            InputPattern::Ocr => "ocr",
            InputPattern::DefinitionOcr => "defocr",
        }
    }

    pub fn has_definitions(self) -> bool {
        matches!(self, InputPattern::Definition | InputPattern::DefinitionOcr)
    }

    pub fn has_ocr(self) -> bool {
        matches!(self, InputPattern::Ocr | InputPattern::DefinitionOcr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutputPattern {
    Vanilla,
    Explanation,
}

impl OutputPattern {
    pub const ALL: [OutputPattern; 2] = [OutputPattern::Vanilla, OutputPattern::Explanation];

    pub fn id(self) -> &'static str {
        match self {
            OutputPattern::Vanilla => "vn",
            OutputPattern::Explanation => "ex",
        }
    }
}

/// One of the eight (input, output) prompt variants.
///
/// Identifiers have the form `"{input}-{output}"`, e.g. `"defocr-ex"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptSpec {
    pub input: InputPattern,
    pub output: OutputPattern,
}

impl PromptSpec {
    /// All variants in canonical order: vanilla output first, then
    /// explanation output, inputs in vn/def/ocr/defocr order.
    pub const ALL: [PromptSpec; 8] = {
        let mut all = [PromptSpec {
            input: InputPattern::Vanilla,
            output: OutputPattern::Vanilla,
        }; 8];
        let mut i = 0;
        while i < 8 {
            all[i] = PromptSpec {
                input: InputPattern::ALL[i % 4],
                output: OutputPattern::ALL[i / 4],
            };
            i += 1;
        }
        all
    };

    pub const fn new(input: InputPattern, output: OutputPattern) -> Self {
        PromptSpec { input, output }
    }

    pub fn id(&self) -> String {
        alloc::format!("{}-{}", self.input.id(), self.output.id())
    }

    /// Position in [`PromptSpec::ALL`].
    pub fn index(&self) -> usize {
        let input = InputPattern::ALL.iter().position(|p| *p == self.input).unwrap_or(0);
        let output = OutputPattern::ALL.iter().position(|p| *p == self.output).unwrap_or(0);
        output * 4 + input
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.input.id(), self.output.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown prompt variant `{0}` (expected e.g. `vn-vn`, `defocr-ex`)")]
pub struct UnknownPrompt(pub String);

impl FromStr for PromptSpec {
    type Err = UnknownPrompt;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase().replace(['+', '_', '/'], "-");
        PromptSpec::ALL
            .into_iter()
            .find(|spec| spec.id() == lowered)
            .ok_or_else(|| UnknownPrompt(String::from(s)))
    }
}

impl Serialize for PromptSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PromptSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Non-fatal issues noticed while rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptWarning {
    /// An OCR pattern was rendered for a sample with no OCR text; the
    /// backtick block is left empty.
    EmptyOcr { sample_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub spec: PromptSpec,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<PromptWarning>,
}

/// Instantiates the template for `spec` with the schema's label words,
/// definitions and the sample's OCR text. Pure: identical inputs always
/// give byte-identical text.
pub fn render_prompt(sample: &MemeSample, schema: &LabelSchema, spec: PromptSpec) -> RenderedPrompt {
    let pos = schema.name(Polarity::Positive);
    let neg = schema.name(Polarity::Negative);
    let mut lines: Vec<String> = Vec::new();
    let mut warnings = Vec::new();

    if spec.input.has_definitions() {
        lines.push("Consider the following definitions.".into());
        lines.push(alloc::format!("1. '{pos}' - \"{}\"", schema.positive_definition));
        lines.push(alloc::format!("2. '{neg}' - \"{}\"", schema.negative_definition));
    }

    let classify = alloc::format!("Classify the input meme as '{pos}' or '{neg}'");
    let explain_tail = "with an explanation within 30 words explaining your classification.";
    let as_either = alloc::format!("Provide the answer as either '{pos}' or '{neg}' only");
    let in_format = alloc::format!("Provide your answer in the format: '{pos}' or '{neg}'");
    let ocr_clause =
        "considering the image as well as the extracted text from the image which is delimited by three backticks.";

    match (spec.input, spec.output) {
        (InputPattern::Vanilla, OutputPattern::Vanilla) => {
            lines.push(alloc::format!("{classify}. {as_either}."));
        }
        (InputPattern::Vanilla, OutputPattern::Explanation) => {
            lines.push(alloc::format!("{classify}. {as_either} {explain_tail}"));
        }
        (InputPattern::Definition, OutputPattern::Vanilla) => {
            lines.push(alloc::format!(
                "{classify} based on the above definitions considering the image."
            ));
            lines.push(alloc::format!("{as_either}."));
        }
        (InputPattern::Definition, OutputPattern::Explanation) => {
            lines.push(alloc::format!(
                "{classify} based on the above definitions considering the image. Provide your answer as either '{pos}' or '{neg}' only {explain_tail}"
            ));
        }
        (InputPattern::Ocr, _) | (InputPattern::DefinitionOcr, _) => {
            if spec.input == InputPattern::Ocr {
                lines.push(alloc::format!("{classify} {ocr_clause}"));
            } else {
                lines.push(alloc::format!("{classify} based on the above definitions {ocr_clause}"));
            }
            if sample.ocr_text.is_empty() {
                warnings.push(PromptWarning::EmptyOcr {
                    sample_id: sample.sample_id.clone(),
                });
            }
            lines.push(alloc::format!(
                "Extracted text from the image: ```{}```",
                sample.ocr_text
            ));
            lines.push(match (spec.input, spec.output) {
                (_, OutputPattern::Explanation) => alloc::format!(
                    "{in_format}, followed by an explanation within 30 words explaining your classification."
                ),
                (InputPattern::Ocr, OutputPattern::Vanilla) => alloc::format!("{in_format}."),
                _ => alloc::format!("{as_either}."),
            });
        }
    }

    for label in [pos, neg] {
        lines.push(match spec.output {
            OutputPattern::Vanilla => alloc::format!("Example output for '{label}' meme : '{label}'"),
            OutputPattern::Explanation => alloc::format!(
                "Example output for '{label}' meme : '{label}' - Explain within 30 words that why you classified this meme as '{label}'."
            ),
        });
    }

    RenderedPrompt {
        text: lines.join("\n"),
        spec,
        sample_id: sample.sample_id.clone(),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;

    fn fhm_sample(ocr: &str) -> (MemeSample, LabelSchema) {
        (
            MemeSample {
                sample_id: "42".into(),
                image_ref: "img/42.png".into(),
                ocr_text: ocr.into(),
                gold: Polarity::Positive,
            },
            LabelSchema::builtin("fhm").unwrap(),
        )
    }

    #[test]
    fn ids_are_stable_and_distinct() {
        let ids: Vec<String> = PromptSpec::ALL.iter().map(|s| s.id()).collect();
        assert_eq!(
            ids,
            [
                "vn-vn",
                "def-vn",
                "ocr-vn",
                "defocr-vn",
                "vn-ex",
                "def-ex",
                "ocr-ex",
                "defocr-ex"
            ]
        );
        for (i, spec) in PromptSpec::ALL.iter().enumerate() {
            assert_eq!(spec.index(), i);
            assert_eq!(spec.id().parse::<PromptSpec>().unwrap(), *spec);
        }
        assert_eq!("DefOcr+Ex".parse::<PromptSpec>().unwrap().id(), "defocr-ex");
        assert!("ocr-cot".parse::<PromptSpec>().is_err());
    }

    #[test]
    fn vanilla_prompt_golden() {
        let (sample, schema) = fhm_sample("when you see it");
        let rendered = render_prompt(
            &sample,
            &schema,
            PromptSpec::new(InputPattern::Vanilla, OutputPattern::Vanilla),
        );
        assert_eq!(
            rendered.text,
            "Classify the input meme as 'hateful' or 'not-hateful'. Provide the answer as either 'hateful' or 'not-hateful' only.\n\
             Example output for 'hateful' meme : 'hateful'\n\
             Example output for 'not-hateful' meme : 'not-hateful'"
        );
        assert!(rendered.warnings.is_empty());
    }

    #[test]
    fn ocr_prompt_delimits_text_with_backticks() {
        let schema = LabelSchema::builtin("mami").unwrap();
        let sample = MemeSample {
            sample_id: "m1".into(),
            image_ref: "m1.jpg".into(),
            ocr_text: "get back in the kitchen".into(),
            gold: Polarity::Positive,
        };
        let text = render_prompt(
            &sample,
            &schema,
            PromptSpec::new(InputPattern::Ocr, OutputPattern::Vanilla),
        )
        .text;
        assert!(text.starts_with("Classify the input meme as 'misogynistic' or 'not-misogynistic' considering"));
        assert!(text.contains("delimited by three backticks"));
        assert!(text.contains("```get back in the kitchen```"));
        assert!(text.contains("Provide your answer in the format: 'misogynistic' or 'not-misogynistic'.\n"));
    }

    #[test]
    fn definition_ocr_explanation_orders_sections() {
        let (sample, schema) = fhm_sample("look at this");
        let text = render_prompt(
            &sample,
            &schema,
            PromptSpec::new(InputPattern::DefinitionOcr, OutputPattern::Explanation),
        )
        .text;
        let pos_def = text.find(&schema.positive_definition).unwrap();
        let neg_def = text.find(&schema.negative_definition).unwrap();
        let ocr = text.find("```look at this```").unwrap();
        let explain = text.find("explanation within 30 words").unwrap();
        assert!(pos_def < neg_def && neg_def < ocr && ocr < explain);
        assert!(text.ends_with(
            "Example output for 'not-hateful' meme : 'not-hateful' - Explain within 30 words that why you classified this meme as 'not-hateful'."
        ));
        assert!(text.contains(
            "Provide your answer in the format: 'hateful' or 'not-hateful', followed by an explanation within 30 words explaining your classification."
        ));
    }

    #[test]
    fn empty_ocr_renders_empty_block_with_warning() {
        let (sample, schema) = fhm_sample("");
        let rendered = render_prompt(
            &sample,
            &schema,
            PromptSpec::new(InputPattern::Ocr, OutputPattern::Explanation),
        );
        assert!(rendered.text.contains("Extracted text from the image: ``````"));
        assert_eq!(
            rendered.warnings,
            [PromptWarning::EmptyOcr {
                sample_id: "42".to_string()
            }]
        );
    }

    #[test]
    fn eight_renderings_are_distinct_and_definitions_appear_once() {
        for id in LabelSchema::BUILTIN_IDS {
            let schema = LabelSchema::builtin(id).unwrap();
            for ocr in ["", "some caption"] {
                let sample = MemeSample {
                    sample_id: "s".into(),
                    image_ref: "s.png".into(),
                    ocr_text: ocr.into(),
                    gold: Polarity::Negative,
                };
                let texts: BTreeSet<String> = PromptSpec::ALL
                    .iter()
                    .map(|spec| {
                        let text = render_prompt(&sample, &schema, *spec).text;
                        let expected = usize::from(spec.input.has_definitions());
                        assert_eq!(text.matches(schema.positive_definition.as_str()).count(), expected);
                        assert_eq!(text.matches(schema.negative_definition.as_str()).count(), expected);
                        assert!(text.contains(&schema.positive_name) && text.contains(&schema.negative_name));
                        text
                    })
                    .collect();
                assert_eq!(texts.len(), 8);
            }
        }
    }
}
