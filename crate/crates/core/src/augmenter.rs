//! Rendering retrieved API documents and prepending them to a task prompt as
//! a Python docstring.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::api_index::{ApiSpec, Provider};

/// Header line of the reference docstring.
pub const HEADER: &str = "API references:";
/// Full documentation is right-truncated to this many characters.
pub const FULL_DOC_CHAR_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationDesign {
    NameOnly,
    Description,
    Specification,
    #[default]
    #[serde(rename = "desc-spec")]
    DescriptionPlusSpecification,
    #[serde(rename = "full-doc")]
    FullDocumentation,
}

impl AugmentationDesign {
    pub const ALL: [AugmentationDesign; 5] = [
        AugmentationDesign::NameOnly,
        AugmentationDesign::Description,
        AugmentationDesign::Specification,
        AugmentationDesign::DescriptionPlusSpecification,
        AugmentationDesign::FullDocumentation,
    ];

    pub fn cli_name(&self) -> &'static str {
        match self {
            AugmentationDesign::NameOnly => "name-only",
            AugmentationDesign::Description => "description",
            AugmentationDesign::Specification => "specification",
            AugmentationDesign::DescriptionPlusSpecification => "desc-spec",
            AugmentationDesign::FullDocumentation => "full-doc",
        }
    }
}

impl fmt::Display for AugmentationDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl std::str::FromStr for AugmentationDesign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugmentationDesign::ALL
            .into_iter()
            .find(|d| d.cli_name() == s)
            .ok_or_else(|| format!("unknown augmentation design `{s}`"))
    }
}

/// Pluggable token counter used for comparative reporting only.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts maximal runs of letters and digits; punctuation and whitespace
/// separate tokens and are not counted.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCounter;

impl TokenCounter for WordCounter {
    fn count(&self, text: &str) -> usize {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .count()
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

/// First `n` sentences of `text`, whitespace collapsed. A sentence ends at
/// `.`, `!` or `?` followed by whitespace (or the end of the text).
pub fn first_sentences(text: &str, n: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<char> = flat.chars().collect();
    let mut seen = 0;
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_some_and(|n| n.is_whitespace()) {
            seen += 1;
            if seen == n {
                return chars[..=i].iter().collect();
            }
        }
    }
    flat
}

/// Azure docstrings lead with a one-sentence summary; AWS pages need the
/// first five sentences to reach the actual description.
fn description_sentences(provider: Provider) -> usize {
    match provider {
        Provider::Azure => 1,
        Provider::Aws => 5,
    }
}

fn short_description(spec: &ApiSpec) -> String {
    let source = if spec.description.trim().is_empty() {
        &spec.full_doc
    } else {
        &spec.description
    };
    first_sentences(source, description_sentences(spec.provider))
}

fn arg_list(params: &[String]) -> String {
    if params.is_empty() {
        "none".to_string()
    } else {
        params.join(", ")
    }
}

fn arguments(spec: &ApiSpec) -> String {
    format!(
        "Required arguments: {}\nOptional arguments: {}",
        arg_list(&spec.required_params),
        arg_list(&spec.optional_params)
    )
}

pub fn render_design(spec: &ApiSpec, design: AugmentationDesign) -> String {
    match design {
        AugmentationDesign::NameOnly => spec.name.clone(),
        AugmentationDesign::Description => {
            format!("{}\nDescription: {}", spec.name, short_description(spec))
        }
        AugmentationDesign::Specification => format!("{}\n{}", spec.name, arguments(spec)),
        AugmentationDesign::DescriptionPlusSpecification => format!(
            "{}\nDescription: {}\n{}",
            spec.name,
            short_description(spec),
            arguments(spec)
        ),
        AugmentationDesign::FullDocumentation => {
            if spec.full_doc.is_empty() {
                spec.name.clone()
            } else {
                spec.full_doc.chars().take(FULL_DOC_CHAR_LIMIT).collect()
            }
        }
    }
}

/// Wraps `blocks` in one docstring headed by [`HEADER`], then a blank line,
/// then the untouched prompt. No blocks means no augmentation.
pub fn build_prompt(task_prompt: &str, blocks: &[String]) -> String {
    if blocks.is_empty() {
        return task_prompt.to_string();
    }
    let body = blocks
        .iter()
        .map(|b| b.replace("\"\"\"", "\\\"\\\"\\\""))
        .collect::<Vec<_>>()
        .join("\n\n");
    format!("\"\"\"\n{HEADER}\n\n{body}\n\"\"\"\n\n{task_prompt}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub text: String,
    /// Tokens added in front of the original prompt.
    pub augmentation_token_count: usize,
    pub design: AugmentationDesign,
    pub doc_names: Vec<String>,
}

pub fn augment(
    task_prompt: &str,
    docs: &[&ApiSpec],
    design: AugmentationDesign,
    counter: &dyn TokenCounter,
) -> AugmentedPrompt {
    let blocks: Vec<String> = docs.iter().map(|s| render_design(s, design)).collect();
    let text = build_prompt(task_prompt, &blocks);
    let added = &text[..text.len() - task_prompt.len()];
    AugmentedPrompt {
        augmentation_token_count: counter.count(added),
        text,
        design,
        doc_names: docs.iter().map(|s| s.name.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(provider: Provider, req: &[&str], opt: &[&str], desc: &str, doc: &str) -> ApiSpec {
        ApiSpec {
            provider,
            service: "sqs".into(),
            name: "delete_message".into(),
            required_params: req.iter().map(|s| s.to_string()).collect(),
            optional_params: opt.iter().map(|s| s.to_string()).collect(),
            description: desc.into(),
            full_doc: doc.into(),
        }
    }

    #[test]
    fn name_only() {
        let s = spec(Provider::Aws, &[], &[], "", "");
        assert_eq!(render_design(&s, AugmentationDesign::NameOnly), "delete_message");
    }

    #[test]
    fn specification_lists_arguments_without_prose() {
        let s = spec(Provider::Aws, &["a"], &["b"], "Some prose here.", "Long doc.");
        let block = render_design(&s, AugmentationDesign::Specification);
        assert_eq!(
            block,
            "delete_message\nRequired arguments: a\nOptional arguments: b"
        );
        let none = spec(Provider::Aws, &[], &[], "", "");
        assert!(render_design(&none, AugmentationDesign::Specification).ends_with("Optional arguments: none"));
    }

    #[test]
    fn description_sentence_counts_by_provider() {
        let text = "One. Two! Three? Four. Five. Six. Seven.";
        let aws = spec(Provider::Aws, &[], &[], text, "");
        assert_eq!(
            render_design(&aws, AugmentationDesign::Description),
            "delete_message\nDescription: One. Two! Three? Four. Five."
        );
        let azure = spec(Provider::Azure, &[], &[], text, "");
        assert_eq!(
            render_design(&azure, AugmentationDesign::Description),
            "delete_message\nDescription: One."
        );
        // falls back to the full documentation, and keeps dotted names intact
        let from_doc = spec(Provider::Azure, &[], &[], "", "Calls os.path.join on\n the input. Then more.");
        assert_eq!(
            render_design(&from_doc, AugmentationDesign::Description),
            "delete_message\nDescription: Calls os.path.join on the input."
        );
    }

    #[test]
    fn full_doc_truncates_to_limit() {
        let doc: String = "abcdefghij".repeat(600);
        assert_eq!(doc.chars().count(), 6000);
        let s = spec(Provider::Aws, &[], &[], "", &doc);
        let block = render_design(&s, AugmentationDesign::FullDocumentation);
        assert_eq!(block.chars().count(), 5000);
        assert!(doc.starts_with(&block));
        let multibyte = spec(Provider::Aws, &[], &[], "", &"é".repeat(5001));
        assert_eq!(
            render_design(&multibyte, AugmentationDesign::FullDocumentation).chars().count(),
            5000
        );
    }

    #[test]
    fn desc_spec_contains_both_parts() {
        let s = spec(Provider::Aws, &["QueueUrl"], &[], "Deletes a message. More.", "");
        let ds = render_design(&s, AugmentationDesign::DescriptionPlusSpecification);
        assert_eq!(
            ds,
            "delete_message\nDescription: Deletes a message. More.\nRequired arguments: QueueUrl\nOptional arguments: none"
        );
        assert!(ds.starts_with(&render_design(&s, AugmentationDesign::Description)));
        assert_eq!(ds.matches("delete_message").count(), 1);
    }

    #[test]
    fn build_prompt_layout() {
        assert_eq!(build_prompt("import boto3\n", &[]), "import boto3\n");
        let out = build_prompt("import boto3\n", &["A".into(), "B".into()]);
        assert_eq!(out, "\"\"\"\nAPI references:\n\nA\n\nB\n\"\"\"\n\nimport boto3\n");
        let quoted = build_prompt("p", &["say \"\"\"hi\"\"\"".into()]);
        assert_eq!(quoted.matches("\"\"\"").count(), 2);
        assert!(quoted.ends_with("p"));
    }

    #[test]
    fn word_counter() {
        assert_eq!(count_tokens("", &WordCounter), 0);
        assert_eq!(count_tokens("foo(a, b)", &WordCounter), 3);
        assert_eq!(count_tokens("delete_message", &WordCounter), 2);
    }

    #[test]
    fn augment_records_names_and_counts() {
        let s = spec(Provider::Aws, &["a"], &[], "", "");
        let a = augment("x = 1", &[&s], AugmentationDesign::NameOnly, &WordCounter);
        assert_eq!(a.doc_names, vec!["delete_message"]);
        // "API references" + "delete" + "message"
        assert_eq!(a.augmentation_token_count, 4);
        assert!(a.text.ends_with("x = 1"));
        let plain = augment("x = 1", &[], AugmentationDesign::NameOnly, &WordCounter);
        assert_eq!(plain.text, "x = 1");
        assert_eq!(plain.augmentation_token_count, 0);
    }

    #[test]
    fn design_names_parse() {
        for d in AugmentationDesign::ALL {
            assert_eq!(d.cli_name().parse::<AugmentationDesign>().unwrap(), d);
            let j = serde_json::to_string(&d).unwrap();
            assert_eq!(j, format!("\"{}\"", d.cli_name()));
        }
        assert_eq!(AugmentationDesign::default(), AugmentationDesign::DescriptionPlusSpecification);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prompt_is_suffix(prompt in "(?s).{0,80}", desc in "[A-Za-z .!?]{0,60}", doc in "(?s).{0,200}") {
                let s = spec(Provider::Aws, &["a"], &["b"], &desc, &doc);
                for d in AugmentationDesign::ALL {
                    let a = augment(&prompt, &[&s, &s], d, &WordCounter);
                    prop_assert!(a.text.ends_with(&prompt));
                    let block = render_design(&s, d);
                    if d == AugmentationDesign::FullDocumentation {
                        prop_assert!(block.chars().count() <= FULL_DOC_CHAR_LIMIT);
                    }
                }
            }
        }
    }
}
