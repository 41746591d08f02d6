//! Counting API-name occurrences in a Python corpus and bucketing the counts
//! into frequency classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::api_index::{ApiIndex, Provider};
use crate::lexer::{scan, TokenKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyClass {
    #[serde(alias = "Low")]
    Low,
    #[serde(alias = "Medium")]
    Medium,
    #[serde(alias = "High")]
    High,
}

impl FrequencyClass {
    pub const ALL: [FrequencyClass; 3] = [FrequencyClass::High, FrequencyClass::Medium, FrequencyClass::Low];

    pub fn label(&self) -> &'static str {
        match self {
            FrequencyClass::Low => "low",
            FrequencyClass::Medium => "medium",
            FrequencyClass::High => "high",
        }
    }
}

impl fmt::Display for FrequencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Low: 0-10 occurrences, Medium: 11-100, High: 101 and up.
pub fn classify_frequency(count: u64) -> FrequencyClass {
    match count {
        0..=10 => FrequencyClass::Low,
        11..=100 => FrequencyClass::Medium,
        _ => FrequencyClass::High,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyRecord {
    pub api_name: String,
    pub count: u64,
    pub class: FrequencyClass,
}

/// Decides whether a source file belongs to a provider: it imports one of
/// `import_names`, or its path contains one of `path_substrings`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderFilter {
    pub provider: Provider,
    pub import_names: BTreeSet<String>,
    pub path_substrings: BTreeSet<String>,
}

impl ProviderFilter {
    pub fn builtin(provider: Provider) -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        match provider {
            Provider::Aws => ProviderFilter {
                provider,
                import_names: set(&["boto3", "botocore"]),
                path_substrings: set(&["aws", "boto", "amazon"]),
            },
            Provider::Azure => ProviderFilter {
                provider,
                import_names: set(&["azure"]),
                path_substrings: set(&["azure"]),
            },
        }
    }
}

/// First dotted segment of every module imported by `import` / `from ... import`
/// lines. Relative imports are ignored.
fn imported_roots(file_text: &str) -> impl Iterator<Item = &str> {
    file_text.lines().flat_map(|line| {
        let line = line.trim();
        let line = line.split(['#', ';']).next().unwrap_or("");
        let mut roots: Vec<&str> = Vec::new();
        if let Some(rest) = line.strip_prefix("import ") {
            for item in rest.split(',') {
                let module = item.split_whitespace().next().unwrap_or("");
                roots.push(module.split('.').next().unwrap_or(""));
            }
        } else if let Some(rest) = line.strip_prefix("from ") {
            let mut words = rest.split_whitespace();
            if let (Some(module), Some("import")) = (words.next(), words.next()) {
                if !module.starts_with('.') {
                    roots.push(module.split('.').next().unwrap_or(""));
                }
            }
        }
        roots.into_iter().filter(|r| !r.is_empty())
    })
}

pub fn file_relevant(path: &str, file_text: &str, filter: &ProviderFilter) -> bool {
    let lower_path = path.to_lowercase();
    if filter
        .path_substrings
        .iter()
        .any(|s| lower_path.contains(&s.to_lowercase()))
    {
        return true;
    }
    imported_roots(file_text).any(|root| filter.import_names.contains(root))
}

/// Counts call and definition sites of each name: the identifier must be
/// immediately followed by `(` and preceded by `.`, whitespace, `=`, `(`, `,`
/// or the start of a line. Strings and comments are skipped.
pub fn count_occurrences(file_text: &str, names: &BTreeSet<String>) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = names.iter().map(|n| (n.clone(), 0)).collect();
    let chars: Vec<char> = file_text.chars().collect();
    let toks = scan(&chars);
    for (i, t) in toks.iter().enumerate() {
        if t.kind != TokenKind::Ident {
            continue;
        }
        if toks.get(i + 1).map(|n| n.kind) != Some(TokenKind::Punct('(')) {
            continue;
        }
        let prev_ok = i == 0
            || matches!(
                toks[i - 1].kind,
                TokenKind::Space
                    | TokenKind::Newline
                    | TokenKind::Punct('.')
                    | TokenKind::Punct('=')
                    | TokenKind::Punct('(')
                    | TokenKind::Punct(',')
            );
        if !prev_ok {
            continue;
        }
        let word: String = chars[t.start..t.end].iter().collect();
        if let Some(c) = counts.get_mut(&word) {
            *c += 1;
        }
    }
    counts
}

#[derive(Debug, Error)]
pub enum MineError {
    #[error("corpus root {path}: {source}")]
    Root {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no provider filters selected")]
    NoFilters,
}

fn python_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|entry| match entry {
            Ok(e) => Some(e),
            Err(err) => {
                log::warn!("skipping unreadable corpus entry: {err}");
                None
            }
        })
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "py"))
        .collect();
    files.sort();
    files
}

/// Counts every index name over the relevant `.py` files under
/// `corpus_root`, one record per name of the selected providers, sorted by
/// name. Unreadable files are skipped with a warning.
pub fn mine(
    corpus_root: &Path,
    index: &ApiIndex,
    filters: &[ProviderFilter],
) -> Result<Vec<FrequencyRecord>, MineError> {
    if filters.is_empty() {
        return Err(MineError::NoFilters);
    }
    std::fs::read_dir(corpus_root).map_err(|source| MineError::Root {
        path: corpus_root.to_path_buf(),
        source,
    })?;

    let mut names_by_provider: BTreeMap<Provider, BTreeSet<String>> = BTreeMap::new();
    for spec in index.specs() {
        names_by_provider
            .entry(spec.provider)
            .or_default()
            .insert(spec.name.clone());
    }
    let selected: Vec<&ProviderFilter> = filters.iter().collect();

    let files = python_files(corpus_root);
    let totals = files
        .par_iter()
        .map(|path| {
            let bytes = match std::fs::read(path) {
                Ok(b) => b,
                Err(err) => {
                    log::warn!("skipping {}: {err}", path.display());
                    return BTreeMap::new();
                }
            };
            let text = String::from_utf8_lossy(&bytes);
            let shown = path.to_string_lossy();
            let mut names = BTreeSet::new();
            for f in &selected {
                if file_relevant(&shown, &text, f) {
                    if let Some(ns) = names_by_provider.get(&f.provider) {
                        names.extend(ns.iter().cloned());
                    }
                }
            }
            if names.is_empty() {
                BTreeMap::new()
            } else {
                count_occurrences(&text, &names)
            }
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });

    let mut wanted = BTreeSet::new();
    for f in &selected {
        if let Some(ns) = names_by_provider.get(&f.provider) {
            wanted.extend(ns.iter().cloned());
        }
    }
    Ok(wanted
        .into_iter()
        .map(|name| {
            let count = totals.get(&name).copied().unwrap_or(0);
            FrequencyRecord {
                api_name: name,
                count,
                class: classify_frequency(count),
            }
        })
        .collect())
}

pub fn records_to_jsonl(records: &[FrequencyRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
