//! API specifications and the exact-name index over them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer::is_identifier;
use crate::retriever::tokenize;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    #[serde(alias = "AWS", alias = "Aws")]
    Aws,
    #[serde(alias = "Azure", alias = "AZURE")]
    Azure,
}

impl Provider {
    pub const ALL: [Provider; 2] = [Provider::Aws, Provider::Azure];

    pub fn as_str(&self) -> &'static str {
        match self {
            Provider::Aws => "aws",
            Provider::Azure => "azure",
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "aws" => Ok(Provider::Aws),
            "azure" => Ok(Provider::Azure),
            other => Err(format!("unknown provider `{other}` (expected aws or azure)")),
        }
    }
}

/// One API: its identity, the argument configuration its stub accepts, and
/// the documentation used for augmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub provider: Provider,
    pub service: String,
    pub name: String,
    #[serde(default)]
    pub required_params: Vec<String>,
    #[serde(default)]
    pub optional_params: Vec<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub full_doc: String,
}

impl ApiSpec {
    /// Formal parameter order used for positional binding: required first,
    /// then optional.
    pub fn formal_params(&self) -> impl Iterator<Item = &str> {
        self.required_params
            .iter()
            .chain(self.optional_params.iter())
            .map(String::as_str)
    }

    /// Sort key used wherever specs need a total, deterministic order.
    pub fn identity(&self) -> (Provider, &str, &str) {
        (self.provider, self.service.as_str(), self.name.as_str())
    }

    /// Checks the spec invariants. `path` prefixes the field path reported in
    /// errors (e.g. `specs[3]`).
    pub fn validate(&self, path: &str) -> Result<(), IndexError> {
        if !is_identifier(&self.name) {
            return Err(IndexError::Invalid {
                path: format!("{path}.name"),
                message: format!("`{}` is not an identifier", self.name),
            });
        }
        let mut seen = BTreeSet::new();
        for (field, params) in [
            ("required_params", &self.required_params),
            ("optional_params", &self.optional_params),
        ] {
            let mut local = BTreeSet::new();
            for (i, p) in params.iter().enumerate() {
                let at = format!("{path}.{field}[{i}]");
                if !is_identifier(p) {
                    return Err(IndexError::Invalid {
                        path: at,
                        message: format!("parameter `{p}` is not an identifier"),
                    });
                }
                if !local.insert(p.as_str()) {
                    return Err(IndexError::Invalid {
                        path: at,
                        message: format!("parameter `{p}` listed twice"),
                    });
                }
                if !seen.insert(p.as_str()) {
                    return Err(IndexError::Invalid {
                        path: at,
                        message: format!("parameter `{p}` is both required and optional"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no API specifications supplied")]
    Empty,
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("duplicate API ({provider}, {service}, {name})")]
    Duplicate {
        provider: Provider,
        service: String,
        name: String,
    },
    #[error("invalid callee path `{0}`")]
    BadCallee(String),
    #[error("unsupported index version {0}")]
    Version(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Exact-name index over API specs. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ApiIndex {
    entries: BTreeMap<String, Vec<ApiSpec>>,
    doc_count: usize,
    per_provider: BTreeMap<Provider, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    specs: Vec<ApiSpec>,
}

/// Builds an index, rejecting invalid specs and duplicate
/// (provider, service, name) triples.
pub fn build_index(specs: Vec<ApiSpec>) -> Result<ApiIndex, IndexError> {
    if specs.is_empty() {
        return Err(IndexError::Empty);
    }
    let mut seen = BTreeSet::new();
    let mut entries: BTreeMap<String, Vec<ApiSpec>> = BTreeMap::new();
    let mut per_provider = BTreeMap::new();
    let doc_count = specs.len();
    for (i, spec) in specs.into_iter().enumerate() {
        spec.validate(&format!("specs[{i}]"))?;
        let triple = (spec.provider, spec.service.clone(), spec.name.clone());
        if !seen.insert(triple) {
            return Err(IndexError::Duplicate {
                provider: spec.provider,
                service: spec.service,
                name: spec.name,
            });
        }
        *per_provider.entry(spec.provider).or_insert(0) += 1;
        entries.entry(spec.name.clone()).or_default().push(spec);
    }
    for bucket in entries.values_mut() {
        bucket.sort_by(|a, b| a.identity().cmp(&b.identity()));
    }
    Ok(ApiIndex {
        entries,
        doc_count,
        per_provider,
    })
}

impl ApiIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn provider_count(&self, provider: Provider) -> usize {
        self.per_provider.get(&provider).copied().unwrap_or(0)
    }

    /// Exact, case-sensitive existence check on a terminal API name.
    pub fn contains(&self, callee: &str) -> bool {
        self.entries.contains_key(callee)
    }

    /// All specs named `name`, ordered by (provider, service).
    pub fn lookup(&self, name: &str) -> &[ApiSpec] {
        self.entries.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Distinct API names, sorted.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Every spec in (provider, service, name) order.
    pub fn specs(&self) -> Vec<&ApiSpec> {
        let mut all: Vec<&ApiSpec> = self.entries.values().flatten().collect();
        all.sort_by(|a, b| a.identity().cmp(&b.identity()));
        all
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            version: INDEX_FORMAT_VERSION,
            specs: self.specs().into_iter().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<ApiIndex, IndexError> {
        parse_index(text, "<index>")
    }

    pub fn load(path: &Path) -> Result<ApiIndex, IndexError> {
        parse_index(&read(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        std::fs::write(path, self.to_json()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn parse_index(text: &str, label: &str) -> Result<ApiIndex, IndexError> {
    let file: IndexFile = serde_json::from_str(text).map_err(|source| IndexError::Json {
        path: label.to_string(),
        source,
    })?;
    if file.version != INDEX_FORMAT_VERSION {
        return Err(IndexError::Version(file.version));
    }
    build_index(file.specs)
}

/// Reads a spec file: a JSON array of [`ApiSpec`] objects.
pub fn load_specs(path: &Path) -> Result<Vec<ApiSpec>, IndexError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|source| IndexError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<String, IndexError> {
    std::fs::read_to_string(path).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Final segment of a dotted callee path: `client.delete_message` becomes
/// `delete_message`.
pub fn terminal_name(callee_path: &str) -> Result<&str, IndexError> {
    let last = callee_path.rsplit('.').next().unwrap_or("");
    if last.is_empty() {
        return Err(IndexError::BadCallee(callee_path.to_string()));
    }
    Ok(last)
}

/// BM25 key for a spec: the snake_case pieces of its name followed by the
/// tokens of its service identifier, all lowercased.
pub fn retrieval_key(spec: &ApiSpec) -> Vec<String> {
    let mut key = tokenize(&spec.name);
    key.extend(tokenize(&spec.service));
    key
}
