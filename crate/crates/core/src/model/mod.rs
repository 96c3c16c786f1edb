//! Declarative package values, recipe loading and DAG operations.

mod ops;
mod recipe;
mod version;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ops::{make_variant, rewrite_inputs, transitive_input_names, transitive_inputs, Field, InputsOverride, Overrides, Rewrite};
pub use recipe::{load_recipes, recipe_path_from_env, RecipeSet, PACKAGE_PATH_VAR};
pub use version::compare_versions;

use crate::base32;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{}:{line}:{column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", file.display())]
    Invalid { file: PathBuf, message: String },
    #[error("unknown package `{wanted}`{}", suggestion_text(.suggestions))]
    UnknownPackage { wanted: String, suggestions: Vec<String> },
    #[error("{package}: input `{label}` refers to unknown package `{wanted}`")]
    UnresolvedInput {
        package: String,
        label: String,
        wanted: String,
    },
    #[error("inheritance cycle: {}", .0.join(" -> "))]
    InheritanceCycle(Vec<String>),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    InputCycle(Vec<String>),
    #[error("{package}: duplicate input label `{label}`")]
    DuplicateLabel { package: String, label: String },
    #[error("{0} is defined twice in the same recipe directory")]
    DuplicateDefinition(String),
    #[error("unknown package field `{0}`")]
    UnknownField(String),
    #[error("invalid value for `{field}`: {message}")]
    InvalidField { field: String, message: String },
    #[error("invalid package reference `{0}`")]
    InvalidRef(String),
}

fn suggestion_text(s: &[String]) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!(" (did you mean {}?)", s.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FetchMethod {
    #[serde(rename = "file-fetch")]
    FileFetch,
}

/// Where a package's source comes from and what it must hash to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    pub method: FetchMethod,
    pub uri: String,
    /// Base32 SHA-256 of the source (52 characters).
    pub sha256: String,
}

impl Origin {
    pub fn validate(&self) -> Result<(), String> {
        if !base32::is_valid(&self.sha256, 32) {
            return Err(format!("sha256 `{}` is not a 52-character base32 digest", self.sha256));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuildSystem {
    /// Runs the recipe's commands with the bootstrap shell.
    Generic,
    /// Writes the files listed in the recipe's arguments.
    Trivial,
    /// A symlink forest over the inputs.
    Union,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchPathSpec {
    pub variable: String,
    pub subdirectory: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    ":".to_string()
}

impl SearchPathSpec {
    pub fn new(variable: &str, subdirectory: &str) -> Self {
        Self {
            variable: variable.to_string(),
            subdirectory: subdirectory.to_string(),
            separator: default_separator(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut bytes = self.variable.bytes();
        let ok = matches!(bytes.next(), Some(b'A'..=b'Z' | b'_'))
            && bytes.all(|b| matches!(b, b'A'..=b'Z' | b'0'..=b'9' | b'_'));
        if !ok {
            return Err(format!("search path variable `{}` must match [A-Z_][A-Z0-9_]*", self.variable));
        }
        if self.subdirectory.starts_with('/') || self.subdirectory.split('/').any(|c| c == "..") {
            return Err(format!("search path subdirectory `{}` must stay inside the package", self.subdirectory));
        }
        Ok(())
    }
}

/// A file written by the trivial build system.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileSpec {
    pub path: String,
    /// Octal permission string; only the executable bits survive.
    pub mode: String,
    pub content: String,
}

/// Build-system parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Arguments {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub configure_flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "file_triples")]
    pub files: Vec<FileSpec>,
}

mod file_triples {
    use super::FileSpec;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(files: &[FileSpec], s: S) -> Result<S::Ok, S::Error> {
        let triples: Vec<[&str; 3]> = files
            .iter()
            .map(|f| [f.path.as_str(), f.mode.as_str(), f.content.as_str()])
            .collect();
        triples.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<FileSpec>, D::Error> {
        let triples: Vec<[String; 3]> = Vec::deserialize(d)?;
        Ok(triples
            .into_iter()
            .map(|[path, mode, content]| FileSpec { path, mode, content })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Metadata {
    pub synopsis: Option<String>,
    pub description: Option<String>,
    pub home_page: Option<String>,
    pub license: Option<String>,
}

/// Names a package, optionally pinning its version.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

impl PackageRef {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            version: None,
        }
    }

    pub fn exact(name: &str, version: &str) -> Self {
        Self {
            name: name.to_string(),
            version: Some(version.to_string()),
        }
    }

    pub fn matches(&self, pkg: &Package) -> bool {
        pkg.name == self.name && self.version.as_ref().is_none_or(|v| *v == pkg.version)
    }
}

impl fmt::Display for PackageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            Some(v) => write!(f, "{}@{}", self.name, v),
            None => f.write_str(&self.name),
        }
    }
}

impl FromStr for PackageRef {
    type Err = ModelError;

    /// `name` or `name@version`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, version) = match s.split_once('@') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        if name.is_empty() || version.is_some_and(str::is_empty) {
            return Err(ModelError::InvalidRef(s.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            version: version.map(str::to_string),
        })
    }
}

/// A labeled edge of the package DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Input {
    pub label: String,
    pub package: Arc<Package>,
}

impl Input {
    pub fn new(label: &str, package: Arc<Package>) -> Self {
        Self {
            label: label.to_string(),
            package,
        }
    }
}

/// A resolved package value. Inputs point directly at other package values,
/// so a `Package` is the root of its whole dependency DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Package {
    pub name: String,
    pub version: String,
    pub source: Option<Origin>,
    pub build_system: BuildSystem,
    pub inputs: Vec<Input>,
    pub arguments: Arguments,
    pub search_paths: Vec<SearchPathSpec>,
    pub metadata: Metadata,
    /// The package this one was declared to inherit from, if any.
    pub inherit_from: Option<PackageRef>,
}

impl Package {
    pub fn new(name: &str, version: &str, build_system: BuildSystem) -> Self {
        Self {
            name: name.to_string(),
            version: version.to_string(),
            source: None,
            build_system,
            inputs: Vec::new(),
            arguments: Arguments::default(),
            search_paths: Vec::new(),
            metadata: Metadata::default(),
            inherit_from: None,
        }
    }

    /// `name-version`, also the store item name of the build output.
    pub fn full_name(&self) -> String {
        format!("{}-{}", self.name, self.version)
    }

    pub fn input(&self, label: &str) -> Option<&Arc<Package>> {
        self.inputs.iter().find(|i| i.label == label).map(|i| &i.package)
    }

    pub fn reference(&self) -> PackageRef {
        PackageRef::exact(&self.name, &self.version)
    }

    pub(crate) fn check_labels(&self) -> Result<(), ModelError> {
        for (i, input) in self.inputs.iter().enumerate() {
            if self.inputs[..i].iter().any(|o| o.label == input.label) {
                return Err(ModelError::DuplicateLabel {
                    package: self.full_name(),
                    label: input.label.clone(),
                });
            }
        }
        Ok(())
    }
}
