//! Queries and transformations over package DAGs.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::Value;

use super::{
    Arguments, BuildSystem, Input, ModelError, Origin, Package, PackageRef, RecipeSet, SearchPathSpec,
};

/// Every direct and indirect input of `pkg`, depth-first, first occurrence
/// wins. `pkg` itself is not included.
pub fn transitive_inputs(pkg: &Package) -> Vec<(String, Arc<Package>)> {
    fn walk(pkg: &Package, out: &mut Vec<(String, Arc<Package>)>) {
        for input in &pkg.inputs {
            if out.iter().any(|(_, p)| p == &input.package) {
                continue;
            }
            out.push((input.label.clone(), input.package.clone()));
            walk(&input.package, out);
        }
    }
    let mut out = Vec::new();
    walk(pkg, &mut out);
    out
}

/// How a variant changes its base's inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputsOverride {
    Replace(Vec<Input>),
    /// New entries go before the base's inputs.
    Prepend(Vec<Input>),
    Append(Vec<Input>),
}

/// One overridden field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Field {
    Name(String),
    Version(String),
    Source(Option<Origin>),
    BuildSystem(BuildSystem),
    Inputs(InputsOverride),
    Arguments(Arguments),
    SearchPaths(Vec<SearchPathSpec>),
    Synopsis(Option<String>),
    Description(Option<String>),
    HomePage(Option<String>),
    License(Option<String>),
}

impl Field {
    /// Parses a field given by its recipe key. Package references in
    /// input lists are resolved against `recipes`.
    pub fn parse(key: &str, value: Value, recipes: &RecipeSet) -> Result<Self, ModelError> {
        fn de<T: serde::de::DeserializeOwned>(key: &str, v: Value) -> Result<T, ModelError> {
            serde_json::from_value(v).map_err(|e| ModelError::InvalidField {
                field: key.to_string(),
                message: e.to_string(),
            })
        }
        let inputs = |v: Value| -> Result<Vec<Input>, ModelError> {
            let pairs: Vec<(String, PackageRef)> = de(key, v)?;
            pairs
                .into_iter()
                .map(|(label, r)| Ok(Input::new(&label, recipes.resolve(&r)?)))
                .collect()
        };
        Ok(match key {
            "name" => Field::Name(de(key, value)?),
            "version" => Field::Version(de(key, value)?),
            "source" => Field::Source(de(key, value)?),
            "build-system" => Field::BuildSystem(de(key, value)?),
            "inputs" => Field::Inputs(InputsOverride::Replace(inputs(value)?)),
            "prepend-inputs" => Field::Inputs(InputsOverride::Prepend(inputs(value)?)),
            "append-inputs" => Field::Inputs(InputsOverride::Append(inputs(value)?)),
            "arguments" => Field::Arguments(de(key, value)?),
            "search-paths" => Field::SearchPaths(de(key, value)?),
            "synopsis" => Field::Synopsis(de(key, value)?),
            "description" => Field::Description(de(key, value)?),
            "home-page" => Field::HomePage(de(key, value)?),
            "license" => Field::License(de(key, value)?),
            other => return Err(ModelError::UnknownField(other.to_string())),
        })
    }
}

/// A partial field map applied by [`make_variant`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    fields: Vec<Field>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, field: Field) -> Self {
        self.fields.push(field);
        self
    }

    /// Builds overrides from `(recipe key, JSON value)` pairs.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, Value)>,
        recipes: &RecipeSet,
    ) -> Result<Self, ModelError> {
        let mut o = Self::new();
        for (k, v) in pairs {
            o = o.set(Field::parse(k, v, recipes)?);
        }
        Ok(o)
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// A copy of `base` with the overridden fields replaced. `base` is not
/// touched.
pub fn make_variant(base: &Package, overrides: &Overrides) -> Result<Package, ModelError> {
    let mut pkg = base.clone();
    for field in &overrides.fields {
        match field.clone() {
            Field::Name(v) => pkg.name = v,
            Field::Version(v) => pkg.version = v,
            Field::Source(v) => pkg.source = v,
            Field::BuildSystem(v) => pkg.build_system = v,
            Field::Inputs(InputsOverride::Replace(v)) => pkg.inputs = v,
            Field::Inputs(InputsOverride::Prepend(mut v)) => {
                v.append(&mut pkg.inputs);
                pkg.inputs = v;
            }
            Field::Inputs(InputsOverride::Append(mut v)) => pkg.inputs.append(&mut v),
            Field::Arguments(v) => pkg.arguments = v,
            Field::SearchPaths(v) => pkg.search_paths = v,
            Field::Synopsis(v) => pkg.metadata.synopsis = v,
            Field::Description(v) => pkg.metadata.description = v,
            Field::HomePage(v) => pkg.metadata.home_page = v,
            Field::License(v) => pkg.metadata.license = v,
        }
    }
    pkg.check_labels()?;
    Ok(pkg)
}

/// Result of [`rewrite_inputs`].
#[derive(Debug, Clone)]
pub struct Rewrite {
    pub package: Arc<Package>,
    /// Number of edges whose target changed.
    pub rewrites: usize,
}

/// Points every edge labeled `label`, at any depth, to `replacement`.
/// Subgraphs without such an edge are shared with the original DAG.
pub fn rewrite_inputs(root: &Arc<Package>, label: &str, replacement: &Arc<Package>) -> Rewrite {
    fn go(
        pkg: &Arc<Package>,
        label: &str,
        replacement: &Arc<Package>,
        memo: &mut HashMap<*const Package, Arc<Package>>,
        count: &mut usize,
    ) -> Arc<Package> {
        let key = Arc::as_ptr(pkg);
        if let Some(done) = memo.get(&key) {
            return done.clone();
        }
        let mut changed = false;
        let mut inputs = Vec::with_capacity(pkg.inputs.len());
        for input in &pkg.inputs {
            let target = if input.label == label {
                replacement.clone()
            } else {
                go(&input.package, label, replacement, memo, count)
            };
            if target != input.package {
                changed = true;
                if input.label == label {
                    *count += 1;
                }
            }
            inputs.push(Input {
                label: input.label.clone(),
                package: target,
            });
        }
        let result = if changed {
            let mut p = (**pkg).clone();
            p.inputs = inputs;
            Arc::new(p)
        } else {
            pkg.clone()
        };
        memo.insert(key, result.clone());
        result
    }
    let mut memo = HashMap::new();
    let mut rewrites = 0;
    let package = go(root, label, replacement, &mut memo, &mut rewrites);
    Rewrite { package, rewrites }
}

/// Full names of the packages `transitive_inputs` returns.
pub fn transitive_input_names(pkg: &Package) -> Vec<String> {
    transitive_inputs(pkg).iter().map(|(_, p)| p.full_name()).collect()
}
