//! Name-keyed model registry. The four logistic models are built in; callers
//! can register additional names (aliases or variants with different prior
//! defaults) and the CLI will accept them without changes to the training
//! code.

use crate::error::Error;
use crate::models::ModelKind;
use crate::vi::PriorSpec;
use crate::Result;
use std::collections::BTreeMap;

/// Everything the engine needs to train under a registered name: which
/// parameters exist (via the kind) and the default priors.
#[derive(Debug, Clone)]
pub struct ModelRegistration {
    pub name: String,
    pub kind: ModelKind,
    pub priors: PriorSpec,
}

impl ModelRegistration {
    pub fn new(name: &str, kind: ModelKind) -> Self {
        ModelRegistration { name: name.to_string(), kind, priors: PriorSpec::default() }
    }
}

/// Write-once lookup table; sorted iteration order by construction.
#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<String, ModelRegistration>,
}

impl Registry {
    /// Registry with the built-in names "1pl", "2pl", "3pl", "4pl".
    pub fn with_builtins() -> Self {
        let mut registry = Registry { entries: BTreeMap::new() };
        for kind in
            [ModelKind::OneParam, ModelKind::TwoParam, ModelKind::ThreeParam, ModelKind::FourParam]
        {
            registry
                .register(ModelRegistration::new(kind.name(), kind))
                .expect("builtin names are distinct");
        }
        registry
    }

    pub fn register(&mut self, registration: ModelRegistration) -> Result<()> {
        let name = registration.name.clone();
        if name.is_empty() || name != name.to_lowercase() {
            return Err(Error::Contract(format!(
                "model names must be non-empty lowercase, got '{name}'"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateModel(name));
        }
        self.entries.insert(name, registration);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Result<&ModelRegistration> {
        self.entries.get(name).ok_or_else(|| Error::UnknownModel {
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    /// Registered names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
