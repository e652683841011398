//! Named parameter storage with per-parameter freeze flags.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Which model component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    PromptEncoder,
    Cemb,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Encoder, ParamGroup::PromptEncoder, ParamGroup::Cemb, ParamGroup::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::PromptEncoder => "prompt",
            ParamGroup::Cemb => "cemb",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named parameters. Names are `group.layer.tensor`;
/// the group is derived from the first path component, so every parameter
/// belongs to exactly one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        let group = ParamGroup::from_name(&name)
            .ok_or_else(|| Error::Invariant(format!("parameter `{name}` has no known group prefix")))?;
        if self.index.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group,
            value,
            frozen: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Invariant(format!("missing parameter `{name}`")))
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn numel(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every parameter as a graph leaf. Frozen parameters (or all of
    /// them, when `trainable` is false) do not require gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| (p.name.clone(), g.leaf(p.value.clone(), trainable && !p.frozen)))
            .collect();
        Bindings { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    /// Bindings for vars created elsewhere, e.g. by a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("parameter `{name}` not bound")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
