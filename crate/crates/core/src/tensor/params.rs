use sha2::{Digest, Sha256};

use super::{Result, Tensor, TensorError};

/// Which checkpoint namespace a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    /// Pretrained dual-encoder weights; frozen during prompt tuning.
    Backbone,
    /// Prompts, projection heads and gates.
    Tunable,
}

impl Namespace {
    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Backbone => "backbone",
            Namespace::Tunable => "tunable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Namespace::Backbone),
            "tunable" => Some(Namespace::Tunable),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) ns: Namespace,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn namespace(self) -> Namespace {
        self.ns
    }

    pub fn index(self) -> usize {
        self.index
    }
}

/// Named parameter tensors belonging to one namespace.
///
/// A frozen store still binds onto a tape, but its leaves never request
/// gradients, so no optimizer can touch it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    ns: Namespace,
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: bool,
}

impl ParamStore {
    pub fn new(ns: Namespace) -> Self {
        Self {
            ns,
            names: Vec::new(),
            values: Vec::new(),
            frozen: false,
        }
    }

    pub fn namespace(&self) -> Namespace {
        self.ns
    }

    /// Panics on a duplicate name: names are checkpoint keys.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId {
            ns: self.ns,
            index: self.values.len() - 1,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        debug_assert_eq!(id.ns, self.ns, "parameter from another namespace");
        &self.values[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert_eq!(id.ns, self.ns, "parameter from another namespace");
        &mut self.values[id.index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|index| ParamId {
            ns: self.ns,
            index,
        })
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        let ns = self.ns;
        (0..self.values.len()).map(move |index| ParamId { ns, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Overwrite a value by name, keeping the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| TensorError::Invalid {
            op: "assign",
            reason: format!("unknown parameter {name}"),
        })?;
        let slot = self.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, in insertion order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.ns.as_str().as_bytes());
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
