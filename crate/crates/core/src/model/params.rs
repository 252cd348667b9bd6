use crate::ctensor::{RealTensor, Tape, Var};
use crate::error::{Error, Result};

/// Named, ordered parameter buffers. Complex parameters are stored as two
/// real buffers (`.re` / `.im`) and treated independently everywhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<RealTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: RealTensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[RealTensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [RealTensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&RealTensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealTensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of stored scalars across all buffers.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(RealTensor::len).sum()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("parameter sets have different layouts"));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}`: shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Puts every buffer on the tape, as differentiable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }
}
