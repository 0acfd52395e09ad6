//! Flat parameter vectors with a named-segment layout.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// A flat real array plus the segments that tile it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    /// Builds a zero vector from `(name, len)` pairs laid out back to back.
    pub fn zeros(shape: &[(&str, usize)]) -> Self {
        let mut layout = Vec::with_capacity(shape.len());
        let mut offset = 0;
        for &(name, len) in shape {
            layout.push(Segment {
                name: name.into(),
                offset,
                len,
            });
            offset += len;
        }
        ParamVector {
            values: alloc::vec![0.0; offset],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: alloc::vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Checks that segments are contiguous, non-overlapping and exhaust the array.
    pub fn check_layout(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.layout {
            if s.offset != expected {
                return Err(Error::InvalidConfig(alloc::format!(
                    "segment {} starts at {} but previous ended at {}",
                    s.name,
                    s.offset,
                    expected
                )));
            }
            expected += s.len;
        }
        if expected != self.values.len() {
            return Err(Error::dims("param layout", expected, self.values.len()));
        }
        Ok(())
    }

    /// Concatenates the named segments (in layout order) into a new vector.
    pub fn gather(&self, names: &[&str]) -> ParamVector {
        let mut shape = Vec::new();
        let mut values = Vec::new();
        for s in &self.layout {
            if names.contains(&s.name.as_str()) {
                shape.push((s.name.as_str(), s.len));
                values.extend_from_slice(&self.values[s.offset..s.offset + s.len]);
            }
        }
        let mut out = ParamVector::zeros(&shape);
        out.values = values;
        out
    }

    /// Writes every segment of `sub` back into the same-named segment of `self`.
    pub fn scatter(&mut self, sub: &ParamVector) -> Result<()> {
        for s in &sub.layout {
            let dst = self
                .segment(&s.name)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(alloc::format!("no segment {}", s.name)))?;
            if dst.len != s.len {
                return Err(Error::dims("segment scatter", dst.len, s.len));
            }
            self.values[dst.offset..dst.offset + dst.len]
                .copy_from_slice(&sub.values[s.offset..s.offset + s.len]);
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }
}
