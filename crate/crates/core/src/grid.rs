//! Dense `L × N` (time × node) arrays and masks, row-major by time.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    len: usize,
    nodes: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(len: usize, nodes: usize) -> Self {
        Self::filled(len, nodes, 0.0)
    }

    pub fn filled(len: usize, nodes: usize, value: f64) -> Self {
        Grid {
            len,
            nodes,
            values: vec![value; len * nodes],
        }
    }

    pub fn from_vec(len: usize, nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != len * nodes {
            return Err(Error::shape(
                alloc::format!("{len}x{nodes}"),
                alloc::format!("{} values", values.len()),
            ));
        }
        Ok(Grid { len, nodes, values })
    }

    pub fn from_fn(len: usize, nodes: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(len * nodes);
        for l in 0..len {
            for n in 0..nodes {
                values.push(f(l, n));
            }
        }
        Grid { len, nodes, values }
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.len, self.nodes)
    }

    #[inline]
    pub fn get(&self, l: usize, n: usize) -> f64 {
        self.values[l * self.nodes + n]
    }

    #[inline]
    pub fn set(&mut self, l: usize, n: usize, v: f64) {
        self.values[l * self.nodes + n] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            len: self.len,
            nodes: self.nodes,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_shape(&self, other_shape: (usize, usize)) -> Result<()> {
        if self.shape() != other_shape {
            return Err(Error::shape(
                alloc::format!("{}x{}", other_shape.0, other_shape.1),
                alloc::format!("{}x{}", self.len, self.nodes),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Column `n` as an owned series over time.
    pub fn node_series(&self, n: usize) -> Vec<f64> {
        (0..self.len).map(|l| self.get(l, n)).collect()
    }

    /// Rows `start..start + len` as a new grid.
    pub fn window(&self, start: usize, len: usize) -> Grid {
        let a = start * self.nodes;
        let b = (start + len) * self.nodes;
        Grid {
            len,
            nodes: self.nodes,
            values: self.values[a..b].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    len: usize,
    nodes: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(len: usize, nodes: usize) -> Self {
        Mask {
            len,
            nodes,
            bits: vec![false; len * nodes],
        }
    }

    pub fn full(len: usize, nodes: usize) -> Self {
        Mask {
            len,
            nodes,
            bits: vec![true; len * nodes],
        }
    }

    pub fn from_vec(len: usize, nodes: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != len * nodes {
            return Err(Error::shape(
                alloc::format!("{len}x{nodes}"),
                alloc::format!("{} entries", bits.len()),
            ));
        }
        Ok(Mask { len, nodes, bits })
    }

    pub fn from_fn(len: usize, nodes: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(len * nodes);
        for l in 0..len {
            for n in 0..nodes {
                bits.push(f(l, n));
            }
        }
        Mask { len, nodes, bits }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.len, self.nodes)
    }

    #[inline]
    pub fn get(&self, l: usize, n: usize) -> bool {
        self.bits[l * self.nodes + n]
    }

    #[inline]
    pub fn set(&mut self, l: usize, n: usize, v: bool) {
        self.bits[l * self.nodes + n] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            len: self.len,
            nodes: self.nodes,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            len: self.len,
            nodes: self.nodes,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask {
            len: self.len,
            nodes: self.nodes,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn window(&self, start: usize, len: usize) -> Mask {
        let a = start * self.nodes;
        let b = (start + len) * self.nodes;
        Mask {
            len,
            nodes: self.nodes,
            bits: self.bits[a..b].to_vec(),
        }
    }
}
