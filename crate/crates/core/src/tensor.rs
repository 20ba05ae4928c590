// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major containers for per-head states plus the handful of vector
//! helpers the rest of the crate needs.

use crate::error::{Error, Result};

/// A `(layer, head)` pair.
pub type Position = (usize, usize);

/// Inner product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Euclidean norm accumulated in `f64`.
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: expected length {expected}, got {got}"
        )))
    }
}

/// `[layers, heads, dim]` tensor of per-head states.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    layers: usize,
    heads: usize,
    dim: usize,
    data: Vec<f32>,
}

impl HeadTensor {
    /// All-zero tensor.
    pub fn zeros(layers: usize, heads: usize, dim: usize) -> Self {
        Self {
            layers,
            heads,
            dim,
            data: vec![0.0; layers * heads * dim],
        }
    }

    /// Wrap a flat row-major buffer.
    pub fn from_vec(layers: usize, heads: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        check_len("head tensor", data.len(), layers * heads * dim)?;
        Ok(Self {
            layers,
            heads,
            dim,
            data,
        })
    }

    /// Number of layers.
    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Number of heads per layer.
    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Length of each state vector.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat row-major view.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Consume into the flat buffer.
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Whether `(layer, head)` lies inside the tensor.
    pub fn contains(&self, (layer, head): Position) -> bool {
        layer < self.layers && head < self.heads
    }

    fn offset(&self, (layer, head): Position) -> usize {
        debug_assert!(self.contains((layer, head)));
        (layer * self.heads + head) * self.dim
    }

    /// State at `(layer, head)`.
    ///
    /// Panics if the position is out of range.
    pub fn get(&self, pos: Position) -> &[f32] {
        assert!(self.contains(pos), "position {pos:?} out of range");
        let o = self.offset(pos);
        &self.data[o..o + self.dim]
    }

    /// Mutable state at `(layer, head)`.
    pub fn get_mut(&mut self, pos: Position) -> &mut [f32] {
        assert!(self.contains(pos), "position {pos:?} out of range");
        let o = self.offset(pos);
        &mut self.data[o..o + self.dim]
    }

    /// Iterate `(position, state)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (Position, &[f32])> + '_ {
        let heads = self.heads;
        self.data
            .chunks_exact(self.dim.max(1))
            .enumerate()
            .map(move |(i, s)| ((i / heads, i % heads), s))
    }

    /// Sum over every head, in `f64`.
    pub fn sum_heads(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for (_, s) in self.iter() {
            for (a, &x) in acc.iter_mut().zip(s) {
                *a += f64::from(x);
            }
        }
        acc
    }
}

/// `[layers, heads, tokens, dim]` tensor of per-head, per-token states.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    layers: usize,
    heads: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenTensor {
    /// All-zero tensor.
    pub fn zeros(layers: usize, heads: usize, tokens: usize, dim: usize) -> Self {
        Self {
            layers,
            heads,
            tokens,
            dim,
            data: vec![0.0; layers * heads * tokens * dim],
        }
    }

    /// Wrap a flat row-major buffer.
    pub fn from_vec(
        layers: usize,
        heads: usize,
        tokens: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_len("token tensor", data.len(), layers * heads * tokens * dim)?;
        Ok(Self {
            layers,
            heads,
            tokens,
            dim,
            data,
        })
    }

    /// Number of layers.
    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Number of heads per layer.
    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Number of tokens, CLS included.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Length of each state vector.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat row-major view.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// State of token `token` written by head `(layer, head)`.
    pub fn get(&self, (layer, head): Position, token: usize) -> &[f32] {
        assert!(layer < self.layers && head < self.heads && token < self.tokens);
        let o = ((layer * self.heads + head) * self.tokens + token) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Mutable state of one token for one head.
    pub fn get_mut(&mut self, (layer, head): Position, token: usize) -> &mut [f32] {
        assert!(layer < self.layers && head < self.heads && token < self.tokens);
        let o = ((layer * self.heads + head) * self.tokens + token) * self.dim;
        &mut self.data[o..o + self.dim]
    }
}
