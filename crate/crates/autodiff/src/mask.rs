use std::fmt;

use crate::error::{contract, Result};

/// Boolean attention-permission matrix; `allows(q, k)` is true when query
/// row `q` may attend to key column `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allow.len() != rows * cols {
            return contract(format!(
                "mask {rows}x{cols} with {} entries",
                allow.len()
            ));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::new(rows, cols, allow)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true).expect("positive dimensions")
    }

    /// Token-causal mask: row `r` sees columns `0..=r`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r).expect("positive dimensions")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// Renders the mask as a grid of `0`/`1` characters, one row per line.
impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            let line: String = self
                .row(r)
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
