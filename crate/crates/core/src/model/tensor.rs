use crate::error::{Error, Result};

/// Attention scores of one layer, shaped `heads × query_len × key_len`.
///
/// Query row `q` refers to absolute position `query_offset + q`. Keys after
/// that position hold `0.0` when `normalized` and `-inf` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    /// 1-based block number.
    pub layer: usize,
    pub num_heads: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub query_offset: usize,
    pub normalized: bool,
    pub data: Vec<f64>,
}

impl AttentionTensor {
    pub(crate) fn empty(
        layer: usize,
        num_heads: usize,
        query_len: usize,
        key_len: usize,
        query_offset: usize,
        normalized: bool,
    ) -> Self {
        let fill = if normalized { 0.0 } else { f64::NEG_INFINITY };
        Self {
            layer,
            num_heads,
            query_len,
            key_len,
            query_offset,
            normalized,
            data: vec![fill; num_heads * query_len * key_len],
        }
    }

    fn index(&self, head: usize, query: usize) -> usize {
        (head * self.query_len + query) * self.key_len
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = self.index(head, query);
        &self.data[start..start + self.key_len]
    }

    pub(crate) fn row_mut(&mut self, head: usize, query: usize) -> &mut [f64] {
        let start = self.index(head, query);
        &mut self.data[start..start + self.key_len]
    }

    /// The visible part of row `query` (keys up to its own position).
    pub fn visible_row(&self, head: usize, query: usize) -> &[f64] {
        let visible = self.query_offset + query + 1;
        &self.row(head, query)[..visible.min(self.key_len)]
    }

    /// Visible rows of the last query for every head.
    pub fn last_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_heads)
            .map(|h| self.visible_row(h, self.query_len - 1).to_vec())
            .collect()
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.row(head, query)[key]
    }

    /// Head-averaged matrix, `query_len × key_len` row-major.
    pub fn head_average(&self) -> Vec<f64> {
        let n = self.query_len * self.key_len;
        let mut avg = vec![0.0; n];
        for head in 0..self.num_heads {
            let block = &self.data[head * n..(head + 1) * n];
            for (a, v) in avg.iter_mut().zip(block) {
                *a += v;
            }
        }
        let scale = 1.0 / self.num_heads as f64;
        avg.iter_mut().for_each(|a| *a *= scale);
        avg
    }

    /// Check the normalization and causal-mask invariants.
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        for head in 0..self.num_heads {
            for query in 0..self.query_len {
                let pos = self.query_offset + query;
                let row = self.row(head, query);
                let (visible, future) = row.split_at((pos + 1).min(self.key_len));
                if self.normalized {
                    if future.iter().any(|&v| v != 0.0) {
                        return Err(Error::Numeric(format!(
                            "layer {} head {head} query {pos}: nonzero weight on a future key",
                            self.layer
                        )));
                    }
                    let sum: f64 = visible.iter().sum();
                    if visible.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > tolerance {
                        return Err(Error::Numeric(format!(
                            "layer {} head {head} query {pos}: row sums to {sum}",
                            self.layer
                        )));
                    }
                } else if future.iter().any(|&v| v != f64::NEG_INFINITY) {
                    return Err(Error::Numeric(format!(
                        "layer {} head {head} query {pos}: future key not masked",
                        self.layer
                    )));
                }
            }
        }
        Ok(())
    }
}
