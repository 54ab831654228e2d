//! In-memory token streams: what a trace file or the synthetic generator
//! hands to the engine.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// All tokens of one (layer, head): prefill rows first, then decode rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStream {
    pub layer: usize,
    pub head: usize,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvStream {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub prefill_len: usize,
    pub decode_len: usize,
    /// Layer-major: index `layer * num_heads + head`.
    pub heads: Vec<HeadStream>,
    /// Token id per position, when known (synthetic streams).
    pub token_ids: Option<Vec<u32>>,
}

impl KvStream {
    pub fn total_len(&self) -> usize {
        self.prefill_len + self.decode_len
    }

    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadStream> {
        self.heads.get(layer * self.num_heads + head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.num_layers * self.num_heads {
            return Err(Error::usage(format!(
                "stream declares {}x{} heads but holds {}",
                self.num_layers,
                self.num_heads,
                self.heads.len()
            )));
        }
        let total = self.total_len();
        for (i, h) in self.heads.iter().enumerate() {
            if h.layer * self.num_heads + h.head != i {
                return Err(Error::usage(format!("head {i} is out of canonical order")));
            }
            for m in [&h.k, &h.v] {
                if m.rows() != total || m.cols() != self.head_dim {
                    return Err(Error::usage(format!(
                        "layer {} head {} holds {}x{}, expected {total}x{}",
                        h.layer,
                        h.head,
                        m.rows(),
                        m.cols(),
                        self.head_dim
                    )));
                }
            }
        }
        if let Some(ids) = &self.token_ids {
            if ids.len() != total {
                return Err(Error::usage("token id count does not match stream length"));
            }
        }
        Ok(())
    }
}
