//! Run-length encoding of binary masks over the row-major (z-major) flattening.
//!
//! `counts` alternates zero-runs and one-runs and always starts with a
//! zero-run, which is 0 when the first element is set.

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub shape: Vec<usize>,
    pub counts: Vec<u64>,
}

impl Rle {
    /// Encodes `data`, treating any nonzero byte as set.
    pub fn encode(shape: &[usize], data: impl IntoIterator<Item = u8>) -> Self {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u64;
        for v in data {
            let bit = u8::from(v != 0);
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            shape: shape.to_vec(),
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of set elements.
    pub fn ones(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    /// Expands to one 0/1 byte per element.
    pub fn decode(&self) -> Result<Vec<u8>, ApiError> {
        let total: u64 = self.counts.iter().sum();
        if total != self.len() as u64 {
            return Err(ApiError::bad_request(
                "bad_rle",
                format!("runs cover {total} elements, shape holds {}", self.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.len());
        for (i, &c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        Ok(out)
    }
}
