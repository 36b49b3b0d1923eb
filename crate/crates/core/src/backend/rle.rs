//! COCO-style uncompressed run-length encoding: column-major runs that start
//! with the count of zeros.

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::grid::Mask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let (w, h) = mask.size();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for u in 0..w {
            for v in 0..h {
                let b = *mask.get(u, v);
                if b != current {
                    counts.push(run);
                    run = 0;
                    current = b;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask, BackendError> {
        let [h, w] = self.size;
        let total: u64 = self
            .counts
            .iter()
            .try_fold(0u64, |acc, &c| acc.checked_add(c))
            .ok_or_else(|| BackendError::Protocol("RLE counts overflow".into()))?;
        if total != (w as u64) * (h as u64) {
            return Err(BackendError::Protocol(format!("RLE counts sum to {total}, expected {}x{}", h, w)));
        }
        let mut mask = Mask::filled(w, h, false);
        let mut pos = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            let value = i % 2 == 1;
            for k in pos..pos + c as usize {
                if value {
                    mask.set(k / h, k % h, true);
                }
            }
            pos += c as usize;
        }
        Ok(mask)
    }
}
