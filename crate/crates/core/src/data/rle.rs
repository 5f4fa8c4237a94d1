//! Uncompressed COCO-style run-length encoding, column-major.

use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Alternating run lengths over the column-major scan, starting with a
/// (possibly empty) run of zeros.
pub fn rle_encode(mask: &Mask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let bit = mask.get(y, x);
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u64], height: usize, width: usize) -> Result<Mask> {
    let total: u64 = counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::Validation(format!(
            "rle counts sum to {total}, expected {height}x{width} = {}",
            height * width
        )));
    }
    let mut bits = vec![false; height * width];
    let mut pos = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        let on = i % 2 == 1;
        for p in pos..pos + c as usize {
            if on {
                let (x, y) = (p / height, p % height);
                bits[y * width + x] = true;
            }
        }
        pos += c as usize;
    }
    Mask::new(height, width, bits)
}
