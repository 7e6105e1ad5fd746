//! Uncompressed row-major run-length encoding of binary masks.
//!
//! Runs alternate starting with background, so a mask whose first pixel is foreground begins
//! with a zero-length run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn encode(mask: &BinaryMask) -> MaskRle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &v in mask.as_slice() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    MaskRle {
        size: [mask.height(), mask.width()],
        counts,
    }
}

pub fn decode(rle: &MaskRle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total = h
        .checked_mul(w)
        .ok_or_else(|| Error::BadRle(format!("size {h}x{w} overflows")))?;
    let sum = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| Error::BadRle("run lengths overflow".into()))?;
    if sum != total as u64 {
        return Err(Error::BadRle(format!(
            "runs cover {sum} pixels, mask has {total}"
        )));
    }
    let mut data = Vec::with_capacity(total);
    let mut value = false;
    for &c in &rle.counts {
        data.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    BinaryMask::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_masks() {
        assert_eq!(encode(&BinaryMask::zeros(3, 5)).counts, vec![15]);
        assert_eq!(encode(&BinaryMask::ones(3, 5)).counts, vec![0, 15]);
    }

    #[test]
    fn rejects_bad_totals() {
        let rle = MaskRle {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(matches!(decode(&rle), Err(Error::BadRle(_))));
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = BinaryMask::from_vec(h, w, bits[..h * w].to_vec()).unwrap();
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }
}
