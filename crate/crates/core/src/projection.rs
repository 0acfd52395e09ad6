//! Streamed Rademacher random projection.
//!
//! The implicit `P x d` sign matrix is never stored. Entry `(i, j)` is bit
//! `j % 64` of a keyed hash of `(seed, i, j / 64)`, so any block of columns
//! can be regenerated independently and in any order. Each output coordinate
//! is accumulated over `i` in ascending order whatever the blocking, which
//! keeps results bit-identical across `block_size` choices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::splitmix64;
use crate::{Error, Result};

const ROW_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_block() -> usize {
    256
}

impl ProjectionSpec {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        ProjectionSpec {
            input_dim,
            output_dim,
            seed,
            block_size: default_block(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("projection dims must be >= 1".into()));
        }
        Ok(())
    }

    /// 64 signs for columns `64 * word .. 64 * word + 64` of row `i`; a set bit means -1.
    #[inline]
    pub fn sign_word(&self, i: usize, word: usize) -> u64 {
        let k = splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908);
        splitmix64(k ^ splitmix64(splitmix64(i as u64) ^ word as u64))
    }

    /// `Pi[i][j]` as +1.0 or -1.0.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if (self.sign_word(i, j / 64) >> (j % 64)) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }
}

/// `(1 / sqrt(d)) * Pi^T vec`.
pub fn project(spec: &ProjectionSpec, vec: &[f64]) -> Result<Vec<f64>> {
    Ok(project_batch(spec, &[vec])?.pop().unwrap())
}

/// Projects every row; row `r` of the result equals `project(spec, rows[r])` bit for bit.
pub fn project_batch<R: AsRef<[f64]>>(spec: &ProjectionSpec, rows: &[R]) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    for r in rows {
        if r.as_ref().len() != spec.input_dim {
            return Err(Error::dims(
                "projection input",
                spec.input_dim,
                r.as_ref().len(),
            ));
        }
    }
    let d = spec.output_dim;
    let block = spec.block_size.max(1);
    let mut out = vec![vec![0.0; d]; rows.len()];
    let mut signs = [0.0f64; 64];

    for (chunk_idx, chunk) in rows.chunks(ROW_CHUNK).enumerate() {
        let outs = &mut out[chunk_idx * ROW_CHUNK..chunk_idx * ROW_CHUNK + chunk.len()];
        let mut j0 = 0;
        while j0 < d {
            let j1 = (j0 + block).min(d);
            for i in 0..spec.input_dim {
                let mut j = j0;
                while j < j1 {
                    let word = j / 64;
                    let hi = ((word + 1) * 64).min(j1);
                    let bits = spec.sign_word(i, word);
                    let n = hi - j;
                    for (k, s) in signs[..n].iter_mut().enumerate() {
                        *s = if (bits >> ((j + k) % 64)) & 1 == 1 {
                            -1.0
                        } else {
                            1.0
                        };
                    }
                    for (row, o) in chunk.iter().zip(outs.iter_mut()) {
                        let xi = row.as_ref()[i];
                        for (acc, s) in o[j..hi].iter_mut().zip(&signs[..n]) {
                            *acc += s * xi;
                        }
                    }
                    j = hi;
                }
            }
            j0 = j1;
        }
    }
    let scale = 1.0 / libm::sqrt(d as f64);
    for o in out.iter_mut() {
        for x in o.iter_mut() {
            *x *= scale;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    #[test]
    fn zero_in_zero_out() {
        let spec = ProjectionSpec::new(50, 16, 1);
        assert_eq!(project(&spec, &[0.0; 50]).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn matches_explicit_matrix() {
        let spec = ProjectionSpec::new(13, 70, 9);
        let mut rng = math::rng(2);
        let x = math::gaussian_vec(&mut rng, 13);
        let y = project(&spec, &x).unwrap();
        for j in 0..70 {
            let mut acc = 0.0;
            for i in 0..13 {
                acc += spec.entry(i, j) * x[i];
            }
            assert!((y[j] - acc / libm::sqrt(70.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn block_size_does_not_change_bits() {
        let mut rng = math::rng(4);
        let x = math::gaussian_vec(&mut rng, 300);
        let mut spec = ProjectionSpec::new(300, 200, 77);
        let reference = project(&spec, &x).unwrap();
        for bs in [1, 7, 64, 65, 128, 1000] {
            spec.block_size = bs;
            assert_eq!(project(&spec, &x).unwrap(), reference, "block {bs}");
        }
    }

    #[test]
    fn empty_and_ragged_batches() {
        let spec = ProjectionSpec::new(4, 3, 0);
        let empty: [&[f64]; 0] = [];
        assert!(project_batch(&spec, &empty).unwrap().is_empty());
        assert!(project_batch(&spec, &[vec![1.0; 4], vec![1.0; 3]]).is_err());
        assert!(project(&spec, &[1.0; 5]).is_err());
    }

    #[test]
    fn signs_are_balanced() {
        let spec = ProjectionSpec::new(200, 128, 5);
        let mut neg = 0;
        for i in 0..200 {
            for j in 0..128 {
                if spec.entry(i, j) < 0.0 {
                    neg += 1;
                }
            }
        }
        let frac = neg as f64 / (200.0 * 128.0);
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }
}
