//! Forward corruption: each maskable position is independently replaced by
//! MASK with probability `t`, with `t` uniform on `(0, 1]`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenId, TokenSeq};
use crate::error::{Error, Result};

/// One corruption draw over the maskable positions of a sequence.
///
/// `flags[i]` refers to the i-th maskable position, never to a condition
/// position. A pattern is fully determined by `(t, rng_seed, flags.len())`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub t: f64,
    pub flags: Vec<bool>,
    pub rng_seed: u64,
}

impl MaskPattern {
    /// Draws `t` and the flags from `seed`.
    pub fn sample(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // 1 - U[0,1) lies in (0, 1].
        let t = 1.0 - rng.random::<f64>();
        Self::draw_flags(len, t, seed, &mut rng)
    }

    /// Flags for a fixed noise level `t`, drawn from `seed`.
    pub fn with_t(len: usize, t: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let _ = rng.random::<f64>();
        Self::draw_flags(len, t, seed, &mut rng)
    }

    fn draw_flags(len: usize, t: f64, seed: u64, rng: &mut ChaCha8Rng) -> Self {
        let flags = (0..len).map(|_| rng.random::<f64>() < t).collect();
        Self {
            t,
            flags,
            rng_seed: seed,
        }
    }

    /// Rebuilds a pattern from explicit flags (used by exhaustive enumeration).
    pub fn explicit(t: f64, flags: Vec<bool>) -> Self {
        Self {
            t,
            flags,
            rng_seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Replaces flagged positions of `maskable` in `seq` with `mask`.
    pub fn apply(&self, seq: &[TokenId], maskable: &[usize], mask: TokenId) -> Result<TokenSeq> {
        if maskable.len() != self.flags.len() {
            return Err(Error::Contract(format!(
                "pattern covers {} positions, sequence has {} maskable",
                self.flags.len(),
                maskable.len()
            )));
        }
        let mut out = seq.to_vec();
        for (&p, &f) in maskable.iter().zip(&self.flags) {
            if p >= out.len() {
                return Err(Error::Contract(format!(
                    "maskable position {p} out of range"
                )));
            }
            if f {
                out[p] = mask;
            }
        }
        Ok(out)
    }
}

/// Corrupts `seq` at a fresh `t`; positions outside `maskable` are untouched.
pub fn apply_mask<R: RngCore + ?Sized>(
    seq: &[TokenId],
    maskable: &[usize],
    mask: TokenId,
    rng: &mut R,
) -> Result<(TokenSeq, MaskPattern)> {
    if maskable.is_empty() {
        return Err(Error::Empty("maskable positions"));
    }
    let pattern = MaskPattern::sample(maskable.len(), rng.next_u64());
    let corrupted = pattern.apply(seq, maskable, mask)?;
    Ok((corrupted, pattern))
}

/// Like [`apply_mask`] at a fixed noise level.
pub fn apply_mask_at<R: RngCore + ?Sized>(
    seq: &[TokenId],
    maskable: &[usize],
    mask: TokenId,
    t: f64,
    rng: &mut R,
) -> Result<(TokenSeq, MaskPattern)> {
    if maskable.is_empty() {
        return Err(Error::Empty("maskable positions"));
    }
    let pattern = MaskPattern::with_t(maskable.len(), t, rng.next_u64());
    let corrupted = pattern.apply(seq, maskable, mask)?;
    Ok((corrupted, pattern))
}

/// `n` independent patterns over `len` maskable positions. Policy and
/// reference estimates consume the same list.
pub fn shared_patterns<R: RngCore + ?Sized>(
    len: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<MaskPattern>> {
    if n == 0 {
        return Err(Error::Contract("need at least one pattern".into()));
    }
    Ok((0..n)
        .map(|_| MaskPattern::sample(len, rng.next_u64()))
        .collect())
}
