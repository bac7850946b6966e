//! Scoring kernels: bit packing, XOR + popcount dot products, and batch
//! catalog scoring for dense and packed models.
//!
//! The packed dot product of two ±1 sign vectors is computed through the
//! identity `dot = n - 2 * popcount(a XOR b)`: every disagreeing bit pair
//! contributes -1 instead of +1, so the dot drops by 2 per disagreement.
//! The contract is value-exactness; the instruction sequence is whatever
//! the compiler emits for `count_ones` on the build target.

use crate::error::{Error, Result};
use crate::model::{DenseModel, PackedModel, Representation};

/// A sign vector packed into 32-bit words.
///
/// Bit `j` of word `w` encodes element `32*w + j`; bit value 1 means +1,
/// 0 means -1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedVector {
    words: Vec<u32>,
}

impl PackedVector {
    pub fn from_words(words: Vec<u32>) -> Self {
        assert!(!words.is_empty(), "packed vector needs at least one word");
        PackedVector { words }
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// Logical length in elements (32 per word).
    pub fn len(&self) -> usize {
        self.words.len() * 32
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Packs a ±1 sign vector into 32-bit words (1 bit per element, 1 ↔ +1).
///
/// The length must be a positive multiple of 32.
pub fn pack_bits(signs: &[f32]) -> Result<PackedVector> {
    if signs.is_empty() || signs.len() % 32 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sign vector length {} is not a positive multiple of 32",
            signs.len()
        )));
    }
    let mut words = vec![0u32; signs.len() / 32];
    pack_row(signs, &mut words);
    Ok(PackedVector { words })
}

/// Packs one embedding row into preallocated words. A non-negative element
/// maps to bit 1 (sign(0) = +1), so `pack_row(v) == pack_bits(sign_vec(v))`.
pub(crate) fn pack_row(row: &[f32], words: &mut [u32]) {
    debug_assert_eq!(row.len(), words.len() * 32);
    for (word, chunk) in words.iter_mut().zip(row.chunks_exact(32)) {
        let mut w = 0u32;
        for (j, &x) in chunk.iter().enumerate() {
            if x >= 0.0 {
                w |= 1 << j;
            }
        }
        *word = w;
    }
}

/// Integer dot product of the two encoded ±1 vectors.
pub fn packed_dot(a: &PackedVector, b: &PackedVector) -> Result<i32> {
    if a.words.len() != b.words.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(sign_dot_words(&a.words, &b.words))
}

/// `n - 2 * popcount(a XOR b)` over equal-length word slices.
#[inline]
pub(crate) fn sign_dot_words(a: &[u32], b: &[u32]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let disagreements: u32 = a.iter().zip(b).map(|(&x, &y)| (x ^ y).count_ones()).sum();
    (a.len() * 32) as i32 - 2 * disagreements as i32
}

/// Dense f32 dot product with eight independent accumulators.
///
/// The lanes vectorize on wide targets; the reduction order is the eight
/// lane sums combined pairwise, which differs from naive left-to-right
/// summation by ordinary float reassociation error.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let a_chunks = a.chunks_exact(8);
    let b_chunks = b.chunks_exact(8);
    let tail: f32 = a_chunks
        .remainder()
        .iter()
        .zip(b_chunks.remainder())
        .map(|(x, y)| x * y)
        .sum();
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a_chunks.zip(b_chunks) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Eq.-5 style score from packed rows: `beta * alpha * d + b_u + b_i`.
#[inline]
pub(crate) fn packed_score(beta: f32, alpha: f32, sign_dot: i32, b_u: f32, b_i: f32) -> f32 {
    beta * alpha * sign_dot as f32 + b_u + b_i
}

/// Scores a user against an item catalog into a caller-provided buffer.
///
/// Implementations write every entry of `out` and allocate nothing inside
/// the item loop; the result is bit-exact equal to per-item prediction
/// calls on the same model.
pub trait CatalogScorer {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;

    /// Fills `out[i]` with the prediction for every candidate item.
    fn score_all(&self, user: usize, out: &mut [f32]) -> Result<()>;

    fn check_request(&self, user: usize, out: &[f32]) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                limit: self.num_users(),
            });
        }
        if out.len() != self.num_items() {
            return Err(Error::BufferSize {
                expected: self.num_items(),
                got: out.len(),
            });
        }
        Ok(())
    }
}

impl CatalogScorer for DenseModel {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_all(&self, user: usize, out: &mut [f32]) -> Result<()> {
        self.check_request(user, out)?;
        let n = self.dim;
        let u_row = self.user_row(user);
        let b_u = self.user_bias[user];
        match self.mode {
            Representation::Dense => {
                for ((score, i_row), &b_i) in out
                    .iter_mut()
                    .zip(self.item_factors.chunks_exact(n))
                    .zip(&self.item_bias)
                {
                    *score = dot(u_row, i_row) + b_u + b_i;
                }
            }
            Representation::Binary => {
                // Training-time forward: float sign dot scaled by live
                // L1-norm means, identical to predict_binary_float.
                let beta = crate::model::scale_factor(u_row);
                let u_signs = crate::model::sign_vec(u_row);
                for ((score, i_row), &b_i) in out
                    .iter_mut()
                    .zip(self.item_factors.chunks_exact(n))
                    .zip(&self.item_bias)
                {
                    let alpha = crate::model::scale_factor(i_row);
                    let d = crate::model::sign_dot_f32(&u_signs, i_row);
                    *score = beta * alpha * d + b_u + b_i;
                }
            }
        }
        Ok(())
    }
}

impl CatalogScorer for PackedModel {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_all(&self, user: usize, out: &mut [f32]) -> Result<()> {
        self.check_request(user, out)?;
        let w = self.words_per_vec;
        let u_bits = self.user_bits(user);
        let beta = self.user_scales[user];
        let b_u = self.user_bias[user];
        for (((score, i_bits), &alpha), &b_i) in out
            .iter_mut()
            .zip(self.item_bits.chunks_exact(w))
            .zip(&self.item_scales)
            .zip(&self.item_bias)
        {
            let d = sign_dot_words(u_bits, i_bits);
            *score = packed_score(beta, alpha, d, b_u, b_i);
        }
        Ok(())
    }
}

/// Eq.-5 prediction straight from packed bits:
/// `beta_u * alpha_i * packed_dot(user_bits, item_bits) + b_u + b_i`.
pub fn predict_packed(model: &PackedModel, user: usize, item: usize) -> Result<f32> {
    model.check_indices(user, item)?;
    let d = sign_dot_words(model.user_bits(user), model.item_bits(item));
    Ok(packed_score(
        model.user_scales[user],
        model.item_scales[item],
        d,
        model.user_bias[user],
        model.item_bias[item],
    ))
}

/// Allocates a score buffer sized to the model's catalog.
pub fn score_buffer(scorer: &impl CatalogScorer) -> Vec<f32> {
    vec![0.0; scorer.num_items()]
}

/// Indices of the `k` highest scores, ties broken toward the lower index.
pub fn top_k(scores: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut indexed: Vec<(u32, f32)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .collect();
    indexed.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    indexed.truncate(k);
    indexed
}

/// Index of the highest score, if any.
pub fn argmax(scores: &[f32]) -> Option<u32> {
    top_k(scores, 1).first().map(|&(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar ±1 dot product oracle over unpacked bits.
    fn sign_dot_oracle(a: &PackedVector, b: &PackedVector) -> i32 {
        let mut total = 0i32;
        for (wa, wb) in a.words().iter().zip(b.words()) {
            for j in 0..32 {
                let sa = if (wa >> j) & 1 == 1 { 1 } else { -1 };
                let sb = if (wb >> j) & 1 == 1 { 1 } else { -1 };
                total += sa * sb;
            }
        }
        total
    }

    fn random_packed(rng: &mut impl Rng, words: usize) -> PackedVector {
        PackedVector::from_words((0..words).map(|_| rng.gen()).collect())
    }

    #[test]
    fn pack_bits_all_plus_one() {
        let signs = vec![1.0f32; 32];
        assert_eq!(pack_bits(&signs).unwrap().words(), &[0xFFFF_FFFF]);
    }

    #[test]
    fn pack_bits_all_minus_one() {
        let signs = vec![-1.0f32; 32];
        assert_eq!(pack_bits(&signs).unwrap().words(), &[0x0000_0000]);
    }

    #[test]
    fn pack_bits_alternating() {
        let signs: Vec<f32> = (0..32).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(pack_bits(&signs).unwrap().words(), &[0x5555_5555]);
    }

    #[test]
    fn pack_bits_rejects_bad_length() {
        assert!(pack_bits(&[]).is_err());
        assert!(pack_bits(&vec![1.0f32; 33]).is_err());
    }

    #[test]
    fn packed_dot_identical_vectors() {
        let a = PackedVector::from_words(vec![0xDEAD_BEEF, 0x0123_4567]);
        assert_eq!(packed_dot(&a, &a).unwrap(), 64);
    }

    #[test]
    fn packed_dot_antipodal_vectors() {
        let a = PackedVector::from_words(vec![0xDEAD_BEEF, 0x0123_4567]);
        let b = PackedVector::from_words(a.words().iter().map(|w| !w).collect());
        assert_eq!(packed_dot(&a, &b).unwrap(), -64);
    }

    #[test]
    fn packed_dot_length_mismatch() {
        let a = PackedVector::from_words(vec![0; 1]);
        let b = PackedVector::from_words(vec![0; 2]);
        assert!(matches!(
            packed_dot(&a, &b),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn packed_dot_matches_scalar_oracle_single_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let a = random_packed(&mut rng, 1);
            let b = random_packed(&mut rng, 1);
            assert_eq!(packed_dot(&a, &b).unwrap(), sign_dot_oracle(&a, &b));
        }
    }

    #[test]
    fn dense_dot_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = 32 * rng.gen_range(1..=8);
            let a: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let fast = dot(&a, &b);
            let tol = 1e-5 * naive.abs().max(1.0);
            assert!((fast - naive).abs() <= tol, "{fast} vs {naive}");
        }
    }

    #[test]
    fn top_k_orders_by_score_then_index() {
        let scores = [0.5, 2.0, -1.0, 2.0];
        assert_eq!(top_k(&scores, 3), vec![(1, 2.0), (3, 2.0), (0, 0.5)]);
        assert_eq!(argmax(&scores), Some(1));
    }

    proptest! {
        #[test]
        fn packed_dot_identity_range_and_symmetry(
            words_a in proptest::collection::vec(any::<u32>(), 1..16),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(words_a.iter().map(|&w| w as u64).sum());
            let words_b: Vec<u32> = (0..words_a.len()).map(|_| rng.gen()).collect();
            let a = PackedVector::from_words(words_a);
            let b = PackedVector::from_words(words_b);
            let n = a.len() as i32;

            let d = packed_dot(&a, &b).unwrap();
            prop_assert_eq!(d, sign_dot_oracle(&a, &b));
            prop_assert_eq!(d, packed_dot(&b, &a).unwrap());
            prop_assert!((-n..=n).contains(&d));
            prop_assert_eq!(d.rem_euclid(2), n.rem_euclid(2));
        }
    }
}
