//! Binary hash codes, the packed-bit Hamming index, ranking, and the
//! retrieval metrics built on top of them.
//!
//! Codes pack into 64-bit words, little-endian bit order within each word
//! (bit i lives in word i/64 at position i%64); a set bit encodes +1, a
//! clear bit encodes -1. Unused high bits of the last word are always zero,
//! which keeps XOR/popcount and the file format canonical.

mod metrics;

pub use metrics::{
    average_precision_at_n, mean_ap, precision_at_topk, precision_recall_curve, PrPoint,
};

use std::fs;
use std::path::Path;

use crate::data::{ByteReader, LabelSet};
use crate::dual_stream::HashVectorSet;
use crate::error::{Error, Result};

const THIX_MAGIC: &[u8; 4] = b"THIX";
const THIX_VERSION: u16 = 1;

/// A packed B-bit binary code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCode {
    bits: usize,
    words: Vec<u64>,
}

impl HashCode {
    /// Sign-thresholds a continuous vector: +1 where `x > 0`, −1 otherwise
    /// (zero maps to −1).
    pub fn from_signs(values: &[f64]) -> Result<HashCode> {
        if values.is_empty() {
            return Err(Error::contract("hash code of zero bits"));
        }
        let mut words = vec![0u64; values.len().div_ceil(64)];
        for (i, &v) in values.iter().enumerate() {
            if v > 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(HashCode {
            bits: values.len(),
            words,
        })
    }

    /// Rebuilds a code from packed words, checking the padding invariant.
    pub fn from_words(words: Vec<u64>, bits: usize) -> Result<HashCode> {
        if bits == 0 || words.len() != bits.div_ceil(64) {
            return Err(Error::contract(format!(
                "{} words cannot hold {} bits",
                words.len(),
                bits
            )));
        }
        let tail = bits % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::contract(
                "nonzero padding bits beyond the code length",
            ));
        }
        Ok(HashCode { bits, words })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Unpacks to ±1 entries, exactly reproducing the sign pattern.
    pub fn unpack(&self) -> Vec<i8> {
        (0..self.bits).map(|i| if self.bit(i) { 1 } else { -1 }).collect()
    }

    /// Number of differing bits, via XOR + popcount over packed words.
    pub fn hamming(&self, other: &HashCode) -> Result<u32> {
        if self.bits != other.bits {
            return Err(Error::contract(format!(
                "hamming distance between {}-bit and {}-bit codes",
                self.bits, other.bits
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }
}

/// Concatenates the continuous hash vectors (global first, then locals in
/// order) and sign-thresholds into a B-bit code.
pub fn binarize(set: &HashVectorSet) -> Result<HashCode> {
    HashCode::from_signs(&set.concatenated())
}

// ── Index ───────────────────────────────────────────────────────────

/// Immutable gallery of codes with parallel ids and label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeIndex {
    bits: usize,
    codes: Vec<HashCode>,
    ids: Vec<u64>,
    labels: Vec<LabelSet>,
}

impl CodeIndex {
    pub fn build(
        bits: usize,
        ids: Vec<u64>,
        labels: Vec<LabelSet>,
        codes: Vec<HashCode>,
    ) -> Result<CodeIndex> {
        if ids.len() != labels.len() || ids.len() != codes.len() {
            return Err(Error::contract(format!(
                "index arrays disagree: {} ids, {} label sets, {} codes",
                ids.len(),
                labels.len(),
                codes.len()
            )));
        }
        for (i, code) in codes.iter().enumerate() {
            if code.bits() != bits {
                return Err(Error::contract(format!(
                    "code {i} has {} bits, index is {bits}-bit",
                    code.bits()
                )));
            }
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::contract(format!("index item {i} has an empty label set")));
            }
        }
        Ok(CodeIndex {
            bits,
            codes,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn code(&self, i: usize) -> &HashCode {
        &self.codes[i]
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn labels(&self, i: usize) -> &LabelSet {
        &self.labels[i]
    }

    // ── Index file format ───────────────────────────────────────────
    //
    // magic "THIX" | u16 version | u16 B | u64 count, then per item:
    // u64 id | u16 label_count | label_count x u32 | ceil(B/64) x u64 code
    // words. All little-endian.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(THIX_MAGIC);
        buf.extend_from_slice(&THIX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.bits as u16).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&self.ids[i].to_le_bytes());
            buf.extend_from_slice(&(self.labels[i].len() as u16).to_le_bytes());
            for &l in &self.labels[i] {
                buf.extend_from_slice(&l.to_le_bytes());
            }
            for &w in self.codes[i].words() {
                buf.extend_from_slice(&w.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CodeIndex> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(4, "magic")?;
        if magic != THIX_MAGIC {
            return Err(r.format_err(0, format!("bad magic {magic:?}, expected {THIX_MAGIC:?}")));
        }
        let version = r.u16("version")?;
        if version != THIX_VERSION {
            return Err(r.format_err(4, format!("unsupported version {version}")));
        }
        let bits = r.u16("bit width")? as usize;
        if bits == 0 {
            return Err(r.format_err(6, "zero-bit index".into()));
        }
        let count = r.u64("count")? as usize;
        let words_per_code = bits.div_ceil(64);

        // cap preallocation by file size; items are many bytes each
        let cap = count.min(bytes.len());
        let mut ids = Vec::with_capacity(cap);
        let mut labels = Vec::with_capacity(cap);
        let mut codes = Vec::with_capacity(cap);
        for item in 0..count {
            let at = r.pos as u64;
            ids.push(r.u64("id")?);
            let label_count = r.u16("label count")? as usize;
            if label_count == 0 {
                return Err(r.format_err(at, format!("item {item}: empty label set")));
            }
            let mut set = LabelSet::new();
            for _ in 0..label_count {
                set.insert(r.u32("label")?);
            }
            let mut words = Vec::with_capacity(words_per_code);
            for _ in 0..words_per_code {
                words.push(r.u64("code word")?);
            }
            codes.push(
                HashCode::from_words(words, bits)
                    .map_err(|e| r.format_err(at, format!("item {item}: {e}")))?,
            );
            labels.push(set);
        }
        if r.pos != bytes.len() {
            return Err(r.format_err(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        CodeIndex::build(bits, ids, labels, codes)
    }
}

/// One ranked gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    /// Position in the index (insertion order).
    pub index: usize,
    pub id: u64,
    pub distance: u32,
}

/// Ranks the whole gallery by ascending Hamming distance to the query.
/// Ties break by ascending insertion order (stable).
pub fn rank(query: &HashCode, index: &CodeIndex) -> Result<Vec<Neighbor>> {
    if index.is_empty() {
        return Err(Error::contract("ranking over an empty index"));
    }
    let mut hits = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        hits.push(Neighbor {
            index: i,
            id: index.id(i),
            distance: query.hamming(index.code(i))?,
        });
    }
    hits.sort_by_key(|h| h.distance);
    Ok(hits)
}

/// Runs `f(0..n)` across worker threads, preserving output order.
///
/// The thread count is capped by the `THASH_THREADS` environment variable
/// (default: available parallelism). Results are written into per-index
/// slots, so the outcome does not depend on scheduling.
pub(crate) fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slice) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (offset, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + offset));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

pub(crate) fn worker_threads() -> usize {
    match std::env::var("THASH_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code_from_bools(bits: &[bool]) -> HashCode {
        let values: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        HashCode::from_signs(&values).unwrap()
    }

    #[test]
    fn sign_convention_maps_zero_to_minus_one() {
        let code = HashCode::from_signs(&[0.5, 0.0, -0.1, 1e-12]).unwrap();
        assert_eq!(code.unpack(), vec![1, -1, -1, 1]);
        let all_pos = HashCode::from_signs(&[1.0; 7]).unwrap();
        assert_eq!(all_pos.unpack(), vec![1; 7]);
    }

    #[test]
    fn binarize_concatenates_global_then_locals() {
        let set = HashVectorSet {
            global: vec![0.4, -0.2],
            locals: vec![vec![-1.0, 0.0], vec![3.0, 0.1]],
        };
        let code = binarize(&set).unwrap();
        assert_eq!(code.bits(), 6);
        // zero entries map to -1, order is global | local 1 | local 2
        assert_eq!(code.unpack(), vec![1, -1, -1, -1, 1, 1]);
    }

    #[test]
    fn hamming_basics() {
        let a = code_from_bools(&[true, false, true, true]);
        assert_eq!(a.hamming(&a).unwrap(), 0);
        let b = code_from_bools(&[false, true, false, false]);
        assert_eq!(a.hamming(&b).unwrap(), 4);
        // 64-bit complement
        let ones = HashCode::from_signs(&[1.0; 64]).unwrap();
        let zeros = HashCode::from_signs(&[-1.0; 64]).unwrap();
        assert_eq!(ones.hamming(&zeros).unwrap(), 64);
        // unequal widths refuse
        let short = code_from_bools(&[true]);
        assert!(a.hamming(&short).is_err());
    }

    #[test]
    fn packed_hamming_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..2000 {
            let bits = rng.gen_range(1..=130);
            let av: Vec<f64> = (0..bits).map(|_| rng.gen::<f64>() - 0.5).collect();
            let bv: Vec<f64> = (0..bits).map(|_| rng.gen::<f64>() - 0.5).collect();
            let a = HashCode::from_signs(&av).unwrap();
            let b = HashCode::from_signs(&bv).unwrap();
            let naive = a
                .unpack()
                .iter()
                .zip(b.unpack().iter())
                .filter(|(x, y)| x != y)
                .count() as u32;
            assert_eq!(a.hamming(&b).unwrap(), naive);
        }
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        assert!(HashCode::from_words(vec![0b1111], 3).is_err());
        assert!(HashCode::from_words(vec![0b0111], 3).is_ok());
        assert!(HashCode::from_words(vec![u64::MAX], 64).is_ok());
        assert!(HashCode::from_words(vec![1, 2], 64).is_err());
    }

    fn toy_index() -> CodeIndex {
        let codes = vec![
            code_from_bools(&[true, true, true, true]),
            code_from_bools(&[true, true, true, false]),
            code_from_bools(&[false, false, false, false]),
            code_from_bools(&[true, true, false, false]),
        ];
        CodeIndex::build(
            4,
            vec![10, 11, 12, 13],
            vec![
                LabelSet::from([0]),
                LabelSet::from([0]),
                LabelSet::from([1]),
                LabelSet::from([1]),
            ],
            codes,
        )
        .unwrap()
    }

    #[test]
    fn rank_orders_by_distance_with_stable_ties() {
        let index = toy_index();
        let query = code_from_bools(&[true, true, true, true]);
        let ranked = rank(&query, &index).unwrap();
        assert_eq!(ranked[0].id, 10);
        assert_eq!(ranked[0].distance, 0);
        assert_eq!(ranked[1].id, 11);
        assert_eq!(ranked[3].id, 12);
        // permutation of the gallery, nondecreasing distances
        let mut seen: Vec<usize> = ranked.iter().map(|h| h.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for w in ranked.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
        // single-item index puts that item first
        let one = CodeIndex::build(
            4,
            vec![7],
            vec![LabelSet::from([0])],
            vec![code_from_bools(&[false, true, false, true])],
        )
        .unwrap();
        let r = rank(&query, &one).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, 7);
    }

    #[test]
    fn index_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.thix");
        let index = toy_index();
        index.save(&path).unwrap();
        let back = CodeIndex::load(&path).unwrap();
        assert_eq!(index, back);
        let path2 = dir.path().join("g2.thix");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // truncation reports an offset
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(CodeIndex::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map(37, |i| i * i);
        assert_eq!(out, (0..37).map(|i| i * i).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(values in proptest::collection::vec(-1.0f64..1.0, 1..100)) {
            let code = HashCode::from_signs(&values).unwrap();
            let unpacked = code.unpack();
            for (v, s) in values.iter().zip(&unpacked) {
                let expect = if *v > 0.0 { 1 } else { -1 };
                prop_assert_eq!(*s as i32, expect);
            }
            let again = HashCode::from_signs(
                &unpacked.iter().map(|&s| s as f64).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert_eq!(code, again);
        }

        #[test]
        fn hamming_is_a_metric(
            a in proptest::collection::vec(any::<bool>(), 24),
            b in proptest::collection::vec(any::<bool>(), 24),
            c in proptest::collection::vec(any::<bool>(), 24),
        ) {
            let (ca, cb, cc) = (code_from_bools(&a), code_from_bools(&b), code_from_bools(&c));
            let dab = ca.hamming(&cb).unwrap();
            let dba = cb.hamming(&ca).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(ca.hamming(&ca).unwrap(), 0);
            prop_assert_eq!(dab == 0, a == b);
            let dac = ca.hamming(&cc).unwrap();
            let dcb = cc.hamming(&cb).unwrap();
            prop_assert!(dab <= dac + dcb);
        }
    }
}
