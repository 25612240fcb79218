//! Class-balanced patch sampling driven by accumulated label-pixel counts.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::LabelMask;

/// Default spacing of the candidate grid, level-0 pixels.
pub const DEFAULT_CANDIDATE_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("no class has candidate centers")]
    NoCandidates,
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("candidate stride must be positive")]
    ZeroStride,
    #[error("class {class} outside 1..={num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("index file is malformed: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A patch center on slide `slide`, level-0 coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub slide: u32,
    pub x: i64,
    pub y: i64,
}

/// Per-class lists of candidate centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationIndex {
    candidates: Vec<Vec<Candidate>>,
}

impl AnnotationIndex {
    /// Enumerates labeled pixels on a `stride`-spaced grid (offset `stride/2`)
    /// of every mask; the grid point's own label picks the class.
    pub fn build(
        masks: &[&LabelMask],
        num_classes: usize,
        stride: usize,
    ) -> Result<Self, SamplingError> {
        if stride == 0 {
            return Err(SamplingError::ZeroStride);
        }
        let mut candidates = vec![Vec::new(); num_classes];
        for (slide, mask) in masks.iter().enumerate() {
            for y in (stride / 2..mask.height).step_by(stride) {
                for x in (stride / 2..mask.width).step_by(stride) {
                    let v = mask.data[y * mask.width + x] as usize;
                    if v == 0 {
                        continue;
                    }
                    if v > num_classes {
                        return Err(SamplingError::ClassOutOfRange {
                            class: v,
                            num_classes,
                        });
                    }
                    candidates[v - 1].push(Candidate {
                        slide: slide as u32,
                        x: x as i64,
                        y: y as i64,
                    });
                }
            }
        }
        Ok(Self { candidates })
    }

    pub fn from_candidates(candidates: Vec<Vec<Candidate>>) -> Self {
        Self { candidates }
    }

    pub fn num_classes(&self) -> usize {
        self.candidates.len()
    }

    /// Candidates of class `class` (1-based).
    pub fn candidates(&self, class: usize) -> &[Candidate] {
        &self.candidates[class - 1]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.candidates.len() as u32).to_le_bytes());
        for list in &self.candidates {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for c in list {
                out.extend_from_slice(&c.slide.to_le_bytes());
                out.extend_from_slice(&c.x.to_le_bytes());
                out.extend_from_slice(&c.y.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SamplingError> {
        let bad = |m: &str| SamplingError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], SamplingError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(bad("unsupported version"));
        }
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut candidates = Vec::with_capacity(k.min(256));
        for _ in 0..k {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let mut list = Vec::new();
            for _ in 0..n {
                let slide = u32::from_le_bytes(take(4)?.try_into().unwrap());
                let x = i64::from_le_bytes(take(8)?.try_into().unwrap());
                let y = i64::from_le_bytes(take(8)?.try_into().unwrap());
                list.push(Candidate { slide, x, y });
            }
            candidates.push(list);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { candidates })
    }

    pub fn save(&self, path: &Path) -> Result<(), SamplingError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SamplingError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const INDEX_MAGIC: &[u8; 4] = b"HKIX";
const INDEX_VERSION: u32 = 1;

/// Cumulative labeled-pixel counts per class over sampled target windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelLedger {
    counts: Vec<u64>,
    batches: u64,
}

impl PixelLedger {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
            batches: 0,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Adds the label histogram of one batch of masks; 0 is never counted
    /// and values above the class count are ignored.
    pub fn update<'a>(&mut self, masks: impl IntoIterator<Item = &'a [u8]>) {
        for mask in masks {
            for &v in mask {
                if v != 0 && (v as usize) <= self.counts.len() {
                    self.counts[v as usize - 1] += 1;
                }
            }
        }
        self.batches += 1;
    }

    /// `max / min` over the given classes (1-based); infinite when a class
    /// has no pixels.
    pub fn imbalance(&self, classes: &[usize]) -> f64 {
        let vals: Vec<u64> = classes.iter().map(|&c| self.counts[c - 1]).collect();
        let max = vals.iter().copied().max().unwrap_or(0) as f64;
        let min = vals.iter().copied().min().unwrap_or(0) as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// First batch uniform, then `p_c ~ 1 / (n_c + 1)`.
    #[default]
    PixelBalanced,
    /// Uniform over non-empty classes for every batch.
    Uniform,
}

/// Class probabilities for the next batch (index `c - 1` for class `c`).
pub fn sampling_probabilities(
    index: &AnnotationIndex,
    ledger: &PixelLedger,
    policy: SamplingPolicy,
) -> Result<Vec<f64>, SamplingError> {
    let present: Vec<bool> = index.counts().iter().map(|&n| n > 0).collect();
    if !present.iter().any(|&p| p) {
        return Err(SamplingError::NoCandidates);
    }
    let uniform = policy == SamplingPolicy::Uniform || ledger.batches() == 0;
    let weights: Vec<f64> = present
        .iter()
        .enumerate()
        .map(|(i, &p)| match (p, uniform) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => 1.0 / (ledger.counts().get(i).copied().unwrap_or(0) as f64 + 1.0),
        })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws `batch_size` (class, center) pairs: classes i.i.d. from
/// [`sampling_probabilities`], centers uniformly within the class.
pub fn next_batch<R: Rng + ?Sized>(
    index: &AnnotationIndex,
    ledger: &PixelLedger,
    rng: &mut R,
    batch_size: usize,
    policy: SamplingPolicy,
) -> Result<Vec<(u8, Candidate)>, SamplingError> {
    if batch_size == 0 {
        return Err(SamplingError::EmptyBatch);
    }
    let probs = sampling_probabilities(index, ledger, policy)?;
    let dist = WeightedIndex::new(&probs).map_err(|_| SamplingError::NoCandidates)?;
    Ok((0..batch_size)
        .map(|_| {
            let class = dist.sample(rng) + 1;
            let list = index.candidates(class);
            (class as u8, list[rng.gen_range(0..list.len())])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn index(counts: &[usize]) -> AnnotationIndex {
        AnnotationIndex::from_candidates(
            counts
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|i| Candidate {
                            slide: 0,
                            x: i as i64,
                            y: 0,
                        })
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn probability_law() {
        let idx = index(&[3, 3, 3, 3]);
        let mut ledger = PixelLedger::new(4);
        assert_eq!(
            sampling_probabilities(&idx, &ledger, SamplingPolicy::PixelBalanced).unwrap(),
            vec![0.25; 4]
        );

        let idx2 = index(&[1, 1]);
        let mut l2 = PixelLedger::new(2);
        l2.update([&[1u8; 999][..]]);
        let p = sampling_probabilities(&idx2, &l2, SamplingPolicy::PixelBalanced).unwrap();
        assert!((p[1] / p[0] - 1000.0).abs() < 1e-9);
        assert_eq!(
            sampling_probabilities(&idx2, &l2, SamplingPolicy::Uniform).unwrap(),
            vec![0.5, 0.5]
        );

        let idx3 = index(&[2, 0, 2]);
        ledger.update([&[1u8, 3, 3, 3][..]]);
        let p = sampling_probabilities(&idx3, &ledger, SamplingPolicy::PixelBalanced).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 0.5 / (0.5 + 0.25)).abs() < 1e-12);

        assert!(matches!(
            sampling_probabilities(
                &index(&[0, 0]),
                &PixelLedger::new(2),
                SamplingPolicy::Uniform
            ),
            Err(SamplingError::NoCandidates)
        ));
    }

    #[test]
    fn ledger_counting() {
        let mut l = PixelLedger::new(3);
        l.update([&[0u8; 50][..]]);
        assert_eq!(l.counts(), &[0, 0, 0]);
        let mut m = vec![0u8; 100];
        m[..30].fill(2);
        l.update([&m[..]]);
        assert_eq!(l.counts(), &[0, 30, 0]);
        assert_eq!(l.batches(), 2);
    }

    #[test]
    fn batches_replay_and_match_expectation() {
        let idx = index(&[5, 5, 5, 5, 5, 5]);
        let ledger = PixelLedger::new(6);
        let a = next_batch(
            &idx,
            &ledger,
            &mut ChaCha8Rng::seed_from_u64(1),
            12,
            SamplingPolicy::PixelBalanced,
        )
        .unwrap();
        let b = next_batch(
            &idx,
            &ledger,
            &mut ChaCha8Rng::seed_from_u64(1),
            12,
            SamplingPolicy::PixelBalanced,
        )
        .unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        // Mean draws per class over many fresh batches approaches 2.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hist = [0usize; 6];
        for _ in 0..2000 {
            for (c, _) in
                next_batch(&idx, &ledger, &mut rng, 12, SamplingPolicy::PixelBalanced).unwrap()
            {
                hist[c as usize - 1] += 1;
            }
        }
        for h in hist {
            assert!((h as f64 / 2000.0 - 2.0).abs() < 0.1, "{hist:?}");
        }
        assert!(matches!(
            next_batch(&idx, &ledger, &mut rng, 0, SamplingPolicy::Uniform),
            Err(SamplingError::EmptyBatch)
        ));
    }

    #[test]
    fn index_from_masks_and_sidecar() {
        let mut data = vec![0u8; 32 * 16];
        for y in 0..16 {
            for x in 16..32 {
                data[y * 32 + x] = 2;
            }
        }
        data[4 * 32 + 4] = 1;
        let mask = LabelMask::new(32, 16, 2, data).unwrap();
        let idx = AnnotationIndex::build(&[&mask], 2, 8).unwrap();
        assert_eq!(idx.counts(), vec![1, 4]);
        for c in 1..=2 {
            for cand in idx.candidates(c) {
                assert_eq!(mask.get(cand.x, cand.y) as usize, c);
            }
        }
        let back = AnnotationIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
        assert!(AnnotationIndex::from_bytes(&idx.to_bytes()[..10]).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_normalized(counts in proptest::collection::vec(0usize..3, 1..8), seen in proptest::collection::vec(0u8..8, 0..200)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let idx = index(&counts);
            let mut ledger = PixelLedger::new(counts.len());
            ledger.update([&seen[..]]);
            let p = sampling_probabilities(&idx, &ledger, SamplingPolicy::PixelBalanced).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pi, &c) in p.iter().zip(&counts) {
                prop_assert_eq!(*pi == 0.0, c == 0);
            }
        }

        #[test]
        fn ledger_monotone(batches in proptest::collection::vec(proptest::collection::vec(0u8..5, 0..50), 1..10)) {
            let mut ledger = PixelLedger::new(4);
            let mut prev = ledger.counts().to_vec();
            for b in &batches {
                ledger.update([&b[..]]);
                for (a, p) in ledger.counts().iter().zip(&prev) {
                    prop_assert!(a >= p);
                }
                prev = ledger.counts().to_vec();
            }
        }
    }
}
