//! Interaction-aware masks over a stroke sequence.
//!
//! A mask bit of 1 marks a context stroke, 0 a stroke the model must predict.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stroke::{GridLayout, Stroke, StrokeSequence};

pub const RANDOM_RATIO_RANGE: (f64, f64) = (0.1, 0.9);
pub const BLOCK_MIN_LEN: usize = 10;
pub const BLOCK_MAX_FRACTION: f64 = 0.75;
pub const MAX_KEEP_LEVEL: usize = 3;
pub const SQUARE_SIDE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask {
    #[serde(with = "bits_as_ints")]
    bits: Vec<bool>,
}

mod bits_as_ints {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        bits.iter().map(|&b| b as u8).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask bit must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    pub fn all_context(len: usize) -> Self {
        Mask { bits: vec![true; len] }
    }

    pub fn all_predict(len: usize) -> Self {
        Mask { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_context(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn context_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn predict_count(&self) -> usize {
        self.len() - self.context_count()
    }

    pub fn predicted_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Level,
    Random,
    Square,
    Block,
    NoContext,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Level,
        MaskStrategy::Random,
        MaskStrategy::Square,
        MaskStrategy::Block,
        MaskStrategy::NoContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Level => "level",
            MaskStrategy::Random => "random",
            MaskStrategy::Square => "square",
            MaskStrategy::Block => "block",
            MaskStrategy::NoContext => "none",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "level" => Ok(MaskStrategy::Level),
            "random" => Ok(MaskStrategy::Random),
            "square" => Ok(MaskStrategy::Square),
            "block" => Ok(MaskStrategy::Block),
            "none" | "no_context" => Ok(MaskStrategy::NoContext),
            other => Err(Error::InvalidArgument(format!("unknown mask strategy '{other}'"))),
        }
    }
}

/// Exactly `round(ratio * len)` zeros at uniformly chosen positions.
pub fn mask_random_with_ratio<R: Rng + ?Sized>(rng: &mut R, len: usize, ratio: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("masking ratio {ratio} outside [0, 1]")));
    }
    let zeros = (ratio * len as f64).round() as usize;
    let mut bits = vec![true; len];
    for i in index::sample(rng, len, zeros.min(len)) {
        bits[i] = false;
    }
    Ok(Mask { bits })
}

pub fn mask_random<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Result<Mask> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!("random masking needs L >= 2, got {len}")));
    }
    let ratio = rng.random_range(RANDOM_RATIO_RANGE.0..=RANDOM_RATIO_RANGE.1);
    mask_random_with_ratio(rng, len, ratio)
}

/// Keep levels `1..=keep` as context, predict the finer ones.
pub fn mask_level_keep(grid: &GridLayout, keep: usize) -> Result<Mask> {
    let (_, end) = grid.level_range(keep)?;
    let mut bits = vec![false; grid.total_length()];
    bits[..end].fill(true);
    Ok(Mask { bits })
}

pub fn mask_level<R: Rng + ?Sized>(rng: &mut R, grid: &GridLayout) -> Result<Mask> {
    if grid.levels < 2 {
        return Err(Error::InvalidArgument("level masking needs at least two levels".into()));
    }
    let keep = rng.random_range(1..=MAX_KEEP_LEVEL.min(grid.levels - 1));
    mask_level_keep(grid, keep)
}

/// Zeros on `[start, start + run)`, ones elsewhere.
pub fn mask_block_at(len: usize, start: usize, run: usize) -> Result<Mask> {
    if start + run > len {
        return Err(Error::InvalidArgument(format!("block [{start}, {}) exceeds length {len}", start + run)));
    }
    let mut bits = vec![true; len];
    bits[start..start + run].fill(false);
    Ok(Mask { bits })
}

pub fn block_len_range(len: usize) -> (usize, usize) {
    (BLOCK_MIN_LEN, (BLOCK_MAX_FRACTION * len as f64).floor() as usize)
}

pub fn mask_block<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Result<Mask> {
    let (lo, hi) = block_len_range(len);
    if len < 14 || hi < lo {
        return Err(Error::InvalidArgument(format!("block masking needs L >= 14, got {len}")));
    }
    let run = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=len - run);
    mask_block_at(len, start, run)
}

/// Whether `s` lies in the axis-aligned square of side 0.5 centred on `pivot`.
pub fn in_square(pivot: &Stroke, s: &Stroke) -> bool {
    let half = SQUARE_SIDE / 2.0;
    (s.x - pivot.x).abs() <= half && (s.y - pivot.y).abs() <= half
}

/// Masks every occupied stroke near the stroke in slot `pivot`. Free slots
/// stay context.
pub fn mask_square_at(seq: &StrokeSequence, pivot: usize) -> Result<Mask> {
    if pivot >= seq.len() || !seq.occupancy[pivot] {
        return Err(Error::InvalidArgument(format!("pivot slot {pivot} is not occupied")));
    }
    let p = seq.strokes[pivot];
    let bits = seq
        .strokes
        .iter()
        .zip(&seq.occupancy)
        .map(|(s, &occ)| !(occ && in_square(&p, s)))
        .collect();
    Ok(Mask { bits })
}

pub fn mask_square<R: Rng + ?Sized>(rng: &mut R, seq: &StrokeSequence) -> Result<Mask> {
    let occupied: Vec<usize> = (0..seq.len()).filter(|&i| seq.occupancy[i]).collect();
    if occupied.is_empty() {
        return Err(Error::InvalidArgument("square masking needs at least one stroke".into()));
    }
    let pivot = occupied[rng.random_range(0..occupied.len())];
    mask_square_at(seq, pivot)
}

pub fn mask_no_context(len: usize) -> Mask {
    Mask::all_predict(len)
}

pub fn mask_with<R: Rng + ?Sized>(rng: &mut R, strategy: MaskStrategy, seq: &StrokeSequence) -> Result<Mask> {
    let len = seq.len();
    match strategy {
        MaskStrategy::Level => mask_level(rng, &seq.grid),
        MaskStrategy::Random => mask_random(rng, len),
        MaskStrategy::Square => mask_square(rng, seq),
        MaskStrategy::Block => mask_block(rng, len),
        MaskStrategy::NoContext => Ok(mask_no_context(len)),
    }
}

/// Uniform choice among the five strategies. An empty canvas has no square
/// pivot, so a square draw on it degrades to predicting everything.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, seq: &StrokeSequence) -> Result<(MaskStrategy, Mask)> {
    let strategy = MaskStrategy::ALL[rng.random_range(0..MaskStrategy::ALL.len())];
    let mask = if strategy == MaskStrategy::Square && seq.occupied_count() == 0 {
        mask_no_context(seq.len())
    } else {
        mask_with(rng, strategy, seq)?
    };
    Ok((strategy, mask))
}

/// Flat `[L, 8]` context and target arrays: `s * m` and `s * (1 - m)`.
pub fn split(seq: &StrokeSequence, mask: &Mask) -> Result<(Vec<f32>, Vec<f32>)> {
    if mask.len() != seq.len() {
        return Err(Error::LengthMismatch {
            what: "mask",
            expected: seq.len(),
            found: mask.len(),
        });
    }
    let flat = seq.to_flat();
    let mut ctx = vec![0.0; flat.len()];
    let mut pred = vec![0.0; flat.len()];
    for (i, row) in flat.chunks(crate::stroke::STROKE_DIM).enumerate() {
        let dst = if mask.bits[i] { &mut ctx } else { &mut pred };
        dst[i * row.len()..(i + 1) * row.len()].copy_from_slice(row);
    }
    Ok((ctx, pred))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::stroke::ClassLabel;

    fn random_full(seed: u64) -> StrokeSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridLayout::default();
        let mut strokes = Vec::with_capacity(grid.total_length());
        for _ in 0..grid.total_length() {
            let mut a = [0.0f32; 8];
            for v in &mut a {
                *v = rng.random_range(0.01..1.0);
            }
            strokes.push(Stroke::from_array(a));
        }
        StrokeSequence::full(grid, strokes, ClassLabel::Null).unwrap()
    }

    #[test]
    fn random_exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_random_with_ratio(&mut rng, 10, 0.5).unwrap().predict_count(), 5);
        assert_eq!(mask_random_with_ratio(&mut rng, 360, 0.1).unwrap().predict_count(), 36);
        assert!(mask_random(&mut rng, 1).is_err());
    }

    #[test]
    fn random_ratio_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let m = mask_random(&mut rng, 360).unwrap();
            let f = m.predict_count() as f64 / 360.0;
            assert!((0.1..=0.9).contains(&f), "{f}");
        }
    }

    #[test]
    fn level_examples() {
        let grid = GridLayout::default();
        let m = mask_level_keep(&grid, 1).unwrap();
        assert!(m.bits()[..12].iter().all(|&b| b));
        assert!(m.bits()[12..].iter().all(|&b| !b));
        assert_eq!(m.predict_count(), 348);
        let m = mask_level_keep(&grid, 3).unwrap();
        assert_eq!(m.context_count(), 168);
        assert!(m.bits()[168..].iter().all(|&b| !b));
        assert_eq!(m.predict_count(), 192);
    }

    #[test]
    fn level_masks_are_block_constant() {
        let grid = GridLayout::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let m = mask_level(&mut rng, &grid).unwrap();
            for chunk in m.bits().chunks(grid.strokes_per_block) {
                assert!(chunk.iter().all(|&b| b == chunk[0]));
            }
            assert!([12, 60, 168].contains(&m.context_count()));
        }
        assert!(mask_level(&mut rng, &GridLayout::new(1, 12).unwrap()).is_err());
    }

    #[test]
    fn block_examples() {
        let m = mask_block_at(360, 90, 270).unwrap();
        assert_eq!(m.predict_count(), 270);
        assert_eq!(block_len_range(360), (10, 270));
        assert!(mask_block_at(360, 91, 270).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(mask_block(&mut rng, 13).is_err());
        for _ in 0..10_000 {
            let m = mask_block(&mut rng, 360).unwrap();
            let zeros: Vec<usize> = m.predicted_indices().collect();
            assert!(zeros.len() >= 10 && zeros.len() <= 270);
            assert_eq!(zeros.last().unwrap() - zeros[0] + 1, zeros.len());
        }
    }

    #[test]
    fn square_example() {
        let grid = GridLayout::default();
        let mut seq = StrokeSequence::empty(grid, ClassLabel::Null);
        let at = |x, y| Stroke::new(x, y, 0.05, 0.05, 0.0, 1.0, 1.0, 1.0);
        seq.place(300, at(0.5, 0.5));
        seq.place(301, at(0.6, 0.6));
        seq.place(302, at(0.9, 0.9));
        seq.place(303, at(0.75, 0.25));
        let m = mask_square_at(&seq, 300).unwrap();
        assert!(!m.is_context(300));
        assert!(!m.is_context(301));
        assert!(m.is_context(302));
        // boundary is inclusive
        assert!(!m.is_context(303));
        // free slots are never masked
        assert_eq!(m.predict_count(), 3);
        assert!(mask_square_at(&seq, 0).is_err());
        let empty = StrokeSequence::empty(grid, ClassLabel::Null);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(mask_square(&mut rng, &empty).is_err());
    }

    #[test]
    fn square_degenerate_cluster() {
        let grid = GridLayout::default();
        let s = Stroke::new(0.3, 0.3, 0.2, 0.2, 0.0, 0.5, 0.5, 0.5);
        let seq = StrokeSequence::full(grid, vec![s; 360], ClassLabel::Null).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(mask_square(&mut rng, &seq).unwrap().predict_count(), 360);
    }

    #[test]
    fn no_context_is_all_zero() {
        let m = mask_no_context(360);
        assert_eq!(m.len(), 360);
        assert_eq!(m.context_count(), 0);
        let seq = random_full(6);
        let (ctx, pred) = split(&seq, &m).unwrap();
        assert!(ctx.iter().all(|&v| v == 0.0));
        assert_eq!(pred, seq.to_flat());
    }

    #[test]
    fn sample_mask_frequencies() {
        let seq = random_full(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let (strategy, _) = sample_mask(&mut rng, &seq).unwrap();
            counts[MaskStrategy::ALL.iter().position(|&s| s == strategy).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() <= 0.01, "{f}");
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (sa, ma) = sample_mask(&mut a, &seq).unwrap();
            let (sb, mb) = sample_mask(&mut b, &seq).unwrap();
            assert_eq!((sa, &ma), (sb, &mb));
            if sa == MaskStrategy::NoContext {
                assert_eq!(ma.context_count(), 0);
            }
        }
    }

    #[test]
    fn sample_mask_on_empty_canvas() {
        let seq = StrokeSequence::empty(GridLayout::default(), ClassLabel::Null);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let (_, m) = sample_mask(&mut rng, &seq).unwrap();
            assert_eq!(m.len(), 360);
        }
    }

    #[test]
    fn split_identities() {
        let seq = random_full(11);
        let (ctx, pred) = split(&seq, &Mask::all_context(360)).unwrap();
        assert_eq!(ctx, seq.to_flat());
        assert!(pred.iter().all(|&v| v == 0.0));
        assert!(matches!(
            split(&seq, &Mask::all_context(359)),
            Err(Error::LengthMismatch { expected: 360, found: 359, .. })
        ));
    }

    #[test]
    fn mask_json_roundtrip() {
        let m = mask_block_at(20, 3, 10).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.starts_with("[1,1,1,0"));
        assert_eq!(serde_json::from_str::<Mask>(&text).unwrap(), m);
        assert!(serde_json::from_str::<Mask>("[0,2]").is_err());
        assert_eq!("none".parse::<MaskStrategy>().unwrap(), MaskStrategy::NoContext);
        assert!("diagonal".parse::<MaskStrategy>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_is_a_partition(seed in any::<u64>()) {
            let seq = random_full(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (strategy, mask) = sample_mask(&mut rng, &seq).unwrap();
            prop_assert_eq!(mask.len(), 360);
            let (ctx, pred) = split(&seq, &mask).unwrap();
            let flat = seq.to_flat();
            for i in 0..flat.len() {
                prop_assert!(ctx[i] == 0.0 || pred[i] == 0.0);
                prop_assert_eq!(ctx[i] + pred[i], flat[i]);
            }
            match strategy {
                MaskStrategy::Square => {
                    let zeros: Vec<usize> = mask.predicted_indices().collect();
                    prop_assert!(!zeros.is_empty());
                    // some masked stroke is the pivot: every masked stroke lies within it
                    let pivot_ok = zeros.iter().any(|&p| {
                        (0..360).all(|i| mask.is_context(i) != in_square(&seq.strokes[p], &seq.strokes[i]))
                    });
                    prop_assert!(pivot_ok);
                }
                MaskStrategy::Random => {
                    let f = mask.predict_count() as f64 / 360.0;
                    prop_assert!((0.0999..=0.9001).contains(&f));
                }
                _ => {}
            }
        }

        #[test]
        fn square_is_order_independent(seed in any::<u64>(), pivot in 0usize..360) {
            let seq = random_full(seed);
            let m = mask_square_at(&seq, pivot).unwrap();
            let p = seq.strokes[pivot];
            let masked: Vec<[u32; 2]> = seq.strokes.iter().zip(m.bits())
                .filter(|(_, &b)| !b).map(|(s, _)| [s.x.to_bits(), s.y.to_bits()]).collect();
            let mut rev = seq.clone();
            rev.strokes.reverse();
            let m2 = mask_square_at(&rev, 359 - pivot).unwrap();
            prop_assert_eq!(rev.strokes[359 - pivot], p);
            let mut masked2: Vec<[u32; 2]> = rev.strokes.iter().zip(m2.bits())
                .filter(|(_, &b)| !b).map(|(s, _)| [s.x.to_bits(), s.y.to_bits()]).collect();
            masked2.reverse();
            prop_assert_eq!(masked, masked2);
        }
    }
}
