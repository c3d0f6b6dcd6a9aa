//! Strokes, stroke sequences and the coarse-to-fine slot layout.
//!
//! A painting is a fixed-length sequence of [`Stroke`]s. The sequence is
//! partitioned into granularity levels `m = 1..=levels`; level `m` splits the
//! canvas into an `m x m` grid of blocks and every block owns `N` consecutive
//! slots. Blocks are laid out by (level, block row, block col).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of scalar parameters per stroke.
pub const STROKE_DIM: usize = 8;

/// Smallest width/height a sampled stroke is clamped to.
pub const MIN_STROKE_SIZE: f32 = 1e-3;

/// One brushstroke: center, size, rotation and color, all normalized.
///
/// `theta` in `[0, 1]` encodes a rotation angle `theta * pi`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stroke {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub theta: f32,
    pub r: f32,
    pub g: f32,
    pub b: f32,
}

pub const FIELD_NAMES: [&str; STROKE_DIM] = ["x", "y", "w", "h", "theta", "r", "g", "b"];

#[derive(Debug, Clone, PartialEq)]
pub enum FieldViolation {
    OutOfRange { field: &'static str, value: f32 },
    NonFinite { field: &'static str },
}

impl fmt::Display for FieldViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldViolation::OutOfRange { field, value } => {
                write!(f, "out-of-range: {field} = {value}")
            }
            FieldViolation::NonFinite { field } => write!(f, "non-finite: {field}"),
        }
    }
}

impl Stroke {
    /// The placeholder stored in unoccupied slots.
    pub const EMPTY: Stroke = Stroke {
        x: 0.0,
        y: 0.0,
        w: 0.0,
        h: 0.0,
        theta: 0.0,
        r: 0.0,
        g: 0.0,
        b: 0.0,
    };

    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f32, y: f32, w: f32, h: f32, theta: f32, r: f32, g: f32, b: f32) -> Self {
        Stroke {
            x,
            y,
            w,
            h,
            theta,
            r,
            g,
            b,
        }
    }

    pub fn to_array(&self) -> [f32; STROKE_DIM] {
        [
            self.x, self.y, self.w, self.h, self.theta, self.r, self.g, self.b,
        ]
    }

    pub fn from_array(a: [f32; STROKE_DIM]) -> Self {
        Stroke::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7])
    }

    pub fn from_slice(s: &[f32]) -> Result<Self> {
        let arr: [f32; STROKE_DIM] = s.try_into().map_err(|_| Error::LengthMismatch {
            what: "stroke parameters",
            expected: STROKE_DIM,
            found: s.len(),
        })?;
        Ok(Stroke::from_array(arr))
    }

    /// Largest of width and height.
    pub fn extent(&self) -> f32 {
        self.w.max(self.h)
    }

    pub fn color(&self) -> [f32; 3] {
        [self.r, self.g, self.b]
    }

    pub fn validate(&self) -> Result<()> {
        validate_stroke(self)
    }

    /// Projects every channel into its valid range.
    pub fn clamped(&self) -> Stroke {
        let u = |v: f32| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let s = |v: f32| {
            if v.is_finite() {
                v.clamp(MIN_STROKE_SIZE, 1.0)
            } else {
                MIN_STROKE_SIZE
            }
        };
        Stroke::new(
            u(self.x),
            u(self.y),
            s(self.w),
            s(self.h),
            u(self.theta),
            u(self.r),
            u(self.g),
            u(self.b),
        )
    }
}

/// Checks finiteness and ranges of every field, reporting all violations.
pub fn validate_stroke(s: &Stroke) -> Result<()> {
    let values = s.to_array();
    let mut violations = Vec::new();
    for (i, (&v, &field)) in values.iter().zip(FIELD_NAMES.iter()).enumerate() {
        if !v.is_finite() {
            violations.push(FieldViolation::NonFinite { field });
            continue;
        }
        let ok = match i {
            // w, h are half-open (0, 1]
            2 | 3 => v > 0.0 && v <= 1.0,
            _ => (0.0..=1.0).contains(&v),
        };
        if !ok {
            violations.push(FieldViolation::OutOfRange { field, value: v });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidStroke(violations))
    }
}

/// Class conditioning: a class id or the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum ClassLabel {
    #[default]
    Null,
    Id(usize),
}

impl ClassLabel {
    pub fn id(self) -> Option<usize> {
        match self {
            ClassLabel::Null => None,
            ClassLabel::Id(i) => Some(i),
        }
    }

    pub fn is_null(self) -> bool {
        matches!(self, ClassLabel::Null)
    }

    pub fn check(self, num_classes: usize) -> Result<()> {
        match self {
            ClassLabel::Id(id) if id >= num_classes => Err(Error::UnknownClass { id, num_classes }),
            _ => Ok(()),
        }
    }
}

impl From<Option<usize>> for ClassLabel {
    fn from(v: Option<usize>) -> Self {
        v.map_or(ClassLabel::Null, ClassLabel::Id)
    }
}

impl From<ClassLabel> for Option<usize> {
    fn from(c: ClassLabel) -> Self {
        c.id()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Null => f.write_str("none"),
            ClassLabel::Id(i) => write!(f, "{i}"),
        }
    }
}

/// Granularity-level layout of a stroke sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLayout {
    pub levels: usize,
    #[serde(rename = "n_per_block")]
    pub strokes_per_block: usize,
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout {
            levels: 4,
            strokes_per_block: 12,
        }
    }
}

/// Position of a slot in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLocation {
    pub level: usize,
    pub block: (usize, usize),
    pub slot: usize,
}

impl GridLayout {
    pub fn new(levels: usize, strokes_per_block: usize) -> Result<Self> {
        if levels == 0 || strokes_per_block == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs levels >= 1 and strokes_per_block >= 1, got ({levels}, {strokes_per_block})"
            )));
        }
        Ok(GridLayout {
            levels,
            strokes_per_block,
        })
    }

    /// Sequence length `N * sum(m^2)`.
    pub fn total_length(&self) -> usize {
        self.level_offset(self.levels + 1)
    }

    /// First slot of `level` (levels past the last return `total_length`).
    fn level_offset(&self, level: usize) -> usize {
        let blocks: usize = (1..level).map(|m| m * m).sum();
        blocks * self.strokes_per_block
    }

    /// Half-open slot range owned by a whole level.
    pub fn level_range(&self, level: usize) -> Result<(usize, usize)> {
        self.check_level(level)?;
        Ok((self.level_offset(level), self.level_offset(level + 1)))
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels {
            return Err(Error::LevelOutOfRange {
                level,
                levels: self.levels,
            });
        }
        Ok(())
    }

    /// Half-open slot range of block `(row, col)` in `level`.
    pub fn slot_range(&self, level: usize, block: (usize, usize)) -> Result<(usize, usize)> {
        self.check_level(level)?;
        let (row, col) = block;
        if row >= level || col >= level {
            return Err(Error::BlockOutOfRange { level, row, col });
        }
        let start = self.level_offset(level) + (row * level + col) * self.strokes_per_block;
        Ok((start, start + self.strokes_per_block))
    }

    /// Level (1-based) owning slot `index`.
    pub fn level_of(&self, index: usize) -> Option<usize> {
        (1..=self.levels).find(|&m| index < self.level_offset(m + 1))
    }

    /// Full location of slot `index`.
    pub fn location_of(&self, index: usize) -> Option<SlotLocation> {
        let level = self.level_of(index)?;
        let within = (index - self.level_offset(level)) / self.strokes_per_block;
        Some(SlotLocation {
            level,
            block: (within / level, within % level),
            slot: index,
        })
    }

    /// Granularity level whose maximum stroke size `1/m` is closest to the
    /// stroke extent; ties go to the coarser level.
    pub fn level_for_extent(&self, extent: f32) -> usize {
        let mut best = 1;
        let mut best_d = f32::INFINITY;
        for m in 1..=self.levels {
            let d = (1.0 / m as f32 - extent).abs();
            if d < best_d {
                best = m;
                best_d = d;
            }
        }
        best
    }

    /// Cell of the `level x level` grid containing the point, as (row, col).
    pub fn cell_of(&self, level: usize, x: f32, y: f32) -> (usize, usize) {
        let idx = |v: f32| ((v * level as f32).floor().max(0.0) as usize).min(level - 1);
        (idx(y), idx(x))
    }
}

/// Finds where a user stroke goes: the level by size, the block by position,
/// and the first free slot of that block.
pub fn locate_slot(grid: &GridLayout, occupancy: &[bool], s: &Stroke) -> Result<SlotLocation> {
    validate_stroke(s)?;
    if occupancy.len() != grid.total_length() {
        return Err(Error::LengthMismatch {
            what: "occupancy",
            expected: grid.total_length(),
            found: occupancy.len(),
        });
    }
    let level = grid.level_for_extent(s.extent());
    let block = grid.cell_of(level, s.x, s.y);
    let (start, end) = grid.slot_range(level, block)?;
    match (start..end).find(|&i| !occupancy[i]) {
        Some(slot) => Ok(SlotLocation { level, block, slot }),
        None => Err(Error::BlockFull {
            level,
            row: block.0,
            col: block.1,
        }),
    }
}

/// Fixed-length stroke sequence with its occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeSequence {
    pub grid: GridLayout,
    pub strokes: Vec<Stroke>,
    pub occupancy: Vec<bool>,
    pub class: ClassLabel,
}

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SequenceDocument {
    version: u32,
    grid: GridLayout,
    class: Option<usize>,
    occupancy: Vec<u8>,
    strokes: Vec<Vec<f32>>,
}

impl StrokeSequence {
    pub fn empty(grid: GridLayout, class: ClassLabel) -> Self {
        let l = grid.total_length();
        StrokeSequence {
            grid,
            strokes: vec![Stroke::EMPTY; l],
            occupancy: vec![false; l],
            class,
        }
    }

    /// A fully occupied sequence.
    pub fn full(grid: GridLayout, strokes: Vec<Stroke>, class: ClassLabel) -> Result<Self> {
        let occupancy = vec![true; strokes.len()];
        let seq = StrokeSequence {
            grid,
            strokes,
            occupancy,
            class,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.grid.total_length();
        for (what, found) in [
            ("strokes", self.strokes.len()),
            ("occupancy", self.occupancy.len()),
        ] {
            if found != l {
                return Err(Error::LengthMismatch {
                    what,
                    expected: l,
                    found,
                });
            }
        }
        for (s, &occ) in self.strokes.iter().zip(&self.occupancy) {
            if occ {
                validate_stroke(s)?;
            } else if *s != Stroke::EMPTY {
                return Err(Error::Malformed(
                    "unoccupied slot holds a non-placeholder stroke".into(),
                ));
            }
        }
        Ok(())
    }

    /// Writes `s` into `slot` and marks it occupied.
    pub fn place(&mut self, slot: usize, s: Stroke) {
        self.strokes[slot] = s;
        self.occupancy[slot] = true;
    }

    pub fn clear_slot(&mut self, slot: usize) {
        self.strokes[slot] = Stroke::EMPTY;
        self.occupancy[slot] = false;
    }

    /// Flat `L x 8` parameter matrix.
    pub fn to_flat(&self) -> Vec<f32> {
        self.strokes.iter().flat_map(|s| s.to_array()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SequenceDocument {
            version: SEQUENCE_FORMAT_VERSION,
            grid: self.grid,
            class: self.class.id(),
            occupancy: self.occupancy.iter().map(|&o| o as u8).collect(),
            strokes: self.strokes.iter().map(|s| s.to_array().to_vec()).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed("missing numeric `version`".into()))?;
        if version != u64::from(SEQUENCE_FORMAT_VERSION) {
            return Err(Error::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
        }
        let doc: SequenceDocument =
            serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
        let grid = GridLayout::new(doc.grid.levels, doc.grid.strokes_per_block)?;
        let l = grid.total_length();
        if doc.strokes.len() != l {
            return Err(Error::LengthMismatch {
                what: "strokes",
                expected: l,
                found: doc.strokes.len(),
            });
        }
        if doc.occupancy.len() != l {
            return Err(Error::LengthMismatch {
                what: "occupancy",
                expected: l,
                found: doc.occupancy.len(),
            });
        }
        let occupancy = doc
            .occupancy
            .iter()
            .map(|&o| match o {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Malformed(format!("occupancy value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let strokes = doc
            .strokes
            .iter()
            .map(|s| Stroke::from_slice(s))
            .collect::<Result<Vec<_>>>()?;
        let seq = StrokeSequence {
            grid,
            strokes,
            occupancy,
            class: doc.class.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
