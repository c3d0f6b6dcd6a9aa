//! Event-sourced painting session: the stroke sequence is always the replay
//! of the edit log, and completions are proposals until one is accepted.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, Denoiser, NoiseSchedule, SampleParams, SampleRequest};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::render::{Canvas, Renderer, MAX_RESOLUTION};
use crate::stroke::{locate_slot, ClassLabel, GridLayout, SlotLocation, Stroke, StrokeSequence};

pub const DEFAULT_ERASE_SIDE: f32 = 0.5;
pub const STEP_RANGE: (usize, usize) = (35, 1000);
pub const MAX_VARIANTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompleteParams {
    pub n_variants: usize,
    pub steps: usize,
    pub s1: f64,
    pub s2: f64,
    pub seed: u64,
}

impl Default for CompleteParams {
    fn default() -> Self {
        let p = SampleParams::default();
        CompleteParams { n_variants: 1, steps: p.steps, s1: p.s1, s2: p.s2, seed: 0 }
    }
}

impl CompleteParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_variants == 0 || self.n_variants > MAX_VARIANTS {
            return Err(Error::InvalidArgument(format!("n_variants must lie in 1..={MAX_VARIANTS}")));
        }
        if self.steps < STEP_RANGE.0 || self.steps > STEP_RANGE.1 {
            return Err(Error::InvalidArgument(format!(
                "steps must lie in {}..={}",
                STEP_RANGE.0, STEP_RANGE.1
            )));
        }
        if !self.s1.is_finite() || !self.s2.is_finite() {
            return Err(Error::NonFinite("guidance scale".into()));
        }
        Ok(())
    }

    pub fn sample_params(&self) -> SampleParams {
        SampleParams { steps: self.steps, s1: self.s1, s2: self.s2 }
    }
}

/// One state-changing operation. Accepts carry the chosen sequence so a
/// replay never needs the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    AddStroke { stroke: [f32; 8], slot: usize },
    Erase { cx: f32, cy: f32, side: f32, erased: Vec<usize> },
    Accept { index: usize, params: CompleteParams, strokes: Vec<[f32; 8]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    id: String,
    class: Option<usize>,
    grid: GridLayout,
    created: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    version: u64,
    params: CompleteParams,
    variants: Vec<StrokeSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub class: ClassLabel,
    pub seq: StrokeSequence,
    pub history: Vec<Edit>,
    /// Bumped on every state change, undo included.
    pub version: u64,
    pub created: u64,
    pub updated: u64,
    pending: Option<Pending>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Occupied slots whose centers lie in the axis-aligned square.
pub fn strokes_in_square(seq: &StrokeSequence, cx: f32, cy: f32, side: f32) -> Vec<usize> {
    let half = side / 2.0;
    (0..seq.len())
        .filter(|&i| {
            let s = &seq.strokes[i];
            seq.occupancy[i] && (s.x - cx).abs() <= half && (s.y - cy).abs() <= half
        })
        .collect()
}

fn apply(seq: &mut StrokeSequence, edit: &Edit) -> Result<()> {
    match edit {
        Edit::AddStroke { stroke, slot } => {
            let s = Stroke::from_array(*stroke);
            let loc = locate_slot(&seq.grid, &seq.occupancy, &s)?;
            if loc.slot != *slot {
                return Err(Error::Malformed(format!("replayed stroke landed in slot {} not {slot}", loc.slot)));
            }
            seq.place(loc.slot, s);
        }
        Edit::Erase { cx, cy, side, erased } => {
            let found = strokes_in_square(seq, *cx, *cy, *side);
            if &found != erased {
                return Err(Error::Malformed("replayed erase selected different strokes".into()));
            }
            for i in found {
                seq.clear_slot(i);
            }
        }
        Edit::Accept { strokes, .. } => {
            if strokes.len() != seq.len() {
                return Err(Error::LengthMismatch { what: "accepted strokes", expected: seq.len(), found: strokes.len() });
            }
            for (i, s) in strokes.iter().enumerate() {
                let s = Stroke::from_array(*s);
                s.validate()?;
                seq.place(i, s);
            }
        }
    }
    Ok(())
}

/// Samples `n_variants` completions of `seq`, context = occupied slots, with
/// seeds `seed, seed + 1, ...`.
pub fn complete_variants<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    seq: &StrokeSequence,
    class: ClassLabel,
    params: &CompleteParams,
) -> Result<Vec<StrokeSequence>> {
    params.validate()?;
    let mask = Mask::from_bits(seq.occupancy.clone());
    let requests: Vec<SampleRequest> = (0..params.n_variants as u64)
        .map(|k| SampleRequest { context: seq, mask: &mask, class, seed: params.seed.wrapping_add(k) })
        .collect();
    sample_batch(model, schedule, &requests, &params.sample_params())
}

impl Session {
    pub fn new(id: impl Into<String>, grid: GridLayout, class: ClassLabel) -> Self {
        let t = now();
        Session {
            id: id.into(),
            class,
            seq: StrokeSequence::empty(grid, class),
            history: Vec::new(),
            version: 0,
            created: t,
            updated: t,
            pending: None,
        }
    }

    fn commit(&mut self, edit: Edit) {
        self.history.push(edit);
        self.version += 1;
        self.updated = now();
        self.pending = None;
    }

    pub fn add_stroke(&mut self, s: Stroke) -> Result<SlotLocation> {
        let loc = locate_slot(&self.seq.grid, &self.seq.occupancy, &s)?;
        self.seq.place(loc.slot, s);
        self.commit(Edit::AddStroke { stroke: s.to_array(), slot: loc.slot });
        Ok(loc)
    }

    /// Clears every occupied stroke centered in the square; returns how many.
    pub fn erase_square(&mut self, cx: f32, cy: f32, side: f32) -> Result<usize> {
        if !(cx.is_finite() && cy.is_finite() && side.is_finite() && side >= 0.0) {
            return Err(Error::InvalidArgument("erase square needs finite center and side >= 0".into()));
        }
        let erased = strokes_in_square(&self.seq, cx, cy, side);
        for &i in &erased {
            self.seq.clear_slot(i);
        }
        let n = erased.len();
        self.commit(Edit::Erase { cx, cy, side, erased });
        Ok(n)
    }

    /// Drops the last `n` edits and rebuilds the state by replay.
    pub fn undo(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("undo needs n >= 1".into()));
        }
        if n > self.history.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot undo {n} edits, history has {}",
                self.history.len()
            )));
        }
        self.history.truncate(self.history.len() - n);
        self.seq = self.replay()?;
        self.version += 1;
        self.updated = now();
        self.pending = None;
        Ok(())
    }

    /// State rebuilt from an empty canvas and the history.
    pub fn replay(&self) -> Result<StrokeSequence> {
        let mut seq = StrokeSequence::empty(self.seq.grid, self.class);
        for edit in &self.history {
            apply(&mut seq, edit)?;
        }
        Ok(seq)
    }

    /// Proposes completions without touching the state.
    pub fn complete<D: Denoiser + ?Sized>(
        &mut self,
        model: &D,
        schedule: &NoiseSchedule,
        params: &CompleteParams,
    ) -> Result<Vec<StrokeSequence>> {
        let variants = complete_variants(model, schedule, &self.seq, self.class, params)?;
        self.set_pending(self.version, *params, variants.clone())?;
        Ok(variants)
    }

    /// Registers variants sampled elsewhere from the state at `version`.
    pub fn set_pending(&mut self, version: u64, params: CompleteParams, variants: Vec<StrokeSequence>) -> Result<()> {
        if version != self.version {
            return Err(Error::InvalidArgument(format!(
                "variants were sampled from version {version}, session is at {}",
                self.version
            )));
        }
        self.pending = Some(Pending { version, params, variants });
        Ok(())
    }

    pub fn pending_variants(&self) -> Option<&[StrokeSequence]> {
        self.pending.as_ref().map(|p| p.variants.as_slice())
    }

    /// Makes a pending variant the session state. Consumes the proposals.
    pub fn accept_variant(&mut self, index: usize) -> Result<()> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::InvalidArgument("no pending variants".into()))?;
        if pending.version != self.version {
            return Err(Error::InvalidArgument("pending variants are stale".into()));
        }
        let Some(chosen) = pending.variants.get(index) else {
            let n = pending.variants.len();
            self.pending = Some(pending);
            return Err(Error::InvalidArgument(format!("variant {index} out of range (have {n})")));
        };
        let strokes: Vec<[f32; 8]> = chosen.strokes.iter().map(|s| s.to_array()).collect();
        let edit = Edit::Accept { index, params: pending.params, strokes };
        apply(&mut self.seq, &edit)?;
        self.commit(edit);
        Ok(())
    }

    pub fn render(&self, size: usize) -> Result<Canvas> {
        if size == 0 || size > MAX_RESOLUTION {
            return Err(Error::InvalidArgument(format!("render size must lie in 1..={MAX_RESOLUTION}")));
        }
        Ok(Renderer::default().render_sequence(&self.seq, (size, size)))
    }

    /// Header line followed by one line per edit.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = LogHeader { id: self.id.clone(), class: self.class.id(), grid: self.seq.grid, created: self.created };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.history {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Malformed("empty session log".into()))?)?;
        let grid = GridLayout::new(header.grid.levels, header.grid.strokes_per_block)?;
        let mut session = Session::new(header.id, grid, header.class.into());
        session.created = header.created;
        for line in lines {
            let edit: Edit = serde_json::from_str(line)?;
            apply(&mut session.seq, &edit)?;
            session.history.push(edit);
            session.version += 1;
        }
        Ok(session)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Denoiser;
    use crate::model::{ChannelNorm, Mdt, ModelConfig};

    fn disk(x: f32, y: f32, size: f32) -> Stroke {
        Stroke::new(x, y, size, size, 0.0, 0.8, 0.2, 0.1)
    }

    fn tiny_model() -> Mdt<f32> {
        let mut c = ModelConfig::custom(1, 16, 2, 2);
        c.freq_dim = 16;
        Mdt::init(c, ChannelNorm::identity(), 5).unwrap()
    }

    fn fast() -> CompleteParams {
        CompleteParams { n_variants: 2, steps: 35, seed: 10, ..CompleteParams::default() }
    }

    #[test]
    fn placement_and_capacity() {
        let mut s = Session::new("a", GridLayout::default(), ClassLabel::Null);
        let loc = s.add_stroke(disk(0.5, 0.5, 1.0)).unwrap();
        assert_eq!((loc.level, loc.block, loc.slot), (1, (0, 0), 0));
        let mut s = Session::new("b", GridLayout::default(), ClassLabel::Null);
        for k in 0..12 {
            assert_eq!(s.add_stroke(disk(0.1, 0.1, 0.2)).unwrap().slot, 12 + 48 + 108 + k);
        }
        let err = s.add_stroke(disk(0.1, 0.1, 0.2)).unwrap_err();
        assert!(matches!(err, Error::BlockFull { level: 4, row: 0, col: 0 }), "{err}");
        assert_eq!(s.history.len(), 12);
        assert_eq!(s.replay().unwrap(), s.seq);
    }

    #[test]
    fn erase_examples() {
        let mut s = Session::new("a", GridLayout::default(), ClassLabel::Id(0));
        s.add_stroke(disk(0.2, 0.2, 0.2)).unwrap();
        s.add_stroke(disk(0.8, 0.8, 0.2)).unwrap();
        s.add_stroke(disk(0.3, 0.25, 0.5)).unwrap();
        assert_eq!(s.erase_square(0.9, 0.1, 0.1).unwrap(), 0);
        assert_eq!(s.erase_square(0.25, 0.25, 0.5).unwrap(), 2);
        assert_eq!(s.erase_square(0.25, 0.25, 0.5).unwrap(), 0);
        assert_eq!(s.seq.occupied_count(), 1);
        assert_eq!(s.erase_square(0.5, 0.5, 2.0).unwrap(), 1);
        assert_eq!(s.seq.occupied_count(), 0);
        assert_eq!(s.seq, StrokeSequence::empty(GridLayout::default(), ClassLabel::Id(0)));
        assert_eq!(s.replay().unwrap(), s.seq);
    }

    #[test]
    fn undo_examples() {
        let fresh = Session::new("a", GridLayout::default(), ClassLabel::Null);
        let mut s = fresh.clone();
        for k in 0..4 {
            s.add_stroke(disk(0.1 + 0.2 * k as f32, 0.5, 0.2)).unwrap();
        }
        let after_three = {
            let mut t = s.clone();
            t.undo(1).unwrap();
            t.seq
        };
        assert!(s.undo(0).is_err());
        assert!(s.undo(5).is_err());
        s.undo(4).unwrap();
        assert_eq!(s.seq, fresh.seq);
        assert!(s.history.is_empty());
        for k in 0..3 {
            s.add_stroke(disk(0.1 + 0.2 * k as f32, 0.5, 0.2)).unwrap();
        }
        assert_eq!(s.seq, after_three);
    }

    #[test]
    fn complete_proposes_and_accept_applies() {
        let model = tiny_model();
        let schedule = NoiseSchedule::default();
        let mut s = Session::new("a", GridLayout::default(), ClassLabel::Id(1));
        for k in 0..5 {
            s.add_stroke(disk(0.15 + 0.15 * k as f32, 0.4, 0.3)).unwrap();
        }
        let before = s.seq.clone();
        let version = s.version;
        let variants = s.complete(&model, &schedule, &fast()).unwrap();
        assert_eq!(s.seq, before, "complete must not mutate");
        assert_eq!(s.version, version);
        assert_eq!(variants.len(), 2);
        assert_ne!(variants[0], variants[1]);
        for v in &variants {
            assert_eq!(v.occupied_count(), v.len());
            for i in (0..v.len()).filter(|&i| before.occupancy[i]) {
                assert_eq!(v.strokes[i].to_array().map(f32::to_bits), before.strokes[i].to_array().map(f32::to_bits));
            }
        }
        let again = complete_variants(&model, &schedule, &before, ClassLabel::Id(1), &fast()).unwrap();
        assert_eq!(again, variants);

        assert!(s.accept_variant(2).is_err());
        s.accept_variant(1).unwrap();
        assert_eq!(s.seq, variants[1]);
        assert!(s.accept_variant(0).is_err(), "variants are consumed");
        assert_eq!(s.render(32).unwrap(), Renderer::default().render_sequence(&variants[1], (32, 32)));
        assert_eq!(s.replay().unwrap(), s.seq);

        // edits invalidate proposals
        s.complete(&model, &schedule, &fast()).unwrap();
        s.erase_square(0.5, 0.5, 0.5).unwrap();
        assert!(s.accept_variant(0).is_err());
        assert!(s.set_pending(version, fast(), vec![]).is_err());
    }

    #[test]
    fn empty_session_completes_without_context() {
        let model = tiny_model();
        let mut s = Session::new("a", GridLayout::default(), ClassLabel::Id(0));
        let v = s.complete(&model, &NoiseSchedule::default(), &CompleteParams { n_variants: 1, steps: 35, ..CompleteParams::default() }).unwrap();
        assert_eq!(v[0].occupied_count(), v[0].len());
        assert_eq!(model.seq_len(), v[0].len());
    }

    #[test]
    fn params_validation() {
        assert!(CompleteParams { steps: 34, ..CompleteParams::default() }.validate().is_err());
        assert!(CompleteParams { steps: 1001, ..CompleteParams::default() }.validate().is_err());
        assert!(CompleteParams { n_variants: 0, ..CompleteParams::default() }.validate().is_err());
        assert!(CompleteParams { s1: f64::NAN, ..CompleteParams::default() }.validate().is_err());
        let d = CompleteParams::default();
        assert_eq!((d.steps, d.s1, d.s2), (70, 1.5, 1.5));
    }

    #[test]
    fn render_and_log_round_trip() {
        let model = tiny_model();
        let mut s = Session::new("abc", GridLayout::default(), ClassLabel::Id(0));
        assert_eq!(s.render(16).unwrap(), Canvas::black(16, 16));
        assert!(s.render(5000).is_err());
        s.add_stroke(disk(0.5, 0.5, 0.6)).unwrap();
        s.complete(&model, &NoiseSchedule::default(), &fast()).unwrap();
        s.accept_variant(0).unwrap();
        s.erase_square(0.5, 0.5, 0.3).unwrap();
        let text = s.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 4);
        let back = Session::from_jsonl(&text).unwrap();
        assert_eq!(back.seq, s.seq);
        assert_eq!(back.history, s.history);
        assert_eq!(back.version, s.version);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.jsonl");
        s.save(&path).unwrap();
        assert_eq!(Session::load(&path).unwrap().seq, s.seq);

        let mut tampered: Vec<String> = text.lines().map(String::from).collect();
        tampered[1] = tampered[1].replace("\"slot\":", "\"slot\":1");
        assert!(Session::from_jsonl(&tampered.join("\n")).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Add(f32, f32, f32),
            Erase(f32, f32, f32),
            Undo(usize),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                4 => (0.0f32..1.0, 0.0f32..1.0, 0.05f32..1.0).prop_map(|(x, y, e)| Op::Add(x, y, e)),
                1 => (0.0f32..1.0, 0.0f32..1.0, 0.0f32..0.8).prop_map(|(x, y, e)| Op::Erase(x, y, e)),
                1 => (1usize..4).prop_map(Op::Undo),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn state_is_replay_of_history(ops in prop::collection::vec(op(), 1..80)) {
                let mut s = Session::new("p", GridLayout::default(), ClassLabel::Id(0));
                for o in ops {
                    let _ = match o {
                        Op::Add(x, y, e) => s.add_stroke(disk(x, y, e)).map(|_| ()),
                        Op::Erase(x, y, e) => s.erase_square(x, y, e).map(|_| ()),
                        Op::Undo(n) => s.undo(n),
                    };
                    prop_assert_eq!(s.replay().unwrap(), s.seq.clone());
                }
                let back = Session::from_jsonl(&s.to_jsonl().unwrap()).unwrap();
                prop_assert_eq!(back.seq, s.seq);
            }
        }
    }
}
