//! Python bindings: `import cnp`.
//!
//! Strokes cross the boundary as 8-element float lists `[x, y, w, h, theta, r, g, b]`
//! and masks as lists of bools (true = context).

use cnp_core::diffusion::{sample, NoiseSchedule, SampleParams, SampleRequest};
use cnp_core::masking::{mask_random_with_ratio, mask_with, Mask, MaskStrategy};
use cnp_core::metrics::{frechet_distance, stroke_l1, FeatureExtractor, FeatureSummary, GridRgbFeatures};
use cnp_core::model::{ChannelNorm, Mdt, ModelConfig};
use cnp_core::render::{encode_png, Canvas, Renderer, MAX_RESOLUTION};
use cnp_core::session::{CompleteParams, Session as CoreSession};
use cnp_core::stroke::{locate_slot, ClassLabel, GridLayout, Stroke, StrokeSequence as CoreSequence};
use cnp_core::train::Checkpoint;
use cnp_core::Error;
use pyo3::exceptions::{PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for cnp_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn stroke_from(v: &[f32]) -> PyResult<Stroke> {
    Stroke::from_slice(v).py()
}

fn check_size(size: usize) -> PyResult<usize> {
    if size == 0 || size > MAX_RESOLUTION {
        return Err(PyValueError::new_err(format!("size must be in 1..={MAX_RESOLUTION}")));
    }
    Ok(size)
}

fn rgb8(py: Python<'_>, canvas: &Canvas) -> Py<PyBytes> {
    PyBytes::new(py, &canvas.to_rgb8()).unbind()
}

fn png(py: Python<'_>, canvas: &Canvas) -> PyResult<Py<PyBytes>> {
    Ok(PyBytes::new(py, &encode_png(canvas).py()?).unbind())
}

/// A fixed-length stroke sequence laid out on the coarse-to-fine grid.
#[pyclass(module = "cnp", name = "StrokeSequence", skip_from_py_object)]
#[derive(Clone)]
pub struct StrokeSequence {
    pub inner: CoreSequence,
}

#[pymethods]
impl StrokeSequence {
    /// An empty canvas: every slot free.
    #[new]
    #[pyo3(signature = (class_id=None))]
    fn new(class_id: Option<usize>) -> Self {
        StrokeSequence { inner: CoreSequence::empty(GridLayout::default(), class_id.into()) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(StrokeSequence { inner: CoreSequence::from_json(text).py()? })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(StrokeSequence { inner: CoreSequence::load(path).py()? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: PyRef<'_, StrokeSequence>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("StrokeSequence(class={}, occupied={}/{})", self.inner.class, self.inner.occupied_count(), self.inner.len())
    }

    #[getter]
    fn class_id(&self) -> Option<usize> {
        self.inner.class.id()
    }

    #[getter]
    fn occupancy(&self) -> Vec<bool> {
        self.inner.occupancy.clone()
    }

    /// Slot contents; free slots read as zeros.
    #[getter]
    fn strokes(&self) -> Vec<Vec<f32>> {
        self.inner.strokes.iter().map(|s| s.to_array().to_vec()).collect()
    }

    fn occupied_count(&self) -> usize {
        self.inner.occupied_count()
    }

    /// Stores `stroke` in its grid slot and returns `(level, slot)`.
    fn insert(&mut self, stroke: Vec<f32>) -> PyResult<(usize, usize)> {
        let s = stroke_from(&stroke)?;
        let loc = locate_slot(&self.inner.grid, &self.inner.occupancy, &s).py()?;
        self.inner.place(loc.slot, s);
        Ok((loc.level, loc.slot))
    }

    fn place(&mut self, slot: usize, stroke: Vec<f32>) -> PyResult<()> {
        if slot >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("slot {slot} out of range")));
        }
        self.inner.place(slot, stroke_from(&stroke)?);
        Ok(())
    }

    fn clear(&mut self, slot: usize) -> PyResult<()> {
        if slot >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("slot {slot} out of range")));
        }
        self.inner.clear_slot(slot);
        Ok(())
    }

    /// Row-major RGB bytes of a `size` x `size` render.
    #[pyo3(signature = (size=256))]
    fn render_rgb(&self, py: Python<'_>, size: usize) -> PyResult<Py<PyBytes>> {
        let size = check_size(size)?;
        Ok(rgb8(py, &Renderer::default().render_sequence(&self.inner, (size, size))))
    }

    #[pyo3(signature = (size=256))]
    fn render_png(&self, py: Python<'_>, size: usize) -> PyResult<Py<PyBytes>> {
        let size = check_size(size)?;
        png(py, &Renderer::default().render_sequence(&self.inner, (size, size)))
    }
}

/// Draws a mask (true = context) with one of the strategies
/// `level`, `random`, `square`, `block`, `none`.
#[pyfunction]
#[pyo3(signature = (strategy, seq, seed=0, ratio=None))]
fn make_mask(strategy: &str, seq: PyRef<'_, StrokeSequence>, seed: u64, ratio: Option<f64>) -> PyResult<Vec<bool>> {
    let strategy: MaskStrategy = strategy.parse().py()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = match (strategy, ratio) {
        (MaskStrategy::Random, Some(r)) => mask_random_with_ratio(&mut rng, seq.inner.len(), r).py()?,
        (_, Some(_)) => return Err(PyValueError::new_err("ratio only applies to the random strategy")),
        _ => mask_with(&mut rng, strategy, &seq.inner).py()?,
    };
    Ok(mask.bits().to_vec())
}

/// A trained denoiser loaded from a checkpoint.
#[pyclass(module = "cnp", name = "Model", frozen)]
pub struct Model {
    model: Mdt<f32>,
    schedule: NoiseSchedule,
    class_names: Vec<String>,
}

#[pymethods]
impl Model {
    /// Loads the EMA weights, or the raw weights with `raw=True`.
    #[staticmethod]
    #[pyo3(signature = (path, raw=false))]
    fn load(path: std::path::PathBuf, raw: bool) -> PyResult<Self> {
        let c = Checkpoint::load(path).py()?;
        let model = if raw { c.raw_model() } else { c.ema_model() }.py()?;
        Ok(Model { model, schedule: c.schedule, class_names: c.class_names })
    }

    /// A randomly initialized model, mainly for tests and demos.
    #[staticmethod]
    #[pyo3(signature = (num_classes=2, layers=1, dim=16, heads=2, seed=0))]
    fn untrained(num_classes: usize, layers: usize, dim: usize, heads: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::custom(layers, dim, heads, num_classes);
        let model = Mdt::init(config, ChannelNorm::identity(), seed).py()?;
        let class_names = (0..num_classes).map(|c| format!("class-{c}")).collect();
        Ok(Model { model, schedule: NoiseSchedule::default(), class_names })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        let mut c = Checkpoint::from_model(&self.model, self.class_names.clone());
        c.schedule = self.schedule;
        c.save(path).py()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.params.numel()
    }

    /// Fills the masked slots of `context`. The mask defaults to the context's occupancy.
    #[pyo3(signature = (context=None, mask=None, class_id=None, seed=0, steps=70, s1=1.5, s2=1.5))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        py: Python<'_>,
        context: Option<PyRef<'_, StrokeSequence>>,
        mask: Option<Vec<bool>>,
        class_id: Option<usize>,
        seed: u64,
        steps: usize,
        s1: f64,
        s2: f64,
    ) -> PyResult<StrokeSequence> {
        let class: ClassLabel = class_id.into();
        let context = match context {
            Some(c) => c.inner.clone(),
            None => CoreSequence::empty(GridLayout::default(), class),
        };
        let mask = Mask::from_bits(mask.unwrap_or_else(|| context.occupancy.clone()));
        let params = SampleParams { steps, s1, s2 };
        let out = py.detach(|| {
            let request = SampleRequest { context: &context, mask: &mask, class, seed };
            sample(&self.model, &self.schedule, &request, &params)
        });
        Ok(StrokeSequence { inner: out.py()? })
    }
}

/// An editable painting session with an undoable, replayable edit log.
#[pyclass(module = "cnp", name = "Session")]
pub struct Session {
    inner: CoreSession,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (id="session", class_id=None))]
    fn new(id: &str, class_id: Option<usize>) -> Self {
        Session { inner: CoreSession::new(id, GridLayout::default(), class_id.into()) }
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn version(&self) -> u64 {
        self.inner.version
    }

    #[getter]
    fn sequence(&self) -> StrokeSequence {
        StrokeSequence { inner: self.inner.seq.clone() }
    }

    #[getter]
    fn history_len(&self) -> usize {
        self.inner.history.len()
    }

    /// Returns `(level, (row, col), slot)`.
    fn add_stroke(&mut self, stroke: Vec<f32>) -> PyResult<(usize, (usize, usize), usize)> {
        let loc = self.inner.add_stroke(stroke_from(&stroke)?).py()?;
        Ok((loc.level, loc.block, loc.slot))
    }

    /// Removes strokes centered in the square; returns how many.
    #[pyo3(signature = (cx, cy, side=cnp_core::session::DEFAULT_ERASE_SIDE))]
    fn erase(&mut self, cx: f32, cy: f32, side: f32) -> PyResult<usize> {
        self.inner.erase_square(cx, cy, side).py()
    }

    #[pyo3(signature = (n=1))]
    fn undo(&mut self, n: usize) -> PyResult<()> {
        self.inner.undo(n).py()
    }

    /// Samples `n_variants` completions of the free slots without changing the canvas.
    #[pyo3(signature = (model, n_variants=1, steps=70, s1=1.5, s2=1.5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn complete(
        &mut self,
        py: Python<'_>,
        model: &Bound<'_, Model>,
        n_variants: usize,
        steps: usize,
        s1: f64,
        s2: f64,
        seed: u64,
    ) -> PyResult<Vec<StrokeSequence>> {
        let params = CompleteParams { n_variants, steps, s1, s2, seed };
        let m = model.get();
        let seq = self.inner.seq.clone();
        let class = self.inner.class;
        let variants = py
            .detach(|| cnp_core::session::complete_variants(&m.model, &m.schedule, &seq, class, &params))
            .py()?;
        let version = self.inner.version;
        self.inner.set_pending(version, params, variants.clone()).py()?;
        Ok(variants.into_iter().map(|inner| StrokeSequence { inner }).collect())
    }

    fn accept(&mut self, index: usize) -> PyResult<()> {
        self.inner.accept_variant(index).py()
    }

    /// Rebuilds the canvas from the edit log alone.
    fn replay(&self) -> PyResult<StrokeSequence> {
        Ok(StrokeSequence { inner: self.inner.replay().py()? })
    }

    #[pyo3(signature = (size=512))]
    fn render_png(&self, py: Python<'_>, size: usize) -> PyResult<Py<PyBytes>> {
        png(py, &self.inner.render(size).py()?)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        self.inner.to_jsonl().py()
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Session { inner: CoreSession::from_jsonl(text).py()? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Session { inner: CoreSession::load(path).py()? })
    }
}

/// Mean L1 over the masked slots after optimal matching within each level.
#[pyfunction]
fn l1_distance(pred: PyRef<'_, StrokeSequence>, gt: PyRef<'_, StrokeSequence>, mask: Vec<bool>) -> PyResult<f64> {
    stroke_l1(&pred.inner, &gt.inner, &Mask::from_bits(mask)).py()
}

/// Proxy-Frechet distance between two sets of sequences rendered at `size`.
#[pyfunction]
#[pyo3(signature = (a, b, size=64))]
fn proxy_frechet(py: Python<'_>, a: Vec<PyRef<'_, StrokeSequence>>, b: Vec<PyRef<'_, StrokeSequence>>, size: usize) -> PyResult<f64> {
    let size = check_size(size)?;
    let a: Vec<CoreSequence> = a.iter().map(|s| s.inner.clone()).collect();
    let b: Vec<CoreSequence> = b.iter().map(|s| s.inner.clone()).collect();
    py.detach(|| {
        let features = GridRgbFeatures::default();
        let renderer = Renderer::default();
        let summarize = |set: &[CoreSequence]| {
            let images: Vec<Canvas> = set.iter().map(|s| renderer.render_sequence(s, (size, size))).collect();
            FeatureSummary::of_images(&images, &features as &dyn FeatureExtractor)
        };
        frechet_distance(&summarize(&a)?, &summarize(&b)?)
    })
    .py()
}

#[pymodule]
pub fn cnp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<StrokeSequence>()?;
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(make_mask, m)?)?;
    m.add_function(wrap_pyfunction!(l1_distance, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_frechet, m)?)?;
    m.add("SEQ_LEN", GridLayout::default().total_length())?;
    m.add("MASK_STRATEGIES", MaskStrategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
