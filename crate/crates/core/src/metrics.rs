//! Completion quality: matched stroke L1, image L2, proxy-Fréchet distance
//! over a lightweight feature extractor, and the per-task evaluation driver.
//!
//! The Fréchet numbers here come from `grid8-rgb-v1` features, not from an
//! Inception network, so they are only comparable with each other.


use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, Denoiser, NoiseSchedule, SampleParams, SampleRequest};
use crate::error::{Error, Result};
use crate::masking::{mask_random_with_ratio, mask_with, Mask, MaskStrategy};
use crate::render::{check_same_size, Canvas, Renderer};
use crate::stroke::{ClassLabel, StrokeSequence};

/// Minimum-cost perfect matching of a square cost matrix (row-major,
/// `n x n`). Returns `assignment[row] = column` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(Error::InvalidArgument(format!(
            "cost matrix must be square: {} entries for n = {n}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {bad}")));
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((assignment, total))
}

fn check_same_grid(a: &StrokeSequence, b: &StrokeSequence) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid, b.grid)));
    }
    Ok(())
}

/// Mean absolute parameter error over predicted slots after matching the
/// predicted strokes of each level to the ground truth of the same level.
/// Zero when nothing is predicted.
pub fn stroke_l1(pred: &StrokeSequence, gt: &StrokeSequence, mask: &Mask) -> Result<f64> {
    check_same_grid(pred, gt)?;
    if mask.len() != gt.len() {
        return Err(Error::LengthMismatch { what: "mask", expected: gt.len(), found: mask.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for level in 1..=gt.grid.levels {
        let (start, end) = gt.grid.level_range(level)?;
        let idx: Vec<usize> = (start..end).filter(|&i| !mask.is_context(i)).collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        let mut cost = Vec::with_capacity(n * n);
        for &i in &idx {
            let p = pred.strokes[i].to_array();
            for &j in &idx {
                let g = gt.strokes[j].to_array();
                cost.push(p.iter().zip(&g).map(|(a, b)| (a - b).abs() as f64).sum());
            }
        }
        total += hungarian(&cost, n)?.1;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / (count * 8) as f64 })
}

/// Mean squared error over pixels and channels.
pub fn image_l2(a: &Canvas, b: &Canvas) -> Result<f64> {
    check_same_size(a, b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.pixels.len().max(1) as f64)
}

/// Image to feature vector for the Fréchet distance.
pub trait FeatureExtractor {
    /// Versioned identifier written into reports.
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &Canvas) -> Result<Vec<f64>>;
}

/// Mean RGB of each cell of a `cells x cells` grid (`grid8-rgb-v1` for 8).
#[derive(Debug, Clone)]
pub struct GridRgbFeatures {
    pub cells: usize,
    name: String,
}

impl GridRgbFeatures {
    pub fn new(cells: usize) -> Self {
        GridRgbFeatures { cells, name: format!("grid{cells}-rgb-v1") }
    }
}

impl Default for GridRgbFeatures {
    fn default() -> Self {
        GridRgbFeatures::new(8)
    }
}

impl FeatureExtractor for GridRgbFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.cells * self.cells * 3
    }

    fn extract(&self, image: &Canvas) -> Result<Vec<f64>> {
        let c = self.cells;
        if c == 0 || image.height % c != 0 || image.width % c != 0 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} image does not split into {c}x{c} cells",
                image.height, image.width
            )));
        }
        let (ch, cw) = (image.height / c, image.width / c);
        let mut out = vec![0.0; self.dim()];
        for row in 0..image.height {
            for col in 0..image.width {
                let cell = (row / ch) * c + col / cw;
                let p = image.pixel(row, col);
                for k in 0..3 {
                    out[cell * 3 + k] += p[k] as f64;
                }
            }
        }
        let norm = 1.0 / (ch * cw) as f64;
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(out)
    }
}

/// Gaussian summary of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub mean: Vec<f64>,
    /// Row-major `D x D`.
    pub cov: Vec<f64>,
    pub count: usize,
}

pub const COV_REGULARIZATION: f64 = 1e-6;
pub const PSD_TOLERANCE: f64 = 1e-6;

impl FeatureSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance. With fewer than `D + 1` samples
    /// the covariance is rank deficient and gets `1e-6 I` added.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, |f| f.len());
        if n < 2 || d == 0 {
            return Err(Error::InvalidArgument(format!("need at least 2 feature vectors, got {n}")));
        }
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(Error::LengthMismatch { what: "feature vector", expected: d, found: f.len() });
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            let c: Vec<f64> = f.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        if n < d + 1 {
            log::warn!("{n} samples for {d} features: covariance regularized by {COV_REGULARIZATION}");
            for i in 0..d {
                cov[i * d + i] += COV_REGULARIZATION;
            }
        }
        Ok(FeatureSummary { mean, cov, count: n })
    }

    pub fn of_images(images: &[Canvas], extractor: &dyn FeatureExtractor) -> Result<Self> {
        let feats = images.iter().map(|im| extractor.extract(im)).collect::<Result<Vec<_>>>()?;
        Self::from_features(&feats)
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Symmetric PSD square root; eigenvalues within tolerance of zero are
/// clipped, anything more negative is an error.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &l| a.max(l.abs()));
    let mut vals = eig.eigenvalues.clone();
    for l in vals.iter_mut() {
        if *l < -PSD_TOLERANCE * scale {
            return Err(Error::InvalidArgument(format!("{what} is not positive semi-definite (eigenvalue {l})")));
        }
        *l = l.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// product root is taken from the symmetric form `sqrt(S_a) S_b sqrt(S_a)`,
/// which has the same eigenvalues; round-off negatives are clipped to zero.
pub fn frechet_distance(a: &FeatureSummary, b: &FeatureSummary) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.len() != a.dim() * a.dim() || b.cov.len() != b.dim() * b.dim() {
        return Err(Error::LengthMismatch { what: "feature dimension", expected: a.dim(), found: b.dim() });
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = a.matrix();
    let sb = b.matrix();
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let root_a = psd_sqrt(&sym(sa.clone()), "first covariance")?;
    psd_sqrt(&sym(sb.clone()), "second covariance")?;
    let inner = sym(&root_a * &sb * &root_a);
    let eig = SymmetricEigen::new(inner);
    let tr_root: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

/// Produces completions for a batch of evaluation requests.
pub trait Completer {
    fn complete(&self, requests: &[CompletionRequest]) -> Result<Vec<StrokeSequence>>;
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    /// Position of the ground truth in the evaluation item list.
    pub item: usize,
    /// Ground truth with predicted slots cleared.
    pub context: StrokeSequence,
    pub mask: Mask,
    pub class: ClassLabel,
    pub seed: u64,
}

/// Diffusion sampling in chunks of `batch` requests.
pub struct ModelCompleter<'a, D: Denoiser + ?Sized> {
    pub model: &'a D,
    pub schedule: NoiseSchedule,
    pub params: SampleParams,
    pub batch: usize,
}

impl<D: Denoiser + ?Sized> Completer for ModelCompleter<'_, D> {
    fn complete(&self, requests: &[CompletionRequest]) -> Result<Vec<StrokeSequence>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.batch.max(1)) {
            let reqs: Vec<SampleRequest> = chunk
                .iter()
                .map(|r| SampleRequest { context: &r.context, mask: &r.mask, class: r.class, seed: r.seed })
                .collect();
            out.extend(sample_batch(self.model, &self.schedule, &reqs, &self.params)?);
            log::debug!("sampled {}/{}", out.len(), requests.len());
        }
        Ok(out)
    }
}

/// Returns the ground truth; the zero-error reference point.
pub struct OracleCompleter<'a> {
    pub truth: &'a [StrokeSequence],
}

impl Completer for OracleCompleter<'_> {
    fn complete(&self, requests: &[CompletionRequest]) -> Result<Vec<StrokeSequence>> {
        requests
            .iter()
            .map(|r| {
                self.truth
                    .get(r.item)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for item {}", r.item)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tasks: Vec<MaskStrategy>,
    pub n: usize,
    pub seed: u64,
    pub render_size: usize,
    /// Fixed masking ratio for the random task instead of a random draw.
    pub random_ratio: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: MaskStrategy::ALL.to_vec(),
            n: 512,
            seed: 7,
            render_size: 64,
            random_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: MaskStrategy,
    pub samples: usize,
    pub proxy_frechet: f64,
    /// Absent for the no-context task, which has no per-sample reference.
    pub stroke_l1: Option<f64>,
    pub image_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: String,
    pub seed: u64,
    pub render_size: usize,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    /// `(task, metric, value)` for every reported number.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut rows = Vec::new();
        for t in &self.tasks {
            let task = t.task.name().to_string();
            rows.push((task.clone(), "proxy_frechet", t.proxy_frechet));
            if let Some(v) = t.stroke_l1 {
                rows.push((task.clone(), "stroke_l1", v));
            }
            if let Some(v) = t.image_l2 {
                rows.push((task.clone(), "image_l2", v));
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        for (task, metric, v) in self.rows() {
            s.push_str(&format!("{task},{metric},{v}\n"));
        }
        s
    }

    pub fn task(&self, task: MaskStrategy) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

fn task_rng(seed: u64, task: MaskStrategy, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = MaskStrategy::ALL.iter().position(|&s| s == task).unwrap_or(0) as u64;
    rng.set_stream((t << 32) | stream);
    rng
}

/// Evaluation items: `n` test sequences in a seeded order, cycling when the
/// test set is smaller than `n`.
pub fn select_items(test: &[StrokeSequence], n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..n).map(|i| order[i % order.len().max(1)]).collect()
}

/// Masks and sampling seeds of one task, one per item.
pub fn build_requests(items: &[StrokeSequence], task: MaskStrategy, config: &EvalConfig) -> Result<Vec<CompletionRequest>> {
    items
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let mut rng = task_rng(config.seed, task, i as u64);
            let mask = match (task, config.random_ratio) {
                (MaskStrategy::Random, Some(ratio)) => mask_random_with_ratio(&mut rng, gt.len(), ratio)?,
                _ => mask_with(&mut rng, task, gt)?,
            };
            let mut context = gt.clone();
            for j in mask.predicted_indices() {
                context.clear_slot(j);
            }
            Ok(CompletionRequest { item: i, context, mask, class: gt.class, seed: rand::Rng::random(&mut rng) })
        })
        .collect()
}

/// Runs every configured task: builds contexts from the test items,
/// completes them and scores the completions against the ground truth.
pub fn evaluate_tasks(
    completer: &dyn Completer,
    test: &[StrokeSequence],
    config: &EvalConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    if test.is_empty() || config.n == 0 {
        return Err(Error::InvalidArgument("evaluation needs test sequences and n > 0".into()));
    }
    let renderer = Renderer::default();
    let res = (config.render_size, config.render_size);
    let items: Vec<StrokeSequence> = select_items(test, config.n, config.seed).into_iter().map(|i| test[i].clone()).collect();
    let truth_images: Vec<Canvas> = items.iter().map(|s| renderer.render_sequence(s, res)).collect();
    let reference = FeatureSummary::of_images(&truth_images, extractor)?;
    let mut tasks = Vec::new();
    for &task in &config.tasks {
        let requests = build_requests(&items, task, config)?;
        let completions = completer.complete(&requests)?;
        if completions.len() != requests.len() {
            return Err(Error::LengthMismatch { what: "completions", expected: requests.len(), found: completions.len() });
        }
        let images: Vec<Canvas> = completions.iter().map(|s| renderer.render_sequence(s, res)).collect();
        let fd = frechet_distance(&FeatureSummary::of_images(&images, extractor)?, &reference)?;
        let (l1, l2) = if task == MaskStrategy::NoContext {
            (None, None)
        } else {
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            for (i, req) in requests.iter().enumerate() {
                l1 += stroke_l1(&completions[i], &items[i], &req.mask)?;
                l2 += image_l2(&images[i], &truth_images[i])?;
            }
            let n = requests.len() as f64;
            (Some(l1 / n), Some(l2 / n))
        };
        log::info!("task {task}: proxy-frechet {fd:.4}");
        tasks.push(TaskReport { task, samples: requests.len(), proxy_frechet: fd, stroke_l1: l1, image_l2: l2 });
    }
    Ok(EvalReport {
        extractor: extractor.name().to_string(),
        seed: config.seed,
        render_size: config.render_size,
        tasks,
    })
}
