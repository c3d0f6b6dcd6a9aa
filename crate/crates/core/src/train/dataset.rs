//! Procedural two-dimensional figures decomposed into coarse-to-fine stroke
//! sequences. Stands in for a corpus of painted objects.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{export_image, Canvas, ImageFormat, Renderer};
use crate::stroke::{ClassLabel, GridLayout, Stroke, StrokeSequence};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    /// Round body with short limbs and an eye.
    Blob,
    /// Long thin body with a head at one end.
    Worm,
    /// Disk with petals around it.
    Flower,
}

impl fmt::Display for FigureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FigureKind::Blob => "blob",
            FigureKind::Worm => "worm",
            FigureKind::Flower => "flower",
        })
    }
}

/// Parameter ranges for one class. Lengths are in canvas units, hue in turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub name: String,
    pub kind: FigureKind,
    pub body_rx: (f32, f32),
    pub body_ry: (f32, f32),
    pub appendages: (usize, usize),
    pub appendage_len: (f32, f32),
    pub appendage_width: (f32, f32),
    pub hue: (f32, f32),
    pub saturation: (f32, f32),
    pub value: (f32, f32),
}

impl ShapeFamily {
    /// Default family for class `class` of `num_classes`: kinds cycle and hue
    /// ranges are disjoint slices of the color wheel.
    pub fn default_for(class: usize, num_classes: usize) -> Self {
        let kind = [FigureKind::Blob, FigureKind::Worm, FigureKind::Flower][class % 3];
        let n = num_classes.max(1) as f32;
        let center = class as f32 / n;
        let half = 0.3 / n;
        let hue = (center - half, center + half);
        let (body_rx, body_ry, appendages, appendage_len, appendage_width) = match kind {
            FigureKind::Blob => ((0.2, 0.3), (0.15, 0.24), (2, 4), (0.12, 0.2), (0.04, 0.07)),
            FigureKind::Worm => ((0.3, 0.38), (0.08, 0.13), (0, 2), (0.1, 0.16), (0.03, 0.05)),
            FigureKind::Flower => ((0.08, 0.12), (0.08, 0.12), (5, 7), (0.15, 0.22), (0.06, 0.09)),
        };
        ShapeFamily {
            name: format!("{kind}-{class}"),
            kind,
            body_rx,
            body_ry,
            appendages,
            appendage_len,
            appendage_width,
            hue,
            saturation: (0.6, 1.0),
            value: (0.6, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("body_rx", self.body_rx),
            ("body_ry", self.body_ry),
            ("appendage_len", self.appendage_len),
            ("appendage_width", self.appendage_width),
            ("saturation", self.saturation),
            ("value", self.value),
        ];
        for (what, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidArgument(format!("{}: bad range {what}", self.name)));
            }
        }
        if self.appendages.0 > self.appendages.1 || !(self.hue.0 <= self.hue.1) {
            return Err(Error::InvalidArgument(format!("{}: bad appendage or hue range", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub grid: GridLayout,
    /// Side of the square raster the strokes are fitted against.
    pub fit_resolution: usize,
    /// Random proposals per stroke; the best one is kept.
    pub candidates: usize,
    pub previews_per_class: usize,
    pub families: Vec<ShapeFamily>,
}

impl SyntheticDatasetSpec {
    pub fn new(num_classes: usize, samples_per_class: usize) -> Self {
        SyntheticDatasetSpec {
            num_classes,
            samples_per_class,
            test_per_class: 128,
            grid: GridLayout::default(),
            fit_resolution: 32,
            candidates: 8,
            previews_per_class: 4,
            families: (0..num_classes).map(|c| ShapeFamily::default_for(c, num_classes)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if self.families.len() != self.num_classes {
            return Err(Error::LengthMismatch {
                what: "families",
                expected: self.num_classes,
                found: self.families.len(),
            });
        }
        if self.fit_resolution < 8 || self.candidates == 0 {
            return Err(Error::InvalidArgument("fit_resolution >= 8 and candidates >= 1 required".into()));
        }
        self.families.iter().try_for_each(ShapeFamily::validate)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.families.iter().map(|f| f.name.clone()).collect()
    }
}

/// Filled ellipse in canvas units; `angle` in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    pub angle: f32,
    pub color: [f32; 3],
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Ellipses painted back to front.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub parts: Vec<Ellipse>,
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn palette_color<R: Rng + ?Sized>(rng: &mut R, family: &ShapeFamily) -> [f32; 3] {
    hsv_to_rgb(
        uniform(rng, family.hue),
        uniform(rng, family.saturation),
        uniform(rng, family.value),
    )
}

/// Limb of length `len` leaving the body outline at angle `phi`.
fn appendage(body: &Ellipse, phi: f32, len: f32, width: f32, color: [f32; 3]) -> Ellipse {
    let (s, c) = (phi + body.angle).sin_cos();
    let (ps, pc) = phi.sin_cos();
    let (bs, bc) = body.angle.sin_cos();
    // outline point in body frame, rotated to canvas
    let (ex, ey) = (body.rx * pc, body.ry * ps);
    let (ox, oy) = (body.cx + bc * ex - bs * ey, body.cy + bs * ex + bc * ey);
    Ellipse {
        cx: ox + c * len * 0.4,
        cy: oy + s * len * 0.4,
        rx: len * 0.5,
        ry: width * 0.5,
        angle: phi + body.angle,
        color,
    }
}

pub fn draw_figure<R: Rng + ?Sized>(family: &ShapeFamily, rng: &mut R) -> Figure {
    let body_color = palette_color(rng, family);
    let limb_color = palette_color(rng, family);
    let cx = rng.random_range(0.42..0.58);
    let cy = rng.random_range(0.42..0.58);
    let count = rng.random_range(family.appendages.0..=family.appendages.1);
    let mut parts = Vec::new();
    let body = Ellipse {
        cx,
        cy,
        rx: uniform(rng, family.body_rx),
        ry: uniform(rng, family.body_ry),
        angle: match family.kind {
            FigureKind::Worm => rng.random_range(-0.6..0.6),
            FigureKind::Blob => rng.random_range(-0.3..0.3),
            FigureKind::Flower => 0.0,
        },
        color: body_color,
    };
    let limb = |rng: &mut R, phi: f32| {
        appendage(
            &body,
            phi,
            uniform(rng, family.appendage_len),
            uniform(rng, family.appendage_width),
            limb_color,
        )
    };
    match family.kind {
        FigureKind::Blob => {
            for _ in 0..count {
                // limbs on the lower half
                let phi = rng.random_range(0.15 * PI..0.85 * PI);
                parts.push(limb(rng, phi));
            }
            parts.push(body);
            let eye_r = rng.random_range(0.025..0.04);
            parts.push(Ellipse {
                cx: body.cx + body.rx * 0.4,
                cy: body.cy - body.ry * 0.35,
                rx: eye_r,
                ry: eye_r,
                angle: 0.0,
                color: [0.95, 0.95, 0.95],
            });
        }
        FigureKind::Worm => {
            for _ in 0..count {
                let phi = rng.random_range(-0.8 * PI..-0.2 * PI);
                parts.push(limb(rng, phi));
            }
            parts.push(body);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (s, c) = body.angle.sin_cos();
            let head_r = rng.random_range(0.1..0.14);
            parts.push(Ellipse {
                cx: body.cx + side * c * body.rx,
                cy: body.cy + side * s * body.rx,
                rx: head_r,
                ry: head_r,
                angle: 0.0,
                color: limb_color,
            });
        }
        FigureKind::Flower => {
            let offset = rng.random_range(0.0..2.0 * PI);
            for k in 0..count {
                let phi = offset + 2.0 * PI * k as f32 / count as f32 + rng.random_range(-0.15..0.15);
                parts.push(limb(rng, phi));
            }
            parts.push(body);
        }
    }
    Figure { parts }
}

/// Rasterizes with 2x2 supersampling on a black background.
pub fn rasterize_figure(figure: &Figure, resolution: usize) -> Canvas {
    let mut canvas = Canvas::black(resolution, resolution);
    let n = resolution as f32;
    for row in 0..resolution {
        for col in 0..resolution {
            let mut acc = [0.0f32; 3];
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (x, y) = ((col as f32 + ox) / n, (row as f32 + oy) / n);
                if let Some(e) = figure.parts.iter().rev().find(|e| e.contains(x, y)) {
                    for k in 0..3 {
                        acc[k] += 0.25 * e.color[k];
                    }
                }
            }
            canvas.set_pixel(row, col, acc);
        }
    }
    canvas
}

/// Stroke extents (max of w, h) that `GridLayout::level_for_extent` maps to
/// `level`, shrunk by 10% on each side.
pub fn extent_band(grid: &GridLayout, level: usize) -> (f32, f32) {
    let m = level as f32;
    let hi = if level == 1 { 1.0 } else { 0.5 * (1.0 / m + 1.0 / (m - 1.0)) };
    let lo = if level == grid.levels {
        0.5 / m
    } else {
        0.5 * (1.0 / m + 1.0 / (m + 1.0))
    };
    let pad = 0.1 * (hi - lo);
    (lo + pad, hi - pad)
}

fn squared_error(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy stroke fit: every block of every level gets its strokes one at a
/// time, each the best of `candidates` random proposals centered on the
/// block's current error.
pub fn fit_strokes<R: Rng + ?Sized>(
    target: &Canvas,
    grid: GridLayout,
    class: ClassLabel,
    candidates: usize,
    rng: &mut R,
) -> Result<StrokeSequence> {
    if target.height != target.width || target.height == 0 {
        return Err(Error::InvalidArgument("fit target must be square".into()));
    }
    let res = target.height;
    let renderer = Renderer::default();
    let mut canvas = Canvas::black(res, res);
    let mut err: Vec<f32> = (0..res * res)
        .map(|p| squared_error(&canvas.pixels[p * 3..p * 3 + 3], &target.pixels[p * 3..p * 3 + 3]))
        .collect();
    let mut seq = StrokeSequence::empty(grid, class);
    for level in 1..=grid.levels {
        let band = extent_band(&grid, level);
        let cell = 1.0 / level as f32;
        for br in 0..level {
            for bc in 0..level {
                let pixels: Vec<usize> = (0..res * res)
                    .filter(|&p| {
                        let (x, y) = (((p % res) as f32 + 0.5) / res as f32, ((p / res) as f32 + 0.5) / res as f32);
                        grid.cell_of(level, x, y) == (br, bc)
                    })
                    .collect();
                let (start, end) = grid.slot_range(level, (br, bc))?;
                for slot in start..end {
                    let stroke = best_candidate(target, &canvas, &err, &pixels, (br, bc), cell, band, candidates, &renderer, rng);
                    for (p, a) in renderer.footprint(&stroke, (res, res)) {
                        let c = stroke.color();
                        for k in 0..3 {
                            let v = &mut canvas.pixels[p * 3 + k];
                            *v = *v * (1.0 - a) + c[k] * a;
                        }
                        err[p] = squared_error(&canvas.pixels[p * 3..p * 3 + 3], &target.pixels[p * 3..p * 3 + 3]);
                    }
                    seq.place(slot, stroke);
                }
            }
        }
    }
    seq.validate()?;
    Ok(seq)
}

#[allow(clippy::too_many_arguments)]
fn best_candidate<R: Rng + ?Sized>(
    target: &Canvas,
    canvas: &Canvas,
    err: &[f32],
    pixels: &[usize],
    (br, bc): (usize, usize),
    cell: f32,
    band: (f32, f32),
    candidates: usize,
    renderer: &Renderer,
    rng: &mut R,
) -> Stroke {
    let res = target.height;
    let floor = 1e-3;
    let total: f32 = pixels.iter().map(|&p| err[p] + floor).sum();
    let mut best: Option<(f32, Stroke)> = None;
    for _ in 0..candidates {
        let mut pick = rng.random_range(0.0..total);
        let mut center = pixels[pixels.len() - 1];
        for &p in pixels {
            pick -= err[p] + floor;
            if pick <= 0.0 {
                center = p;
                break;
            }
        }
        let jitter = |rng: &mut R, v: usize, lo: f32| {
            let x = (v as f32 + rng.random_range(0.0..1.0)) / res as f32;
            x.clamp(lo, lo + cell - 1e-4)
        };
        let x = jitter(rng, center % res, bc as f32 * cell);
        let y = jitter(rng, center / res, br as f32 * cell);
        let extent = uniform(rng, band);
        let minor = extent * rng.random_range(0.35..1.0);
        let (w, h) = if rng.random_bool(0.5) { (extent, minor) } else { (minor, extent) };
        let theta = rng.random_range(0.0..1.0);
        let mut stroke = Stroke::new(x, y, w, h, theta, 0.0, 0.0, 0.0);
        let footprint = renderer.footprint(&stroke, (res, res));
        let mut color = [0.0f32; 3];
        let mut mass = 0.0f32;
        for &(p, a) in &footprint {
            for k in 0..3 {
                color[k] += a * target.pixels[p * 3 + k];
            }
            mass += a;
        }
        if mass > 0.0 {
            for c in &mut color {
                *c = (*c / mass).clamp(0.0, 1.0);
            }
        }
        [stroke.r, stroke.g, stroke.b] = color;
        let delta: f32 = footprint
            .iter()
            .map(|&(p, a)| {
                let mut after = [0.0f32; 3];
                for k in 0..3 {
                    after[k] = canvas.pixels[p * 3 + k] * (1.0 - a) + color[k] * a;
                }
                squared_error(&after, &target.pixels[p * 3..p * 3 + 3]) - err[p]
            })
            .sum();
        if best.as_ref().is_none_or(|(d, _)| delta < *d) {
            best = Some((delta, stroke));
        }
    }
    best.expect("at least one candidate").1
}

/// One sample: a fresh figure of the class and its stroke decomposition.
pub fn generate_sample<R: Rng + ?Sized>(
    spec: &SyntheticDatasetSpec,
    class: usize,
    rng: &mut R,
) -> Result<(Figure, StrokeSequence)> {
    let family = spec
        .families
        .get(class)
        .ok_or(Error::UnknownClass { id: class, num_classes: spec.num_classes })?;
    let figure = draw_figure(family, rng);
    let target = rasterize_figure(&figure, spec.fit_resolution);
    let seq = fit_strokes(&target, spec.grid, ClassLabel::Id(class), spec.candidates, rng)?;
    Ok((figure, seq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Independent stream per sample so any subset regenerates identically.
pub fn sample_rng(seed: u64, split: Split, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_bit = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    rng.set_stream((split_bit << 63) | ((class as u64) << 32) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    pub spec: SyntheticDatasetSpec,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != DATASET_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        Ok(manifest)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `train/` and `test/` (one JSON-lines file per class), `previews/`
/// (fitted render next to its target) and the manifest.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec, out: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out.as_ref();
    let previews = out.join("previews");
    create_dir(&previews)?;
    for (split, count) in [(Split::Train, spec.samples_per_class), (Split::Test, spec.test_per_class)] {
        let dir = out.join(split.dir_name());
        create_dir(&dir)?;
        for class in 0..spec.num_classes {
            let path = dir.join(format!("class-{class}.jsonl"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for i in 0..count {
                let mut rng = sample_rng(seed, split, class, i);
                let (figure, seq) = generate_sample(spec, class, &mut rng)?;
                writeln!(w, "{}", seq.to_json()?).map_err(|e| Error::io(&path, e))?;
                if split == Split::Train && i < spec.previews_per_class {
                    let stem = previews.join(format!("class-{class}-{i}"));
                    let fitted = Renderer::default().render_sequence(&seq, (128, 128));
                    export_image(&fitted, with_suffix(&stem, ".png"), ImageFormat::Png)?;
                    let target = rasterize_figure(&figure, 128);
                    export_image(&target, with_suffix(&stem, "-target.png"), ImageFormat::Png)?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            log::info!("{} class {class}: {count} sequences", split.dir_name());
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_FORMAT_VERSION,
        seed,
        class_names: spec.class_names(),
        train_count: spec.samples_per_class * spec.num_classes,
        test_count: spec.test_per_class * spec.num_classes,
        spec: spec.clone(),
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads every `*.jsonl` file of a split directory in file-name order.
pub fn load_split(dir: impl AsRef<Path>) -> Result<Vec<StrokeSequence>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let seq = StrokeSequence::from_json(&line)
                .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
            out.push(seq);
        }
    }
    Ok(out)
}
