//! Parameter-free stroke renderer.
//!
//! Each stroke warps a soft elliptical brush alpha with an affine map and is
//! alpha-composited over the canvas: `C' = C (1 - a) + color * a`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stroke::{Stroke, StrokeSequence};

/// Largest canvas side accepted by the public render helpers.
pub const MAX_RESOLUTION: usize = 4096;

/// `H x W x 3` float image, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Canvas {
    /// Solid black background.
    pub fn black(height: usize, width: usize) -> Self {
        Canvas {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&color);
        }
        Canvas {
            height,
            width,
            pixels,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, c: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// 8-bit quantization, `round(255 v)` with halves rounded up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Averages non-overlapping `factor x factor` pixel boxes.
    pub fn box_downsample(&self, factor: usize) -> Canvas {
        assert!(factor > 0 && self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Canvas::black(h, w);
        let norm = 1.0 / (factor * factor) as f32;
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0f32; 3];
                for dr in 0..factor {
                    for dc in 0..factor {
                        let p = self.pixel(r * factor + dr, c * factor + dc);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                out.set_pixel(r, c, [acc[0] * norm, acc[1] * norm, acc[2] * norm]);
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Canvas) -> Result<f32> {
        check_same_size(self, other)?;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok((sum / self.pixels.len() as f64) as f32)
    }
}

pub(crate) fn check_same_size(a: &Canvas, b: &Canvas) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::InvalidArgument(format!(
            "resolution mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Square alpha mask warped by every stroke.
#[derive(Debug, Clone, PartialEq)]
pub struct BrushPrimitive {
    pub size: usize,
    pub alpha: Vec<f32>,
}

impl Default for BrushPrimitive {
    fn default() -> Self {
        BrushPrimitive::soft_ellipse(64, 0.25)
    }
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl BrushPrimitive {
    /// Ellipse inscribed in the unit square; alpha falls from 1 to 0 over the
    /// outer `edge` fraction of the normalized radius.
    pub fn soft_ellipse(size: usize, edge: f32) -> Self {
        let mut alpha = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let u = (j as f32 + 0.5) / size as f32 * 2.0 - 1.0;
                let v = (i as f32 + 0.5) / size as f32 * 2.0 - 1.0;
                let r = (u * u + v * v).sqrt();
                alpha.push(if r >= 1.0 { 0.0 } else { smoothstep((1.0 - r) / edge) });
            }
        }
        BrushPrimitive { size, alpha }
    }

    fn texel(&self, i: isize, j: isize) -> f32 {
        let s = self.size as isize;
        if i < 0 || j < 0 || i >= s || j >= s {
            0.0
        } else {
            self.alpha[(i * s + j) as usize]
        }
    }

    /// Bilinear lookup at unit coordinates; zero outside the square.
    pub fn sample(&self, u: f64, v: f64) -> f32 {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return 0.0;
        }
        let s = self.size as f64;
        let fx = u * s - 0.5;
        let fy = v * s - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a00 = self.texel(y0, x0);
        let a01 = self.texel(y0, x0 + 1);
        let a10 = self.texel(y0 + 1, x0);
        let a11 = self.texel(y0 + 1, x0 + 1);
        let top = a00 + (a01 - a00) * tx;
        let bottom = a10 + (a11 - a10) * tx;
        top + (bottom - top) * ty
    }
}

/// 2x3 affine map `[a b tx; c d ty]` from brush unit coordinates to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * u + m[0][1] * v + m[0][2],
            m[1][0] * u + m[1][1] * v + m[1][2],
        )
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// Lengths of the images of the unit axes.
    pub fn axis_lengths(&self) -> (f64, f64) {
        let m = &self.m;
        (m[0][0].hypot(m[1][0]), m[0][1].hypot(m[1][1]))
    }
}

/// Scale by `(w W, h H)`, rotate by `theta * pi` about the stroke center and
/// translate the brush center to `(x W, y H)`.
pub fn stroke_affine(s: &Stroke, resolution: (usize, usize)) -> Result<Affine> {
    let (h_px, w_px) = resolution;
    if h_px == 0 || w_px == 0 {
        return Err(Error::InvalidArgument("zero resolution".into()));
    }
    let (hf, wf) = (h_px as f64, w_px as f64);
    let phi = s.theta as f64 * PI;
    let (sin, cos) = phi.sin_cos();
    let sx = s.w as f64 * wf;
    let sy = s.h as f64 * hf;
    let a = cos * sx;
    let b = -sin * sy;
    let c = sin * sx;
    let d = cos * sy;
    let cx = s.x as f64 * wf;
    let cy = s.y as f64 * hf;
    Ok(Affine {
        m: [
            [a, b, cx - 0.5 * (a + b)],
            [c, d, cy - 0.5 * (c + d)],
        ],
    })
}

/// Stateless renderer around one brush primitive.
#[derive(Debug, Clone, Default)]
pub struct Renderer {
    pub brush: BrushPrimitive,
}

impl Renderer {
    pub fn new(brush: BrushPrimitive) -> Self {
        Renderer { brush }
    }

    /// Composites one stroke in place. Footprint outside the canvas is clipped.
    pub fn composite_stroke(&self, canvas: &mut Canvas, s: &Stroke) {
        let color = s.color();
        let pixels = &mut canvas.pixels;
        self.for_each_covered(s, (canvas.height, canvas.width), |i, a| {
            for k in 0..3 {
                let p = &mut pixels[i * 3 + k];
                *p = *p * (1.0 - a) + color[k] * a;
            }
        });
    }

    /// Pixels the stroke touches at `resolution` as `(row * W + col, alpha)`.
    pub fn footprint(&self, s: &Stroke, resolution: (usize, usize)) -> Vec<(usize, f32)> {
        let mut out = Vec::new();
        self.for_each_covered(s, resolution, |i, a| out.push((i, a)));
        out
    }

    fn for_each_covered(&self, s: &Stroke, (height, width): (usize, usize), mut f: impl FnMut(usize, f32)) {
        let Ok(fwd) = stroke_affine(s, (height, width)) else {
            return;
        };
        let Some(inv) = fwd.inverse() else {
            return;
        };
        let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].map(|(u, v)| fwd.apply(u, v));
        let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            let start = (lo - 0.5).floor().max(0.0);
            let end = (hi - 0.5).ceil().min(n as f64 - 1.0);
            (start <= end).then_some((start as usize, end as usize))
        };
        let (Some((c0, c1)), Some((r0, r1))) = (clip(min_x, max_x, width), clip(min_y, max_y, height)) else {
            return;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (u, v) = inv.apply(col as f64 + 0.5, row as f64 + 0.5);
                let a = self.brush.sample(u, v);
                if a > 0.0 {
                    f(row * width + col, a);
                }
            }
        }
    }

    /// Composites occupied slots in index order onto a black background.
    pub fn render_sequence(&self, seq: &StrokeSequence, resolution: (usize, usize)) -> Canvas {
        self.render_strokes(
            seq.strokes
                .iter()
                .zip(&seq.occupancy)
                .filter(|(_, &o)| o)
                .map(|(s, _)| s),
            resolution,
        )
    }

    pub fn render_strokes<'a>(
        &self,
        strokes: impl IntoIterator<Item = &'a Stroke>,
        resolution: (usize, usize),
    ) -> Canvas {
        let mut canvas = Canvas::black(resolution.0, resolution.1);
        for s in strokes {
            self.composite_stroke(&mut canvas, s);
        }
        canvas
    }
}

pub fn composite_stroke(canvas: &Canvas, s: &Stroke) -> Canvas {
    let mut out = canvas.clone();
    Renderer::default().composite_stroke(&mut out, s);
    out
}

pub fn render_sequence(seq: &StrokeSequence, resolution: (usize, usize)) -> Canvas {
    Renderer::default().render_sequence(seq, resolution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            _ => None,
        }
    }
}

pub fn encode_png(canvas: &Canvas) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, canvas.width as u32, canvas.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
        writer
            .write_image_data(&canvas.to_rgb8())
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn encode_ppm(canvas: &Canvas) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", canvas.width, canvas.height).into_bytes();
    out.extend(canvas.to_rgb8());
    out
}

pub fn export_image(canvas: &Canvas, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ImageFormat::Png => encode_png(canvas)?,
        ImageFormat::Ppm => encode_ppm(canvas),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
