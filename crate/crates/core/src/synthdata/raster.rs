use std::f64::consts::PI;

use rand::Rng;

use super::{Image, Mask, CHANNELS, K_ATTR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Ring,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }
}

/// Geometry in pixel units; a pixel `(y, x)` belongs to a shape when its
/// centre `(y + 0.5, x + 0.5)` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rectangle {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        angle: f64,
    },
    Triangle {
        vertices: [(f64, f64); 3],
    },
    Ring {
        cx: f64,
        cy: f64,
        outer: f64,
        inner: f64,
    },
}

/// Inner radius of a ring relative to its outer radius.
const RING_HOLE: f64 = 0.5;

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Ellipse { .. } => ShapeKind::Ellipse,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Triangle { .. } => ShapeKind::Triangle,
            Shape::Ring { .. } => ShapeKind::Ring,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, -angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rectangle {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => {
                let (u, v) = rotate(x - cx, y - cy, -angle);
                u.abs() <= half_w && v.abs() <= half_h
            }
            Shape::Triangle { vertices: [a, b, c] } => {
                let d1 = edge(a, b, (x, y));
                let d2 = edge(b, c, (x, y));
                let d3 = edge(c, a, (x, y));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Ring { cx, cy, outer, inner } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// A shape of `kind` covering roughly `area_frac` of a `size×size` image.
    pub fn sample(kind: ShapeKind, area_frac: f64, size: usize, rng: &mut impl Rng) -> Shape {
        let s = size as f64;
        let area = area_frac * s * s;
        let aspect: f64 = rng.random_range(0.6..1.0);
        let angle: f64 = rng.random_range(0.0..PI);
        let radius = match kind {
            ShapeKind::Ellipse => (area / (PI * aspect)).sqrt(),
            ShapeKind::Rectangle => (area / aspect).sqrt() * 0.5 * (1.0 + aspect * aspect).sqrt(),
            ShapeKind::Triangle => (4.0 * area / (3.0 * 3f64.sqrt())).sqrt(),
            ShapeKind::Ring => (area / (PI * (1.0 - RING_HOLE * RING_HOLE))).sqrt(),
        };
        let margin = (radius * 0.8).min(s / 2.0);
        let cx = rng.random_range(margin..=s - margin);
        let cy = rng.random_range(margin..=s - margin);
        match kind {
            ShapeKind::Ellipse => {
                let rx = (area / (PI * aspect)).sqrt();
                Shape::Ellipse {
                    cx,
                    cy,
                    rx,
                    ry: rx * aspect,
                    angle,
                }
            }
            ShapeKind::Rectangle => {
                let w = (area / aspect).sqrt();
                Shape::Rectangle {
                    cx,
                    cy,
                    half_w: w / 2.0,
                    half_h: w * aspect / 2.0,
                    angle,
                }
            }
            ShapeKind::Triangle => {
                // equilateral triangle with circumradius `radius`, vertices jittered
                let mut vertices = [(0.0, 0.0); 3];
                for (k, v) in vertices.iter_mut().enumerate() {
                    let theta = angle + k as f64 * 2.0 * PI / 3.0 + rng.random_range(-0.25..0.25);
                    *v = (cx + radius * theta.cos(), cy + radius * theta.sin());
                }
                Shape::Triangle { vertices }
            }
            ShapeKind::Ring => Shape::Ring {
                cx,
                cy,
                outer: radius,
                inner: radius * RING_HOLE,
            },
        }
    }
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Striped,
    Dotted,
}

/// Observable appearance; every attribute bit is a function of these fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub pattern: Pattern,
    pub border: bool,
    /// Hue bucket in `0..4`.
    pub hue: u8,
    pub hue_jitter: f64,
    pub saturation: f64,
    pub value: f64,
    pub pattern_angle: f64,
}

pub const PATTERN_PERIOD: f64 = 6.0;
pub const BORDER_WIDTH: isize = 2;
const BORDER_RGB: [f32; 3] = [0.08, 0.08, 0.08];

impl Appearance {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let pattern = match rng.random_range(0..3) {
            0 => Pattern::Solid,
            1 => Pattern::Striped,
            _ => Pattern::Dotted,
        };
        Appearance {
            pattern,
            border: rng.random_bool(0.5),
            hue: rng.random_range(0..4),
            hue_jitter: rng.random_range(-20.0..20.0),
            saturation: rng.random_range(0.55..0.9),
            value: rng.random_range(0.65..0.95),
            pattern_angle: rng.random_range(0.0..PI),
        }
    }

    pub fn solid(hue: u8) -> Self {
        Appearance {
            pattern: Pattern::Solid,
            border: false,
            hue,
            hue_jitter: 0.0,
            saturation: 0.8,
            value: 0.8,
            pattern_angle: 0.0,
        }
    }

    /// `[solid, striped, dotted, border, no border, hue0..hue3]`.
    pub fn attributes(&self) -> Vec<u8> {
        let mut a = vec![0u8; K_ATTR];
        a[self.pattern as usize] = 1;
        a[if self.border { 3 } else { 4 }] = 1;
        a[5 + self.hue as usize] = 1;
        a
    }

    pub fn base_rgb(&self) -> [f32; 3] {
        let hue = (self.hue as f64 * 90.0 + self.hue_jitter).rem_euclid(360.0);
        hsv_to_rgb(hue, self.saturation, self.value)
    }

    pub fn mark_rgb(&self) -> [f32; 3] {
        self.base_rgb().map(|c| c + (1.0 - c) * 0.6)
    }

    fn is_mark(&self, x: f64, y: f64) -> bool {
        let (u, v) = rotate(x, y, -self.pattern_angle);
        match self.pattern {
            Pattern::Solid => false,
            Pattern::Striped => (u / PATTERN_PERIOD).rem_euclid(1.0) < 0.5,
            Pattern::Dotted => {
                let du = u.rem_euclid(PATTERN_PERIOD) - PATTERN_PERIOD / 2.0;
                let dv = v.rem_euclid(PATTERN_PERIOD) - PATTERN_PERIOD / 2.0;
                du * du + dv * dv <= 1.6 * 1.6
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// True when some pixel within the border width lies outside the raster.
pub(crate) fn is_border(raster: &Mask, y: usize, x: usize) -> bool {
    for dy in -BORDER_WIDTH..=BORDER_WIDTH {
        for dx in -BORDER_WIDTH..=BORDER_WIDTH {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy < 0 || xx < 0 || yy >= raster.height as isize || xx >= raster.width as isize {
                return true;
            }
            if !raster.get(yy as usize, xx as usize) {
                return true;
            }
        }
    }
    false
}

pub(crate) fn paint(image: &mut Image, raster: &Mask, look: &Appearance) {
    let base = look.base_rgb();
    let mark = look.mark_rgb();
    for y in 0..raster.height {
        for x in 0..raster.width {
            if !raster.get(y, x) {
                continue;
            }
            let rgb = if look.border && is_border(raster, y, x) {
                BORDER_RGB
            } else if look.is_mark(x as f64 + 0.5, y as f64 + 0.5) {
                mark
            } else {
                base
            };
            for (c, v) in rgb.iter().enumerate().take(CHANNELS) {
                image.set(c, y, x, *v);
            }
        }
    }
}
