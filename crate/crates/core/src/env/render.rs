use std::f64::consts::PI;

use super::{EnvState, TaskId, BEAD_DIAMETER, BOX_HALF, ROD_HALF_LENGTH};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 4;

/// A 32×32 RGB frame stored row-major, channels last.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixels_f32(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().map(|&v| v as f32 / 255.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels_f32().collect()
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * IMAGE_SIZE + col) * IMAGE_CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary PPM encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a binary PPM; `None` unless it is a 32×32 image with 8-bit
    /// channels.
    pub fn from_ppm(bytes: &[u8]) -> Option<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            if bytes[pos] == b'#' {
                while *bytes.get(pos)? != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while !bytes.get(pos)?.is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
        }
        let size = IMAGE_SIZE.to_string();
        if fields != ["P6", size.as_str(), size.as_str(), "255"] {
            return None;
        }
        let data = bytes.get(pos + 1..)?;
        (data.len() == IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS).then(|| Self { data: data.to_vec() })
    }
}

type Rgb = [f64; 3];

const BACKGROUND: Rgb = [0.12, 0.12, 0.15];
const ROD: Rgb = [0.55, 0.55, 0.55];
const BEAD: Rgb = [0.95, 0.6, 0.1];
const PUSHER: Rgb = [0.2, 0.85, 0.3];
const HUB: Rgb = [0.8, 0.8, 0.8];
const MARKED_LOBE: Rgb = [0.9, 0.15, 0.15];
const LOBE: Rgb = [0.65, 0.65, 0.7];

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Capsule { ax: f64, ay: f64, bx: f64, by: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + t * dx, ay + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Shapes in pixel coordinates (x right, y down), painted in order.
fn scene(state: &EnvState) -> Vec<(Shape, Rgb)> {
    let size = IMAGE_SIZE as f64;
    let mid = size / 2.0;
    let mut shapes = Vec::new();
    match state.task {
        TaskId::Beads => {
            let scale = (size - 2.0) / (2.0 * ROD_HALF_LENGTH);
            let to_px = |m: f64| mid + m * scale;
            shapes.push((
                Shape::Rect {
                    x0: to_px(-ROD_HALF_LENGTH),
                    y0: mid - 0.6,
                    x1: to_px(ROD_HALF_LENGTH),
                    y1: mid + 0.6,
                },
                ROD,
            ));
            for &b in &state.beads {
                shapes.push((
                    Shape::Disc {
                        cx: to_px(b),
                        cy: mid,
                        r: BEAD_DIAMETER / 2.0 * scale,
                    },
                    BEAD,
                ));
            }
            shapes.push((
                Shape::Disc {
                    cx: to_px(state.pusher),
                    cy: mid + 7.0,
                    r: 1.6,
                },
                PUSHER,
            ));
        }
        TaskId::Valve => {
            push_star(&mut shapes, mid, mid, state.valve_angle, 12.0, 2.4, 3.2);
        }
        TaskId::Reposition => {
            let scale = size / (2.0 * BOX_HALF);
            let o = state.object;
            push_star(&mut shapes, mid + o.x * scale, mid - o.y * scale, o.theta, 6.4, 1.7, 2.2);
        }
    }
    shapes
}

/// Three lobes at 120° spacing around a hub; lobe 0 is colored so that the
/// orientation is unambiguous over the full circle.
fn push_star(shapes: &mut Vec<(Shape, Rgb)>, cx: f64, cy: f64, angle: f64, len: f64, r: f64, hub: f64) {
    for k in 0..3 {
        let a = angle + k as f64 * 2.0 * PI / 3.0;
        shapes.push((
            Shape::Capsule {
                ax: cx,
                ay: cy,
                bx: cx + len * a.cos(),
                by: cy - len * a.sin(),
                r,
            },
            if k == 0 { MARKED_LOBE } else { LOBE },
        ));
    }
    shapes.push((Shape::Disc { cx, cy, r: hub }, HUB));
}

/// Renders the task scene with 4×4 supersampling per pixel.
pub fn render(state: &EnvState) -> Image {
    let shapes = scene(state);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let color = shapes
                        .iter()
                        .rev()
                        .find(|(s, _)| s.contains(x, y))
                        .map_or(BACKGROUND, |(_, c)| *c);
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for v in acc {
                data.push((v / n * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image { data }
}
