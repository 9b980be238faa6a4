//! Desk-scale substitute for photographs: a board plane projected through a
//! homography, a coloured frame strip on White's side so orientation is
//! recoverable, and upright piece silhouettes drawn far-to-near.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, Corners};
use crate::chess::{BoardState, Orientation, Piece, PieceType, Square};
use crate::targets::ClassTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Board side facing the camera: 0 is White's side, each step turns the
    /// board a quarter clockwise in the image.
    pub orientation: Orientation,
    /// Elevation in degrees is drawn from this range; 90 is a top view.
    pub elevation_range: [f32; 2],
    pub jitter_seed: u64,
    pub rotation_jitter_deg: f32,
    pub scale_jitter: f32,
    /// Fraction of the image size.
    pub shift_jitter: f32,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            orientation: Orientation::CANONICAL,
            elevation_range: [40.0, 90.0],
            jitter_seed: 0,
            rotation_jitter_deg: 4.0,
            scale_jitter: 0.05,
            shift_jitter: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStyle {
    pub size: u32,
    /// Rendering happens at `size * supersample` and is box-filtered down.
    pub supersample: u32,
    pub light_square: [u8; 3],
    pub dark_square: [u8; 3],
    pub frame: [u8; 3],
    pub mark: [u8; 3],
    pub background: [u8; 3],
    pub white_piece: [u8; 3],
    pub black_piece: [u8; 3],
    /// Per-channel colour jitter of the squares, frame and background.
    pub color_jitter: u8,
    /// Uniform per-pixel noise amplitude.
    pub noise: f32,
    pub brightness_jitter: f32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            size: 128,
            supersample: 2,
            light_square: [226, 202, 160],
            dark_square: [150, 108, 68],
            frame: [90, 60, 40],
            mark: [200, 40, 40],
            background: [70, 90, 110],
            white_piece: [245, 242, 232],
            black_piece: [28, 26, 30],
            color_jitter: 12,
            noise: 4.0,
            brightness_jitter: 0.12,
        }
    }
}

/// Camera sampling policy for bulk rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Quarter turns to draw from, uniformly.
    pub orientations: Vec<u8>,
    pub elevation_range: [f32; 2],
    pub rotation_jitter_deg: f32,
    pub scale_jitter: f32,
    pub shift_jitter: f32,
    pub style: RenderStyle,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let c = Camera::default();
        RenderConfig {
            orientations: vec![0, 1, 2, 3],
            elevation_range: c.elevation_range,
            rotation_jitter_deg: c.rotation_jitter_deg,
            scale_jitter: c.scale_jitter,
            shift_jitter: c.shift_jitter,
            style: RenderStyle::default(),
        }
    }
}

impl RenderConfig {
    /// Camera for the `index`-th image of a run, a pure function of
    /// `(seed, index)`.
    pub fn camera(&self, seed: u64, index: u64) -> Camera {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let k = if self.orientations.is_empty() { 0 } else { self.orientations[rng.gen_range(0..self.orientations.len())] };
        Camera {
            orientation: Orientation::new(k as i32),
            elevation_range: self.elevation_range,
            jitter_seed: rng.gen(),
            rotation_jitter_deg: self.rotation_jitter_deg,
            scale_jitter: self.scale_jitter,
            shift_jitter: self.shift_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    /// `(square, category id)` for every piece on the board.
    pub pieces: Vec<(Square, u8)>,
    /// Silhouette box of each piece, same order as `pieces`.
    pub boxes: Vec<BBox>,
    pub corners: Corners,
    pub elevation_deg: f32,
}

/// Plane-to-image projective map.
#[derive(Debug, Clone, Copy)]
struct Homography([f64; 9]);

impl Homography {
    fn from_points(src: [[f64; 2]; 4], dst: [[f64; 2]; 4]) -> Homography {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let ([x, y], [u, v]) = (src[i], dst[i]);
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gauss-Jordan with partial pivoting on the 8x8 system.
        for col in 0..8 {
            let piv = (col..8).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for k in col..9 {
                a[col][k] /= p;
            }
            for r in 0..8 {
                if r != col {
                    let f = a[r][col];
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let h: Vec<f64> = (0..8).map(|r| a[r][8]).collect();
        Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let h = &self.0;
        let w = h[6] * p[0] + h[7] * p[1] + h[8];
        [(h[0] * p[0] + h[1] * p[1] + h[2]) / w, (h[3] * p[0] + h[4] * p[1] + h[5]) / w]
    }

    fn inverse(&self) -> Homography {
        let m = &self.0;
        let c = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Homography(c)
    }
}

/// Relative silhouette height per piece type.
fn piece_height(kind: PieceType) -> f64 {
    match kind {
        PieceType::Pawn => 0.55,
        PieceType::Rook => 0.68,
        PieceType::Knight => 0.76,
        PieceType::Bishop => 0.84,
        PieceType::Queen => 0.94,
        PieceType::King => 1.0,
    }
}

fn ellipse(x: f64, t: f64, cx: f64, ct: f64, rx: f64, rt: f64) -> bool {
    ((x - cx) / rx).powi(2) + ((t - ct) / rt).powi(2) <= 1.0
}

/// Silhouette test in sprite space: `x` in [-0.5, 0.5] across, `t` in [0, 1]
/// from the base up.
fn inside(kind: PieceType, x: f64, t: f64) -> bool {
    if !(0.0..=1.0).contains(&t) || x.abs() > 0.5 {
        return false;
    }
    let plinth = t < 0.14 && x.abs() < 0.44;
    plinth
        || match kind {
            PieceType::Pawn => (t < 0.6 && x.abs() < 0.3 * (1.0 - t) + 0.06) || ellipse(x, t, 0.0, 0.74, 0.24, 0.24),
            PieceType::Rook => {
                let body = t < 0.8 && x.abs() < 0.3;
                let crown = (0.72..=1.0).contains(&t) && x.abs() < 0.4;
                let notch = t > 0.88 && x.abs() > 0.06 && x.abs() < 0.2;
                body || (crown && !notch)
            }
            PieceType::Knight => {
                let neck = t < 0.62 && x > -0.28 && x < 0.3;
                let head = (0.5..=0.95).contains(&t) && x > -0.08 - 0.4 * (0.95 - t) && x < 0.32;
                let snout = (0.5..=0.74).contains(&t) && x > -0.46 && x < 0.0;
                let ear = t > 0.86 && x > 0.05 && x < 0.2;
                neck || ((head || snout) && !ear)
            }
            PieceType::Bishop => {
                let body = t < 0.6 && x.abs() < 0.24 * (1.0 - t) + 0.08;
                let mitre = ellipse(x, t, 0.0, 0.72, 0.22, 0.2);
                let slit = (x - (t - 0.72) * 0.8).abs() < 0.04 && t > 0.68 && x > 0.0;
                let ball = ellipse(x, t, 0.0, 0.95, 0.07, 0.05);
                body || (mitre && !slit) || ball
            }
            PieceType::Queen => {
                let body = t < 0.78 && x.abs() < 0.3 - 0.14 * t;
                let band = (0.7..0.82).contains(&t) && x.abs() < 0.34;
                let spikes = (0.82..=1.0).contains(&t) && x.abs() < 0.42 && {
                    let p = ((x + 0.42) / 0.21).fract();
                    (p - 0.5).abs() < 0.5 * (1.0 - (t - 0.82) / 0.18)
                };
                body || band || spikes
            }
            PieceType::King => {
                let body = t < 0.74 && x.abs() < 0.3 - 0.12 * t;
                let band = (0.68..0.8).contains(&t) && x.abs() < 0.33;
                let stem = (0.8..=1.0).contains(&t) && x.abs() < 0.06;
                let bar = (0.87..0.94).contains(&t) && x.abs() < 0.18;
                body || band || stem || bar
            }
        }
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [u8; 3], amount: u8) -> [f32; 3] {
    let a = amount as f32;
    c.map(|v| (v as f32 + if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 }).clamp(0.0, 255.0))
}

/// Frame width around the 8x8 playing area, in squares.
const FRAME: f64 = 0.5;

/// Renders `board` as seen by `camera`. Deterministic in all arguments.
pub fn render_synthetic(board: &BoardState, camera: &Camera, style: &RenderStyle) -> Rendered {
    let table = ClassTable::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(camera.jitter_seed);
    let ss = style.supersample.max(1) as usize;
    let big = style.size as usize * ss;
    let s = big as f64;

    let [lo, hi] = camera.elevation_range;
    let elevation = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let e = (elevation as f64).to_radians();
    let sym = |rng: &mut ChaCha8Rng, a: f32| if a > 0.0 { rng.gen_range(-a..=a) as f64 } else { 0.0 };
    let scale = 1.0 + sym(&mut rng, camera.scale_jitter);
    let rot = sym(&mut rng, camera.rotation_jitter_deg).to_radians();
    let (dx, dy) = (sym(&mut rng, camera.shift_jitter) * s, sym(&mut rng, camera.shift_jitter) * s);

    // Frame quad with the near edge at the bottom of the image.
    let near_w = 0.74 * s * scale;
    let far_w = near_w * (1.0 - 0.32 * e.cos());
    let depth = near_w * (0.5 + 0.5 * e.sin());
    let (cx, cy) = (s / 2.0 + dx, s / 2.0 + dy + 0.06 * s * e.cos());
    let quad = [
        [cx - near_w / 2.0, cy + depth / 2.0],
        [cx + near_w / 2.0, cy + depth / 2.0],
        [cx + far_w / 2.0, cy - depth / 2.0],
        [cx - far_w / 2.0, cy - depth / 2.0],
    ]
    .map(|[x, y]| {
        let (px, py) = (x - cx, y - cy);
        [cx + px * rot.cos() - py * rot.sin(), cy + px * rot.sin() + py * rot.cos()]
    });
    // Plane coordinates: u along files from a, v along ranks from 1. The
    // frame corners a1, h1, h8, a8 go round the quad starting from the
    // near-left corner, shifted by the orientation.
    let lo_f = -FRAME;
    let hi_f = 8.0 + FRAME;
    let plane = [[lo_f, lo_f], [hi_f, lo_f], [hi_f, hi_f], [lo_f, hi_f]];
    let k = camera.orientation.quarter_turns() as usize;
    let src: [[f64; 2]; 4] = std::array::from_fn(|i| plane[(i + k) % 4]);
    let h = Homography::from_points(src, quad);
    let inv = h.inverse();

    let light = jitter_color(&mut rng, style.light_square, style.color_jitter);
    let dark = jitter_color(&mut rng, style.dark_square, style.color_jitter);
    let frame = jitter_color(&mut rng, style.frame, style.color_jitter);
    let mark = jitter_color(&mut rng, style.mark, style.color_jitter);
    let background = jitter_color(&mut rng, style.background, style.color_jitter);

    let mut canvas = vec![[0f32; 3]; big * big];
    for py in 0..big {
        for px in 0..big {
            let [u, v] = inv.apply([px as f64 + 0.5, py as f64 + 0.5]);
            canvas[py * big + px] = if (0.0..8.0).contains(&u) && (0.0..8.0).contains(&v) {
                if (u.floor() as i32 + v.floor() as i32) % 2 == 0 { dark } else { light }
            } else if (lo_f..hi_f).contains(&u) && (lo_f..hi_f).contains(&v) {
                if v < 0.0 { mark } else { frame }
            } else {
                background
            };
        }
    }

    // Pieces, far (smaller image y) first so nearer ones overlap them.
    let mut sprites: Vec<(Square, Piece, [f64; 2], f64)> = board
        .pieces()
        .map(|(sq, piece)| {
            let (u, v) = (sq.file() as f64 + 0.5, sq.rank() as f64 + 0.5);
            let c = h.apply([u, v]);
            let du = sub(h.apply([u + 0.5, v]), h.apply([u - 0.5, v]));
            let dv = sub(h.apply([u, v + 0.5]), h.apply([u, v - 0.5]));
            let cell = (du[0] * dv[1] - du[1] * dv[0]).abs().sqrt();
            (sq, piece, c, cell)
        })
        .collect();
    sprites.sort_by(|a, b| a.2[1].total_cmp(&b.2[1]).then(a.0.index().cmp(&b.0.index())));

    let mut boxes = Vec::with_capacity(sprites.len());
    for &(sq, piece, c, cell) in &sprites {
        let width = 0.82 * cell;
        let height = cell * (0.9 + 0.7 * e.cos()) * piece_height(piece.kind);
        let base = c[1] + 0.32 * cell;
        let (x0, y0) = (c[0] - width / 2.0, base - height);
        let outline_t = 0.09;
        let (fill, edge) = match piece.color {
            crate::chess::Color::White => (style.white_piece.map(f32::from), [40.0, 40.0, 40.0]),
            crate::chess::Color::Black => (style.black_piece.map(f32::from), [205.0, 205.0, 205.0]),
        };
        let (ix0, iy0) = (x0.floor().max(0.0) as usize, y0.floor().max(0.0) as usize);
        let (ix1, iy1) = (((x0 + width).ceil() as usize).min(big), (base.ceil() as usize).min(big));
        for py in iy0..iy1 {
            for px in ix0..ix1 {
                let x = (px as f64 + 0.5 - c[0]) / width;
                let t = (base - (py as f64 + 0.5)) / height;
                if !inside(piece.kind, x, t) {
                    continue;
                }
                let ot = outline_t * width / height;
                let interior = inside(piece.kind, x - outline_t, t)
                    && inside(piece.kind, x + outline_t, t)
                    && inside(piece.kind, x, t - ot)
                    && inside(piece.kind, x, t + ot);
                canvas[py * big + px] = if interior { fill } else { edge };
            }
        }
        let bx0 = (x0 / ss as f64).clamp(0.0, style.size as f64);
        let by0 = (y0 / ss as f64).clamp(0.0, style.size as f64);
        let bx1 = ((x0 + width) / ss as f64).clamp(0.0, style.size as f64);
        let by1 = (base / ss as f64).clamp(0.0, style.size as f64);
        boxes.push((sq, BBox { x: bx0 as f32, y: by0 as f32, w: (bx1 - bx0) as f32, h: (by1 - by0) as f32 }));
    }
    boxes.sort_by_key(|(sq, _)| sq.index());

    let gain = 1.0 + sym(&mut rng, style.brightness_jitter) as f32;
    let size = style.size as usize;
    let norm = (ss * ss) as f32;
    let mut image = RgbImage::new(style.size, style.size);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0f32; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = canvas[(y * ss + sy) * big + x * ss + sx];
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                }
            }
            let px = acc.map(|a| {
                let n = if style.noise > 0.0 { rng.gen_range(-style.noise..=style.noise) } else { 0.0 };
                (a / norm * gain + n).round().clamp(0.0, 255.0) as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    let corner = |u: f64, v: f64| {
        let p = h.apply([u, v]);
        [(p[0] / ss as f64) as f32, (p[1] / ss as f64) as f32]
    };
    let mut pieces: Vec<(Square, u8)> = board.pieces().map(|(sq, p)| (sq, table.class_of(Some(p)))).collect();
    pieces.sort_by_key(|(sq, _)| sq.index());
    Rendered {
        image,
        pieces,
        boxes: boxes.into_iter().map(|(_, b)| b).collect(),
        corners: Corners {
            bottom_left: corner(0.0, 0.0),
            bottom_right: corner(8.0, 0.0),
            top_left: corner(0.0, 8.0),
            top_right: corner(8.0, 8.0),
        },
        elevation_deg: elevation,
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}
