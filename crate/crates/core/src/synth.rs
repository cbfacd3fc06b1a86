//! Procedural floorplans with exact ground truth.
//!
//! A plan is a jittered grid of rooms enclosed by thicker exterior walls.
//! Every wall is drawn as its own rectangle and kept at least [`WALL_GAP`]
//! pixels away from every other wall (junctions are left open, door gaps
//! split walls), so each recorded wall is exactly one 8-connected component
//! of the mask and its recorded width is exactly what the mask shows.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetEntry, DatasetManifest, Splits};
use crate::error::{ensure, Error, Result};
use crate::raster::{write_mask, write_png, BitMask, Orientation, Raster};

/// Minimum background distance between two walls.
pub const WALL_GAP: usize = 6;
const MARGIN: usize = 40;
const MIN_ROOM: usize = 40;
const BACKGROUND: f32 = 0.92;
const INK: f32 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Solid,
    DoubleLine,
    Hatched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthSpec {
    pub seed: u64,
    pub canvas_size: usize,
    /// Inclusive `(min, max)` ranges of room rows and columns.
    pub room_grid: ((usize, usize), (usize, usize)),
    /// Inclusive wall width range in pixels.
    pub wall_width_range: (usize, usize),
    pub textures: Vec<Texture>,
    pub door_gap_prob: f64,
    pub diagonal_wall_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas_size: 768,
            room_grid: ((2, 4), (2, 4)),
            wall_width_range: (6, 30),
            textures: vec![Texture::Solid, Texture::DoubleLine, Texture::Hatched],
            door_gap_prob: 0.3,
            diagonal_wall_prob: 0.1,
        }
    }
}

impl SynthSpec {
    fn min_cell(&self) -> usize {
        2 * self.wall_width_range.1 + 2 * WALL_GAP + MIN_ROOM
    }

    fn span(&self) -> usize {
        self.canvas_size.saturating_sub(2 * MARGIN)
    }

    /// Largest room count per axis that still fits the canvas.
    fn max_cells(&self) -> usize {
        self.span() / self.min_cell()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.wall_width_range;
        ensure!(
            (1..=64).contains(&lo) && (1..=64).contains(&hi) && lo <= hi,
            InvalidArgument,
            "wall width range ({lo}, {hi}) must lie within [1, 64]"
        );
        for (name, p) in [("doorGapProb", self.door_gap_prob), ("diagonalWallProb", self.diagonal_wall_prob)] {
            ensure!((0.0..=1.0).contains(&p), InvalidArgument, "{name} {p} outside [0, 1]");
        }
        ensure!(!self.textures.is_empty(), InvalidArgument, "at least one texture is required");
        let ((rlo, rhi), (clo, chi)) = self.room_grid;
        ensure!(
            rlo >= 1 && clo >= 1 && rlo <= rhi && clo <= chi,
            InvalidArgument,
            "room grid ranges must be non-empty and positive"
        );
        if rlo.max(clo) > self.max_cells() {
            return Err(Error::Unsatisfiable(format!(
                "canvas {} fits at most {} rooms per axis with walls up to {} px, grid needs {}",
                self.canvas_size,
                self.max_cells(),
                hi,
                rlo.max(clo)
            )));
        }
        Ok(())
    }
}

/// Ground-truth wall. The box is `(x, y, w, h)` of its mask pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WallRecord {
    pub bounding_box: (usize, usize, usize, usize),
    pub orientation: Orientation,
    pub length_px: usize,
    pub width_px: u32,
    pub texture: Texture,
    pub diagonal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Raster,
    pub mask: BitMask,
    pub walls: Vec<WallRecord>,
}

/// Wall geometry before rendering.
enum Shape {
    Rect { x: usize, y: usize, w: usize, h: usize },
    /// Centre line from `a` to `b` (as `(x, y)`), thickness `width`.
    Slanted { a: (f64, f64), b: (f64, f64), width: f64 },
}

struct Wall {
    shape: Shape,
    width: usize,
    texture: Texture,
}

/// Grid line with the thickness of the wall running along it.
#[derive(Clone, Copy)]
struct Line {
    pos: usize,
    width: usize,
}

impl Line {
    fn start(&self) -> usize {
        self.pos - self.width / 2
    }

    fn end(&self) -> usize {
        self.start() + self.width
    }
}

fn grid_lines(rng: &mut ChaCha8Rng, cells: usize, span: usize, min_cell: usize, widths: &[usize]) -> Vec<Line> {
    let step = span as f64 / cells as f64;
    let jitter = ((step - min_cell as f64) / 2.0).max(0.0);
    (0..=cells)
        .map(|i| {
            let base = MARGIN as f64 + i as f64 * step;
            let j = if i == 0 || i == cells || jitter < 1.0 {
                0.0
            } else {
                rng.random_range(-jitter..=jitter)
            };
            Line {
                pos: (base + j).round() as usize,
                width: widths[i],
            }
        })
        .collect()
}

/// Splits `[start, end)` into wall pieces, maybe cutting a door gap.
fn split_door(rng: &mut ChaCha8Rng, start: usize, end: usize, width: usize, prob: f64) -> Vec<(usize, usize)> {
    let piece_min = (3 * width + 2).max(16);
    let door = rng.random_range(24..=40usize);
    let wants_door = rng.random::<f64>() < prob;
    if wants_door && end - start >= 2 * piece_min + door {
        let at = rng.random_range(start + piece_min..=end - piece_min - door);
        vec![(start, at), (at + door, end)]
    } else {
        vec![(start, end)]
    }
}

fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Wall> {
    let ((rlo, rhi), (clo, chi)) = spec.room_grid;
    let cap = spec.max_cells();
    let rows = rng.random_range(rlo..=rhi).min(cap);
    let cols = rng.random_range(clo..=chi).min(cap);
    let (wlo, whi) = spec.wall_width_range;
    let exterior = rng.random_range((wlo + whi).div_ceil(2)..=whi);
    let widths = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..=n)
            .map(|i| if i == 0 || i == n { exterior } else { rng.random_range(wlo..=whi) })
            .collect()
    };
    let hw = widths(rows, rng);
    let vw = widths(cols, rng);
    let hlines = grid_lines(rng, rows, spec.span(), spec.min_cell(), &hw);
    let vlines = grid_lines(rng, cols, spec.span(), spec.min_cell(), &vw);
    let texture = |rng: &mut ChaCha8Rng| *spec.textures.choose(rng).expect("validated non-empty");

    let mut walls = Vec::new();
    let mut present_h = vec![vec![true; cols]; rows + 1];
    let mut present_v = vec![vec![true; rows]; cols + 1];
    // Interior segments may be dropped to merge rooms.
    for row in present_h.iter_mut().take(rows).skip(1) {
        for p in row.iter_mut() {
            *p = rng.random::<f64>() >= 0.2;
        }
    }
    for row in present_v.iter_mut().take(cols).skip(1) {
        for p in row.iter_mut() {
            *p = rng.random::<f64>() >= 0.2;
        }
    }
    for (j, line) in hlines.iter().enumerate() {
        for i in 0..cols {
            if !present_h[j][i] {
                continue;
            }
            let start = vlines[i].end() + WALL_GAP;
            let end = vlines[i + 1].start() - WALL_GAP;
            let tex = texture(rng);
            for (a, b) in split_door(rng, start, end, line.width, spec.door_gap_prob) {
                walls.push(Wall {
                    shape: Shape::Rect { x: a, y: line.start(), w: b - a, h: line.width },
                    width: line.width,
                    texture: tex,
                });
            }
        }
    }
    for (i, line) in vlines.iter().enumerate() {
        for j in 0..rows {
            if !present_v[i][j] {
                continue;
            }
            let start = hlines[j].end() + WALL_GAP;
            let end = hlines[j + 1].start() - WALL_GAP;
            let tex = texture(rng);
            for (a, b) in split_door(rng, start, end, line.width, spec.door_gap_prob) {
                walls.push(Wall {
                    shape: Shape::Rect { x: line.start(), y: a, w: line.width, h: b - a },
                    width: line.width,
                    texture: tex,
                });
            }
        }
    }
    if rng.random::<f64>() < spec.diagonal_wall_prob {
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let width = rng.random_range(wlo..=whi.min(wlo + 8));
        // Keep clear of the room's walls by the gap plus the slanted half width.
        let m = (WALL_GAP + width + 2) as f64;
        let (x0, x1) = (vlines[c].end() as f64 + m, vlines[c + 1].start() as f64 - m);
        let (y0, y1) = (hlines[r].end() as f64 + m, hlines[r + 1].start() as f64 - m);
        if x1 - x0 >= 40.0 && y1 - y0 >= 40.0 {
            let (a, b) = if rng.random::<bool>() { ((x0, y0), (x1, y1)) } else { ((x0, y1), (x1, y0)) };
            walls.push(Wall {
                shape: Shape::Slanted { a, b, width: width as f64 },
                width,
                texture: Texture::Solid,
            });
        }
    }
    walls
}

/// Pixels of a wall with their distance to the wall outline.
fn rasterize(shape: &Shape, size: usize) -> Vec<(usize, usize, f64)> {
    match *shape {
        Shape::Rect { x, y, w, h } => {
            let mut out = Vec::with_capacity(w * h);
            for yy in y..y + h {
                for xx in x..x + w {
                    let edge = (xx - x).min(x + w - 1 - xx).min(yy - y).min(y + h - 1 - yy);
                    out.push((yy, xx, edge as f64));
                }
            }
            out
        }
        Shape::Slanted { a, b, width } => {
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt();
            let (ux, uy) = (dx / len, dy / len);
            let half = width / 2.0;
            let pad = half.ceil() as usize + 1;
            let xs = (a.0.min(b.0) as usize).saturating_sub(pad)..((a.0.max(b.0) as usize + pad).min(size));
            let ys = (a.1.min(b.1) as usize).saturating_sub(pad)..((a.1.max(b.1) as usize + pad).min(size));
            let mut out = Vec::new();
            for yy in ys {
                for xx in xs.clone() {
                    let (px, py) = (xx as f64 + 0.5 - a.0, yy as f64 + 0.5 - a.1);
                    let t = px * ux + py * uy;
                    let d = (-px * uy + py * ux).abs();
                    if (0.0..=len).contains(&t) && d <= half {
                        let edge = (t.min(len - t)).min(half - d);
                        out.push((yy, xx, edge.floor()));
                    }
                }
            }
            out
        }
    }
}

fn shade(texture: Texture, edge: f64, width: usize, y: usize, x: usize) -> f32 {
    let border = (width as f64 / 5.0).max(1.0).floor();
    match texture {
        Texture::Solid => INK,
        Texture::DoubleLine if edge < border => INK,
        Texture::DoubleLine => 0.78,
        Texture::Hatched if edge < border || (x + y) % 7 < 2 => INK + 0.05,
        Texture::Hatched => 0.8,
    }
}

/// Renders one floorplan. Deterministic in `spec` (including its seed).
pub fn generate(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.canvas_size;
    let walls = layout(spec, &mut rng);
    let mut image = vec![BACKGROUND; size * size];
    let mut mask = BitMask::zeros(size, size);
    let mut records = Vec::with_capacity(walls.len());
    for wall in &walls {
        let pixels = rasterize(&wall.shape, size);
        if pixels.is_empty() {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(y, x, edge) in &pixels {
            mask.set(y, x, true);
            image[y * size + x] = shade(wall.texture, edge, wall.width, y, x);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
        records.push(WallRecord {
            bounding_box: (x0, y0, bw, bh),
            orientation: Orientation::of_box(bw, bh),
            length_px: bw.max(bh),
            width_px: wall.width as u32,
            texture: wall.texture,
            diagonal: matches!(wall.shape, Shape::Slanted { .. }),
        });
    }
    draw_glyphs(&mut rng, &mut image, &mask, size);
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    for v in image.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(SynthSample {
        image: Raster::new(size, size, 1, image)?,
        mask,
        walls: records,
    })
}

/// Small dark marks (dots and short strokes) well away from any wall; they
/// are clutter, not walls, so the mask ignores them.
fn draw_glyphs(rng: &mut ChaCha8Rng, image: &mut [f32], mask: &BitMask, size: usize) {
    let count = rng.random_range(size / 64..=size / 24);
    let clear = |y: usize, x: usize, r: usize| {
        let ys = y.saturating_sub(r)..(y + r + 1).min(size);
        ys.into_iter()
            .all(|yy| (x.saturating_sub(r)..(x + r + 1).min(size)).all(|xx| !mask.get(yy, xx)))
    };
    for _ in 0..count {
        let (y, x) = (rng.random_range(8..size - 8), rng.random_range(8..size - 8));
        if !clear(y, x, 12) {
            continue;
        }
        let (gh, gw) = if rng.random::<bool>() {
            (rng.random_range(1..=3), rng.random_range(4..=9))
        } else {
            (rng.random_range(2..=4), rng.random_range(2..=4))
        };
        let level = rng.random_range(0.2..0.5f32);
        for yy in y..y + gh {
            for xx in x..x + gw {
                image[yy * size + xx] = level;
            }
        }
    }
}

pub fn sample_file_stem(index: usize) -> String {
    format!("{index:04}")
}

/// Writes `count` samples (seeds `spec.seed + index`) plus `manifest.json`
/// under `out_dir`. Indices are split 70/15/15 into train/val/test.
pub fn generate_set(spec: &SynthSpec, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    ensure!(count >= 1, InvalidArgument, "count must be at least 1");
    spec.validate()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    }
    let entries = (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = spec.seed.wrapping_add(index as u64);
            let sample = generate(&SynthSpec { seed, ..spec.clone() })?;
            let stem = sample_file_stem(index);
            let image = format!("images/{stem}.png");
            let mask = format!("masks/{stem}.png");
            write_png(&sample.image, out_dir.join(&image))?;
            write_mask(&sample.mask, out_dir.join(&mask))?;
            Ok(DatasetEntry {
                id: stem,
                index,
                seed,
                image,
                mask,
                walls: sample.walls,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
        splits: Splits::partition(count, spec.seed),
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::connected_components;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            canvas_size: 384,
            room_grid: ((1, 2), (1, 2)),
            wall_width_range: (8, 20),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_sample() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap().image, generate(&small(6)).unwrap().image);
    }

    #[test]
    fn recorded_walls_are_the_mask_components() {
        for seed in 0..12 {
            let spec = SynthSpec {
                diagonal_wall_prob: 0.0,
                ..small(seed)
            };
            let s = generate(&spec).unwrap();
            let comps = connected_components(&s.mask);
            assert_eq!(comps.len(), s.walls.len(), "seed {seed}");
            for w in &s.walls {
                let c = comps.iter().find(|c| c.bounding_box == w.bounding_box).expect("wall component");
                assert_eq!(c.width_px, w.width_px);
                assert_eq!(c.length_px, w.length_px);
                assert_eq!(c.orientation, w.orientation);
            }
            assert!(s.walls.iter().any(|w| w.orientation == Orientation::Vertical));
            assert!(s.walls.iter().any(|w| w.orientation == Orientation::Horizontal));
            let frac = s.mask.count() as f64 / (384.0 * 384.0);
            assert!(frac > 0.0 && frac < 0.6);
        }
    }

    #[test]
    fn diagonal_walls_stay_separate() {
        let spec = SynthSpec {
            diagonal_wall_prob: 1.0,
            ..small(2)
        };
        let s = generate(&spec).unwrap();
        assert!(s.walls.iter().any(|w| w.diagonal));
        assert_eq!(connected_components(&s.mask).len(), s.walls.len());
    }

    #[test]
    fn invalid_specs() {
        let tiny = SynthSpec {
            canvas_size: 120,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&tiny), Err(Error::Unsatisfiable(_))));
        let wide = SynthSpec {
            wall_width_range: (6, 70),
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&wide), Err(Error::InvalidArgument(_))));
        let prob = SynthSpec {
            door_gap_prob: 1.5,
            ..SynthSpec::default()
        };
        assert!(generate(&prob).is_err());
    }
}
