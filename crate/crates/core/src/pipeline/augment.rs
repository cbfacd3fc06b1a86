use rand::Rng;

use crate::raster::{rotate_expand, rotate_mask_expand, BitMask, Raster, Resample};

/// Segmenter training tile side.
pub const TILE_SIDE: usize = 256;
/// Chance that a floorplan is rotated for one epoch.
pub const ROTATE_PROB: f64 = 0.2;
pub const MAX_ROTATION_DEG: f64 = 45.0;

const WALL_BIAS_PROB: f64 = 0.9;
const MIN_WALL_FRACTION: f64 = 0.01;
const MAX_ATTEMPTS: usize = 20;

/// Rotates image (bilinear) and mask (nearest) about their centre onto an
/// expanded canvas; uncovered area is black background.
pub fn rotate_pair(image: &Raster, mask: &BitMask, degrees: f64) -> (Raster, BitMask) {
    (
        rotate_expand(image, degrees, Resample::Bilinear, 0.0),
        rotate_mask_expand(mask, degrees),
    )
}

/// With probability `prob` ([`ROTATE_PROB`] by default) rotates by an angle
/// drawn uniformly from ±45 degrees; otherwise returns the inputs unchanged.
pub fn augment_rotate(image: &Raster, mask: &BitMask, prob: f64, rng: &mut impl Rng) -> (Raster, BitMask) {
    if rng.random::<f64>() < prob {
        let theta = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        rotate_pair(image, mask, theta)
    } else {
        (image.clone(), mask.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTile {
    pub image: Raster,
    pub mask: BitMask,
    pub source_id: String,
    /// Top-left `(y, x)` in the padded floorplan.
    pub offset: (usize, usize),
}

/// Samples `count` random `side`-square windows (`TILE_SIDE` at full
/// scale). Floorplans smaller than a tile are black padded and yield a
/// single tile. Most windows are redrawn (up to 20 times) until at least 1%
/// of their pixels are wall.
pub fn make_train_tiles(
    source_id: &str,
    image: &Raster,
    mask: &BitMask,
    rng: &mut impl Rng,
    count: usize,
    side: usize,
) -> Vec<TrainTile> {
    let (h, w) = mask.dims();
    let (ph, pw) = (h.max(side), w.max(side));
    let count = if (ph, pw) == (side, side) { count.min(1) } else { count };
    let wall_fraction = |y: usize, x: usize| {
        let mut n = 0usize;
        for yy in y..(y + side).min(h) {
            for xx in x..(x + side).min(w) {
                n += mask.get(yy, xx) as usize;
            }
        }
        n as f64 / (side * side) as f64
    };
    (0..count)
        .map(|_| {
            let biased = rng.random::<f64>() < WALL_BIAS_PROB;
            let mut draw = || (rng.random_range(0..=ph - side), rng.random_range(0..=pw - side));
            let mut offset = draw();
            if biased {
                let mut attempts = 1;
                while wall_fraction(offset.0, offset.1) < MIN_WALL_FRACTION && attempts < MAX_ATTEMPTS {
                    offset = draw();
                    attempts += 1;
                }
            }
            let (y, x) = offset;
            TrainTile {
                image: image.window(y, x, side, side, 0.0),
                mask: mask.window(y, x, side, side),
                source_id: source_id.to_string(),
                offset,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Yields a fixed value for every draw.
    struct Constant(u64);

    impl rand::RngCore for Constant {
        fn next_u32(&mut self) -> u32 {
            self.0 as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    fn bar() -> (Raster, BitMask) {
        let m = BitMask::from_fn(150, 200, |y, x| (60..72).contains(&y) && (20..180).contains(&x));
        (Raster::from_fn(150, 200, |y, x| if m.get(y, x) { 0.1 } else { 0.9 }), m)
    }

    #[test]
    fn no_rotate_branch_is_identity() {
        let (img, m) = bar();
        let (i2, m2) = augment_rotate(&img, &m, ROTATE_PROB, &mut Constant(u64::MAX));
        assert_eq!((i2, m2), (img, m));
    }

    #[test]
    fn rotation_preserves_area() {
        let (img, m) = bar();
        let (_, m0) = rotate_pair(&img, &m, 0.0);
        assert_eq!(m0.count(), m.count());
        let (i30, m30) = rotate_pair(&img, &m, 30.0);
        assert_eq!((i30.height(), i30.width()), m30.dims());
        let drift = (m30.count() as f64 - m.count() as f64).abs() / m.count() as f64;
        assert!(drift < 0.05);
    }

    #[test]
    fn small_plan_gives_one_padded_tile() {
        let img = Raster::filled(128, 128, 1, 0.8);
        let m = BitMask::from_fn(128, 128, |y, _| y < 10);
        let tiles = make_train_tiles("p", &img, &m, &mut ChaCha8Rng::seed_from_u64(1), 4, TILE_SIDE);
        assert_eq!(tiles.len(), 1);
        let t = &tiles[0];
        assert_eq!(t.offset, (0, 0));
        for y in 0..TILE_SIDE {
            for x in 0..TILE_SIDE {
                if y >= 128 || x >= 128 {
                    assert_eq!(t.image.get(y, x), 0.0);
                    assert!(!t.mask.get(y, x));
                }
            }
        }
    }

    #[test]
    fn tiles_are_seed_deterministic_and_wall_biased() {
        let img = Raster::filled(600, 700, 1, 0.8);
        let m = BitMask::from_fn(600, 700, |y, x| (300..320).contains(&y) && x > 100);
        let a = make_train_tiles("p", &img, &m, &mut ChaCha8Rng::seed_from_u64(9), 12, TILE_SIDE);
        let b = make_train_tiles("p", &img, &m, &mut ChaCha8Rng::seed_from_u64(9), 12, TILE_SIDE);
        assert_eq!(
            a.iter().map(|t| t.offset).collect::<Vec<_>>(),
            b.iter().map(|t| t.offset).collect::<Vec<_>>()
        );
        assert!(a.iter().all(|t| t.image.height() == TILE_SIDE && t.mask.dims() == (TILE_SIDE, TILE_SIDE)));
        let walled = a.iter().filter(|t| t.mask.count() * 100 >= TILE_SIDE * TILE_SIDE).count();
        assert!(walled >= 8, "{walled}");
    }

    #[test]
    fn all_wall_tiles_pass_immediately() {
        let img = Raster::filled(400, 400, 1, 0.0);
        let m = BitMask::from_fn(400, 400, |_, _| true);
        let tiles = make_train_tiles("p", &img, &m, &mut ChaCha8Rng::seed_from_u64(3), 5, TILE_SIDE);
        assert_eq!(tiles.len(), 5);
        assert!(tiles.iter().all(|t| t.mask.count() == TILE_SIDE * TILE_SIDE));
    }
}
