use serde::{Deserialize, Serialize};

use super::BitMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Vertical,
    Horizontal,
}

impl Orientation {
    /// Vertical iff the box is taller than wide; square boxes are horizontal.
    pub fn of_box(w: usize, h: usize) -> Self {
        if h > w {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        }
    }
}

/// An 8-connected wall region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WallComponent {
    pub id: usize,
    pub pixel_count: usize,
    /// `(x, y, w, h)`.
    pub bounding_box: (usize, usize, usize, usize),
    pub orientation: Orientation,
    /// Extent along the major axis of the bounding box.
    pub length_px: usize,
    pub width_px: u32,
    /// Member pixels as `(y, x)` in discovery order.
    #[serde(skip)]
    pub pixels: Vec<(u32, u32)>,
}

impl WallComponent {
    /// Midpoint of the bounding box's major axis, as `(y, x)`.
    pub fn center(&self) -> (usize, usize) {
        let (x, y, w, h) = self.bounding_box;
        (y + h / 2, x + w / 2)
    }
}

/// Labels 8-connected wall regions, numbered in row-major discovery order.
pub fn connected_components(mask: &BitMask) -> Vec<WallComponent> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            pixels.push((y as u32, x as u32));
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut comp = WallComponent {
            id: out.len(),
            pixel_count: pixels.len(),
            bounding_box: (x0, y0, bw, bh),
            orientation: Orientation::of_box(bw, bh),
            length_px: bw.max(bh),
            width_px: 1,
            pixels,
        };
        comp.width_px = estimate_wall_width(&comp, mask);
        out.push(comp);
    }
    out
}

/// Median over the component's pixels of the shorter of the horizontal and
/// vertical mask runs through that pixel, rounded half-up, at least 1.
pub fn estimate_wall_width(component: &WallComponent, mask: &BitMask) -> u32 {
    if component.pixels.is_empty() {
        return 1;
    }
    let (bx, by, bw, bh) = component.bounding_box;
    // Runs through a member pixel never leave the component, hence its box.
    let local = |y: usize, x: usize| mask.get(by + y, bx + x);
    let mut hrun = vec![0u32; bw * bh];
    for y in 0..bh {
        let mut x = 0;
        while x < bw {
            if !local(y, x) {
                x += 1;
                continue;
            }
            let start = x;
            while x < bw && local(y, x) {
                x += 1;
            }
            hrun[y * bw + start..y * bw + x].fill((x - start) as u32);
        }
    }
    let mut vrun = vec![0u32; bw * bh];
    for x in 0..bw {
        let mut y = 0;
        while y < bh {
            if !local(y, x) {
                y += 1;
                continue;
            }
            let start = y;
            while y < bh && local(y, x) {
                y += 1;
            }
            for yy in start..y {
                vrun[yy * bw + x] = (y - start) as u32;
            }
        }
    }
    let mut runs: Vec<u32> = component
        .pixels
        .iter()
        .map(|&(y, x)| {
            let i = (y as usize - by) * bw + (x as usize - bx);
            hrun[i].min(vrun[i])
        })
        .collect();
    runs.sort_unstable();
    let n = runs.len();
    // Doubled median keeps the half-up rounding exact in integers.
    let twice = if n % 2 == 1 {
        2 * runs[n / 2] as u64
    } else {
        runs[n / 2 - 1] as u64 + runs[n / 2] as u64
    };
    (twice.div_ceil(2) as u32).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bar(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> BitMask {
        BitMask::from_fn(h, w, |y, x| y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw)
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&BitMask::zeros(10, 10)).is_empty());
    }

    #[test]
    fn horizontal_bar() {
        let m = bar(20, 120, 5, 10, 10, 100);
        let c = connected_components(&m);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].orientation, Orientation::Horizontal);
        assert_eq!(c[0].length_px, 100);
        assert_eq!(c[0].width_px, 10);
        assert_eq!(c[0].pixel_count, 1000);
    }

    #[test]
    fn square_tie_is_horizontal_and_single_pixel_is_one() {
        let c = connected_components(&bar(5, 5, 1, 1, 1, 1));
        assert_eq!(c[0].width_px, 1);
        assert_eq!(c[0].orientation, Orientation::Horizontal);
    }

    #[test]
    fn diagonal_neighbours_join() {
        let m = BitMask::from_fn(4, 4, |y, x| y == x);
        assert_eq!(connected_components(&m).len(), 1);
    }

    /// Per-pixel run lengths by direct scanning, median by sorting.
    fn brute_width(mask: &BitMask, pixels: &[(usize, usize)]) -> u32 {
        let mut v: Vec<f64> = pixels
            .iter()
            .map(|&(y, x)| {
                let mut l = x;
                while l > 0 && mask.get(y, l - 1) {
                    l -= 1;
                }
                let mut r = x;
                while r + 1 < mask.width() && mask.get(y, r + 1) {
                    r += 1;
                }
                let mut t = y;
                while t > 0 && mask.get(t - 1, x) {
                    t -= 1;
                }
                let mut b = y;
                while b + 1 < mask.height() && mask.get(b + 1, x) {
                    b += 1;
                }
                ((r - l + 1).min(b - t + 1)) as f64
            })
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let med = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        ((med + 0.5).floor() as u32).max(1)
    }

    #[test]
    fn l_shape_width_matches_bruteforce() {
        let t = 8;
        let m = BitMask::from_fn(100, 100, |y, x| {
            (y >= 10 && y < 10 + t && x >= 10 && x < 80) || (x >= 10 && x < 10 + t && y >= 10 && y < 90)
        });
        let c = connected_components(&m);
        assert_eq!(c.len(), 1);
        let px: Vec<(usize, usize)> = c[0].pixels.iter().map(|&(y, x)| (y as usize, x as usize)).collect();
        assert_eq!(brute_width(&m, &px), 8);
        assert_eq!(c[0].width_px, 8);
    }

    /// Recursive-style flood fill on an explicit queue, 8-neighbourhood.
    fn flood_labels(mask: &BitMask) -> Vec<Option<usize>> {
        let (h, w) = mask.dims();
        let mut label = vec![None; h * w];
        let mut next = 0;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) && label[y * w + x].is_none() {
                    fill(mask, &mut label, y, x, next);
                    next += 1;
                }
            }
        }
        label
    }

    fn fill(mask: &BitMask, label: &mut [Option<usize>], y: usize, x: usize, id: usize) {
        let w = mask.width();
        let mut queue = std::collections::VecDeque::from([(y, x)]);
        label[y * w + x] = Some(id);
        while let Some((cy, cx)) = queue.pop_front() {
            for ny in cy.saturating_sub(1)..=(cy + 1).min(mask.height() - 1) {
                for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    if mask.get(ny, nx) && label[ny * w + nx].is_none() {
                        label[ny * w + nx] = Some(id);
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn components_partition_wall_pixels(
            (h, w, bits) in (1usize..64, 1usize..64).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), proptest::collection::vec(prop::bool::weighted(0.35), h * w))
            })
        ) {
            let m = BitMask::new(h, w, bits).unwrap();
            let comps = connected_components(&m);
            let oracle = flood_labels(&m);
            let mut label = vec![None; h * w];
            for c in &comps {
                for &(y, x) in &c.pixels {
                    let i = y as usize * w + x as usize;
                    prop_assert!(label[i].is_none(), "pixel in two components");
                    label[i] = Some(c.id);
                }
            }
            // Same ordering (row-major discovery) means identical labels.
            prop_assert_eq!(label, oracle);
            for c in &comps {
                let px: Vec<(usize, usize)> = c.pixels.iter().map(|&(y, x)| (y as usize, x as usize)).collect();
                prop_assert_eq!(c.width_px, brute_width(&m, &px));
            }
        }

        #[test]
        fn width_is_translation_invariant(dy in 0usize..30, dx in 0usize..30, bh in 1usize..20, bw in 1usize..40) {
            let a = connected_components(&bar(80, 100, 2, 3, bh, bw));
            let b = connected_components(&bar(80, 100, 2 + dy, 3 + dx, bh, bw));
            prop_assert_eq!(a[0].width_px, b[0].width_px);
        }
    }
}
