use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::{connected_components, BitMask, CropBox, Orientation, Raster, WallComponent};

/// Side of a wall crop in pixels.
pub const CROP_SIDE: usize = 64;

/// Selection criterion of a wall crop. The declaration order is the
/// canonical channel order of the injected latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CropTag {
    LongestVertical,
    LongestHorizontal,
    ThinnestLongVertical,
    ThinnestLongHorizontal,
    LongestOverall,
}

impl CropTag {
    pub const ALL: [CropTag; 5] = [
        CropTag::LongestVertical,
        CropTag::LongestHorizontal,
        CropTag::ThinnestLongVertical,
        CropTag::ThinnestLongHorizontal,
        CropTag::LongestOverall,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CropTag::LongestVertical => "longestVertical",
            CropTag::LongestHorizontal => "longestHorizontal",
            CropTag::ThinnestLongVertical => "thinnestLongVertical",
            CropTag::ThinnestLongHorizontal => "thinnestLongHorizontal",
            CropTag::LongestOverall => "longestOverall",
        }
    }

    fn orientation(self) -> Option<Orientation> {
        match self {
            CropTag::LongestVertical | CropTag::ThinnestLongVertical => Some(Orientation::Vertical),
            CropTag::LongestHorizontal | CropTag::ThinnestLongHorizontal => Some(Orientation::Horizontal),
            CropTag::LongestOverall => None,
        }
    }

    fn thinnest(self) -> bool {
        matches!(self, CropTag::ThinnestLongVertical | CropTag::ThinnestLongHorizontal)
    }
}

impl std::fmt::Display for CropTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WallCrop {
    pub tag: CropTag,
    pub bbox: CropBox,
    pub width_px: f64,
    pub raster: Raster,
    /// Source component when selected automatically from a mask.
    pub component: Option<usize>,
}

/// Exactly one crop per [`CropTag`].
#[derive(Clone, Debug, PartialEq)]
pub struct WallCropSet {
    crops: Vec<WallCrop>,
}

impl WallCropSet {
    pub fn new(crops: Vec<WallCrop>) -> Result<Self> {
        ensure!(
            crops.len() == CropTag::ALL.len(),
            InvalidArgument,
            "a crop set holds {} crops, got {}",
            CropTag::ALL.len(),
            crops.len()
        );
        for tag in CropTag::ALL {
            ensure!(
                crops.iter().filter(|c| c.tag == tag).count() == 1,
                InvalidArgument,
                "crop set needs exactly one {tag} crop"
            );
        }
        for c in &crops {
            ensure!(
                (c.raster.height(), c.raster.width()) == (CROP_SIDE, CROP_SIDE),
                Shape,
                "{} crop is {}x{}, expected {CROP_SIDE}x{CROP_SIDE}",
                c.tag,
                c.raster.height(),
                c.raster.width()
            );
        }
        Ok(Self { crops })
    }

    /// Crops in insertion order.
    pub fn crops(&self) -> &[WallCrop] {
        &self.crops
    }

    pub fn get(&self, tag: CropTag) -> &WallCrop {
        self.crops.iter().find(|c| c.tag == tag).expect("validated at construction")
    }

    pub fn in_tag_order(&self) -> Vec<&WallCrop> {
        CropTag::ALL.iter().map(|&t| self.get(t)).collect()
    }

    pub fn rasters_in_tag_order(&self) -> Result<Vec<&Raster>> {
        Ok(self.in_tag_order().into_iter().map(|c| &c.raster).collect())
    }

    /// Copy with each crop raster replaced by `f(tag)`.
    pub fn with_rasters(&self, mut f: impl FnMut(CropTag) -> Raster) -> Result<Self> {
        let crops = self
            .crops
            .iter()
            .map(|c| WallCrop {
                raster: f(c.tag),
                ..c.clone()
            })
            .collect();
        Self::new(crops)
    }

    pub fn to_sidecar(&self, floorplan_id: &str) -> CropSidecar {
        CropSidecar {
            floorplan_id: floorplan_id.to_string(),
            crops: self
                .in_tag_order()
                .into_iter()
                .map(|c| SidecarCrop {
                    tag: c.tag,
                    x: c.bbox.x,
                    y: c.bbox.y,
                    side: c.bbox.side,
                    width_px: c.width_px,
                })
                .collect(),
        }
    }

    /// Extracts crops for sidecar boxes given in the coordinates of the image
    /// before it was rescaled by `scale_factor`. Each box centre is mapped
    /// into `image` and a `CROP_SIDE` window is clamped around it.
    pub fn from_sidecar(image: &Raster, sidecar: &CropSidecar, scale_factor: f64) -> Result<Self> {
        let crops = sidecar
            .crops
            .iter()
            .map(|c| {
                ensure!(
                    c.width_px.is_finite() && c.width_px > 0.0,
                    InvalidArgument,
                    "{} crop width must be positive",
                    c.tag
                );
                let cy = ((c.y as f64 + c.side as f64 / 2.0) * scale_factor) as usize;
                let cx = ((c.x as f64 + c.side as f64 / 2.0) * scale_factor) as usize;
                let bbox = CropBox::centered_clamped(cy, cx, CROP_SIDE, image.height(), image.width());
                Ok(WallCrop {
                    tag: c.tag,
                    bbox,
                    width_px: c.width_px * scale_factor,
                    raster: image.window(bbox.y, bbox.x, CROP_SIDE, CROP_SIDE, 0.0).to_gray(),
                    component: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(crops)
    }
}

/// Crop-set sidecar file shared by the CLI and the HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CropSidecar {
    pub floorplan_id: String,
    pub crops: Vec<SidecarCrop>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SidecarCrop {
    pub tag: CropTag,
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub width_px: f64,
}

impl CropSidecar {
    pub fn widths(&self) -> Vec<f64> {
        self.crops.iter().map(|c| c.width_px).collect()
    }
}

/// Ordering key: longer first, then thinner, then top-most, then left-most.
pub fn rank_component(c: &WallComponent) -> (Reverse<usize>, u32, usize, usize) {
    let (x, y, _, _) = c.bounding_box;
    (Reverse(c.length_px), c.width_px, y, x)
}

fn pick(tag: CropTag, components: &[WallComponent]) -> &WallComponent {
    let oriented: Vec<&WallComponent> = match tag.orientation() {
        Some(o) => components.iter().filter(|c| c.orientation == o).collect(),
        None => Vec::new(),
    };
    let mut pool = if oriented.is_empty() {
        components.iter().collect()
    } else {
        oriented
    };
    if tag.thinnest() {
        let thinnest = pool.iter().map(|c| c.width_px).min().expect("non-empty pool");
        pool.retain(|c| c.width_px <= thinnest + 1);
    }
    pool.into_iter().min_by_key(|c| rank_component(c)).expect("non-empty pool")
}

/// Point on the component at the middle of its major axis, as `(y, x)`: the
/// member pixel on the mid column (horizontal walls) or mid row (vertical
/// walls) closest to the box centre.
pub fn crop_center(c: &WallComponent) -> (usize, usize) {
    let (bx, by, bw, bh) = c.bounding_box;
    let (my, mx) = (by + bh / 2, bx + bw / 2);
    let on_axis = |&(y, x): &(u32, u32)| match c.orientation {
        Orientation::Horizontal => x as usize == mx,
        Orientation::Vertical => y as usize == my,
    };
    c.pixels
        .iter()
        .filter(|p| on_axis(p))
        .min_by_key(|&&(y, x)| ((y as usize).abs_diff(my) + (x as usize).abs_diff(mx), y, x))
        .or_else(|| {
            c.pixels
                .iter()
                .min_by_key(|&&(y, x)| ((y as usize).abs_diff(my) + (x as usize).abs_diff(mx), y, x))
        })
        .map(|&(y, x)| (y as usize, x as usize))
        .unwrap_or((my, mx))
}

/// Picks one wall per criterion from the mask and cuts a `CROP_SIDE` window
/// centred on it out of the (grayscale) image.
pub fn select_wall_crops(image: &Raster, mask: &BitMask) -> Result<WallCropSet> {
    ensure!(
        (image.height(), image.width()) == mask.dims(),
        Shape,
        "image and mask dimensions differ"
    );
    let components = connected_components(mask);
    if components.is_empty() {
        return Err(Error::UnusableFloorplan("no wall component to crop".into()));
    }
    let gray = image.to_gray();
    let crops = CropTag::ALL
        .iter()
        .map(|&tag| {
            let c = pick(tag, &components);
            let (cy, cx) = crop_center(c);
            let bbox = CropBox::centered_clamped(cy, cx, CROP_SIDE, mask.height(), mask.width());
            WallCrop {
                tag,
                bbox,
                width_px: c.width_px as f64,
                raster: gray.window(bbox.y, bbox.x, CROP_SIDE, CROP_SIDE, 0.0),
                component: Some(c.id),
            }
        })
        .collect();
    WallCropSet::new(crops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(rects: &[(usize, usize, usize, usize)], h: usize, w: usize) -> (Raster, BitMask) {
        let m = BitMask::from_fn(h, w, |y, x| {
            rects.iter().any(|&(rx, ry, rw, rh)| x >= rx && x < rx + rw && y >= ry && y < ry + rh)
        });
        (m.to_raster(), m)
    }

    #[test]
    fn single_wall_fills_every_tag() {
        let (img, m) = plan(&[(20, 50, 150, 10)], 200, 200);
        let set = select_wall_crops(&img, &m).unwrap();
        assert!(set.crops().iter().all(|c| c.component == Some(0)));
        assert!(set.crops().iter().all(|c| c.width_px == 10.0));
    }

    #[test]
    fn criteria_pick_expected_walls() {
        // 0: horizontal long thick, 1: vertical long thick,
        // 2: vertical thin shorter, 3: horizontal thin shorter.
        let rects = [(10, 10, 300, 20), (10, 60, 20, 250), (100, 60, 8, 200), (60, 340, 180, 9)];
        let (img, m) = plan(&rects, 400, 400);
        let set = select_wall_crops(&img, &m).unwrap();
        let id = |t| set.get(t).component.unwrap();
        let comps = connected_components(&m);
        let by_rect = |r: (usize, usize, usize, usize)| comps.iter().position(|c| c.bounding_box == r).unwrap();
        assert_eq!(id(CropTag::LongestHorizontal), by_rect(rects[0]));
        assert_eq!(id(CropTag::LongestOverall), by_rect(rects[0]));
        assert_eq!(id(CropTag::LongestVertical), by_rect(rects[1]));
        assert_eq!(id(CropTag::ThinnestLongVertical), by_rect(rects[2]));
        assert_eq!(id(CropTag::ThinnestLongHorizontal), by_rect(rects[3]));
    }

    #[test]
    fn missing_orientation_falls_back_to_global() {
        let (img, m) = plan(&[(10, 10, 100, 12), (10, 60, 60, 6)], 120, 140);
        let set = select_wall_crops(&img, &m).unwrap();
        assert_eq!(set.get(CropTag::LongestVertical).component, set.get(CropTag::LongestOverall).component);
        assert_eq!(set.get(CropTag::ThinnestLongVertical).width_px, 6.0);
    }

    #[test]
    fn edge_wall_crop_is_clamped() {
        let (img, m) = plan(&[(0, 2, 30, 5)], 100, 100);
        let set = select_wall_crops(&img, &m).unwrap();
        let c = set.get(CropTag::LongestOverall);
        assert_eq!((c.bbox.x, c.bbox.y), (0, 0));
        assert_eq!((c.raster.height(), c.raster.width()), (CROP_SIDE, CROP_SIDE));
        assert!(c.bbox.fits(100, 100));
    }

    #[test]
    fn empty_mask_errors() {
        let img = Raster::filled(70, 70, 1, 1.0);
        assert!(select_wall_crops(&img, &BitMask::zeros(70, 70)).is_err());
    }

    #[test]
    fn set_validation() {
        let (img, m) = plan(&[(20, 50, 150, 10)], 200, 200);
        let set = select_wall_crops(&img, &m).unwrap();
        let mut four = set.crops().to_vec();
        four.pop();
        assert!(WallCropSet::new(four.clone()).is_err());
        four.push(set.crops()[0].clone());
        assert!(WallCropSet::new(four).is_err());
    }

    #[test]
    fn sidecar_round_trip_at_unit_scale() {
        let (img, m) = plan(&[(20, 50, 150, 10), (100, 80, 10, 100)], 200, 200);
        let set = select_wall_crops(&img, &m).unwrap();
        let sc = set.to_sidecar("plan-1");
        let json = serde_json::to_string(&sc).unwrap();
        assert!(json.contains("\"floorplanId\":\"plan-1\""));
        assert!(json.contains("\"widthPx\""));
        let back: CropSidecar = serde_json::from_str(&json).unwrap();
        let again = WallCropSet::from_sidecar(&img, &back, 1.0).unwrap();
        for t in CropTag::ALL {
            assert_eq!(again.get(t).bbox, set.get(t).bbox);
            assert_eq!(again.get(t).raster, set.get(t).raster);
        }
    }
}
