//! Spatial primitives: grids, box rasterization, center-distance fields,
//! prior construction, and spatial softmax.
//!
//! All coordinates are normalized to `[0, 1]` so that box geometry and the
//! concentration parameter `lambda` keep the same meaning at any grid
//! resolution. A grid cell `(r, c)` on an `H x W` grid has its center at
//! `((c + 0.5) / W, (r + 0.5) / H)` in `(x, y)` order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `H x W` grid of real values. Row-major, `[row][col]` indexing.
pub type Grid2 = Array2<f64>;

/// An axis-aligned box in normalized coordinates.
///
/// `x`, `y` locate the top-left corner; `w`, `h` are the extents. The box
/// interval is half-open: a cell center at exactly `x + w` is outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x >= 0.0
            && self.x < 1.0
            && self.y >= 0.0
            && self.y < 1.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + 1e-12
            && self.y + self.h <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!(
                "x={} y={} w={} h={}",
                self.x, self.y, self.w, self.h
            )))
        }
    }

    /// Box center in normalized coordinates, `(c_x, c_y)`.
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// A `{0, 1}` grid marking the cells whose centers fall inside a box.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Array2<f64>,
    ones: usize,
}

impl BinaryMask {
    /// Grid of 0.0 / 1.0 values.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Number of cells inside the mask. Always >= 1.
    pub fn count(&self) -> usize {
        self.ones
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// True if cell `(r, c)` is inside the mask.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.values[[r, c]] > 0.5
    }
}

/// How a [`TokenAttention`] map is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Nonnegative, no normalization constraint.
    Raw,
    /// Sums to 1 over the whole grid.
    Global,
    /// Sums to 1 over a companion mask; zero outside it.
    Masked,
}

/// A per-token nonnegative spatial distribution over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAttention {
    values: Array2<f64>,
    norm: Normalization,
}

impl TokenAttention {
    /// Wraps raw nonnegative attention values.
    pub fn raw(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DegenerateAttention(
                "attention values must be finite and nonnegative".into(),
            ));
        }
        Ok(TokenAttention {
            values,
            norm: Normalization::Raw,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    /// Total mass over the whole grid.
    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    /// Globally normalized copy (values sum to 1 over the grid).
    pub fn normalize_global(&self) -> Result<TokenAttention> {
        let total = self.total_mass();
        if total <= 0.0 {
            return Err(Error::DegenerateAttention(
                "cannot globally normalize all-zero attention".into(),
            ));
        }
        Ok(TokenAttention {
            values: &self.values / total,
            norm: Normalization::Global,
        })
    }

    /// Mask-normalized copy: restricted to the mask and renormalized there.
    pub fn normalize_masked(&self, mask: &BinaryMask) -> Result<TokenAttention> {
        let masked = &self.values * mask.values();
        let total = masked.sum();
        if total <= 0.0 {
            return Err(Error::DegenerateAttention(
                "attention carries no mass inside the mask".into(),
            ));
        }
        Ok(TokenAttention {
            values: masked / total,
            norm: Normalization::Masked,
        })
    }
}

/// One layout entry: a token id paired with its target box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub id: usize,
    #[serde(with = "box_as_array")]
    pub box_: BoundingBox,
}

mod box_as_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x, b.y, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(BoundingBox { x, y, w, h })
    }
}

/// A set of (token, box) pairs describing the desired layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub tokens: Vec<LayoutEntry>,
}

impl LayoutSpec {
    pub fn new(entries: Vec<(usize, BoundingBox)>) -> Result<Self> {
        let spec = LayoutSpec {
            tokens: entries
                .into_iter()
                .map(|(id, box_)| LayoutEntry { id, box_ })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidConfig("layout has no tokens".into()));
        }
        for e in &self.tokens {
            e.box_.validate()?;
        }
        let mut ids: Vec<usize> = self.tokens.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tokens.len() {
            return Err(Error::InvalidConfig("duplicate token ids in layout".into()));
        }
        Ok(())
    }

    /// Parses the JSON document form `{"tokens":[{"id":0,"box":[x,y,w,h]},...]}`.
    pub fn from_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct RawEntry {
            id: usize,
            #[serde(rename = "box")]
            box_: [f64; 4],
        }
        #[derive(Deserialize)]
        struct RawSpec {
            tokens: Vec<RawEntry>,
        }
        let raw: RawSpec =
            serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
        LayoutSpec::new(
            raw.tokens
                .into_iter()
                .map(|e| {
                    (
                        e.id,
                        BoundingBox {
                            x: e.box_[0],
                            y: e.box_[1],
                            w: e.box_[2],
                            h: e.box_[3],
                        },
                    )
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Marks the cells whose centers lie inside the half-open box
/// `[x, x+w) x [y, y+h)`.
pub fn rasterize_mask(box_: &BoundingBox, height: usize, width: usize) -> Result<BinaryMask> {
    box_.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("grid dimensions must be positive".into()));
    }
    let mut values = Array2::zeros((height, width));
    let mut ones = 0usize;
    for r in 0..height {
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            let cy = (r as f64 + 0.5) / height as f64;
            if cx >= box_.x && cx < box_.x + box_.w && cy >= box_.y && cy < box_.y + box_.h {
                values[[r, c]] = 1.0;
                ones += 1;
            }
        }
    }
    if ones == 0 {
        return Err(Error::EmptyMask(box_.as_array(), height, width));
    }
    Ok(BinaryMask { values, ones })
}

/// Normalized squared distance from each in-mask cell center to the box
/// center: `d_u = (u_x - c_x)^2 / w + (u_y - c_y)^2 / h`, where `w`, `h` are
/// the box extents in normalized coordinates. The squared offsets are divided
/// by the first power of the extents. Out-of-mask cells hold `+inf`.
pub fn center_distance_field(
    box_: &BoundingBox,
    height: usize,
    width: usize,
) -> Result<Grid2> {
    let mask = rasterize_mask(box_, height, width)?;
    let (cx, cy) = box_.center();
    let mut d = Array2::from_elem((height, width), f64::INFINITY);
    for r in 0..height {
        for c in 0..width {
            if mask.contains(r, c) {
                let ux = (c as f64 + 0.5) / width as f64;
                let uy = (r as f64 + 0.5) / height as f64;
                d[[r, c]] = (ux - cx).powi(2) / box_.w + (uy - cy).powi(2) / box_.h;
            }
        }
    }
    Ok(d)
}

/// Center-weighted prior over a box's mask: `tau_u ∝ exp(-lambda * d_u)`,
/// normalized to sum to 1 over the mask and zero outside it.
pub fn nonlocal_prior(
    box_: &BoundingBox,
    height: usize,
    width: usize,
    lambda: f64,
) -> Result<TokenAttention> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
    }
    let d = center_distance_field(box_, height, width)?;
    // Out-of-mask cells carry an infinite sentinel; map them to zero mass
    // explicitly (0 * inf would be NaN at lambda = 0).
    let mut values = d.mapv(|du| if du.is_finite() { (-lambda * du).exp() } else { 0.0 });
    let total = values.sum();
    values /= total;
    Ok(TokenAttention {
        values,
        norm: Normalization::Masked,
    })
}

/// Numerically stable softmax over all grid cells.
pub fn spatial_softmax(logits: &Grid2, temperature: f64) -> Result<TokenAttention> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("logits must be finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut values = logits.mapv(|v| ((v - max) / temperature).exp());
    let total = values.sum();
    values /= total;
    Ok(TokenAttention {
        values,
        norm: Normalization::Global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn full_cover_box_rasterizes_to_all_ones() {
        let m = rasterize_mask(&box_(0.0, 0.0, 1.0, 1.0), 4, 4).unwrap();
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn quarter_box_covers_top_left_quadrant() {
        let m = rasterize_mask(&box_(0.0, 0.0, 0.5, 0.5), 4, 4).unwrap();
        assert_eq!(m.count(), 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.contains(r, c), r < 2 && c < 2, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn tiny_corner_box_hits_single_cell_on_fine_grid() {
        // On a 10x10 grid the cell (9, 9) center (0.95, 0.95) lies inside.
        let m = rasterize_mask(&box_(0.9, 0.9, 0.1, 0.1), 10, 10).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.contains(9, 9));
        // On a 4x4 grid no cell center falls inside [0.9, 1.0)^2 (the nearest
        // center is 0.875), so the cell-center rule reports a degenerate
        // pairing rather than snapping to the closest cell.
        assert!(matches!(
            rasterize_mask(&box_(0.9, 0.9, 0.1, 0.1), 4, 4),
            Err(Error::EmptyMask(..))
        ));
    }

    #[test]
    fn distance_field_is_zero_at_center() {
        // 1x1 grid, full box: the single cell center coincides with the box center.
        let d = center_distance_field(&box_(0.0, 0.0, 1.0, 1.0), 1, 1).unwrap();
        assert!(d[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn distance_field_corner_cell_value() {
        // Quarter box on 4x4: cell (0,0) center (0.125, 0.125), box center (0.25, 0.25).
        let d = center_distance_field(&box_(0.0, 0.0, 0.5, 0.5), 4, 4).unwrap();
        let expect = (0.125f64 - 0.25).powi(2) / 0.5 + (0.125f64 - 0.25).powi(2) / 0.5;
        assert!((d[[0, 0]] - expect).abs() < 1e-15);
        assert!((d[[0, 0]] - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn prior_with_zero_lambda_is_uniform() {
        let tau = nonlocal_prior(&box_(0.0, 0.0, 0.5, 0.5), 4, 4, 0.0).unwrap();
        let m = rasterize_mask(&box_(0.0, 0.0, 0.5, 0.5), 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if m.contains(r, c) { 0.25 } else { 0.0 };
                assert!((tau.values()[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_argmax_at_minimal_distance() {
        let b = box_(0.05, 0.05, 0.4, 0.4);
        let tau = nonlocal_prior(&b, 16, 16, 3.7).unwrap();
        let d = center_distance_field(&b, 16, 16).unwrap();
        let argmax_tau = tau
            .values()
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let min_d = d.iter().cloned().fold(f64::INFINITY, f64::min);
        // Ties in the distance field are possible; the argmax must sit at a
        // minimal-distance cell, not necessarily a unique one.
        assert!((d[argmax_tau] - min_d).abs() < 1e-15);
    }

    #[test]
    fn prior_two_cell_softmax_values() {
        // Distances (0, 0.0625) at lambda 4 give softmax of (0, -0.25).
        let z = (0.0f64).exp() + (-0.25f64).exp();
        let expect0 = 1.0 / z;
        let expect1 = (-0.25f64).exp() / z;
        // Hand-check the prior formula on the documented pair of distances.
        let t0 = (-4.0 * 0.0f64).exp();
        let t1 = (-4.0 * 0.0625f64).exp();
        let s = t0 + t1;
        assert!((t0 / s - expect0).abs() < 1e-12);
        assert!((t1 / s - expect1).abs() < 1e-12);
        assert!((expect0 - 0.5622).abs() < 5e-5);
        assert!((expect1 - 0.4378).abs() < 5e-5);
    }

    #[test]
    fn softmax_uniform_on_constant_logits() {
        let logits = Array2::from_elem((3, 3), 1.7);
        let a = spatial_softmax(&logits, 1.0).unwrap();
        for v in a.values() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_analytic_two_cell() {
        let logits = Array2::from_shape_vec((1, 2), vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let a = spatial_softmax(&logits, 1.0).unwrap();
        assert!((a.values()[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((a.values()[[0, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = Array2::from_shape_vec((2, 2), vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let shifted = logits.mapv(|v| v + 13.5);
        let a = spatial_softmax(&logits, 1.0).unwrap();
        let b = spatial_softmax(&shifted, 1.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_spec_parses_json() {
        let json = r#"{"tokens":[{"id":0,"box":[0.05,0.05,0.4,0.4]},{"id":1,"box":[0.55,0.55,0.4,0.4]}]}"#;
        let spec = LayoutSpec::from_json(json).unwrap();
        assert_eq!(spec.len(), 2);
        assert_eq!(spec.tokens[1].id, 1);
        assert!((spec.tokens[1].box_.x - 0.55).abs() < 1e-15);
    }

    #[test]
    fn layout_spec_rejects_duplicate_ids() {
        let json = r#"{"tokens":[{"id":0,"box":[0.0,0.0,0.5,0.5]},{"id":0,"box":[0.5,0.5,0.5,0.5]}]}"#;
        assert!(LayoutSpec::from_json(json).is_err());
    }

    #[test]
    fn degenerate_box_grid_pairing_errors() {
        // A sliver box that contains no cell centers on a coarse grid.
        let b = BoundingBox {
            x: 0.26,
            y: 0.26,
            w: 0.05,
            h: 0.05,
        };
        assert!(matches!(
            rasterize_mask(&b, 2, 2),
            Err(Error::EmptyMask(..))
        ));
    }
}
