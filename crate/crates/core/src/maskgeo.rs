//! Geometric descriptors of binary masks.
//!
//! Coordinates follow image convention: `x` is the column index, `y` the row
//! index, both 0-based pixel indices. Moments and the convex hull are taken
//! over pixel centers at integer coordinates. The foreground is treated as a
//! single region regardless of connectivity.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, {} fg)", self.height, self.width, self.count())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("mask must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::ShapeMismatch(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0);
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(x, y)));
            }
        }
        Self { height, width, values }
    }

    /// Foreground where `p >= threshold`.
    pub fn from_probs(height: usize, width: usize, probs: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), height * width);
        Self {
            height,
            width,
            values: probs.iter().map(|&p| u8::from(p >= threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn transformed(&self, t: ViewTransform) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: t.apply(&self.values, self.height, self.width),
        }
    }

    /// Threshold an 8-bit grayscale image: `>= 128` is foreground.
    pub fn from_luma(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] >= 128)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_luma(&img))
    }

    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }
}

/// Exact, self-inverse view transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewTransform {
    Identity,
    HFlip,
    VFlip,
    HvFlip,
}

impl ViewTransform {
    pub const ALL: [ViewTransform; 4] = [Self::Identity, Self::HFlip, Self::VFlip, Self::HvFlip];

    pub fn flips(self) -> (bool, bool) {
        match self {
            Self::Identity => (false, false),
            Self::HFlip => (true, false),
            Self::VFlip => (false, true),
            Self::HvFlip => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::HFlip => "h-flip",
            Self::VFlip => "v-flip",
            Self::HvFlip => "hv-flip",
        }
    }

    /// Apply to a row-major `height × width` grid (any number of channels
    /// stacked along the leading axis).
    pub fn apply<T: Copy>(self, data: &[T], height: usize, width: usize) -> Vec<T> {
        let (hf, vf) = self.flips();
        let plane = height * width;
        assert_eq!(data.len() % plane, 0);
        let mut out = Vec::with_capacity(data.len());
        for ch in data.chunks(plane) {
            for y in 0..height {
                let sy = if vf { height - 1 - y } else { y };
                for x in 0..width {
                    let sx = if hf { width - 1 - x } else { x };
                    out.push(ch[sy * width + sx]);
                }
            }
        }
        out
    }
}

/// Map a normalized centroid across a view transform (continuous frame:
/// a flip sends `c` to `1 - c`). Self-inverse.
pub fn map_centroid_between_views(c: (f64, f64), t: ViewTransform) -> (f64, f64) {
    let (hf, vf) = t.flips();
    (if hf { 1.0 - c.0 } else { c.0 }, if vf { 1.0 - c.1 } else { c.1 })
}

/// Map a centroid in the pixel-index convention of [`extract_geometry`]
/// across a view transform of a `width × height` grid. A flip sends pixel
/// `x` to `W-1-x`, so the normalized centroid goes to `(W-1)/W - c`.
/// Self-inverse; maps the descriptor of a flipped mask exactly back to the
/// descriptor of the original.
pub fn map_centroid_on_grid(c: (f64, f64), t: ViewTransform, width: usize, height: usize) -> (f64, f64) {
    let (hf, vf) = t.flips();
    let fx = (width as f64 - 1.0) / width as f64;
    let fy = (height as f64 - 1.0) / height as f64;
    (if hf { fx - c.0 } else { c.0 }, if vf { fy - c.1 } else { c.1 })
}

/// Nine normalized properties, 13 scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryDescriptor {
    pub area: f64,
    pub centroid: [f64; 2],
    pub bbox: [f64; 4],
    pub aspect_ratio: f64,
    pub perimeter: f64,
    pub compactness: f64,
    pub solidity: f64,
    pub eccentricity: f64,
    pub orientation: f64,
}

/// Number of named properties.
pub const N_GEO: usize = 9;
/// Number of regressed scalars.
pub const GEO_SCALARS: usize = 13;
/// Scalars per property, in [`GeometryDescriptor::to_vec`] order.
pub const GEO_BLOCKS: [usize; N_GEO] = [1, 2, 4, 1, 1, 1, 1, 1, 1];
pub const GEO_NAMES: [&str; N_GEO] = [
    "area",
    "centroid",
    "bbox",
    "aspect_ratio",
    "perimeter",
    "compactness",
    "solidity",
    "eccentricity",
    "orientation",
];

/// Offsets of each block in the flat 13-vector.
pub fn geo_block_offsets() -> [usize; N_GEO] {
    let mut out = [0; N_GEO];
    let mut acc = 0;
    for (o, s) in out.iter_mut().zip(GEO_BLOCKS) {
        *o = acc;
        acc += s;
    }
    out
}

impl Default for GeometryDescriptor {
    /// The empty-mask descriptor.
    fn default() -> Self {
        Self {
            area: 0.0,
            centroid: [0.5, 0.5],
            bbox: [0.0; 4],
            aspect_ratio: 1.0,
            perimeter: 0.0,
            compactness: 0.0,
            solidity: 0.0,
            eccentricity: 0.0,
            orientation: 0.0,
        }
    }
}

impl GeometryDescriptor {
    pub fn to_vec(&self) -> [f64; GEO_SCALARS] {
        [
            self.area,
            self.centroid[0],
            self.centroid[1],
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.aspect_ratio,
            self.perimeter,
            self.compactness,
            self.solidity,
            self.eccentricity,
            self.orientation,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), GEO_SCALARS);
        Self {
            area: v[0],
            centroid: [v[1], v[2]],
            bbox: [v[3], v[4], v[5], v[6]],
            aspect_ratio: v[7],
            perimeter: v[8],
            compactness: v[9],
            solidity: v[10],
            eccentricity: v[11],
            orientation: v[12],
        }
    }
}

/// Number of unit pixel edges separating foreground from background or from
/// the image border (4-connectivity).
pub fn boundary_edge_count(mask: &BinaryMask) -> usize {
    let (h, w) = (mask.height, mask.width);
    let mut edges = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            if x == 0 || !mask.get(x - 1, y) {
                edges += 1;
            }
            if x + 1 == w || !mask.get(x + 1, y) {
                edges += 1;
            }
            if y == 0 || !mask.get(x, y - 1) {
                edges += 1;
            }
            if y + 1 == h || !mask.get(x, y + 1) {
                edges += 1;
            }
        }
    }
    edges
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of integer points, counter-clockwise, collinear points dropped.
fn monotone_chain(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Area of the convex hull of foreground pixel centers. Collinear or single
/// pixel foreground returns the pixel count instead.
pub fn convex_hull_area(mask: &BinaryMask) -> Result<f64> {
    // Only the extreme pixels of each row can be hull vertices.
    let mut pts = Vec::new();
    for y in 0..mask.height {
        let row = &mask.values[y * mask.width..(y + 1) * mask.width];
        if let Some(l) = row.iter().position(|&v| v == 1) {
            let r = row.iter().rposition(|&v| v == 1).expect("row has a foreground pixel");
            pts.push((l as i64, y as i64));
            pts.push((r as i64, y as i64));
        }
    }
    if pts.is_empty() {
        return Err(Error::DegenerateInput("convex hull of an empty mask".into()));
    }
    let hull = monotone_chain(pts);
    if hull.len() < 3 {
        return Ok(mask.count() as f64);
    }
    let twice: i64 = (0..hull.len())
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    Ok(twice.abs() as f64 / 2.0)
}

/// Eccentricity and raw orientation (radians in `[-pi/2, pi/2]`) of the
/// moment-equivalent ellipse.
pub fn moments_ellipse(mask: &BinaryMask) -> Result<(f64, f64)> {
    let n = mask.count() as i128;
    if n == 0 {
        return Err(Error::DegenerateInput("moments of an empty mask".into()));
    }
    // Integer sums keep exact symmetry exact: n²·mu = n·Σxy − Σx·Σy.
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let (x, y) = (x as i128, y as i128);
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
        }
    }
    let scale = (n * n) as f64;
    let mu20 = (n * sxx - sx * sx) as f64 / scale;
    let mu02 = (n * syy - sy * sy) as f64 / scale;
    let mu11 = (n * sxy - sx * sy) as f64 / scale;
    let half_trace = 0.5 * (mu20 + mu02);
    let disc = (0.25 * (mu20 - mu02).powi(2) + mu11 * mu11).sqrt();
    let (l1, l2) = (half_trace + disc, half_trace - disc);
    if l1 <= 0.0 || l1 == l2 {
        return Ok((0.0, 0.0));
    }
    let ecc = (1.0 - (l2 / l1).max(0.0)).sqrt().min(1.0);
    let theta = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
    Ok((ecc, theta))
}

/// Normalize a raw orientation from `[-pi/2, pi/2]` to `[0, 1]`.
pub fn normalize_orientation(theta: f64) -> f64 {
    ((theta + PI / 2.0) / PI).clamp(0.0, 1.0)
}

pub fn extract_geometry(mask: &BinaryMask) -> GeometryDescriptor {
    let a = mask.count();
    if a == 0 {
        return GeometryDescriptor::default();
    }
    let (h, w) = (mask.height as f64, mask.width as f64);
    let af = a as f64;
    let (mut sx, mut sy) = (0usize, 0usize);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                sx += x;
                sy += y;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let w_box = (x1 - x0 + 1) as f64;
    let h_box = (y1 - y0 + 1) as f64;
    let edges = boundary_edge_count(mask) as f64;
    let hull = convex_hull_area(mask).expect("non-empty mask");
    let (ecc, theta) = moments_ellipse(mask).expect("non-empty mask");
    GeometryDescriptor {
        area: af / (h * w),
        centroid: [sx as f64 / (w * af), sy as f64 / (h * af)],
        bbox: [x0 as f64 / w, y0 as f64 / h, x1 as f64 / w, y1 as f64 / h],
        aspect_ratio: (w_box / h_box).min(10.0) / 10.0,
        perimeter: edges / (2.0 * (h + w)),
        compactness: (4.0 * PI * af / (edges * edges)).min(1.0),
        solidity: (af / hull).min(1.0),
        eccentricity: ecc,
        orientation: normalize_orientation(theta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
    }

    #[test]
    fn empty_mask_gets_default_descriptor() {
        let g = extract_geometry(&BinaryMask::zeros(64, 64));
        assert_eq!(g.centroid, [0.5, 0.5]);
        assert_eq!(g.aspect_ratio, 1.0);
        assert_eq!(g, GeometryDescriptor::default());
    }

    #[test]
    fn full_mask() {
        let m = BinaryMask::from_fn(384, 384, |_, _| true);
        let g = extract_geometry(&m);
        assert_eq!(g.area, 1.0);
        assert!((g.centroid[0] - 383.0 / 2.0 / 384.0).abs() < 1e-15);
        assert!((g.centroid[0] - 0.49870).abs() < 1e-5);
        assert_eq!(g.perimeter, 1.0);
    }

    #[test]
    fn ten_by_ten_square() {
        let m = rect(100, 100, 30, 40, 10, 10);
        let g = extract_geometry(&m);
        assert_eq!(g.area, 0.01);
        assert_eq!(boundary_edge_count(&m), 40);
        assert_eq!(g.perimeter, 0.1);
        assert!((g.compactness - PI / 4.0).abs() < 1e-12);
        assert!((g.compactness - 0.78540).abs() < 1e-5);
    }

    #[test]
    fn edge_counts() {
        let mut single = BinaryMask::zeros(5, 5);
        single.set(2, 2, true);
        assert_eq!(boundary_edge_count(&single), 4);
        assert_eq!(boundary_edge_count(&rect(20, 30, 3, 4, 7, 5)), 2 * (7 + 5));
        assert_eq!(boundary_edge_count(&BinaryMask::zeros(8, 8)), 0);
        let mut corner = BinaryMask::zeros(5, 5);
        corner.set(0, 0, true);
        assert_eq!(boundary_edge_count(&corner), 4);
    }

    #[test]
    fn hull_cases() {
        let mut single = BinaryMask::zeros(5, 5);
        single.set(1, 3, true);
        assert_eq!(convex_hull_area(&single).unwrap(), 1.0);
        assert_eq!(extract_geometry(&single).solidity, 1.0);

        let line = rect(10, 10, 2, 5, 6, 1);
        assert_eq!(convex_hull_area(&line).unwrap(), 6.0);
        assert_eq!(extract_geometry(&line).solidity, 1.0);

        let r = rect(40, 40, 5, 5, 12, 8);
        assert_eq!(convex_hull_area(&r).unwrap(), 11.0 * 7.0);
        let s = extract_geometry(&r).solidity;
        assert!((0.95..=1.0).contains(&s));

        let l_shape = BinaryMask::from_fn(40, 40, |x, y| (x < 10 && y < 10) || (x >= 10 && x < 20 && (9..19).contains(&y)));
        assert!(extract_geometry(&l_shape).solidity < 0.8);

        assert!(matches!(convex_hull_area(&BinaryMask::zeros(3, 3)), Err(Error::DegenerateInput(_))));
        assert!(matches!(moments_ellipse(&BinaryMask::zeros(3, 3)), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ellipse_moments() {
        let disc = BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 31.5, y as f64 - 31.5);
            dx * dx + dy * dy <= 400.0
        });
        assert!(moments_ellipse(&disc).unwrap().0 <= 0.05);

        let bar = rect(64, 64, 10, 30, 40, 4);
        let (ecc, theta) = moments_ellipse(&bar).unwrap();
        assert!(ecc > 0.9);
        assert!(theta.abs() < 1e-12);

        let square = rect(32, 32, 4, 4, 10, 10);
        assert_eq!(moments_ellipse(&square).unwrap(), (0.0, 0.0));
        assert_eq!(extract_geometry(&square).orientation, 0.5);

        let vbar = rect(64, 64, 30, 10, 4, 40);
        let (_, theta) = moments_ellipse(&vbar).unwrap();
        assert!((theta.abs() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_mapping() {
        use ViewTransform::*;
        assert_eq!(map_centroid_between_views((0.3, 0.7), HFlip), (0.7, 0.7));
        for t in ViewTransform::ALL {
            assert_eq!(map_centroid_between_views((0.5, 0.5), t), (0.5, 0.5));
        }
        let (x, y) = map_centroid_between_views((0.2, 0.9), HvFlip);
        assert!((x - 0.8).abs() < 1e-15 && (y - 0.1).abs() < 1e-15);
        for t in ViewTransform::ALL {
            let c = (0.3125, 0.8125);
            assert_eq!(map_centroid_between_views(map_centroid_between_views(c, t), t), c);
            assert_eq!(map_centroid_on_grid(map_centroid_on_grid(c, t, 64, 32), t, 64, 32), c);
        }
    }

    #[test]
    fn grid_mapping_recovers_original_centroid() {
        let m = BinaryMask::from_fn(48, 64, |x, y| (x * 7 + y * 3) % 11 < 4 && x > 5 && y < 40);
        let g = extract_geometry(&m);
        for t in ViewTransform::ALL {
            let gt = extract_geometry(&m.transformed(t));
            let back = map_centroid_on_grid((gt.centroid[0], gt.centroid[1]), t, 64, 48);
            assert!((back.0 - g.centroid[0]).abs() < 1e-12);
            assert!((back.1 - g.centroid[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_validation() {
        assert!(BinaryMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(BinaryMask::new(2, 2, vec![0, 1, 1]).is_err());
        assert!(BinaryMask::new(0, 2, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![0, 1, 1, 0]).is_ok());
    }

    #[test]
    fn transforms_are_involutions() {
        let m = BinaryMask::from_fn(7, 9, |x, y| (x + 2 * y) % 5 == 0);
        for t in ViewTransform::ALL {
            assert_eq!(m.transformed(t).transformed(t), m);
        }
    }

    #[test]
    fn block_layout() {
        assert_eq!(GEO_BLOCKS.iter().sum::<usize>(), GEO_SCALARS);
        assert_eq!(geo_block_offsets(), [0, 1, 3, 7, 8, 9, 10, 11, 12]);
        let g = extract_geometry(&rect(20, 20, 2, 3, 5, 9));
        assert_eq!(GeometryDescriptor::from_slice(&g.to_vec()), g);
    }
}
