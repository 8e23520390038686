//! Patch cropping for the pair branch and ROI max pooling for the context
//! branch.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::types::BoundingBox;

/// Bilinear crop of `region` resized to `size x size`. Sample points are
/// pixel centres of the output grid mapped into the region; reads outside
/// the image clamp to the border.
pub fn crop_resize(image: ArrayView3<f32>, region: &BoundingBox, size: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, size, size));
    let sx = region.width() / size as f64;
    let sy = region.height() / size as f64;
    for oy in 0..size {
        let fy = (region.y_min + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..size {
            let fx = (region.x_min + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let v = |y: usize, x: usize| f64::from(image[[ch, y, x]]);
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                out[[ch, oy, ox]] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Person crops and the tight union crop, each `size x size`.
pub fn crop_patches(
    image: ArrayView3<f32>,
    b1: &BoundingBox,
    b2: &BoundingBox,
    size: usize,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    (crop_resize(image, b1, size), crop_resize(image, b2, size), crop_resize(image, &b1.union(b2), size))
}

/// Scales an image-space box into feature-map cells.
pub fn to_feature_coords(region: &BoundingBox, stride: usize) -> BoundingBox {
    let s = stride as f64;
    BoundingBox { x_min: region.x_min / s, y_min: region.y_min / s, x_max: region.x_max / s, y_max: region.y_max / s }
}

/// Output of [`roi_pool`] plus the flat input index each cell came from.
#[derive(Debug, Clone)]
pub struct RoiPooled {
    pub values: Array3<f64>,
    pub argmax: Vec<usize>,
}

/// Max pooling of `region` (feature-map coordinates) into a
/// `grid_h x grid_w` grid.
///
/// The region snaps outward to whole cells (floor of the start, ceil of
/// the end) and is clipped to the map. Bin `i` of a span of `n` cells
/// covers `[floor(i n / g), ceil((i + 1) n / g))`; a bin that would be
/// empty takes the nearest cell.
pub fn roi_pool(feature_map: ArrayView3<f64>, region: &BoundingBox, grid: (usize, usize)) -> Result<RoiPooled> {
    let (c, h, w) = feature_map.dim();
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::DimensionMismatch("ROI grid must be positive".into()));
    }
    let x0 = region.x_min.floor().max(0.0);
    let y0 = region.y_min.floor().max(0.0);
    let x1 = region.x_max.ceil().min(w as f64);
    let y1 = region.y_max.ceil().min(h as f64);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::RegionOutsideMap);
    }
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    let bins = |start: usize, len: usize, g: usize| -> Vec<(usize, usize)> {
        (0..g)
            .map(|i| {
                let lo = start + (i * len) / g;
                let hi = start + ((i + 1) * len).div_ceil(g);
                let lo = lo.min(start + len - 1);
                (lo, hi.max(lo + 1))
            })
            .collect()
    };
    let rows = bins(y0, y1 - y0, gh);
    let cols = bins(x0, x1 - x0, gw);

    let mut values = Array3::zeros((c, gh, gw));
    let mut argmax = Vec::with_capacity(c * gh * gw);
    for ch in 0..c {
        for (by, &(ylo, yhi)) in rows.iter().enumerate() {
            for (bx, &(xlo, xhi)) in cols.iter().enumerate() {
                let mut best = (ylo, xlo);
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        if feature_map[[ch, y, x]] > feature_map[[ch, best.0, best.1]] {
                            best = (y, x);
                        }
                    }
                }
                values[[ch, by, bx]] = feature_map[[ch, best.0, best.1]];
                argmax.push((ch * h + best.0) * w + best.1);
            }
        }
    }
    Ok(RoiPooled { values, argmax })
}

/// Scatters pooled-cell gradients back onto the feature map.
pub fn roi_pool_backward(d_pooled: &[f64], argmax: &[usize], d_map: &mut Array3<f64>) {
    let flat = d_map.as_slice_mut().expect("standard layout");
    for (&g, &i) in d_pooled.iter().zip(argmax) {
        flat[i] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::from([x0, y0, x1, y1])
    }

    #[test]
    fn constant_crop_stays_constant() {
        let img = Array3::<f32>::from_elem((3, 20, 30), 0.25);
        let patch = crop_resize(img.view(), &bb(3.3, 2.0, 17.9, 11.0), 7);
        assert!(patch.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn identical_boxes_share_union_patch() {
        let img = Array::from_shape_fn((3, 16, 16), |(c, y, x)| (c * 100 + y * 16 + x) as f32 / 1000.0);
        let b = bb(2.0, 3.0, 9.0, 12.0);
        let (p1, p2, pu) = crop_patches(img.view(), &b, &b, 5);
        assert_eq!(p1, pu);
        assert_eq!(p1, p2);
        assert_eq!(bb(0.0, 0.0, 10.0, 10.0).union(&bb(90.0, 90.0, 100.0, 100.0)), bb(0.0, 0.0, 100.0, 100.0));
    }

    #[test]
    fn crop_at_native_resolution_copies_pixels() {
        let img = Array::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as f32);
        let patch = crop_resize(img.view(), &bb(2.0, 1.0, 6.0, 5.0), 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(patch[[0, y, x]], f64::from(img[[0, y + 1, x + 2]]));
            }
        }
    }

    #[test]
    fn roi_pool_examples() {
        let map = Array::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x + 1) as f64);
        let full = bb(0.0, 0.0, 4.0, 4.0);
        let pooled = roi_pool(map.view(), &full, (2, 2)).unwrap();
        assert_eq!(pooled.values.iter().copied().collect::<Vec<_>>(), vec![6.0, 8.0, 14.0, 16.0]);

        let identity = roi_pool(map.view(), &full, (4, 4)).unwrap();
        assert_eq!(identity.values, map);

        let constant = Array3::from_elem((2, 5, 5), 3.5);
        let pooled = roi_pool(constant.view(), &bb(0.3, 1.2, 4.1, 3.3), (3, 2)).unwrap();
        assert!(pooled.values.iter().all(|&v| v == 3.5));

        assert!(matches!(roi_pool(map.view(), &bb(5.0, 5.0, 7.0, 7.0), (2, 2)), Err(Error::RegionOutsideMap)));
    }

    #[test]
    fn roi_pool_covers_snapped_region() {
        let map = Array::from_shape_fn((2, 6, 7), |(c, y, x)| ((c * 31 + y * 7 + x * 13) % 17) as f64);
        for region in [bb(0.0, 0.0, 7.0, 6.0), bb(1.5, 0.2, 5.1, 4.0), bb(2.0, 2.0, 3.0, 3.0)] {
            let pooled = roi_pool(map.view(), &region, (3, 3)).unwrap();
            let (x0, y0) = (region.x_min.floor() as usize, region.y_min.floor() as usize);
            let (x1, y1) = (region.x_max.ceil() as usize, region.y_max.ceil() as usize);
            for c in 0..2 {
                let mut region_max = f64::NEG_INFINITY;
                for y in y0..y1 {
                    for x in x0..x1 {
                        region_max = region_max.max(map[[c, y, x]]);
                    }
                }
                let pooled_max = pooled.values.index_axis(ndarray::Axis(0), c).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                assert_eq!(pooled_max, region_max);
            }
            for &i in &pooled.argmax {
                let (y, x) = ((i % 42) / 7, i % 7);
                assert!((y0..y1).contains(&y) && (x0..x1).contains(&x));
            }
        }
    }

    #[test]
    fn backward_scatters_to_argmax() {
        let map = Array::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x + 1) as f64);
        let pooled = roi_pool(map.view(), &bb(0.0, 0.0, 4.0, 4.0), (2, 2)).unwrap();
        let mut d = Array3::zeros((1, 4, 4));
        roi_pool_backward(&[1.0, 2.0, 3.0, 4.0], &pooled.argmax, &mut d);
        assert_eq!(d[[0, 1, 1]], 1.0);
        assert_eq!(d[[0, 3, 3]], 4.0);
        assert_eq!(d.sum(), 10.0);
    }

    #[test]
    fn feature_coords_scale_by_stride() {
        assert_eq!(to_feature_coords(&bb(8.0, 4.0, 16.0, 12.0), 4), bb(2.0, 1.0, 4.0, 3.0));
    }
}
