use super::factors::{
    background_rgb, MemberFactors, SharedFactors, Tint, PALETTE_RGB, QUADRANTS, SCALES, SHADES, SHAPES, STYLES,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest supported image side; below it the scales stop being distinct.
pub const MIN_IMAGE_SIZE: usize = 16;

/// Half-extent of a shape in pixels.
pub fn radius(size: usize, scale: usize) -> i64 {
    let q = (size / 2) as i64;
    q * (scale as i64 + 2) / 8
}

/// Pixel center of a quadrant (0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right).
pub fn quadrant_center(size: usize, quadrant: usize) -> (i64, i64) {
    let q = (size / 2) as i64;
    let (qx, qy) = ((quadrant % 2) as i64, (quadrant / 2) as i64);
    (qx * q + q / 2, qy * q + q / 2)
}

fn inside(shape: usize, r: i64, dx: i64, dy: i64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= r,
        // apex up, base on the row dy = r
        2 => dy <= r && 2 * dx.abs() <= dy + r,
        _ => {
            let a = (r / 3).max(1);
            (dx.abs() <= a && dy.abs() <= r) || (dy.abs() <= a && dx.abs() <= r)
        }
    }
}

/// Whether pixel `(dx, dy)` relative to the center is drawn.
pub fn covers(shape: usize, style: usize, r: i64, dx: i64, dy: i64) -> bool {
    if !inside(shape, r, dx, dy) {
        return false;
    }
    style == 0 || [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(ox, oy)| !inside(shape, r, dx + ox, dy + oy))
}

/// Foreground mask of one member, row-major `size × size`, with the center
/// shifted by `(ox, oy)`.
pub fn shape_mask(size: usize, shared: SharedFactors, member: MemberFactors, ox: i64, oy: i64) -> Vec<bool> {
    let r = radius(size, member.scale);
    let (cx, cy) = quadrant_center(size, member.quadrant);
    let (cx, cy) = (cx + ox, cy + oy);
    let mut m = vec![false; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            m[(y as usize) * size + x as usize] = covers(shared.shape, shared.style, r, x - cx, y - cy);
        }
    }
    m
}

/// Renders one member as `[3, size, size]` in `[-1, 1]`.
pub fn render_member<S: Scalar>(size: usize, shared: SharedFactors, tint: Tint, member: MemberFactors) -> Tensor<S> {
    let mask = shape_mask(size, shared, member, 0, 0);
    let bg = background_rgb(member.shade, tint);
    let fg = PALETTE_RGB[shared.palette];
    let plane = size * size;
    Tensor::from_fn([3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        S::lit(if mask[p] { fg[c] } else { bg[c] } as f64)
    })
}

/// Factors recovered from an image, with a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub shared: SharedFactors,
    pub member: MemberFactors,
    pub tint: Tint,
    /// Best template IoU; 1.0 for an exact render, 0.0 when no foreground
    /// was found.
    pub confidence: f64,
}

impl Decoded {
    /// Slot values in caption order.
    pub fn values(&self) -> [usize; 6] {
        [
            self.shared.shape,
            self.shared.palette,
            self.shared.style,
            self.member.quadrant,
            self.member.scale,
            self.member.shade,
        ]
    }
}

/// Below this, a decode is treated as unreliable.
pub const LOW_CONFIDENCE: f64 = 0.5;

fn dist2(a: [f64; 3], b: [f32; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c] as f64).powi(2)).sum()
}

fn nearest(x: [f64; 3], table: &[[f32; 3]]) -> (usize, f64) {
    table
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, dist2(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Nearest-factor decode of a `[3, S, S]` image.
///
/// The background is the per-channel median color matched to the nearest
/// shade and tint. Foreground pixels are those closer to some palette color
/// than to the background. The palette is nearest to their mean color, the
/// quadrant is read off their centroid, and shape, style and scale come from
/// the best IoU against every template within ±2 pixels of the quadrant
/// center.
pub fn factor_oracle_decode<S: Scalar>(image: &Tensor<S>) -> Decoded {
    let size = image.shape().get(1).copied().unwrap_or(0);
    let plane = size * size;
    let px = |p: usize| -> [f64; 3] {
        let d = image.data();
        [d[p].as_f64(), d[plane + p].as_f64(), d[2 * plane + p].as_f64()]
    };

    let mut median = [0.0; 3];
    for (c, m) in median.iter_mut().enumerate() {
        let mut v: Vec<f64> = image.data()[c * plane..(c + 1) * plane].iter().map(|x| x.as_f64()).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        *m = v.get(v.len() / 2).copied().unwrap_or(0.0);
    }
    let backgrounds: Vec<[f32; 3]> =
        Tint::ALL.iter().flat_map(|&t| (0..SHADES.len()).map(move |s| background_rgb(s, t))).collect();
    let (bg_idx, _) = nearest(median, &backgrounds);
    let tint = Tint::ALL[bg_idx / SHADES.len()];
    let shade = bg_idx % SHADES.len();
    let bg = backgrounds[bg_idx];

    let mut fg = vec![false; plane];
    let mut sum = [0.0; 3];
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for (p, slot) in fg.iter_mut().enumerate() {
        let x = px(p);
        if nearest(x, &PALETTE_RGB).1 < dist2(x, bg) {
            *slot = true;
            (0..3).for_each(|c| sum[c] += x[c]);
            sx += (p % size) as f64;
            sy += (p / size) as f64;
            count += 1;
        }
    }
    let default = Decoded {
        shared: SharedFactors { shape: 0, palette: 0, style: 0 },
        member: MemberFactors { quadrant: 0, scale: 0, shade },
        tint,
        confidence: 0.0,
    };
    if count == 0 || size < 2 {
        return default;
    }
    let mean = sum.map(|s| s / count as f64);
    let palette = nearest(mean, &PALETTE_RGB).0;
    let half = (size / 2) as f64;
    let (mx, my) = (sx / count as f64, sy / count as f64);
    let quadrant = usize::from(mx >= half) + 2 * usize::from(my >= half);

    let mut best = (0.0, 0, 0, 0);
    for shape in 0..SHAPES.len() {
        for style in 0..STYLES.len() {
            for scale in 0..SCALES {
                let shared = SharedFactors { shape, palette, style };
                let member = MemberFactors { quadrant, scale, shade };
                for oy in -2..=2 {
                    for ox in -2..=2 {
                        let t = shape_mask(size, shared, member, ox, oy);
                        let inter = t.iter().zip(&fg).filter(|(a, b)| **a && **b).count();
                        let union = t.iter().zip(&fg).filter(|(a, b)| **a || **b).count();
                        let iou = inter as f64 / union.max(1) as f64;
                        if iou > best.0 {
                            best = (iou, shape, style, scale);
                        }
                    }
                }
            }
        }
    }
    debug_assert!(quadrant < QUADRANTS);
    Decoded {
        shared: SharedFactors { shape: best.1, palette, style: best.2 },
        member: MemberFactors { quadrant, scale: best.3, shade },
        tint,
        confidence: best.0,
    }
}
