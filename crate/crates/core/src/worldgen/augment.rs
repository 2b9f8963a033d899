use rand::Rng as _;

use crate::rng::Rng;

/// Top-left corner of the crop window inside the padded image, `(dy, dx)`,
/// each in `0..=2 * pad`.
pub fn random_offset(pad: usize, rng: &mut Rng) -> (usize, usize) {
    (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
}

/// Zero-pads every `h x w` plane by `pad` and crops an `h x w` window at
/// `offset`. Offset `(pad, pad)` is the identity.
pub fn crop_with_offset<T: Copy + Default>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    pad: usize,
    (dy, dx): (usize, usize),
) -> Vec<T> {
    debug_assert_eq!(src.len(), planes * h * w);
    let mut out = vec![T::default(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            // source row = y + dy - pad
            let Some(sy) = (y + dy).checked_sub(pad).filter(|&s| s < h) else {
                continue;
            };
            for x in 0..w {
                if let Some(sx) = (x + dx).checked_sub(pad).filter(|&s| s < w) {
                    out[(p * h + y) * w + x] = src[(p * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop of one `[C, H, W]` observation. Returns the offset so
/// the same shift can be applied to an accompanying relevance map.
pub fn augment_crop(
    obs: &[f32],
    [c, h, w]: [usize; 3],
    pad: usize,
    rng: &mut Rng,
) -> (Vec<f32>, (usize, usize)) {
    let off = random_offset(pad, rng);
    (crop_with_offset(obs, c, h, w, pad, off), off)
}
