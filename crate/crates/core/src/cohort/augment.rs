use rand::Rng as _;

use crate::seed::Rng;

use super::{Image, ImagePair};

/// One sampled geometric transform: optional horizontal flip, rotation about
/// the image centre (bilinear, zero fill) and an integer shift (zero fill),
/// applied in that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub shift: (i32, i32),
}

impl AugmentParams {
    pub const MAX_ANGLE_DEG: f64 = 10.0;
    pub const MAX_SHIFT: i32 = 2;

    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            angle_deg: 0.0,
            shift: (0, 0),
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        AugmentParams {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG),
            shift: (
                rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
                rng.random_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            ),
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        if self.flip {
            out = flip_horizontal(&out);
        }
        if self.angle_deg != 0.0 {
            out = rotate(&out, self.angle_deg);
        }
        if self.shift != (0, 0) {
            out = shift(&out, self.shift);
        }
        out
    }
}

pub(crate) fn flip_horizontal(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(img.width) {
        data.extend(row.iter().rev());
    }
    Image::new(img.height, img.width, data)
}

fn rotate(img: &Image, angle_deg: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let sample = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.at(y as usize, x as usize) as f64
        }
    };
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source location
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = sample(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + sample(y0, x0 + 1) * fx * (1.0 - fy)
                + sample(y0 + 1, x0) * (1.0 - fx) * fy
                + sample(y0 + 1, x0 + 1) * fx * fy;
            data.push(v as f32);
        }
    }
    Image::new(h, w, data)
}

fn shift(img: &Image, (sx, sy): (i32, i32)) -> Image {
    let (h, w) = (img.height as isize, img.width as isize);
    let mut data = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let (srcx, srcy) = (x - sx as isize, y - sy as isize);
            if srcx >= 0 && srcy >= 0 && srcx < w && srcy < h {
                data[(y * w + x) as usize] = img.at(srcy as usize, srcx as usize);
            }
        }
    }
    Image::new(img.height, img.width, data)
}

/// Apply one transform to both images of a pair.
pub fn augment_pair_with(pair: &ImagePair, params: &AugmentParams) -> ImagePair {
    ImagePair {
        x_t: params.apply(&pair.x_t),
        x_s: params.apply(&pair.x_s),
        ..pair.clone()
    }
}

/// Sample a transform and apply it identically to `x_t` and `x_s`, so the
/// pair's difference reflects anatomy change rather than augmentation.
pub fn augment_pair(pair: &ImagePair, rng: &mut Rng) -> (ImagePair, AugmentParams) {
    let params = AugmentParams::sample(rng);
    (augment_pair_with(pair, &params), params)
}
