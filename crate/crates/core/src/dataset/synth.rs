//! Seeded papyrus-like images: a slow colour gradient, fibrous value-noise
//! texture, and dark ink strokes arranged in lines.
//!
//! Output is quantized to 8-bit levels so a PNG round trip is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{quantize, RgbImage};

const WIDTH: usize = 768;
const HEIGHT: usize = 1280;

/// `n_images` images of 768×1280. Image `i` depends only on `(seed, i)`.
pub fn synth_corpus(n_images: usize, seed: u64) -> Vec<RgbImage> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|_| synth_image(seeds.gen(), WIDTH, HEIGHT))
        .collect()
}

/// Smoothly interpolated lattice noise in [-1, 1].
struct ValueNoise {
    cols: usize,
    step_x: f32,
    step_y: f32,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(
        rng: &mut impl Rng,
        width: usize,
        height: usize,
        step_x: std::ops::Range<f32>,
        step_y: std::ops::Range<f32>,
    ) -> Self {
        let (step_x, step_y) = (rng.gen_range(step_x), rng.gen_range(step_y));
        let cols = (width as f32 / step_x).ceil() as usize + 2;
        let rows = (height as f32 / step_y).ceil() as usize + 2;
        let lattice = (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ValueNoise {
            cols,
            step_x,
            step_y,
            lattice,
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let (fx, fy) = (x as f32 / self.step_x, y as f32 / self.step_y);
        let (ix, iy) = (fx as usize, fy as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f32), smooth(fy - iy as f32));
        let v = |i: usize, j: usize| self.lattice[j * self.cols + i];
        let top = v(ix, iy) + (v(ix + 1, iy) - v(ix, iy)) * tx;
        let bottom = v(ix, iy + 1) + (v(ix + 1, iy + 1) - v(ix, iy + 1)) * tx;
        top + (bottom - top) * ty
    }
}

pub fn synth_image(seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // base tint, warm and varied per image
    let lum: f32 = rng.gen_range(0.45..0.85);
    let base = [
        lum,
        lum * rng.gen_range(0.72..0.95),
        lum * rng.gen_range(0.40..0.75),
    ];
    let corners: Vec<[f32; 3]> = (0..4)
        .map(|_| {
            let shade = rng.gen_range(-0.10..0.10);
            [0, 1, 2].map(|c| base[c] + shade + rng.gen_range(-0.04..0.04))
        })
        .collect();

    let fibres_h = ValueNoise::new(&mut rng, width, height, 40.0..64.0, 4.0..7.0);
    let fibres_v = ValueNoise::new(&mut rng, width, height, 4.0..7.0, 40.0..64.0);
    let blotches = ValueNoise::new(&mut rng, width, height, 9.0..14.0, 9.0..14.0);
    let amp_h: f32 = rng.gen_range(0.05..0.09);
    let amp_v: f32 = rng.gen_range(0.03..0.06);
    let amp_b: f32 = rng.gen_range(0.04..0.07);
    let tint = [1.0, rng.gen_range(0.85..1.0), rng.gen_range(0.6..0.9)];

    let (wf, hf) = ((width.max(2) - 1) as f32, (height.max(2) - 1) as f32);
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        let (u, v) = (x as f32 / wf, y as f32 / hf);
        let texture = amp_h * fibres_h.at(x, y) + amp_v * fibres_v.at(x, y) + amp_b * blotches.at(x, y);
        [0, 1, 2].map(|c| {
            let top = corners[0][c] + (corners[1][c] - corners[0][c]) * u;
            let bottom = corners[2][c] + (corners[3][c] - corners[2][c]) * u;
            top + (bottom - top) * v + texture * tint[c]
        })
    });

    draw_writing(&mut img, &mut rng);

    for v in img.data_mut() {
        *v = quantize(*v) as f32 / 255.0;
    }
    img
}

/// Lines of short ink strokes, loosely like handwriting.
fn draw_writing(img: &mut RgbImage, rng: &mut impl Rng) {
    let ink = [
        rng.gen_range(0.08..0.2),
        rng.gen_range(0.05..0.14),
        rng.gen_range(0.03..0.10),
    ];
    let line_gap: f32 = rng.gen_range(34.0..58.0);
    let margin = rng.gen_range(10.0..40.0);
    let (w, h) = (img.width() as f32, img.height() as f32);
    let mut y = margin + rng.gen_range(0.0..line_gap);
    while y < h - margin {
        let mut x = margin + rng.gen_range(0.0..30.0);
        let slope: f32 = rng.gen_range(-0.02..0.02);
        while x < w - margin {
            // a "word" of a few strokes, then a gap
            let strokes = rng.gen_range(2..7);
            for _ in 0..strokes {
                let len: f32 = rng.gen_range(6.0..18.0);
                let angle: f32 = rng.gen_range(-1.9f32..-1.2f32);
                let bend: f32 = rng.gen_range(-5.0..5.0);
                let radius: f32 = rng.gen_range(1.0..2.2);
                let base_y = y + slope * x;
                let p0 = (x, base_y + rng.gen_range(-3.0..3.0));
                let p2 = (p0.0 + len * angle.cos(), p0.1 + len * angle.sin());
                let p1 = ((p0.0 + p2.0) / 2.0 + bend, (p0.1 + p2.1) / 2.0);
                stroke(img, p0, p1, p2, radius, ink);
                x += rng.gen_range(4.0..9.0);
            }
            x += rng.gen_range(10.0..28.0);
        }
        y += line_gap * rng.gen_range(0.85..1.15);
    }
}

fn stroke(img: &mut RgbImage, p0: (f32, f32), p1: (f32, f32), p2: (f32, f32), radius: f32, ink: [f32; 3]) {
    let steps = 16;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let a = (1.0 - t) * (1.0 - t);
        let b = 2.0 * (1.0 - t) * t;
        let c = t * t;
        let cx = a * p0.0 + b * p1.0 + c * p2.0;
        let cy = a * p0.1 + b * p1.1 + c * p2.1;
        let r = radius.ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                if px < 0 || py < 0 || px >= img.width() as i64 || py >= img.height() as i64 {
                    continue;
                }
                let d = ((px as f32 - cx).powi(2) + (py as f32 - cy).powi(2)).sqrt();
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0) * 0.85;
                if cover > 0.0 {
                    let old = img.get(px as usize, py as usize);
                    img.set(
                        px as usize,
                        py as usize,
                        [0, 1, 2].map(|ch| old[ch].min(old[ch] * (1.0 - cover) + ink[ch] * cover)),
                    );
                }
            }
        }
    }
}
