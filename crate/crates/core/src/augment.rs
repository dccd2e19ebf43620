//! Cutout on multi-camera image sets.
//!
//! Hole centers come from a splitmix64 stream seeded per image with
//! `seed ^ (i * 0x9E3779B97F4A7C15)`; hole `k` takes the `2k`-th and
//! `2k+1`-th outputs as `(cy mod h, cx mod w)`. The hole covers rows
//! `[cy - hole_h/2, cy + hole_h/2)` and columns likewise, clipped to the
//! image.

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Stream for image `i`.
    pub fn for_image(seed: u64, image: u64) -> Self {
        SplitMix64::new(seed ^ image.wrapping_mul(GOLDEN_GAMMA))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// `n` images of `h x w x ch` bytes, laid out `[image][row][col][channel]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    n: usize,
    h: usize,
    w: usize,
    ch: usize,
    data: Vec<u8>,
}

impl ImageSet {
    pub fn new(n: usize, h: usize, w: usize, ch: usize, data: Vec<u8>) -> Result<Self> {
        if [n, h, w, ch].contains(&0) {
            return Err(OccError::invalid(
                "image set",
                format!("dims {n}x{h}x{w}x{ch} must all be >= 1"),
            ));
        }
        if data.len() != n * h * w * ch {
            return Err(OccError::Shape(format!(
                "image set {n}x{h}x{w}x{ch} with {} bytes",
                data.len()
            )));
        }
        Ok(ImageSet { n, h, w, ch, data })
    }

    /// `(n, h, w, ch)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.ch)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.h * self.w * self.ch;
        &self.data[i * size..(i + 1) * size]
    }

    pub fn pixel(&self, i: usize, y: usize, x: usize) -> &[u8] {
        let o = ((i * self.h + y) * self.w + x) * self.ch;
        &self.data[o..o + self.ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoutSpec {
    pub num_holes: usize,
    pub hole_h: usize,
    pub hole_w: usize,
    pub fill: u8,
    pub seed: u64,
}

impl CutoutSpec {
    pub fn new(num_holes: usize, hole_h: usize, hole_w: usize, fill: u8, seed: u64) -> Result<Self> {
        if hole_h == 0 || hole_w == 0 {
            return Err(OccError::invalid(
                "cutout spec",
                format!("hole {hole_h}x{hole_w} must be at least 1x1"),
            ));
        }
        Ok(CutoutSpec {
            num_holes,
            hole_h,
            hole_w,
            fill,
            seed,
        })
    }

    /// One hole of `fraction` of each image dimension (at least one pixel).
    pub fn relative(
        h: usize,
        w: usize,
        num_holes: usize,
        fraction: f64,
        fill: u8,
        seed: u64,
    ) -> Result<Self> {
        if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
            return Err(OccError::invalid(
                "cutout spec",
                format!("size fraction {fraction} outside (0, 1]"),
            ));
        }
        let side = |d: usize| ((d as f64 * fraction).floor() as usize).max(1);
        CutoutSpec::new(num_holes, side(h), side(w), fill, seed)
    }
}

/// Half-open pixel rectangle `rows x cols`, already clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hole {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

fn clip(center: u64, extent: usize, limit: usize) -> (usize, usize) {
    let start = center as i64 - (extent / 2) as i64;
    let end = start + extent as i64;
    (start.clamp(0, limit as i64) as usize, end.clamp(0, limit as i64) as usize)
}

/// Holes for image `image` of an `h x w` set, in draw order.
pub fn holes_for_image(spec: &CutoutSpec, image: usize, h: usize, w: usize) -> Vec<Hole> {
    let mut rng = SplitMix64::for_image(spec.seed, image as u64);
    (0..spec.num_holes)
        .map(|_| {
            let cy = rng.next_u64() % h as u64;
            let cx = rng.next_u64() % w as u64;
            Hole {
                rows: clip(cy, spec.hole_h, h),
                cols: clip(cx, spec.hole_w, w),
            }
        })
        .collect()
}

pub fn cutout(imgs: &ImageSet, spec: &CutoutSpec) -> ImageSet {
    let mut out = imgs.clone();
    let (n, h, w, ch) = imgs.dims();
    for i in 0..n {
        for hole in holes_for_image(spec, i, h, w) {
            for y in hole.rows.0..hole.rows.1 {
                let row = ((i * h + y) * w + hole.cols.0) * ch;
                let end = ((i * h + y) * w + hole.cols.1) * ch;
                out.data[row..end].fill(spec.fill);
            }
        }
    }
    out
}
