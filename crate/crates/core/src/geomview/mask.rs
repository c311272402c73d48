use image::{GrayImage, Luma};

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = BinaryMask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.idx(x, y)]
    }

    /// Out-of-bounds coordinates read as unset.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.idx(x, y);
        self.bits[i] = value;
    }

    /// Sets a pixel, ignoring coordinates outside the image.
    pub fn set_checked(&mut self, x: i64, y: i64) {
        if x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64 {
            self.set(x as u32, y as u32, true);
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut it = self.iter_set();
        let (x, y) = it.next()?;
        let init = (x, y, x, y);
        Some(it.fold(init, |(x0, y0, x1, y1), (x, y)| {
            (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
        }))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Square-kernel morphological closing (dilate, then erode). Pixels
    /// outside the image count as unset for dilation and as set for erosion,
    /// so the result always contains the input. Side 0 or 1 is the identity.
    pub fn closed(&self, side: u32) -> BinaryMask {
        if side <= 1 {
            return self.clone();
        }
        let lo = (side as i64 - 1) / 2;
        let hi = side as i64 / 2;
        let dilated = self.sweep(-hi, lo, false, true).sweep(-hi, lo, false, false);
        dilated.sweep(-lo, hi, true, true).sweep(-lo, hi, true, false)
    }

    /// One separable pass: a pixel becomes the OR (dilation) or AND (erosion)
    /// of the window `[p + from, p + to]` along one axis.
    fn sweep(&self, from: i64, to: i64, erode: bool, horizontal: bool) -> BinaryMask {
        let mut out = BinaryMask::new(self.width, self.height);
        let (w, h) = (self.width as i64, self.height as i64);
        for y in 0..h {
            for x in 0..w {
                let mut acc = erode;
                for d in from..=to {
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    let inside = sx >= 0 && sy >= 0 && sx < w && sy < h;
                    let v = if inside {
                        self.get(sx as u32, sy as u32)
                    } else {
                        erode
                    };
                    if erode {
                        acc &= v;
                        if !acc {
                            break;
                        }
                    } else {
                        acc |= v;
                        if acc {
                            break;
                        }
                    }
                }
                if acc {
                    out.set(x as u32, y as u32, true);
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }
}
