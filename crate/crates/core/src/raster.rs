//! Plain row-major image buffers shared by the renderer, masks and metrics.

/// Multi-channel `f64` image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "raster buffer length");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Bilinear sample at continuous pixel coordinates, where integer
    /// coordinates address pixel centers. Coordinates are clamped to the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = xf - x0 as f64;
        let ty = yf - y0 as f64;
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        for c in 0..self.channels {
            let top = p00[c] + (p10[c] - p00[c]) * tx;
            let bottom = p01[c] + (p11[c] - p01[c]) * tx;
            out[c] = top + (bottom - top) * ty;
        }
    }

    /// Area-average downsampling by integer factors.
    pub fn downsample(&self, fx: usize, fy: usize) -> Raster {
        let (w, h) = (self.width / fx, self.height / fy);
        let mut out = Raster::new(w, h, self.channels);
        let inv = 1.0 / (fx * fy) as f64;
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * self.channels;
                for sy in 0..fy {
                    for sx in 0..fx {
                        let src = self.pixel(x * fx + sx, y * fy + sy);
                        for c in 0..self.channels {
                            out.data[dst + c] += src[c];
                        }
                    }
                }
                for c in 0..self.channels {
                    out.data[dst + c] *= inv;
                }
            }
        }
        out
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Lookup at signed coordinates; anything outside the image is `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Bitmap) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn or(&self, other: &Bitmap) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Binary dilation with a 3x3 square structuring element.
    pub fn dilate3(&self) -> Bitmap {
        self.morph3(true)
    }

    /// Binary erosion with a 3x3 square structuring element. Pixels outside the
    /// image count as unset.
    pub fn erode3(&self) -> Bitmap {
        self.morph3(false)
    }

    fn morph3(&self, dilate: bool) -> Bitmap {
        let mut out = Bitmap::new(self.width, self.height);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let mut acc = !dilate;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let v = self.get_signed(x + dx, y + dy);
                        if dilate {
                            acc |= v;
                        } else {
                            acc &= v;
                        }
                    }
                }
                out.set(x as usize, y as usize, acc);
            }
        }
        out
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Chessboard distance from every pixel to the nearest unset pixel (or the
    /// image border, which counts as unset). Unset pixels get 0.
    pub fn inner_distance(&self) -> Vec<u32> {
        let (w, h) = (self.width, self.height);
        let inf = u32::MAX / 2;
        let mut d: Vec<u32> = self.bits.iter().map(|&b| if b { inf } else { 0 }).collect();
        let at = |d: &Vec<u32>, x: i64, y: i64| -> u32 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0
            } else {
                d[y as usize * w + x as usize]
            }
        };
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                if d[i] == 0 {
                    continue;
                }
                let m = at(&d, x - 1, y)
                    .min(at(&d, x, y - 1))
                    .min(at(&d, x - 1, y - 1))
                    .min(at(&d, x + 1, y - 1));
                d[i] = d[i].min(m + 1);
            }
        }
        for y in (0..h as i64).rev() {
            for x in (0..w as i64).rev() {
                let i = y as usize * w + x as usize;
                if d[i] == 0 {
                    continue;
                }
                let m = at(&d, x + 1, y)
                    .min(at(&d, x, y + 1))
                    .min(at(&d, x + 1, y + 1))
                    .min(at(&d, x - 1, y + 1));
                d[i] = d[i].min(m + 1);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers() {
        let mut r = Raster::new(3, 2, 1);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut out = [0.0];
        r.sample_bilinear(2.0, 1.0, &mut out);
        assert_eq!(out[0], 5.0);
        r.sample_bilinear(0.5, 0.0, &mut out);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn inner_distance_of_square() {
        let mut m = Bitmap::new(7, 7);
        for y in 1..6 {
            for x in 1..6 {
                m.set(x, y, true);
            }
        }
        let d = m.inner_distance();
        assert_eq!(d[3 * 7 + 3], 3);
        assert_eq!(d[7 + 1], 1);
        assert_eq!(d[0], 0);
    }

    #[test]
    fn dilate_then_erode_keeps_square() {
        let mut m = Bitmap::new(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, true);
            }
        }
        assert_eq!(m.dilate3().erode3(), m);
    }
}
