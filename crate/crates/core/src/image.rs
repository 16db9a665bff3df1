//! Image representation and shared raster kernels.
//!
//! An [`Image`] is an H×W×C grid of f64 in [0,1], row-major and
//! channel-interleaved. Channels are 1 or 3; the smallest accepted side is
//! 8 pixels (8×8 block transforms must fit). Public constructors validate
//! range and finiteness so downstream code can assume both.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

pub const MIN_SIDE: usize = 8;

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image {height}x{width} below minimum side {MIN_SIDE}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        let expect = height * width * channels;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(Image { height, width, channels, data })
    }

    /// Construct without the element scan; caller guarantees values in [0,1].
    pub(crate) fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Image { height, width, channels, data }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn require_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Luminance plane. BT.601 weights for 3-channel images; 1-channel
    /// images are their own luma.
    pub fn luma(&self) -> Plane {
        let mut out = vec![0.0; self.height * self.width];
        match self.channels {
            1 => out.copy_from_slice(&self.data),
            _ => {
                for (i, px) in self.data.chunks_exact(3).enumerate() {
                    out[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                }
            }
        }
        Plane { height: self.height, width: self.width, data: out }
    }

    /// Map every element through `f` and clamp the result into [0,1].
    pub fn map_clamped(&self, f: impl Fn(f64) -> f64) -> Image {
        let data = self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect();
        Image::from_clamped(self.height, self.width, self.channels, data)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// Single-channel f64 plane, the working surface of metrics and features.
/// Values are unconstrained (gradients, residuals) — only `Image` carries
/// the [0,1] invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Plane {
        Plane { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Replicate-clamped fetch.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }
}

/// Separable convolution with replicate padding: 1-D `taps` applied
/// horizontally then vertically (taps must have odd length).
pub fn filter_separable(p: &Plane, taps: &[f64]) -> Plane {
    let r = taps.len() / 2;
    let (h, w) = (p.height, p.width);
    let mut tmp = Plane::zeros(h, w);
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        let out = &mut tmp.data[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            if x >= r && x + r < w {
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * row[x + k - r];
                }
            } else {
                for (k, &t) in taps.iter().enumerate() {
                    let xx = (x as isize + k as isize - r as isize).clamp(0, w as isize - 1);
                    acc += t * row[xx as usize];
                }
            }
            *o = acc;
        }
    }
    // Vertical pass as per-row accumulation; tap order matches the
    // horizontal pass so values are identical to the naive form.
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        let (head, rest) = out.data.split_at_mut(y * w);
        let _ = head;
        let orow = &mut rest[..w];
        for (k, &t) in taps.iter().enumerate() {
            let yy = (y as isize + k as isize - r as isize).clamp(0, h as isize - 1) as usize;
            let srow = &tmp.data[yy * w..(yy + 1) * w];
            for (o, &s) in orow.iter_mut().zip(srow) {
                *o += t * s;
            }
        }
    }
    out
}

/// Full 2-D convolution of one plane with an odd-sized kernel,
/// replicate padding. Kernel indexed row-major (kh×kw).
pub fn conv2d_plane(p: &Plane, kernel: &[f64], kh: usize, kw: usize) -> Plane {
    debug_assert!(kh % 2 == 1 && kw % 2 == 1);
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let (h, w) = (p.height, p.width);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..kh {
                for j in 0..kw {
                    let sy = y as isize + i as isize - ry;
                    let sx = x as isize + j as isize - rx;
                    acc += kernel[i * kw + j] * p.get_clamped(sy, sx);
                }
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}

/// Sobel x/y responses (replicate padding).
pub fn sobel(p: &Plane) -> (Plane, Plane) {
    let (h, w) = (p.height, p.width);
    let mut gx = Plane::zeros(h, w);
    let mut gy = Plane::zeros(h, w);
    for y in 0..h {
        let up = y.saturating_sub(1) * w;
        let mid = y * w;
        let dn = (y + 1).min(h - 1) * w;
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let a = p.data[up + xl];
            let b = p.data[up + x];
            let c = p.data[up + xr];
            let d = p.data[mid + xl];
            let f = p.data[mid + xr];
            let g = p.data[dn + xl];
            let hh = p.data[dn + x];
            let i = p.data[dn + xr];
            gx.data[mid + x] = (c + 2.0 * f + i) - (a + 2.0 * d + g);
            gy.data[mid + x] = (g + 2.0 * hh + i) - (a + 2.0 * b + c);
        }
    }
    (gx, gy)
}

/// Sobel gradient magnitude.
pub fn sobel_magnitude(p: &Plane) -> Plane {
    let (gx, gy) = sobel(p);
    let mut out = Plane::zeros(p.height, p.width);
    for i in 0..out.data.len() {
        out.data[i] = (gx.data[i] * gx.data[i] + gy.data[i] * gy.data[i]).sqrt();
    }
    out
}

/// Median of 9 via the classic exchange network (19 compare-swaps).
fn median9(mut p: [f64; 9]) -> f64 {
    macro_rules! sw {
        ($a:expr, $b:expr) => {
            if p[$a] > p[$b] {
                p.swap($a, $b);
            }
        };
    }
    sw!(1, 2);
    sw!(4, 5);
    sw!(7, 8);
    sw!(0, 1);
    sw!(3, 4);
    sw!(6, 7);
    sw!(1, 2);
    sw!(4, 5);
    sw!(7, 8);
    sw!(0, 3);
    sw!(5, 8);
    sw!(4, 7);
    sw!(3, 6);
    sw!(1, 4);
    sw!(2, 5);
    sw!(4, 7);
    sw!(4, 2);
    sw!(6, 4);
    sw!(4, 2);
    p[4]
}

/// 3×3 median filter, replicate padding.
pub fn median3(p: &Plane) -> Plane {
    let (h, w) = (p.height, p.width);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        let up = y.saturating_sub(1) * w;
        let mid = y * w;
        let dn = (y + 1).min(h - 1) * w;
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            out.data[mid + x] = median9([
                p.data[up + xl],
                p.data[up + x],
                p.data[up + xr],
                p.data[mid + xl],
                p.data[mid + x],
                p.data[mid + xr],
                p.data[dn + xl],
                p.data[dn + x],
                p.data[dn + xr],
            ]);
        }
    }
    out
}

/// Box-average downsample by integer factor `s`; trailing partial blocks
/// average over the pixels they cover.
pub fn box_downsample(p: &Plane, s: usize) -> Plane {
    let oh = p.height.div_ceil(s);
    let ow = p.width.div_ceil(s);
    let mut out = Plane::zeros(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let y0 = y * s;
            let x0 = x * s;
            let y1 = (y0 + s).min(p.height);
            let x1 = (x0 + s).min(p.width);
            let mut acc = 0.0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    acc += p.get(yy, xx);
                }
            }
            out.data[y * ow + x] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Bilinear upsample to an explicit target size, half-pixel centers.
pub fn bilinear_resize(p: &Plane, oh: usize, ow: usize) -> Plane {
    let mut out = Plane::zeros(oh, ow);
    let sy = p.height as f64 / oh as f64;
    let sx = p.width as f64 / ow as f64;
    for y in 0..oh {
        for x in 0..ow {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, p.height as f64 - 1.0);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, p.width as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(p.height - 1);
            let x1 = (x0 + 1).min(p.width - 1);
            let wy = fy - y0 as f64;
            let wx = fx - x0 as f64;
            let v = p.get(y0, x0) * (1.0 - wy) * (1.0 - wx)
                + p.get(y0, x1) * (1.0 - wy) * wx
                + p.get(y1, x0) * wy * (1.0 - wx)
                + p.get(y1, x1) * wy * wx;
            out.data[y * ow + x] = v;
        }
    }
    out
}

/// Split an image into channel planes.
pub fn channel_planes(img: &Image) -> Vec<Plane> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut planes = vec![Plane::zeros(h, w); c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                planes[ch].data[y * w + x] = img.get(y, x, ch);
            }
        }
    }
    planes
}

/// Interleave channel planes back into an image, clamping into [0,1].
pub fn planes_to_image(planes: &[Plane]) -> Image {
    let c = planes.len();
    let (h, w) = (planes[0].height, planes[0].width);
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for (ch, p) in planes.iter().enumerate() {
                data[(y * w + x) * c + ch] = p.data[y * w + x].clamp(0.0, 1.0);
            }
        }
    }
    Image::from_clamped(h, w, c, data)
}

/// Normalized 1-D Gaussian taps with radius `r`.
pub fn gaussian_taps(sigma: f64, r: usize) -> Vec<f64> {
    let mut taps = Vec::with_capacity(2 * r + 1);
    for k in 0..=2 * r {
        let d = k as f64 - r as f64;
        taps.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Normalized 2-D Gaussian kernel of side 2r+1, row-major.
pub fn gaussian_kernel2d(sigma: f64, r: usize) -> Vec<f64> {
    let side = 2 * r + 1;
    let mut k = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - r as f64;
            let dx = x as f64 - r as f64;
            k[y * side + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}
