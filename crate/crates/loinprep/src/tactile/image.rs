//! Small 8-bit RGB raster with the handful of operations the tactile
//! pipeline needs: binary PPM round-tripping, aspect-preserving resampling,
//! rotation about the image centre, and cropping.
//!
//! Coordinates are `(row, col)` with row 0 at the top; samples use pixel
//! centres, so resampling an image onto its own grid reproduces it exactly.

use std::fs;
use std::io;
use std::path::Path;

/// Interleaved RGB image, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Image::new(height, width);
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                img.data[(r * width + c) * 3..(r * width + c) * 3 + 3].copy_from_slice(&px);
            }
        }
        img
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, px: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear sample at fractional pixel-centre coordinates, clamped to the
    /// image border.
    fn sample(&self, r: f64, c: f64) -> [f64; 3] {
        let rmax = (self.height - 1) as f64;
        let cmax = (self.width - 1) as f64;
        let r = r.clamp(0.0, rmax);
        let c = c.clamp(0.0, cmax);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let mut out = [0.0; 3];
        for (w, (rr, cc)) in [
            ((1.0 - fr) * (1.0 - fc), (r0, c0)),
            ((1.0 - fr) * fc, (r0, c1)),
            (fr * (1.0 - fc), (r1, c0)),
            (fr * fc, (r1, c1)),
        ] {
            if w == 0.0 {
                continue;
            }
            let px = self.pixel(rr, cc);
            for ch in 0..3 {
                out[ch] += w * f64::from(px[ch]);
            }
        }
        out
    }

    /// Aspect-preserving resize: scales the image uniformly until it covers
    /// `height × width`, then keeps the centred window of that size.
    pub fn resize_cover(&self, height: usize, width: usize) -> Image {
        assert!(height > 0 && width > 0, "empty resize target");
        let scale = (height as f64 / self.height as f64).max(width as f64 / self.width as f64);
        let off_r = (self.height as f64 * scale - height as f64) / 2.0;
        let off_c = (self.width as f64 * scale - width as f64) / 2.0;
        Image::from_fn(height, width, |r, c| {
            let sr = (r as f64 + 0.5 + off_r) / scale - 0.5;
            let sc = (c as f64 + 0.5 + off_c) / scale - 0.5;
            quantize(self.sample(sr, sc))
        })
    }

    /// Rotates the content by `angle` radians about the image centre,
    /// keeping the dimensions; revealed border regions clamp to the nearest
    /// source pixel.
    pub fn rotate(&self, angle: f64) -> Image {
        let (sin, cos) = angle.sin_cos();
        let cy = (self.height - 1) as f64 / 2.0;
        let cx = (self.width - 1) as f64 / 2.0;
        Image::from_fn(self.height, self.width, |r, c| {
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            let sr = cy + cos * dr - sin * dc;
            let sc = cx + sin * dr + cos * dc;
            quantize(self.sample(sr, sc))
        })
    }

    /// Copies the `height × width` window whose top-left corner is
    /// `(r0, c0)`; the window must lie inside the image.
    pub fn crop(&self, r0: usize, c0: usize, height: usize, width: usize) -> Image {
        assert!(
            r0 + height <= self.height && c0 + width <= self.width,
            "crop window {height}x{width}+{r0}+{c0} exceeds {}x{}",
            self.height,
            self.width
        );
        Image::from_fn(height, width, |r, c| self.pixel(r0 + r, c0 + c))
    }

    /// Writes the image as a binary (P6) PPM.
    pub fn write_ppm(&self, path: &Path) -> io::Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.data);
        fs::write(path, buf)
    }

    /// Reads a binary (P6) PPM with 8-bit samples.
    pub fn read_ppm(path: &Path) -> io::Result<Image> {
        let raw = fs::read(path)?;
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {msg}", path.display()));
        let mut pos = 0;
        let mut token = || -> io::Result<String> {
            // skip whitespace and `#` comment lines between header fields
            loop {
                match raw.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while raw.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while raw.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            String::from_utf8(raw[start..pos].to_vec())
                .map_err(|_| bad("non-ascii header"))
        };
        if token()? != "P6" {
            return Err(bad("not a binary PPM"));
        }
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        if token()? != "255" {
            return Err(bad("unsupported sample depth"));
        }
        pos += 1; // single whitespace byte after the header
        let need = height * width * 3;
        if raw.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Ok(Image {
            height,
            width,
            data: raw[pos..pos + need].to_vec(),
        })
    }
}

/// Mean absolute per-channel difference between two same-sized images, in
/// 8-bit gray levels.
pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.height, b.height);
    assert_eq!(a.width, b.width);
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum();
    sum / a.data.len() as f64
}

/// Largest absolute per-channel difference between two same-sized images.
pub fn max_abs_diff(a: &Image, b: &Image) -> u8 {
    assert_eq!(a.data.len(), b.data.len());
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.abs_diff(y))
        .max()
        .unwrap_or(0)
}

fn quantize(px: [f64; 3]) -> [u8; 3] {
    [
        px[0].round().clamp(0.0, 255.0) as u8,
        px[1].round().clamp(0.0, 255.0) as u8,
        px[2].round().clamp(0.0, 255.0) as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| {
            [
                (r * 255 / h.max(1)) as u8,
                (c * 255 / w.max(1)) as u8,
                ((r + c) % 256) as u8,
            ]
        })
    }

    #[test]
    fn ppm_round_trips_exactly() {
        let img = gradient(24, 31);
        let dir = std::env::temp_dir().join("loinprep-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn resize_cover_is_identity_at_native_size() {
        let img = gradient(48, 64);
        assert_eq!(img.resize_cover(48, 64), img);
    }

    #[test]
    fn resize_cover_crops_the_long_axis() {
        // A 48×128 source covers a 48×64 target by scaling 1:1 and keeping
        // the central columns: column c of the result is column c+32 of the
        // source.
        let img = gradient(48, 128);
        let out = img.resize_cover(48, 64);
        assert_eq!(out.height, 48);
        assert_eq!(out.width, 64);
        for r in [0, 20, 47] {
            for c in [0, 31, 63] {
                assert_eq!(out.pixel(r, c), img.pixel(r, c + 32));
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = gradient(30, 40);
        assert_eq!(img.rotate(0.0), img);
    }

    #[test]
    fn rotation_moves_a_dot_along_a_circle() {
        let mut img = Image::new(81, 81);
        img.set_pixel(40, 70, [255, 255, 255]); // 30 px right of centre
        let out = img.rotate(std::f64::consts::FRAC_PI_2);
        // quarter turn: the bright dot should land 30 px from the centre on
        // the row axis
        let mut best = (0usize, 0usize, 0u8);
        for r in 0..81 {
            for c in 0..81 {
                let v = out.pixel(r, c)[0];
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        let (r, c, _) = best;
        assert!(
            (r as i64 - 40).unsigned_abs() <= 31 && (c as i64 - 40).unsigned_abs() <= 1,
            "dot landed at ({r}, {c})"
        );
        assert!((r as i64 - 10).abs() <= 1 || (r as i64 - 70).abs() <= 1, "radius off: row {r}");
    }

    #[test]
    fn crop_extracts_the_requested_window() {
        let img = gradient(20, 20);
        let out = img.crop(3, 5, 10, 12);
        assert_eq!(out.height, 10);
        assert_eq!(out.width, 12);
        assert_eq!(out.pixel(0, 0), img.pixel(3, 5));
        assert_eq!(out.pixel(9, 11), img.pixel(12, 16));
    }
}
