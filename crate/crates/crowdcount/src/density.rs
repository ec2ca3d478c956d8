//! Dot-annotated scenes and density-map ground truth.
//!
//! Each dot contributes a discretized Gaussian truncated at 4 sigma (axis
//! window) and renormalized so its mass is exactly 1 — the integral of the
//! map equals the crowd count regardless of edge clipping. Kernel math and
//! accumulation run in f64; the stored map is f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scene: image bounds plus head positions (x right, y down, in pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct DotScene {
    pub width: usize,
    pub height: usize,
    pub dots: Vec<(f32, f32)>,
}

impl DotScene {
    pub fn new(width: usize, height: usize, dots: Vec<(f32, f32)>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("scene dimensions {width}x{height} must be positive")));
        }
        for &(x, y) in &dots {
            if !(x.is_finite() && y.is_finite())
                || x < 0.0
                || y < 0.0
                || x >= width as f32
                || y >= height as f32
            {
                return Err(Error::DotOutOfBounds { x, y, width, height });
            }
        }
        Ok(DotScene { width, height, dots })
    }

    pub fn count(&self) -> usize {
        self.dots.len()
    }

    /// Plain text scene file: `W H` on the first line, one `x y` per dot.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("{} {}\n", self.width, self.height);
        for (x, y) in &self.dots {
            text.push_str(&format!("{x} {y}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(p.clone(), "empty scene file".to_string()))?;
        let mut it = header.split_whitespace();
        let parse_dim = |tok: Option<&str>| -> std::result::Result<usize, String> {
            tok.ok_or("header needs 'W H'".to_string())?
                .parse::<usize>()
                .map_err(|e| format!("bad dimension in header: {e}"))
        };
        let width = parse_dim(it.next()).map_err(|r| Error::format(p.clone(), r))?;
        let height = parse_dim(it.next()).map_err(|r| Error::format(p.clone(), r))?;
        let mut dots = Vec::new();
        for (lineno, line) in lines {
            let mut it = line.split_whitespace();
            let mut coord = |name: &str| -> Result<f32> {
                it.next()
                    .ok_or_else(|| {
                        Error::format(p.clone(), format!("line {}: missing {name}", lineno + 1))
                    })?
                    .parse::<f32>()
                    .map_err(|e| Error::format(p.clone(), format!("line {}: {e}", lineno + 1)))
            };
            let x = coord("x")?;
            let y = coord("y")?;
            dots.push((x, y));
        }
        DotScene::new(width, height, dots)
    }
}

/// Non-negative density values, row-major, whose sum is the crowd count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f32>,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "density_map",
                format!("{width}x{height} = {} values", width * height),
                format!("{}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("density map values must be finite and non-negative"));
        }
        Ok(DensityMap { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap { width, height, values: vec![0.0; width * height] }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Crowd count: the integral of the map, accumulated in f64.
    pub fn count(&self) -> f64 {
        self.values.iter().map(|v| *v as f64).sum()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.height, self.width], self.values.clone())
            .expect("dims consistent by construction")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [1, h, w] => DensityMap::new(*w, *h, t.data().to_vec()),
            other => Err(Error::shape("density_map", "(1, H, W)", format!("{other:?}"))),
        }
    }

    /// Horizontal mirror; mass is preserved exactly.
    pub fn hflip(&self) -> DensityMap {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.width) {
            values.extend(row.iter().rev());
        }
        DensityMap { width: self.width, height: self.height, values }
    }

    /// Sub-rectangle copy; masses are *not* renormalized, so crops of a
    /// partition sum back to the original count.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<DensityMap> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape(
                "crop_density",
                format!("window within {}x{}", self.width, self.height),
                format!("{w}x{h}+{x0}+{y0}"),
            ));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(DensityMap { width: w, height: h, values })
    }

    /// Block-sum downsampling by `f` (mass preserved; dims must divide by f).
    pub fn downsample_sum(&self, f: usize) -> Result<DensityMap> {
        if f == 0 || self.width % f != 0 || self.height % f != 0 {
            return Err(Error::shape(
                "downsample_sum",
                format!("dims divisible by {f}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width / f, self.height / f);
        let mut values = vec![0.0f32; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                values[(y / f) * w + x / f] += self.values[y * self.width + x];
            }
        }
        Ok(DensityMap { width: w, height: h, values })
    }

    /// Nearest upsampling by `f` with each cell's mass shared over the f*f
    /// block (count preserved) — used to compare quarter-resolution output
    /// against full-resolution ground truth.
    pub fn upsample_share(&self, f: usize) -> Result<DensityMap> {
        if f == 0 {
            return Err(Error::invalid("upsample_share: factor must be >= 1"));
        }
        let (w, h) = (self.width * f, self.height * f);
        let share = (f * f) as f32;
        let mut values = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                values[y * w + x] = self.values[(y / f) * self.width + x / f] / share;
            }
        }
        Ok(DensityMap { width: w, height: h, values })
    }

    /// Binary density file: magic `CPDM`, u32-LE width and height, then
    /// width*height f32-LE values in row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.values.len() * 4);
        bytes.extend_from_slice(b"CPDM");
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
        if bytes.len() < 12 {
            return Err(Error::format(p, format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != b"CPDM" {
            return Err(Error::format(p, format!("bad magic {:?} (expected 'CPDM')", &bytes[0..4])));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = 12 + width * height * 4;
        if bytes.len() != need {
            return Err(Error::format(
                p,
                format!("expected {need} bytes for {width}x{height}, found {}", bytes.len()),
            ));
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DensityMap::new(width, height, values)
    }
}

/// Render ground truth: one truncated, renormalized Gaussian per dot.
pub fn render_density(scene: &DotScene, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("render_density: sigma {sigma} must be > 0")));
    }
    let (w, h) = (scene.width, scene.height);
    let mut acc = vec![0.0f64; w * h];
    let radius = 4.0 * sigma;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    for &(dx, dy) in &scene.dots {
        let (dx, dy) = (dx as f64, dy as f64);
        // axis-aligned 4-sigma window, clamped to the image but never empty:
        // tiny sigmas still deposit their whole mass on the nearest pixel
        let clamp_axis = |lo: f64, hi: f64, center: f64, n: usize| -> (usize, usize) {
            let mut a = lo.ceil().max(0.0) as usize;
            let mut b = hi.floor().min((n - 1) as f64).max(0.0) as usize;
            if a > b {
                let nearest = center.round().clamp(0.0, (n - 1) as f64) as usize;
                a = nearest;
                b = nearest;
            }
            (a, b)
        };
        let (x0, x1) = clamp_axis(dx - radius, dx + radius, dx, w);
        let (y0, y1) = clamp_axis(dy - radius, dy + radius, dy, h);

        let mut total = 0.0f64;
        let mut weights = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d2 = (px as f64 - dx).powi(2) + (py as f64 - dy).powi(2);
                let wgt = (-d2 * inv_two_sigma_sq).exp();
                weights.push(wgt);
                total += wgt;
            }
        }
        if total <= 0.0 {
            // all weights underflowed; put the whole dot on the nearest pixel
            let px = dx.round().clamp(0.0, (w - 1) as f64) as usize;
            let py = dy.round().clamp(0.0, (h - 1) as f64) as usize;
            acc[py * w + px] += 1.0;
            continue;
        }
        let mut it = weights.into_iter();
        for py in y0..=y1 {
            for px in x0..=x1 {
                acc[py * w + px] += it.next().unwrap() / total;
            }
        }
    }
    DensityMap::new(w, h, acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_renders_all_zero() {
        let scene = DotScene::new(16, 16, vec![]).unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        assert!(map.values().iter().all(|v| *v == 0.0));
        assert_eq!(map.count(), 0.0);
    }

    #[test]
    fn single_center_dot_has_unit_mass() {
        let scene = DotScene::new(32, 32, vec![(16.0, 16.0)]).unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        assert!((map.count() - 1.0).abs() < 1e-5, "count {}", map.count());
    }

    #[test]
    fn three_dots_count_three() {
        let scene =
            DotScene::new(64, 64, vec![(10.2, 12.8), (40.0, 9.5), (31.7, 55.1)]).unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        assert!((map.count() - 3.0).abs() < 1e-4, "count {}", map.count());
    }

    #[test]
    fn corner_and_edge_dots_conserve_mass() {
        let scene = DotScene::new(24, 24, vec![
            (0.0, 0.0),
            (23.9, 0.1),
            (0.4, 23.5),
            (23.0, 23.0),
            (0.0, 12.0),
        ])
        .unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        assert!((map.count() - 5.0).abs() < 1e-4, "count {}", map.count());
    }

    #[test]
    fn tiny_sigma_still_deposits_unit_mass() {
        let scene = DotScene::new(8, 8, vec![(3.5, 3.5)]).unwrap();
        let map = render_density(&scene, 0.05).unwrap();
        assert!((map.count() - 1.0).abs() < 1e-4, "count {}", map.count());
    }

    #[test]
    fn map_is_zero_beyond_four_sigma() {
        let scene = DotScene::new(64, 64, vec![(10.0, 10.0)]).unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        // rectangle far outside the 8-pixel window
        let far = map.crop(30, 30, 30, 30).unwrap();
        assert!(far.count() < 1e-6, "leak {}", far.count());
    }

    #[test]
    fn dot_outside_bounds_is_rejected() {
        let err = DotScene::new(16, 16, vec![(16.0, 3.0)]).unwrap_err();
        assert!(matches!(err, Error::DotOutOfBounds { .. }), "{err}");
        assert!(DotScene::new(16, 16, vec![(-0.1, 3.0)]).is_err());
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let scene = DotScene::new(20, 12, vec![(3.0, 4.0), (15.0, 8.0)]).unwrap();
        let map = render_density(&scene, 1.5).unwrap();
        let crop = map.crop(0, 0, 20, 12).unwrap();
        assert_eq!(map.values(), crop.values());
    }

    #[test]
    fn quadrant_crops_sum_to_full_count() {
        let scene = DotScene::new(32, 32, vec![
            (5.0, 5.0),
            (20.0, 9.0),
            (9.0, 25.0),
            (28.0, 28.0),
            (16.0, 16.0),
        ])
        .unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        let q: f64 = [(0, 0), (16, 0), (0, 16), (16, 16)]
            .iter()
            .map(|&(x, y)| map.crop(x, y, 16, 16).unwrap().count())
            .sum();
        assert!((q - map.count()).abs() < 1e-6 * map.count().max(1.0));
    }

    #[test]
    fn downsample_preserves_count_and_upsample_shares_it() {
        let scene = DotScene::new(32, 32, vec![(8.0, 8.0), (25.0, 17.0)]).unwrap();
        let map = render_density(&scene, 2.0).unwrap();
        let q = map.downsample_sum(4).unwrap();
        assert_eq!((q.width, q.height), (8, 8));
        assert!((q.count() - map.count()).abs() < 1e-5);
        let back = q.upsample_share(4).unwrap();
        assert_eq!((back.width, back.height), (32, 32));
        assert!((back.count() - map.count()).abs() < 1e-5);
        assert!(map.downsample_sum(5).is_err(), "32 not divisible by 5");
    }

    #[test]
    fn density_file_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cpdm");
        let scene = DotScene::new(17, 9, vec![(3.3, 4.4), (12.0, 6.5)]).unwrap();
        let map = render_density(&scene, 1.7).unwrap();
        map.save(&path).unwrap();
        let back = DensityMap::load(&path).unwrap();
        assert_eq!((back.width, back.height), (17, 9));
        assert!(map
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn density_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cpdm");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        let err = DensityMap::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut ok = Vec::new();
        ok.extend_from_slice(b"CPDM");
        ok.extend_from_slice(&3u32.to_le_bytes());
        ok.extend_from_slice(&3u32.to_le_bytes());
        ok.extend_from_slice(&1.0f32.to_le_bytes()); // 1 of 9 values
        std::fs::write(&path, ok).unwrap();
        let err = DensityMap::load(&path).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn scene_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let scene = DotScene::new(48, 32, vec![(0.5, 1.25), (47.0, 31.5), (10.125, 20.0)]).unwrap();
        scene.save(&path).unwrap();
        let back = DotScene::load(&path).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn scene_file_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(&path, "16 16\n1.0 2.0\n3.0 oops\n").unwrap();
        let err = DotScene::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
