//! Orthographic multi-view splat rasterizer and post-denoising opacity
//! correction.
//!
//! Primitives are projected orthographically, sorted front to back per view
//! (ties broken by primitive index) and alpha-composited with
//! `alpha = opacity * exp(-0.5 * m)`, where `m` is the squared Mahalanobis
//! distance of the pixel center under the primitive's rotated footprint.
//! Footprints are truncated at three standard deviations (`m > 9`), so a
//! pixel outside every footprint stays exactly transparent.

use alloc::vec;
use alloc::vec::Vec;

use crate::decode::{SplatSet, MIN_SCALE};
use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::math;

/// Default rendered image side in pixels.
pub const DEFAULT_IMAGE_SIZE: usize = 64;
/// Footprint truncation radius in standard deviations, squared.
pub const CUTOFF_MAHALANOBIS2: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub view_id: usize,
    /// World-to-camera `[R | t]`; camera x is image right, y is image up,
    /// z points toward the viewer.
    pub extrinsic: [[f64; 4]; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Orthographic camera on the unit orbit at the given azimuth and
    /// elevation (degrees), looking at the origin.
    pub fn orbit(view_id: usize, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Self {
        let th = azimuth_deg.to_radians();
        let ph = elevation_deg.to_radians();
        let (st, ct) = (math::sin(th), math::cos(th));
        let (sp, cp) = (math::sin(ph), math::cos(ph));
        let toward = [cp * st, sp, cp * ct];
        let right = [ct, 0.0, -st];
        let up = [
            toward[1] * right[2] - toward[2] * right[1],
            toward[2] * right[0] - toward[0] * right[2],
            toward[0] * right[1] - toward[1] * right[0],
        ];
        let row = |a: [f64; 3]| [a[0], a[1], a[2], 0.0];
        Self {
            view_id,
            extrinsic: [row(right), row(up), row(toward)],
            width: size,
            height: size,
        }
    }

    /// Whether the rotation block is orthonormal within `tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let r = &self.extrinsic;
        (0..3).all(|i| {
            (0..3).all(|j| {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                (dot - expect).abs() <= tol
            })
        })
    }

    #[inline]
    fn project(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.extrinsic;
        core::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + r[i][3])
    }
}

/// Front, right, back and left views at elevation 0.
pub fn standard_cameras(size: usize) -> Vec<Camera> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .enumerate()
        .map(|(i, az)| Camera::orbit(i, *az, 0.0, size))
        .collect()
}

/// RGB (premultiplied over a black background) plus accumulated alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 4]>,
}

impl RenderedImage {
    pub fn transparent(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 4]; width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 4] {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn alpha(&self, row: usize, col: usize) -> f64 {
        self.pixel(row, col)[3]
    }
}

/// Pixel-space footprint of one primitive in one view.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub center: [f64; 2],
    pub depth: f64,
    pub scale: [f64; 2],
    pub cos: f64,
    pub sin: f64,
}

impl Footprint {
    /// Squared Mahalanobis distance of pixel `(row, col)`'s center.
    #[inline]
    pub fn mahalanobis2(&self, row: usize, col: usize) -> f64 {
        let dx = col as f64 + 0.5 - self.center[0];
        let dy = row as f64 + 0.5 - self.center[1];
        let a = (self.cos * dx + self.sin * dy) / self.scale[0];
        let b = (-self.sin * dx + self.cos * dy) / self.scale[1];
        a * a + b * b
    }

    /// Whether the truncated footprint reaches pixel `(row, col)`.
    #[inline]
    pub fn covers(&self, row: usize, col: usize) -> bool {
        self.mahalanobis2(row, col) <= CUTOFF_MAHALANOBIS2
    }

    /// Inclusive pixel bounds `(row0, row1, col0, col1)` clipped to the image.
    pub fn bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = 3.0 * self.scale[0].max(self.scale[1]);
        let c0 = math_floor(self.center[0] - r - 0.5);
        let c1 = math_floor(self.center[0] + r - 0.5) + 1;
        let r0 = math_floor(self.center[1] - r - 0.5);
        let r1 = math_floor(self.center[1] + r - 0.5) + 1;
        if c1 < 0 || r1 < 0 || c0 >= width as i64 || r0 >= height as i64 {
            return None;
        }
        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        Some((clamp(r0, height), clamp(r1, height), clamp(c0, width), clamp(c1, width)))
    }
}

#[inline]
fn math_floor(x: f64) -> i64 {
    libm::floor(x) as i64
}

/// Projects every primitive of `splats` into `camera`'s image.
pub fn footprints(splats: &SplatSet, camera: &Camera) -> Vec<Footprint> {
    let px_per_unit_x = camera.width as f64 / 2.0;
    let px_per_unit_y = camera.height as f64 / 2.0;
    splats
        .primitives
        .iter()
        .map(|p| {
            let c = camera.project(&p.position);
            Footprint {
                center: [(c[0] + 1.0) * px_per_unit_x, (1.0 - c[1]) * px_per_unit_y],
                depth: c[2],
                scale: [
                    p.scale[0].max(MIN_SCALE) * px_per_unit_x,
                    p.scale[1].max(MIN_SCALE) * px_per_unit_y,
                ],
                cos: math::cos(p.rotation),
                sin: math::sin(p.rotation),
            }
        })
        .collect()
}

fn render_view(splats: &SplatSet, camera: &Camera) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let feet = footprints(splats, camera);
    let mut order: Vec<usize> = (0..feet.len()).collect();
    order.sort_by(|&a, &b| feet[b].depth.total_cmp(&feet[a].depth).then(a.cmp(&b)));
    let mut image = RenderedImage::transparent(w, h);
    let mut transmit = vec![1.0f64; w * h];
    for idx in order {
        let prim = &splats.primitives[idx];
        if prim.opacity <= 0.0 {
            continue;
        }
        let fp = &feet[idx];
        let Some((r0, r1, c0, c1)) = fp.bounds(w, h) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let m = fp.mahalanobis2(row, col);
                if m > CUTOFF_MAHALANOBIS2 {
                    continue;
                }
                let alpha = prim.opacity * math::exp(-0.5 * m);
                let at = row * w + col;
                let weight = transmit[at] * alpha;
                let px = &mut image.pixels[at];
                for (v, c) in px.iter_mut().zip(&prim.color) {
                    *v += weight * c;
                }
                transmit[at] *= 1.0 - alpha;
            }
        }
    }
    for (px, t) in image.pixels.iter_mut().zip(&transmit) {
        px[3] = 1.0 - t;
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    image
}

/// Renders `splats` from every camera.
pub fn render(splats: &SplatSet, cameras: &[Camera]) -> Result<Vec<RenderedImage>> {
    if cameras.is_empty() {
        return Err(Error::Empty("camera list"));
    }
    Ok(cameras.iter().map(|c| render_view(splats, c)).collect())
}

/// Zeroes the opacity of every primitive whose cell is background (1) in
/// `mask`; all other fields are untouched.
pub fn correct_opacity(splats: &SplatSet, mask: &InstanceMask) -> Result<SplatSet> {
    if mask.height() != splats.height || mask.width() != splats.width {
        return Err(Error::dim(
            "mask vs splat grid",
            splats.height * splats.width,
            mask.height() * mask.width(),
        ));
    }
    let mut out = splats.clone();
    for (p, &bg) in out.primitives.iter_mut().zip(mask.cells()) {
        if bg {
            p.opacity = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{decode_splats, SplatPrimitive};
    use crate::latent::{sample_noise, GridShape};

    fn prim(pos: [f64; 3], opacity: f64, color: [f64; 3]) -> SplatPrimitive {
        SplatPrimitive {
            position: pos,
            scale: [0.08, 0.08],
            rotation: 0.0,
            opacity,
            color,
        }
    }

    fn transparent_set(n: usize) -> SplatSet {
        SplatSet::new(1, n, vec![prim([0.0; 3], 0.0, [1.0; 3]); n]).unwrap()
    }

    #[test]
    fn standard_cameras_are_orthonormal() {
        for c in standard_cameras(64) {
            assert!(c.is_orthonormal(1e-6));
        }
        assert!(Camera::orbit(0, 33.0, 20.0, 8).is_orthonormal(1e-6));
    }

    #[test]
    fn transparent_scene_renders_background() {
        let imgs = render(&transparent_set(4), &standard_cameras(16)).unwrap();
        for img in imgs {
            assert!(img.pixels.iter().all(|p| *p == [0.0; 4]));
        }
    }

    #[test]
    fn single_primitive_peaks_at_center() {
        let set = SplatSet::new(1, 1, vec![prim([0.0; 3], 1.0, [1.0, 0.5, 0.2])]).unwrap();
        let img = &render(&set, &standard_cameras(64)).unwrap()[0];
        // Center (32, 32) lies on the corner shared by four pixels, each
        // half a pixel away on both axes.
        let s: f64 = 0.08 * 32.0;
        let expect = crate::math::exp(-0.5 * (0.25 + 0.25) / (s * s));
        let mut best = 0.0;
        for r in 0..64 {
            for c in 0..64 {
                best = f64::max(best, img.alpha(r, c));
            }
        }
        assert!((best - expect).abs() < 1e-12);
        for (r, c) in [(31, 31), (31, 32), (32, 31), (32, 32)] {
            assert!((img.alpha(r, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn front_primitive_dominates() {
        let set = SplatSet::new(
            1,
            2,
            vec![
                prim([0.0, 0.0, -0.5], 1.0, [0.0, 0.0, 1.0]),
                prim([0.0, 0.0, 0.5], 1.0, [1.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        let front = &render(&set, &standard_cameras(32)).unwrap()[0];
        let px = front.pixel(16, 16);
        assert!(px[0] > 0.8 && px[2] < 0.15, "{px:?}");
        // The back camera sees the other primitive first.
        let back = &render(&set, &standard_cameras(32)).unwrap()[2];
        let px = back.pixel(16, 16);
        assert!(px[2] > 0.8 && px[0] < 0.15, "{px:?}");
    }

    #[test]
    fn zero_camera_list_is_rejected() {
        assert!(render(&transparent_set(1), &[]).is_err());
    }

    #[test]
    fn correction_masks_and_preserves() {
        let shape = GridShape::new(11, 4, 4);
        let splats = decode_splats(&sample_noise(1, shape)).unwrap();
        let none = InstanceMask::empty(4, 4);
        assert_eq!(correct_opacity(&splats, &none).unwrap(), splats);
        let all = InstanceMask::full(4, 4);
        let out = correct_opacity(&splats, &all).unwrap();
        assert!(out.primitives.iter().all(|p| p.opacity == 0.0));
        for (a, b) in out.primitives.iter().zip(&splats.primitives) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.color, b.color);
        }
        assert!(correct_opacity(&splats, &InstanceMask::empty(3, 4)).is_err());
    }

    #[test]
    fn single_cell_correction_never_raises_alpha() {
        let shape = GridShape::new(11, 8, 8);
        let mut z = sample_noise(2, shape);
        z.data_mut().iter_mut().for_each(|v| *v *= 0.3);
        let splats = decode_splats(&z).unwrap();
        let mut mask = InstanceMask::empty(8, 8);
        mask.set(0, 0, true);
        let out = correct_opacity(&splats, &mask).unwrap();
        let changed = out
            .primitives
            .iter()
            .zip(&splats.primitives)
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= 1);
        let cams = standard_cameras(32);
        let before = render(&splats, &cams).unwrap();
        let after = render(&out, &cams).unwrap();
        for (a, b) in after.iter().zip(&before) {
            for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
                assert!(pa[3] <= pb[3] + 1e-15);
            }
        }
    }
}
