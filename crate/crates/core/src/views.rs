//! Orthographic multiview depth rendering of face point clouds.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::datagen::{FaceSequence, Point};
use crate::error::{Error, Result};

/// Occupied pixels are mapped into `[DEPTH_FLOOR, 1]` so that the farthest
/// visible point stays distinguishable from background.
pub const DEPTH_FLOOR: f64 = 0.1;
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewName {
    Frontal,
    Left,
    Right,
}

impl ViewName {
    /// Canonical multiview order.
    pub const ALL: [ViewName; 3] = [ViewName::Frontal, ViewName::Left, ViewName::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewName::Frontal => "frontal",
            ViewName::Left => "left",
            ViewName::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngle {
    pub name: ViewName,
    pub yaw_degrees: f64,
}

impl ViewAngle {
    pub const fn frontal() -> Self {
        ViewAngle {
            name: ViewName::Frontal,
            yaw_degrees: 0.0,
        }
    }

    /// The symmetric triple (frontal, left = -yaw, right = +yaw).
    pub fn triple(side_yaw_degrees: f64) -> [ViewAngle; 3] {
        let yaw = side_yaw_degrees.abs();
        [
            ViewAngle::frontal(),
            ViewAngle {
                name: ViewName::Left,
                yaw_degrees: -yaw,
            },
            ViewAngle {
                name: ViewName::Right,
                yaw_degrees: yaw,
            },
        ]
    }
}

impl Default for ViewAngle {
    fn default() -> Self {
        ViewAngle::frontal()
    }
}

pub const DEFAULT_SIDE_YAW: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Depth,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const fn square(n: usize) -> Self {
        Resolution {
            height: n,
            width: n,
        }
    }

    pub fn pixels(self) -> usize {
        self.height * self.width
    }

    pub fn validate(self) -> Result<()> {
        if self.height < MIN_RESOLUTION || self.width < MIN_RESOLUTION {
            return Err(Error::invalid(format!(
                "resolution {}x{} below minimum {MIN_RESOLUTION}x{MIN_RESOLUTION}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution::square(64)
    }
}

/// Row-major H x W image with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewImage {
    pub view: ViewAngle,
    pub kind: ImageKind,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ViewImage {
    pub fn zeros(view: ViewAngle, kind: ImageKind, res: Resolution) -> Self {
        ViewImage {
            view,
            kind,
            height: res.height,
            width: res.width,
            pixels: vec![0.0; res.pixels()],
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            height: self.height,
            width: self.width,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn occupied(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0.0).count()
    }

    /// Mirrors columns.
    pub fn hflip(&self) -> ViewImage {
        let mut out = self.clone();
        for (dst, src) in out
            .pixels
            .chunks_exact_mut(self.width)
            .zip(self.pixels.chunks_exact(self.width))
        {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    /// 8-bit grayscale PNG, value = round(255 * pixel).
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(buf.into_inner())
    }

    /// Decodes any image the codec understands, converting to 8-bit luma.
    pub fn from_png(bytes: &[u8], view: ViewAngle, kind: ImageKind) -> Result<ViewImage> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Image(e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(ViewImage {
            view,
            kind,
            height: h as usize,
            width: w as usize,
            pixels: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }
}

/// The three views of one sample, always ordered (frontal, left, right).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiviewSample {
    pub views: [ViewImage; 3],
}

impl MultiviewSample {
    pub fn get(&self, name: ViewName) -> &ViewImage {
        &self.views[name.index()]
    }
}

/// Rotates about the vertical axis by `yaw_degrees`.
#[inline]
pub fn rotate_yaw(p: Point, yaw_degrees: f64) -> [f64; 3] {
    let (s, c) = yaw_degrees.to_radians().sin_cos();
    let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
    [c * x + s * z, y, -s * x + c * z]
}

/// Orthographic z-buffered depth projection of one frame.
///
/// `[-1, 1]^2` maps onto the pixel grid with +y at row 0. Each pixel keeps the
/// largest rotated z (nearest the viewer); occupied pixels are min-max
/// normalised into `[DEPTH_FLOOR, 1]` and empty pixels are exactly 0.
pub fn project(points: &[Point], view: ViewAngle, res: Resolution) -> Result<ViewImage> {
    if points.is_empty() {
        return Err(Error::invalid("cannot project an empty point set"));
    }
    res.validate()?;
    let (h, w) = (res.height, res.width);
    let mut zbuf = vec![f64::NEG_INFINITY; h * w];
    for &p in points {
        let [x, y, z] = rotate_yaw(p, view.yaw_degrees);
        if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
            continue;
        }
        let col = (((x + 1.0) * 0.5 * w as f64) as usize).min(w - 1);
        let row = (((1.0 - y) * 0.5 * h as f64) as usize).min(h - 1);
        let cell = &mut zbuf[row * w + col];
        if z > *cell {
            *cell = z;
        }
    }
    let (lo, hi) = zbuf
        .iter()
        .filter(|z| z.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| {
            (lo.min(z), hi.max(z))
        });
    let span = hi - lo;
    let pixels = zbuf
        .into_iter()
        .map(|z| {
            if !z.is_finite() {
                0.0
            } else if span > 0.0 {
                1.0 - (1.0 - DEPTH_FLOOR) * (hi - z) / span
            } else {
                1.0
            }
        })
        .collect();
    Ok(ViewImage {
        view,
        kind: ImageKind::Depth,
        height: h,
        width: w,
        pixels,
    })
}

/// Renders one frame of `seq` from the frontal, left and right views.
pub fn render_multiview(
    seq: &FaceSequence,
    frame_index: usize,
    res: Resolution,
    side_yaw_degrees: f64,
) -> Result<MultiviewSample> {
    let frame = seq.frames.get(frame_index).ok_or_else(|| {
        Error::invalid(format!(
            "frame index {frame_index} out of range for a {}-frame sequence",
            seq.frames.len()
        ))
    })?;
    let [f, l, r] = ViewAngle::triple(side_yaw_degrees);
    Ok(MultiviewSample {
        views: [project(frame, f, res)?, project(frame, l, res)?, project(frame, r, res)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};
    use proptest::prelude::*;

    fn res64() -> Resolution {
        Resolution::square(64)
    }

    #[test]
    fn single_point_lands_at_center() {
        let img = project(&[[0.0, 0.0, 0.0]], ViewAngle::frontal(), res64()).unwrap();
        assert_eq!(img.occupied(), 1);
        assert_eq!(img.get(32, 32), 1.0);
    }

    #[test]
    fn z_buffer_keeps_nearest_point() {
        let pts = [[0.1, 0.1, 0.2], [0.1, 0.1, 0.7], [-0.5, -0.5, 0.0]];
        let img = project(&pts, ViewAngle::frontal(), res64()).unwrap();
        let row = ((1.0 - 0.1f64) * 32.0) as usize;
        let col = ((1.1f64) * 32.0) as usize;
        // 0.7 is the max depth, so it normalises to exactly 1.
        assert_eq!(img.get(row, col), 1.0);
        assert_eq!(img.occupied(), 2);
    }

    #[test]
    fn empty_cloud_and_tiny_resolution_rejected() {
        assert!(project(&[], ViewAngle::frontal(), res64()).is_err());
        assert!(project(&[[0.0; 3]], ViewAngle::frontal(), Resolution::square(4)).is_err());
    }

    #[test]
    fn left_view_is_mirror_of_right_view_of_mirrored_cloud() {
        let spec = CorpusSpec {
            points_per_face: 1500,
            frames_per_sequence: 2,
            ..CorpusSpec::default()
        };
        let seq = &generate_corpus(&spec).unwrap()[3];
        let cloud = seq.apex();
        let mirrored: Vec<Point> = cloud.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let [_, left, right] = ViewAngle::triple(30.0);
        let a = project(cloud, left, res64()).unwrap();
        let b = project(&mirrored, right, res64()).unwrap().hflip();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn render_multiview_shapes_and_order() {
        let spec = CorpusSpec {
            points_per_face: 1024,
            frames_per_sequence: 4,
            ..CorpusSpec::default()
        };
        let seq = &generate_corpus(&spec).unwrap()[0];
        let mv = render_multiview(seq, 3, res64(), DEFAULT_SIDE_YAW).unwrap();
        for (img, name) in mv.views.iter().zip(ViewName::ALL) {
            assert_eq!(img.view.name, name);
            assert_eq!((img.height, img.width), (64, 64));
            assert!(img.occupied() > 0);
        }
        assert_eq!(mv, render_multiview(seq, 3, res64(), DEFAULT_SIDE_YAW).unwrap());
        assert!(render_multiview(seq, 4, res64(), DEFAULT_SIDE_YAW).is_err());
    }

    #[test]
    fn zero_expression_renders_match_across_emotions() {
        let spec = CorpusSpec {
            points_per_face: 800,
            frames_per_sequence: 3,
            expression_scale: 0.0,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let happy = render_multiview(&c[0], 2, res64(), 30.0).unwrap();
        let sad = render_multiview(&c[1], 2, res64(), 30.0).unwrap();
        assert_eq!(happy, sad);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let img = project(&[[0.0, 0.0, 0.0], [0.5, 0.5, -0.3]], ViewAngle::frontal(), res64())
            .unwrap();
        let back = ViewImage::from_png(&img.to_png().unwrap(), img.view, ImageKind::Depth).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(
            (-0.9f32..0.9, -0.9f32..0.9, -0.5f32..0.5).prop_map(|(x, y, z)| [x, y, z]),
            1..200,
        )
    }

    proptest! {
        #[test]
        fn occupied_depths_in_unit_interval(pts in cloud(), yaw in -45.0f64..45.0) {
            let view = ViewAngle { name: ViewName::Left, yaw_degrees: yaw };
            let img = project(&pts, view, Resolution::square(16)).unwrap();
            prop_assert!(img.pixels.iter().all(|&p| p == 0.0 || (p > 0.0 && p <= 1.0)));
        }

        #[test]
        fn point_order_does_not_matter(pts in cloud(), seed in any::<u64>()) {
            let mut shuffled = pts.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = (crate::rng::mix64(seed ^ i as u64) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            let a = project(&pts, ViewAngle::frontal(), Resolution::square(16)).unwrap();
            let b = project(&shuffled, ViewAngle::frontal(), Resolution::square(16)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn invariant_to_z_translation(pts in cloud(), dz in -0.4f32..0.4) {
            let moved: Vec<Point> = pts.iter().map(|p| [p[0], p[1], p[2] + dz]).collect();
            let a = project(&pts, ViewAngle::frontal(), Resolution::square(16)).unwrap();
            let b = project(&moved, ViewAngle::frontal(), Resolution::square(16)).unwrap();
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
