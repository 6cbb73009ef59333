//! Deterministic generator of apical-four-chamber color-Doppler-like videos.
//!
//! Each video shows four grayscale chambers pulsating with a fixed cardiac
//! period. MR videos add a red/blue mosaic jet inside the left-atrium region
//! whose area, duration and wall-hugging angle grow with the grade. The jet is
//! drawn at full intensity only inside one MIL clip (`jet_clip_index`) and at
//! 25% blend elsewhere, which gives instance selection a ground truth.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ManifestEntry};
use crate::error::{Error, Result};

pub const CARDIAC_PERIOD: usize = 12;
pub const MIN_FRAMES: usize = 48;
pub const MIN_SIDE: usize = 64;
/// Blend weight of the jet outside the clip that carries it.
pub const ATTENUATION: f64 = 0.25;

pub const GRADE1_AREA: (f64, f64) = (0.01, 0.04);
pub const GRADE2_AREA: (f64, f64) = (0.08, 0.20);
pub const GRADE1_DURATION: (f64, f64) = (0.25, 0.45);
pub const GRADE2_DURATION: (f64, f64) = (0.50, 0.75);
pub const GRADE1_ECCENTRICITY: (f64, f64) = (0.0, 0.3);
pub const GRADE2_ECCENTRICITY: (f64, f64) = (0.0, 0.9);

const JET_RED: [f64; 3] = [230.0, 40.0, 40.0];
const JET_BLUE: [f64; 3] = [40.0, 80.0, 230.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JetParams {
    pub area_fraction: f64,
    pub duration_fraction: f64,
    pub eccentricity: f64,
    pub jet_clip_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// RGB video, frames stored back to back as interleaved 8-bit `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Video {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, x: usize, y: usize) -> [u8; 3] {
        let o = ((t * self.height + y) * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub video: Video,
    pub grade: u8,
    pub binary_label: u8,
    pub roi: Rect,
    pub jet: Option<JetParams>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for VideoDims {
    fn default() -> Self {
        Self {
            frames: 48,
            height: 80,
            width: 80,
        }
    }
}

/// Samples the jet parameters of one video. `instances` bounds the clip index.
pub fn grade_params(grade: u8, instances: usize, rng: &mut impl Rng) -> Result<JetParams> {
    if instances == 0 {
        return Err(Error::invalid("instances must be at least 1"));
    }
    let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
    match grade {
        0 => Ok(JetParams {
            area_fraction: 0.0,
            duration_fraction: 0.0,
            eccentricity: 0.0,
            jet_clip_index: 0,
        }),
        1 => Ok(JetParams {
            area_fraction: draw(rng, GRADE1_AREA),
            duration_fraction: draw(rng, GRADE1_DURATION),
            eccentricity: draw(rng, GRADE1_ECCENTRICITY),
            jet_clip_index: rng.gen_range(0..instances),
        }),
        2 => Ok(JetParams {
            area_fraction: draw(rng, GRADE2_AREA),
            duration_fraction: draw(rng, GRADE2_DURATION),
            eccentricity: draw(rng, GRADE2_ECCENTRICITY),
            jet_clip_index: rng.gen_range(0..instances),
        }),
        g => Err(Error::invalid(format!("grade must be 0, 1 or 2, got {g}"))),
    }
}

/// Left-atrium region inside the ROI, where jets are drawn.
pub fn atrium_region(roi: Rect) -> Rect {
    let x0 = roi.x + (0.48 * roi.w as f64).round() as usize;
    let x1 = roi.x + (0.92 * roi.w as f64).round() as usize;
    let y0 = roi.y + (0.56 * roi.h as f64).round() as usize;
    let y1 = roi.y + (0.96 * roi.h as f64).round() as usize;
    Rect {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Clip length assumed when deciding which frames carry the full-intensity jet.
pub const CLIP_LEN: usize = 16;

#[derive(Clone, Copy, Debug)]
struct Chamber {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// Radius modulation amplitude; negative for anti-phase (atria).
    swing: f64,
}

const CHAMBERS: [Chamber; 4] = [
    Chamber { cx: 0.30, cy: 0.32, rx: 0.13, ry: 0.22, swing: 0.12 },
    Chamber { cx: 0.68, cy: 0.32, rx: 0.15, ry: 0.24, swing: 0.12 },
    Chamber { cx: 0.30, cy: 0.76, rx: 0.13, ry: 0.14, swing: -0.08 },
    Chamber { cx: 0.68, cy: 0.76, rx: 0.16, ry: 0.15, swing: -0.08 },
];

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn jet_ellipse(jet: &JetParams, atrium: Rect) -> Option<Ellipse> {
    if jet.area_fraction <= 0.0 {
        return None;
    }
    let area = jet.area_fraction * atrium.area() as f64;
    let aspect = 2.0;
    let a = (area * aspect / PI).sqrt();
    let b = (area / (aspect * PI)).sqrt();
    // central jets point straight down from the valve; eccentric ones lean
    // toward the lateral wall
    let theta = PI / 2.0 - jet.eccentricity * PI / 3.0;
    let (s, c) = theta.sin_cos();
    let hx = (a * a * c * c + b * b * s * s).sqrt();
    let hy = (a * a * s * s + b * b * c * c).sqrt();
    let (x0, x1) = (atrium.x as f64, (atrium.x + atrium.w) as f64);
    let (y0, y1) = (atrium.y as f64, (atrium.y + atrium.h) as f64);
    let valve_x = x0 + 0.45 * (x1 - x0);
    let cx = valve_x + a * c + jet.eccentricity * 0.35 * (x1 - x0);
    let cy = y0 + a * s;
    let clamp = |v: f64, lo: f64, hi: f64| if lo > hi { (lo + hi) / 2.0 } else { v.clamp(lo, hi) };
    Some(Ellipse {
        cx: clamp(cx, x0 + hx, x1 - hx),
        cy: clamp(cy, y0 + hy, y1 - hy),
        a,
        b,
        theta,
    })
}

/// Renders one video. The ROI is a centered-ish square covering 80% of the
/// shorter side, jittered by the RNG.
pub fn render_video(
    jet: &JetParams,
    grade: u8,
    dims: VideoDims,
    rng: &mut impl Rng,
) -> Result<VideoSample> {
    if dims.frames < MIN_FRAMES || dims.height < MIN_SIDE || dims.width < MIN_SIDE {
        return Err(Error::invalid(format!(
            "video dims {}x{}x{} below minimum {MIN_FRAMES}x{MIN_SIDE}x{MIN_SIDE}",
            dims.frames, dims.height, dims.width
        )));
    }
    if grade > 2 {
        return Err(Error::invalid(format!("grade must be 0, 1 or 2, got {grade}")));
    }
    let (h, w) = (dims.height, dims.width);
    let side = ((0.8 * h.min(w) as f64) as usize) & !1;
    let roi = Rect {
        x: rng.gen_range(0..=w - side),
        y: rng.gen_range(0..=h - side),
        w: side,
        h: side,
    };
    let atrium = atrium_region(roi);
    let phase_offset = rng.gen_range(0..CARDIAC_PERIOD);
    let ellipse = if grade == 0 { None } else { jet_ellipse(jet, atrium) };

    let mut data = vec![0u8; dims.frames * h * w * 3];
    for t in 0..dims.frames {
        let phase = ((t + phase_offset) % CARDIAC_PERIOD) as f64 / CARDIAC_PERIOD as f64;
        let beat = (2.0 * PI * phase).cos();
        let jet_on = grade > 0 && phase < jet.duration_fraction;
        let full = t / CLIP_LEN == jet.jet_clip_index;
        let strength = if full { 1.0 } else { ATTENUATION };
        let frame = &mut data[t * h * w * 3..(t + 1) * h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let noise: f64 = rng.gen_range(-18.0..18.0);
                let gray = if roi.contains(x, y) {
                    let u = (x - roi.x) as f64 / roi.w as f64;
                    let v = (y - roi.y) as f64 / roi.h as f64;
                    let inside = CHAMBERS.iter().any(|ch| {
                        let k = 1.0 + ch.swing * beat;
                        let du = (u - ch.cx) / (ch.rx * k);
                        let dv = (v - ch.cy) / (ch.ry * k);
                        du * du + dv * dv <= 1.0
                    });
                    if inside {
                        28.0 + noise * 0.5
                    } else {
                        125.0 + noise
                    }
                } else {
                    8.0
                };
                let mut rgb = [gray; 3];
                if let Some(el) = ellipse.filter(|_| jet_on) {
                    if atrium.contains(x, y) && el.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        let palette = if rng.gen_bool(0.6) { JET_RED } else { JET_BLUE };
                        for c in 0..3 {
                            rgb[c] = strength * palette[c] + (1.0 - strength) * gray;
                        }
                    }
                }
                let o = (y * w + x) * 3;
                for c in 0..3 {
                    frame[o + c] = rgb[c].round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(VideoSample {
        id: String::new(),
        video: Video {
            frames: dims.frames,
            height: h,
            width: w,
            data,
        },
        grade,
        binary_label: u8::from(grade > 0),
        roi,
        jet: (grade > 0).then_some(*jet),
        split: Split::Train,
    })
}

/// Per-split, per-grade sample counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> [usize; 3] {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s).iter().sum::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub counts: SplitCounts,
    #[serde(default)]
    pub dims: VideoDims,
    #[serde(default = "default_instances")]
    pub instances: usize,
}

fn default_instances() -> usize {
    3
}

/// SplitMix64 finalizer, used to derive independent per-video seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one video from its global index.
pub fn generate_sample(
    index: usize,
    grade: u8,
    split: Split,
    config: &DatasetConfig,
    seed: u64,
) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let jet = grade_params(grade, config.instances, &mut rng)?;
    let mut sample = render_video(&jet, grade, config.dims, &mut rng)?;
    sample.id = format!("v{index:05}");
    sample.split = split;
    Ok(sample)
}

/// Writes every video as a directory of P6 frames plus `manifest.jsonl`.
/// Returns the manifest entries in file order.
pub fn gen_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let videos_dir = out_dir.join("videos");
    std::fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
    let mut manifest = Vec::with_capacity(config.counts.total());
    let mut index = 0;
    for split in Split::ALL {
        for (grade, &count) in config.counts.get(split).iter().enumerate() {
            for _ in 0..count {
                let sample = generate_sample(index, grade as u8, split, config, seed)?;
                let rel: PathBuf = Path::new("videos").join(&sample.id);
                dataio::write_video_frames(&out_dir.join(&rel), &sample.video)?;
                manifest.push(ManifestEntry::from_sample(&sample, rel.to_string_lossy().into_owned()));
                index += 1;
            }
        }
    }
    dataio::write_manifest(&out_dir.join(dataio::MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_colored(p: [u8; 3]) -> bool {
        p[0] != p[1] || p[1] != p[2]
    }

    #[test]
    fn normal_params_have_no_jet() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = grade_params(0, 3, &mut rng).unwrap();
        assert_eq!(p.area_fraction, 0.0);
        assert_eq!(p.duration_fraction, 0.0);
    }

    #[test]
    fn params_are_deterministic_per_seed() {
        let a = grade_params(1, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = grade_params(1, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_grade_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(grade_params(3, 3, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn grade_area_ranges_are_disjoint_by_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut max1 = f64::MIN;
        let mut min2 = f64::MAX;
        for _ in 0..10_000 {
            let p1 = grade_params(1, 3, &mut rng).unwrap();
            let p2 = grade_params(2, 3, &mut rng).unwrap();
            max1 = max1.max(p1.area_fraction);
            min2 = min2.min(p2.area_fraction);
            assert!(p2.duration_fraction > GRADE1_DURATION.1);
            assert!(p1.eccentricity <= 0.3 && p2.eccentricity <= 0.9);
        }
        assert!(min2 > max1, "grade-2 min {min2} must exceed grade-1 max {max1}");
    }

    #[test]
    fn mean_area_increases_with_grade() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means: Vec<f64> = (0..3u8)
            .map(|g| {
                (0..100)
                    .map(|_| grade_params(g, 3, &mut rng).unwrap().area_fraction)
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn small_dims_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jet = grade_params(1, 3, &mut rng).unwrap();
        let dims = VideoDims { frames: 40, height: 80, width: 80 };
        assert!(render_video(&jet, 1, dims, &mut rng).is_err());
        let dims = VideoDims { frames: 48, height: 63, width: 80 };
        assert!(render_video(&jet, 1, dims, &mut rng).is_err());
    }

    #[test]
    fn normal_video_has_no_colored_atrium_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let jet = grade_params(0, 3, &mut rng).unwrap();
        let s = render_video(&jet, 0, VideoDims::default(), &mut rng).unwrap();
        let atrium = atrium_region(s.roi);
        for t in 0..s.video.frames {
            for y in atrium.y..atrium.y + atrium.h {
                for x in atrium.x..atrium.x + atrium.w {
                    assert!(!is_colored(s.video.pixel(t, x, y)));
                }
            }
        }
        assert!(s.jet.is_none());
        assert_eq!(s.binary_label, 0);
    }

    #[test]
    fn rendering_is_byte_identical_per_seed() {
        let jet = JetParams {
            area_fraction: 0.1,
            duration_fraction: 0.6,
            eccentricity: 0.4,
            jet_clip_index: 1,
        };
        let a = render_video(&jet, 2, VideoDims::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = render_video(&jet, 2, VideoDims::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.video.data, b.video.data);
        assert_eq!(a.roi, b.roi);
    }

    /// Pixel-scan oracle: colored pixels in the atrium during full-intensity
    /// jet frames must match the requested area within 10%.
    #[test]
    fn jet_pixel_count_matches_area_fraction() {
        for (ecc, seed) in [(0.0, 4u64), (0.5, 5), (0.9, 6)] {
            let jet = JetParams {
                area_fraction: 0.15,
                duration_fraction: 0.6,
                eccentricity: ecc,
                jet_clip_index: 2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = render_video(&jet, 2, VideoDims::default(), &mut rng).unwrap();
            let atrium = atrium_region(s.roi);
            let target = 0.15 * atrium.area() as f64;
            let mut on_frames = 0;
            for t in 2 * CLIP_LEN..3 * CLIP_LEN {
                let count = (atrium.y..atrium.y + atrium.h)
                    .flat_map(|y| (atrium.x..atrium.x + atrium.w).map(move |x| (x, y)))
                    .filter(|&(x, y)| is_colored(s.video.pixel(t, x, y)))
                    .count();
                if count > 0 {
                    on_frames += 1;
                    let rel = (count as f64 - target).abs() / target;
                    assert!(rel <= 0.10, "ecc {ecc} frame {t}: {count} vs {target}");
                }
            }
            assert!(on_frames > 0);
        }
    }

    #[test]
    fn only_the_jet_clip_is_full_intensity() {
        let jet = JetParams {
            area_fraction: 0.12,
            duration_fraction: 0.7,
            eccentricity: 0.2,
            jet_clip_index: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = render_video(&jet, 2, VideoDims::default(), &mut rng).unwrap();
        let atrium = atrium_region(s.roi);
        // max channel spread per clip: full intensity shows much stronger color
        let spread = |clip: usize| {
            (clip * CLIP_LEN..(clip + 1) * CLIP_LEN)
                .flat_map(|t| {
                    let v = &s.video;
                    (atrium.y..atrium.y + atrium.h).flat_map(move |y| {
                        (atrium.x..atrium.x + atrium.w).map(move |x| {
                            let p = v.pixel(t, x, y);
                            p.iter().max().unwrap() - p.iter().min().unwrap()
                        })
                    })
                })
                .max()
                .unwrap()
        };
        let (s0, s1, s2) = (spread(0), spread(1), spread(2));
        assert!(s1 > 2 * s0 && s1 > 2 * s2, "{s0} {s1} {s2}");
    }

    #[test]
    fn cardiac_period_fits_in_a_clip() {
        assert!(CARDIAC_PERIOD <= CLIP_LEN);
    }
}
