//! Preprocessing and dataset I/O: ROI crop + bilinear resize, MIL bag
//! construction, stratified splitting, PPM frames and the JSONL manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{mix_seed, Rect, Split, Video, VideoSample};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Frame directory relative to the manifest.
    pub dir: String,
    pub grade: u8,
    /// `[x, y, w, h]` in pixels.
    pub roi: [usize; 4],
    pub split: Split,
    /// Clip carrying the full-intensity jet; `null` for normal videos.
    pub jet_clip_index: Option<usize>,
    pub n_frames: usize,
}

impl ManifestEntry {
    pub fn from_sample(sample: &VideoSample, dir: String) -> Self {
        Self {
            id: sample.id.clone(),
            dir,
            grade: sample.grade,
            roi: [sample.roi.x, sample.roi.y, sample.roi.w, sample.roi.h],
            split: sample.split,
            jet_clip_index: sample.jet.map(|j| j.jet_clip_index),
            n_frames: sample.video.frames,
        }
    }

    pub fn roi_rect(&self) -> Rect {
        let [x, y, w, h] = self.roi;
        Rect { x, y, w, h }
    }

    pub fn binary_label(&self) -> u8 {
        u8::from(self.grade > 0)
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for entry in entries {
        let line = serde_json::to_string(entry).expect("manifest entries serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        if entry.grade > 2 {
            return Err(Error::format("manifest", format!("line {}: grade {}", n + 1, entry.grade)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.ppm")
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    encoder
        .write_image(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a PPM file as `(width, height, interleaved RGB)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn write_video_frames(dir: &Path, video: &Video) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..video.frames {
        write_ppm(&dir.join(frame_file_name(t)), video.width, video.height, video.frame(t))?;
    }
    Ok(())
}

pub fn read_video_frames(dir: &Path, n_frames: usize) -> Result<Video> {
    let mut data = Vec::new();
    let (mut width, mut height) = (0, 0);
    for t in 0..n_frames {
        let path = dir.join(frame_file_name(t));
        let (w, h, rgb) = read_ppm(&path)?;
        if t == 0 {
            (width, height) = (w, h);
        } else if (w, h) != (width, height) {
            return Err(Error::format(
                "video",
                format!("{} is {w}x{h}, expected {width}x{height}", path.display()),
            ));
        }
        data.extend_from_slice(&rgb);
    }
    Ok(Video {
        frames: n_frames,
        height,
        width,
        data,
    })
}

/// Loads a manifest entry's frames from disk, relative to `root`.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<VideoSample> {
    let video = read_video_frames(&root.join(&entry.dir), entry.n_frames)?;
    Ok(VideoSample {
        id: entry.id.clone(),
        video,
        grade: entry.grade,
        binary_label: entry.binary_label(),
        roi: entry.roi_rect(),
        jet: None,
        split: entry.split,
    })
}

/// Channel-first frames `[T, 3, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frames {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frames {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = 3 * self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

/// Crops every frame to `roi` and resizes it bilinearly (half-pixel centers)
/// to `out_hw`, returning channel-first frames.
pub fn crop_and_resize(video: &Video, roi: Rect, out_hw: (usize, usize)) -> Result<Frames> {
    if !roi.fits_in(video.width, video.height) {
        return Err(Error::invalid(format!(
            "roi {roi:?} outside {}x{} frame",
            video.width, video.height
        )));
    }
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(ow, roi.w);
    let ys = axis(oh, roi.h);
    let mut data = vec![0u8; video.frames * 3 * oh * ow];
    for t in 0..video.frames {
        let out = &mut data[t * 3 * oh * ow..(t + 1) * 3 * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p00 = video.pixel(t, roi.x + x0, roi.y + y0);
                let p01 = video.pixel(t, roi.x + x1, roi.y + y0);
                let p10 = video.pixel(t, roi.x + x0, roi.y + y1);
                let p11 = video.pixel(t, roi.x + x1, roi.y + y1);
                for c in 0..3 {
                    let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                    let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    out[(c * oh + oy) * ow + ox] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(Frames {
        frames: video.frames,
        height: oh,
        width: ow,
        data,
    })
}

/// MIL bag of `I` non-overlapping `T`-frame clips, `[I, T, 3, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceBag {
    pub instances: usize,
    pub clip_len: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<u8>,
    /// Half-open source frame ranges; padded frames index past the source end.
    pub frame_ranges: Vec<(usize, usize)>,
    pub source_id: String,
}

impl InstanceBag {
    pub fn frame(&self, instance: usize, t: usize) -> &[u8] {
        let n = 3 * self.height * self.width;
        let k = instance * self.clip_len + t;
        &self.clips[k * n..(k + 1) * n]
    }

    /// Bag with its instances reordered: new instance `k` is old `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> InstanceBag {
        let n = self.clip_len * 3 * self.height * self.width;
        let mut clips = Vec::with_capacity(self.clips.len());
        for &i in order {
            clips.extend_from_slice(&self.clips[i * n..(i + 1) * n]);
        }
        InstanceBag {
            clips,
            frame_ranges: order.iter().map(|&i| self.frame_ranges[i]).collect(),
            ..self.clone()
        }
    }
}

/// Cuts `instances` consecutive clips of `clip_len` frames starting at frame
/// 0. Videos shorter than `instances * clip_len` are extended cyclically;
/// surplus frames are dropped.
pub fn make_bag(frames: &Frames, instances: usize, clip_len: usize, source_id: &str) -> Result<InstanceBag> {
    if instances == 0 || clip_len == 0 {
        return Err(Error::invalid("instances and clip length must be at least 1"));
    }
    if frames.frames == 0 {
        return Err(Error::invalid("cannot build a bag from an empty video"));
    }
    let needed = instances * clip_len;
    let mut clips = Vec::with_capacity(needed * 3 * frames.height * frames.width);
    for k in 0..needed {
        clips.extend_from_slice(frames.frame(k % frames.frames));
    }
    Ok(InstanceBag {
        instances,
        clip_len,
        height: frames.height,
        width: frames.width,
        clips,
        frame_ranges: (0..instances).map(|i| (i * clip_len, (i + 1) * clip_len)).collect(),
        source_id: source_id.to_string(),
    })
}

/// Convenience: crop, resize and bag one loaded sample.
pub fn sample_to_bag(
    sample: &VideoSample,
    out_hw: (usize, usize),
    instances: usize,
    clip_len: usize,
) -> Result<InstanceBag> {
    let frames = crop_and_resize(&sample.video, sample.roi, out_hw)?;
    make_bag(&frames, instances, clip_len, &sample.id)
}

/// Splits `n` items by `fractions` with largest-remainder rounding. Ties in
/// the remainder go to the earlier split.
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor().max(0.0) as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &s in order.iter().take(n.saturating_sub(assigned)) {
        counts[s] += 1;
    }
    counts
}

/// Re-tags `entries` into train/val/test, stratified within each grade.
pub fn split_dataset(entries: &[ManifestEntry], fractions: [f64; 3], seed: u64) -> Result<Vec<ManifestEntry>> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut out = entries.to_vec();
    for grade in 0..3u8 {
        let mut idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].grade == grade).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, grade as u64));
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), fractions);
        let mut it = idx.into_iter();
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(count) {
                out[i].split = *split;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video_from_fn(frames: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> u8) -> Video {
        let mut data = Vec::with_capacity(frames * h * w * 3);
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Video { frames, height: h, width: w, data }
    }

    #[test]
    fn full_roi_identity_resize() {
        let v = video_from_fn(2, 6, 5, |t, y, x, c| (t * 50 + y * 7 + x * 3 + c * 11) as u8);
        let roi = Rect { x: 0, y: 0, w: 5, h: 6 };
        let f = crop_and_resize(&v, roi, (6, 5)).unwrap();
        for t in 0..2 {
            for y in 0..6 {
                for x in 0..5 {
                    for c in 0..3 {
                        assert_eq!(f.data[((t * 3 + c) * 6 + y) * 5 + x], v.pixel(t, x, y)[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn quarter_roi_keeps_output_dims() {
        let v = video_from_fn(1, 40, 40, |_, y, x, _| (x + y) as u8);
        let f = crop_and_resize(&v, Rect { x: 20, y: 20, w: 20, h: 20 }, (32, 32)).unwrap();
        assert_eq!((f.height, f.width, f.data.len()), (32, 32, 3 * 32 * 32));
    }

    #[test]
    fn roi_outside_frame_is_rejected() {
        let v = video_from_fn(1, 10, 10, |_, _, _, _| 0);
        let err = crop_and_resize(&v, Rect { x: 5, y: 0, w: 6, h: 4 }, (4, 4));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    /// Closed-form bilinear oracle for a 2x2 checkerboard upsampled to 4x4.
    #[test]
    fn checkerboard_bilinear_upsample() {
        let v = video_from_fn(1, 2, 2, |_, y, x, _| if (x + y) % 2 == 0 { 0 } else { 255 });
        let f = crop_and_resize(&v, Rect { x: 0, y: 0, w: 2, h: 2 }, (4, 4)).unwrap();
        // half-pixel source coordinates clamp to [0, 1]: 0, 0.25, 0.75, 1
        let coord = [0.0, 0.25, 0.75, 1.0];
        let src = |y: usize, x: usize| if (x + y) % 2 == 0 { 0.0 } else { 255.0 };
        for oy in 0..4 {
            for ox in 0..4 {
                let (fy, fx) = (coord[oy], coord[ox]);
                let expected = src(0, 0) * (1.0 - fy) * (1.0 - fx)
                    + src(0, 1) * (1.0 - fy) * fx
                    + src(1, 0) * fy * (1.0 - fx)
                    + src(1, 1) * fy * fx;
                assert_eq!(f.data[oy * 4 + ox], (expected as f64).round() as u8, "({oy},{ox})");
            }
        }
        assert_eq!(&f.data[4..8], &[64, 96, 159, 191]);
    }

    fn frames(n: usize) -> Frames {
        Frames {
            frames: n,
            height: 1,
            width: 1,
            data: (0..n).flat_map(|t| [t as u8; 3]).collect(),
        }
    }

    #[test]
    fn bag_exact_fit() {
        let bag = make_bag(&frames(48), 3, 16, "a").unwrap();
        assert_eq!(bag.frame_ranges, vec![(0, 16), (16, 32), (32, 48)]);
        assert_eq!(bag.frame(2, 15)[0], 47);
    }

    #[test]
    fn bag_truncates_long_videos() {
        let bag = make_bag(&frames(60), 3, 16, "a").unwrap();
        assert_eq!(bag.frame_ranges, vec![(0, 16), (16, 32), (32, 48)]);
        assert_eq!(bag.clips.len(), 48 * 3);
    }

    #[test]
    fn bag_pads_short_videos_cyclically() {
        let bag = make_bag(&frames(40), 3, 16, "a").unwrap();
        let clip2: Vec<u8> = (0..16).map(|t| bag.frame(2, t)[0]).collect();
        let expected: Vec<u8> = (32..40).chain(0..8).collect();
        assert_eq!(clip2, expected);
    }

    #[test]
    fn empty_video_is_rejected() {
        assert!(make_bag(&frames(0), 3, 16, "a").is_err());
        assert!(make_bag(&frames(4), 0, 16, "a").is_err());
    }

    proptest! {
        #[test]
        fn bag_ranges_never_overlap(total in 1usize..120, inst in 1usize..5, len in 1usize..20) {
            let bag = make_bag(&frames(total), inst, len, "p").unwrap();
            prop_assert_eq!(bag.clips.len(), inst * len * 3);
            for (i, a) in bag.frame_ranges.iter().enumerate() {
                prop_assert_eq!(a.1 - a.0, len);
                for b in &bag.frame_ranges[i + 1..] {
                    prop_assert!(a.1 <= b.0 || b.1 <= a.0);
                }
            }
        }
    }

    fn entries(per_grade: [usize; 3]) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for (g, &n) in per_grade.iter().enumerate() {
            for k in 0..n {
                out.push(ManifestEntry {
                    id: format!("g{g}_{k}"),
                    dir: String::new(),
                    grade: g as u8,
                    roi: [0, 0, 1, 1],
                    split: Split::Test,
                    jet_clip_index: None,
                    n_frames: 48,
                });
            }
        }
        out
    }

    fn histogram(es: &[ManifestEntry], grade: u8) -> [usize; 3] {
        let mut h = [0; 3];
        for e in es.iter().filter(|e| e.grade == grade) {
            h[e.split as usize] += 1;
        }
        h
    }

    #[test]
    fn all_train_fraction() {
        let out = split_dataset(&entries([4, 3, 2]), [1.0, 0.0, 0.0], 1).unwrap();
        assert!(out.iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn largest_remainder_counts() {
        let out = split_dataset(&entries([10, 0, 0]), [0.5, 0.2, 0.3], 1).unwrap();
        assert_eq!(histogram(&out, 0), [5, 2, 3]);
        assert_eq!(largest_remainder(7, [0.5, 0.25, 0.25]), [3, 2, 2]);
    }

    #[test]
    fn reproduces_published_grade0_split() {
        let f = [450.0 / 965.0, 112.0 / 965.0, 403.0 / 965.0];
        assert_eq!(largest_remainder(965, f), [450, 112, 403]);
        let g1 = [296.0 / 677.0, 74.0 / 677.0, 307.0 / 677.0];
        assert_eq!(largest_remainder(677, g1), [296, 74, 307]);
        let g2 = [103.0 / 226.0, 25.0 / 226.0, 98.0 / 226.0];
        assert_eq!(largest_remainder(226, g2), [103, 25, 98]);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        assert!(split_dataset(&entries([2, 2, 2]), [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let e = entries([7, 5, 3]);
        let a = split_dataset(&e, [0.6, 0.2, 0.2], 42).unwrap();
        let b = split_dataset(&e, [0.6, 0.2, 0.2], 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let rgb: Vec<u8> = (0..5 * 4 * 3).map(|v| (v * 3) as u8).collect();
        write_ppm(&path, 5, 4, &rgb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(read_ppm(&path).unwrap(), (5, 4, rgb));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut es = entries([1, 1, 0]);
        es[1].jet_clip_index = Some(2);
        write_manifest(&path, &es).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), es);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"jet_clip_index\":null"));
        std::fs::write(&path, "{\"id\":\"x\"}\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));
        assert!(matches!(read_manifest(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
