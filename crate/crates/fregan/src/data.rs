//! Dataset plumbing: frame ingestion and normalization, sliding-window
//! triplet extraction, the seeded train/test split, the manifest format that
//! ties them together on disk, and a synthetic moving-square generator for
//! self-contained runs.
//!
//! Ingestion works on directories of 8-bit RGB PNG frames, one directory per
//! source clip; container demuxing is out of scope (see README for an
//! extraction recipe).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ColorType, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_HEADER: &str = "FREGAN-MANIFEST v1";
pub const DEFAULT_TEST_FRACTION: f64 = 0.13;

/// Byte to [-1, 1].
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// [-1, 1] back to a byte, clamping out-of-range values and rounding ties
/// away from zero. Exact inverse of `normalize` for every byte.
pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// (1, 3, S, S), values in [-1, 1].
    pub image: Tensor<f32>,
    pub source_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    pub x_n: Frame,
    pub x_np1: Frame,
    pub x_np2: Frame,
}

// ---------------------------------------------------------------------------
// Image file IO
// ---------------------------------------------------------------------------

fn tensor_from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = normalize(raw[(y * w + x) * 3 + c]);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("sized above")
}

fn rgb8_from_tensor(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!("expected a single 3-channel image, found {s}"),
        });
    }
    let (h, w) = (s.h, s.w);
    let mut raw = vec![0u8; 3 * h * w];
    let data = t.data();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                raw[(y * w + x) * 3 + c] = denormalize(data[(c * h + y) * w + x]);
            }
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))
}

/// Decodes one 8-bit RGB PNG, resizing (bilinear) when its extent differs
/// from `image_size`. Frames already at the target size pass through with
/// their bytes intact.
pub fn load_frame_image(path: &Path, image_size: usize) -> Result<Tensor<f32>> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| {
        Error::io(path, std::io::Error::other(format!("cannot decode image: {e}")))
    })?;
    if decoded.color() != ColorType::Rgb8 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!("expected 8-bit RGB, found {:?}", decoded.color()),
        });
    }
    let rgb = decoded.into_rgb8();
    let target = image_size as u32;
    let rgb = if rgb.width() == target && rgb.height() == target {
        rgb
    } else {
        image::imageops::resize(&rgb, target, target, FilterType::Triangle)
    };
    Ok(tensor_from_rgb8(&rgb))
}

/// Writes a normalized (1, 3, H, W) tensor as an 8-bit RGB PNG.
pub fn save_frame_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = rgb8_from_tensor(t)?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: format!("cannot write image: {e}"),
    })
}

/// Loads every PNG in a directory in filename order. The directory name
/// becomes the source id; the position in the ordering becomes the index.
pub fn load_frame_sequence(dir: &Path, image_size: usize) -> Result<Vec<Frame>> {
    let source_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".into());
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            paths.push(path);
        }
    }
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    for (index, path) in paths.iter().enumerate() {
        frames.push(Frame {
            image: load_frame_image(path, image_size)?,
            source_id: source_id.clone(),
            index,
        });
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Triplets
// ---------------------------------------------------------------------------

/// Overlapping stride-1 windows: k frames yield k-2 triplets. The input must
/// be one consecutive sequence from a single source.
pub fn extract_triplets(frames: &[Frame]) -> Result<Vec<FrameTriplet>> {
    for pair in frames.windows(2) {
        if pair[0].source_id != pair[1].source_id {
            return Err(Error::Contract(format!(
                "frames from different sources: {} vs {}",
                pair[0].source_id, pair[1].source_id
            )));
        }
        if pair[1].index != pair[0].index + 1 {
            return Err(Error::Contract(format!(
                "frames not consecutive: index {} follows {}",
                pair[1].index, pair[0].index
            )));
        }
    }
    Ok(frames
        .windows(3)
        .map(|w| FrameTriplet { x_n: w[0].clone(), x_np1: w[1].clone(), x_np2: w[2].clone() })
        .collect())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One triplet on disk: three frame files from one source. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub split: Split,
    pub source_id: String,
    pub start_index: usize,
    pub paths: [PathBuf; 3],
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<TripletRecord>,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> Vec<&TripletRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Individual triplets shuffle independently; the test block hits the
    /// requested fraction within one record.
    PerTriplet,
    /// Whole sources move together, so test triplets never share a clip with
    /// training ones; the fraction is matched as closely as whole clips
    /// allow.
    PerVideo,
}

fn test_count_target(total: usize, fraction: f64) -> usize {
    // Plain ceil would round 100 * 0.13 (= 13.000000000000002 in floats) up
    // to 14; back off by a relative epsilon first.
    let raw = fraction * total as f64;
    (raw - 1e-9 * total.max(1) as f64).ceil().max(0.0) as usize
}

/// Tags each record train or test after a seeded shuffle; the first
/// ceil(fraction * count) shuffled records (or whole sources covering at
/// least that many) become the test split.
pub fn split_dataset(
    mut records: Vec<TripletRecord>,
    test_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetManifest> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty triplet list".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = test_count_target(records.len(), test_fraction);
    match mode {
        SplitMode::PerTriplet => {
            records.shuffle(&mut rng);
            for (i, r) in records.iter_mut().enumerate() {
                r.split = if i < target { Split::Test } else { Split::Train };
            }
            Ok(DatasetManifest { records })
        }
        SplitMode::PerVideo => {
            let mut by_source: BTreeMap<String, Vec<TripletRecord>> = BTreeMap::new();
            for r in records {
                by_source.entry(r.source_id.clone()).or_default().push(r);
            }
            let mut sources: Vec<String> = by_source.keys().cloned().collect();
            sources.shuffle(&mut rng);
            let mut out = Vec::new();
            let mut test_count = 0usize;
            for source in sources {
                let mut group = by_source.remove(&source).expect("key from map");
                let tag = if test_count < target { Split::Test } else { Split::Train };
                for r in &mut group {
                    r.split = tag;
                }
                if tag == Split::Test {
                    test_count += group.len();
                }
                out.extend(group);
            }
            Ok(DatasetManifest { records: out })
        }
    }
}

fn path_field(path: &Path) -> Result<&str> {
    let s = path.to_str().ok_or_else(|| {
        Error::Config(format!("path {} is not valid UTF-8", path.display()))
    })?;
    if s.contains('\t') || s.contains('\n') || s.is_empty() {
        return Err(Error::Config(format!("path {s:?} cannot be stored in a manifest")));
    }
    Ok(s)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.split.as_str(),
            r.source_id,
            r.start_index,
            path_field(&r.paths[0])?,
            path_field(&r.paths[1])?,
            path_field(&r.paths[2])?,
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Parse { line: 1, detail: "no records".into() }),
    };
    if header != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            detail: format!("bad header {header:?}, expected {MANIFEST_HEADER:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let split = Split::parse(fields[0]).ok_or_else(|| Error::Parse {
            line: line_no,
            detail: format!("unknown split tag {:?}", fields[0]),
        })?;
        let start_index: usize = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            detail: format!("bad start index {:?}", fields[2]),
        })?;
        for f in &fields[3..6] {
            if f.is_empty() {
                return Err(Error::Parse { line: line_no, detail: "empty frame path".into() });
            }
        }
        records.push(TripletRecord {
            split,
            source_id: fields[1].to_string(),
            start_index,
            paths: [fields[3].into(), fields[4].into(), fields[5].into()],
        });
    }
    if records.is_empty() {
        return Err(Error::Parse { line: 1, detail: "no records".into() });
    }
    Ok(DatasetManifest { records })
}

/// Loads a record's three frames, resolving paths against the manifest's
/// directory.
pub fn load_record_frames(
    record: &TripletRecord,
    manifest_dir: &Path,
    image_size: usize,
) -> Result<[Tensor<f32>; 3]> {
    let load = |p: &PathBuf| load_frame_image(&manifest_dir.join(p), image_size);
    Ok([load(&record.paths[0])?, load(&record.paths[1])?, load(&record.paths[2])?])
}

// ---------------------------------------------------------------------------
// Synthetic clips
// ---------------------------------------------------------------------------

const SYNTH_BACKGROUND: u8 = 16;

fn render_square(image_size: usize, x: i64, y: i64, side: i64, color: [u8; 3]) -> Tensor<f32> {
    let mut data = vec![normalize(SYNTH_BACKGROUND); 3 * image_size * image_size];
    let plane = image_size * image_size;
    for c in 0..3 {
        let v = normalize(color[c]);
        for yy in y..y + side {
            for xx in x..x + side {
                data[c * plane + yy as usize * image_size + xx as usize] = v;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, image_size, image_size), data).expect("sized above")
}

/// Triplets of a bright square translating at a constant integer velocity
/// over a dark background; the middle frame sits at the exact midpoint.
/// Velocities that would carry the square outside the frame are clamped.
pub fn synth_moving_square(
    count: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<FrameTriplet>> {
    if image_size < 16 {
        return Err(Error::Config(format!("image_size {image_size} too small for synthesis")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size as i64;
    let mut triplets = Vec::with_capacity(count);
    for i in 0..count {
        let side = rng.random_range(size / 8..=size / 4);
        let x0 = rng.random_range(0..=size - side);
        let y0 = rng.random_range(0..=size - side);
        let max_v = size / 8;
        let vx = rng.random_range(-max_v..=max_v);
        let vy = rng.random_range(-max_v..=max_v);
        // Keep both later positions inside the frame: 0 <= p + 2v <= size - side.
        let vx = vx.clamp(-(x0 / 2), (size - side - x0) / 2);
        let vy = vy.clamp(-(y0 / 2), (size - side - y0) / 2);
        let color = [
            rng.random_range(180..=255u16) as u8,
            rng.random_range(180..=255u16) as u8,
            rng.random_range(180..=255u16) as u8,
        ];
        let source_id = format!("synth{i:04}");
        let frame = |index: usize| Frame {
            image: render_square(
                image_size,
                x0 + vx * index as i64,
                y0 + vy * index as i64,
                side,
                color,
            ),
            source_id: source_id.clone(),
            index,
        };
        triplets.push(FrameTriplet { x_n: frame(0), x_np1: frame(1), x_np2: frame(2) });
    }
    Ok(triplets)
}

// ---------------------------------------------------------------------------
// Materialization for `prepare`
// ---------------------------------------------------------------------------

/// Writes one source's frames as PNGs under `root/<subdir>/<source_id>/` and
/// returns the sliding-window triplet records with paths relative to `root`.
pub fn write_source_records(
    frames: &[Frame],
    root: &Path,
    subdir: &str,
) -> Result<Vec<TripletRecord>> {
    let mut rel_paths = Vec::with_capacity(frames.len());
    for frame in frames {
        let rel = PathBuf::from(subdir)
            .join(&frame.source_id)
            .join(format!("frame_{:05}.png", frame.index));
        let abs = root.join(&rel);
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_frame_image(&frame.image, &abs)?;
        rel_paths.push(rel);
    }
    let mut records = Vec::new();
    for (w, frame) in rel_paths.windows(3).zip(frames) {
        records.push(TripletRecord {
            split: Split::Train,
            source_id: frame.source_id.clone(),
            start_index: frame.index,
            paths: [w[0].clone(), w[1].clone(), w[2].clone()],
        });
    }
    Ok(records)
}
