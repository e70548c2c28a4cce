//! Dataset ingestion and the synthetic desk-scale dataset.
//!
//! Three sources share one in-memory shape, a list of [`Sequence`]s:
//! `.idl` annotation files (one quoted image path plus box tuples per
//! line), normalized `.jsonl` records, and a deterministic synthetic
//! generator that renders moving textured squares ("heads") over static
//! head-like distractors. Heads and distractors draw from the same texture
//! family on purpose: appearance alone cannot separate them, motion can.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpsnError, Result};
use crate::head::BBox;
use crate::motion::{sample_pairs, Frame, FrameSample, SequenceFrame};
use crate::nn::Feat;

/// Longest image side after ingestion resizing.
pub const MAX_SIDE: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    Idl,
    Jsonl,
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = MpsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idl" => Ok(DatasetFormat::Idl),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "synthetic" => Ok(DatasetFormat::Synthetic),
            other => Err(MpsnError::Config(format!(
                "unknown dataset format '{other}' (expected idl|jsonl|synthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_stem(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = MpsnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MpsnError::Config(format!(
                "unknown split '{other}' (expected train|val|test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// Where a dataset lives and which split to read.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub root: PathBuf,
    pub split: Split,
}

/// One annotated video sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub source_id: String,
    pub frames: Vec<SequenceFrame>,
}

impl Sequence {
    /// Consecutive pairs at the given temporal stride.
    pub fn samples(&self, stride: usize) -> Result<Vec<FrameSample>> {
        sample_pairs(&self.frames, stride, &self.source_id)
    }
}

/// Flatten sequences into frame-pair samples, ordered by (source, index).
pub fn sequences_to_samples(sequences: &[Sequence], stride: usize) -> Result<Vec<FrameSample>> {
    let mut out = Vec::new();
    for seq in sequences {
        out.extend(seq.samples(stride)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// idl
// ---------------------------------------------------------------------------

/// Parse an `.idl` annotation file: one record per line of the form
/// `"relative/path.png": (x1, y1, x2, y2), (...);` with an empty
/// annotation list allowed (`"path.png";`).
pub fn load_idl(path: &Path) -> Result<Vec<(String, Vec<BBox>)>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| MpsnError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let rest = trimmed
            .strip_prefix('"')
            .ok_or_else(|| parse_err("expected leading '\"'".into()))?;
        let close = rest
            .find('"')
            .ok_or_else(|| parse_err("unterminated image path".into()))?;
        let img = rest[..close].to_string();
        let mut tail = rest[close + 1..].trim();
        tail = tail.trim_end_matches(';').trim();
        let mut boxes = Vec::new();
        if let Some(after_colon) = tail.strip_prefix(':') {
            let mut cursor = after_colon.trim();
            while !cursor.is_empty() {
                let open = cursor
                    .find('(')
                    .ok_or_else(|| parse_err(format!("expected '(' in '{cursor}'")))?;
                let closep = cursor[open..]
                    .find(')')
                    .ok_or_else(|| parse_err("unterminated tuple".into()))?
                    + open;
                let nums: Vec<f64> = cursor[open + 1..closep]
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|e| parse_err(format!("bad number '{}': {e}", t.trim())))
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 4 {
                    return Err(parse_err(format!(
                        "expected 4 coordinates, got {}",
                        nums.len()
                    )));
                }
                boxes.push(BBox::new(
                    nums[0].min(nums[2]),
                    nums[1].min(nums[3]),
                    nums[0].max(nums[2]),
                    nums[1].max(nums[3]),
                ));
                cursor = cursor[closep + 1..].trim_start_matches(',').trim();
            }
        } else if !tail.is_empty() {
            return Err(parse_err(format!("unexpected trailing '{tail}'")));
        }
        out.push((img, boxes));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// jsonl
// ---------------------------------------------------------------------------

/// One normalized annotation record; `image` is relative to the dataset
/// root.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JsonRecord {
    pub source_id: String,
    pub frame_index: usize,
    pub image: String,
    pub gt_boxes: Vec<[f64; 4]>,
}

pub fn load_jsonl(path: &Path) -> Result<Vec<JsonRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| MpsnError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[JsonRecord]) -> Result<()> {
    let mut file = File::create(path)?;
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// image I/O and resizing
// ---------------------------------------------------------------------------

pub fn load_image(path: &Path) -> Result<Feat> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, pixels: &Feat) -> Result<()> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| {
                (pixels[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn bilinear_resize(x: &Feat, new_h: usize, new_w: usize) -> Feat {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::<f64>::zeros((c, new_h, new_w));
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for ci in 0..c {
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for xo in 0..new_w {
                let fx = ((xo as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let v0 = x[[ci, y0, x0]] * (1.0 - dx) + x[[ci, y0, x1]] * dx;
                let v1 = x[[ci, y1, x0]] * (1.0 - dx) + x[[ci, y1, x1]] * dx;
                out[[ci, y, xo]] = v0 * (1.0 - dy) + v1 * dy;
            }
        }
    }
    out
}

/// Cap the longest side at [`MAX_SIDE`], preserving aspect ratio and
/// rescaling the boxes with the image.
fn resize_for_ingestion(pixels: Feat, boxes: Vec<BBox>) -> (Feat, Vec<BBox>) {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let longest = h.max(w);
    if longest <= MAX_SIDE {
        return (pixels, boxes);
    }
    let scale = MAX_SIDE as f64 / longest as f64;
    let new_h = (h as f64 * scale).round() as usize;
    let new_w = (w as f64 * scale).round() as usize;
    let sy = new_h as f64 / h as f64;
    let sx = new_w as f64 / w as f64;
    let resized = bilinear_resize(&pixels, new_h, new_w);
    let boxes = boxes
        .into_iter()
        .map(|b| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy))
        .collect();
    (resized, boxes)
}

// ---------------------------------------------------------------------------
// loading by spec
// ---------------------------------------------------------------------------

/// Leading integer of the file stem, used as the frame index for idl data.
fn frame_index_from_path(img: &str) -> usize {
    let stem = Path::new(img)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("");
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().unwrap_or(0)
}

fn source_id_from_path(img: &str) -> String {
    Path::new(img)
        .parent()
        .map(|p| p.to_string_lossy().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "default".to_string())
}

fn assemble_sequences(root: &Path, records: Vec<JsonRecord>) -> Result<Vec<Sequence>> {
    let mut grouped: BTreeMap<String, Vec<JsonRecord>> = BTreeMap::new();
    for rec in records {
        grouped.entry(rec.source_id.clone()).or_default().push(rec);
    }
    let mut sequences = Vec::new();
    for (source_id, mut recs) in grouped {
        recs.sort_by_key(|r| r.frame_index);
        let mut frames = Vec::with_capacity(recs.len());
        for rec in recs {
            let pixels = load_image(&root.join(&rec.image))?;
            let boxes = rec
                .gt_boxes
                .iter()
                .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
                .collect();
            let (pixels, boxes) = resize_for_ingestion(pixels, boxes);
            frames.push(SequenceFrame {
                frame: Frame::new(pixels, rec.frame_index)?,
                boxes,
            });
        }
        sequences.push(Sequence { source_id, frames });
    }
    Ok(sequences)
}

fn idl_to_records(entries: Vec<(String, Vec<BBox>)>) -> Vec<JsonRecord> {
    entries
        .into_iter()
        .map(|(img, boxes)| JsonRecord {
            source_id: source_id_from_path(&img),
            frame_index: frame_index_from_path(&img),
            image: img,
            gt_boxes: boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
        })
        .collect()
}

/// Load a dataset split into sequences. For idl datasets without a val
/// file, every tenth training sequence becomes the validation split and is
/// excluded from training.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sequence>> {
    match spec.format {
        DatasetFormat::Jsonl | DatasetFormat::Synthetic => {
            let path = spec.root.join(format!("{}.jsonl", spec.split.file_stem()));
            assemble_sequences(&spec.root, load_jsonl(&path)?)
        }
        DatasetFormat::Idl => {
            let path = spec.root.join(format!("{}.idl", spec.split.file_stem()));
            if path.exists() {
                let records = idl_to_records(load_idl(&path)?);
                return assemble_sequences(&spec.root, records);
            }
            if spec.split == Split::Test {
                return Err(MpsnError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} not found", path.display()),
                )));
            }
            // Derive train/val from train.idl by sequence.
            let train_path = spec.root.join("train.idl");
            let records = idl_to_records(load_idl(&train_path)?);
            let all = assemble_sequences(&spec.root, records)?;
            let picked = all
                .into_iter()
                .enumerate()
                .filter(|(i, _)| {
                    let is_val = i % 10 == 9;
                    (spec.split == Split::Val) == is_val
                })
                .map(|(_, s)| s)
                .collect();
            Ok(picked)
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

/// Synthetic scene parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_sequences: usize,
    pub frames_per_seq: usize,
    pub n_heads: usize,
    pub n_distractors: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 7,
            n_sequences: 8,
            frames_per_seq: 20,
            n_heads: 2,
            n_distractors: 4,
            height: 112,
            width: 112,
        }
    }
}

struct SynthObject {
    x: f64,
    y: f64,
    side: usize,
    /// Texture carried with the object as it moves, (3, side, side).
    texture: Array3<f64>,
}

impl SynthObject {
    fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.x + self.side as f64, self.y + self.side as f64)
    }
}

fn random_texture(rng: &mut ChaCha8Rng, side: usize) -> Array3<f64> {
    // Bright patch with a fixed sinusoidal weave at a random phase. Heads
    // and distractors share one canonical appearance family on purpose:
    // appearance carries no class signal, only motion does. The wavelength
    // is far above the backbone's sampling stride so features vary
    // smoothly with sub-cell offsets, and a random per-object phase keeps
    // patches from being pixel-identical.
    let tint = [1.0, 0.92, 0.85];
    let (fx, fy, amp) = (0.5, 0.5, 0.2);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut t = Array3::<f64>::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let wave = (fx * x as f64 + fy * y as f64 + phase).sin();
            let base = 0.75 + amp * wave;
            for c in 0..3 {
                t[[c, y, x]] = (base * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// Smooth dark background field, static per sequence.
fn background_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    let base = rng.gen_range(0.08..0.18);
    let fx = rng.gen_range(0.02..0.08);
    let fy = rng.gen_range(0.02..0.08);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.02..0.06);
    let mut bg = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = base + amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                bg[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    bg
}

fn place_object(
    rng: &mut ChaCha8Rng,
    occupied: &[BBox],
    side: usize,
    h: usize,
    w: usize,
) -> (f64, f64) {
    for _ in 0..200 {
        let x = rng.gen_range(0.0..(w - side) as f64);
        let y = rng.gen_range(0.0..(h - side) as f64);
        let candidate = BBox::new(x, y, x + side as f64, y + side as f64);
        if occupied.iter().all(|b| b.iou(&candidate) < 0.05) {
            return (x, y);
        }
    }
    // Crowded scene: accept overlap rather than loop forever.
    (
        rng.gen_range(0.0..(w - side) as f64),
        rng.gen_range(0.0..(h - side) as f64),
    )
}

/// Paint an object at its float position with box-filter coverage at the
/// borders, the way a real sensor anti-aliases object edges.
fn paint(img: &mut Feat, obj: &SynthObject) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let side = obj.side as f64;
    let py0 = obj.y.floor() as isize - 1;
    let py1 = (obj.y + side).ceil() as isize + 1;
    let px0 = obj.x.floor() as isize - 1;
    let px1 = (obj.x + side).ceil() as isize + 1;
    for py in py0..=py1 {
        if py < 0 || py as usize >= h {
            continue;
        }
        let cov_y = ((py as f64 + 1.0).min(obj.y + side) - (py as f64).max(obj.y)).max(0.0);
        for px in px0..=px1 {
            if px < 0 || px as usize >= w {
                continue;
            }
            let cov_x =
                ((px as f64 + 1.0).min(obj.x + side) - (px as f64).max(obj.x)).max(0.0);
            let cov = (cov_x * cov_y).clamp(0.0, 1.0);
            if cov <= 0.0 {
                continue;
            }
            // Texture coordinate of the pixel center inside the object.
            let u = (px as f64 + 0.5 - obj.x - 0.5).clamp(0.0, side - 1.0);
            let v = (py as f64 + 0.5 - obj.y - 0.5).clamp(0.0, side - 1.0);
            let (ui, vi) = (u.round() as usize, v.round() as usize);
            for c in 0..3 {
                let cur = img[[c, py as usize, px as usize]];
                img[[c, py as usize, px as usize]] =
                    cov * obj.texture[[c, vi, ui]] + (1.0 - cov) * cur;
            }
        }
    }
}

/// Generate the synthetic dataset in memory. Deterministic for a given
/// parameter set.
pub fn synth_generate(params: &SynthParams) -> Result<Vec<Sequence>> {
    let mut sequences = Vec::with_capacity(params.n_sequences);
    for seq_idx in 0..params.n_sequences {
        // A distinct, reproducible stream per sequence.
        let mut rng =
            ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x9E37_79B9).wrapping_add(seq_idx as u64));
        let (h, w) = (params.height, params.width);

        // Static smooth background, fixed for the whole sequence.
        let background = background_field(&mut rng, h, w);

        let mut occupied: Vec<BBox> = Vec::new();
        let mut distractors = Vec::with_capacity(params.n_distractors);
        for _ in 0..params.n_distractors {
            let side = rng.gen_range(28..=36);
            let (x, y) = place_object(&mut rng, &occupied, side, h, w);
            let obj = SynthObject {
                x,
                y,
                side,
                texture: random_texture(&mut rng, side),
            };
            occupied.push(obj.bbox());
            distractors.push(obj);
        }
        let mut heads = Vec::with_capacity(params.n_heads);
        for _ in 0..params.n_heads {
            let side = rng.gen_range(28..=36);
            let (x, y) = place_object(&mut rng, &occupied, side, h, w);
            let obj = SynthObject {
                x,
                y,
                side,
                texture: random_texture(&mut rng, side),
            };
            occupied.push(obj.bbox());
            heads.push(obj);
        }

        let mut frames = Vec::with_capacity(params.frames_per_seq);
        for f in 0..params.frames_per_seq {
            if f > 0 {
                for head in heads.iter_mut() {
                    // Random walk with a guaranteed minimum step; reflect
                    // at the borders so heads never stall against a wall.
                    let step = |rng: &mut ChaCha8Rng| -> f64 {
                        let mag = rng.gen_range(4.0..8.0);
                        if rng.gen_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    };
                    let reflect = |v: f64, max: f64| -> f64 {
                        if v < 0.0 {
                            -v
                        } else if v > max {
                            2.0 * max - v
                        } else {
                            v
                        }
                    };
                    head.x = reflect(head.x + step(&mut rng), (w - head.side) as f64);
                    head.y = reflect(head.y + step(&mut rng), (h - head.side) as f64);
                }
            }
            let mut img = background.clone();
            for d in &distractors {
                paint(&mut img, d);
            }
            for head in &heads {
                paint(&mut img, head);
            }
            let boxes = heads.iter().map(|o| o.bbox()).collect();
            frames.push(SequenceFrame {
                frame: Frame::new(img, f)?,
                boxes,
            });
        }
        sequences.push(Sequence {
            source_id: format!("synth{seq_idx:03}"),
            frames,
        });
    }
    Ok(sequences)
}

/// Deterministic by-sequence split of `n` synthetic sequences.
pub fn synth_split_ranges(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let n_test = (n / 4).max(1).min(n);
    let n_val = (n / 8).max(1).min(n.saturating_sub(n_test));
    let n_train = n - n_test - n_val;
    (0..n_train, n_train..n_train + n_val, n - n_test..n)
}

/// The three synthetic splits as sequence lists.
pub fn synth_splits(params: &SynthParams) -> Result<(Vec<Sequence>, Vec<Sequence>, Vec<Sequence>)> {
    let all = synth_generate(params)?;
    let (tr, va, te) = synth_split_ranges(all.len());
    Ok((
        all[tr].to_vec(),
        all[va].to_vec(),
        all[te].to_vec(),
    ))
}

/// Write sequences as png images plus a jsonl annotation file per split.
pub fn write_sequences(root: &Path, split: Split, sequences: &[Sequence]) -> Result<Vec<PathBuf>> {
    let img_dir = root.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut records = Vec::new();
    let mut written = Vec::new();
    for seq in sequences {
        for sf in &seq.frames {
            let name = format!("images/{}_{:05}.png", seq.source_id, sf.frame.index);
            let path = root.join(&name);
            save_image(&path, &sf.frame.pixels)?;
            written.push(path);
            records.push(JsonRecord {
                source_id: seq.source_id.clone(),
                frame_index: sf.frame.index,
                image: name,
                gt_boxes: sf.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
            });
        }
    }
    let ann = root.join(format!("{}.jsonl", split.file_stem()));
    write_jsonl(&ann, &records)?;
    written.push(ann);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::frame_difference;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mpsn-ds-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn idl_lines_parse_with_counts() {
        let dir = tmpdir("idl");
        let path = dir.join("train.idl");
        std::fs::write(
            &path,
            concat!(
                "\"seq/00001_640x480.png\": (331.0, 171.0, 358.0, 201.0), (268.0, 190.0, 295.0, 216.0);\n",
                "\"seq/00002_640x480.png\";\n",
                "\"seq/00003_640x480.png\": (10, 20, 30, 40);\n",
            ),
        )
        .unwrap();
        let entries = load_idl(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].1.len(), 2);
        assert_eq!(entries[1].1.len(), 0);
        assert_eq!(entries[2].1.len(), 1);
        // Hand-transcribed fixture values.
        assert_eq!(entries[0].1[0], BBox::new(331.0, 171.0, 358.0, 201.0));
        assert_eq!(entries[2].1[0], BBox::new(10.0, 20.0, 30.0, 40.0));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_idl_line_reports_line_number() {
        let dir = tmpdir("idl-bad");
        let path = dir.join("train.idl");
        std::fs::write(&path, "\"a.png\": (1, 2, 3, 4);\n\"b.png\": (1, 2, x, 4);\n").unwrap();
        let err = load_idl(&path).unwrap_err();
        match err {
            MpsnError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn jsonl_round_trip_identity() {
        let dir = tmpdir("jsonl");
        let path = dir.join("train.jsonl");
        let records = vec![
            JsonRecord {
                source_id: "a".into(),
                frame_index: 0,
                image: "images/a_0.png".into(),
                gt_boxes: vec![[1.0, 2.0, 3.0, 4.0]],
            },
            JsonRecord {
                source_id: "a".into(),
                frame_index: 1,
                image: "images/a_1.png".into(),
                gt_boxes: vec![],
            },
        ];
        write_jsonl(&path, &records).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), records);
        // Empty file loads as an empty dataset.
        let empty = dir.join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let params = SynthParams {
            n_sequences: 2,
            frames_per_seq: 4,
            height: 64,
            width: 64,
            ..Default::default()
        };
        let a = synth_generate(&params).unwrap();
        let b = synth_generate(&params).unwrap();
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.iter().zip(&b) {
            for (fa, fb) in sa.frames.iter().zip(&sb.frames) {
                assert_eq!(fa.frame.pixels, fb.frame.pixels);
                assert_eq!(fa.boxes, fb.boxes);
            }
        }
    }

    #[test]
    fn single_head_no_distractors_has_one_box_per_frame() {
        let params = SynthParams {
            n_heads: 1,
            n_distractors: 0,
            n_sequences: 2,
            frames_per_seq: 5,
            height: 64,
            width: 64,
            ..Default::default()
        };
        for seq in synth_generate(&params).unwrap() {
            for sf in seq.frames {
                assert_eq!(sf.boxes.len(), 1);
            }
        }
    }

    #[test]
    fn motion_is_confined_to_head_neighborhoods() {
        let params = SynthParams {
            n_sequences: 1,
            frames_per_seq: 6,
            height: 64,
            width: 64,
            ..Default::default()
        };
        let seq = &synth_generate(&params).unwrap()[0];
        for pair in seq.frames.windows(2) {
            let diff = frame_difference(&pair[1].frame, &pair[0].frame).unwrap();
            // Union of head boxes in both frames, padded a pixel for the
            // rasterization rounding.
            let mut allowed = pair[0].boxes.clone();
            allowed.extend(pair[1].boxes.iter().cloned());
            let mut nonzero = 0usize;
            for ((_, y, x), &v) in diff.pixels.indexed_iter() {
                if v > 1e-12 {
                    nonzero += 1;
                    let inside = allowed.iter().any(|b| {
                        (x as f64) >= b.x1 - 1.5
                            && (x as f64) <= b.x2 + 1.5
                            && (y as f64) >= b.y1 - 1.5
                            && (y as f64) <= b.y2 + 1.5
                    });
                    assert!(inside, "motion outside head regions at ({x}, {y})");
                }
            }
            // Heads must actually move.
            assert!(nonzero > 0);
        }
    }

    #[test]
    fn synth_splits_are_disjoint_and_cover() {
        let (tr, va, te) = synth_split_ranges(8);
        assert_eq!(tr, 0..5);
        assert_eq!(va, 5..6);
        assert_eq!(te, 6..8);
    }

    #[test]
    fn write_and_reload_synthetic_dataset() {
        let dir = tmpdir("roundtrip");
        let params = SynthParams {
            n_sequences: 1,
            frames_per_seq: 3,
            height: 48,
            width: 48,
            ..Default::default()
        };
        let seqs = synth_generate(&params).unwrap();
        write_sequences(&dir, Split::Train, &seqs).unwrap();
        let spec = DatasetSpec {
            format: DatasetFormat::Synthetic,
            root: dir.clone(),
            split: Split::Train,
        };
        let loaded = load_dataset(&spec).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].frames.len(), 3);
        // Boxes survive exactly; pixels within png quantization.
        for (orig, got) in seqs[0].frames.iter().zip(&loaded[0].frames) {
            assert_eq!(orig.boxes, got.boxes);
            for (a, b) in orig.frame.pixels.iter().zip(got.frame.pixels.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn oversized_images_are_capped_to_max_side() {
        let pixels = Array3::<f64>::zeros((3, 100, 1280));
        let boxes = vec![BBox::new(0.0, 0.0, 128.0, 50.0)];
        let (resized, boxes) = resize_for_ingestion(pixels, boxes);
        assert_eq!(resized.shape(), &[3, 50, 640]);
        assert!((boxes[0].x2 - 64.0).abs() < 1e-9);
        assert!((boxes[0].y2 - 25.0).abs() < 1e-9);
    }
}
