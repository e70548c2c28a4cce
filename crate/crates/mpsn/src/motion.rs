//! Motion estimation from consecutive frame pairs.
//!
//! The default motion image is the element-wise absolute frame difference.
//! Optical flow is supported through the [`FlowProvider`] trait, typically
//! backed by precomputed flow files produced offline by an external
//! estimator; a 2-channel (u, v) field is encoded into a 3-channel motion
//! image so both motion kinds share one input contract downstream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};

use crate::error::{MpsnError, Result};

/// Magic tag at the head of a precomputed flow record.
pub const FLOW_MAGIC: &[u8; 8] = b"MPSNFLO1";

/// Default displacement (pixels) mapped to the ends of the normalized
/// u/v channels when encoding flow.
pub const DEFAULT_MAX_DISP: f64 = 16.0;

/// A single video frame with pixel values in `[0, 1]`, stored `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: Array3<f64>,
    /// Frame number within its source sequence.
    pub index: usize,
}

impl Frame {
    /// Build a frame, validating the `[0, 1]` pixel domain.
    pub fn new(pixels: Array3<f64>, index: usize) -> Result<Self> {
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v) || !v.is_finite()) {
            return Err(MpsnError::Contract(format!(
                "frame {index} has pixel values outside [0, 1]"
            )));
        }
        Ok(Frame { pixels, index })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn shape_string(&self) -> String {
        let s = self.pixels.shape();
        format!("{}x{}x{}", s[0], s[1], s[2])
    }
}

/// How a motion image was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MotionKind {
    /// Absolute frame difference.
    DiffAbs,
    /// Encoded optical flow.
    Flow,
}

/// Motion image, same spatial shape as its source frames.
#[derive(Debug, Clone)]
pub struct MotionImage {
    pub pixels: Array3<f64>,
    pub kind: MotionKind,
}

/// A consecutive frame pair plus the current frame's ground-truth boxes.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub current: Frame,
    pub previous: Frame,
    /// Ground truth for the current frame, `(x1, y1, x2, y2)` pixels.
    pub boxes: Vec<crate::head::BBox>,
    pub source_id: String,
}

impl FrameSample {
    pub fn new(
        current: Frame,
        previous: Frame,
        boxes: Vec<crate::head::BBox>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if current.index <= previous.index {
            return Err(MpsnError::Contract(format!(
                "frame pair out of order: current index {} <= previous index {}",
                current.index, previous.index
            )));
        }
        if current.pixels.shape() != previous.pixels.shape() {
            return Err(MpsnError::dim(
                "frame pair",
                current.shape_string(),
                previous.shape_string(),
            ));
        }
        Ok(FrameSample {
            current,
            previous,
            boxes,
            source_id: source_id.into(),
        })
    }
}

/// Element-wise absolute difference of two frames.
///
/// Both frames must share a shape and live in `[0, 1]`; the result does too.
pub fn frame_difference(current: &Frame, previous: &Frame) -> Result<MotionImage> {
    if current.pixels.shape() != previous.pixels.shape() {
        return Err(MpsnError::dim(
            "frame_difference",
            current.shape_string(),
            previous.shape_string(),
        ));
    }
    let mut pixels = Array3::<f64>::zeros(current.pixels.raw_dim());
    Zip::from(&mut pixels)
        .and(&current.pixels)
        .and(&previous.pixels)
        .for_each(|d, &a, &b| *d = (a - b).abs());
    Ok(MotionImage {
        pixels,
        kind: MotionKind::DiffAbs,
    })
}

/// Dense per-pixel displacement field, stored `(2, H, W)` as (u, v).
#[derive(Debug, Clone)]
pub struct FlowField {
    pub uv: Array3<f64>,
}

impl FlowField {
    pub fn new(uv: Array3<f64>) -> Result<Self> {
        if uv.shape()[0] != 2 {
            return Err(MpsnError::Contract(format!(
                "flow field must have 2 channels, got {}",
                uv.shape()[0]
            )));
        }
        Ok(FlowField { uv })
    }

    pub fn height(&self) -> usize {
        self.uv.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.uv.shape()[2]
    }
}

/// Source of optical flow for a frame pair.
///
/// Implementations may compute flow or look it up from precomputed records
/// keyed by `(source_id, index)` of the current frame. `Sync` so sweep
/// legs can share one provider across workers.
pub trait FlowProvider: Sync {
    fn flow(&self, current: &Frame, previous: &Frame, source_id: &str) -> Result<FlowField>;
}

/// Encode a 2-channel flow field into an `n_channels`-channel motion image:
/// channel 0 is the displacement magnitude, channels 1 and 2 are u and v
/// mapped affinely so that `[-max_disp, max_disp]` covers `[0, 1]`.
pub fn encode_flow(field: &FlowField, max_disp: f64) -> Array3<f64> {
    let (h, w) = (field.height(), field.width());
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = field.uv[[0, y, x]];
            let v = field.uv[[1, y, x]];
            out[[0, y, x]] = (u * u + v * v).sqrt();
            out[[1, y, x]] = (u / max_disp + 1.0) / 2.0;
            out[[2, y, x]] = (v / max_disp + 1.0) / 2.0;
        }
    }
    out
}

/// Motion image from a flow provider, encoded with [`encode_flow`].
pub fn flow_motion(
    current: &Frame,
    previous: &Frame,
    provider: &dyn FlowProvider,
    source_id: &str,
    max_disp: f64,
) -> Result<MotionImage> {
    if current.pixels.shape() != previous.pixels.shape() {
        return Err(MpsnError::dim(
            "flow_motion",
            current.shape_string(),
            previous.shape_string(),
        ));
    }
    let field = provider.flow(current, previous, source_id)?;
    if field.height() != current.height() || field.width() != current.width() {
        return Err(MpsnError::dim(
            "flow field vs frame",
            format!("{}x{}", field.height(), field.width()),
            format!("{}x{}", current.height(), current.width()),
        ));
    }
    Ok(MotionImage {
        pixels: encode_flow(&field, max_disp),
        kind: MotionKind::Flow,
    })
}

/// Write one flow record: magic, H and W as u32 LE, then H*W interleaved
/// (u, v) pairs as f32 LE.
pub fn write_flow_file(path: &Path, field: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&(field.height() as u32).to_le_bytes())?;
    w.write_all(&(field.width() as u32).to_le_bytes())?;
    for y in 0..field.height() {
        for x in 0..field.width() {
            w.write_all(&(field.uv[[0, y, x]] as f32).to_le_bytes())?;
            w.write_all(&(field.uv[[1, y, x]] as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a flow record written by [`write_flow_file`].
pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(MpsnError::Format(format!(
            "{}: bad flow magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let h = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let w = u32::from_le_bytes(u32buf) as usize;
    let mut uv = Array3::<f64>::zeros((2, h, w));
    let mut f32buf = [0u8; 4];
    for y in 0..h {
        for x in 0..w {
            r.read_exact(&mut f32buf)?;
            uv[[0, y, x]] = f32::from_le_bytes(f32buf) as f64;
            r.read_exact(&mut f32buf)?;
            uv[[1, y, x]] = f32::from_le_bytes(f32buf) as f64;
        }
    }
    FlowField::new(uv)
}

/// Looks up precomputed flow records `<source_id>_<index>.mpsnflo` under a
/// root directory. The record is keyed by the current frame of the pair.
#[derive(Debug, Clone)]
pub struct PrecomputedFlow {
    pub root: PathBuf,
}

impl PrecomputedFlow {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        PrecomputedFlow { root: root.into() }
    }

    pub fn record_path(&self, source_id: &str, index: usize) -> PathBuf {
        // Source ids may contain path separators; flatten them.
        let safe: String = source_id
            .chars()
            .map(|c| if c == '/' || c == '\\' { '_' } else { c })
            .collect();
        self.root.join(format!("{safe}_{index}.mpsnflo"))
    }

    pub fn write(&self, source_id: &str, index: usize, field: &FlowField) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        write_flow_file(&self.record_path(source_id, index), field)
    }
}

impl FlowProvider for PrecomputedFlow {
    fn flow(&self, current: &Frame, _previous: &Frame, source_id: &str) -> Result<FlowField> {
        let path = self.record_path(source_id, current.index);
        if !path.exists() {
            return Err(MpsnError::MissingFlow {
                source_id: source_id.to_string(),
                index: current.index,
            });
        }
        read_flow_file(&path)
    }
}

/// Constant-displacement provider, mainly for tests and smoke runs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFlow {
    pub u: f64,
    pub v: f64,
}

impl FlowProvider for ConstantFlow {
    fn flow(&self, current: &Frame, _previous: &Frame, _source_id: &str) -> Result<FlowField> {
        let (h, w) = (current.height(), current.width());
        let mut uv = Array3::<f64>::zeros((2, h, w));
        uv.slice_mut(ndarray::s![0, .., ..]).fill(self.u);
        uv.slice_mut(ndarray::s![1, .., ..]).fill(self.v);
        FlowField::new(uv)
    }
}

/// One annotated frame of a sequence.
#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub frame: Frame,
    pub boxes: Vec<crate::head::BBox>,
}

/// Pair frames at a temporal stride: position `f` pairs with `f - stride`,
/// carrying the current frame's boxes. Frames lacking a predecessor are
/// skipped, so an N-frame sequence yields `max(0, N - stride)` samples.
pub fn sample_pairs(
    sequence: &[SequenceFrame],
    stride: usize,
    source_id: &str,
) -> Result<Vec<FrameSample>> {
    if stride == 0 {
        return Err(MpsnError::Contract("temporal stride must be >= 1".into()));
    }
    for pair in sequence.windows(2) {
        if pair[1].frame.index <= pair[0].frame.index {
            return Err(MpsnError::Contract(
                "sequence frames must be sorted by strictly increasing index".into(),
            ));
        }
    }
    let mut out = Vec::new();
    for f in stride..sequence.len() {
        out.push(FrameSample::new(
            sequence[f].frame.clone(),
            sequence[f - stride].frame.clone(),
            sequence[f].boxes.clone(),
            source_id,
        )?);
    }
    Ok(out)
}
