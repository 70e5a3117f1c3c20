//! Frame sources: image-sequence directories and raw `.y8` files.
//!
//! A raw sequence is a row-major 8-bit intensity file holding concatenated
//! frames, next to a `.meta` sidecar with `width=`, `height=` and
//! `frame_rate=` lines.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageReader, RgbImage};

use crate::config::KeyValues;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "pbm", "bmp"];

/// Single-channel 8-bit intensity image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    index: u64,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(index: u64, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param("frame", "width and height must be positive"));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::param(
                "frame",
                format!(
                    "{} pixels for a {width}x{height} frame",
                    pixels.len()
                ),
            ));
        }
        Ok(Frame {
            index,
            width,
            height,
            pixels,
        })
    }

    pub fn filled(index: u64, width: u32, height: u32, value: u8) -> Self {
        Frame::new(index, width, height, vec![value; width as usize * height as usize])
            .expect("positive dimensions")
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn with_index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    pub(crate) fn ensure_dims(&self, other: &Frame) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

/// Crop rectangle in native frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiSpec {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl RoiSpec {
    pub fn full(width: u32, height: u32) -> Self {
        RoiSpec {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn validate(&self, frame_width: u32, frame_height: u32) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidRoi(format!(
                "{}x{} has zero extent",
                self.width, self.height
            )));
        }
        let right = self.x as u64 + self.width as u64;
        let bottom = self.y as u64 + self.height as u64;
        if right > frame_width as u64 || bottom > frame_height as u64 {
            return Err(Error::InvalidRoi(format!(
                "{}x{}+{}+{} exceeds {frame_width}x{frame_height} frame",
                self.width, self.height, self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Crop `frame` to `roi`; output pixel (i, j) is input pixel (y + i, x + j).
pub fn apply_roi(frame: &Frame, roi: &RoiSpec) -> Result<Frame> {
    roi.validate(frame.width, frame.height)?;
    if *roi == RoiSpec::full(frame.width, frame.height) {
        return Ok(frame.clone());
    }
    let stride = frame.width as usize;
    let mut pixels = Vec::with_capacity(roi.width as usize * roi.height as usize);
    for row in roi.y..roi.y + roi.height {
        let start = row as usize * stride + roi.x as usize;
        pixels.extend_from_slice(&frame.pixels[start..start + roi.width as usize]);
    }
    Frame::new(frame.index, roi.width, roi.height, pixels)
}

/// Which intensity to derive from colour input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Channel {
    /// ITU-R BT.601 luma: 0.299 R + 0.587 G + 0.114 B, rounded.
    #[default]
    Gray,
    Red,
    Green,
    Blue,
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gray" | "grey" => Ok(Channel::Gray),
            "red" => Ok(Channel::Red),
            "green" => Ok(Channel::Green),
            "blue" => Ok(Channel::Blue),
            _ => Err("expected one of gray, red, green, blue".into()),
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Gray => "gray",
            Channel::Red => "red",
            Channel::Green => "green",
            Channel::Blue => "blue",
        })
    }
}

impl Channel {
    #[inline]
    pub fn intensity(self, [r, g, b]: [u8; 3]) -> u8 {
        match self {
            // integer weights in thousandths keep gray inputs exact
            Channel::Gray => {
                ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
            }
            Channel::Red => r,
            Channel::Green => g,
            Channel::Blue => b,
        }
    }

    pub fn convert(self, index: u64, rgb: &RgbImage) -> Result<Frame> {
        let pixels = rgb.pixels().map(|p| self.intensity(p.0)).collect();
        Frame::new(index, rgb.width(), rgb.height(), pixels)
    }
}

/// BT.601 luma conversion of a colour frame.
pub fn to_grayscale(index: u64, rgb: &RgbImage) -> Result<Frame> {
    Channel::Gray.convert(index, rgb)
}

#[derive(Debug)]
enum Backend {
    Images(Vec<PathBuf>),
    Raw(BufReader<File>),
}

/// Sequential, single-consumer frame reader.
#[derive(Debug)]
pub struct FrameSource {
    path: PathBuf,
    frame_rate: f64,
    frame_count: u64,
    width: u32,
    height: u32,
    channel: Channel,
    next_index: u64,
    backend: Backend,
}

/// Contents of a `.meta` sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawMeta {
    pub width: u32,
    pub height: u32,
    pub frame_rate: f64,
}

impl RawMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let width: u32 = kv.take("width")?.ok_or_else(|| missing(path, "width"))?;
        let height: u32 = kv.take("height")?.ok_or_else(|| missing(path, "height"))?;
        let frame_rate: f64 = kv
            .take("frame_rate")?
            .ok_or_else(|| missing(path, "frame_rate"))?;
        kv.finish()?;
        if width == 0 || height == 0 || !(frame_rate > 0.0) {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "width, height and frame_rate must be positive".into(),
            });
        }
        Ok(RawMeta {
            width,
            height,
            frame_rate,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "width={}\nheight={}\nframe_rate={}\n",
            self.width, self.height, self.frame_rate
        )
    }
}

fn missing(path: &Path, key: &str) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: format!("missing `{key}=` line"),
    }
}

pub fn meta_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta")
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

impl FrameSource {
    /// Opens a directory of images (sorted by file name) or a `.y8` file.
    ///
    /// For raw input `frame_rate` overrides the sidecar value; image
    /// directories carry no timing and require it.
    pub fn open(path: impl AsRef<Path>, frame_rate: Option<f64>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(rate) = frame_rate {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::param("frame_rate", format!("{rate} is not positive")));
            }
        }
        let md = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if md.is_dir() {
            Self::open_dir(path, frame_rate)
        } else if path.extension().and_then(|e| e.to_str()) == Some("y8") {
            Self::open_raw(path, frame_rate)
        } else {
            Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "expected an image directory or a .y8 file".into(),
            })
        }
    }

    fn open_dir(path: &Path, frame_rate: Option<f64>) -> Result<Self> {
        let frame_rate = frame_rate.ok_or_else(|| {
            Error::param("frame_rate", "image directories need an explicit frame rate")
        })?;
        let mut files = Vec::new();
        let mut others = 0usize;
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            let p = entry.path();
            if !p.is_file() {
                continue;
            }
            if is_image(&p) {
                files.push(p);
            } else {
                others += 1;
            }
        }
        if files.is_empty() {
            return Err(if others == 0 {
                Error::NoFrames(path.to_path_buf())
            } else {
                Error::UnsupportedFormat {
                    path: path.to_path_buf(),
                    reason: "no supported image files".into(),
                }
            });
        }
        files.sort();

        // header probe: catches unreadable or inconsistently sized files up front
        let mut dims = None;
        for (i, file) in files.iter().enumerate() {
            let d = ImageReader::open(file)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()))
                .map_err(|reason| Error::CorruptFrame {
                    index: i as u64,
                    reason: format!("{}: {reason}", file.display()),
                })?;
            match dims {
                None => dims = Some(d),
                Some(first) if first != d => {
                    return Err(Error::CorruptFrame {
                        index: i as u64,
                        reason: format!(
                            "{} is {}x{}, expected {}x{}",
                            file.display(),
                            d.0,
                            d.1,
                            first.0,
                            first.1
                        ),
                    })
                }
                _ => {}
            }
        }
        let (width, height) = dims.expect("non-empty");
        Ok(FrameSource {
            path: path.to_path_buf(),
            frame_rate,
            frame_count: files.len() as u64,
            width,
            height,
            channel: Channel::Gray,
            next_index: 0,
            backend: Backend::Images(files),
        })
    }

    fn open_raw(path: &Path, frame_rate: Option<f64>) -> Result<Self> {
        let meta = RawMeta::load(&meta_path(path))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let frame_len = meta.width as u64 * meta.height as u64;
        let frame_count = len / frame_len;
        if len % frame_len != 0 {
            return Err(Error::CorruptFrame {
                index: frame_count,
                reason: format!(
                    "{}: truncated ({} of {frame_len} bytes)",
                    path.display(),
                    len % frame_len
                ),
            });
        }
        if frame_count == 0 {
            return Err(Error::NoFrames(path.to_path_buf()));
        }
        Ok(FrameSource {
            path: path.to_path_buf(),
            frame_rate: frame_rate.unwrap_or(meta.frame_rate),
            frame_count,
            width: meta.width,
            height: meta.height,
            channel: Channel::Gray,
            next_index: 0,
            backend: Backend::Raw(BufReader::new(file)),
        })
    }

    /// Channel used when the input is colour. Raw input is already intensity.
    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_count(&self) -> u64 {
        self.frame_count
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Nominal duration in seconds.
    pub fn duration(&self) -> f64 {
        self.frame_count as f64 / self.frame_rate
    }

    pub fn timestamp(&self, index: u64) -> f64 {
        index as f64 / self.frame_rate
    }

    /// Next frame in order, or `None` once the sequence is exhausted.
    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        if self.next_index >= self.frame_count {
            return Ok(None);
        }
        let index = self.next_index;
        let frame = match &mut self.backend {
            Backend::Raw(reader) => {
                let mut buf = vec![0u8; self.width as usize * self.height as usize];
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::CorruptFrame {
                        index,
                        reason: e.to_string(),
                    })?;
                Frame::new(index, self.width, self.height, buf)?
            }
            Backend::Images(files) => {
                let file = &files[index as usize];
                let img = ImageReader::open(file)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                    .and_then(|r| r.decode().map_err(|e| e.to_string()))
                    .map_err(|reason| Error::CorruptFrame {
                        index,
                        reason: format!("{}: {reason}", file.display()),
                    })?;
                let frame = decode_intensity(index, img, self.channel)?;
                if frame.dims() != (self.width, self.height) {
                    return Err(Error::CorruptFrame {
                        index,
                        reason: "frame size changed mid-sequence".into(),
                    });
                }
                frame
            }
        };
        self.next_index += 1;
        Ok(Some(frame))
    }
}

fn decode_intensity(index: u64, img: DynamicImage, channel: Channel) -> Result<Frame> {
    if img.color().has_color() {
        channel.convert(index, &img.to_rgb8())
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Frame::new(index, w, h, gray.into_raw())
    }
}

impl Iterator for FrameSource {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Writes a `.y8` + `.meta` pair one frame at a time.
#[derive(Debug)]
pub struct RawSequenceWriter {
    path: PathBuf,
    meta: RawMeta,
    out: BufWriter<File>,
    frames: u64,
}

impl RawSequenceWriter {
    pub fn create(path: impl AsRef<Path>, meta: RawMeta) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mpath = meta_path(&path);
        std::fs::write(&mpath, meta.render()).map_err(|e| Error::io(&mpath, e))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RawSequenceWriter {
            path,
            meta,
            out: BufWriter::new(file),
            frames: 0,
        })
    }

    pub fn write_frame(&mut self, frame: &Frame) -> Result<()> {
        if frame.dims() != (self.meta.width, self.meta.height) {
            return Err(Error::DimensionMismatch {
                expected: (self.meta.width, self.meta.height),
                actual: frame.dims(),
            });
        }
        self.out
            .write_all(frame.pixels())
            .map_err(|e| Error::io(&self.path, e))?;
        self.frames += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.frames)
    }
}
