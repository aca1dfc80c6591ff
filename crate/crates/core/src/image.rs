//! Raw pixel decoding from 8/16-bit grayscale PNG or uncompressed
//! single-frame DICOM Part 10 files.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ImageRecord;
use crate::preprocess::WindowSpec;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path}: unsupported format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: corrupt pixel data: {reason}")]
    CorruptPixelData { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Photometric {
    #[serde(rename = "MONOCHROME1")]
    Mono1,
    #[serde(rename = "MONOCHROME2")]
    Mono2,
}

/// Decoded grayscale image, row-major. After [`load_image`] the photometric
/// interpretation is always `Mono2` (bright = dense).
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub bit_depth: u8,
    pub photometric: Photometric,
    pub window_hint: Option<WindowSpec>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u16>, bit_depth: u8) -> Self {
        assert_eq!(
            pixels.len(),
            height * width,
            "pixel buffer does not match dimensions"
        );
        assert!((1..=16).contains(&bit_depth), "bit depth must be 1..=16");
        Self {
            height,
            width,
            pixels,
            bit_depth,
            photometric: Photometric::Mono2,
            window_hint: None,
        }
    }

    pub fn max_value(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.width + col]
    }

    /// Maps p → (2^bits − 1) − p and toggles the photometric interpretation.
    pub fn invert(&mut self) {
        let max = self.max_value();
        for p in &mut self.pixels {
            *p = max - *p;
        }
        self.photometric = match self.photometric {
            Photometric::Mono1 => Photometric::Mono2,
            Photometric::Mono2 => Photometric::Mono1,
        };
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Decodes the record's source file (relative paths resolve against `root`).
pub fn load_image(record: &ImageRecord, root: Option<&Path>) -> Result<RawImage, ImageError> {
    load_image_path(&record.resolved_path(root))
}

pub fn load_image_path(path: &Path) -> Result<RawImage, ImageError> {
    if !path.is_file() {
        return Err(ImageError::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut image = if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes, path)?
    } else if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        dicom::decode(&bytes, path)?
    } else {
        return Err(ImageError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "neither PNG nor DICOM Part 10".into(),
        });
    };
    if image.photometric == Photometric::Mono1 {
        image.invert();
    }
    Ok(image)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RawImage, ImageError> {
    let corrupt = |reason: String| ImageError::CorruptPixelData {
        path: path.to_path_buf(),
        reason,
    };
    let unsupported = |reason: String| ImageError::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(unsupported(format!(
            "color type {:?}, expected grayscale",
            info.color_type
        )));
    }
    let bit_depth = match info.bit_depth {
        png::BitDepth::Eight => 8u8,
        png::BitDepth::Sixteen => 16,
        other => return Err(unsupported(format!("bit depth {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| corrupt(e.to_string()))?;
    let data = &buf[..frame.buffer_size()];
    let pixels: Vec<u16> = if bit_depth == 8 {
        data.iter().map(|&b| b as u16).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if pixels.len() != width * height {
        return Err(corrupt(format!(
            "expected {} samples, got {}",
            width * height,
            pixels.len()
        )));
    }
    Ok(RawImage::new(height, width, pixels, bit_depth))
}

/// Writes a grayscale PNG at 8 or 16 bits per sample.
pub fn write_png(
    path: &Path,
    height: usize,
    width: usize,
    pixels: &[u16],
    bit_depth: u8,
) -> std::io::Result<()> {
    let bytes = encode_png(height, width, pixels, bit_depth)?;
    std::fs::write(path, bytes)
}

pub fn encode_png(
    height: usize,
    width: usize,
    pixels: &[u16],
    bit_depth: u8,
) -> std::io::Result<Vec<u8>> {
    assert_eq!(pixels.len(), height * width);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        let data: Vec<u8> = match bit_depth {
            8 => {
                enc.set_depth(png::BitDepth::Eight);
                pixels.iter().map(|&p| p.min(255) as u8).collect()
            }
            16 => {
                enc.set_depth(png::BitDepth::Sixteen);
                pixels.iter().flat_map(|p| p.to_be_bytes()).collect()
            }
            _ => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    "PNG bit depth must be 8 or 16",
                ))
            }
        };
        let mut w = enc.write_header().map_err(std::io::Error::other)?;
        w.write_image_data(&data).map_err(std::io::Error::other)?;
    }
    Ok(out)
}

/// Minimal DICOM Part 10 codec: grayscale, unsigned, single-frame, native
/// (uncompressed) pixel data in explicit or implicit VR little endian.
pub mod dicom {
    use std::path::Path;

    use super::{ImageError, Photometric, RawImage};
    use crate::preprocess::WindowSpec;

    pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
    pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
    const SECONDARY_CAPTURE: &str = "1.2.840.10008.5.1.4.1.1.7";

    type Tag = (u16, u16);
    const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
    const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
    const PHOTOMETRIC: Tag = (0x0028, 0x0004);
    const NUMBER_OF_FRAMES: Tag = (0x0028, 0x0008);
    const ROWS: Tag = (0x0028, 0x0010);
    const COLUMNS: Tag = (0x0028, 0x0011);
    const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
    const BITS_STORED: Tag = (0x0028, 0x0101);
    const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
    const WINDOW_CENTER: Tag = (0x0028, 0x1050);
    const WINDOW_WIDTH: Tag = (0x0028, 0x1051);
    const PIXEL_DATA: Tag = (0x7fe0, 0x0010);
    const ITEM: Tag = (0xfffe, 0xe000);
    const ITEM_END: Tag = (0xfffe, 0xe00d);
    const SEQUENCE_END: Tag = (0xfffe, 0xe0dd);
    const UNDEFINED: u32 = 0xffff_ffff;

    #[derive(Default)]
    struct Attributes<'a> {
        transfer_syntax: Option<String>,
        samples_per_pixel: Option<u16>,
        photometric: Option<String>,
        frames: Option<String>,
        rows: Option<u16>,
        columns: Option<u16>,
        bits_allocated: Option<u16>,
        bits_stored: Option<u16>,
        pixel_representation: Option<u16>,
        window_center: Option<String>,
        window_width: Option<String>,
        pixel_data: Option<&'a [u8]>,
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
        explicit: bool,
    }

    fn has_long_length(vr: &[u8]) -> bool {
        matches!(
            vr,
            b"OB" | b"OD" | b"OF" | b"OL" | b"OW" | b"SQ" | b"UC" | b"UN" | b"UR" | b"UT" | b"OV"
        )
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or("unexpected end of data")?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u16(&mut self) -> Result<u16, String> {
            Ok(u16::from_le_bytes(
                self.take(2)?.try_into().expect("2 bytes"),
            ))
        }
        fn u32(&mut self) -> Result<u32, String> {
            Ok(u32::from_le_bytes(
                self.take(4)?.try_into().expect("4 bytes"),
            ))
        }

        /// Reads one element header: tag, VR (if explicit), value length.
        fn header(&mut self) -> Result<(Tag, Option<[u8; 2]>, u32), String> {
            let tag = (self.u16()?, self.u16()?);
            if tag.0 == 0xfffe {
                return Ok((tag, None, self.u32()?));
            }
            // file meta group is always explicit
            if self.explicit || tag.0 == 0x0002 {
                let vr: [u8; 2] = self.take(2)?.try_into().expect("2 bytes");
                let len = if has_long_length(&vr) {
                    self.take(2)?;
                    self.u32()?
                } else {
                    self.u16()? as u32
                };
                Ok((tag, Some(vr), len))
            } else {
                Ok((tag, None, self.u32()?))
            }
        }

        /// Skips a value of undefined length (sequence or item) up to its delimiter.
        fn skip_undefined(&mut self, terminator: Tag) -> Result<(), String> {
            loop {
                let (tag, _, len) = self.header()?;
                if tag == terminator {
                    return Ok(());
                }
                if len == UNDEFINED {
                    let inner = if tag == ITEM { ITEM_END } else { SEQUENCE_END };
                    self.skip_undefined(inner)?;
                } else if tag != ITEM {
                    self.take(len as usize)?;
                }
            }
        }
    }

    fn text(v: &[u8]) -> String {
        String::from_utf8_lossy(v)
            .trim_matches(|c: char| c == '\0' || c.is_whitespace())
            .to_string()
    }

    fn first_number(s: &str) -> Option<f64> {
        s.split('\\').next()?.trim().parse().ok()
    }

    fn parse(bytes: &[u8]) -> Result<Attributes<'_>, String> {
        let mut cur = Cursor {
            bytes,
            pos: 132,
            explicit: true,
        };
        let mut a = Attributes::default();
        while cur.pos < bytes.len() {
            let (tag, vr, len) = cur.header()?;
            if len == UNDEFINED {
                if tag == PIXEL_DATA {
                    return Err("encapsulated (compressed) pixel data".into());
                }
                cur.skip_undefined(SEQUENCE_END)?;
                continue;
            }
            if vr.as_ref().is_some_and(|v| v == b"SQ") {
                cur.take(len as usize)?;
                continue;
            }
            let value = cur.take(len as usize)?;
            let us = || value.get(..2).map(|b| u16::from_le_bytes([b[0], b[1]]));
            match tag {
                TRANSFER_SYNTAX => {
                    let ts = text(value);
                    cur.explicit = ts != IMPLICIT_VR_LE;
                    a.transfer_syntax = Some(ts);
                }
                SAMPLES_PER_PIXEL => a.samples_per_pixel = us(),
                PHOTOMETRIC => a.photometric = Some(text(value)),
                NUMBER_OF_FRAMES => a.frames = Some(text(value)),
                ROWS => a.rows = us(),
                COLUMNS => a.columns = us(),
                BITS_ALLOCATED => a.bits_allocated = us(),
                BITS_STORED => a.bits_stored = us(),
                PIXEL_REPRESENTATION => a.pixel_representation = us(),
                WINDOW_CENTER => a.window_center = Some(text(value)),
                WINDOW_WIDTH => a.window_width = Some(text(value)),
                PIXEL_DATA => {
                    a.pixel_data = Some(value);
                    break;
                }
                _ => {}
            }
        }
        Ok(a)
    }

    pub(super) fn decode(bytes: &[u8], path: &Path) -> Result<RawImage, ImageError> {
        let unsupported = |reason: String| ImageError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason,
        };
        let corrupt = |reason: String| ImageError::CorruptPixelData {
            path: path.to_path_buf(),
            reason,
        };
        let a = parse(bytes).map_err(|e| {
            if e.contains("compressed") {
                unsupported(e)
            } else {
                corrupt(e)
            }
        })?;
        match a.transfer_syntax.as_deref() {
            Some(EXPLICIT_VR_LE) | Some(IMPLICIT_VR_LE) => {}
            Some(other) => return Err(unsupported(format!("transfer syntax {other}"))),
            None => return Err(corrupt("missing transfer syntax".into())),
        }
        if a.samples_per_pixel.unwrap_or(1) != 1 {
            return Err(unsupported("more than one sample per pixel".into()));
        }
        if a.pixel_representation.unwrap_or(0) != 0 {
            return Err(unsupported("signed pixel representation".into()));
        }
        if a.frames
            .as_deref()
            .and_then(|f| f.parse::<u32>().ok())
            .unwrap_or(1)
            > 1
        {
            return Err(unsupported("multi-frame image".into()));
        }
        let photometric = match a.photometric.as_deref() {
            Some("MONOCHROME1") => Photometric::Mono1,
            Some("MONOCHROME2") | None => Photometric::Mono2,
            Some(other) => return Err(unsupported(format!("photometric interpretation {other}"))),
        };
        let rows = a.rows.ok_or_else(|| corrupt("missing Rows".into()))? as usize;
        let cols = a.columns.ok_or_else(|| corrupt("missing Columns".into()))? as usize;
        let allocated = a.bits_allocated.unwrap_or(16);
        let stored = a.bits_stored.unwrap_or(allocated);
        if !matches!(allocated, 8 | 16) || stored == 0 || stored > allocated {
            return Err(unsupported(format!(
                "bits allocated {allocated}, stored {stored}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(corrupt("zero image dimension".into()));
        }
        let data = a
            .pixel_data
            .ok_or_else(|| corrupt("missing Pixel Data".into()))?;
        let bytes_per = allocated as usize / 8;
        let need = rows * cols * bytes_per;
        if data.len() < need {
            return Err(corrupt(format!(
                "pixel data holds {} bytes, need {need}",
                data.len()
            )));
        }
        let mask = ((1u32 << stored) - 1) as u16;
        let pixels: Vec<u16> = if bytes_per == 1 {
            data[..need].iter().map(|&b| b as u16 & mask).collect()
        } else {
            data[..need]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) & mask)
                .collect()
        };
        let mut image = RawImage::new(rows, cols, pixels, stored as u8);
        image.photometric = photometric;
        if let (Some(c), Some(w)) = (
            a.window_center.as_deref().and_then(first_number),
            a.window_width.as_deref().and_then(first_number),
        ) {
            image.window_hint = Some(WindowSpec::linear(c, w));
        }
        Ok(image)
    }

    fn element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        let mut value = value.to_vec();
        if value.len() % 2 == 1 {
            value.push(if matches!(vr, b"UI" | b"OB") { 0 } else { b' ' });
        }
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        out.extend_from_slice(vr);
        if has_long_length(vr) {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
        out.extend_from_slice(&value);
    }

    /// Encodes a minimal explicit-VR little-endian secondary-capture file.
    /// Pixels are stored as given; for `Mono1` callers pass already-inverted values.
    pub fn encode(image: &RawImage) -> Vec<u8> {
        let mut meta = Vec::new();
        element(&mut meta, (0x0002, 0x0001), b"OB", &[0, 1]);
        element(
            &mut meta,
            (0x0002, 0x0002),
            b"UI",
            SECONDARY_CAPTURE.as_bytes(),
        );
        element(
            &mut meta,
            (0x0002, 0x0003),
            b"UI",
            b"1.2.826.0.1.3680043.10.1",
        );
        element(&mut meta, TRANSFER_SYNTAX, b"UI", EXPLICIT_VR_LE.as_bytes());
        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        let mut group_len = Vec::new();
        element(
            &mut group_len,
            (0x0002, 0x0000),
            b"UL",
            &(meta.len() as u32).to_le_bytes(),
        );
        out.extend_from_slice(&group_len);
        out.extend_from_slice(&meta);

        let photometric: &[u8] = match image.photometric {
            Photometric::Mono1 => b"MONOCHROME1",
            Photometric::Mono2 => b"MONOCHROME2",
        };
        element(
            &mut out,
            (0x0008, 0x0016),
            b"UI",
            SECONDARY_CAPTURE.as_bytes(),
        );
        element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
        element(&mut out, PHOTOMETRIC, b"CS", photometric);
        element(&mut out, ROWS, b"US", &(image.height as u16).to_le_bytes());
        element(
            &mut out,
            COLUMNS,
            b"US",
            &(image.width as u16).to_le_bytes(),
        );
        element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
        element(
            &mut out,
            BITS_STORED,
            b"US",
            &(image.bit_depth as u16).to_le_bytes(),
        );
        element(
            &mut out,
            (0x0028, 0x0102),
            b"US",
            &(image.bit_depth as u16 - 1).to_le_bytes(),
        );
        element(&mut out, PIXEL_REPRESENTATION, b"US", &0u16.to_le_bytes());
        if let Some(w) = &image.window_hint {
            element(
                &mut out,
                WINDOW_CENTER,
                b"DS",
                format!("{}", w.center).as_bytes(),
            );
            element(
                &mut out,
                WINDOW_WIDTH,
                b"DS",
                format!("{}", w.width).as_bytes(),
            );
        }
        let data: Vec<u8> = image.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        element(&mut out, PIXEL_DATA, b"OW", &data);
        out
    }

    pub fn write(path: &Path, image: &RawImage) -> std::io::Result<()> {
        std::fs::write(path, encode(image))
    }
}
