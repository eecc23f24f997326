//! On-disk formats: PNG frames and binary patch files.
//!
//! Patch file layout (little-endian):
//!
//! ```text
//! magic        8 bytes "PNETPTCH"
//! kind         u8 (0 = I, 1 = P)
//! dims         channels, height, width as u32
//! label        u32
//! video_id     u32 length + UTF-8
//! frame_index  u64
//! row, col     u32, u32
//! values       f32 × channels·height·width
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::preprocess::{Patch, PatchKind, PatchOrigin, RasterFrame};

pub const PATCH_MAGIC: &[u8; 8] = b"PNETPTCH";

pub fn read_png(path: &Path) -> Result<RasterFrame> {
    let file = File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let png_err = |e: png::DecodingError| Error::Input(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Input(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let src_channels = info.color_type.samples();
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgb | png::ColorType::Rgba => 3,
        other => {
            return Err(Error::Input(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let mut data = Vec::with_capacity(w * h * channels);
    for y in 0..h {
        let line = &buf[y * stride..y * stride + w * src_channels];
        for px in line.chunks_exact(src_channels) {
            data.extend_from_slice(&px[..channels]);
        }
    }
    RasterFrame::new(w, h, channels, data)
}

pub fn write_png(path: &Path, frame: &RasterFrame) -> Result<()> {
    let color = match frame.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Input(format!("cannot write a {c}-channel PNG"))),
    };
    let file = File::create(path).at(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let enc_err = |e: png::EncodingError| Error::Input(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(&frame.data).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn encode_patch(patch: &Patch) -> Vec<u8> {
    let c = patch.kind.channels();
    let mut out = Vec::with_capacity(64 + patch.data.len() * 4);
    out.extend_from_slice(PATCH_MAGIC);
    out.push(match patch.kind {
        PatchKind::I => 0,
        PatchKind::P => 1,
    });
    for d in [c, patch.size, patch.size] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&patch.label.to_le_bytes());
    out.extend_from_slice(&(patch.origin.video_id.len() as u32).to_le_bytes());
    out.extend_from_slice(patch.origin.video_id.as_bytes());
    out.extend_from_slice(&patch.origin.frame_index.to_le_bytes());
    out.extend_from_slice(&(patch.origin.row as u32).to_le_bytes());
    out.extend_from_slice(&(patch.origin.col as u32).to_le_bytes());
    for v in &patch.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Input("truncated patch file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_patch(bytes: &[u8]) -> Result<Patch> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(8)? != PATCH_MAGIC {
        return Err(Error::Input("not a patch file (bad magic)".into()));
    }
    let kind = match r.take(1)?[0] {
        0 => PatchKind::I,
        1 => PatchKind::P,
        k => return Err(Error::Input(format!("unknown patch kind {k}"))),
    };
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    if c != kind.channels() || h != w {
        return Err(Error::Input(format!("patch dims {c}x{h}x{w} do not match kind {kind:?}")));
    }
    let label = r.u32()? as u32;
    let id_len = r.u32()?;
    let video_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| Error::Input(e.to_string()))?;
    let frame_index = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let (row, col) = (r.u32()?, r.u32()?);
    let body = r.take(c * h * w * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::Input("trailing bytes after patch".into()));
    }
    Ok(Patch {
        kind,
        label,
        origin: PatchOrigin {
            video_id,
            frame_index,
            row,
            col,
        },
        size: h,
        data: body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    })
}

pub fn write_patch(path: &Path, patch: &Patch) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).at(path)?);
    f.write_all(&encode_patch(patch)).at(path)?;
    f.flush().at(path)
}

pub fn read_patch(path: &Path) -> Result<Patch> {
    let mut bytes = Vec::new();
    File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    decode_patch(&bytes).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// File name used for a patch inside a store directory.
pub fn patch_file_name(patch: &Patch) -> String {
    let kind = match patch.kind {
        PatchKind::I => "i",
        PatchKind::P => "p",
    };
    let safe: String = patch
        .origin
        .video_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!(
        "{safe}_{kind}_f{:06}_r{:04}_c{:04}.patch",
        patch.origin.frame_index, patch.origin.row, patch.origin.col
    )
}
