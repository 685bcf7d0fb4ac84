//! Native `.vvol` container and minimal NIfTI-1 import/export.
//!
//! A `.vvol` file is a single UTF-8 JSON header line (field order fixed:
//! magic, kind, dims, spacing, origin, dtype), a newline, then the raw
//! little-endian payload. Save/load round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::DenseField;
use crate::error::{Error, Result};
use crate::volume::{Geometry, SegMask, Volume};

pub const VVOL_MAGIC: &str = "vvol";

#[derive(Debug, Serialize, Deserialize)]
struct VvolHeader {
    magic: String,
    kind: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
}

/// Any object a `.vvol` file can hold.
#[derive(Debug, Clone)]
pub enum LoadedObject {
    Volume(Volume),
    Mask(SegMask),
    Field(DenseField),
}

impl LoadedObject {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            LoadedObject::Volume(v) => Ok(v),
            other => Err(Error::MalformedHeader(format!(
                "expected volume, found {}",
                other.kind_name()
            ))),
        }
    }

    pub fn into_mask(self) -> Result<SegMask> {
        match self {
            LoadedObject::Mask(m) => Ok(m),
            other => Err(Error::MalformedHeader(format!(
                "expected mask, found {}",
                other.kind_name()
            ))),
        }
    }

    pub fn into_field(self) -> Result<DenseField> {
        match self {
            LoadedObject::Field(f) => Ok(f),
            other => Err(Error::MalformedHeader(format!(
                "expected field, found {}",
                other.kind_name()
            ))),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            LoadedObject::Volume(_) => "volume",
            LoadedObject::Mask(_) => "mask",
            LoadedObject::Field(_) => "field",
        }
    }
}

fn write_vvol(path: &Path, header: &VvolHeader, payload: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let header = VvolHeader {
        magic: VVOL_MAGIC.into(),
        kind: "volume".into(),
        dims: v.geom.dims,
        spacing: v.geom.spacing,
        origin: v.geom.origin,
        dtype: "f32".into(),
    };
    let mut payload = Vec::with_capacity(v.voxels.len() * 4);
    for x in &v.voxels {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_vvol(path, &header, &payload)
}

pub fn save_mask(path: &Path, m: &SegMask) -> Result<()> {
    let header = VvolHeader {
        magic: VVOL_MAGIC.into(),
        kind: "mask".into(),
        dims: m.geom.dims,
        spacing: m.geom.spacing,
        origin: m.geom.origin,
        dtype: "u8".into(),
    };
    write_vvol(path, &header, &m.labels)
}

pub fn save_field(path: &Path, f: &DenseField) -> Result<()> {
    let header = VvolHeader {
        magic: VVOL_MAGIC.into(),
        kind: "field".into(),
        dims: f.geom.dims,
        spacing: f.geom.spacing,
        origin: f.geom.origin,
        dtype: "f32x3".into(),
    };
    let mut payload = Vec::with_capacity(f.vectors.len() * 12);
    for u in &f.vectors {
        for c in u {
            payload.extend_from_slice(&c.to_le_bytes());
        }
    }
    write_vvol(path, &header, &payload)
}

/// Loads any `.vvol` object, validating header and payload length.
pub fn load_native(path: &Path) -> Result<LoadedObject> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::MalformedHeader("missing header newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
        if header_line.len() > 4096 {
            return Err(Error::MalformedHeader("header line too long".into()));
        }
    }
    let header: VvolHeader = serde_json::from_slice(&header_line)
        .map_err(|e| Error::MalformedHeader(format!("header parse failed: {e}")))?;
    if header.magic != VVOL_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            header.magic
        )));
    }
    let geom = Geometry::new(header.dims, header.spacing, header.origin)
        .map_err(|e| Error::MalformedHeader(format!("bad geometry: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let n = geom.voxel_count();
    match (header.kind.as_str(), header.dtype.as_str()) {
        ("volume", "f32") => {
            if payload.len() != n * 4 {
                return Err(Error::PayloadMismatch {
                    expected: n * 4,
                    found: payload.len(),
                });
            }
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(LoadedObject::Volume(Volume::new(geom, voxels)?))
        }
        ("mask", "u8") => {
            if payload.len() != n {
                return Err(Error::PayloadMismatch {
                    expected: n,
                    found: payload.len(),
                });
            }
            Ok(LoadedObject::Mask(SegMask::new(geom, payload)?))
        }
        ("field", "f32x3") => {
            if payload.len() != n * 12 {
                return Err(Error::PayloadMismatch {
                    expected: n * 12,
                    found: payload.len(),
                });
            }
            let vectors = payload
                .chunks_exact(12)
                .map(|c| {
                    [
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                        f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                        f32::from_le_bytes([c[8], c[9], c[10], c[11]]),
                    ]
                })
                .collect();
            Ok(LoadedObject::Field(DenseField { geom, vectors }))
        }
        (k, d) => Err(Error::MalformedHeader(format!(
            "unknown kind/dtype pair {k:?}/{d:?}"
        ))),
    }
}

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

/// Imports an uncompressed little-endian single-file NIfTI-1 volume.
///
/// Supported datatype codes: 2 (uint8, loaded as a mask), 4 (int16) and
/// 16 (float32), both widened to a 32-bit real volume. Spacing comes from
/// pixdim[1..3] and the origin from the qoffset fields; orientation
/// matrices are otherwise ignored.
pub fn import_nifti(path: &Path) -> Result<LoadedObject> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file too short for NIfTI header: {} bytes",
            bytes.len()
        )));
    }
    let i16_at = |o: usize| i16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let i32_at = |o: usize| i32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let f32_at = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);

    if i32_at(0) != 348 {
        return Err(Error::UnsupportedNifti(
            "sizeof_hdr != 348 (big-endian or not NIfTI-1)".into(),
        ));
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        return Err(Error::MalformedHeader("missing NIfTI magic".into()));
    }
    if &magic[..3] == b"ni1" {
        return Err(Error::UnsupportedNifti(
            "two-file NIfTI (.hdr/.img) not supported".into(),
        ));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("bad dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3.min(ndim as usize) {
        let d = i16_at(42 + 2 * a);
        if d < 1 {
            return Err(Error::MalformedHeader(format!("bad dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(Error::UnsupportedNifti("4D+ volumes not supported".into()));
        }
    }
    let datatype = i16_at(70);
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let p = f32_at(76 + 4 * (a + 1)) as f64;
        spacing[a] = if p > 0.0 { p } else { 1.0 };
    }
    let origin = [f32_at(268) as f64, f32_at(272) as f64, f32_at(276) as f64];
    let vox_offset = f32_at(108);
    let offset = if vox_offset < NIFTI_VOX_OFFSET as f32 {
        NIFTI_VOX_OFFSET
    } else {
        vox_offset as usize
    };
    let geom = Geometry::new(dims, spacing, origin)
        .map_err(|e| Error::MalformedHeader(format!("bad NIfTI geometry: {e}")))?;
    let n = geom.voxel_count();
    let need = |b: usize| -> Result<&[u8]> {
        if bytes.len() < offset + n * b {
            Err(Error::PayloadMismatch {
                expected: offset + n * b,
                found: bytes.len(),
            })
        } else {
            Ok(&bytes[offset..offset + n * b])
        }
    };
    match datatype {
        2 => {
            let data = need(1)?;
            Ok(LoadedObject::Mask(SegMask::new(geom, data.to_vec())?))
        }
        4 => {
            let data = need(2)?;
            let voxels = data
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect();
            Ok(LoadedObject::Volume(Volume::new(geom, voxels)?))
        }
        16 => {
            let data = need(4)?;
            let voxels = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(LoadedObject::Volume(Volume::new(geom, voxels)?))
        }
        other => Err(Error::UnsupportedNifti(format!(
            "datatype code {other} (only 2, 4, 16 supported)"
        ))),
    }
}

fn nifti_header(geom: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(geom.dims[a] as i16).to_le_bytes());
    }
    for a in 3..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(geom.spacing[a] as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    h[268..272].copy_from_slice(&(geom.origin[0] as f32).to_le_bytes());
    h[272..276].copy_from_slice(&(geom.origin[1] as f32).to_le_bytes());
    h[276..280].copy_from_slice(&(geom.origin[2] as f32).to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Writes a float32 NIfTI-1 volume (single-file, uncompressed).
pub fn export_nifti_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut out = nifti_header(&v.geom, 16, 32);
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a uint8 NIfTI-1 mask (single-file, uncompressed).
pub fn export_nifti_mask(path: &Path, m: &SegMask) -> Result<()> {
    let mut out = nifti_header(&m.geom, 2, 8);
    out.extend_from_slice(&m.labels);
    std::fs::write(path, out)?;
    Ok(())
}
