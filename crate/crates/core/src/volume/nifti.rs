//! Single-file, uncompressed, little-endian NIfTI-1 (`.nii`).
//!
//! Only the parts of the header needed for 3D scalar volumes are honoured:
//! `dim`, `datatype`, `pixdim[1..=3]`, `vox_offset`, `scl_slope`/`scl_inter`.
//! Orientation (qform/sform) is written as "unknown" and ignored on read.
//!
//! The writer tags the volume kind in `descrip` so that label and weight
//! volumes come back with the same kind; untagged uint8 files holding only
//! {0, 1} are read as labels, everything else as intensities.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Volume, VolumeKind};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_MAGIC: usize = 344;

const UNITS_MM: u8 = 2;
const KIND_TAG: &str = "progseg:";

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(v)).map_err(|e| Error::io(path, e))
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parses a complete `.nii` byte stream.
pub fn decode(b: &[u8]) -> Result<Volume> {
    if b.len() < HEADER_SIZE {
        return Err(fmt_err(b.len(), format!("file is {} bytes, header needs 348", b.len())));
    }
    let sizeof_hdr = i32_at(b, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(b[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(fmt_err(0, format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    match &b[OFF_MAGIC..OFF_MAGIC + 4] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Unsupported(
                "two-file NIfTI (magic \"ni1\"); only single-file \"n+1\" is supported".into(),
            ))
        }
        other => return Err(fmt_err(OFF_MAGIC, format!("bad magic {other:?}"))),
    }

    let ndim = i16_at(b, OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(fmt_err(OFF_DIM, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for i in 1..=7usize {
        let off = OFF_DIM + 2 * i;
        let d = i16_at(b, off);
        if i <= ndim as usize {
            if d <= 0 {
                return Err(fmt_err(off, format!("dim[{i}] = {d} must be positive")));
            }
            if i <= 3 {
                dims[i - 1] = d as usize;
            } else if d != 1 {
                return Err(Error::Unsupported(format!(
                    "{ndim}D volume with dim[{i}] = {d}; only 3D volumes are supported"
                )));
            }
        }
    }

    let datatype = i16_at(b, OFF_DATATYPE);
    let (bytes_per_voxel, bitpix) = match datatype {
        DT_UINT8 => (1usize, 8i16),
        DT_INT16 => (2, 16),
        DT_FLOAT32 => (4, 32),
        other => {
            return Err(Error::Unsupported(format!("NIfTI datatype code {other}")));
        }
    };
    let stored_bitpix = i16_at(b, OFF_BITPIX);
    if stored_bitpix != 0 && stored_bitpix != bitpix {
        return Err(fmt_err(
            OFF_BITPIX,
            format!("bitpix {stored_bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let off = OFF_PIXDIM + 4 * (a + 1);
        let p = f32_at(b, off);
        if !(p.is_finite() && p > 0.0) {
            return Err(fmt_err(off, format!("pixdim[{}] = {p} must be positive", a + 1)));
        }
        *s = p as f64;
    }

    let vox_offset = f32_at(b, OFF_VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(fmt_err(
            OFF_VOX_OFFSET,
            format!("vox_offset {vox_offset} must be an integer >= 352"),
        ));
    }
    let start = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let end = start + n * bytes_per_voxel;
    if b.len() < end {
        return Err(fmt_err(
            b.len(),
            format!("data truncated: need {end} bytes, file has {}", b.len()),
        ));
    }
    let payload = &b[start..end];
    let mut data: Vec<f64> = match datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };

    let slope = f32_at(b, OFF_SCL_SLOPE) as f64;
    let inter = f32_at(b, OFF_SCL_INTER) as f64;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(fmt_err(OFF_SCL_SLOPE, "non-finite scl_slope/scl_inter"));
    }
    let scaled = !((slope == 0.0 || slope == 1.0) && inter == 0.0);
    if scaled {
        let s = if slope == 0.0 { 1.0 } else { slope };
        for v in &mut data {
            *v = *v * s + inter;
        }
    }

    let kind = match tagged_kind(b) {
        Some(k) if !scaled => k,
        _ => {
            if datatype == DT_UINT8 && !scaled && data.iter().all(|&v| v == 0.0 || v == 1.0) {
                VolumeKind::Label
            } else {
                VolumeKind::Intensity
            }
        }
    };
    Volume::new(dims, spacing, data, kind)
}

fn tagged_kind(b: &[u8]) -> Option<VolumeKind> {
    let field = &b[OFF_DESCRIP..OFF_DESCRIP + 80];
    let end = field.iter().position(|&c| c == 0).unwrap_or(80);
    let text = std::str::from_utf8(&field[..end]).ok()?;
    match text.strip_prefix(KIND_TAG)? {
        "label" => Some(VolumeKind::Label),
        "weight" => Some(VolumeKind::Weight),
        "intensity" => Some(VolumeKind::Intensity),
        _ => None,
    }
}

/// Serializes a volume: labels as uint8, everything else as float32.
pub fn encode(v: &Volume) -> Vec<u8> {
    let (datatype, bitpix, bpv) = match v.kind() {
        VolumeKind::Label => (DT_UINT8, 8i16, 1usize),
        _ => (DT_FLOAT32, 32, 4),
    };
    let mut out = vec![0u8; VOX_OFFSET + v.len() * bpv];
    let put_i16 = |buf: &mut [u8], off: usize, x: i16| buf[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |buf: &mut [u8], off: usize, x: f32| buf[off..off + 4].copy_from_slice(&x.to_le_bytes());

    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    out[38] = b'r';
    let dims = v.dims();
    put_i16(&mut out, OFF_DIM, 3);
    for i in 1..=7 {
        let d = if i <= 3 { dims[i - 1] as i16 } else { 1 };
        put_i16(&mut out, OFF_DIM + 2 * i, d);
    }
    put_i16(&mut out, OFF_DATATYPE, datatype);
    put_i16(&mut out, OFF_BITPIX, bitpix);
    put_f32(&mut out, OFF_PIXDIM, 1.0);
    for (a, &s) in v.spacing().iter().enumerate() {
        put_f32(&mut out, OFF_PIXDIM + 4 * (a + 1), s as f32);
    }
    for i in 4..8 {
        put_f32(&mut out, OFF_PIXDIM + 4 * i, 1.0);
    }
    put_f32(&mut out, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut out, OFF_SCL_SLOPE, 1.0);
    out[OFF_XYZT_UNITS] = UNITS_MM;
    let tag = format!(
        "{KIND_TAG}{}",
        match v.kind() {
            VolumeKind::Label => "label",
            VolumeKind::Weight => "weight",
            VolumeKind::Intensity => "intensity",
        }
    );
    out[OFF_DESCRIP..OFF_DESCRIP + tag.len()].copy_from_slice(tag.as_bytes());
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");

    let payload = &mut out[VOX_OFFSET..];
    match v.kind() {
        VolumeKind::Label => {
            for (dst, &x) in payload.iter_mut().zip(v.data()) {
                *dst = x as u8;
            }
        }
        _ => {
            for (dst, &x) in payload.chunks_exact_mut(4).zip(v.data()) {
                dst.copy_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_for(dims: [i16; 3], datatype: i16, pixdim: [f32; 3]) -> Vec<u8> {
        let bpv = match datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            _ => 4,
        };
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut b = vec![0u8; VOX_OFFSET + n * bpv];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[OFF_DIM..OFF_DIM + 2].copy_from_slice(&3i16.to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            let off = OFF_DIM + 2 * (i + 1);
            b[off..off + 2].copy_from_slice(&d.to_le_bytes());
        }
        b[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&datatype.to_le_bytes());
        for (i, p) in pixdim.iter().enumerate() {
            let off = OFF_PIXDIM + 4 * (i + 1);
            b[off..off + 4].copy_from_slice(&p.to_le_bytes());
        }
        b[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&352f32.to_le_bytes());
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
        b
    }

    #[test]
    fn reads_anisotropic_spacing() {
        let b = header_for([2, 2, 2], DT_FLOAT32, [0.625, 0.625, 2.5]);
        let v = decode(&b).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert_eq!(v.spacing(), [0.625, 0.625, 2.5]);
        assert_eq!(v.kind(), VolumeKind::Intensity);
    }

    #[test]
    fn two_file_magic_is_unsupported() {
        let mut b = header_for([2, 2, 2], DT_FLOAT32, [1.0; 3]);
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unsupported_datatype_names_code() {
        let b = header_for([2, 2, 2], 64, [1.0; 3]);
        match decode(&b) {
            Err(Error::Unsupported(msg)) => assert!(msg.contains("64"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        let mut b = header_for([2, 2, 2], DT_FLOAT32, [1.0; 3]);
        b[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&100f32.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::Format { offset: OFF_VOX_OFFSET, .. })));

        let b = header_for([2, 2, 2], DT_FLOAT32, [1.0; 3]);
        assert!(matches!(decode(&b[..360]), Err(Error::Format { offset: 360, .. })));
        assert!(matches!(decode(&b[..100]), Err(Error::Format { .. })));

        let mut b = header_for([2, 2, 2], DT_FLOAT32, [1.0; 3]);
        b[OFF_PIXDIM + 8..OFF_PIXDIM + 12].copy_from_slice(&(-1f32).to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::Format { offset, .. }) if offset == OFF_PIXDIM + 8));
    }

    #[test]
    fn int16_with_scaling() {
        let mut b = header_for([2, 1, 1], DT_INT16, [1.0; 3]);
        b[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&2f32.to_le_bytes());
        b[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&0.5f32.to_le_bytes());
        b[VOX_OFFSET..VOX_OFFSET + 2].copy_from_slice(&(-3i16).to_le_bytes());
        b[VOX_OFFSET + 2..VOX_OFFSET + 4].copy_from_slice(&7i16.to_le_bytes());
        let v = decode(&b).unwrap();
        assert_eq!(v.data(), &[-5.5, 14.5]);
    }

    #[test]
    fn untagged_binary_uint8_reads_as_label() {
        let mut b = header_for([2, 1, 1], DT_UINT8, [1.0; 3]);
        b[VOX_OFFSET] = 1;
        assert_eq!(decode(&b).unwrap().kind(), VolumeKind::Label);
        b[VOX_OFFSET] = 7;
        assert_eq!(decode(&b).unwrap().kind(), VolumeKind::Intensity);
    }

    #[test]
    fn label_and_weight_dtypes() {
        let l = Volume::label_from_fn([2, 2, 2], [1.0; 3], |x, _, _| x == 1).unwrap();
        let bytes = encode(&l);
        assert_eq!(i16_at(&bytes, OFF_DATATYPE), DT_UINT8);
        assert_eq!(bytes.len(), VOX_OFFSET + 8);
        let w = Volume::filled([2, 2, 2], [1.0; 3], 1.5, VolumeKind::Weight).unwrap();
        let bytes = encode(&w);
        assert_eq!(i16_at(&bytes, OFF_DATATYPE), DT_FLOAT32);
        assert_eq!(decode(&bytes).unwrap(), w);
    }
}
