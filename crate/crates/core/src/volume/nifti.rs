//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Raw decoded content of a NIfTI-1 file.
#[derive(Debug, Clone)]
pub(crate) struct NiftiImage {
    /// (nx, ny, nz), x varying fastest in `data`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
    pub data: Vec<f32>,
}

fn is_gz(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let mut reader = BufReader::new(file);
    if is_gz(path) {
        MultiGzDecoder::new(reader)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

pub(crate) fn read(path: &Path) -> Result<NiftiImage> {
    let bytes = read_all(path)?;
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_SIZE {
        return Err(malformed("file shorter than the 348-byte header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(path, &bytes)
    } else {
        Err(malformed("sizeof_hdr is not 348"))
    }
}

fn decode<E: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(malformed(format!(
            "unsupported magic {magic:?} (single-file NIfTI-1 only)"
        )));
    }
    let i16_at = |o: usize| E::read_i16(&bytes[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&bytes[o..o + 4]);

    let dim: Vec<i16> = (0..8).map(|i| i16_at(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim}")));
    }
    let not_3d = |reason: String| Error::NotVolumetric {
        path: path.to_path_buf(),
        reason,
    };
    if ndim < 3 {
        return Err(not_3d(format!("{ndim} dimensions")));
    }
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(malformed(format!(
            "non-positive extent in {:?}",
            &dim[1..=ndim as usize]
        )));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(not_3d(format!("extents {:?}", &dim[1..=ndim as usize])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = i16_at(70);
    let pixdim: Vec<f32> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64].map(f64::abs);
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(malformed(format!("voxel spacing {spacing:?}")));
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));

    let count = dims.iter().product::<usize>();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(malformed(format!("unsupported datatype code {other}"))),
    };
    let payload = bytes
        .get(offset..offset + count * width)
        .ok_or_else(|| malformed(format!("payload truncated: need {} bytes", count * width)))?;
    let mut cur = Cursor::new(payload);
    let mut data = Vec::with_capacity(count);
    let io = |e| Error::io(path, e);
    for _ in 0..count {
        let v = match datatype {
            DT_UINT8 => cur.read_u8().map_err(io)? as f32,
            DT_INT8 => cur.read_i8().map_err(io)? as f32,
            DT_INT16 => cur.read_i16::<E>().map_err(io)? as f32,
            DT_UINT16 => cur.read_u16::<E>().map_err(io)? as f32,
            DT_INT32 => cur.read_i32::<E>().map_err(io)? as f32,
            DT_UINT32 => cur.read_u32::<E>().map_err(io)? as f32,
            DT_FLOAT32 => cur.read_f32::<E>().map_err(io)?,
            _ => cur.read_f64::<E>().map_err(io)? as f32,
        };
        data.push(v);
    }
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }

    let affine = header_affine::<E>(bytes, &pixdim);
    Ok(NiftiImage {
        dims,
        spacing,
        affine,
        data,
    })
}

/// Voxel-to-world transform: sform when set, else qform, else scaling only.
fn header_affine<E: ByteOrder>(bytes: &[u8], pixdim: &[f32]) -> [[f64; 4]; 4] {
    let i16_at = |o: usize| E::read_i16(&bytes[o..o + 2]);
    let f = |o: usize| E::read_f32(&bytes[o..o + 4]) as f64;
    let (qform_code, sform_code) = (i16_at(252), i16_at(254));
    let mut m = [[0.0; 4]; 4];
    m[3][3] = 1.0;
    if sform_code > 0 {
        for (r, base) in [280, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                m[r][c] = f(base + 4 * c);
            }
        }
    } else if qform_code > 0 {
        let (b, c, d) = (f(256), f(260), f(264));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        let scale = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64 * qfac];
        for r in 0..3 {
            for col in 0..3 {
                m[r][col] = rot[r][col] * scale[col];
            }
        }
        m[0][3] = f(268);
        m[1][3] = f(272);
        m[2][3] = f(276);
    } else {
        for a in 0..3 {
            m[a][a] = pixdim[a + 1] as f64;
        }
    }
    m
}

/// Writes a little-endian float32 NIfTI-1 file, gzip-compressed when the
/// path ends in `.gz`. The affine is stored as the sform.
pub(crate) fn write(path: &Path, image: &NiftiImage) -> Result<()> {
    let mut buf = Vec::with_capacity(DATA_OFFSET + 4 * image.data.len());
    let mut header = [0u8; HEADER_SIZE];
    {
        let h = &mut header;
        LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
        h[38] = b'r';
        let dim = [
            3i16,
            image.dims[0] as i16,
            image.dims[1] as i16,
            image.dims[2] as i16,
            1,
            1,
            1,
            1,
        ];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut h[70..], DT_FLOAT32);
        LittleEndian::write_i16(&mut h[72..], 32);
        let pixdim = [
            1.0f32,
            image.spacing[0] as f32,
            image.spacing[1] as f32,
            image.spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ];
        for (i, p) in pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
        }
        LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
        LittleEndian::write_f32(&mut h[112..], 1.0);
        h[123] = 2; // millimetres
        LittleEndian::write_i16(&mut h[254..], 1);
        for (r, base) in [280, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                LittleEndian::write_f32(&mut h[base + 4 * c..], image.affine[r][c] as f32);
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");
    }
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    for &v in &image.data {
        buf.write_f32::<LittleEndian>(v).expect("write to vec");
    }

    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut writer = BufWriter::new(file);
    if is_gz(path) {
        let mut enc = GzEncoder::new(writer, Compression::fast());
        enc.write_all(&buf).map_err(io)?;
        enc.finish().map_err(io)?.flush().map_err(io)?;
    } else {
        writer.write_all(&buf).map_err(io)?;
        writer.flush().map_err(io)?;
    }
    Ok(())
}
