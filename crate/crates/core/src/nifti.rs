//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.
//!
//! Supported datatypes are uint8, int16 and float32. Files are read in either
//! byte order (detected from `dim[0]`) and always written little-endian.
//! Gzip is detected from the leading magic bytes, not the file extension.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::volume::{det3, Geometry, LabelVolume, ProbVolume, ScalarVolume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

/// Voxel payload in file order (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::U8(_) => Datatype::U8,
            VoxelData::I16(_) => Datatype::I16,
            VoxelData::F32(_) => Datatype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_f32(&self) -> Vec<f32> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }
}

/// A decoded NIfTI image: spatial geometry, optional channel count and payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub geometry: Geometry,
    /// Size of the fourth dimension (1 for plain 3D images).
    pub channels: usize,
    pub data: VoxelData,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

/// The volume kind a file most naturally decodes to.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Labels(LabelVolume),
    Scalar(ScalarVolume),
    Probs(ProbVolume),
}

impl NiftiImage {
    pub fn from_labels(vol: &LabelVolume) -> Self {
        NiftiImage {
            geometry: vol.geometry().clone(),
            channels: 1,
            data: VoxelData::U8(vol.as_slice().to_vec()),
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }

    /// Scalar image stored as `datatype`; integer storage requires integral,
    /// in-range intensities.
    pub fn from_scalar(vol: &ScalarVolume, datatype: Datatype) -> Result<Self> {
        let src = vol.as_slice();
        let data = match datatype {
            Datatype::F32 => VoxelData::F32(src.to_vec()),
            Datatype::U8 => VoxelData::U8(
                src.iter()
                    .map(|&v| integral_in_range(v, 0.0, 255.0).map(|v| v as u8))
                    .collect::<Result<_>>()?,
            ),
            Datatype::I16 => VoxelData::I16(
                src.iter()
                    .map(|&v| {
                        integral_in_range(v, i16::MIN as f32, i16::MAX as f32).map(|v| v as i16)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(NiftiImage {
            geometry: vol.geometry().clone(),
            channels: 1,
            data,
            scl_slope: 1.0,
            scl_inter: 0.0,
        })
    }

    pub fn from_probs(vol: &ProbVolume) -> Self {
        NiftiImage {
            geometry: vol.geometry().clone(),
            channels: vol.num_classes(),
            data: VoxelData::F32(vol.as_slice().to_vec()),
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }

    fn has_scaling(&self) -> bool {
        self.scl_slope.is_finite()
            && self.scl_slope != 0.0
            && (self.scl_slope != 1.0 || (self.scl_inter.is_finite() && self.scl_inter != 0.0))
    }

    /// Integer-typed 3D data with values in 0..=255.
    pub fn into_labels(self) -> Result<LabelVolume> {
        if self.channels != 1 {
            return Err(Error::InvalidVolume(format!(
                "label volumes must be 3D, file has {} channels",
                self.channels
            )));
        }
        if self.has_scaling() {
            return Err(Error::InvalidVolume(
                "label volumes must not carry intensity scaling".into(),
            ));
        }
        let shape = self.geometry.shape();
        let labels = match self.data {
            VoxelData::U8(v) => v,
            VoxelData::I16(v) => v
                .into_iter()
                .map(|x| {
                    u8::try_from(x).map_err(|_| {
                        Error::InvalidVolume(format!("label value {x} outside 0..=255"))
                    })
                })
                .collect::<Result<_>>()?,
            VoxelData::F32(_) => {
                return Err(Error::InvalidVolume(
                    "floating-point data cannot be loaded as labels".into(),
                ))
            }
        };
        let grid = Array3::from_shape_vec(shape, labels)
            .map_err(|e| Error::InvalidVolume(e.to_string()))?;
        LabelVolume::new(self.geometry, grid)
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        if self.channels != 1 {
            return Err(Error::InvalidVolume(format!(
                "scalar volumes must be 3D, file has {} channels",
                self.channels
            )));
        }
        let mut values = self.data.to_f32();
        if self.has_scaling() {
            let inter = if self.scl_inter.is_finite() { self.scl_inter } else { 0.0 };
            values.iter_mut().for_each(|v| *v = *v * self.scl_slope + inter);
        }
        let grid = Array3::from_shape_vec(self.geometry.shape(), values)
            .map_err(|e| Error::InvalidVolume(e.to_string()))?;
        ScalarVolume::new(self.geometry, grid)
    }

    /// Fourth dimension interpreted as classes; must be normalized.
    pub fn into_probs(self) -> Result<ProbVolume> {
        let [z, y, x] = self.geometry.shape();
        let values = self.data.to_f32();
        let grid = Array4::from_shape_vec((self.channels, z, y, x), values)
            .map_err(|e| Error::InvalidVolume(e.to_string()))?;
        ProbVolume::new(self.geometry, grid)
    }

    pub fn into_volume(self) -> Result<AnyVolume> {
        if self.channels > 1 {
            return self.into_probs().map(AnyVolume::Probs);
        }
        match self.data.datatype() {
            Datatype::F32 => self.into_scalar().map(AnyVolume::Scalar),
            _ if self.has_scaling() => self.into_scalar().map(AnyVolume::Scalar),
            _ => self.into_labels().map(AnyVolume::Labels),
        }
    }
}

fn integral_in_range(v: f32, lo: f32, hi: f32) -> Result<f32> {
    if v.fract() != 0.0 || v < lo || v > hi {
        return Err(Error::InvalidVolume(format!(
            "value {v} is not representable in the requested integer datatype"
        )));
    }
    Ok(v)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_nifti(path)?.into_labels()
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_nifti(path)?.into_scalar()
}

pub fn read_probs(path: impl AsRef<Path>) -> Result<ProbVolume> {
    read_nifti(path)?.into_probs()
}

/// Assembles a probability volume from one 3D file per class, in class order.
pub fn read_probs_per_class<P: AsRef<Path>>(paths: &[P]) -> Result<ProbVolume> {
    if paths.is_empty() {
        return Err(Error::InvalidConfig("no per-class probability files".into()));
    }
    let mut geometry = None;
    let mut values = Vec::new();
    for p in paths {
        let img = read_scalar(p)?;
        match &geometry {
            None => geometry = Some(img.geometry().clone()),
            Some(g) => g.ensure_compatible(img.geometry(), 1e-6)?,
        }
        values.extend_from_slice(img.as_slice());
    }
    let geometry = geometry.expect("at least one class file");
    let [z, y, x] = geometry.shape();
    let grid = Array4::from_shape_vec((paths.len(), z, y, x), values)
        .map_err(|e| Error::InvalidVolume(e.to_string()))?;
    ProbVolume::new(geometry, grid)
}

pub fn write_nifti(image: &NiftiImage, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image, gzip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// True when the path ends in `.gz`.
pub fn wants_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_nifti(&NiftiImage::from_labels(vol), path, wants_gzip(path))
}

pub fn write_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_nifti(&NiftiImage::from_scalar(vol, Datatype::F32)?, path, wants_gzip(path))
}

pub fn write_probs(vol: &ProbVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_nifti(&NiftiImage::from_probs(vol), path, wants_gzip(path))
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }

    fn f32s<const N: usize>(&self, off: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(off + 4 * i))
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedHeader(format!("gzip stream: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

/// Decodes an in-memory `.nii` or `.nii.gz` file.
pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    let raw = maybe_gunzip(bytes)?;
    let buf: &[u8] = &raw;
    if buf.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the 348-byte header",
            buf.len()
        )));
    }

    let mut h = HeaderReader { buf, endian: Endian::Little };
    if !(1..=7).contains(&h.i16(40)) {
        h.endian = Endian::Big;
        if !(1..=7).contains(&h.i16(40)) {
            return Err(Error::MalformedHeader("dim[0] outside 1..=7 in either byte order".into()));
        }
    }
    if h.i32(0) != HEADER_SIZE as i32 {
        return Err(Error::MalformedHeader(format!("sizeof_hdr is {}", h.i32(0))));
    }
    if &buf[344..348] != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "magic {:?} is not \"n+1\\0\"",
            String::from_utf8_lossy(&buf[344..348])
        )));
    }

    let ndim = h.i16(40) as usize;
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = h.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[4..].iter().any(|&d| d != 1) {
        return Err(Error::InvalidVolume(format!(
            "dimensions beyond the fourth are not supported: {:?}",
            &dims[..ndim]
        )));
    }
    let datatype = Datatype::from_code(h.i16(70))?;
    let pixdim: [f32; 8] = h.f32s(76);
    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let geometry = header_geometry(&h, [dims[0], dims[1], dims[2]], &pixdim)?;
    let channels = dims[3];
    let count = geometry.len() * channels;
    let nbytes = count * datatype.bytes();
    let payload = buf.get(offset..offset + nbytes).ok_or_else(|| {
        Error::MalformedHeader(format!(
            "payload needs {nbytes} bytes at offset {offset}, file has {}",
            buf.len()
        ))
    })?;
    let data = match (datatype, h.endian) {
        (Datatype::U8, _) => VoxelData::U8(payload.to_vec()),
        (Datatype::I16, Endian::Little) => VoxelData::I16(
            payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
        ),
        (Datatype::I16, Endian::Big) => VoxelData::I16(
            payload.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]])).collect(),
        ),
        (Datatype::F32, Endian::Little) => VoxelData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        (Datatype::F32, Endian::Big) => VoxelData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };

    Ok(NiftiImage {
        geometry,
        channels,
        data,
        scl_slope: h.f32(112),
        scl_inter: h.f32(116),
    })
}

/// Builds the (z, y, x) geometry from the sform, the qform, or bare pixdim,
/// in that order of preference.
fn header_geometry(h: &HeaderReader, dims_xyz: [usize; 3], pixdim: &[f32; 8]) -> Result<Geometry> {
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);

    // columns are the world-space step of one voxel along i, j, k
    let (columns, offset, oriented): ([[f64; 3]; 3], [f64; 3], bool) = if sform_code > 0 {
        let rows: [[f32; 4]; 3] = [h.f32s(280), h.f32s(296), h.f32s(312)];
        let cols = std::array::from_fn(|c| std::array::from_fn(|r| rows[r][c] as f64));
        let off = std::array::from_fn(|r| rows[r][3] as f64);
        (cols, off, true)
    } else if qform_code > 0 {
        let [b, c, d]: [f32; 3] = h.f32s(256);
        let off: [f32; 3] = h.f32s(268);
        let rot = quaternion_to_rotation(b as f64, c as f64, d as f64);
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let cols = std::array::from_fn(|col| {
            let scale = pixdim[col + 1].abs() as f64 * if col == 2 { qfac } else { 1.0 };
            std::array::from_fn(|r| rot[r][col] * scale)
        });
        (cols, off.map(|v| v as f64), true)
    } else {
        let cols = std::array::from_fn(|col| {
            std::array::from_fn(|r| if r == col { pixdim[col + 1].abs() as f64 } else { 0.0 })
        });
        (cols, [0.0; 3], false)
    };

    let mut spacing = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for axis in 0..3 {
        let col = 2 - axis;
        let norm = columns[col].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidGeometry(format!("voxel axis {col} has zero extent")));
        }
        let pd = pixdim[col + 1].abs() as f64;
        spacing[axis] = if pd.is_finite() && pd > 0.0 { pd } else { norm };
        for r in 0..3 {
            direction[r][axis] = columns[col][r] / norm;
        }
    }
    let shape = [dims_xyz[2], dims_xyz[1], dims_xyz[0]];
    let geometry = Geometry::new(shape, spacing)?
        .with_origin(offset)
        .with_direction(direction)?;
    Ok(if oriented { geometry } else { geometry.unoriented() })
}

fn quaternion_to_rotation(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ]
}

/// Quaternion (b, c, d) and qfac of an orthonormal matrix, or `None` when the
/// columns are not orthogonal (only the sform can carry those).
fn rotation_to_quaternion(m: &[[f64; 3]; 3]) -> Option<([f64; 3], f64)> {
    for i in 0..3 {
        for j in (i + 1)..3 {
            let dot: f64 = (0..3).map(|r| m[r][i] * m[r][j]).sum();
            if dot.abs() > 1e-6 {
                return None;
            }
        }
    }
    let mut r = *m;
    let qfac = if det3(&r) < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d);
    if trace > 0.5 {
        let s = (trace + 1.0).sqrt() * 2.0;
        a = 0.25 * s;
        b = (r[2][1] - r[1][2]) / s;
        c = (r[0][2] - r[2][0]) / s;
        d = (r[1][0] - r[0][1]) / s;
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        a = (r[2][1] - r[1][2]) / s;
        b = 0.25 * s;
        c = (r[0][1] + r[1][0]) / s;
        d = (r[0][2] + r[2][0]) / s;
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        a = (r[0][2] - r[2][0]) / s;
        b = (r[0][1] + r[1][0]) / s;
        c = 0.25 * s;
        d = (r[1][2] + r[2][1]) / s;
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        a = (r[1][0] - r[0][1]) / s;
        b = (r[0][2] + r[2][0]) / s;
        c = (r[1][2] + r[2][1]) / s;
        d = 0.25 * s;
    }
    // NIfTI stores only (b, c, d) and assumes a >= 0
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    Some(([b * sign, c * sign, d * sign], qfac))
}

/// Narrows to f32, refusing values that would lose more than 1e-6 (relative
/// above magnitude 1).
fn representable(v: f64, what: &str) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() || (f as f64 - v).abs() > 1e-6 * v.abs().max(1.0) {
        return Err(Error::InvalidGeometry(format!(
            "{what} {v} is not representable in the NIfTI header"
        )));
    }
    Ok(f)
}

struct HeaderWriter {
    buf: Vec<u8>,
}

impl HeaderWriter {
    fn i16(&mut self, off: usize, v: i16) {
        self.buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, off: usize, v: i32) {
        self.buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, off: usize, v: f32) {
        self.buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
}

/// Encodes an image as a little-endian single-file NIfTI-1 byte stream.
pub fn encode(image: &NiftiImage, gzip: bool) -> Result<Vec<u8>> {
    let g = &image.geometry;
    let [nz, ny, nx] = g.shape();
    let dims_xyzc = [nx, ny, nz, image.channels];
    if image.channels == 0 || image.data.len() != g.len() * image.channels {
        return Err(Error::InvalidVolume(format!(
            "payload of {} voxels does not match {:?}",
            image.data.len(),
            dims_xyzc
        )));
    }
    let mut dim = [1i16; 8];
    dim[0] = if image.channels > 1 { 4 } else { 3 };
    for (i, &d) in dims_xyzc.iter().enumerate() {
        dim[i + 1] = i16::try_from(d).map_err(|_| {
            Error::InvalidGeometry(format!("dimension {d} exceeds the NIfTI-1 limit"))
        })?;
    }

    let mut h = HeaderWriter { buf: vec![0u8; DATA_OFFSET] };
    h.i32(0, HEADER_SIZE as i32);
    h.buf[38] = b'r';
    for (i, &d) in dim.iter().enumerate() {
        h.i16(40 + 2 * i, d);
    }
    let datatype = image.data.datatype();
    h.i16(70, datatype.code());
    h.i16(72, (datatype.bytes() * 8) as i16);

    let spacing = g.spacing();
    let direction = g.direction();
    let origin = g.origin();
    // world step per voxel along i, j, k (= array axes x, y, z)
    let columns: [[f64; 3]; 3] =
        std::array::from_fn(|col| std::array::from_fn(|r| direction[r][2 - col] * spacing[2 - col]));

    let mut pixdim = [1.0f32; 8];
    for col in 0..3 {
        pixdim[col + 1] = representable(spacing[2 - col], "spacing")?;
    }
    h.f32(108, DATA_OFFSET as f32);
    h.f32(112, image.scl_slope);
    h.f32(116, image.scl_inter);
    h.buf[123] = 2; // millimetres
    let descrip = b"organpp";
    h.buf[148..148 + descrip.len()].copy_from_slice(descrip);

    if g.is_oriented() {
        let nifti_dir: [[f64; 3]; 3] =
            std::array::from_fn(|r| std::array::from_fn(|col| direction[r][2 - col]));
        if let Some((q, qfac)) = rotation_to_quaternion(&nifti_dir) {
            pixdim[0] = qfac as f32;
            h.i16(252, 1);
            for (i, v) in q.iter().enumerate() {
                h.f32(256 + 4 * i, *v as f32);
            }
        }
        for (i, v) in origin.iter().enumerate() {
            h.f32(268 + 4 * i, representable(*v, "origin")?);
        }
        h.i16(254, 1);
        for r in 0..3 {
            for col in 0..3 {
                let v = representable(columns[col][r], "affine entry")?;
                h.f32(280 + 16 * r + 4 * col, v);
            }
            h.f32(280 + 16 * r + 12, representable(origin[r], "origin")?);
        }
    }
    for (i, v) in pixdim.iter().enumerate() {
        h.f32(76 + 4 * i, *v);
    }
    h.buf[344..348].copy_from_slice(MAGIC);

    let mut out = h.buf;
    out.reserve(image.data.len() * datatype.bytes());
    match &image.data {
        VoxelData::U8(v) => out.extend_from_slice(v),
        VoxelData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }

    if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&out).map_err(|e| Error::io("<gzip buffer>", e))?;
        return enc.finish().map_err(|e| Error::io("<gzip buffer>", e));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_vol(shape: [usize; 3], fill: impl Fn(usize) -> u8) -> LabelVolume {
        let g = Geometry::new(shape, [1.0, 1.0, 1.0]).unwrap();
        let n = g.len();
        let grid = Array3::from_shape_vec(shape, (0..n).map(fill).collect()).unwrap();
        LabelVolume::new(g, grid).unwrap()
    }

    fn hand_header(dims: [i16; 3], datatype: i16) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        for i in 0..4 {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(MAGIC);
        b
    }

    #[test]
    fn hand_built_zero_header_decodes_to_background() {
        let mut bytes = hand_header([4, 4, 4], 2);
        bytes.extend(std::iter::repeat(0u8).take(64));
        let v = decode(&bytes).unwrap().into_labels().unwrap();
        assert_eq!(v.geometry().shape(), [4, 4, 4]);
        assert!(v.as_slice().iter().all(|&l| l == 0));
        assert!(!v.geometry().is_oriented());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = hand_header([2, 2, 2], 2);
        bytes.extend([0u8; 8]);
        bytes[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let mut bytes = hand_header([2, 2, 2], 64);
        bytes.extend([0u8; 64]);
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = hand_header([2, 2, 2], 2);
        bytes.extend([0u8; 7]);
        assert!(matches!(decode(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn float_data_cannot_become_labels() {
        let g = Geometry::new([1, 1, 2], [1.0; 3]).unwrap();
        let s = ScalarVolume::new(g, Array3::from_shape_vec((1, 1, 2), vec![0.5, 1.0]).unwrap()).unwrap();
        let bytes = encode(&NiftiImage::from_scalar(&s, Datatype::F32).unwrap(), false).unwrap();
        assert!(decode(&bytes).unwrap().into_labels().is_err());
    }

    #[test]
    fn four_dimensional_labels_rejected() {
        let g = Geometry::new([1, 1, 1], [1.0; 3]).unwrap();
        let p = ProbVolume::new(g, Array4::from_shape_vec((2, 1, 1, 1), vec![0.5, 0.5]).unwrap()).unwrap();
        let bytes = encode(&NiftiImage::from_probs(&p), false).unwrap();
        assert!(decode(&bytes).unwrap().into_labels().is_err());
    }

    #[test]
    fn payload_is_exactly_eight_bytes_for_2x2x2_labels() {
        let v = label_vol([2, 2, 2], |i| (i % 2) as u8);
        let bytes = encode(&NiftiImage::from_labels(&v), false).unwrap();
        assert_eq!(bytes.len() - DATA_OFFSET, 8);
        assert_eq!(&bytes[DATA_OFFSET..], v.as_slice());
    }

    #[test]
    fn gzip_output_starts_with_gzip_magic() {
        let v = label_vol([2, 2, 2], |i| (i % 2) as u8);
        let bytes = encode(&NiftiImage::from_labels(&v), true).unwrap();
        assert_eq!(bytes[..2], GZIP_MAGIC);
        assert_eq!(decode(&bytes).unwrap().into_labels().unwrap(), v);
    }

    #[test]
    fn big_endian_header_detected() {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        b[40..42].copy_from_slice(&3i16.to_be_bytes());
        for i in 0..3 {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_be_bytes());
        }
        b[46..48].copy_from_slice(&2i16.to_be_bytes());
        b[70..72].copy_from_slice(&4i16.to_be_bytes());
        for i in 0..4 {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_be_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[344..348].copy_from_slice(MAGIC);
        b.extend(300i16.to_be_bytes());
        b.extend((-2i16).to_be_bytes());
        let img = decode(&b).unwrap();
        assert_eq!(img.data, VoxelData::I16(vec![300, -2]));
        assert_eq!(img.geometry.shape(), [2, 1, 1]);
    }

    #[test]
    fn oblique_geometry_round_trips_through_qform_and_sform() {
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let dir = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, -1.0]];
        let g = Geometry::new([2, 3, 4], [2.5, 0.7, 0.9])
            .unwrap()
            .with_origin([-120.25, 33.5, 7.0])
            .with_direction(dir)
            .unwrap();
        let v = LabelVolume::new(g.clone(), Array3::zeros((2, 3, 4))).unwrap();
        let back = decode(&encode(&NiftiImage::from_labels(&v), false).unwrap())
            .unwrap()
            .into_labels()
            .unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1.0);
        let bg = back.geometry();
        for i in 0..3 {
            assert!(close(bg.spacing()[i], g.spacing()[i]));
            assert!(close(bg.origin()[i], g.origin()[i]));
            for j in 0..3 {
                assert!(close(bg.direction()[i][j], g.direction()[i][j]));
            }
        }

        // the qform alone must describe the same placement
        let mut bytes = encode(&NiftiImage::from_labels(&v), false).unwrap();
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        let q = decode(&bytes).unwrap().geometry;
        for i in 0..3 {
            for j in 0..3 {
                assert!((q.direction()[i][j] - g.direction()[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unrepresentable_origin_reported() {
        let g = Geometry::new([1, 1, 1], [1.0; 3]).unwrap().with_origin([1e39, 0.0, 0.0]);
        let v = LabelVolume::zeros(g);
        assert!(matches!(
            encode(&NiftiImage::from_labels(&v), false),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn fractional_scalar_cannot_be_stored_as_int16() {
        let g = Geometry::new([1, 1, 1], [1.0; 3]).unwrap();
        let s = ScalarVolume::new(g, Array3::from_elem((1, 1, 1), 0.5)).unwrap();
        assert!(NiftiImage::from_scalar(&s, Datatype::I16).is_err());
    }
}
