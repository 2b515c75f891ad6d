//! Binary images, voxel volumes and their on-disk formats.
//!
//! Phase encoding is fixed throughout the crate: `0` is solid, `1` is pore.
//! Volumes are indexed `(z, y, x)` with `x` fastest; multi-channel volumes
//! store channels innermost.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const SOLID: u8 = 0;
pub const PORE: u8 = 1;

/// Grey values at or above this map to pore when loading a PGM.
pub const PORE_THRESHOLD: u8 = 128;

const VOLUME_MAGIC: &[u8; 4] = b"MV01";
const VOLUME_VERSION: u16 = 1;
const VOLUME_HEADER_LEN: usize = 24;

/// Fraction of voxels in the pore phase.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PhaseFraction(f64);

impl PhaseFraction {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            bail!(InvalidArgument, "phase fraction {value} outside [0, 1]");
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }
}

/// Binary 2D reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<u8>,
    /// Physical pixel size in micrometers, when known.
    pub pixel_size: Option<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(InvalidArgument, "image dimensions must be at least 1, got {width}x{height}");
        }
        if data.len() != width * height {
            bail!(Shape, "image {width}x{height} needs {} pixels, got {}", width * height, data.len());
        }
        if let Some(bad) = data.iter().find(|&&v| v > PORE) {
            bail!(InvalidArgument, "pixel value {bad} is not a phase label");
        }
        Ok(Self { width, height, data, pixel_size: None })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn view(&self) -> GridView<'_> {
        GridView { dims: [1, self.height, self.width], data: &self.data, is_3d: false }
    }

    pub fn porosity(&self) -> PhaseFraction {
        self.view().porosity()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
            pixel_size: self.pixel_size,
        }
    }

    /// Lift the phase labels to a `channels`-deep continuous map, laid out
    /// `(y, x, channel)`.
    pub fn to_channels(&self, channels: usize) -> Vec<f64> {
        self.data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(f64::from(v), channels))
            .collect()
    }
}

/// Voxel payload of a [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Binary(Vec<u8>),
    Continuous { channels: usize, values: Vec<f64> },
}

/// 3D voxel grid with dims `(L, H, W)` = `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    data: VolumeData,
}

impl Volume3D {
    pub fn binary(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            bail!(Shape, "volume {dims:?} needs {n} voxels, got {}", data.len());
        }
        if let Some(bad) = data.iter().find(|&&v| v > PORE) {
            bail!(InvalidArgument, "voxel value {bad} is not a phase label");
        }
        Ok(Self { dims, data: VolumeData::Binary(data) })
    }

    pub fn continuous(dims: [usize; 3], channels: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            bail!(InvalidArgument, "continuous volume needs at least one channel");
        }
        let n = dims.iter().product::<usize>() * channels;
        if values.len() != n {
            bail!(Shape, "volume {dims:?}x{channels} needs {n} values, got {}", values.len());
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "continuous volume");
        }
        Ok(Self { dims, data: VolumeData::Continuous { channels, values } })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self::binary(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        match &self.data {
            VolumeData::Binary(_) => 1,
            VolumeData::Continuous { channels, .. } => *channels,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.data, VolumeData::Binary(_))
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn binary_view(&self) -> Result<GridView<'_>> {
        match &self.data {
            VolumeData::Binary(data) => Ok(GridView { dims: self.dims, data, is_3d: true }),
            VolumeData::Continuous { .. } => {
                bail!(InvalidArgument, "operation requires a binary volume")
            }
        }
    }

    pub fn porosity(&self) -> Result<PhaseFraction> {
        Ok(self.binary_view()?.porosity())
    }

    pub fn complement(&self) -> Result<Self> {
        let view = self.binary_view()?;
        Self::binary(self.dims, view.data.iter().map(|&v| 1 - v).collect())
    }

    /// Axis-aligned XY plane at depth `z` as a binary image.
    pub fn xy_plane(&self, z: usize) -> Result<Image2D> {
        let view = self.binary_view()?;
        let [l, h, w] = self.dims;
        if z >= l {
            bail!(InvalidArgument, "plane index {z} outside depth {l}");
        }
        Image2D::new(w, h, view.data[z * h * w..(z + 1) * h * w].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&self.to_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [l, h, w] = self.dims;
        let (mode, channels) = match &self.data {
            VolumeData::Binary(_) => (0u16, 1usize),
            VolumeData::Continuous { channels, .. } => (1u16, *channels),
        };
        let mut buf = Vec::with_capacity(VOLUME_HEADER_LEN + self.voxel_count() * channels * 8);
        buf.extend_from_slice(VOLUME_MAGIC);
        buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        buf.extend_from_slice(&mode.to_le_bytes());
        for d in [l, h, w, channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            VolumeData::Binary(data) => buf.extend_from_slice(data),
            VolumeData::Continuous { values, .. } => {
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VOLUME_HEADER_LEN {
            bail!(Format, "volume header truncated ({} bytes)", bytes.len());
        }
        if &bytes[0..4] != VOLUME_MAGIC {
            bail!(Format, "bad volume magic {:?}", &bytes[0..4]);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VOLUME_VERSION {
            bail!(Format, "unsupported volume version {version}");
        }
        let mode = u16::from_le_bytes([bytes[6], bytes[7]]);
        let field = |i: usize| {
            let o = 8 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let dims = [field(0), field(1), field(2)];
        let channels = field(3);
        let count = dims
            .iter()
            .chain(std::iter::once(&channels))
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("volume dimensions {dims:?}x{channels} overflow")))?;
        let payload = &bytes[VOLUME_HEADER_LEN..];
        match mode {
            0 => {
                if channels != 1 {
                    bail!(Format, "binary volume must have one channel, header says {channels}");
                }
                if payload.len() != count {
                    bail!(Format, "binary payload has {} bytes, expected {count}", payload.len());
                }
                Self::binary(dims, payload.to_vec())
            }
            1 => {
                let expected = count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("continuous payload size overflows".into()))?;
                if payload.len() != expected {
                    bail!(Format, "continuous payload has {} bytes, expected {expected}", payload.len());
                }
                let values = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                Self::continuous(dims, channels, values)
            }
            other => bail!(Format, "unknown volume mode {other}"),
        }
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        bail!(InvalidArgument, "volume dimensions must be at least 1, got {dims:?}");
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        bail!(InvalidArgument, "volume dimension exceeds u32 range: {dims:?}");
    }
    Ok(())
}

/// Borrowed binary grid, either a 2D image (`dims[0] == 1`, `is_3d == false`)
/// or a 3D volume.
#[derive(Debug, Clone, Copy)]
pub struct GridView<'a> {
    pub dims: [usize; 3],
    pub data: &'a [u8],
    pub is_3d: bool,
}

impl GridView<'_> {
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(z, y, x)]
    }

    /// Axes carried by this grid, in the order x, y, z. Each axis is given as
    /// its index into `dims`.
    pub fn axes(&self) -> &'static [usize] {
        if self.is_3d {
            &[2, 1, 0]
        } else {
            &[2, 1]
        }
    }

    pub fn pore_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == PORE).count()
    }

    pub fn porosity(&self) -> PhaseFraction {
        PhaseFraction(self.pore_count() as f64 / self.data.len() as f64)
    }
}

/// Read an 8-bit binary PGM (P5) and threshold it into phases.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D> {
    parse_pgm(&fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Image2D> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "PGM header truncated");
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PGM header is not ASCII".into()))?);
    }
    if tokens[0] != "P5" {
        bail!(Format, "unsupported PGM magic {:?}; only binary P5 is accepted", tokens[0]);
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::Format(format!("PGM {what} {s:?} is not an integer")))
    };
    let width = parse(tokens[1], "width")?;
    let height = parse(tokens[2], "height")?;
    let maxval = parse(tokens[3], "maxval")?;
    if maxval != 255 {
        bail!(Format, "PGM maxval {maxval} unsupported; expected 8-bit depth (255)");
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        bail!(Format, "PGM header not terminated");
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < n {
        bail!(Format, "PGM payload truncated: {} of {n} bytes", raster.len());
    }
    let data = raster[..n].iter().map(|&g| u8::from(g >= PORE_THRESHOLD)).collect();
    Image2D::new(width, height, data)
}

/// Write a binary image as P5 PGM with pore = 255 and solid = 0.
pub fn save_image(image: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(image))?;
    Ok(())
}

pub fn encode_pgm(image: &Image2D) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend(image.data.iter().map(|&v| if v == PORE { 255 } else { 0 }));
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_threshold_at_128() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[0, 1, 1, 0]);
        let mut edge = b"P5 2 1 255\n".to_vec();
        edge.extend_from_slice(&[127, 128]);
        assert_eq!(parse_pgm(&edge).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[200, 10, 130]);
        assert_eq!(parse_pgm(&bytes).unwrap().data(), &[1, 0, 1]);
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        let err = parse_pgm(b"P2\n2 2\n255\n0 255 255 0\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn pgm_rejects_16_bit_and_truncation() {
        assert!(parse_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\0\0").is_err());
        assert!(parse_pgm(b"P5\n4").is_err());
    }

    #[test]
    fn volume_header_layout() {
        let v = Volume3D::binary([2, 2, 2], vec![1; 8]).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(&bytes[0..4], b"MV01");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &0u16.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert!(bytes[24..].iter().all(|&b| b == 0x01));
    }

    #[test]
    fn volume_rejects_bad_magic_and_truncation() {
        let v = Volume3D::binary([2, 2, 2], vec![0; 8]).unwrap();
        let mut bytes = v.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Volume3D::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = v.to_bytes();
        assert!(Volume3D::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn volume_rejects_dimension_overflow() {
        let mut bytes = b"MV01".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(Volume3D::from_bytes(&bytes).is_err());
    }

    #[test]
    fn porosity_counts() {
        let all = Volume3D::binary([4, 4, 4], vec![1; 64]).unwrap();
        assert_eq!(all.porosity().unwrap().value(), 1.0);
        let img = Image2D::from_fn(10, 10, |y, x| y * 10 + x < 37).unwrap();
        assert_eq!(img.porosity().value(), 0.37);
        let cont = Volume3D::continuous([1, 1, 2], 1, vec![0.5, 0.2]).unwrap();
        assert!(cont.porosity().is_err());
    }

    #[test]
    fn binary_values_validated() {
        assert!(Image2D::new(2, 1, vec![0, 2]).is_err());
        assert!(Volume3D::binary([1, 1, 1], vec![7]).is_err());
        assert!(Volume3D::continuous([1, 1, 1], 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn binary_volume_round_trip(dims in prop::array::uniform3(1usize..9), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as u8 ^ (i % 3 == 0) as u8).collect();
            let v = Volume3D::binary(dims, data).unwrap();
            prop_assert_eq!(Volume3D::from_bytes(&v.to_bytes()).unwrap(), v);
        }

        #[test]
        fn continuous_volume_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), channels in 1usize..4) {
            let n = values.len() * channels;
            let vals: Vec<f64> = values.iter().cycle().take(n).copied().collect();
            let v = Volume3D::continuous([1, 1, values.len()], channels, vals).unwrap();
            let back = Volume3D::from_bytes(&v.to_bytes()).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn complement_porosity(data in prop::collection::vec(0u8..2, 27)) {
            let v = Volume3D::binary([3, 3, 3], data).unwrap();
            let p = v.porosity().unwrap().value();
            let q = v.complement().unwrap().porosity().unwrap().value();
            prop_assert!((p + q - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pgm_reencode_is_identity(data in prop::collection::vec(0u8..2, 1..64)) {
            let img = Image2D::new(data.len(), 1, data).unwrap();
            prop_assert_eq!(parse_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
