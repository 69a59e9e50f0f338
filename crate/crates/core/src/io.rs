//! File formats: binary PPM images, PFM rasters, voxel-grid checkpoints and
//! camera lists.

use crate::field::VoxelGrid;
use crate::geometry::{CameraModel, TriangleMesh};
use crate::{Error, Result};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// RGB image, row-major with the top row first, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rounds every channel to the nearest 8-bit level, as stored in a PPM.
    pub fn quantized(mut self) -> Self {
        for px in &mut self.data {
            for c in px.iter_mut() {
                *c = to_u8(*c) as f64 / 255.0;
            }
        }
        self
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 3);
        for px in &self.data {
            out.extend(px.iter().map(|&c| to_u8(c)));
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let header = read_tokens(&mut reader, 4)?;
        if header[0] != "P6" {
            return Err(Error::Data(format!("unsupported PPM magic {:?}", header[0])));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|e| Error::Data(format!("bad PPM header value {s:?}: {e}")))
        };
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("only 8-bit PPM supported (maxval {maxval})")));
        }
        let mut raw = vec![0u8; width as usize * height as usize * 3];
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::Data(format!("truncated PPM payload: {e}")))?;
        let data = raw
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(Self { width, height, data })
    }

    /// Places images side by side, top-aligned, on a black canvas.
    pub fn hstack(images: &[&Image]) -> Image {
        let width = images.iter().map(|i| i.width).sum();
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let mut out = Image::new(width, height);
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.data[(y * width + x0 + x) as usize] = img.get(x, y);
                }
            }
            x0 += img.width;
        }
        out
    }
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads `n` whitespace-separated header tokens, skipping `#` comments and
/// consuming exactly one whitespace byte after the last token.
fn read_tokens(reader: &mut impl BufRead, n: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::with_capacity(n);
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    while tokens.len() < n {
        reader
            .read_exact(&mut byte)
            .map_err(|e| Error::Data(format!("truncated header: {e}")))?;
        let ch = byte[0] as char;
        if in_comment {
            in_comment = ch != '\n';
            continue;
        }
        if ch == '#' && cur.is_empty() {
            in_comment = true;
        } else if ch.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(ch);
        }
    }
    Ok(tokens)
}

/// Single-channel float raster in PFM layout (`Pf`, little-endian,
/// bottom row first on disk). `values` is row-major, top row first.
pub fn write_pfm(width: u32, height: u32, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width as usize * height as usize);
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for y in (0..height as usize).rev() {
        for &v in &values[y * width as usize..(y + 1) * width as usize] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Returns `(width, height, values)` with values row-major, top row first.
pub fn read_pfm(bytes: &[u8]) -> Result<(u32, u32, Vec<f64>)> {
    let mut reader = BufReader::new(bytes);
    let header = read_tokens(&mut reader, 4)?;
    if header[0] != "Pf" {
        return Err(Error::Data(format!("expected single-channel PFM, got {:?}", header[0])));
    }
    let parse = |s: &str| {
        s.parse::<u32>()
            .map_err(|e| Error::Data(format!("bad PFM size {s:?}: {e}")))
    };
    let (width, height) = (parse(&header[1])?, parse(&header[2])?);
    let scale: f64 = header[3]
        .parse()
        .map_err(|e| Error::Data(format!("bad PFM scale {:?}: {e}", header[3])))?;
    let little = scale < 0.0;
    let n = width as usize * height as usize;
    let mut raw = vec![0u8; n * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|e| Error::Data(format!("truncated PFM payload: {e}")))?;
    let mut values = vec![0.0; n];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / width as usize, i % width as usize);
        let y = height as usize - 1 - row;
        values[y * width as usize + col] = v as f64;
    }
    Ok((width, height, values))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVSG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Flat checkpoint: magic, version, R, L (u32 LE), then raw densities,
/// then SH coefficients, all as little-endian `f32`.
pub fn encode_checkpoint(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, grid.resolution() as u32, grid.sh_degree()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.raw_density().into_iter().chain(grid.sh_coeffs()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VoxelGrid> {
    let corrupt = |m: &str| Error::Data(format!("corrupt checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, r, l) = (word(0), word(1) as usize, word(2));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    if !(2..=1024).contains(&r) || l > crate::field::MAX_SH_DEGREE {
        return Err(corrupt(&format!("bad header (R={r}, L={l})")));
    }
    let n = r.pow(3);
    let cb = 3 * crate::field::sh_basis_count(l);
    let expected = 16 + 4 * (n + n * cb);
    if bytes.len() != expected {
        return Err(corrupt(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    VoxelGrid::from_parts(r, l, &floats[..n], &floats[n..])
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    TriangleMesh::from_obj(&read_string(path)?)
}

pub fn save_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    write_bytes(path, mesh.to_obj().as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    serde_json::from_str(&read_string(path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    save_json(path, &cameras)
}

pub fn save_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> Result<Image> {
    Image::from_ppm(&read_bytes(path)?)
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &image.to_ppm())
}

pub fn load_checkpoint(path: &Path) -> Result<VoxelGrid> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn save_checkpoint(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_bytes(path, &encode_checkpoint(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let bytes = write_pfm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        let (w, h, v) = read_pfm(&bytes).unwrap();
        assert_eq!((w, h, v), (2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn pfm_keeps_infinite_misses() {
        let (_, _, v) = read_pfm(&write_pfm(1, 2, &[f64::INFINITY, 0.5])).unwrap();
        assert_eq!(v, vec![f64::INFINITY, 0.5]);
    }

    #[test]
    fn ppm_round_trip_and_header_comments() {
        let mut img = Image::new(3, 2);
        img.data[4] = [1.0, 0.5, 0.0];
        let back = Image::from_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img.clone().quantized());
        let commented = b"P6\n# made by hand\n1 1\n255\n\x00\xff\x10";
        let one = Image::from_ppm(commented).unwrap();
        assert_eq!(one.data[0], [0.0, 1.0, 16.0 / 255.0]);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let grid = VoxelGrid::init(3, 1, 4).unwrap();
        let bytes = encode_checkpoint(&grid);
        assert_eq!(bytes.len(), 16 + 4 * 27 * 13);
        let back = decode_checkpoint(&bytes).unwrap();
        for (a, b) in grid.params().iter().zip(back.params()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
