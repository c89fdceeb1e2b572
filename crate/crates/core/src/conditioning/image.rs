//! Image container and file formats: PGM/PPM (ASCII or binary) and the raw
//! float32 grid format "IMG1" (magic, u32 H, W, C, little-endian f32 payload,
//! row-major with channel fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// H x W x C image stored as an (H*W) x C matrix, row-major pixels.
#[derive(Debug, Clone)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// (height*width) x channels values.
    pub data: Array2<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: Array2::zeros((height * width, channels)),
        }
    }

    pub fn from_data(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::SizeError(format!(
                "image data has {} rows, expected {}",
                data.nrows(),
                height * width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite values".into()));
        }
        let channels = data.ncols();
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[[r * self.width + c, ch]]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[[r * self.width + c, ch]] = v;
    }
}

const IMG_MAGIC: &[u8; 4] = b"IMG1";

pub fn write_img1(path: &Path, image: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMG_MAGIC)?;
    w.write_all(&(image.height as u32).to_le_bytes())?;
    w.write_all(&(image.width as u32).to_le_bytes())?;
    w.write_all(&(image.channels as u32).to_le_bytes())?;
    for v in image.data.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_img1(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMG_MAGIC {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(IMG_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Truncated("img1 header ends early".into()))?;
        *d = u32::from_le_bytes(b);
    }
    let (h, w, c) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut buf = vec![0u8; h * w * c * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated("img1 payload shorter than header promises".into()))?;
    let mut data = Array2::zeros((h * w, c));
    for (k, chunk) in buf.chunks_exact(4).enumerate() {
        data[[k / c, k % c]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Image::from_data(h, w, data)
}

/// Read a PGM (P2/P5, one channel) or PPM (P3/P6, three channels) image,
/// scaled to [0, 1].
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 2 {
        return Err(Error::Format("pnm file too short".into()));
    }
    let kind = &bytes[..2];
    let (channels, binary) = match kind {
        b"P2" => (1, false),
        b"P5" => (1, true),
        b"P3" => (3, false),
        b"P6" => (3, true),
        other => {
            return Err(Error::MagicMismatch {
                expected: "P2/P3/P5/P6".into(),
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let mut header = Vec::new();
    while header.len() < 3 {
        skip_pnm_whitespace(&bytes, &mut pos)?;
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-utf8 pnm header".into()))?;
        header.push(tok.parse::<usize>().map_err(|_| {
            Error::Format(format!("bad pnm header token {tok:?}"))
        })?);
    }
    let (w, h, maxval) = (header[0], header[1], header[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("unsupported pnm maxval {maxval}")));
    }
    let mut data = Array2::zeros((h * w, channels));
    let count = h * w * channels;
    if binary {
        pos += 1; // single whitespace after maxval
        let wide = maxval > 255;
        let bytes_per = if wide { 2 } else { 1 };
        if bytes.len() < pos + count * bytes_per {
            return Err(Error::Truncated("pnm payload too short".into()));
        }
        for k in 0..count {
            let raw = if wide {
                u16::from_be_bytes([bytes[pos + 2 * k], bytes[pos + 2 * k + 1]]) as f64
            } else {
                bytes[pos + k] as f64
            };
            data[[k / channels, k % channels]] = raw / maxval as f64;
        }
    } else {
        for k in 0..count {
            skip_pnm_whitespace(&bytes, &mut pos)?;
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let tok = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Format(format!("bad pnm sample {tok:?}")))?;
            data[[k / channels, k % channels]] = v / maxval as f64;
        }
    }
    Image::from_data(h, w, data)
}

fn skip_pnm_whitespace(bytes: &[u8], pos: &mut usize) -> Result<()> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    if *pos >= bytes.len() {
        return Err(Error::Truncated("pnm ends inside header".into()));
    }
    Ok(())
}

/// Load an image by sniffing the magic: IMG1, PGM, or PPM.
pub fn read_image(path: &Path) -> Result<Image> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    drop(f);
    if n >= 4 && &magic == IMG_MAGIC {
        read_img1(path)
    } else {
        read_pnm(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn img1_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.img1");
        let mut img = Image::new(3, 4, 2);
        for r in 0..3 {
            for c in 0..4 {
                img.set(r, c, 0, (r * 4 + c) as f64 / 12.0);
                img.set(r, c, 1, 1.0 - (r + c) as f64 / 8.0);
            }
        }
        write_img1(&path, &img).unwrap();
        let back = read_img1(&path).unwrap();
        assert_eq!(back.height, 3);
        assert_eq!(back.width, 4);
        assert_eq!(back.channels, 2);
        for (a, b) in back.data.iter().zip(img.data.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn img1_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("bad.img1");
        std::fs::write(&p1, b"NOPE").unwrap();
        assert!(matches!(read_img1(&p1), Err(Error::MagicMismatch { .. })));

        let p2 = dir.path().join("short.img1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"IMG1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4]); // one of four floats
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(read_img1(&p2), Err(Error::Truncated(_))));
    }

    #[test]
    fn pgm_ascii_and_binary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = dir.path().join("a.pgm");
        std::fs::write(&ascii, "P2\n# comment\n3 2\n255\n0 128 255\n64 32 16\n").unwrap();
        let a = read_pnm(&ascii).unwrap();
        assert_eq!((a.height, a.width, a.channels), (2, 3, 1));
        assert!((a.get(0, 1, 0) - 128.0 / 255.0).abs() < 1e-12);

        let binary = dir.path().join("b.pgm");
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64, 32, 16]);
        std::fs::write(&binary, &bytes).unwrap();
        let b = read_pnm(&binary).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn ppm_binary_reads_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 1), 1.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
    }
}
