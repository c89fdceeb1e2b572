//! Point-cloud batch files (".pcb") and ASCII PLY export.
//!
//! PCB layout: magic `PCB1`, little-endian u32 cloud count B, u32 points per
//! cloud N, u32 dimension D, followed by B*N*D little-endian float32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud};

const PCB_MAGIC: &[u8; 4] = b"PCB1";

/// Write a batch of equally-shaped clouds. Coordinates are narrowed to f32.
pub fn write_pcb(path: &Path, clouds: &[PointCloud]) -> Result<()> {
    if clouds.is_empty() {
        return Err(Error::SizeError("refusing to write an empty batch".into()));
    }
    let n = clouds[0].len();
    let d = clouds[0].dim();
    if clouds.iter().any(|c| c.len() != n || c.dim() != d) {
        return Err(Error::SizeError(
            "all clouds in a batch must share N and D".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PCB_MAGIC)?;
    w.write_all(&(clouds.len() as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for cloud in clouds {
        for v in cloud.points().iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a batch written by [`write_pcb`]. Clouds come back euclidean-tagged;
/// retag with [`PointCloud::retag`] if they hold frustum coordinates.
pub fn read_pcb(path: &Path) -> Result<Vec<PointCloud>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCB_MAGIC {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(PCB_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let b = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("pcb declares empty clouds ({n} x {d})")));
    }
    let mut clouds = Vec::with_capacity(b);
    let mut buf = vec![0u8; n * d * 4];
    for i in 0..b {
        r.read_exact(&mut buf).map_err(|_| {
            Error::Truncated(format!("pcb payload ends inside cloud {i} of {b}"))
        })?;
        let mut pts = Array2::zeros((n, d));
        for (k, chunk) in buf.chunks_exact(4).enumerate() {
            pts[[k / d, k % d]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        clouds.push(PointCloud::new(pts, Frame::Euclidean)?);
    }
    Ok(clouds)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated("pcb header ends early".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// ASCII PLY export of a single 3-d cloud, for quick visualization.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.dim() != 3 {
        return Err(Error::SizeError("ply export needs 3-d points".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for row in cloud.points().rows() {
        writeln!(w, "{} {} {}", row[0] as f32, row[1] as f32, row[2] as f32)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn pcb_round_trip_is_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.pcb");
        let mut rng = StreamRng::new(2);
        let clouds: Vec<PointCloud> = (0..3)
            .map(|_| {
                // values representable in f32 so the round trip is bit-exact
                let pts = rng.normal_matrix(5, 3).mapv(|v| (v as f32) as f64);
                PointCloud::euclidean(pts).unwrap()
            })
            .collect();
        write_pcb(&path, &clouds).unwrap();
        let back = read_pcb(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(clouds.iter()) {
            for (x, y) in a.points().iter().zip(b.points().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn pcb_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pcb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_pcb(&path), Err(Error::MagicMismatch { .. })));
    }

    #[test]
    fn pcb_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pcb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PCB1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 4 * 3 * 4]); // only one cloud of two
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_pcb(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn ply_header_is_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut rng = StreamRng::new(3);
        let cloud = PointCloud::euclidean(rng.normal_matrix(4, 3)).unwrap();
        write_ply(&path, &cloud).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 4\n"));
        assert_eq!(text.lines().count(), 7 + 4);
    }
}
