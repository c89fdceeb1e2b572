//! Checkpoint container: magic "GECK", u32 version, u64 header length, a
//! UTF-8 header describing configs and an ordered tensor index
//! (name, dtype, shape, byte offset), then raw little-endian f64 payloads.
//! Loading validates shapes against the configs before touching any state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::conditioning::{ConditioningMode, ExtractorConfig};
use crate::diffusion::{DiffusionConfig, EmaState};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Frame, NormalizationMode, NormalizationStats};
use crate::harness::config::ConfigFile;
use crate::model::{FrameMap, NetModel};
use crate::rng::StreamRng;
use crate::scorenet::NetConfig;

const MAGIC: &[u8; 4] = b"GECK";
const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
pub struct Checkpoint {
    pub model: NetModel,
    pub ema: EmaState,
    pub step: u64,
    /// Points per cloud the model was trained with (upsampling width hint).
    pub train_points: usize,
}

fn join_f64(v: &Array1<f64>) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str) -> Result<Array1<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|t| t.trim().parse::<f64>()).collect();
    Ok(Array1::from_vec(vals.map_err(|_| {
        Error::Format(format!("bad float list {s:?}"))
    })?))
}

pub fn save_checkpoint(
    path: &Path,
    model: &NetModel,
    ema: &EmaState,
    step: u64,
    train_points: usize,
) -> Result<()> {
    let mut header = String::new();
    header.push_str("[model]\n");
    header.push_str(&format!("mode = {}\n", model.mode.name()));
    header.push_str(&format!(
        "frame = {}\n",
        match model.frame.frame {
            Frame::Euclidean => "euclidean",
            Frame::Frustum => "frustum",
        }
    ));
    header.push_str(&format!("dim = {}\n", model.dim));
    header.push_str(&format!("step = {step}\n"));
    header.push_str(&format!("train_points = {train_points}\n"));
    header.push_str(&format!("ema_rate = {}\n", ema.rate));

    let n = &model.net_cfg;
    header.push_str(&format!(
        "[net]\nlayers = {}\nd_nn = {}\ninducers = {}\nheads = {}\ngroups = {}\nd_ff = {}\nd_emb = {}\ngaussian_a = {}\n",
        n.layers, n.d_nn, n.inducers, n.heads, n.groups, n.d_ff, n.d_emb, n.gaussian_a
    ));
    let d = &model.diff_cfg;
    header.push_str(&format!(
        "[diffusion]\nsigma_min = {}\nsigma_max = {}\nsigma_data = {}\nrho = {}\nsteps = {}\n",
        d.sigma_min, d.sigma_max, d.sigma_data, d.rho, d.steps
    ));
    if let Some(e) = &model.extractor_cfg {
        header.push_str(&format!(
            "[extractor]\nin_channels = {}\nstages = {}\n",
            e.in_channels,
            e.stages
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
    header.push_str(&format!(
        "[normalization]\nmode = {}\nmean = {}\nscale = {}\n",
        model.frame.norm.mode.name(),
        join_f64(&model.frame.norm.mean),
        join_f64(&model.frame.norm.scale)
    ));
    if let Some(cam) = &model.frame.cam {
        header.push_str(&format!(
            "[camera]\nfx = {}\nfy = {}\ncx = {}\ncy = {}\nheight = {}\nwidth = {}\n",
            cam.fx, cam.fy, cam.cx, cam.cy, cam.height, cam.width
        ));
    }

    header.push_str("[tensors]\n");
    let mut offset = 0u64;
    let mut index = |name: &str, t: &Array2<f64>, header: &mut String| {
        header.push_str(&format!(
            "{name} f64 {} {} {offset}\n",
            t.nrows(),
            t.ncols()
        ));
        offset += (t.len() * 8) as u64;
    };
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        index(name, t, &mut header);
    }
    for (name, t) in model.params.names().iter().zip(ema.shadow.iter()) {
        index(&format!("ema.{name}"), t, &mut header);
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for t in model.params.tensors().iter().chain(ema.shadow.iter()) {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("checkpoint shorter than its magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::Truncated("checkpoint header cut off".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| Error::Truncated("checkpoint header cut off".into()))?;
    let header_len = u64::from_le_bytes(b8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Truncated("checkpoint header cut off".into()))?;
    let header = String::from_utf8(header_bytes)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;

    let (config_part, tensor_part) = header
        .split_once("[tensors]\n")
        .ok_or_else(|| Error::Format("checkpoint header lacks a tensor index".into()))?;
    let cfg = ConfigFile::parse(config_part)?;

    let net_cfg = NetConfig {
        layers: cfg.require("net", "layers")?,
        d_nn: cfg.require("net", "d_nn")?,
        inducers: cfg.require("net", "inducers")?,
        heads: cfg.require("net", "heads")?,
        groups: cfg.require("net", "groups")?,
        d_ff: cfg.require("net", "d_ff")?,
        d_emb: cfg.require("net", "d_emb")?,
        gaussian_a: cfg.require("net", "gaussian_a")?,
    };
    let diff_cfg = DiffusionConfig {
        sigma_min: cfg.require("diffusion", "sigma_min")?,
        sigma_max: cfg.require("diffusion", "sigma_max")?,
        sigma_data: cfg.require("diffusion", "sigma_data")?,
        rho: cfg.require("diffusion", "rho")?,
        steps: cfg.require("diffusion", "steps")?,
    };
    let mode = ConditioningMode::parse(&cfg.require::<String>("model", "mode")?)?;
    let dim: usize = cfg.require("model", "dim")?;
    let step: u64 = cfg.require("model", "step")?;
    let train_points: usize = cfg.require("model", "train_points")?;
    let ema_rate: f64 = cfg.require("model", "ema_rate")?;
    let frame_kind = match cfg.require::<String>("model", "frame")?.as_str() {
        "euclidean" => Frame::Euclidean,
        "frustum" => Frame::Frustum,
        other => return Err(Error::Format(format!("unknown frame {other:?}"))),
    };
    let extractor_cfg = match cfg.get_raw("extractor", "in_channels") {
        Some(_) => Some(ExtractorConfig {
            in_channels: cfg.require("extractor", "in_channels")?,
            stages: cfg
                .require::<String>("extractor", "stages")?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Format("bad extractor stages".into()))
                })
                .collect::<Result<Vec<usize>>>()?,
        }),
        None => None,
    };
    let norm = NormalizationStats {
        mode: NormalizationMode::parse(&cfg.require::<String>("normalization", "mode")?)?,
        mean: parse_f64_list(&cfg.require::<String>("normalization", "mean")?)?,
        scale: parse_f64_list(&cfg.require::<String>("normalization", "scale")?)?,
    };
    let cam = match cfg.get_raw("camera", "fx") {
        Some(_) => Some(CameraIntrinsics::new(
            cfg.require("camera", "fx")?,
            cfg.require("camera", "fy")?,
            cfg.require("camera", "cx")?,
            cfg.require("camera", "cy")?,
            cfg.require("camera", "height")?,
            cfg.require("camera", "width")?,
        )?),
        None => None,
    };
    let frame = FrameMap {
        frame: frame_kind,
        norm,
        cam,
    };

    let mut model = NetModel::init(
        net_cfg,
        diff_cfg,
        mode,
        extractor_cfg,
        frame,
        dim,
        &mut StreamRng::new(0),
    )?;

    // parse the tensor index and validate against the rebuilt layout
    struct Entry {
        name: String,
        rows: usize,
        cols: usize,
    }
    let mut entries = Vec::new();
    for line in tensor_part.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 5 || parts[1] != "f64" {
            return Err(Error::Format(format!("bad tensor index line {line:?}")));
        }
        entries.push(Entry {
            name: parts[0].to_string(),
            rows: parts[2]
                .parse()
                .map_err(|_| Error::Format("bad tensor rows".into()))?,
            cols: parts[3]
                .parse()
                .map_err(|_| Error::Format("bad tensor cols".into()))?,
        });
    }
    let p = model.params.len();
    if entries.len() != 2 * p {
        return Err(Error::StructuralError(format!(
            "checkpoint lists {} tensors, model wants {}",
            entries.len(),
            2 * p
        )));
    }
    for (k, entry) in entries.iter().enumerate() {
        let (expect_name, expect_shape) = if k < p {
            (
                model.params.names()[k].clone(),
                model.params.tensor(k).dim(),
            )
        } else {
            (
                format!("ema.{}", model.params.names()[k - p]),
                model.params.tensor(k - p).dim(),
            )
        };
        if entry.name != expect_name || (entry.rows, entry.cols) != expect_shape {
            return Err(Error::StructuralError(format!(
                "tensor {k}: checkpoint has {} ({} x {}), model wants {} ({} x {})",
                entry.name, entry.rows, entry.cols, expect_name, expect_shape.0, expect_shape.1
            )));
        }
    }

    // payload, in index order
    let mut read_tensor = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Truncated("checkpoint payload shorter than its index".into()))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).unwrap())
    };
    for (k, e) in entries.iter().take(p).enumerate() {
        let t = read_tensor(e.rows, e.cols)?;
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::StructuralError(format!(
                "tensor {} holds non-finite values",
                e.name
            )));
        }
        model.params.tensors_mut()[k] = t;
    }
    let mut shadow = Vec::with_capacity(p);
    for e in entries.iter().skip(p) {
        shadow.push(read_tensor(e.rows, e.cols)?);
    }

    Ok(Checkpoint {
        model,
        ema: EmaState {
            shadow,
            rate: ema_rate,
        },
        step,
        train_points,
    })
}
