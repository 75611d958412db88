//! File formats: PFM and PNG images, dataset manifests, checkpoints, tone
//! curve tables and loss logs.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::FrameMeta;
use crate::image::Image;
use crate::losses::LossBreakdown;
use crate::model::Model;
use crate::synth::{DatasetBundle, FlowMap, SceneSpec};
use crate::tonemap::{CrfParams, CONTROL_POINTS};

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(kind: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Encode a 1- or 3-channel image as little-endian PFM (rows bottom to top).
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::input(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for v in img.pixel(x, y) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |r: &str| format_err("PFM", path, r);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("header is not text"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(err("bad magic")),
    };
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| err("bad scale"))?;
    let n = w * h * channels;
    let data = bytes.get(pos..pos + 4 * n).ok_or_else(|| err("truncated data"))?;
    let vals: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    Ok(Image::from_fn(w, h, channels, |x, y, c| vals[((h - 1 - y) * w + x) * channels + c]))
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&read_file(path)?, path)
}

/// Encode an image with values in [0, 1] (clamped) as 16-bit PNG.
pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::input(format!("PNG output holds 1 or 3 channels, got {c}"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(|e| Error::input(e.to_string()))?;
        let data: Vec<u8> = img
            .data()
            .iter()
            .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
            .collect();
        w.write_image_data(&data).map_err(|e| Error::input(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_png16(img)?)
}

/// Read an 8- or 16-bit grayscale or RGB PNG into [0, 1].
pub fn read_png(path: &Path) -> Result<Image> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |e: png::DecodingError| format_err("PNG", path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(f)).read_info().map_err(err)?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err("PNG", path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format_err("PNG", path, format!("unsupported color type {other:?}"))),
    };
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|v| *v as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        d => return Err(format_err("PNG", path, format!("unsupported bit depth {d:?}"))),
    };
    Image::from_data(info.width as usize, info.height as usize, channels, data)
}

/// Binary 8-bit PPM.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::input("PPM output needs 3 channels"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &out)
}

fn flow_image(f: &FlowMap) -> Image {
    Image::from_fn(f.flow.width(), f.flow.height(), 3, |x, y, c| match c {
        2 => f.valid[y * f.flow.width() + x] as u8 as f64,
        _ => f.flow.get(x, y, c),
    })
}

fn flow_from_image(img: &Image, path: &Path) -> Result<FlowMap> {
    if img.channels() != 3 {
        return Err(format_err("flow", path, "expected three channels (u, v, valid)"));
    }
    Ok(FlowMap {
        flow: Image::from_fn(img.width(), img.height(), 2, |x, y, c| img.get(x, y, c)),
        valid: (0..img.width() * img.height()).map(|k| img.data()[3 * k + 2] > 0.5).collect(),
    })
}

fn mask_image(mask: &[bool], w: usize, h: usize) -> Image {
    Image::from_fn(w, h, 1, |x, y, _| mask[y * w + x] as u8 as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    #[serde(flatten)]
    pub meta: FrameMeta,
    pub ldr: String,
    pub hdr: String,
    pub depth: String,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingEntry {
    pub frame: usize,
    pub observed_depth: String,
    pub flow_forward: Option<String>,
    pub flow_backward: Option<String>,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: SceneSpec,
    pub frames: Vec<ManifestFrame>,
    pub training: Vec<TrainingEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write every image of a dataset plus `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, d: &DatasetBundle) -> Result<Manifest> {
    let (w, h) = (d.spec.width, d.spec.height);
    let mut frames = Vec::with_capacity(d.frames.len());
    for (i, meta) in d.frames.iter().enumerate() {
        let f = ManifestFrame {
            meta: meta.clone(),
            ldr: format!("ldr/{i:04}.png"),
            hdr: format!("hdr/{i:04}.pfm"),
            depth: format!("depth/{i:04}.pfm"),
            mask: format!("mask/{i:04}.png"),
        };
        write_png16(&dir.join(&f.ldr), &d.ldr[i])?;
        write_pfm(&dir.join(&f.hdr), &d.hdr[i])?;
        write_pfm(&dir.join(&f.depth), &d.depth[i])?;
        write_png16(&dir.join(&f.mask), &mask_image(&d.dynamic_mask[i], w, h))?;
        frames.push(f);
    }
    let mut training = Vec::with_capacity(d.training.len());
    for (k, &i) in d.training.iter().enumerate() {
        let save_flow = |f: &Option<FlowMap>, name: &str| -> Result<Option<String>> {
            f.as_ref()
                .map(|f| {
                    let p = format!("flow/{i:04}_{name}.pfm");
                    write_pfm(&dir.join(&p), &flow_image(f)).map(|_| p)
                })
                .transpose()
        };
        let e = TrainingEntry {
            frame: i,
            observed_depth: format!("observed_depth/{i:04}.pfm"),
            flow_forward: save_flow(&d.flow_forward[k], "fwd")?,
            flow_backward: save_flow(&d.flow_backward[k], "bwd")?,
        };
        write_pfm(&dir.join(&e.observed_depth), &d.observed_depth[k])?;
        training.push(e);
    }
    let m = Manifest {
        scene: d.spec.clone(),
        frames,
        training,
    };
    write_file(&dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(m)
}

/// Load a dataset directory. Missing or malformed files are input errors.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let mpath = dir.join(MANIFEST_NAME);
    let m: Manifest = serde_json::from_slice(&read_file(&mpath)?).map_err(|e| format_err("manifest", &mpath, e.to_string()))?;
    m.scene.validate()?;
    if m.frames.len() != m.scene.frames {
        return Err(Error::input(format!("manifest lists {} of {} frames", m.frames.len(), m.scene.frames)));
    }
    let need = |rel: &str| -> Result<PathBuf> {
        let p = dir.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::input(format!("dataset file {} is missing", p.display())))
        }
    };
    let mut bundle = DatasetBundle {
        spec: m.scene.clone(),
        frames: Vec::new(),
        training: m.training.iter().map(|t| t.frame).collect(),
        ldr: Vec::new(),
        hdr: Vec::new(),
        depth: Vec::new(),
        dynamic_mask: Vec::new(),
        observed_depth: Vec::new(),
        flow_forward: Vec::new(),
        flow_backward: Vec::new(),
    };
    for f in &m.frames {
        bundle.frames.push(f.meta.clone());
        bundle.ldr.push(read_png(&need(&f.ldr)?)?);
        bundle.hdr.push(read_pfm(&need(&f.hdr)?)?);
        bundle.depth.push(read_pfm(&need(&f.depth)?)?);
        bundle.dynamic_mask.push(read_png(&need(&f.mask)?)?.data().iter().map(|v| *v > 0.5).collect());
    }
    for t in &m.training {
        bundle.observed_depth.push(read_pfm(&need(&t.observed_depth)?)?);
        for (rel, out) in [(&t.flow_forward, &mut bundle.flow_forward), (&t.flow_backward, &mut bundle.flow_backward)] {
            out.push(match rel {
                Some(r) => {
                    let p = need(r)?;
                    Some(flow_from_image(&read_pfm(&p)?, &p)?)
                }
                None => None,
            });
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HDRFCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    /// Hex SHA-256 of the training configuration.
    pub config_hash: String,
    /// Serialized training configuration.
    pub config: String,
    pub model: Model,
    /// Optimizer moments per parameter group (empty before the first step).
    pub adam_m: [Vec<f64>; 3],
    pub adam_v: [Vec<f64>; 3],
    pub gen_fired: usize,
    pub gen_failures: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    config_hash: String,
    config: String,
    /// The model with every parameter zeroed; values follow in the blobs.
    template: Model,
    blob_lengths: Vec<usize>,
    gen_fired: usize,
    gen_failures: usize,
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-describing binary container: magic, version, JSON header, raw
/// little-endian parameter blobs, and a trailing SHA-256 of all of it.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut template = c.model.clone();
    for g in template.groups_mut() {
        g.fill(0.0);
    }
    let groups = c.model.groups();
    let blobs: Vec<&[f64]> = groups
        .iter()
        .copied()
        .chain(c.adam_m.iter().map(Vec::as_slice))
        .chain(c.adam_v.iter().map(Vec::as_slice))
        .collect();
    let header = CheckpointHeader {
        step: c.step,
        config_hash: c.config_hash.clone(),
        config: c.config.clone(),
        template,
        blob_lengths: blobs.iter().map(|b| b.len()).collect(),
        gen_fired: c.gen_fired,
        gen_failures: c.gen_failures,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + header.len() + 8 * blobs.iter().map(|b| b.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for b in &blobs {
        for v in *b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let err = |r: &str| format_err("checkpoint", path, r);
    if bytes.len() < 52 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header = body.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header).map_err(|e| err(&e.to_string()))?;
    let mut rest = &body[20 + hlen..];
    let mut blobs = Vec::with_capacity(header.blob_lengths.len());
    for &n in &header.blob_lengths {
        if rest.len() < 8 * n {
            return Err(err("truncated parameters"));
        }
        let (b, r) = rest.split_at(8 * n);
        blobs.push(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f64>>());
        rest = r;
    }
    if !rest.is_empty() || blobs.len() != 9 {
        return Err(err("unexpected parameter layout"));
    }
    let mut model = header.template;
    for (g, b) in model.groups_mut().into_iter().zip(&blobs) {
        if g.len() != b.len() {
            return Err(err("parameter count does not match the model"));
        }
        g.copy_from_slice(b);
    }
    let mut it = blobs.into_iter().skip(3);
    let mut take3 = || [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    let adam_m = take3();
    let adam_v = take3();
    Ok(Checkpoint {
        step: header.step,
        config_hash: header.config_hash,
        config: header.config,
        model,
        adam_m,
        adam_v,
        gen_fired: header.gen_fired,
        gen_failures: header.gen_failures,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &encode_checkpoint(c)?)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, path)
}

/// Tone curve table: 256 rows of per-channel control points, then one row
/// of gains per frame.
pub fn format_crf_table(points: &[[f64; CONTROL_POINTS]; 3], gains: &[[f64; 3]]) -> String {
    let mut s = format!("# tone curve: {CONTROL_POINTS} control points x 3 channels\n");
    for k in 0..CONTROL_POINTS {
        s += &format!("{:.17e} {:.17e} {:.17e}\n", points[0][k], points[1][k], points[2][k]);
    }
    s += &format!("# white balance: {} frames\n", gains.len());
    for g in gains {
        s += &format!("{:.17e} {:.17e} {:.17e}\n", g[0], g[1], g[2]);
    }
    s
}

/// Parse a tone curve table; the curve part is validated as a response.
pub fn parse_crf_table(text: &str, leak_alpha: f64) -> Result<(CrfParams, Vec<[f64; 3]>)> {
    let rows: Vec<[f64; 3]> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| Error::input(format!("bad row `{l}`")))?;
            <[f64; 3]>::try_from(v).map_err(|_| Error::input(format!("row `{l}` needs three values")))
        })
        .collect::<Result<_>>()?;
    if rows.len() < CONTROL_POINTS {
        return Err(Error::input(format!("tone curve table has {} rows", rows.len())));
    }
    let mut points = Box::new([[0.0; CONTROL_POINTS]; 3]);
    for (k, r) in rows[..CONTROL_POINTS].iter().enumerate() {
        for c in 0..3 {
            points[c][k] = r[c];
        }
    }
    Ok((CrfParams::from_control_points(&points, leak_alpha)?, rows[CONTROL_POINTS..].to_vec()))
}

/// Append `step term value` lines for every term.
pub fn append_loss_log(w: &mut impl Write, step: usize, b: &LossBreakdown) -> std::io::Result<()> {
    for (term, v) in b.terms() {
        writeln!(w, "{step} {term} {v:.10e}")?;
    }
    Ok(())
}

/// Write the log of a session that started at step `start`. Lines of an
/// existing log before `start` are kept, so a resumed run extends it.
pub fn write_loss_log(path: &Path, start: usize, log: &[(usize, LossBreakdown)]) -> Result<()> {
    let mut kept = String::new();
    if start > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for l in old.lines() {
                if l.split_whitespace().next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start) {
                    kept.push_str(l);
                    kept.push('\n');
                }
            }
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(kept.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (s, b) in log {
        append_loss_log(&mut w, *s, b).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-term series from a loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<(String, Vec<(usize, f64)>)>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || format_err("loss log", path, format!("line {}", n + 1));
        let mut it = line.split_whitespace();
        let (Some(s), Some(t), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let s: usize = s.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        match series.iter_mut().find(|(name, _)| name == t) {
            Some((_, pts)) => pts.push((s, v)),
            None => series.push((t.to_string(), vec![(s, v)])),
        }
    }
    if series.is_empty() {
        return Err(Error::input(format!("loss log {} is empty", path.display())));
    }
    Ok(series)
}
