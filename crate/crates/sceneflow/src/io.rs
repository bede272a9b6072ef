//! File formats and configuration parsing.
//!
//! Binary multi-byte fields are little-endian; text files are UTF-8 with LF
//! line endings. Config files are flat "key = value" lines with `#` comments.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, FlowField, PointCloud, RgbImage, RigidTransform};
use crate::losses::LossWeights;
use crate::optimizer::OptimizerConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::{Background, SceneObject, SceneSpec, Shape};

/// Default meters-per-unit for 16-bit depth images.
pub const DEPTH_SCALE: f64 = 1.0 / 256.0;

const FLOW_MAGIC: &[u8; 4] = b"SFL1";

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path, reason.into())
}

// ---------------------------------------------------------------------------
// Flow files
// ---------------------------------------------------------------------------

/// Write a flow field: magic "SFL1", u32 LE count, then count (dx, dy, dz)
/// f32 LE triples.
pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    for v in &flow.vectors {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
    }
    let mut buf = Vec::with_capacity(8 + 12 * flow.len());
    buf.extend_from_slice(FLOW_MAGIC);
    let count = u32::try_from(flow.len())
        .map_err(|_| Error::invalid("flow too large for the file format"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for v in &flow.vectors {
        for c in 0..3 {
            buf.extend_from_slice(&(v[c] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 8 || &data[0..4] != FLOW_MAGIC {
        return Err(fmt_err(path, "missing SFL1 magic"));
    }
    let count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    if data.len() != 8 + 12 * count {
        return Err(fmt_err(
            path,
            format!("expected {} bytes for {count} vectors, got {}", 8 + 12 * count, data.len()),
        ));
    }
    let mut vectors = Vec::with_capacity(count);
    for i in 0..count {
        let base = 8 + 12 * i;
        let mut v = Vector3::zeros();
        for c in 0..3 {
            let off = base + 4 * c;
            let x = f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64;
            if !x.is_finite() {
                return Err(fmt_err(path, format!("non-finite flow value at index {i}")));
            }
            v[c] = x;
        }
        vectors.push(v);
    }
    Ok(FlowField { vectors })
}

// ---------------------------------------------------------------------------
// Pose and intrinsics files
// ---------------------------------------------------------------------------

/// Write 12 decimals, row-major 3x4 [R|t] on one line.
pub fn write_pose(path: impl AsRef<Path>, pose: &RigidTransform) -> Result<()> {
    let path = path.as_ref();
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut vals = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            vals.push(format!("{:.17e}", r[(row, col)]));
        }
        vals.push(format!("{:.17e}", t[row]));
    }
    fs::write(path, vals.join(" ") + "\n").map_err(|e| Error::io(path, e))
}

/// Parse a 3x4 [R|t] pose. A rotation within 1e-6 of orthonormal is snapped
/// back onto the rotation group; anything farther off is rejected.
pub fn read_pose(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fmt_err(path, format!("bad number: {e}")))?;
    if vals.len() != 12 {
        return Err(fmt_err(path, format!("expected 12 values, got {}", vals.len())));
    }
    let rotation = Matrix3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let translation = Vector3::new(vals[3], vals[7], vals[11]);
    if !translation.iter().all(|c| c.is_finite()) {
        return Err(fmt_err(path, "non-finite translation"));
    }

    const POSE_TOL: f64 = 1e-6;
    let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
    let det = rotation.determinant();
    if ortho_err > POSE_TOL || (det - 1.0).abs() > POSE_TOL {
        return Err(fmt_err(
            path,
            format!("rotation off the group: |R'R - I| = {ortho_err:e}, det = {det}"),
        ));
    }
    // Nearest rotation in the Frobenius sense.
    let svd = rotation.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant();
    let snapped = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t;
    RigidTransform::new(snapped, translation)
        .map_err(|e| fmt_err(path, format!("pose rejected: {e}")))
}

/// Write "fx fy cx cy" on one line.
pub fn write_intrinsics(path: impl AsRef<Path>, intr: &CameraIntrinsics) -> Result<()> {
    let path = path.as_ref();
    fs::write(
        path,
        format!("{:.17e} {:.17e} {:.17e} {:.17e}\n", intr.fx, intr.fy, intr.cx, intr.cy),
    )
    .map_err(|e| Error::io(path, e))
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fmt_err(path, format!("bad number: {e}")))?;
    if vals.len() != 4 {
        return Err(fmt_err(path, format!("expected 4 values, got {}", vals.len())));
    }
    CameraIntrinsics::new(vals[0], vals[1], vals[2], vals[3])
        .map_err(|e| fmt_err(path, format!("intrinsics rejected: {e}")))
}

// ---------------------------------------------------------------------------
// Depth and color images
// ---------------------------------------------------------------------------

/// Read a 16-bit single-channel PNG as depth. Raw value 0 marks an invalid
/// pixel; otherwise depth = raw * scale.
pub fn read_depth_image(path: impl AsRef<Path>, scale: f64) -> Result<DepthMap> {
    let path = path.as_ref();
    if scale <= 0.0 {
        return Err(Error::invalid("depth scale must be positive"));
    }
    let img = image::open(path).map_err(|e| fmt_err(path, format!("cannot decode: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(fmt_err(
                path,
                format!("expected 16-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut depth = DepthMap::constant(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            let raw = gray.get_pixel(u as u32, v as u32).0[0];
            depth.set(u, v, raw as f64 * scale);
        }
    }
    Ok(depth)
}

/// Write depth as 16-bit PNG: raw = round(depth / scale), invalid pixels 0.
pub fn write_depth_image(path: impl AsRef<Path>, depth: &DepthMap, scale: f64) -> Result<()> {
    let path = path.as_ref();
    if scale <= 0.0 {
        return Err(Error::invalid("depth scale must be positive"));
    }
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        depth.width as u32,
        depth.height as u32,
    );
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            let raw = if DepthMap::is_valid(d) {
                ((d / scale).round() as i64).clamp(1, u16::MAX as i64) as u16
            } else {
                0
            };
            img.put_pixel(u as u32, v as u32, image::Luma([raw]));
        }
    }
    img.save(path).map_err(|e| fmt_err(path, format!("cannot encode: {e}")))
}

/// Read an 8-bit RGB PNG into channels in [0, 1].
pub fn read_color_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| fmt_err(path, format!("cannot decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for p in img.pixels() {
        pixels.push([
            p.0[0] as f64 / 255.0,
            p.0[1] as f64 / 255.0,
            p.0[2] as f64 / 255.0,
        ]);
    }
    RgbImage::new(w, h, pixels)
}

pub fn write_color_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for v in 0..img.height {
        for u in 0..img.width {
            let c = img.at(u, v);
            let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(u as u32, v as u32, image::Rgb([to8(c[0]), to8(c[1]), to8(c[2])]));
        }
    }
    out.save(path).map_err(|e| fmt_err(path, format!("cannot encode: {e}")))
}

// ---------------------------------------------------------------------------
// PLY point clouds
// ---------------------------------------------------------------------------

/// Write a point cloud as PLY with float x, y, z and, when colors are
/// present, uchar red, green, blue.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, binary: bool) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let has_colors = cloud.colors.is_some();
    let format = if binary { "binary_little_endian" } else { "ascii" };
    let mut header = format!("ply\nformat {format} 1.0\nelement vertex {}\n", cloud.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if has_colors {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let io_err = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io_err)?;
    let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.points.iter().enumerate() {
        if binary {
            for c in 0..3 {
                w.write_all(&(p[c] as f32).to_le_bytes()).map_err(io_err)?;
            }
            if let Some(cols) = &cloud.colors {
                w.write_all(&[to8(cols[i][0]), to8(cols[i][1]), to8(cols[i][2])])
                    .map_err(io_err)?;
            }
        } else {
            let mut line = format!("{:.9e} {:.9e} {:.9e}", p.x as f32, p.y as f32, p.z as f32);
            if let Some(cols) = &cloud.colors {
                line.push_str(&format!(
                    " {} {} {}",
                    to8(cols[i][0]),
                    to8(cols[i][1]),
                    to8(cols[i][2])
                ));
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;

    // Header is ASCII up to and including the "end_header" line.
    let header_end = find_header_end(&data)
        .ok_or_else(|| fmt_err(path, "missing end_header"))?;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| fmt_err(path, "header is not valid UTF-8"))?;

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(fmt_err(path, "missing ply magic line"));
    }
    let mut binary = None;
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let line = line.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                binary = match tok.next() {
                    Some("ascii") => Some(false),
                    Some("binary_little_endian") => Some(true),
                    other => {
                        return Err(fmt_err(path, format!("unsupported format {other:?}")))
                    }
                };
            }
            Some("comment") => {}
            Some("element") => match (tok.next(), tok.next()) {
                (Some("vertex"), Some(n)) => {
                    count = Some(
                        n.parse()
                            .map_err(|e| fmt_err(path, format!("bad vertex count: {e}")))?,
                    );
                    in_vertex = true;
                }
                (Some(other), _) => {
                    return Err(fmt_err(path, format!("unsupported element {other}")))
                }
                _ => return Err(fmt_err(path, "malformed element line")),
            },
            Some("property") => {
                if in_vertex {
                    let ty = tok.next().unwrap_or_default().to_string();
                    let name = tok.next().unwrap_or_default().to_string();
                    props.push((ty, name));
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(fmt_err(path, format!("unknown header line {other}"))),
            None => {}
        }
    }
    let binary = binary.ok_or_else(|| fmt_err(path, "missing format line"))?;
    let count = count.ok_or_else(|| fmt_err(path, "missing vertex element"))?;

    let xyz = [("float", "x"), ("float", "y"), ("float", "z")];
    let rgb = [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")];
    let props_ref: Vec<(&str, &str)> =
        props.iter().map(|(t, n)| (t.as_str(), n.as_str())).collect();
    let has_colors = if props_ref == xyz {
        false
    } else if props_ref.len() == 6 && props_ref[..3] == xyz && props_ref[3..] == rgb {
        true
    } else {
        return Err(fmt_err(
            path,
            "unsupported property layout (need float x y z [uchar red green blue])",
        ));
    };

    let body = &data[header_end..];
    let mut points = Vec::with_capacity(count);
    let mut colors = has_colors.then(|| Vec::with_capacity(count));
    if binary {
        let stride = 12 + if has_colors { 3 } else { 0 };
        if body.len() < stride * count {
            return Err(fmt_err(path, "truncated binary vertex data"));
        }
        for i in 0..count {
            let base = i * stride;
            let mut p = Vector3::zeros();
            for c in 0..3 {
                let off = base + 4 * c;
                p[c] = f32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as f64;
            }
            points.push(p);
            if let Some(cols) = colors.as_mut() {
                let off = base + 12;
                cols.push([
                    body[off] as f64 / 255.0,
                    body[off + 1] as f64 / 255.0,
                    body[off + 2] as f64 / 255.0,
                ]);
            }
        }
    } else {
        let text = std::str::from_utf8(body)
            .map_err(|_| fmt_err(path, "ascii body is not valid UTF-8"))?;
        let mut vals = text.split_whitespace();
        let fields = if has_colors { 6 } else { 3 };
        for i in 0..count {
            let mut row = [0.0f64; 6];
            for f in row.iter_mut().take(fields) {
                let tok = vals
                    .next()
                    .ok_or_else(|| fmt_err(path, format!("truncated at vertex {i}")))?;
                *f = tok
                    .parse()
                    .map_err(|e| fmt_err(path, format!("bad value at vertex {i}: {e}")))?;
            }
            points.push(Vector3::new(row[0], row[1], row[2]));
            if let Some(cols) = colors.as_mut() {
                cols.push([row[3] / 255.0, row[4] / 255.0, row[5] / 255.0]);
            }
        }
        if vals.next().is_some() {
            return Err(fmt_err(path, "trailing data after last vertex"));
        }
    }
    Ok(PointCloud {
        points,
        colors,
        source_pixels: None,
    })
}

fn find_header_end(data: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let pos = data.windows(needle.len()).position(|w| w == needle)?;
    let after = &data[pos + needle.len()..];
    // Skip to just past the newline terminating the end_header line.
    let nl = after.iter().position(|&b| b == b'\n')?;
    Some(pos + needle.len() + nl + 1)
}

// ---------------------------------------------------------------------------
// Flat key = value configuration
// ---------------------------------------------------------------------------

/// Parse "key = value" lines; `#` starts a comment, blank lines are ignored.
/// Duplicate keys are rejected.
pub fn parse_kv(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(fmt_err(path, format!("line {}: expected key = value", lineno + 1)));
        };
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(fmt_err(path, format!("duplicate key {key}")));
        }
    }
    Ok(map)
}

/// Typed accessor over a parsed config that tracks which keys were consumed
/// so unknown keys can be rejected as likely typos.
struct KvReader<'a> {
    path: &'a Path,
    map: HashMap<String, String>,
    used: std::collections::HashSet<String>,
}

impl<'a> KvReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(KvReader {
            path,
            map: parse_kv(path)?,
            used: Default::default(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| fmt_err(self.path, format!("{key}: {e}"))),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| fmt_err(self.path, format!("{key}: {e}"))),
        }
    }

    fn f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| fmt_err(self.path, format!("{key}: {e}"))),
        }
    }

    fn vec3(&mut self, key: &str) -> Result<Option<Vector3<f64>>> {
        match self.f64_list(key)? {
            None => Ok(None),
            Some(v) if v.len() == 3 => Ok(Some(Vector3::new(v[0], v[1], v[2]))),
            Some(v) => Err(fmt_err(
                self.path,
                format!("{key}: expected 3 values, got {}", v.len()),
            )),
        }
    }

    fn transform(&mut self, key: &str) -> Result<Option<RigidTransform>> {
        match self.f64_list(key)? {
            None => Ok(None),
            Some(v) if v.len() == 12 => {
                let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
                let translation = Vector3::new(v[3], v[7], v[11]);
                RigidTransform::new(rotation, translation)
                    .map(Some)
                    .map_err(|e| fmt_err(self.path, format!("{key}: {e}")))
            }
            Some(v) => Err(fmt_err(
                self.path,
                format!("{key}: expected 12 values, got {}", v.len()),
            )),
        }
    }

    fn finish(self) -> Result<()> {
        let mut unknown: Vec<&String> =
            self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            return Ok(());
        }
        unknown.sort();
        Err(fmt_err(
            self.path,
            format!(
                "unknown keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ),
        ))
    }
}

fn read_weights_from(r: &mut KvReader) -> Result<LossWeights> {
    let defaults = LossWeights::default();
    let mut w = LossWeights {
        alpha: r.f64_list("alpha")?.unwrap_or_else(|| defaults.alpha.clone()),
        beta1: r.f64("beta1", defaults.beta1)?,
        beta2: r.f64("beta2", defaults.beta2)?,
        beta3: r.f64("beta3", defaults.beta3)?,
        beta4: r.f64("beta4", defaults.beta4)?,
    };
    if w.alpha.is_empty() {
        w.alpha = defaults.alpha;
    }
    w.validate()?;
    Ok(w)
}

/// Loss weights file: optional keys `alpha` (whitespace-separated list) and
/// `beta1` through `beta4`; absent keys keep their defaults.
pub fn read_loss_weights(path: impl AsRef<Path>) -> Result<LossWeights> {
    let path = path.as_ref();
    let mut r = KvReader::open(path)?;
    let w = read_weights_from(&mut r)?;
    r.finish()?;
    Ok(w)
}

/// Optimizer config file; absent keys keep their defaults.
pub fn read_optimizer_config(path: impl AsRef<Path>) -> Result<OptimizerConfig> {
    let path = path.as_ref();
    let mut r = KvReader::open(path)?;
    let d = OptimizerConfig::default();
    let cfg = OptimizerConfig {
        levels: r.usize("levels", d.levels)?,
        level_sample_factor: r.f64("level_sample_factor", d.level_sample_factor)?,
        iterations_per_level: r.usize("iterations_per_level", d.iterations_per_level)?,
        initial_step: r.f64("initial_step", d.initial_step)?,
        grad_tolerance: r.f64("grad_tolerance", d.grad_tolerance)?,
        neighbor_k: r.usize("neighbor_k", d.neighbor_k)?,
        weights: read_weights_from(&mut r)?,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Preprocess config file; absent keys keep their defaults.
pub fn read_preprocess_config(path: impl AsRef<Path>) -> Result<PreprocessConfig> {
    let path = path.as_ref();
    let mut r = KvReader::open(path)?;
    let d = PreprocessConfig::default();
    let cfg = PreprocessConfig {
        min_height_above_ground: r.f64("min_height_above_ground", d.min_height_above_ground)?,
        max_depth: r.f64("max_depth", d.max_depth)?,
        camera_height: r.f64("camera_height", d.camera_height)?,
        range_limit: r.f64("range_limit", d.range_limit)?,
        occlusion_tolerance: r.f64("occlusion_tolerance", d.occlusion_tolerance)?,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Scene description file. Keys: `width`, `height`, `fx fy cx cy`,
/// `background` (`plane` with `plane_z`/`plane_cell`, or `room` with
/// `room_half_extents`), `camera_motion` (12 values, row-major [R|t]),
/// `noise_sigma`, `seed`, and numbered objects: `objectN_shape`
/// (`box`/`sphere`), `objectN_half_extents` or `objectN_radius`,
/// `objectN_center`, optional `objectN_axis_angle` (ax ay az angle),
/// `objectN_shift` or `objectN_motion`, optional `objectN_color`.
pub fn read_scene_spec(path: impl AsRef<Path>) -> Result<SceneSpec> {
    let path = path.as_ref();
    let mut r = KvReader::open(path)?;
    let width = r.usize("width", 0)?;
    let height = r.usize("height", 0)?;
    if width == 0 || height == 0 {
        return Err(fmt_err(path, "width and height are required and nonzero"));
    }
    let intrinsics = CameraIntrinsics::new(
        r.f64("fx", 0.0)?,
        r.f64("fy", 0.0)?,
        r.f64("cx", 0.0)?,
        r.f64("cy", 0.0)?,
    )
    .map_err(|e| fmt_err(path, format!("intrinsics: {e}")))?;

    let background = match r.raw("background").as_deref() {
        Some("plane") | None => Background::Plane {
            z: r.f64("plane_z", 10.0)?,
            cell: r.f64("plane_cell", 1.0)?,
        },
        Some("room") => Background::Room {
            half_extents: r
                .vec3("room_half_extents")?
                .ok_or_else(|| fmt_err(path, "room background needs room_half_extents"))?,
        },
        Some(other) => return Err(fmt_err(path, format!("unknown background {other}"))),
    };

    let mut objects = Vec::new();
    for i in 1.. {
        let prefix = format!("object{i}_");
        let Some(shape_name) = r.raw(&format!("{prefix}shape")) else {
            break;
        };
        let shape = match shape_name.as_str() {
            "box" => Shape::Box {
                half_extents: r.vec3(&format!("{prefix}half_extents"))?.ok_or_else(|| {
                    fmt_err(path, format!("{prefix}half_extents required for a box"))
                })?,
            },
            "sphere" => Shape::Sphere {
                radius: r.f64(&format!("{prefix}radius"), 0.0)?,
            },
            other => return Err(fmt_err(path, format!("unknown shape {other}"))),
        };
        let center = r
            .vec3(&format!("{prefix}center"))?
            .ok_or_else(|| fmt_err(path, format!("{prefix}center is required")))?;
        let placement = match r.f64_list(&format!("{prefix}axis_angle"))? {
            None => RigidTransform::from_translation(center),
            Some(v) if v.len() == 4 => {
                RigidTransform::from_axis_angle(Vector3::new(v[0], v[1], v[2]), v[3], center)
            }
            Some(v) => {
                return Err(fmt_err(
                    path,
                    format!("{prefix}axis_angle: expected 4 values, got {}", v.len()),
                ))
            }
        };
        let motion = match (
            r.vec3(&format!("{prefix}shift"))?,
            r.transform(&format!("{prefix}motion"))?,
        ) {
            (Some(_), Some(_)) => {
                return Err(fmt_err(
                    path,
                    format!("{prefix}shift and {prefix}motion are mutually exclusive"),
                ))
            }
            (Some(t), None) => RigidTransform::from_translation(t),
            (None, Some(m)) => m,
            (None, None) => RigidTransform::identity(),
        };
        let color = match r.vec3(&format!("{prefix}color"))? {
            Some(c) => [c.x, c.y, c.z],
            None => [0.8, 0.3, 0.3],
        };
        objects.push(SceneObject {
            shape,
            placement,
            motion,
            color,
        });
    }

    let spec = SceneSpec {
        width,
        height,
        intrinsics,
        background,
        objects,
        camera_motion: r.transform("camera_motion")?.unwrap_or_else(RigidTransform::identity),
        noise_sigma: r.f64("noise_sigma", 0.0)?,
        seed: r.f64("seed", 0.0)? as u64,
    };
    r.finish()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn random_flow(n: usize, seed: u64) -> FlowField {
        let mut rng = StdRng::seed_from_u64(seed);
        FlowField {
            vectors: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn flow_round_trip_preserves_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.sfl");
        let flow = random_flow(100, 1);
        write_flow(&path, &flow).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(back.len(), flow.len());
        for (a, b) in flow.vectors.iter().zip(&back.vectors) {
            for c in 0..3 {
                assert_eq!(a[c] as f32, b[c] as f32);
                // Values survive exactly at f32 precision.
                assert_eq!(b[c], (a[c] as f32) as f64);
            }
        }
        // File size invariant.
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 12 * 100);
    }

    #[test]
    fn flow_reader_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.sfl");
        fs::write(&p, b"XXXX\x01\x00\x00\x00aaaabbbbcccc").unwrap();
        assert!(read_flow(&p).is_err());
        fs::write(&p, b"SFL1\x02\x00\x00\x00aaaabbbbcccc").unwrap();
        assert!(read_flow(&p).is_err(), "count larger than payload");
        let nan = f32::NAN.to_le_bytes();
        let mut data = b"SFL1\x01\x00\x00\x00".to_vec();
        data.extend_from_slice(&nan);
        data.extend_from_slice(&[0; 8]);
        fs::write(&p, data).unwrap();
        assert!(read_flow(&p).is_err(), "non-finite value");
    }

    #[test]
    fn pose_round_trip_and_reorthonormalization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pose.txt");
        let pose = RigidTransform::from_axis_angle(
            Vector3::new(0.2, 1.0, -0.3),
            0.7,
            Vector3::new(1.0, -2.0, 3.0),
        );
        write_pose(&path, &pose).unwrap();
        let back = read_pose(&path).unwrap();
        assert_relative_eq!(back.rotation, pose.rotation, epsilon = 1e-12);
        assert_relative_eq!(back.translation, pose.translation, epsilon = 1e-12);

        // Slightly perturbed rotation within 1e-6 is snapped onto the group.
        let mut r = pose.rotation;
        r[(0, 0)] += 3e-8;
        let vals: Vec<String> = (0..3)
            .flat_map(|row| {
                (0..3)
                    .map(move |col| format!("{:.17e}", r[(row, col)]))
                    .chain(std::iter::once(format!("{:.17e}", pose.translation[row])))
            })
            .collect();
        fs::write(&path, vals.join(" ")).unwrap();
        let snapped = read_pose(&path).unwrap();
        snapped.validate().unwrap();
        assert_relative_eq!(snapped.rotation, pose.rotation, epsilon = 1e-6);

        // Far off the group: rejected.
        fs::write(&path, "2 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        assert!(read_pose(&path).is_err());
        fs::write(&path, "1 2 3").unwrap();
        assert!(read_pose(&path).is_err());
    }

    #[test]
    fn intrinsics_round_trip_and_rejection() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("k.txt");
        let k = CameraIntrinsics::new(721.5377, 719.2, 609.5593, 172.854).unwrap();
        write_intrinsics(&path, &k).unwrap();
        let back = read_intrinsics(&path).unwrap();
        assert_eq!(back, k);
        fs::write(&path, "-1 1 0 0").unwrap();
        assert!(read_intrinsics(&path).is_err());
    }

    #[test]
    fn depth_png_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut depth = DepthMap::constant(7, 5, 0.0);
        let mut rng = StdRng::seed_from_u64(2);
        for v in 0..5 {
            for u in 0..7 {
                if (u + v) % 5 == 0 {
                    continue; // leave invalid
                }
                let raw: u16 = rng.gen_range(1..=u16::MAX);
                depth.set(u, v, raw as f64 * DEPTH_SCALE);
            }
        }
        write_depth_image(&path, &depth, DEPTH_SCALE).unwrap();
        let back = read_depth_image(&path, DEPTH_SCALE).unwrap();
        assert_eq!(back, depth);
        // Raw 256 at default scale is one meter; raw 0 is invalid.
        assert_relative_eq!(256.0 * DEPTH_SCALE, 1.0);
        assert!(!DepthMap::is_valid(0.0 * DEPTH_SCALE));
    }

    #[test]
    fn depth_reader_rejects_eight_bit_images() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d8.png");
        image::GrayImage::new(4, 4).save(&path).unwrap();
        let err = read_depth_image(&path, DEPTH_SCALE).unwrap_err();
        assert_eq!(err.code(), "FORMAT");
    }

    #[test]
    fn ply_ascii_single_point() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 1\n",
        )
        .unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], Vector3::new(0.0, 0.0, 1.0));
        assert!(cloud.colors.is_none());
    }

    #[test]
    fn ply_binary_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let mut rng = StdRng::seed_from_u64(3);
        let cloud = PointCloud {
            points: (0..64)
                .map(|_| {
                    // f32-representable coordinates for bit-exactness.
                    Vector3::new(
                        rng.gen_range(-100i32..100) as f64 * 0.5,
                        rng.gen::<f32>() as f64,
                        rng.gen::<f32>() as f64,
                    )
                })
                .collect(),
            colors: Some((0..64).map(|i| [(i % 256) as f64 / 255.0, 0.0, 1.0]).collect()),
            source_pixels: None,
        };
        write_ply(&path, &cloud, true).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.colors, cloud.colors);
    }

    #[test]
    fn ply_ascii_round_trip_close() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let cloud = PointCloud::from_points(vec![
            Vector3::new(1.234567891, -2.0, 3.5e-3),
            Vector3::new(0.0, 9.75, -8.125),
        ]);
        write_ply(&path, &cloud, false).unwrap();
        let back = read_ply(&path).unwrap();
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn ply_reader_rejects_malformed_inputs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(&path, "not a ply").unwrap();
        assert!(read_ply(&path).is_err());
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n",
        )
        .unwrap();
        assert!(read_ply(&path).is_err(), "missing y z properties");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
        )
        .unwrap();
        assert!(read_ply(&path).is_err(), "truncated body");
    }

    #[test]
    fn kv_parsing_comments_duplicates_unknowns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "# comment\nmax_depth = 20 # inline\n\nrange_limit = 50\n").unwrap();
        let cfg = read_preprocess_config(&path).unwrap();
        assert_eq!(cfg.max_depth, 20.0);
        assert_eq!(cfg.range_limit, 50.0);
        assert_eq!(cfg.camera_height, PreprocessConfig::default().camera_height);

        fs::write(&path, "max_depth = 20\nmax_depth = 30\n").unwrap();
        assert!(read_preprocess_config(&path).is_err(), "duplicate key");
        fs::write(&path, "maxdepth = 20\n").unwrap();
        assert!(read_preprocess_config(&path).is_err(), "unknown key");
        fs::write(&path, "max_depth 20\n").unwrap();
        assert!(read_preprocess_config(&path).is_err(), "missing equals");
    }

    #[test]
    fn optimizer_config_file_overrides_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("opt.cfg");
        fs::write(
            &path,
            "levels = 2\nalpha = 0.5 1.0\niterations_per_level = 7\ninitial_step = 0.005\n",
        )
        .unwrap();
        let cfg = read_optimizer_config(&path).unwrap();
        assert_eq!(cfg.levels, 2);
        assert_eq!(cfg.weights.alpha, vec![0.5, 1.0]);
        assert_eq!(cfg.iterations_per_level, 7);
        assert_eq!(cfg.initial_step, 0.005);
        assert_eq!(cfg.neighbor_k, OptimizerConfig::default().neighbor_k);

        fs::write(&path, "levels = 3\n").unwrap();
        assert!(read_optimizer_config(&path).is_err(), "alpha count mismatch");
    }

    #[test]
    fn loss_weights_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.cfg");
        fs::write(&path, "alpha = 1.0\nbeta3 = 2.5\n").unwrap();
        let w = read_loss_weights(&path).unwrap();
        assert_eq!(w.alpha, vec![1.0]);
        assert_eq!(w.beta3, 2.5);
        assert_eq!(w.beta1, LossWeights::default().beta1);
    }

    #[test]
    fn scene_spec_file_parses_objects() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scene.cfg");
        fs::write(
            &path,
            "width = 64\nheight = 48\nfx = 100\nfy = 100\ncx = 31.5\ncy = 23.5\n\
             background = plane\nplane_z = 10\nseed = 9\n\
             object1_shape = box\nobject1_half_extents = 0.8 0.6 0.4\n\
             object1_center = -0.5 0 5\nobject1_shift = 0.3 0 -0.25\n\
             object2_shape = sphere\nobject2_radius = 0.5\nobject2_center = 1 0 7\n",
        )
        .unwrap();
        let spec = read_scene_spec(&path).unwrap();
        assert_eq!((spec.width, spec.height), (64, 48));
        assert_eq!(spec.objects.len(), 2);
        assert_eq!(spec.seed, 9);
        match spec.objects[0].shape {
            Shape::Box { half_extents } => {
                assert_eq!(half_extents, Vector3::new(0.8, 0.6, 0.4))
            }
            _ => panic!("expected box"),
        }
        assert_eq!(
            spec.objects[0].motion.translation,
            Vector3::new(0.3, 0.0, -0.25)
        );
        crate::synth::render(&spec).unwrap();

        fs::write(&path, "width = 64\nheight = 48\nfx = 100\nfy = 100\ncx = 1\ncy = 1\nbogus = 1\n")
            .unwrap();
        assert!(read_scene_spec(&path).is_err(), "unknown key");
    }

    proptest! {
        #[test]
        fn flow_round_trip_any_f32(values in proptest::collection::vec(-1e6f32..1e6, 0..64)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.sfl");
            let flow = FlowField {
                vectors: values
                    .chunks(3)
                    .filter(|c| c.len() == 3)
                    .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                    .collect(),
            };
            write_flow(&path, &flow).unwrap();
            let back = read_flow(&path).unwrap();
            prop_assert_eq!(back.vectors, flow.vectors);
        }

        #[test]
        fn ply_binary_round_trip_any_f32(values in proptest::collection::vec(-1e6f32..1e6, 3..90)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.ply");
            let cloud = PointCloud::from_points(
                values
                    .chunks(3)
                    .filter(|c| c.len() == 3)
                    .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                    .collect(),
            );
            write_ply(&path, &cloud, true).unwrap();
            let back = read_ply(&path).unwrap();
            prop_assert_eq!(back.points, cloud.points);
        }
    }
}
