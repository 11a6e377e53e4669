//! File formats for every pipeline artifact.
//!
//! All binary formats are little-endian and start with a four-byte magic
//! followed by a `u32` format version, so a file identifies itself without
//! external metadata. Decoders are strict: wrong magic, wrong version,
//! truncation, or trailing bytes are all distinct errors. The metrics
//! report is plain UTF-8 text with one `key = value` line per scalar and a
//! fixed-order per-class table; floats are printed with Rust's shortest
//! round-trip formatting so decode(encode(x)) is bit-exact.

use std::path::{Path, PathBuf};

use crate::cloud::PointCloud;
use crate::cluster::Centroids;
use crate::error::{Error, Result};
use crate::eval::{ClassMetrics, MetricsReport};
use crate::featnet::{Dense, PointFeatureNet};
use crate::geometry::CameraModel;
use crate::matrix::{FeatureImage, FeatureMatrix};
use crate::supervoxel::SuperVoxelPartition;

pub const FORMAT_VERSION: u32 = 1;

pub const CLOUD_MAGIC: &[u8; 4] = b"PDPC";
pub const CAMERA_MAGIC: &[u8; 4] = b"PDCM";
pub const FEATURE_MAGIC: &[u8; 4] = b"PDFM";
pub const PARTITION_MAGIC: &[u8; 4] = b"PDSV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";

/// A trained model bundle: the feature net, the centroids it clusters
/// against, and (for the baseline and head ablation) a linear head.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: PointFeatureNet,
    pub centroids: Option<Centroids>,
    pub head: Option<Dense>,
}

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn as_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{what} count {n} exceeds u32")))
}

/// Cursor over an encoded artifact; every failure names the origin.
struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], origin: &'a Path) -> Self {
        Self { buf, pos: 0, origin }
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::codec(self.origin, detail)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.fail(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.fail(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn done(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.fail(format!("{} trailing bytes after payload", self.remaining())));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    put_u32(out, FORMAT_VERSION);
}

// ---------------------------------------------------------------------------
// Point cloud: N, then N records of (x y z r g b) f64, then an optional
// block of N i32 labels.
// ---------------------------------------------------------------------------

pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    let n = as_u32(cloud.len(), "point")?;
    let mut out = Vec::with_capacity(12 + cloud.len() * 48);
    header(&mut out, CLOUD_MAGIC);
    put_u32(&mut out, n);
    for i in 0..cloud.len() {
        for &v in &cloud.positions[i] {
            put_f64(&mut out, v);
        }
        for &v in &cloud.colors[i] {
            put_f64(&mut out, v);
        }
    }
    if let Some(labels) = &cloud.labels {
        for &l in labels {
            let l = i32::try_from(l)
                .map_err(|_| Error::InvalidInput(format!("label {l} exceeds i32")))?;
            put_i32(&mut out, l);
        }
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8], origin: &Path) -> Result<PointCloud> {
    let mut r = ByteReader::new(bytes, origin);
    r.header(CLOUD_MAGIC)?;
    let n = r.u32()? as usize;
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([r.f64()?, r.f64()?, r.f64()?]);
        colors.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let labels = match r.remaining() {
        0 => None,
        rem if rem == 4 * n && n > 0 => {
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let l = r.i32()?;
                if l < 0 {
                    return Err(r.fail(format!("negative label {l} for point {i}")));
                }
                labels.push(l as u32);
            }
            Some(labels)
        }
        rem => {
            return Err(r.fail(format!(
                "expected no label block or {} bytes, found {rem}",
                4 * n
            )))
        }
    };
    r.done()?;
    PointCloud::new(positions, colors, labels)
}

// ---------------------------------------------------------------------------
// Camera: intrinsics, image size, then the world-to-camera extrinsic as
// 12 f64 row-major (R|t).
// ---------------------------------------------------------------------------

pub fn encode_camera(camera: &CameraModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * 8 + 8 + 12 * 8);
    header(&mut out, CAMERA_MAGIC);
    put_f64(&mut out, camera.fx);
    put_f64(&mut out, camera.fy);
    put_f64(&mut out, camera.cx);
    put_f64(&mut out, camera.cy);
    put_u32(&mut out, camera.width);
    put_u32(&mut out, camera.height);
    for row in 0..3 {
        for col in 0..3 {
            put_f64(&mut out, camera.rotation[row][col]);
        }
        put_f64(&mut out, camera.translation[row]);
    }
    Ok(out)
}

pub fn decode_camera(bytes: &[u8], origin: &Path) -> Result<CameraModel> {
    let mut r = ByteReader::new(bytes, origin);
    r.header(CAMERA_MAGIC)?;
    let fx = r.f64()?;
    let fy = r.f64()?;
    let cx = r.f64()?;
    let cy = r.f64()?;
    let width = r.u32()?;
    let height = r.u32()?;
    let mut rotation = [[0.0; 3]; 3];
    let mut translation = [0.0; 3];
    for row in 0..3 {
        for col in 0..3 {
            rotation[row][col] = r.f64()?;
        }
        translation[row] = r.f64()?;
    }
    r.done()?;
    CameraModel::new(fx, fy, cx, cy, width, height, rotation, translation)
        .map_err(|e| e.in_context(format!("decoding camera from {}", origin.display())))
}

// ---------------------------------------------------------------------------
// Feature map: H, W, D, then H·W·D f32 row-major, then H·W validity bytes.
// Values are stored in single precision; encode a map twice and the bytes
// match, but values that are not f32-representable lose precision once.
// ---------------------------------------------------------------------------

pub fn encode_feature_image(image: &FeatureImage) -> Result<Vec<u8>> {
    let h = as_u32(image.height, "image row")?;
    let w = as_u32(image.width, "image column")?;
    let d = as_u32(image.dim, "image channel")?;
    let mut out = Vec::with_capacity(20 + image.data.len() * 4 + image.valid.len());
    header(&mut out, FEATURE_MAGIC);
    put_u32(&mut out, h);
    put_u32(&mut out, w);
    put_u32(&mut out, d);
    for &v in &image.data {
        put_f32(&mut out, v as f32);
    }
    for &v in &image.valid {
        put_u8(&mut out, v as u8);
    }
    Ok(out)
}

pub fn decode_feature_image(bytes: &[u8], origin: &Path) -> Result<FeatureImage> {
    let mut r = ByteReader::new(bytes, origin);
    r.header(FEATURE_MAGIC)?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let pixels = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(dim))
        .ok_or_else(|| r.fail("image dimensions overflow"))?;
    let mut data = Vec::with_capacity(pixels);
    for _ in 0..pixels {
        data.push(r.f32()? as f64);
    }
    let mut valid = Vec::with_capacity(height * width);
    for i in 0..height * width {
        match r.u8()? {
            0 => valid.push(false),
            1 => valid.push(true),
            other => return Err(r.fail(format!("validity byte {other} at pixel {i}"))),
        }
    }
    r.done()?;
    Ok(FeatureImage {
        height,
        width,
        dim,
        data,
        valid,
    })
}

// ---------------------------------------------------------------------------
// Partition: N, M, then N i32 voxel ids. Ids must be the canonical
// first-occurrence numbering (the only form the partitioner produces).
// ---------------------------------------------------------------------------

pub fn encode_partition(part: &SuperVoxelPartition) -> Result<Vec<u8>> {
    let n = as_u32(part.num_points(), "point")?;
    let m = as_u32(part.num_voxels(), "voxel")?;
    let mut out = Vec::with_capacity(16 + part.num_points() * 4);
    header(&mut out, PARTITION_MAGIC);
    put_u32(&mut out, n);
    put_u32(&mut out, m);
    for &v in part.voxel_of() {
        put_i32(&mut out, v as i32);
    }
    Ok(out)
}

pub fn decode_partition(bytes: &[u8], origin: &Path) -> Result<SuperVoxelPartition> {
    let mut r = ByteReader::new(bytes, origin);
    r.header(PARTITION_MAGIC)?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = r.i32()?;
        if id < 0 || id as usize >= m {
            return Err(r.fail(format!("voxel id {id} for point {i} outside [0, {m})")));
        }
        ids.push(id as usize);
    }
    r.done()?;
    let part = SuperVoxelPartition::from_labels(&ids)
        .map_err(|e| e.in_context(format!("decoding partition from {}", origin.display())))?;
    if part.num_voxels() != m {
        return Err(r.fail(format!(
            "header claims {m} voxels, ids cover {}",
            part.num_voxels()
        )));
    }
    if part.voxel_of() != ids.as_slice() {
        return Err(r.fail("voxel ids are not in first-occurrence order"));
    }
    Ok(part)
}

// ---------------------------------------------------------------------------
// Checkpoint: architecture hyperparameters, named parameter tensors, then
// optional centroids and optional linear head.
// ---------------------------------------------------------------------------

fn put_tensor(out: &mut Vec<u8>, name: &str, data: &[f64]) -> Result<()> {
    put_u32(out, as_u32(name.len(), "tensor name byte")?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, as_u32(data.len(), "tensor element")?);
    for &v in data {
        put_f64(out, v);
    }
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    header(&mut out, CHECKPOINT_MAGIC);
    put_u32(&mut out, as_u32(ck.net.hidden, "hidden unit")?);
    put_u32(&mut out, as_u32(ck.net.k, "neighbor")?);
    put_u32(&mut out, as_u32(ck.net.dim, "feature channel")?);
    put_u8(&mut out, ck.net.normalize_output as u8);
    let tensors = ck.net.param_tensors();
    put_u32(&mut out, as_u32(tensors.len(), "tensor")?);
    for (name, data) in tensors {
        put_tensor(&mut out, name, data)?;
    }
    match &ck.centroids {
        None => put_u8(&mut out, 0),
        Some(c) => {
            put_u8(&mut out, 1);
            put_u8(&mut out, c.sphere as u8);
            put_u32(&mut out, as_u32(c.count(), "centroid")?);
            put_u32(&mut out, as_u32(c.dim(), "centroid channel")?);
            for &v in c.matrix.data() {
                put_f64(&mut out, v);
            }
        }
    }
    match &ck.head {
        None => put_u8(&mut out, 0),
        Some(h) => {
            put_u8(&mut out, 1);
            put_u32(&mut out, as_u32(h.out_dim(), "head output")?);
            put_u32(&mut out, as_u32(h.in_dim(), "head input")?);
            for &v in h.weight.data() {
                put_f64(&mut out, v);
            }
            for &v in &h.bias {
                put_f64(&mut out, v);
            }
        }
    }
    Ok(out)
}

fn read_flag(r: &mut ByteReader, what: &str) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(r.fail(format!("{what} flag byte {other}"))),
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, origin);
    r.header(CHECKPOINT_MAGIC)?;
    let hidden = r.u32()? as usize;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let normalize = read_flag(&mut r, "normalization")?;
    let mut net = PointFeatureNet::zeros(hidden, k, dim, normalize)
        .map_err(|e| e.in_context(format!("decoding checkpoint from {}", origin.display())))?;
    let count = r.u32()? as usize;
    let expected = net.param_tensors().len();
    if count != expected {
        return Err(r.fail(format!("expected {expected} tensors, header claims {count}")));
    }
    for (name, slot) in net.param_tensors_mut() {
        let name_len = r.u32()? as usize;
        let got = r.take(name_len)?;
        if got != name.as_bytes() {
            return Err(Error::codec(
                origin,
                format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(got)),
            ));
        }
        let len = r.u32()? as usize;
        if len != slot.len() {
            return Err(Error::codec(
                origin,
                format!("tensor `{name}` has {len} elements, architecture needs {}", slot.len()),
            ));
        }
        for v in slot.iter_mut() {
            *v = r.f64()?;
        }
    }
    let centroids = if read_flag(&mut r, "centroid")? {
        let sphere = read_flag(&mut r, "sphere")?;
        let count = r.u32()? as usize;
        let cdim = r.u32()? as usize;
        let mut matrix = FeatureMatrix::zeros(count, cdim);
        for v in matrix.data_mut() {
            *v = r.f64()?;
        }
        let c = Centroids { matrix, sphere };
        c.validate()
            .map_err(|e| e.in_context(format!("decoding centroids from {}", origin.display())))?;
        Some(c)
    } else {
        None
    };
    let head = if read_flag(&mut r, "head")? {
        let out_dim = r.u32()? as usize;
        let in_dim = r.u32()? as usize;
        let mut layer = Dense::zeros(out_dim, in_dim);
        for v in layer.weight.data_mut() {
            *v = r.f64()?;
        }
        for v in layer.bias.iter_mut() {
            *v = r.f64()?;
        }
        Some(layer)
    } else {
        None
    };
    r.done()?;
    Ok(Checkpoint {
        net,
        centroids,
        head,
    })
}

// ---------------------------------------------------------------------------
// Metrics report: UTF-8 text, `key = value` lines, then a per-class table.
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "-".into(),
    }
}

pub fn encode_metrics(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("classes = {}\n", report.classes.len()));
    out.push_str(&format!("total_points = {}\n", report.total_points));
    out.push_str(&format!("accuracy = {}\n", report.accuracy));
    out.push_str(&format!("mean_class_accuracy = {}\n", report.mean_class_accuracy));
    out.push_str(&format!("miou = {}\n", report.miou));
    let perm: Vec<String> = report.permutation.iter().map(|p| p.to_string()).collect();
    out.push_str(&format!("permutation = {}\n", perm.join(" ")));
    out.push_str("class iou class_accuracy tp fp fn gt_total\n");
    for (c, m) in report.classes.iter().enumerate() {
        out.push_str(&format!(
            "{c} {} {} {} {} {} {}\n",
            fmt_opt(m.iou),
            fmt_opt(m.class_accuracy),
            m.true_positive,
            m.false_positive,
            m.false_negative,
            m.gt_total
        ));
    }
    out
}

fn parse_key<'a>(line: Option<&'a str>, key: &str, origin: &Path) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::codec(origin, format!("missing `{key}` line")))?;
    line.strip_prefix(&format!("{key} = "))
        .ok_or_else(|| Error::codec(origin, format!("expected `{key} = ...`, got `{line}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, origin: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::codec(origin, format!("bad {what}: `{s}`")))
}

fn parse_opt(s: &str, what: &str, origin: &Path) -> Result<Option<f64>> {
    if s == "-" {
        Ok(None)
    } else {
        Ok(Some(parse_num(s, what, origin)?))
    }
}

pub fn decode_metrics(text: &str, origin: &Path) -> Result<MetricsReport> {
    let mut lines = text.lines();
    let classes: usize = parse_num(parse_key(lines.next(), "classes", origin)?, "class count", origin)?;
    let total_points = parse_num(parse_key(lines.next(), "total_points", origin)?, "point count", origin)?;
    let accuracy = parse_num(parse_key(lines.next(), "accuracy", origin)?, "accuracy", origin)?;
    let mean_class_accuracy = parse_num(
        parse_key(lines.next(), "mean_class_accuracy", origin)?,
        "mean class accuracy",
        origin,
    )?;
    let miou = parse_num(parse_key(lines.next(), "miou", origin)?, "miou", origin)?;
    let perm_text = parse_key(lines.next(), "permutation", origin)?;
    let permutation = perm_text
        .split_whitespace()
        .map(|t| parse_num(t, "permutation entry", origin))
        .collect::<Result<Vec<usize>>>()?;
    let header = lines.next().unwrap_or("");
    if header != "class iou class_accuracy tp fp fn gt_total" {
        return Err(Error::codec(origin, format!("bad table header `{header}`")));
    }
    let mut rows = Vec::with_capacity(classes);
    for c in 0..classes {
        let line = lines
            .next()
            .ok_or_else(|| Error::codec(origin, format!("missing table row for class {c}")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::codec(origin, format!("table row `{line}` has {} fields", fields.len())));
        }
        let index: usize = parse_num(fields[0], "class index", origin)?;
        if index != c {
            return Err(Error::codec(origin, format!("table row {c} labeled {index}")));
        }
        rows.push(ClassMetrics {
            iou: parse_opt(fields[1], "iou", origin)?,
            class_accuracy: parse_opt(fields[2], "class accuracy", origin)?,
            true_positive: parse_num(fields[3], "true positives", origin)?,
            false_positive: parse_num(fields[4], "false positives", origin)?,
            false_negative: parse_num(fields[5], "false negatives", origin)?,
            gt_total: parse_num(fields[6], "ground-truth total", origin)?,
        });
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(Error::codec(origin, format!("trailing line `{extra}`")));
        }
    }
    Ok(MetricsReport {
        classes: rows,
        miou,
        accuracy,
        mean_class_accuracy,
        permutation,
        total_points,
    })
}

// ---------------------------------------------------------------------------
// File-level wrappers.
// ---------------------------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

macro_rules! file_codec {
    ($save:ident, $load:ident, $encode:ident, $decode:ident, $ty:ty) => {
        pub fn $save(path: impl Into<PathBuf>, value: &$ty) -> Result<()> {
            let path = path.into();
            write_file(&path, &$encode(value)?)
        }

        pub fn $load(path: impl Into<PathBuf>) -> Result<$ty> {
            let path = path.into();
            let bytes = read_file(&path)?;
            $decode(&bytes, &path)
        }
    };
}

file_codec!(save_point_cloud, load_point_cloud, encode_point_cloud, decode_point_cloud, PointCloud);
file_codec!(save_camera, load_camera, encode_camera, decode_camera, CameraModel);
file_codec!(save_feature_image, load_feature_image, encode_feature_image, decode_feature_image, FeatureImage);
file_codec!(save_partition, load_partition, encode_partition, decode_partition, SuperVoxelPartition);
file_codec!(save_checkpoint, load_checkpoint, encode_checkpoint, decode_checkpoint, Checkpoint);

pub fn save_metrics(path: impl Into<PathBuf>, report: &MetricsReport) -> Result<()> {
    let path = path.into();
    std::fs::write(&path, encode_metrics(report)).map_err(|e| Error::io(&path, e))
}

pub fn load_metrics(path: impl Into<PathBuf>) -> Result<MetricsReport> {
    let path = path.into();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    decode_metrics(&text, &path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate_predictions;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn origin() -> PathBuf {
        PathBuf::from("test.bin")
    }

    fn random_cloud(n: usize, labels: bool, rng: &mut ChaCha8Rng) -> PointCloud {
        let positions = (0..n)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let colors = (0..n)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let labels = labels.then(|| (0..n).map(|_| rng.gen_range(0..7)).collect());
        PointCloud::new(positions, colors, labels).unwrap()
    }

    #[test]
    fn point_cloud_round_trips_with_and_without_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for labels in [false, true] {
            let cloud = random_cloud(23, labels, &mut rng);
            let bytes = encode_point_cloud(&cloud).unwrap();
            let back = decode_point_cloud(&bytes, &origin()).unwrap();
            assert_eq!(back, cloud);
        }
    }

    #[test]
    fn empty_cloud_round_trips() {
        let cloud = PointCloud::new(vec![], vec![], None).unwrap();
        let bytes = encode_point_cloud(&cloud).unwrap();
        assert_eq!(decode_point_cloud(&bytes, &origin()).unwrap(), cloud);
    }

    #[test]
    fn bad_magic_version_truncation_and_trailing_bytes_are_distinct_errors() {
        let cloud = random_cloud(4, true, &mut ChaCha8Rng::seed_from_u64(0));
        let good = encode_point_cloud(&cloud).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode_point_cloud(&bad_magic, &origin()).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = decode_point_cloud(&bad_version, &origin()).unwrap_err().to_string();
        assert!(err.contains("unsupported format version"), "{err}");

        let err = decode_point_cloud(&good[..good.len() - 3], &origin())
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("truncated") || err.contains("expected no label block"),
            "{err}"
        );

        let mut trailing = good.clone();
        trailing.push(0);
        let err = decode_point_cloud(&trailing, &origin()).unwrap_err().to_string();
        assert!(err.contains("label block"), "{err}");
    }

    #[test]
    fn camera_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let cam = crate::geometry::tests::random_camera(&mut rng, 32, 24);
            let bytes = encode_camera(&cam).unwrap();
            let back = decode_camera(&bytes, &origin()).unwrap();
            assert_eq!(back, cam);
        }
    }

    #[test]
    fn camera_with_non_orthonormal_rotation_is_rejected() {
        let mut cam = crate::geometry::identity_camera(8.0, 8.0, 4.0, 4.0, 8, 8);
        cam.rotation[0][0] = 2.0;
        let bytes = encode_camera(&cam).unwrap();
        let err = decode_camera(&bytes, &origin()).unwrap_err().to_string();
        assert!(err.contains("decoding camera"), "{err}");
    }

    #[test]
    fn feature_image_round_trips_bitwise_for_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut image = FeatureImage::zeros(5, 4, 3);
        for v in image.data.iter_mut() {
            *v = rng.gen_range(-2.0f32..2.0) as f64;
        }
        for r in 0..5 {
            for c in 0..4 {
                image.set_valid(r, c, rng.gen_bool(0.5));
            }
        }
        let bytes = encode_feature_image(&image).unwrap();
        let back = decode_feature_image(&bytes, &origin()).unwrap();
        assert_eq!(back.data, image.data);
        assert_eq!(back.valid, image.valid);
        assert_eq!((back.height, back.width, back.dim), (5, 4, 3));
    }

    #[test]
    fn feature_image_rejects_bad_validity_byte() {
        let image = FeatureImage::zeros(2, 2, 1);
        let mut bytes = encode_feature_image(&image).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        let err = decode_feature_image(&bytes, &origin()).unwrap_err().to_string();
        assert!(err.contains("validity byte"), "{err}");
    }

    #[test]
    fn partition_round_trips() {
        let part = SuperVoxelPartition::from_labels(&[0, 1, 0, 2, 1, 2, 2]).unwrap();
        let bytes = encode_partition(&part).unwrap();
        let back = decode_partition(&bytes, &origin()).unwrap();
        assert_eq!(back.voxel_of(), part.voxel_of());
        assert_eq!(back.num_voxels(), part.num_voxels());
    }

    #[test]
    fn partition_rejects_out_of_range_and_non_canonical_ids() {
        let part = SuperVoxelPartition::from_labels(&[0, 1]).unwrap();
        let mut bytes = encode_partition(&part).unwrap();
        bytes[16] = 5;
        let err = decode_partition(&bytes, &origin()).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");

        // Ids 1, 0 are a valid labeling but not first-occurrence order.
        let mut swapped = encode_partition(&part).unwrap();
        swapped[16] = 1;
        swapped[20] = 0;
        let err = decode_partition(&swapped, &origin()).unwrap_err().to_string();
        assert!(err.contains("first-occurrence"), "{err}");
    }

    #[test]
    fn checkpoint_round_trips_every_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = PointFeatureNet::new(6, 3, 4, true, 42).unwrap();
        let mut matrix = FeatureMatrix::zeros(3, 4);
        for v in matrix.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        matrix.normalize_rows();
        let centroids = Centroids {
            matrix,
            sphere: true,
        };
        let head = Dense::kaiming(3, 4, &mut rng);
        let ck = Checkpoint {
            net,
            centroids: Some(centroids.clone()),
            head: Some(head.clone()),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes, &origin()).unwrap();
        assert_eq!(back.net.hidden, ck.net.hidden);
        assert_eq!(back.net.k, ck.net.k);
        assert_eq!(back.net.dim, ck.net.dim);
        assert_eq!(back.net.normalize_output, ck.net.normalize_output);
        for ((name_a, a), (name_b, b)) in back.net.param_tensors().iter().zip(ck.net.param_tensors()) {
            assert_eq!(*name_a, name_b);
            assert_eq!(*a, b);
        }
        assert_eq!(back.centroids.unwrap(), centroids);
        assert_eq!(back.head.unwrap(), head);
    }

    #[test]
    fn checkpoint_without_centroids_or_head_round_trips() {
        let ck = Checkpoint {
            net: PointFeatureNet::new(4, 2, 3, false, 9).unwrap(),
            centroids: None,
            head: None,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap(), &origin()).unwrap();
        assert!(back.centroids.is_none());
        assert!(back.head.is_none());
        assert_eq!(
            back.net.param_tensors()[0].1,
            ck.net.param_tensors()[0].1
        );
    }

    #[test]
    fn checkpoint_rejects_tensor_shape_mismatch() {
        let ck = Checkpoint {
            net: PointFeatureNet::new(4, 2, 3, false, 9).unwrap(),
            centroids: None,
            head: None,
        };
        let mut bytes = encode_checkpoint(&ck).unwrap();
        // Corrupt the element count of the first tensor (after magic,
        // version, three u32 hyperparameters, flag byte, tensor count,
        // name length, and the 12-byte name "input.weight").
        let count_offset = 4 + 4 + 12 + 1 + 4 + 4 + 12;
        bytes[count_offset] = 1;
        let err = decode_checkpoint(&bytes, &origin()).unwrap_err().to_string();
        assert!(err.contains("architecture needs"), "{err}");
    }

    #[test]
    fn metrics_report_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let n = 60;
            let classes = 4;
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let report = evaluate_predictions(&pred, &gt, classes).unwrap();
            let text = encode_metrics(&report);
            let back = decode_metrics(&text, &origin()).unwrap();
            assert_eq!(back, report);
            assert_eq!(encode_metrics(&back), text);
        }
    }

    #[test]
    fn metrics_report_preserves_absent_class_markers() {
        // Class 2 never occurs: its IoU must survive as None.
        let report = evaluate_predictions(&[0, 1, 0], &[0, 1, 1], 3).unwrap();
        let text = encode_metrics(&report);
        assert!(text.lines().any(|l| l.starts_with("2 - ")), "{text}");
        let back = decode_metrics(&text, &origin()).unwrap();
        assert_eq!(back.classes[2].iou, None);
        assert_eq!(back, report);
    }

    #[test]
    fn metrics_decode_rejects_malformed_input() {
        let report = evaluate_predictions(&[0, 1], &[0, 1], 2).unwrap();
        let text = encode_metrics(&report);
        let missing = text.replace("miou = ", "mean_iou = ");
        assert!(decode_metrics(&missing, &origin()).is_err());
        let truncated: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        assert!(decode_metrics(&truncated, &origin()).is_err());
    }

    #[test]
    fn file_wrappers_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(9, true, &mut ChaCha8Rng::seed_from_u64(2));
        let path = dir.path().join("scene.pdpc");
        save_point_cloud(&path, &cloud).unwrap();
        assert_eq!(load_point_cloud(&path).unwrap(), cloud);

        let missing = load_point_cloud(dir.path().join("absent.pdpc")).unwrap_err();
        assert!(missing.to_string().contains("i/o error"), "{missing}");
    }

    proptest! {
        #[test]
        fn cloud_codec_round_trips_any_finite_cloud(
            n in 0usize..30,
            seed in 0u64..500,
            with_labels in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(n, with_labels && n > 0, &mut rng);
            let bytes = encode_point_cloud(&cloud).unwrap();
            prop_assert_eq!(decode_point_cloud(&bytes, &origin()).unwrap(), cloud);
        }

        #[test]
        fn partition_codec_round_trips_any_labeling(seed in 0u64..500, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
            let part = SuperVoxelPartition::from_labels(&raw).unwrap();
            let bytes = encode_partition(&part).unwrap();
            let back = decode_partition(&bytes, &origin()).unwrap();
            prop_assert_eq!(back.voxel_of(), part.voxel_of());
        }
    }
}
