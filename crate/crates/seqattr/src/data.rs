//! Synthetic pedestrian dataset generation, manifest ingestion, and
//! augmentation.
//!
//! Every identity is a (full attribute record, texture seed) pair, so two
//! identities may share all attributes and differ only in clothing texture;
//! attribute values are rendered as colored body regions that a fixed pixel
//! predicate can decode perfectly, which keeps the learning task realizable.
//! Per-image nuisance (brightness, horizontal shift, noise) varies, the
//! attributes never do. Generation is byte-deterministic under a fixed seed.
//!
//! Images are stored in a raw container: magic `SIMG1`, u16 height, u16
//! width, u8 channels (little-endian integers), then row-major
//! channel-interleaved u8 data.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use numkit::init::mix_seed;
use numkit::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::codec::{AttributeRecord, CodecError, MappingTable};

pub const SIMG_MAGIC: &[u8; 5] = b"SIMG1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {path} row {row}: {msg}")]
    Row { path: String, row: usize, msg: String },
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("image file missing: {0}")]
    MissingImage(PathBuf),
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("synthetic spec unsatisfiable: {need} identities exceed capacity {capacity} (attribute combinations x texture variants)")]
    Unsatisfiable { need: usize, capacity: usize },
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Raw image container ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Simg {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved: index = (r * width + c) * channels + ch.
    pub bytes: Vec<u8>,
}

impl Simg {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            bytes: vec![0; height * width * channels],
        }
    }

    pub fn at(&self, r: usize, c: usize, ch: usize) -> u8 {
        self.bytes[(r * self.width + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: u8) {
        self.bytes[(r * self.width + c) * self.channels + ch] = v;
    }

    pub fn write_to<P: AsRef<Path>>(&self, path: P) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        f.write_all(SIMG_MAGIC)?;
        f.write_all(&(self.height as u16).to_le_bytes())?;
        f.write_all(&(self.width as u16).to_le_bytes())?;
        f.write_all(&[self.channels as u8])?;
        f.write_all(&self.bytes)?;
        Ok(())
    }

    pub fn read_from<P: AsRef<Path>>(path: P) -> Result<Self, DataError> {
        let show = path.as_ref().display().to_string();
        let mut f = fs::File::open(path.as_ref()).map_err(|_| {
            DataError::MissingImage(path.as_ref().to_path_buf())
        })?;
        let mut header = [0u8; 10];
        f.read_exact(&mut header).map_err(|e| DataError::Image {
            path: show.clone(),
            msg: e.to_string(),
        })?;
        if &header[0..5] != SIMG_MAGIC {
            return Err(DataError::Image {
                path: show,
                msg: "bad magic".into(),
            });
        }
        let height = u16::from_le_bytes([header[5], header[6]]) as usize;
        let width = u16::from_le_bytes([header[7], header[8]]) as usize;
        let channels = header[9] as usize;
        let mut bytes = vec![0u8; height * width * channels];
        f.read_exact(&mut bytes).map_err(|e| DataError::Image {
            path: show,
            msg: e.to_string(),
        })?;
        Ok(Self {
            height,
            width,
            channels,
            bytes,
        })
    }

    /// `[H, W, C]` tensor of values in [0, 1].
    pub fn to_unit_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("image tensor")
    }

    /// Binary PPM (P6) bytes; channels must be 3.
    pub fn to_ppm(&self) -> Result<Vec<u8>, DataError> {
        if self.channels != 3 {
            return Err(DataError::Spec(format!(
                "ppm conversion needs 3 channels, got {}",
                self.channels
            )));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.bytes);
        Ok(out)
    }
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub image: String,
    pub pid: u32,
    pub camera: u32,
    pub record: AttributeRecord,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: Split,
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.rows.iter().map(|r| r.pid).collect();
        set.into_iter().collect()
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.image)
    }

    pub fn to_csv(&self, table: &MappingTable) -> String {
        let mut out = String::from("image,pid,camera");
        for g in table.group_names() {
            out.push(',');
            out.push_str(g);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.image, row.pid, row.camera));
            for g in table.group_names() {
                out.push(',');
                out.push_str(row.record.get(g).unwrap_or(""));
            }
            out.push('\n');
        }
        out
    }
}

/// Parses and validates a manifest CSV against the mapping table. Attribute
/// values must exist in the table and every image file must be present.
pub fn load_manifest<P: AsRef<Path>>(
    path: P,
    table: &MappingTable,
    split: Split,
) -> Result<DatasetManifest, DataError> {
    let show = path.as_ref().display().to_string();
    let text = fs::read_to_string(path.as_ref()).map_err(|e| DataError::Manifest {
        path: show.clone(),
        msg: e.to_string(),
    })?;
    let base_dir = path
        .as_ref()
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Manifest {
        path: show.clone(),
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 4 || columns[0] != "image" || columns[1] != "pid" || columns[2] != "camera" {
        return Err(DataError::Manifest {
            path: show,
            msg: format!("bad header `{header}`, expected image,pid,camera,<groups...>"),
        });
    }
    let group_cols = &columns[3..];
    for g in group_cols {
        if !table.group_names().contains(g) {
            return Err(DataError::Manifest {
                path: show,
                msg: format!("column `{g}` is not a mapping-table group"),
            });
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(DataError::Row {
                path: show.clone(),
                row: lineno + 1,
                msg: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        let pid: u32 = fields[1].parse().map_err(|_| DataError::Row {
            path: show.clone(),
            row: lineno + 1,
            msg: format!("bad pid `{}`", fields[1]),
        })?;
        let camera: u32 = fields[2].parse().map_err(|_| DataError::Row {
            path: show.clone(),
            row: lineno + 1,
            msg: format!("bad camera `{}`", fields[2]),
        })?;
        let mut record = AttributeRecord::new(Some(pid));
        for (g, v) in group_cols.iter().zip(&fields[3..]) {
            if v.is_empty() {
                continue;
            }
            table.label_for(g, v).map_err(|_| DataError::Row {
                path: show.clone(),
                row: lineno + 1,
                msg: format!("column `{g}`: unknown value `{v}`"),
            })?;
            record.set(g, v);
        }
        let image = fields[0].to_string();
        if !base_dir.join(&image).is_file() {
            return Err(DataError::MissingImage(base_dir.join(&image)));
        }
        rows.push(ManifestRow {
            image,
            pid,
            camera,
            record,
        });
    }
    Ok(DatasetManifest {
        split,
        base_dir,
        rows,
    })
}

// ── Normalization statistics ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,mean,std\n");
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{i},{m:.17e},{s:.17e}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(DataError::Spec(format!("bad stats line `{line}`")));
            }
            mean.push(f[1].parse().map_err(|_| DataError::Spec("bad mean".into()))?);
            std.push(f[2].parse().map_err(|_| DataError::Spec("bad std".into()))?);
        }
        Ok(Self { mean, std })
    }
}

/// Per-channel mean and standard deviation over every image of a manifest,
/// in unit ([0, 1]) scale, accumulated in row order.
pub fn channel_stats(manifest: &DatasetManifest) -> Result<ChannelStats, DataError> {
    let mut sum = vec![0.0f64; 3];
    let mut sumsq = vec![0.0f64; 3];
    let mut count = 0usize;
    for row in &manifest.rows {
        let img = Simg::read_from(manifest.image_path(row))?;
        for px in img.bytes.chunks_exact(img.channels) {
            for (ch, &b) in px.iter().enumerate() {
                let v = b as f64 / 255.0;
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
        count += img.height * img.width;
    }
    if count == 0 {
        return Err(DataError::Spec("stats over empty manifest".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(1e-12)).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

/// `[H, W, C]` unit tensor standardized per channel.
pub fn normalize(img: &Tensor, stats: &ChannelStats) -> Tensor {
    let c = img.dim(2);
    let data: Vec<f64> = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - stats.mean[i % c]) / stats.std[i % c])
        .collect();
    Tensor::new(img.shape().to_vec(), data).expect("normalized image")
}

/// Horizontal mirror of an `[H, W, C]` tensor. An involution; labels stay
/// attached to the record, not the pixels.
pub fn flip_augment(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.dim(0), img.dim(1), img.dim(2));
    let src = img.data();
    let mut data = vec![0.0; src.len()];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                data[(r * w + col) * c + ch] = src[(r * w + (w - 1 - col)) * c + ch];
            }
        }
    }
    Tensor::new(vec![h, w, c], data).expect("flipped image")
}

// ── Synthetic generation ────────────────────────────────────────────────

/// Default six-group attribute table for synthetic pedestrians.
pub fn default_table() -> MappingTable {
    MappingTable::from_groups(&[
        ("gender", &["male", "female"]),
        ("hat", &["no", "yes"]),
        ("backpack", &["no", "yes"]),
        ("up.color", &["red", "green", "blue", "yellow"]),
        ("low.color", &["black", "navy", "gray", "brown"]),
        ("sleeve", &["short", "long"]),
    ])
    .expect("built-in table is valid")
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Texture seeds available per attribute combination; bounds identity
    /// capacity at combinations x variants.
    pub texture_variants: usize,
    pub brightness_jitter: i32,
    pub max_shift: i32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_identities: 200,
            test_identities: 200,
            images_per_identity: 20,
            height: 56,
            width: 28,
            texture_variants: 256,
            brightness_jitter: 18,
            max_shift: 2,
            noise_sigma: 4.0,
            seed: 7,
        }
    }
}

const BG: [u8; 3] = [235, 235, 235];
const HAT: [u8; 3] = [30, 30, 30];
const SKIN: [u8; 3] = [205, 175, 150];
const BACKPACK: [u8; 3] = [110, 70, 35];
const UP_COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [200, 35, 35]),
    ("green", [40, 170, 50]),
    ("blue", [35, 70, 200]),
    ("yellow", [215, 195, 40]),
];
const LOW_COLORS: [(&str, [u8; 3]); 4] = [
    ("black", [25, 25, 25]),
    ("navy", [20, 30, 90]),
    ("gray", [120, 120, 120]),
    ("brown", [100, 70, 40]),
];

fn color_of(palette: &[(&str, [u8; 3])], name: &str) -> [u8; 3] {
    palette
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .expect("palette value")
}

fn nearest<'a>(palette: &[(&'a str, [u8; 3])], px: [f64; 3]) -> &'a str {
    let mut best = palette[0].0;
    let mut best_d = f64::INFINITY;
    for (name, c) in palette {
        let d: f64 = (0..3).map(|i| (px[i] - c[i] as f64).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = name;
        }
    }
    best
}

/// Region geometry in the canonical 56x28 frame, scaled to the spec size.
struct Layout {
    h: usize,
    w: usize,
}

impl Layout {
    fn rows(&self, a: usize, b: usize) -> (usize, usize) {
        (a * self.h / 56, b * self.h / 56)
    }
    fn cols(&self, a: usize, b: usize) -> (usize, usize) {
        (a * self.w / 28, b * self.w / 28)
    }
}

fn fill(img: &mut Simg, rows: (usize, usize), cols: (isize, isize), color: [u8; 3]) {
    for r in rows.0..rows.1.min(img.height) {
        for c in cols.0.max(0)..cols.1.min(img.width as isize) {
            for ch in 0..3 {
                img.set(r, c as usize, ch, color[ch]);
            }
        }
    }
}

/// Renders one image: background, figure regions keyed by the attribute
/// record, a per-identity texture over the clothing, then per-image nuisance.
fn render(
    spec: &SyntheticSpec,
    record: &AttributeRecord,
    texture_seed: u64,
    nuisance_seed: u64,
) -> Simg {
    let lt = Layout {
        h: spec.height,
        w: spec.width,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(nuisance_seed);
    let dx = rng.random_range(-spec.max_shift..=spec.max_shift) as isize;
    let brightness = rng.random_range(-spec.brightness_jitter..=spec.brightness_jitter) as f64;

    let mut img = Simg::new(spec.height, spec.width, 3);
    for r in 0..spec.height {
        for c in 0..spec.width {
            for ch in 0..3 {
                img.set(r, c, ch, BG[ch]);
            }
        }
    }

    let sh = |range: (usize, usize)| (range.0 as isize + dx, range.1 as isize + dx);

    // hat strip
    if record.get("hat") == Some("yes") {
        fill(&mut img, lt.rows(1, 5), sh(lt.cols(9, 19)), HAT);
    }
    // head
    fill(&mut img, lt.rows(6, 11), sh(lt.cols(10, 18)), SKIN);
    // torso; sleeve length sets the block width
    let up = color_of(&UP_COLORS, record.get("up.color").unwrap_or("red"));
    let torso_cols = if record.get("sleeve") == Some("long") {
        lt.cols(5, 23)
    } else {
        lt.cols(9, 19)
    };
    let torso_rows = lt.rows(12, 32);
    fill(&mut img, torso_rows, sh(torso_cols), up);
    // backpack blob beside the torso
    if record.get("backpack") == Some("yes") {
        fill(&mut img, lt.rows(14, 30), sh(lt.cols(0, 4)), BACKPACK);
    }
    // lower body: solid block, with a background gap between the legs for men
    let low = color_of(&LOW_COLORS, record.get("low.color").unwrap_or("black"));
    let lower_rows = lt.rows(33, 50);
    fill(&mut img, lower_rows, sh(lt.cols(8, 20)), low);
    if record.get("gender") == Some("male") {
        fill(&mut img, lt.rows(36, 50), sh(lt.cols(12, 16)), BG);
    }

    // identity texture: fixed +/- modulation pattern over clothing regions
    let amp = 12.0;
    for r in torso_rows.0..lower_rows.1.min(spec.height) {
        for c in 0..spec.width {
            let is_clothing = {
                let px = [img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2)];
                px != BG && px != SKIN
            };
            if !is_clothing {
                continue;
            }
            // pattern cell fixed in figure coordinates so it shifts with dx
            let fig_c = c as isize - dx;
            let cell = mix_seed(texture_seed, ((r / 3) as u64) << 16 | ((fig_c / 3) as u64 & 0xFFFF));
            let delta = if cell & 1 == 0 { amp } else { -amp };
            for ch in 0..3 {
                let v = img.at(r, c, ch) as f64 + delta;
                img.set(r, c, ch, v.clamp(0.0, 255.0) as u8);
            }
        }
    }

    // nuisance: global brightness and per-pixel gaussian noise (Box-Muller)
    let mut gauss = || {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for i in 0..img.bytes.len() {
        let v = img.bytes[i] as f64 + brightness + gauss() * spec.noise_sigma;
        img.bytes[i] = v.clamp(0.0, 255.0) as u8;
    }
    img
}

/// Fixed inverse predicate of the renderer: recovers the attribute record
/// from pixels alone. Estimates the horizontal shift from the torso centroid
/// first, then samples each region with interior margins.
pub fn decode_pixels(img: &Simg) -> AttributeRecord {
    let lt = Layout {
        h: img.height,
        w: img.width,
    };
    let far = |px: [f64; 3], c: [u8; 3]| -> f64 {
        (0..3).map(|i| (px[i] - c[i] as f64).powi(2)).sum::<f64>()
    };
    let sample = |rows: (usize, usize), cols: (isize, isize)| -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for r in rows.0..rows.1.min(img.height) {
            for c in cols.0.max(0)..cols.1.min(img.width as isize) {
                for ch in 0..3 {
                    acc[ch] += img.at(r, c as usize, ch) as f64;
                }
                n += 1.0;
            }
        }
        if n > 0.0 {
            for a in &mut acc {
                *a /= n;
            }
        }
        acc
    };

    // shift estimate: the candidate offset under which the head region
    // (always rendered, never occluded) is most covered by figure pixels;
    // ties resolve toward the smaller magnitude
    let (hr0, hr1) = lt.rows(7, 10);
    let head_cols = lt.cols(10, 18);
    let mut dx = 0isize;
    let mut best_count = -1i64;
    for cand in [0isize, -1, 1, -2, 2, -3, 3, -4, 4] {
        let mut count = 0i64;
        for r in hr0..hr1.min(img.height) {
            let c0 = (head_cols.0 as isize + cand).max(0);
            let c1 = (head_cols.1 as isize + cand).min(img.width as isize);
            for c in c0..c1 {
                let px = [
                    img.at(r, c as usize, 0) as f64,
                    img.at(r, c as usize, 1) as f64,
                    img.at(r, c as usize, 2) as f64,
                ];
                if far(px, SKIN) < far(px, BG) {
                    count += 1;
                }
            }
        }
        if count > best_count {
            best_count = count;
            dx = cand;
        }
    }
    let sh = |range: (usize, usize)| (range.0 as isize + dx, range.1 as isize + dx);

    let mut record = AttributeRecord::new(None);

    // hat: dark strip present?
    let hat_px = sample(lt.rows(2, 4), sh(lt.cols(11, 17)));
    record.set("hat", if far(hat_px, HAT) < far(hat_px, BG) { "yes" } else { "no" });

    // torso core color
    let up_px = sample(lt.rows(24, 30), sh(lt.cols(11, 17)));
    record.set("up.color", nearest(&UP_COLORS, up_px));

    // sleeve: torso margin columns colored or background?
    let margin_px = sample(lt.rows(24, 30), sh(lt.cols(6, 8)));
    let up_ref = color_of(&UP_COLORS, record.get("up.color").unwrap());
    record.set(
        "sleeve",
        if far(margin_px, up_ref) < far(margin_px, BG) {
            "long"
        } else {
            "short"
        },
    );

    // backpack blob
    let bp_px = sample(lt.rows(18, 26), sh(lt.cols(1, 3)));
    record.set(
        "backpack",
        if far(bp_px, BACKPACK) < far(bp_px, BG) { "yes" } else { "no" },
    );

    // lower color away from the male leg gap
    let low_px = sample(lt.rows(40, 46), sh(lt.cols(8, 10)));
    record.set("low.color", nearest(&LOW_COLORS, low_px));

    // gender: leg gap background or solid?
    let gap_px = sample(lt.rows(40, 46), sh(lt.cols(13, 15)));
    let low_ref = color_of(&LOW_COLORS, record.get("low.color").unwrap());
    record.set(
        "gender",
        if far(gap_px, BG) < far(gap_px, low_ref) {
            "male"
        } else {
            "female"
        },
    );
    record
}

/// Row-wise concatenation of two manifests with the same split tag, for
/// hybrid training over corpora with different nuisance regimes. Identity
/// sets must be disjoint.
pub fn concat_manifests(
    a: &DatasetManifest,
    b: &DatasetManifest,
) -> Result<DatasetManifest, DataError> {
    if a.split != b.split {
        return Err(DataError::Spec("cannot concatenate different splits".into()));
    }
    let ids_a = a.identities();
    if b.rows.iter().any(|r| ids_a.binary_search(&r.pid).is_ok()) {
        return Err(DataError::Spec(
            "concatenated manifests must have disjoint identity sets".into(),
        ));
    }
    let mut rows = Vec::with_capacity(a.rows.len() + b.rows.len());
    for (manifest, other_base) in [(a, None), (b, Some(&b.base_dir))] {
        for row in &manifest.rows {
            let image = match other_base {
                // keep paths resolvable from a's base directory
                None => row.image.clone(),
                Some(base) => pathdiff_join(base, &a.base_dir, &row.image),
            };
            rows.push(ManifestRow {
                image,
                ..row.clone()
            });
        }
    }
    Ok(DatasetManifest {
        split: a.split,
        base_dir: a.base_dir.clone(),
        rows,
    })
}

fn pathdiff_join(src_base: &Path, dst_base: &Path, rel: &str) -> String {
    let absolute = src_base.join(rel);
    match absolute.strip_prefix(dst_base) {
        Ok(p) => p.display().to_string(),
        Err(_) => absolute.display().to_string(),
    }
}

/// A manifest with its images resident in memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Simg>,
}

pub fn load_dataset(manifest: DatasetManifest) -> Result<Dataset, DataError> {
    let images = manifest
        .rows
        .iter()
        .map(|row| Simg::read_from(manifest.image_path(row)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, images })
}

/// A stride near the golden ratio of `n`, coprime to it, so strided visits
/// spread evenly over the combination space.
fn coprime_stride(n: usize) -> usize {
    if n <= 2 {
        return 1;
    }
    let gcd = |mut a: usize, mut b: usize| {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    let mut stride = (n as f64 * 0.618).round() as usize;
    loop {
        if gcd(stride, n) == 1 {
            return stride;
        }
        stride += 1;
    }
}

/// All attribute combinations of a table, in lexicographic table order.
fn all_combinations(table: &MappingTable) -> Vec<AttributeRecord> {
    let groups = table.group_names();
    let mut combos = vec![AttributeRecord::new(None)];
    for g in groups {
        let values = table.values_of(g).unwrap().to_vec();
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for base in &combos {
            for v in &values {
                let mut r = base.clone();
                r.set(g, v);
                next.push(r);
            }
        }
        combos = next;
    }
    combos
}

pub struct GeneratedDataset {
    pub table: MappingTable,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub stats: ChannelStats,
}

/// Renders the full dataset under `out_dir`: `images/`, `train.csv`,
/// `test.csv`, `table.tsv`, `stats.csv`. Identity i maps to attribute
/// combination `i % combos` and texture seed `i / combos`, so identities
/// share attributes once they outnumber combinations. Train and test
/// identity sets are disjoint.
pub fn generate_dataset<P: AsRef<Path>>(
    spec: &SyntheticSpec,
    out_dir: P,
) -> Result<GeneratedDataset, DataError> {
    if spec.images_per_identity == 0 || spec.height < 28 || spec.width < 14 {
        return Err(DataError::Spec(
            "need images_per_identity >= 1 and at least a 28x14 canvas".into(),
        ));
    }
    let table = default_table();
    let combos = all_combinations(&table);
    let total_ids = spec.train_identities + spec.test_identities;
    let capacity = combos.len() * spec.texture_variants;
    if total_ids > capacity {
        return Err(DataError::Unsatisfiable {
            need: total_ids,
            capacity,
        });
    }
    // Both splits draw from one combination pool of about half the training
    // identity count, visited with a stride so every group's values stay
    // balanced. Identities inside each split therefore share attributes
    // (attributes alone cannot determine identity), every test combination
    // is seen in training, and texture offsets keep (combination, texture)
    // pairs unique across all identities.
    let pool = combos.len().min((spec.train_identities / 2).max(1));
    let stride = coprime_stride(combos.len());
    let combo_at = |i: usize| (i * stride) % combos.len();
    let texture_offset = spec.train_identities.div_ceil(pool);
    let test_textures = spec.test_identities.div_ceil(pool);
    if texture_offset + test_textures > spec.texture_variants {
        return Err(DataError::Unsatisfiable {
            need: total_ids,
            capacity,
        });
    }
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;

    let mut manifests = Vec::new();
    for (split, first, count) in [
        (Split::Train, 1u32, spec.train_identities),
        (
            Split::Test,
            spec.train_identities as u32 + 1,
            spec.test_identities,
        ),
    ] {
        let mut rows = Vec::new();
        for offset in 0..count {
            let pid = first + offset as u32;
            let (combo_idx, texture_idx) = match split {
                Split::Train => (combo_at(offset % pool), offset / pool),
                Split::Test => (combo_at(offset % pool), texture_offset + offset / pool),
            };
            let mut record = combos[combo_idx].clone();
            record.identity = Some(pid);
            let texture_seed = mix_seed(spec.seed, 0x7E37 + texture_idx as u64 * 1_000_003 + combo_idx as u64);
            for j in 0..spec.images_per_identity {
                let camera = (j % 2) as u32 + 1;
                let nuisance_seed = mix_seed(spec.seed, (pid as u64) << 20 | j as u64);
                let img = render(spec, &record, texture_seed, nuisance_seed);
                let name = format!("images/{pid:04}_c{camera}_{j:02}.simg");
                img.write_to(out_dir.join(&name))?;
                rows.push(ManifestRow {
                    image: name,
                    pid,
                    camera,
                    record: record.clone(),
                });
            }
        }
        manifests.push(DatasetManifest {
            split,
            base_dir: out_dir.to_path_buf(),
            rows,
        });
    }
    let test = manifests.pop().expect("two manifests");
    let train = manifests.pop().expect("two manifests");

    let stats = channel_stats(&train)?;
    fs::write(out_dir.join("train.csv"), train.to_csv(&table))?;
    fs::write(out_dir.join("test.csv"), test.to_csv(&table))?;
    fs::write(out_dir.join("stats.csv"), stats.to_csv())?;
    table.save(out_dir.join("table.tsv"))?;
    Ok(GeneratedDataset {
        table,
        train,
        test,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train_identities: 6,
            test_identities: 4,
            images_per_identity: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let g1 = generate_dataset(&tiny_spec(7), d1.path()).unwrap();
        let g2 = generate_dataset(&tiny_spec(7), d2.path()).unwrap();
        assert_eq!(
            fs::read_to_string(d1.path().join("train.csv")).unwrap(),
            fs::read_to_string(d2.path().join("train.csv")).unwrap()
        );
        for row in &g1.train.rows {
            let b1 = fs::read(g1.train.image_path(row)).unwrap();
            let b2 = fs::read(g2.train.image_path(row)).unwrap();
            assert_eq!(b1, b2, "image bytes differ for {}", row.image);
        }
        assert_eq!(g1.stats, g2.stats);
    }

    #[test]
    fn row_counts_and_disjoint_identities() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_dataset(&tiny_spec(3), dir.path()).unwrap();
        assert_eq!(g.train.rows.len(), 6 * 3);
        assert_eq!(g.test.rows.len(), 4 * 3);
        let train_ids = g.train.identities();
        let test_ids = g.test.identities();
        assert!(train_ids.iter().all(|id| !test_ids.contains(id)));
        // two camera ids present
        let cams: BTreeSet<u32> = g.train.rows.iter().map(|r| r.camera).collect();
        assert_eq!(cams.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn split_design_shares_combinations_and_covers_values() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_identities: 20,
            test_identities: 14,
            images_per_identity: 1,
            seed: 3,
            ..Default::default()
        };
        let g = generate_dataset(&spec, dir.path()).unwrap();
        let table = default_table();
        let combo_key = |r: &AttributeRecord| -> String {
            table
                .group_names()
                .iter()
                .map(|g| r.get(g).unwrap().to_string())
                .collect::<Vec<_>>()
                .join("|")
        };
        let train_combos: BTreeSet<String> =
            g.train.rows.iter().map(|r| combo_key(&r.record)).collect();
        let test_combos: BTreeSet<String> =
            g.test.rows.iter().map(|r| combo_key(&r.record)).collect();
        // every test combination was seen in training
        assert!(test_combos.is_subset(&train_combos));
        // identities share attributes inside the train split (pool of 10
        // combinations over 20 identities)
        assert!(train_combos.len() < g.train.identities().len());
        // every attribute group varies in the train split
        for group in table.group_names() {
            let values: BTreeSet<&str> = g
                .train
                .rows
                .iter()
                .map(|r| r.record.get(group).unwrap())
                .collect();
            assert!(values.len() >= 2, "group {group} never varies");
        }
    }

    #[test]
    fn renderer_attributes_are_pixel_decodable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_identities: 40,
            test_identities: 10,
            images_per_identity: 4,
            seed: 11,
            ..Default::default()
        };
        let g = generate_dataset(&spec, dir.path()).unwrap();
        for row in g.train.rows.iter().chain(&g.test.rows) {
            let img = Simg::read_from(g.train.base_dir.join(&row.image)).unwrap();
            let decoded = decode_pixels(&img);
            assert!(
                decoded.same_attributes(&row.record),
                "{}: decoded {decoded} vs truth {}",
                row.image,
                row.record
            );
        }
    }

    #[test]
    fn hat_strip_pixels_follow_attribute() {
        let spec = tiny_spec(5);
        let with_hat = AttributeRecord::new(None)
            .with("gender", "female")
            .with("hat", "yes")
            .with("backpack", "no")
            .with("up.color", "blue")
            .with("low.color", "gray")
            .with("sleeve", "short");
        let mut without_hat = with_hat.clone();
        without_hat.set("hat", "no");
        let img_hat = render(&spec, &with_hat, 1, 2);
        let img_plain = render(&spec, &without_hat, 1, 2);
        let dark = |img: &Simg| -> f64 {
            let mut acc = 0.0;
            for r in 1..5 {
                for c in 9..19 {
                    acc += img.at(r, c, 0) as f64;
                }
            }
            acc / 40.0
        };
        assert!(dark(&img_hat) < 90.0, "hat region should be dark");
        assert!(dark(&img_plain) > 180.0, "no-hat region should be light");
    }

    #[test]
    fn unsatisfiable_spec_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_identities: 200,
            test_identities: 200,
            texture_variants: 1, // capacity = 256 combos
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&spec, dir.path()),
            Err(DataError::Unsatisfiable { need: 400, capacity: 256 })
        ));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_dataset(&tiny_spec(9), dir.path()).unwrap();
        let loaded = load_manifest(dir.path().join("train.csv"), &g.table, Split::Train).unwrap();
        assert_eq!(loaded.rows.len(), g.train.rows.len());
        for (a, b) in loaded.rows.iter().zip(&g.train.rows) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.pid, b.pid);
            assert_eq!(a.camera, b.camera);
            assert!(a.record.same_attributes(&b.record));
        }

        // corrupt one value: error names row and column
        let text = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        let bad = text.replacen("red", "purpple", 1).replacen("green", "purpple", 1)
            .replacen("blue", "purpple", 1).replacen("yellow", "purpple", 1);
        fs::write(dir.path().join("bad.csv"), &bad).unwrap();
        let err = load_manifest(dir.path().join("bad.csv"), &g.table, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("purpple") && msg.contains("row"), "{msg}");

        // missing image file
        let victim = g.train.image_path(&g.train.rows[0]);
        fs::remove_file(&victim).unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("train.csv"), &g.table, Split::Train),
            Err(DataError::MissingImage(_))
        ));
    }

    #[test]
    fn hybrid_manifests_concatenate_with_disjoint_identities() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = generate_dataset(&tiny_spec(1), d1.path()).unwrap();
        // different nuisance regime, disjoint seed
        let spec_b = SyntheticSpec {
            brightness_jitter: 5,
            noise_sigma: 1.0,
            ..tiny_spec(2)
        };
        let b = generate_dataset(&spec_b, d2.path()).unwrap();
        // identity ranges coincide, so direct concat must fail
        assert!(concat_manifests(&a.train, &b.train).is_err());
        // shift b's identities out of the way
        let mut b_shifted = b.train.clone();
        for row in &mut b_shifted.rows {
            row.pid += 1000;
            row.record.identity = Some(row.pid);
        }
        let merged = concat_manifests(&a.train, &b_shifted).unwrap();
        assert_eq!(merged.rows.len(), a.train.rows.len() + b.train.rows.len());
        assert_eq!(
            merged.identities().len(),
            a.train.identities().len() + b.train.identities().len()
        );
        // every merged image path resolves
        for row in &merged.rows {
            assert!(merged.image_path(row).is_file(), "{}", row.image);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let spec = tiny_spec(2);
        let record = decode_pixels(&render(&spec, &all_combinations(&default_table())[17], 3, 4));
        let img = render(&spec, &record, 3, 4).to_unit_tensor();
        let back = flip_augment(&flip_augment(&img));
        assert_eq!(img, back);
        // flipping actually changes the pixels
        assert_ne!(img, flip_augment(&img));
    }

    #[test]
    fn simg_round_trip_and_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Simg::new(4, 3, 3);
        img.set(1, 2, 0, 200);
        img.set(0, 0, 2, 9);
        let path = dir.path().join("x.simg");
        img.write_to(&path).unwrap();
        let back = Simg::read_from(&path).unwrap();
        assert_eq!(img, back);
        let ppm = back.to_ppm().unwrap();
        assert!(ppm.starts_with(b"P6\n3 4\n255\n"));
        assert_eq!(ppm.len(), 11 + 36);
    }

    #[test]
    fn stats_round_trip() {
        let s = ChannelStats {
            mean: vec![0.5, 0.25, 0.125],
            std: vec![0.1, 0.2, 0.3],
        };
        let back = ChannelStats::parse(&s.to_csv()).unwrap();
        for i in 0..3 {
            assert!((s.mean[i] - back.mean[i]).abs() < 1e-15);
            assert!((s.std[i] - back.std[i]).abs() < 1e-15);
        }
    }
}
