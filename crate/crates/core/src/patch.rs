//! Patch extraction, extreme-event classification, temporal splitting and
//! the AQG1 sample file format.
//!
//! # AQG1 layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic    "AQG1"                 4 bytes
//! version  u32 = 1
//! C        u32   input channels
//! px py pz u32 × 3
//! count    u64
//! count × {
//!     species_id u32, kind u8, time_index u32, patch_row u32, patch_col u32, extreme u8
//!     input  f32 × C·px·py·pz   (C order: channel, x, y, z)
//!     target f32 × px·py·pz
//! }
//! ```
//!
//! A sidecar `<file>.manifest.json` carries the channel names, provenance
//! (normalization parameters, thresholds, generator settings) and the
//! SHA-256 of the `.aqg` bytes.

use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Axis, GridError, SpeciesField, SpeciesKind};
use crate::synth::{keyed_rng, StreamTag, SynthConfig};
use crate::xform::NormParams;

pub const AQG_MAGIC: &[u8; 4] = b"AQG1";
pub const AQG_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 * 5 + 8;
const META_LEN: usize = 4 + 1 + 4 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error(
        "axis {axis} of size {size} cannot be split into {parts} equal patches; \
         the extent must be divisible by the patch count (e.g. 232 / 4 = 58 and 396 / 6 = 66)"
    )]
    Indivisible { axis: Axis, size: usize, parts: usize },
    #[error("patch depth {depth} is outside 1..={levels} available levels")]
    BadDepth { depth: usize, levels: usize },
    #[error("{timesteps} timesteps cannot be cut {num}/{den} for train+validation versus test; need at least {den} or a custom cut")]
    TooFewTimesteps { timesteps: usize, num: u32, den: u32 },
    #[error("invalid split policy: {0}")]
    BadPolicy(String),
    #[error("bad magic at byte offset 0: expected \"AQG1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} at byte offset 4")]
    BadVersion { found: u32 },
    #[error("file truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("unknown species kind code {code} at byte offset {offset}")]
    UnknownKind { offset: u64, code: u8 },
    #[error("invalid header at byte offset {offset}: {reason}")]
    BadHeader { offset: u64, reason: String },
    #[error("trailing bytes after the last sample at byte offset {offset}")]
    TrailingBytes { offset: u64 },
    #[error("checksum mismatch: manifest says {expected}, file hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("manifest disagrees with file: {0}")]
    ManifestMismatch(String),
    #[error("sample shape mismatch: {0}")]
    Shape(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchLayout {
    pub rows: usize,
    pub cols: usize,
    /// Lowest levels kept in each patch.
    pub depth: usize,
}

impl Default for PatchLayout {
    fn default() -> Self {
        Self { rows: 4, cols: 6, depth: 16 }
    }
}

impl PatchLayout {
    /// Patch extent for a field of shape `dims`.
    pub fn patch_dims(&self, dims: [usize; 3]) -> Result<[usize; 3], PatchError> {
        for (axis, size, parts) in [(Axis::X, dims[0], self.rows), (Axis::Y, dims[1], self.cols)] {
            if parts == 0 || size % parts != 0 {
                return Err(PatchError::Indivisible { axis, size, parts });
            }
        }
        if self.depth == 0 || self.depth > dims[2] {
            return Err(PatchError::BadDepth { depth: self.depth, levels: dims[2] });
        }
        Ok([dims[0] / self.rows, dims[1] / self.cols, self.depth])
    }

    pub fn patches_per_field(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: u32,
    pub col: u32,
    pub field: SpeciesField,
}

/// Tile the horizontal domain into `rows × cols` non-overlapping patches of
/// the lowest `depth` levels, row-major.
pub fn extract_patches(field: &SpeciesField, layout: &PatchLayout) -> Result<Vec<Patch>, PatchError> {
    let [px, py, pz] = layout.patch_dims(field.dims)?;
    let mut out = Vec::with_capacity(layout.patches_per_field());
    for row in 0..layout.rows {
        for col in 0..layout.cols {
            let sub = SpeciesField::from_fn([px, py, pz], field.species_id, field.kind, |i, j, k| {
                field.get(row * px + i, col * py + j, k)
            });
            out.push(Patch { row: row as u32, col: col as u32, field: sub });
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`] over the kept levels.
pub fn assemble_patches(patches: &[Patch], layout: &PatchLayout) -> Result<SpeciesField, PatchError> {
    let first = patches.first().ok_or_else(|| PatchError::Shape("no patches to assemble".into()))?;
    if patches.len() != layout.patches_per_field() {
        return Err(PatchError::Shape(format!("expected {} patches, got {}", layout.patches_per_field(), patches.len())));
    }
    let [px, py, pz] = first.field.dims;
    let mut out = SpeciesField::filled([px * layout.rows, py * layout.cols, pz], 0.0, first.field.species_id, first.field.kind);
    for p in patches {
        for i in 0..px {
            for j in 0..py {
                for k in 0..pz {
                    out.set(p.row as usize * px + i, p.col as usize * py + j, k, p.field.get(i, j, k));
                }
            }
        }
    }
    Ok(out)
}

/// Air-quality thresholds marking a patch as extreme ("moderate" or worse).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub ozone_ppm: f64,
    pub pm25_ugm3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { ozone_ppm: 0.055, pm25_ugm3: 12.1 }
    }
}

impl Thresholds {
    pub fn for_kind(&self, kind: SpeciesKind) -> f64 {
        match kind {
            SpeciesKind::Ozone => self.ozone_ppm,
            SpeciesKind::Pm => self.pm25_ugm3,
        }
    }
}

/// A patch is extreme when its maximum meets or exceeds the threshold for
/// its kind. Must be applied in physical units. For particulate species the
/// species' own field stands in for total PM2.5.
pub fn classify_extreme(patch: &SpeciesField, thr: &Thresholds) -> bool {
    patch.max_value() >= thr.for_kind(patch.kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub species_id: u32,
    pub time_index: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPolicy {
    /// The first `trainval_num / trainval_den` of timesteps feed training and
    /// validation; the rest is the test set.
    pub trainval_num: u32,
    pub trainval_den: u32,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        // Four of seven days for training, the last three for testing.
        Self { trainval_num: 4, trainval_den: 7, val_fraction: 0.2, seed: 20200901 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Train/validation sizes for `n` samples: `floor(n · (1 - val_fraction))`
/// go to training.
pub fn split_counts(n: usize, val_fraction: f64) -> (usize, usize) {
    let train = ((n as f64) * (1.0 - val_fraction) + 1e-9).floor() as usize;
    (train, n - train)
}

/// Number of leading timesteps used for training and validation.
pub fn trainval_timesteps(timesteps: usize, policy: &SplitPolicy) -> Result<usize, PatchError> {
    if policy.trainval_den == 0 || policy.trainval_num > policy.trainval_den {
        return Err(PatchError::BadPolicy(format!("cut {}/{}", policy.trainval_num, policy.trainval_den)));
    }
    if !(0.0..1.0).contains(&policy.val_fraction) {
        return Err(PatchError::BadPolicy(format!("val_fraction {}", policy.val_fraction)));
    }
    if timesteps < policy.trainval_den as usize {
        return Err(PatchError::TooFewTimesteps { timesteps, num: policy.trainval_num, den: policy.trainval_den });
    }
    let den = policy.trainval_den as usize;
    Ok((timesteps * policy.trainval_num as usize + den / 2) / den)
}

/// Temporal cut followed by a seeded random train/validation partition of
/// the early samples. Each output list is sorted.
pub fn split_dataset(keys: &[SampleKey], policy: &SplitPolicy) -> Result<Split, PatchError> {
    let mut times: Vec<u32> = keys.iter().map(|k| k.time_index).collect();
    times.sort_unstable();
    times.dedup();
    let cut = trainval_timesteps(times.len(), policy)?;
    let first_test_time = times.get(cut).copied().unwrap_or(u32::MAX);

    let (mut trainval, test): (Vec<usize>, Vec<usize>) = (0..keys.len()).partition(|&i| keys[i].time_index < first_test_time);
    let mut rng = keyed_rng(policy.seed, u32::MAX - 1, StreamTag::Split);
    trainval.shuffle(&mut rng);
    let (n_train, _) = split_counts(trainval.len(), policy.val_fraction);
    let mut val = trainval.split_off(n_train);
    let mut train = trainval;
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub species_id: u32,
    pub kind: SpeciesKind,
    pub time_index: u32,
    pub patch_row: u32,
    pub patch_col: u32,
    pub extreme: bool,
}

impl SampleMeta {
    pub fn key(&self) -> SampleKey {
        SampleKey { species_id: self.species_id, time_index: self.time_index, row: self.patch_row, col: self.patch_col }
    }
}

/// A set of training pairs: input channels `[C, px, py, pz]` and a
/// root-space target `[px, py, pz]` per sample.
///
/// Channel 0 is stored per sample. Channels `1..C` (wind, layer thickness)
/// are usually shared by every species and timestep of a patch position, so
/// identical blocks are stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    channel_names: Vec<String>,
    dims: [usize; 3],
    metas: Vec<SampleMeta>,
    concentration: Vec<f32>,
    targets: Vec<f32>,
    aux_blocks: Vec<Arc<[f32]>>,
    aux_hashes: Vec<u64>,
    aux_of: Vec<u32>,
}

fn block_hash(values: &[f32]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl PatchDataset {
    pub fn new(channel_names: Vec<String>, dims: [usize; 3]) -> Self {
        assert!(!channel_names.is_empty(), "a dataset needs at least the concentration channel");
        Self {
            channel_names,
            dims,
            metas: Vec::new(),
            concentration: Vec::new(),
            targets: Vec::new(),
            aux_blocks: Vec::new(),
            aux_hashes: Vec::new(),
            aux_of: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn metas(&self) -> &[SampleMeta] {
        &self.metas
    }

    pub fn meta(&self, i: usize) -> &SampleMeta {
        &self.metas[i]
    }

    /// Store a block of the shared channels, returning its id. Identical
    /// blocks get the same id.
    pub fn intern_aux(&mut self, block: &[f32]) -> Result<u32, PatchError> {
        let expected = (self.channels() - 1) * self.voxels();
        if block.len() != expected {
            return Err(PatchError::Shape(format!("aux block has {} values, expected {expected}", block.len())));
        }
        let hash = block_hash(block);
        let found = (0..self.aux_blocks.len()).find(|&i| self.aux_hashes[i] == hash && self.aux_blocks[i].as_ref() == block);
        if let Some(id) = found {
            return Ok(id as u32);
        }
        self.aux_blocks.push(Arc::from(block));
        self.aux_hashes.push(hash);
        Ok((self.aux_blocks.len() - 1) as u32)
    }

    pub fn push(&mut self, meta: SampleMeta, concentration: &[f32], aux_id: u32, target: &[f32]) -> Result<(), PatchError> {
        let n = self.voxels();
        if concentration.len() != n || target.len() != n {
            return Err(PatchError::Shape(format!(
                "sample has {} / {} values, expected {n}",
                concentration.len(),
                target.len()
            )));
        }
        if self.channels() > 1 && aux_id as usize >= self.aux_blocks.len() {
            return Err(PatchError::Shape(format!("unknown aux block {aux_id}")));
        }
        self.metas.push(meta);
        self.concentration.extend_from_slice(concentration);
        self.targets.extend_from_slice(target);
        self.aux_of.push(aux_id);
        Ok(())
    }

    pub fn concentration(&self, i: usize) -> &[f32] {
        let n = self.voxels();
        &self.concentration[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        let n = self.voxels();
        &self.targets[i * n..(i + 1) * n]
    }

    /// Write all `C` input channels of sample `i` into `out`.
    pub fn write_input(&self, i: usize, out: &mut [f32]) {
        let n = self.voxels();
        out[..n].copy_from_slice(self.concentration(i));
        if self.channels() > 1 {
            out[n..self.channels() * n].copy_from_slice(&self.aux_blocks[self.aux_of[i] as usize]);
        }
    }

    pub fn input(&self, i: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.channels() * self.voxels()];
        self.write_input(i, &mut out);
        out
    }

    /// Samples at `indices`, sharing the auxiliary blocks.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.voxels();
        let mut out = Self {
            channel_names: self.channel_names.clone(),
            dims: self.dims,
            metas: Vec::with_capacity(indices.len()),
            concentration: Vec::with_capacity(indices.len() * n),
            targets: Vec::with_capacity(indices.len() * n),
            aux_blocks: self.aux_blocks.clone(),
            aux_hashes: self.aux_hashes.clone(),
            aux_of: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            out.metas.push(self.metas[i]);
            out.concentration.extend_from_slice(self.concentration(i));
            out.targets.extend_from_slice(self.target(i));
            out.aux_of.push(self.aux_of[i]);
        }
        out
    }

    pub fn count_extreme(&self) -> usize {
        self.metas.iter().filter(|m| m.extreme).count()
    }
}

/// Sidecar manifest of an AQG1 file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub channel_names: Vec<String>,
    pub patch_dims: [usize; 3],
    pub sample_count: u64,
    pub extreme_count: u64,
    pub checksum_sha256: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// Where a dataset came from. Every field is optional so hand-built
/// datasets can be written too.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_n: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_params: Option<NormParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Write `ds` to `path` plus its sidecar manifest, returning the manifest.
pub fn write_aqg(ds: &PatchDataset, path: &Path, provenance: Provenance) -> Result<Manifest, PatchError> {
    let file = File::create(path)?;
    let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };
    w.write_all(AQG_MAGIC)?;
    w.write_all(&AQG_VERSION.to_le_bytes())?;
    for v in [ds.channels(), ds.dims[0], ds.dims[1], ds.dims[2]] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    let mut input = vec![0.0f32; ds.channels() * ds.voxels()];
    for i in 0..ds.len() {
        let m = &ds.metas[i];
        w.write_all(&m.species_id.to_le_bytes())?;
        w.write_all(&[m.kind.code()])?;
        w.write_all(&m.time_index.to_le_bytes())?;
        w.write_all(&m.patch_row.to_le_bytes())?;
        w.write_all(&m.patch_col.to_le_bytes())?;
        w.write_all(&[m.extreme as u8])?;
        ds.write_input(i, &mut input);
        write_f32s(&mut w, &input)?;
        write_f32s(&mut w, ds.target(i))?;
    }
    w.flush()?;
    let checksum = hex::encode(w.hasher.finalize());
    let manifest = Manifest {
        format: "AQG1".into(),
        version: AQG_VERSION,
        channel_names: ds.channel_names.clone(),
        patch_dims: ds.dims,
        sample_count: ds.len() as u64,
        extreme_count: ds.count_extreme() as u64,
        checksum_sha256: checksum,
        provenance,
    };
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reader that tracks its byte offset and hashes what it consumes.
struct TrackingReader<R> {
    inner: R,
    offset: u64,
    hasher: Sha256,
}

impl<R: Read> TrackingReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), PatchError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => return Err(PatchError::Truncated { offset: self.offset + got as u64, what }),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.hasher.update(&buf[..]);
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, PatchError> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PatchError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, PatchError> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, out: &mut [f32], scratch: &mut Vec<u8>, what: &'static str) -> Result<(), PatchError> {
        scratch.resize(out.len() * 4, 0);
        self.fill(scratch, what)?;
        for (v, c) in out.iter_mut().zip(scratch.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AqgFile {
    pub dataset: PatchDataset,
    pub manifest: Option<Manifest>,
}

/// Read an AQG1 file. When the sidecar manifest exists, the checksum and
/// counts are verified against it and its channel names are used.
pub fn read_aqg(path: &Path) -> Result<AqgFile, PatchError> {
    let manifest: Option<Manifest> = match std::fs::read_to_string(manifest_path(path)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut r = TrackingReader { inner: BufReader::new(File::open(path)?), offset: 0, hasher: Sha256::new() };

    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != AQG_MAGIC {
        return Err(PatchError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != AQG_VERSION {
        return Err(PatchError::BadVersion { found: version });
    }
    let channels = r.u32("channel count")? as usize;
    let dims = [r.u32("px")? as usize, r.u32("py")? as usize, r.u32("pz")? as usize];
    let count = r.u64("sample count")?;
    if channels == 0 || dims.contains(&0) {
        return Err(PatchError::BadHeader { offset: 8, reason: format!("channels {channels}, dims {dims:?}") });
    }
    debug_assert_eq!(r.offset, HEADER_LEN);

    let names = match &manifest {
        Some(m) => {
            if m.channel_names.len() != channels || m.patch_dims != dims || m.sample_count != count {
                return Err(PatchError::ManifestMismatch(format!(
                    "header says {channels} channels, {dims:?}, {count} samples; manifest says {} channels, {:?}, {} samples",
                    m.channel_names.len(),
                    m.patch_dims,
                    m.sample_count
                )));
            }
            m.channel_names.clone()
        }
        None => (0..channels).map(|c| format!("channel_{c}")).collect(),
    };

    let mut ds = PatchDataset::new(names, dims);
    let n = ds.voxels();
    let mut input = vec![0.0f32; channels * n];
    let mut target = vec![0.0f32; n];
    let mut scratch = Vec::new();
    for _ in 0..count {
        let species_id = r.u32("species_id")?;
        let kind_offset = r.offset;
        let code = r.u8("kind")?;
        let kind = SpeciesKind::try_from(code).map_err(|_| PatchError::UnknownKind { offset: kind_offset, code })?;
        let time_index = r.u32("time_index")?;
        let patch_row = r.u32("patch_row")?;
        let patch_col = r.u32("patch_col")?;
        let extreme = r.u8("extreme flag")? != 0;
        r.f32s(&mut input, &mut scratch, "input channels")?;
        r.f32s(&mut target, &mut scratch, "target")?;
        let aux = if channels > 1 { ds.intern_aux(&input[n..])? } else { 0 };
        let meta = SampleMeta { species_id, kind, time_index, patch_row, patch_col, extreme };
        ds.push(meta, &input[..n], aux, &target)?;
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(PatchError::TrailingBytes { offset: r.offset });
    }
    let actual = hex::encode(r.hasher.finalize());
    if let Some(m) = &manifest {
        if m.checksum_sha256 != actual {
            return Err(PatchError::ChecksumMismatch { expected: m.checksum_sha256.clone(), actual });
        }
    }
    Ok(AqgFile { dataset: ds, manifest })
}

/// Size in bytes of one serialized sample.
pub fn sample_record_len(channels: usize, dims: [usize; 3]) -> u64 {
    let n: usize = dims.iter().product();
    (META_LEN + 4 * (channels + 1) * n) as u64
}

pub fn header_len() -> u64 {
    HEADER_LEN
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> SpeciesField {
        SpeciesField::from_fn(dims, 3, SpeciesKind::Pm, |i, j, k| (i * 1000 + j * 10 + k) as f64)
    }

    #[test]
    fn desk_grid_gives_24_patches() {
        let f = ramp([128, 192, 16]);
        let patches = extract_patches(&f, &PatchLayout::default()).unwrap();
        assert_eq!(patches.len(), 24);
        assert!(patches.iter().all(|p| p.field.dims == [32, 32, 16]));
    }

    #[test]
    fn full_scale_patch_extent() {
        assert_eq!(PatchLayout::default().patch_dims([58 * 4, 66 * 6, 64]).unwrap(), [58, 66, 16]);
    }

    #[test]
    fn reassembly_is_identity_and_deep_fields_are_cut() {
        let layout = PatchLayout { rows: 2, cols: 3, depth: 4 };
        let f = ramp([6, 9, 7]);
        let patches = extract_patches(&f, &layout).unwrap();
        let back = assemble_patches(&patches, &layout).unwrap();
        assert_eq!(back.dims, [6, 9, 4]);
        for i in 0..6 {
            for j in 0..9 {
                for k in 0..4 {
                    assert_eq!(back.get(i, j, k), f.get(i, j, k));
                }
            }
        }
    }

    #[test]
    fn indivisible_grid_names_requirement() {
        let f = ramp([128, 192, 16]);
        let err = extract_patches(&f, &PatchLayout { rows: 5, ..Default::default() }).unwrap_err();
        assert!(matches!(err, PatchError::Indivisible { axis: Axis::X, size: 128, parts: 5 }));
        assert!(err.to_string().contains("232 / 4 = 58"));
    }

    #[test]
    fn thresholds_are_inclusive() {
        let thr = Thresholds::default();
        let patch = |kind, max| {
            let mut f = SpeciesField::filled([2, 2, 1], 0.01, 0, kind);
            f.values[3] = max;
            f
        };
        assert!(classify_extreme(&patch(SpeciesKind::Ozone, 0.055), &thr));
        assert!(!classify_extreme(&patch(SpeciesKind::Ozone, 0.0549), &thr));
        assert!(classify_extreme(&patch(SpeciesKind::Pm, 12.1), &thr));
        assert!(!classify_extreme(&patch(SpeciesKind::Pm, 12.09), &thr));
    }

    fn keys(timesteps: u32, patches: u32, species: u32) -> Vec<SampleKey> {
        let mut out = Vec::new();
        for species_id in 0..species {
            for time_index in 0..timesteps {
                for p in 0..patches {
                    out.push(SampleKey { species_id, time_index, row: p / 6, col: p % 6 });
                }
            }
        }
        out
    }

    #[test]
    fn seven_timestep_split() {
        let k = keys(7, 24, 1);
        let split = split_dataset(&k, &SplitPolicy::default()).unwrap();
        assert_eq!(split.test.len(), 72);
        assert!(split.test.iter().all(|&i| k[i].time_index >= 4));
        assert_eq!(split.train.len() + split.val.len(), 96);
        assert_eq!(split_counts(96, 0.2), (split.train.len(), split.val.len()));
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..k.len()).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic_and_seeded() {
        let k = keys(10, 24, 2);
        let a = split_dataset(&k, &SplitPolicy::default()).unwrap();
        assert_eq!(a, split_dataset(&k, &SplitPolicy::default()).unwrap());
        let b = split_dataset(&k, &SplitPolicy { seed: 3, ..Default::default() }).unwrap();
        assert_ne!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_needs_enough_timesteps() {
        let err = split_dataset(&keys(6, 4, 1), &SplitPolicy::default()).unwrap_err();
        assert!(matches!(err, PatchError::TooFewTimesteps { timesteps: 6, .. }));
        let custom = SplitPolicy { trainval_num: 1, trainval_den: 2, ..Default::default() };
        let split = split_dataset(&keys(6, 4, 1), &custom).unwrap();
        assert_eq!(split.test.len(), 12);
    }

    #[test]
    fn documented_full_scale_split_counts() {
        // 123,192 patches per day; four days split 80/20.
        assert_eq!(split_counts(4 * 123_192, 0.2), (394_214, 98_554));
    }

    fn small_dataset(count: usize) -> PatchDataset {
        let dims = [2, 3, 2];
        let names = vec!["concentration".into(), "wind_u".into()];
        let mut ds = PatchDataset::new(names, dims);
        let shared = ds.intern_aux(&[0.5; 12]).unwrap();
        for s in 0..count {
            let conc: Vec<f32> = (0..12).map(|v| (v * (s + 1)) as f32 * 0.01).collect();
            let target: Vec<f32> = (0..12).map(|v| -(v as f32) / 12.0).collect();
            let meta = SampleMeta {
                species_id: s as u32,
                kind: if s % 2 == 0 { SpeciesKind::Ozone } else { SpeciesKind::Pm },
                time_index: 7,
                patch_row: 1,
                patch_col: 2,
                extreme: s % 3 == 0,
            };
            ds.push(meta, &conc, shared, &target).unwrap();
        }
        ds
    }

    #[test]
    fn aux_blocks_are_shared() {
        let mut ds = small_dataset(3);
        assert_eq!(ds.intern_aux(&[0.5; 12]).unwrap(), 0);
        assert_eq!(ds.intern_aux(&[0.25; 12]).unwrap(), 1);
        assert_eq!(&ds.input(1)[12..], &[0.5; 12]);
    }

    #[test]
    fn aqg_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.aqg");
        let ds = small_dataset(4);
        let m = write_aqg(&ds, &path, Provenance { root_n: Some(3), ..Default::default() }).unwrap();
        assert_eq!(m.sample_count, 4);
        let back = read_aqg(&path).unwrap();
        assert_eq!(back.dataset, ds);
        assert_eq!(back.manifest.unwrap(), m);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, header_len() + 4 * sample_record_len(2, [2, 3, 2]));
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.aqg");
        let ds = PatchDataset::new(vec!["concentration".into()], [4, 4, 2]);
        write_aqg(&ds, &path, Provenance::default()).unwrap();
        let back = read_aqg(&path).unwrap().dataset;
        assert!(back.is_empty());
        assert_eq!(back.dims(), [4, 4, 2]);
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.aqg");
        write_aqg(&small_dataset(2), &path, Provenance::default()).unwrap();
        std::fs::remove_file(manifest_path(&path)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = header_len() + sample_record_len(2, [2, 3, 2]) + 7;
        std::fs::write(&path, &bytes[..cut as usize]).unwrap();
        match read_aqg(&path).unwrap_err() {
            PatchError::Truncated { offset, what } => {
                assert_eq!(offset, cut);
                assert_eq!(what, "time_index");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.aqg");
        write_aqg(&small_dataset(2), &path, Provenance::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(read_aqg(&path).unwrap_err(), PatchError::ChecksumMismatch { .. }));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(read_aqg(&path).unwrap_err(), PatchError::BadMagic { .. }));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(read_aqg(&path).unwrap_err(), PatchError::BadVersion { found: 9 }));

        let mut bad_kind = bytes;
        bad_kind[header_len() as usize + 4] = 7;
        std::fs::write(&path, &bad_kind).unwrap();
        std::fs::remove_file(manifest_path(&path)).unwrap();
        assert!(matches!(read_aqg(&path).unwrap_err(), PatchError::UnknownKind { offset: 36, code: 7 }));
    }
}
