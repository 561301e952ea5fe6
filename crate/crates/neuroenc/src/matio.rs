//! Binary matrix container and JSON manifest I/O.
//!
//! Every stage exchanges dense numeric bulk through the `NMAT1` container:
//! a fixed 32-byte little-endian header followed by a row-major f32 payload.
//! Metadata (story manifests, label sets, region assignments) travels as
//! JSON so experiment configuration stays auditable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NMAT1\0\0\0";
const VERSION: u32 = 1;
const DTYPE_F32_LE: u32 = 0;
/// Fixed header size: 8-byte magic + version + dtype + rows + cols.
pub const HEADER_BYTES: usize = 32;

/// Dense row-major f32 matrix, the universal exchange unit between stages.
///
/// Doubles are narrowed to f32 on construction; the on-disk payload is
/// exactly `rows * cols * 4` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixContainer {
    data: Array2<f32>,
}

impl MatrixContainer {
    /// Wrap an f32 matrix. Fails on empty dimensions or non-finite values.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::EmptyDimension);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { data })
    }

    /// Narrow an f64 matrix to the container's f32 storage.
    pub fn from_f64(data: &Array2<f64>) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32))
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    /// Widen to f64 for numeric work.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Write a matrix to `path` in the NMAT1 format.
pub fn write_matrix<P: AsRef<Path>>(path: P, matrix: &MatrixContainer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32_LE.to_le_bytes())?;
    w.write_all(&(matrix.rows() as u64).to_le_bytes())?;
    w.write_all(&(matrix.cols() as u64).to_le_bytes())?;
    // Row-major traversal matches ndarray's standard layout.
    for v in matrix.data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience: narrow an f64 matrix and write it.
pub fn write_matrix_f64<P: AsRef<Path>>(path: P, matrix: &Array2<f64>) -> Result<()> {
    write_matrix(path, &MatrixContainer::from_f64(matrix)?)
}

/// Read an NMAT1 file, validating magic, version, dtype, and payload length.
pub fn read_matrix<P: AsRef<Path>>(path: P) -> Result<MatrixContainer> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = read_u32(&mut r)?;
    if dtype != DTYPE_F32_LE {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyDimension);
    }
    let expected = rows as u64 * cols as u64 * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            got: payload.len() as u64,
        });
    }
    let values: Vec<f32> = payload[..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::dim(format!("payload shape: {e}")))?;
    MatrixContainer::new(data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Per-story stimulus timing: word onsets, scan length, and censor mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryManifest {
    pub story_id: String,
    /// Word onsets in seconds from scan start, strictly increasing.
    pub word_onsets: Vec<f64>,
    pub n_trs: usize,
    pub tr_seconds: f64,
    /// Per-TR keep flag; `false` marks motion-spike volumes to drop.
    pub censor_mask: Vec<bool>,
}

impl StoryManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_trs == 0 {
            return Err(Error::invalid("n_trs must be at least 1"));
        }
        if self.tr_seconds <= 0.0 || !self.tr_seconds.is_finite() {
            return Err(Error::invalid("tr_seconds must be positive"));
        }
        if self.word_onsets.is_empty() {
            return Err(Error::invalid("word_onsets must be non-empty"));
        }
        for w in self.word_onsets.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "non-monotone onsets: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        let scan_end = self.n_trs as f64 * self.tr_seconds;
        if let Some(&last) = self.word_onsets.last() {
            if last >= scan_end {
                return Err(Error::invalid(format!(
                    "onset {last} past scan end {scan_end}"
                )));
            }
        }
        if self.word_onsets[0] < 0.0 {
            return Err(Error::invalid("negative onset"));
        }
        if self.censor_mask.len() != self.n_trs {
            return Err(Error::invalid(format!(
                "censor_mask length {} != n_trs {}",
                self.censor_mask.len(),
                self.n_trs
            )));
        }
        Ok(())
    }
}

/// Load and validate a story manifest from JSON.
pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<StoryManifest> {
    let manifest: StoryManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest<P: AsRef<Path>>(path: P, manifest: &StoryManifest) -> Result<()> {
    manifest.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.flush()?;
    Ok(())
}

/// The five language-network parcels used throughout the topography analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    PosteriorTemporal,
    AnteriorTemporal,
    InferiorFrontal,
    AngularGyrus,
    Dmpfc,
}

impl Region {
    /// Canonical column order for 5x5 topography matrices.
    pub const ALL: [Region; 5] = [
        Region::PosteriorTemporal,
        Region::AnteriorTemporal,
        Region::InferiorFrontal,
        Region::AngularGyrus,
        Region::Dmpfc,
    ];

    pub fn index(self) -> usize {
        Region::ALL.iter().position(|r| *r == self).unwrap()
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Region::PosteriorTemporal => "posterior_temporal",
            Region::AnteriorTemporal => "anterior_temporal",
            Region::InferiorFrontal => "inferior_frontal",
            Region::AngularGyrus => "angular_gyrus",
            Region::Dmpfc => "dmpfc",
        };
        f.write_str(s)
    }
}

/// Voxel-to-region map; index in `regions` is the voxel id.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAssignment {
    pub regions: Vec<Region>,
}

impl RegionAssignment {
    pub fn n_voxels(&self) -> usize {
        self.regions.len()
    }

    /// Voxel ids belonging to `region`, in ascending order.
    pub fn voxels_in(&self, region: Region) -> Vec<usize> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == region)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn load_regions<P: AsRef<Path>>(path: P) -> Result<RegionAssignment> {
    let ra: RegionAssignment = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ra.regions.is_empty() {
        return Err(Error::invalid("empty region assignment"));
    }
    Ok(ra)
}

pub fn save_regions<P: AsRef<Path>>(path: P, regions: &RegionAssignment) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, regions)?;
    w.flush()?;
    Ok(())
}
