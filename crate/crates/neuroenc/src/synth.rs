//! Planted-ground-truth generators.
//!
//! Each generator returns the data plus a truth record sufficient to
//! recompute the statistics the pipeline should observe, so downstream
//! claims (dictionary recovery, unique variance, patching effect ordering,
//! topography detection) are testable against construction rather than
//! against other code.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Ground truth behind [`gen_dictionary_data`].
#[derive(Debug, Clone)]
pub struct DictionaryTruth {
    /// d x M_true dictionary with unit-norm columns.
    pub dictionary: Array2<f64>,
    /// T x M_true nonnegative sparse codes.
    pub codes: Array2<f64>,
    pub l0_true: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DictionaryTruth {
    /// Mean number of active code entries per row; exactly `l0_true` by
    /// construction, recomputed here from the codes as a manifest check.
    pub fn mean_l0(&self) -> f64 {
        let active = self.codes.iter().filter(|v| **v > 0.0).count();
        active as f64 / self.codes.nrows() as f64
    }

    /// Residual standard deviation of `x` against the planted model.
    pub fn residual_sd(&self, x: &Array2<f64>) -> f64 {
        let recon = self.codes.dot(&self.dictionary.t());
        let resid = x - &recon;
        let n = resid.len() as f64;
        (resid.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
    }
}

/// Draw `T` samples from a planted sparse dictionary model.
///
/// Each row is `code * dictionary^T + noise` where the code has exactly
/// `l0_true` active entries with amplitudes uniform in [0.5, 1.5]. Returns
/// the T x d data matrix and the truth record.
pub fn gen_dictionary_data(
    d: usize,
    m_true: usize,
    l0_true: usize,
    t: usize,
    noise: f64,
    seed: u64,
) -> Result<(Array2<f64>, DictionaryTruth)> {
    if d == 0 || m_true == 0 || t == 0 {
        return Err(Error::EmptyDimension);
    }
    if l0_true == 0 || l0_true > m_true {
        return Err(Error::invalid(format!(
            "l0_true {l0_true} must be in 1..={m_true}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::invalid("noise must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dictionary = random_unit_columns(d, m_true, &mut rng);

    // Amplitudes uniform in [1, 2]: bounded away from zero so active and
    // inactive atoms are separable by a thresholding encoder.
    let mut codes = Array2::<f64>::zeros((t, m_true));
    let mut atoms: Vec<usize> = (0..m_true).collect();
    for mut row in codes.rows_mut() {
        atoms.shuffle(&mut rng);
        for &a in atoms.iter().take(l0_true) {
            row[a] = 1.0 + rng.gen::<f64>();
        }
    }

    let mut x = codes.dot(&dictionary.t());
    if noise > 0.0 {
        for v in x.iter_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((
        x,
        DictionaryTruth {
            dictionary,
            codes,
            l0_true,
            noise_sigma: noise,
            seed,
        },
    ))
}

// Up to d atoms: a random orthonormal frame (QR of a Gaussian draw), the
// rotated-sparse-sources testbed with perfect conditioning. Beyond d atoms
// orthogonality is impossible, so fall back to normalized Gaussian columns.
fn random_unit_columns(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if m <= d {
        let g = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let mut w = Array2::<f64>::zeros((d, m));
        for j in 0..m {
            // Fix the QR sign ambiguity for reproducibility across backends.
            let lead = (0..d)
                .map(|i| q[(i, j)])
                .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap_or(1.0);
            let flip = if lead < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                w[(i, j)] = flip * q[(i, j)];
            }
        }
        return w;
    }
    let mut w = Array2::<f64>::zeros((d, m));
    for j in 0..m {
        let mut norm2 = 0.0;
        for i in 0..d {
            let v: f64 = rng.sample(StandardNormal);
            w[(i, j)] = v;
            norm2 += v * v;
        }
        let norm = norm2.sqrt().max(1e-12);
        for i in 0..d {
            w[(i, j)] /= norm;
        }
    }
    w
}

/// One feature group in a planted encoding scenario.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub n_features: usize,
    /// Population fraction of voxel variance this group explains.
    pub target_r2: f64,
    /// When set, this group's design columns are copied from the named
    /// earlier group and its own loading is zero: the shared-variance case.
    pub duplicate_of: Option<usize>,
}

impl GroupSpec {
    pub fn new(name: &str, n_features: usize, target_r2: f64) -> Self {
        Self {
            name: name.into(),
            n_features,
            target_r2,
            duplicate_of: None,
        }
    }
}

/// Ground truth behind [`gen_encoding_scenario`].
#[derive(Debug, Clone)]
pub struct EncodingTruth {
    pub groups: Vec<GroupSpec>,
    /// Column ranges of each group in the stacked design.
    pub group_cols: Vec<std::ops::Range<usize>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl EncodingTruth {
    /// Population R-squared of the best linear model using the union of the
    /// given groups (duplicated groups contribute their source's signal).
    pub fn population_r2(&self, group_idx: &[usize]) -> f64 {
        // A duplicated group carries its source group's columns, so a model
        // on the duplicate alone still reaches the source's R2.
        let mut reachable = vec![false; self.groups.len()];
        for &g in group_idx {
            reachable[g] = true;
            if let Some(src) = self.groups[g].duplicate_of {
                reachable[src] = true;
            }
        }
        self.groups
            .iter()
            .enumerate()
            .filter(|(i, g)| reachable[*i] && g.duplicate_of.is_none())
            .map(|(_, g)| g.target_r2)
            .sum()
    }

    /// Population held-out correlation for the union of the given groups.
    pub fn population_r(&self, group_idx: &[usize]) -> f64 {
        self.population_r2(group_idx).sqrt()
    }

    pub fn columns_of(&self, group_idx: usize) -> Vec<usize> {
        self.group_cols[group_idx].clone().collect()
    }
}

/// Planted voxelwise encoding scenario with per-story structure.
#[derive(Debug, Clone)]
pub struct EncodingScenario {
    pub story_ids: Vec<String>,
    /// Per story: n_TR x k design of feature time courses.
    pub designs: Vec<Array2<f64>>,
    /// Per story: n_TR x n_voxels responses.
    pub voxels: Vec<Array2<f64>>,
    pub truth: EncodingTruth,
}

/// Generate a planted linear encoding scenario.
///
/// Feature columns are iid standard normal, voxel `v` is
/// `sum_g sqrt(R2_g) u_{g,v}^T x_g + sigma eps` with per-voxel random unit
/// loadings, and `sigma^2 = 1 - sum_g R2_g`, so every group's population
/// R-squared equals its target by construction.
pub fn gen_encoding_scenario(
    groups: &[GroupSpec],
    n_tr: usize,
    n_stories: usize,
    n_voxels: usize,
    seed: u64,
) -> Result<EncodingScenario> {
    if groups.is_empty() || n_voxels == 0 {
        return Err(Error::EmptyDimension);
    }
    if n_stories == 0 || n_tr < n_stories {
        return Err(Error::invalid("need at least one TR per story"));
    }
    let total_r2: f64 = groups
        .iter()
        .filter(|g| g.duplicate_of.is_none())
        .map(|g| g.target_r2)
        .sum();
    if total_r2 > 0.95 {
        return Err(Error::invalid(format!(
            "planted R2 totals {total_r2:.3}, must be <= 0.95"
        )));
    }
    for (i, g) in groups.iter().enumerate() {
        if let Some(src) = g.duplicate_of {
            if src >= i {
                return Err(Error::invalid("duplicate_of must name an earlier group"));
            }
            if groups[src].n_features != g.n_features {
                return Err(Error::invalid("duplicated groups must match in size"));
            }
            if g.target_r2 != 0.0 {
                return Err(Error::invalid("duplicated group must have target_r2 = 0"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k: usize = groups.iter().map(|g| g.n_features).sum();
    let mut group_cols = Vec::with_capacity(groups.len());
    let mut start = 0;
    for g in groups {
        group_cols.push(start..start + g.n_features);
        start += g.n_features;
    }

    // Per-voxel loadings, fixed across stories.
    let noise_sigma = (1.0 - total_r2).max(0.0).sqrt();
    let mut loadings = Array2::<f64>::zeros((k, n_voxels));
    for v in 0..n_voxels {
        for (gi, g) in groups.iter().enumerate() {
            if g.duplicate_of.is_some() || g.target_r2 == 0.0 {
                continue;
            }
            let dir = random_unit_vector(g.n_features, &mut rng);
            let scale = g.target_r2.sqrt();
            for (offset, col) in group_cols[gi].clone().enumerate() {
                loadings[(col, v)] = scale * dir[offset];
            }
        }
    }

    let base = n_tr / n_stories;
    let remainder = n_tr % n_stories;
    let mut story_ids = Vec::with_capacity(n_stories);
    let mut designs = Vec::with_capacity(n_stories);
    let mut voxels = Vec::with_capacity(n_stories);
    for s in 0..n_stories {
        let rows = base + usize::from(s < remainder);
        let mut x = Array2::<f64>::zeros((rows, k));
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        // Duplicated groups copy their source columns exactly.
        for (gi, g) in groups.iter().enumerate() {
            if let Some(src) = g.duplicate_of {
                let src_cols: Vec<usize> = group_cols[src].clone().collect();
                let dst_cols: Vec<usize> = group_cols[gi].clone().collect();
                for (sc, dc) in src_cols.iter().zip(dst_cols.iter()) {
                    let col = x.column(*sc).to_owned();
                    x.column_mut(*dc).assign(&col);
                }
            }
        }
        let mut y = x.dot(&loadings);
        for v in y.iter_mut() {
            *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        story_ids.push(format!("story-{s:02}"));
        designs.push(x);
        voxels.push(y);
    }

    Ok(EncodingScenario {
        story_ids,
        designs,
        voxels,
        truth: EncodingTruth {
            groups: groups.to_vec(),
            group_cols,
            noise_sigma,
            seed,
        },
    })
}

fn random_unit_vector(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut v = Array1::<f64>::zeros(n);
    loop {
        let mut norm2 = 0.0;
        for x in v.iter_mut() {
            *x = rng.sample(StandardNormal);
            norm2 += *x * *x;
        }
        if norm2 > 1e-12 {
            return &v / norm2.sqrt();
        }
    }
}

/// Ground truth behind [`gen_topography_scenario`].
#[derive(Debug, Clone)]
pub struct TopographyTruth {
    pub effects: Array2<f64>,
    pub baseline: f64,
    pub row_nuisance_sd: f64,
    pub col_nuisance_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Per-subject subcategory x region cell scores around a planted effect
/// matrix, with subject-specific row and column nuisance.
pub fn gen_topography_scenario(
    effects: &Array2<f64>,
    n_subjects: usize,
    baseline: f64,
    row_nuisance_sd: f64,
    col_nuisance_sd: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<(Vec<Array2<f64>>, TopographyTruth)> {
    if n_subjects == 0 {
        return Err(Error::invalid("need at least one subject"));
    }
    let (nr, nc) = effects.dim();
    if nr == 0 || nc == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n_subjects);
    for _ in 0..n_subjects {
        let rows: Vec<f64> = (0..nr)
            .map(|_| row_nuisance_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let cols: Vec<f64> = (0..nc)
            .map(|_| col_nuisance_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut m = Array2::<f64>::zeros((nr, nc));
        for i in 0..nr {
            for j in 0..nc {
                m[(i, j)] = baseline
                    + effects[(i, j)]
                    + rows[i]
                    + cols[j]
                    + noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        subjects.push(m);
    }
    Ok((
        subjects,
        TopographyTruth {
            effects: effects.clone(),
            baseline,
            row_nuisance_sd,
            col_nuisance_sd,
            noise_sd,
            seed,
        },
    ))
}

/// Mean over subjects, the observed matrix entering convergence tests.
pub fn mean_over_subjects(subjects: &[Array2<f64>]) -> Result<Array2<f64>> {
    if subjects.is_empty() {
        return Err(Error::invalid("no subjects"));
    }
    let mut acc = subjects[0].clone();
    for s in &subjects[1..] {
        if s.dim() != acc.dim() {
            return Err(Error::dim("subject matrices differ in shape"));
        }
        acc = acc + s;
    }
    Ok(acc / subjects.len() as f64)
}
