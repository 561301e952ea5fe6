//! Sparse autoencoder training and application.
//!
//! The code layer is `f(x) = ReLU(W_enc (x - b_d) + b_e)` with linear
//! reconstruction `x_hat = W_dec f(x) + b_d`, trained by Adam on the
//! squared-error-plus-L1 objective. Decoder columns are unit-norm at
//! initialization and after every resampling event; features that never
//! fire within a resampling window are reinitialized toward the worst
//! reconstructed inputs of that window.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matio;

/// Activations below this never count as "firing".
pub const ACTIVE_THRESHOLD: f64 = 1e-8;

/// Encoder/decoder weights for one dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub d: usize,
    pub m: usize,
    /// M x d encoder weights.
    pub w_enc: Array2<f64>,
    /// d x M decoder weights.
    pub w_dec: Array2<f64>,
    /// M-vector encoder bias.
    pub b_e: Array1<f64>,
    /// d-vector pre-encoder bias, subtracted from inputs and restored on decode.
    pub b_d: Array1<f64>,
    pub seed: u64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeHyper {
    /// L1 coefficient on the code layer.
    pub lambda_sparsity: f64,
    pub lr: f64,
    pub batch_tokens: usize,
    pub steps: usize,
    /// Resample dead features every this many steps; 0 disables.
    pub resample_every: usize,
    /// Expected active features per token, used for reporting only.
    pub target_l0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of steps at the end over which the L1 coefficient decays
    /// linearly to `lambda_sparsity * lambda_final_scale`. High lambda early
    /// locks in a sparse support; decaying late removes the shrinkage bias.
    pub lambda_warmdown_frac: f64,
    pub lambda_final_scale: f64,
}

impl Default for SaeHyper {
    fn default() -> Self {
        Self {
            lambda_sparsity: 5e-4,
            lr: 3e-4,
            batch_tokens: 4096,
            steps: 50_000,
            resample_every: 5_000,
            target_l0: 50.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_warmdown_frac: 0.0,
            lambda_final_scale: 1.0,
        }
    }
}

impl SaeHyper {
    /// L1 coefficient in effect at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.lambda_warmdown_frac <= 0.0 {
            return self.lambda_sparsity;
        }
        let start = ((1.0 - self.lambda_warmdown_frac) * self.steps as f64).floor() as usize;
        if step < start {
            return self.lambda_sparsity;
        }
        let span = (self.steps - start).max(1) as f64;
        let t = (step - start) as f64 / span;
        let scale = 1.0 + t * (self.lambda_final_scale - 1.0);
        self.lambda_sparsity * scale
    }
}

impl SaeHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sparsity < 0.0 {
            return Err(Error::invalid("lambda_sparsity must be nonnegative"));
        }
        if self.lr <= 0.0 || self.batch_tokens == 0 || self.steps == 0 {
            return Err(Error::invalid("lr, batch_tokens, steps must be positive"));
        }
        if self.resample_every != 0 && self.steps % self.resample_every != 0 {
            return Err(Error::invalid(
                "resample_every must divide steps (or be 0 to disable)",
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_warmdown_frac) || self.lambda_final_scale < 0.0 {
            return Err(Error::invalid("bad lambda schedule"));
        }
        Ok(())
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub reconstruction_r2: f64,
    pub mean_l0: f64,
    pub dead_feature_count: usize,
    pub loss_trace: Vec<f64>,
    pub resample_events: Vec<ResampleEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub step: usize,
    pub n_resampled: usize,
}

impl SaeModel {
    /// Deterministic initialization: decoder columns drawn Gaussian and
    /// normalized to unit length, encoder tied to the decoder transpose,
    /// biases zero (`b_d` is set from data when training starts).
    pub fn init(d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::EmptyDimension);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec = Array2::<f64>::zeros((d, m));
        for j in 0..m {
            let mut norm2 = 0.0;
            for i in 0..d {
                let v: f64 = rng.sample(StandardNormal);
                w_dec[(i, j)] = v;
                norm2 += v * v;
            }
            let norm = norm2.sqrt().max(1e-12);
            for i in 0..d {
                w_dec[(i, j)] /= norm;
            }
        }
        let w_enc = w_dec.t().to_owned();
        Ok(Self {
            d,
            m,
            w_enc,
            w_dec,
            b_e: Array1::zeros(m),
            b_d: Array1::zeros(d),
            seed,
        })
    }

    /// Code layer for a T x d batch: `ReLU(W_enc (x - b_d) + b_e)`.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d {
            return Err(Error::dim(format!(
                "encode: input has {} cols, model d = {}",
                x.ncols(),
                self.d
            )));
        }
        let centered = x - &self.b_d;
        let mut pre = centered.dot(&self.w_enc.t());
        pre += &self.b_e;
        pre.mapv_inplace(|v| v.max(0.0));
        Ok(pre)
    }

    /// Reconstruction for a T x M code batch: `W_dec f + b_d`.
    pub fn decode(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        if f.ncols() != self.m {
            return Err(Error::dim(format!(
                "decode: input has {} cols, model M = {}",
                f.ncols(),
                self.m
            )));
        }
        Ok(f.dot(&self.w_dec.t()) + &self.b_d)
    }

    /// Pooled reconstruction R-squared on `x`:
    /// `1 - sum ||x - x_hat||^2 / sum ||x - x_bar||^2` with per-dimension
    /// data means `x_bar`.
    pub fn reconstruction_r2(&self, x: &Array2<f64>) -> Result<f64> {
        if x.nrows() < 2 {
            return Err(Error::invalid("reconstruction_r2 needs at least 2 rows"));
        }
        let f = self.encode(x)?;
        let xhat = self.decode(&f)?;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let sse: f64 = (&xhat - x).iter().map(|v| v * v).sum();
        let sst: f64 = x
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(mean.iter())
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum();
        if sst <= f64::EPSILON {
            return Err(Error::invalid("zero-variance data"));
        }
        Ok(1.0 - sse / sst)
    }

    pub fn decoder_column_norms(&self) -> Array1<f64> {
        let mut norms = Array1::zeros(self.m);
        for j in 0..self.m {
            norms[j] = self.w_dec.column(j).dot(&self.w_dec.column(j)).sqrt();
        }
        norms
    }
}

/// Mean active count per row and the set of features never active.
pub fn l0_stats(f: &Array2<f64>, threshold: f64) -> Result<(f64, Vec<usize>)> {
    if threshold < 0.0 {
        return Err(Error::invalid("threshold must be nonnegative"));
    }
    if f.is_empty() {
        return Err(Error::EmptyDimension);
    }
    let mut ever_active = vec![false; f.ncols()];
    let mut total_active = 0usize;
    for row in f.rows() {
        for (j, v) in row.iter().enumerate() {
            if *v > threshold {
                total_active += 1;
                ever_active[j] = true;
            }
        }
    }
    let mean_l0 = total_active as f64 / f.nrows() as f64;
    let dead = ever_active
        .iter()
        .enumerate()
        .filter(|(_, a)| !**a)
        .map(|(j, _)| j)
        .collect();
    Ok((mean_l0, dead))
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Array2::zeros((rows, cols)),
            v: Array2::zeros((rows, cols)),
        }
    }

    fn step(
        &mut self,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        t: f64,
    ) {
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }

    fn reset_row(&mut self, row: usize) {
        self.m.row_mut(row).fill(0.0);
        self.v.row_mut(row).fill(0.0);
    }

    fn reset_col(&mut self, col: usize) {
        self.m.column_mut(col).fill(0.0);
        self.v.column_mut(col).fill(0.0);
    }
}

/// Inputs with the worst reconstruction in the current resampling window.
struct LossBuffer {
    cap: usize,
    entries: Vec<(f64, Array1<f64>)>,
}

impl LossBuffer {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            entries: Vec::new(),
        }
    }

    fn offer(&mut self, loss: f64, row: Array1<f64>) {
        if self.entries.len() < self.cap {
            self.entries.push((loss, row));
            if self.entries.len() == self.cap {
                self.sort();
            }
            return;
        }
        // entries sorted descending once full; replace the smallest.
        if loss > self.entries[self.cap - 1].0 {
            self.entries[self.cap - 1] = (loss, row);
            self.sort();
        }
    }

    fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    }

    fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Train a sparse autoencoder on a T x d data matrix.
///
/// Batches are consecutive row blocks cycling through `data`, so the run is
/// a pure function of (model seed, hyperparameters, data order). `b_d` is
/// set to the column means of `data` before the first step. Diverging loss
/// aborts with a diagnostic instead of returning NaN weights.
pub fn train(
    mut model: SaeModel,
    data: &Array2<f64>,
    hyper: &SaeHyper,
) -> Result<(SaeModel, TrainReport)> {
    hyper.validate()?;
    if data.ncols() != model.d {
        return Err(Error::dim(format!(
            "train: data has {} cols, model d = {}",
            data.ncols(),
            model.d
        )));
    }
    let t_rows = data.nrows();
    if t_rows < hyper.batch_tokens.min(2) {
        return Err(Error::invalid("not enough rows for one batch"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }

    model.b_d = data.mean_axis(Axis(0)).unwrap();

    let b = hyper.batch_tokens.min(t_rows);
    let mut adam_w_enc = Adam::new(model.m, model.d);
    let mut adam_w_dec = Adam::new(model.d, model.m);
    let mut adam_b_e = Adam::new(1, model.m);
    let mut adam_b_d = Adam::new(1, model.d);

    let mut active_in_window = vec![false; model.m];
    let mut loss_buffer = LossBuffer::new(256);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    let mut resample_events = Vec::new();
    let mut b_e_mat = Array2::zeros((1, model.m));
    b_e_mat.row_mut(0).assign(&model.b_e);
    let mut b_d_mat = Array2::zeros((1, model.d));
    b_d_mat.row_mut(0).assign(&model.b_d);

    for step in 0..hyper.steps {
        let batch = take_batch(data, step, b);
        let lam = hyper.lambda_at(step);
        let centered = &batch - &b_d_mat.row(0);
        let mut pre = centered.dot(&model.w_enc.t());
        pre += &b_e_mat.row(0);
        let f = pre.mapv(|v| v.max(0.0));
        let xhat = f.dot(&model.w_dec.t()) + &b_d_mat.row(0);
        let err = &xhat - &batch;

        let inv_b = 1.0 / b as f64;
        let recon_loss: f64 = err.iter().map(|v| v * v).sum::<f64>() * inv_b;
        let l1: f64 = f.iter().sum::<f64>() * inv_b;
        let loss = recon_loss + lam * l1;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss = {loss}"
            )));
        }
        loss_trace.push(loss);

        // Track firing features and worst-reconstructed inputs for resampling.
        if hyper.resample_every != 0 {
            for (j, col) in f.columns().into_iter().enumerate() {
                if !active_in_window[j] && col.iter().any(|v| *v > ACTIVE_THRESHOLD) {
                    active_in_window[j] = true;
                }
            }
            for (i, row) in err.rows().into_iter().enumerate() {
                let row_loss: f64 = row.iter().map(|v| v * v).sum();
                loss_buffer.offer(row_loss, batch.row(i).to_owned());
            }
        }

        // Backward pass.
        let dxhat = err.mapv(|v| 2.0 * v * inv_b);
        let mut grad_w_dec = dxhat.t().dot(&f);
        // Decoder columns live on the unit sphere: drop the gradient
        // component parallel to each column, renormalize after the update.
        // Otherwise column growth silently cancels the L1 pressure.
        for j in 0..model.m {
            let col = model.w_dec.column(j);
            let norm2 = col.dot(&col).max(1e-12);
            let proj = grad_w_dec.column(j).dot(&col) / norm2;
            let correction = &col * proj;
            let mut g = grad_w_dec.column_mut(j);
            g -= &correction;
        }
        let mut df = dxhat.dot(&model.w_dec);
        ndarray::Zip::from(&mut df).and(&f).for_each(|g, fv| {
            if *fv > 0.0 {
                *g += lam * inv_b;
            } else {
                *g = 0.0;
            }
        });
        let dpre = df; // masked above
        let grad_w_enc = dpre.t().dot(&centered);
        let grad_b_e = dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat_sum = dxhat.sum_axis(Axis(0));
        let dpre_sum = dpre.sum_axis(Axis(0));
        let grad_b_d = (&dxhat_sum - &dpre_sum.dot(&model.w_enc)).insert_axis(Axis(0));

        let t_adam = (step + 1) as f64;
        adam_w_enc.step(
            &mut model.w_enc,
            &grad_w_enc,
            hyper.lr,
            hyper.adam_beta1,
            hyper.adam_beta2,
            hyper.adam_eps,
            t_adam,
        );
        adam_w_dec.step(
            &mut model.w_dec,
            &grad_w_dec,
            hyper.lr,
            hyper.adam_beta1,
            hyper.adam_beta2,
            hyper.adam_eps,
            t_adam,
        );
        adam_b_e.step(
            &mut b_e_mat,
            &grad_b_e,
            hyper.lr,
            hyper.adam_beta1,
            hyper.adam_beta2,
            hyper.adam_eps,
            t_adam,
        );
        adam_b_d.step(
            &mut b_d_mat,
            &grad_b_d,
            hyper.lr,
            hyper.adam_beta1,
            hyper.adam_beta2,
            hyper.adam_eps,
            t_adam,
        );

        for j in 0..model.m {
            let col = model.w_dec.column(j);
            let norm = col.dot(&col).sqrt().max(1e-12);
            let mut col = model.w_dec.column_mut(j);
            col /= norm;
        }

        // Resampling: reinit features that never fired in this window,
        // pointing them at the worst-reconstructed inputs. Skipped on the
        // final step where the reinitialized features could not train.
        if hyper.resample_every != 0
            && (step + 1) % hyper.resample_every == 0
            && step + 1 < hyper.steps
        {
            let dead: Vec<usize> = active_in_window
                .iter()
                .enumerate()
                .filter(|(_, a)| !**a)
                .map(|(j, _)| j)
                .collect();
            loss_buffer.sort();
            if !dead.is_empty() && !loss_buffer.entries.is_empty() {
                let alive_norm = mean_alive_enc_norm(&model.w_enc, &active_in_window);
                for (k, &j) in dead.iter().enumerate() {
                    let (_, x) = &loss_buffer.entries[k % loss_buffer.entries.len()];
                    let mut dir = x - &b_d_mat.row(0);
                    let norm = dir.dot(&dir).sqrt();
                    if norm <= 1e-12 {
                        continue;
                    }
                    dir /= norm;
                    model.w_dec.column_mut(j).assign(&dir);
                    model.w_enc.row_mut(j).assign(&(&dir * (0.2 * alive_norm)));
                    model.b_e[j] = 0.0;
                    adam_w_enc.reset_row(j);
                    adam_w_dec.reset_col(j);
                    adam_b_e.m[(0, j)] = 0.0;
                    adam_b_e.v[(0, j)] = 0.0;
                }
                resample_events.push(ResampleEvent {
                    step: step + 1,
                    n_resampled: dead.len(),
                });
            }
            active_in_window.iter_mut().for_each(|a| *a = false);
            loss_buffer.clear();
        }
    }

    model.b_e.assign(&b_e_mat.row(0));
    model.b_d.assign(&b_d_mat.row(0));

    // Full-data evaluation pass.
    let f_all = model.encode(data)?;
    let (mean_l0, dead_ids) = l0_stats(&f_all, ACTIVE_THRESHOLD)?;
    let reconstruction_r2 = model.reconstruction_r2(data)?;
    let report = TrainReport {
        final_loss: *loss_trace.last().unwrap(),
        reconstruction_r2,
        mean_l0,
        dead_feature_count: dead_ids.len(),
        loss_trace,
        resample_events,
    };
    Ok((model, report))
}

fn mean_alive_enc_norm(w_enc: &Array2<f64>, active: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, row) in w_enc.rows().into_iter().enumerate() {
        if active[j] {
            sum += row.dot(&row).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

fn take_batch(data: &Array2<f64>, step: usize, b: usize) -> Array2<f64> {
    let t = data.nrows();
    let start = (step * b) % t;
    if start + b <= t {
        data.slice(ndarray::s![start..start + b, ..]).to_owned()
    } else {
        let mut out = Array2::zeros((b, data.ncols()));
        for i in 0..b {
            out.row_mut(i).assign(&data.row((start + i) % t));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    schema_version: u32,
    d: usize,
    m: usize,
    seed: u64,
    b_e: Vec<f64>,
    b_d: Vec<f64>,
    w_enc_file: String,
    w_dec_file: String,
}

/// Serialize a model into `dir`: JSON metadata plus NMAT weight blocks.
pub fn save_model(dir: &Path, model: &SaeModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    matio::write_matrix_f64(dir.join("sae_w_enc.nmat"), &model.w_enc)?;
    matio::write_matrix_f64(dir.join("sae_w_dec.nmat"), &model.w_dec)?;
    let meta = ModelMeta {
        schema_version: 1,
        d: model.d,
        m: model.m,
        seed: model.seed,
        b_e: model.b_e.to_vec(),
        b_d: model.b_d.to_vec(),
        w_enc_file: "sae_w_enc.nmat".into(),
        w_dec_file: "sae_w_dec.nmat".into(),
    };
    let f = std::fs::File::create(dir.join("sae.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &meta)?;
    Ok(())
}

/// Load a model saved by [`save_model`]. Weights round through f32 storage.
pub fn load_model(dir: &Path) -> Result<SaeModel> {
    let meta: ModelMeta =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
            dir.join("sae.json"),
        )?))?;
    let w_enc = matio::read_matrix(dir.join(&meta.w_enc_file))?.to_f64();
    let w_dec = matio::read_matrix(dir.join(&meta.w_dec_file))?.to_f64();
    if w_enc.dim() != (meta.m, meta.d) || w_dec.dim() != (meta.d, meta.m) {
        return Err(Error::dim("model weight files disagree with metadata"));
    }
    if meta.b_e.len() != meta.m || meta.b_d.len() != meta.d {
        return Err(Error::dim("model bias lengths disagree with metadata"));
    }
    Ok(SaeModel {
        d: meta.d,
        m: meta.m,
        w_enc,
        w_dec,
        b_e: Array1::from_vec(meta.b_e),
        b_d: Array1::from_vec(meta.b_d),
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_deterministic_and_unit_norm() {
        let a = SaeModel::init(4, 8, 42).unwrap();
        let b = SaeModel::init(4, 8, 42).unwrap();
        assert_eq!(a, b);
        for n in a.decoder_column_norms() {
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-6);
        }
        assert!(matches!(SaeModel::init(0, 8, 1), Err(Error::EmptyDimension)));
    }

    #[test]
    fn encode_at_bias_point() {
        let mut model = SaeModel::init(3, 5, 1).unwrap();
        model.b_d = Array1::from_vec(vec![0.3, -0.2, 1.0]);
        let x = model
            .b_d
            .clone()
            .insert_axis(Axis(0))
            .to_owned();

        // b_e = 0: code is exactly zero.
        let f = model.encode(&x).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));

        // arbitrary b_e: code is ReLU(b_e).
        model.b_e = Array1::from_vec(vec![0.5, -0.4, 0.0, 2.0, -1.0]);
        let f = model.encode(&x).unwrap();
        let expect = [0.5, 0.0, 0.0, 2.0, 0.0];
        for (v, e) in f.row(0).iter().zip(expect) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut model = SaeModel::init(6, 9, 2).unwrap();
        model.b_e = Array1::from_shape_fn(9, |_| rng.gen::<f64>() - 0.5);
        model.b_d = Array1::from_shape_fn(6, |_| rng.gen::<f64>() - 0.5);
        let x = Array2::from_shape_fn((3, 6), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let f = model.encode(&x).unwrap();
        for t in 0..3 {
            for j in 0..9 {
                let mut pre = model.b_e[j];
                for i in 0..6 {
                    pre += model.w_enc[(j, i)] * (x[(t, i)] - model.b_d[i]);
                }
                assert_abs_diff_eq!(f[(t, j)], pre.max(0.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn decode_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut model = SaeModel::init(5, 7, 3).unwrap();
        model.b_d = Array1::from_shape_fn(5, |_| rng.gen::<f64>() - 0.5);

        // f = 0 broadcasts b_d.
        let f0 = Array2::<f64>::zeros((2, 7));
        let x0 = model.decode(&f0).unwrap();
        for row in x0.rows() {
            for (v, b) in row.iter().zip(model.b_d.iter()) {
                assert_abs_diff_eq!(*v, *b, epsilon = 1e-12);
            }
        }

        // one-hot picks the decoder column.
        let mut f1 = Array2::<f64>::zeros((1, 7));
        f1[(0, 4)] = 1.0;
        let x1 = model.decode(&f1).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(x1[(0, i)], model.b_d[i] + model.w_dec[(i, 4)], epsilon = 1e-12);
        }

        // random batch against the scalar loop.
        let f = Array2::from_shape_fn((4, 7), |_| rng.gen::<f64>());
        let x = model.decode(&f).unwrap();
        for t in 0..4 {
            for i in 0..5 {
                let mut v = model.b_d[i];
                for j in 0..7 {
                    v += model.w_dec[(i, j)] * f[(t, j)];
                }
                assert_abs_diff_eq!(x[(t, i)], v, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn dim_mismatch_errors() {
        let model = SaeModel::init(4, 6, 1).unwrap();
        assert!(model.encode(&Array2::zeros((2, 5))).is_err());
        assert!(model.decode(&Array2::zeros((2, 5))).is_err());
    }

    #[test]
    fn r2_perfect_and_constant_predictor() {
        // Identity autoencoder: M = d, w_dec = I, w_enc = I, on positive data.
        let d = 3;
        let mut model = SaeModel::init(d, d, 1).unwrap();
        model.w_dec = Array2::eye(d);
        model.w_enc = Array2::eye(d);
        model.b_e = Array1::zeros(d);
        model.b_d = Array1::zeros(d);
        let x = ndarray::array![[1.0, 2.0, 3.0], [2.0, 1.0, 4.0], [0.5, 3.0, 1.0]];
        assert_abs_diff_eq!(model.reconstruction_r2(&x).unwrap(), 1.0, epsilon = 1e-12);

        // Model that outputs the data mean: encoder silent, b_d = mean.
        let mut constant = SaeModel::init(d, d, 1).unwrap();
        constant.w_enc = Array2::zeros((d, d));
        constant.b_e = Array1::zeros(d);
        constant.b_d = x.mean_axis(Axis(0)).unwrap();
        assert_abs_diff_eq!(constant.reconstruction_r2(&x).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn r2_matches_formula_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let model = SaeModel::init(4, 8, 4).unwrap();
        let x = Array2::from_shape_fn((12, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let f = model.encode(&x).unwrap();
        let xhat = model.decode(&f).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let sse: f64 = x
            .iter()
            .zip(xhat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let mut sst = 0.0;
        for row in x.rows() {
            for (v, m) in row.iter().zip(mean.iter()) {
                sst += (v - m) * (v - m);
            }
        }
        let oracle = 1.0 - sse / sst;
        assert_abs_diff_eq!(model.reconstruction_r2(&x).unwrap(), oracle, epsilon = 1e-8);
    }

    #[test]
    fn l0_stats_cases() {
        let zeros = Array2::<f64>::zeros((4, 6));
        let (mean, dead) = l0_stats(&zeros, 1e-8).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(dead.len(), 6);

        let mut onehot = Array2::<f64>::zeros((5, 5));
        for i in 0..5 {
            onehot[(i, i)] = 1.0;
        }
        let (mean, dead) = l0_stats(&onehot, 1e-8).unwrap();
        assert_eq!(mean, 1.0);
        assert!(dead.is_empty());

        // counting oracle on a random matrix
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = Array2::from_shape_fn((20, 7), |_| {
            if rng.gen::<f64>() < 0.3 {
                rng.gen::<f64>()
            } else {
                0.0
            }
        });
        let (mean, dead) = l0_stats(&f, 0.0).unwrap();
        let mut count = 0usize;
        let mut ever = vec![false; 7];
        for r in 0..20 {
            for c in 0..7 {
                if f[(r, c)] > 0.0 {
                    count += 1;
                    ever[c] = true;
                }
            }
        }
        assert_abs_diff_eq!(mean, count as f64 / 20.0, epsilon = 1e-12);
        assert_eq!(dead.len(), ever.iter().filter(|a| !**a).count());
    }

    #[test]
    fn training_deterministic() {
        let (x, _) = crate::synth::gen_dictionary_data(8, 16, 2, 512, 0.02, 11).unwrap();
        let hyper = SaeHyper {
            batch_tokens: 64,
            steps: 60,
            resample_every: 20,
            lambda_sparsity: 1e-3,
            lr: 1e-3,
            ..Default::default()
        };
        let (m1, r1) = train(SaeModel::init(8, 16, 7).unwrap(), &x, &hyper).unwrap();
        let (m2, r2) = train(SaeModel::init(8, 16, 7).unwrap(), &x, &hyper).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.loss_trace, r2.loss_trace);
    }

    #[test]
    fn unregularized_overcomplete_reaches_high_r2() {
        let (x, _) = crate::synth::gen_dictionary_data(8, 8, 2, 2048, 0.0, 13).unwrap();
        let hyper = SaeHyper {
            lambda_sparsity: 0.0,
            lr: 2e-3,
            batch_tokens: 128,
            steps: 3000,
            resample_every: 0,
            ..Default::default()
        };
        let (_, report) = train(SaeModel::init(8, 16, 5).unwrap(), &x, &hyper).unwrap();
        assert!(
            report.reconstruction_r2 >= 0.99,
            "R2 = {}",
            report.reconstruction_r2
        );
    }

    #[test]
    fn huge_sparsity_kills_activity() {
        let (x, _) = crate::synth::gen_dictionary_data(8, 16, 2, 1024, 0.02, 17).unwrap();
        let hyper = SaeHyper {
            lambda_sparsity: 1e3,
            lr: 1e-3,
            batch_tokens: 128,
            steps: 500,
            resample_every: 0,
            ..Default::default()
        };
        let (_, report) = train(SaeModel::init(8, 16, 5).unwrap(), &x, &hyper).unwrap();
        assert!(report.mean_l0 < 0.5, "mean L0 = {}", report.mean_l0);
    }

    #[test]
    fn loss_trace_decreases_in_moving_average() {
        let (x, _) = crate::synth::gen_dictionary_data(8, 16, 2, 4096, 0.02, 19).unwrap();
        let hyper = SaeHyper {
            lambda_sparsity: 1e-3,
            lr: 1e-3,
            batch_tokens: 128,
            steps: 800,
            resample_every: 0,
            ..Default::default()
        };
        let (_, report) = train(SaeModel::init(8, 16, 23).unwrap(), &x, &hyper).unwrap();
        let head: f64 = report.loss_trace[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = report.loss_trace[report.loss_trace.len() - 100..]
            .iter()
            .sum::<f64>()
            / 100.0;
        assert!(tail < head, "tail {tail} !< head {head}");
    }

    #[test]
    fn model_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let model = SaeModel::init(4, 6, 21).unwrap();
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.d, 4);
        assert_eq!(back.m, 6);
        // f32 storage: agreement to f32 precision.
        for (a, b) in model.w_dec.iter().zip(back.w_dec.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn resample_rule_must_divide_steps() {
        let hyper = SaeHyper {
            steps: 100,
            resample_every: 33,
            ..Default::default()
        };
        assert!(hyper.validate().is_err());
    }
}
