//! Gaussian-process emulation of the whitened-parameter to forward-output
//! map, trained on calibration history.
//!
//! One anisotropic squared-exponential kernel is shared across all output
//! dimensions; each output gets its own weight vector against the common
//! factorized kernel matrix. Predictions are exact GP regression means with
//! zero prior mean, and gradients are the analytic kernel derivatives, which
//! is what makes the emulated potentials usable by the Langevin sampler.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::calibrate::EnkHistory;
use crate::error::{Error, Result};
use crate::likelihood::MatrixNormalModel;
use crate::linalg::{cholesky, CholeskyFactor};
use crate::sample::Potential;

/// Hyperparameters; `None` fields are set by heuristics at fit time
/// (per-dimension median pairwise distance, output variance).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpHyper {
    pub lengthscales: Option<Vec<f64>>,
    pub signal_var: Option<f64>,
    /// Diagonal loading relative to the signal variance.
    pub nugget: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            lengthscales: None,
            signal_var: None,
            nugget: 1e-6,
        }
    }
}

/// Fitted emulator.
#[derive(Debug, Clone)]
pub struct GpEmulator {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    weights: DMatrix<f64>,
    lengthscales: Vec<f64>,
    signal_var: f64,
    /// Relative nugget actually applied (escalated on factorization failure).
    nugget: f64,
}

const DEDUP_TOL: f64 = 1e-10;
const MAX_NUGGET: f64 = 1e-2;

/// Remove rows whose inputs coincide within `tol` (max-norm), keeping first
/// occurrences.
pub fn dedup_training(
    inputs: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    tol: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = inputs.nrows();
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..n {
        let dup = keep.iter().any(|&k| {
            (0..inputs.ncols()).all(|d| (inputs[(i, d)] - inputs[(k, d)]).abs() <= tol)
        });
        if !dup {
            keep.push(i);
        }
    }
    (select_rows(inputs, &keep), select_rows(outputs, &keep))
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (r, &src) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&m.row(src));
    }
    out
}

/// Farthest-point thinning to at most `max_n` rows: start from the point
/// nearest the centroid, then greedily add the point farthest from the
/// selected set. Deterministic given the input order.
pub fn farthest_point_thin(
    inputs: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    max_n: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = inputs.nrows();
    if n <= max_n || max_n == 0 {
        return (inputs.clone(), outputs.clone());
    }
    let p = inputs.ncols();
    let centroid: Vec<f64> = (0..p).map(|d| inputs.column(d).sum() / n as f64).collect();
    let dist2 = |row: usize, point: &[f64]| -> f64 {
        (0..p)
            .map(|d| {
                let diff = inputs[(row, d)] - point[d];
                diff * diff
            })
            .sum()
    };
    let start = (0..n)
        .min_by(|&a, &b| {
            dist2(a, &centroid)
                .partial_cmp(&dist2(b, &centroid))
                .unwrap()
        })
        .unwrap();
    let mut selected = vec![start];
    let row_of = |r: usize| -> Vec<f64> { (0..p).map(|d| inputs[(r, d)]).collect() };
    let mut min_dist: Vec<f64> = {
        let s = row_of(start);
        (0..n).map(|r| dist2(r, &s)).collect()
    };
    while selected.len() < max_n {
        let next = (0..n)
            .max_by(|&a, &b| min_dist[a].partial_cmp(&min_dist[b]).unwrap())
            .unwrap();
        if min_dist[next] <= 0.0 {
            break;
        }
        selected.push(next);
        let s = row_of(next);
        for r in 0..n {
            let d = dist2(r, &s);
            if d < min_dist[r] {
                min_dist[r] = d;
            }
        }
    }
    selected.sort_unstable();
    (select_rows(inputs, &selected), select_rows(outputs, &selected))
}

/// Collect the unique `(particle, forward value)` pairs of a calibration
/// history, thinned to at most `max_n` rows.
///
/// Most of the budget is a stratified (every k-th) subsample of the later
/// half of the iterations, so a collapsed ensemble keeps full resolution
/// where the posterior mass is; a farthest-point quota over the whole
/// history guarantees coverage of the early prior-scale particles.
pub fn training_set_from_history(
    history: &EnkHistory,
    max_n: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = history
        .ensembles
        .first()
        .ok_or_else(|| Error::InsufficientData("empty calibration history".into()))?;
    let p = first.particles.ncols();
    let q = first.forward_values.ncols();
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let mut rows_in: Vec<f64> = Vec::new();
    let mut rows_out: Vec<f64> = Vec::new();
    let mut tail_rows: Vec<usize> = Vec::new();
    let tail_from = history.ensembles.len() / 2;
    let mut n = 0usize;
    for (gen, ens) in history.ensembles.iter().enumerate() {
        for r in 0..ens.size() {
            let key: Vec<u64> = (0..p).map(|d| ens.particles[(r, d)].to_bits()).collect();
            if seen.insert(key, ()).is_none() {
                for d in 0..p {
                    rows_in.push(ens.particles[(r, d)]);
                }
                for d in 0..q {
                    rows_out.push(ens.forward_values[(r, d)]);
                }
                if gen >= tail_from {
                    tail_rows.push(n);
                }
                n += 1;
            }
        }
    }
    let inputs = DMatrix::from_row_slice(n, p, &rows_in);
    let outputs = DMatrix::from_row_slice(n, q, &rows_out);
    if n <= max_n || max_n == 0 {
        return Ok((inputs, outputs));
    }
    let coverage = max_n / 4;
    let (cov_in, cov_out) = if coverage > 0 {
        farthest_point_thin(&inputs, &outputs, coverage)
    } else {
        (DMatrix::zeros(0, p), DMatrix::zeros(0, q))
    };
    let stride_budget = max_n - coverage;
    let pool = if tail_rows.len() >= stride_budget {
        tail_rows
    } else {
        (0..n).collect()
    };
    let mut keep: Vec<usize> = (0..stride_budget)
        .map(|k| pool[k * pool.len() / stride_budget])
        .collect();
    keep.dedup();
    let mut all_in = select_rows(&inputs, &keep);
    let mut all_out = select_rows(&outputs, &keep);
    let offset = all_in.nrows();
    all_in = all_in.insert_rows(offset, cov_in.nrows(), 0.0);
    all_out = all_out.insert_rows(offset, cov_out.nrows(), 0.0);
    for r in 0..cov_in.nrows() {
        all_in.row_mut(offset + r).copy_from(&cov_in.row(r));
        all_out.row_mut(offset + r).copy_from(&cov_out.row(r));
    }
    // Coverage points may duplicate strided ones; the fit dedups anyway.
    Ok(dedup_training(&all_in, &all_out, 0.0))
}

/// Per-dimension median pairwise distance, the default lengthscale
/// heuristic.
pub fn median_lengthscales(inputs: &DMatrix<f64>) -> Vec<f64> {
    let n = inputs.nrows();
    let p = inputs.ncols();
    let mut out = Vec::with_capacity(p);
    for d in 0..p {
        let col = inputs.column(d);
        let mut dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push((col[i] - col[j]).abs());
            }
        }
        let mid = dists.len() / 2;
        let (_, med, _) = dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
        let med = *med;
        if med > 1e-12 {
            out.push(med);
        } else {
            let span = col.max() - col.min();
            out.push(if span > 0.0 { span } else { 1.0 });
        }
    }
    out
}

fn output_variance(outputs: &DMatrix<f64>) -> f64 {
    let n = outputs.nrows() as f64;
    let mut acc = 0.0;
    for c in 0..outputs.ncols() {
        let col = outputs.column(c);
        let mean = col.sum() / n;
        acc += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    let var = acc / outputs.ncols() as f64;
    if var > 0.0 {
        var
    } else {
        1.0
    }
}

impl GpEmulator {
    pub fn n_train(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn training_outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    fn kernel_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n_train();
        DVector::from_fn(n, |i, _| {
            let mut arg = 0.0;
            for d in 0..self.input_dim() {
                let diff = (v[d] - self.inputs[(i, d)]) / self.lengthscales[d];
                arg += diff * diff;
            }
            self.signal_var * (-0.5 * arg).exp()
        })
    }

    /// GP regression mean at `v`.
    pub fn predict_mean(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: v.len(),
                context: "predict input",
            });
        }
        let k = self.kernel_vector(v);
        Ok(self.weights.transpose() * k)
    }

    /// Jacobian `d mean / d v` of shape `q x p`.
    pub fn predict_gradient(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: v.len(),
                context: "predict input",
            });
        }
        let k = self.kernel_vector(v);
        let n = self.n_train();
        let p = self.input_dim();
        let mut kernel_grad = DMatrix::zeros(n, p);
        for i in 0..n {
            for d in 0..p {
                let ell2 = self.lengthscales[d] * self.lengthscales[d];
                kernel_grad[(i, d)] = k[i] * (self.inputs[(i, d)] - v[d]) / ell2;
            }
        }
        Ok(self.weights.transpose() * kernel_grad)
    }

    /// Worst relative reproduction error over the training set.
    pub fn training_error(&self) -> f64 {
        let scale = self
            .outputs
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let mut worst = 0.0f64;
        for r in 0..self.n_train() {
            let pred = self
                .predict_mean(&self.inputs.row(r).transpose())
                .expect("training input");
            for c in 0..self.output_dim() {
                worst = worst.max((pred[c] - self.outputs[(r, c)]).abs() / scale);
            }
        }
        worst
    }

    /// Persist as a JSON manifest plus full-precision CSV matrices.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = Manifest {
            n_train: self.n_train(),
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            lengthscales: self.lengthscales.clone(),
            signal_var: self.signal_var,
            nugget: self.nugget,
            inputs_file: "gp_inputs.csv".into(),
            outputs_file: "gp_outputs.csv".into(),
            weights_file: "gp_weights.csv".into(),
        };
        let manifest_path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(&manifest_path, body)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        write_matrix_csv(&dir.join(&manifest.inputs_file), &self.inputs)?;
        write_matrix_csv(&dir.join(&manifest.outputs_file), &self.outputs)?;
        write_matrix_csv(&dir.join(&manifest.weights_file), &self.weights)?;
        Ok(())
    }

    /// Load a persisted emulator; predictions reproduce the saved ones to
    /// full double precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let body = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
        let inputs = read_matrix_csv(&dir.join(&manifest.inputs_file))?;
        let outputs = read_matrix_csv(&dir.join(&manifest.outputs_file))?;
        let weights = read_matrix_csv(&dir.join(&manifest.weights_file))?;
        if inputs.shape() != (manifest.n_train, manifest.input_dim)
            || outputs.shape() != (manifest.n_train, manifest.output_dim)
            || weights.shape() != (manifest.n_train, manifest.output_dim)
        {
            return Err(Error::Config("emulator files disagree with manifest".into()));
        }
        Ok(GpEmulator {
            inputs,
            outputs,
            weights,
            lengthscales: manifest.lengthscales,
            signal_var: manifest.signal_var,
            nugget: manifest.nugget,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    n_train: usize,
    input_dim: usize,
    output_dim: usize,
    lengthscales: Vec<f64>,
    signal_var: f64,
    nugget: f64,
    inputs_file: String,
    outputs_file: String,
    weights_file: String,
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut body = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                body.push(',');
            }
            body.push_str(&format!("{:.16e}", m[(r, c)]));
        }
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in body.lines() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("bad float in {}: {e}", path.display())))?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("empty matrix file {}", path.display())));
    }
    let (n, c) = (rows.len(), rows[0].len());
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config(format!("ragged matrix file {}", path.display())));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// Fit an exact GP to `(inputs, outputs)` after tolerance-deduplication.
///
/// A failed factorization escalates the nugget tenfold up to `1e-2` before
/// giving up.
pub fn fit(inputs: &DMatrix<f64>, outputs: &DMatrix<f64>, hyper: &GpHyper) -> Result<GpEmulator> {
    if inputs.nrows() != outputs.nrows() {
        return Err(Error::DimensionMismatch {
            expected: inputs.nrows(),
            got: outputs.nrows(),
            context: "training rows",
        });
    }
    if inputs.ncols() == 0 || outputs.ncols() == 0 {
        return Err(Error::InvalidArgument("empty training dimensions".into()));
    }
    if !(hyper.nugget >= 0.0 && hyper.nugget <= MAX_NUGGET) {
        return Err(Error::InvalidArgument(format!(
            "nugget must be in [0, {MAX_NUGGET}]"
        )));
    }
    let (inputs, outputs) = dedup_training(inputs, outputs, DEDUP_TOL);
    let n = inputs.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(
            "GP fit needs >= 2 distinct inputs".into(),
        ));
    }
    let lengthscales = match &hyper.lengthscales {
        Some(ls) => {
            if ls.len() != inputs.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: inputs.ncols(),
                    got: ls.len(),
                    context: "lengthscales",
                });
            }
            if ls.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::InvalidArgument("lengthscales must be > 0".into()));
            }
            ls.clone()
        }
        None => median_lengthscales(&inputs),
    };
    let signal_var = match hyper.signal_var {
        Some(v) if v > 0.0 => v,
        Some(_) => return Err(Error::InvalidArgument("signal_var must be > 0".into())),
        None => output_variance(&outputs),
    };

    let mut base = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut arg = 0.0;
            for d in 0..inputs.ncols() {
                let diff = (inputs[(i, d)] - inputs[(j, d)]) / lengthscales[d];
                arg += diff * diff;
            }
            let k = signal_var * (-0.5 * arg).exp();
            base[(i, j)] = k;
            base[(j, i)] = k;
        }
    }
    let mut nugget = hyper.nugget.max(1e-12);
    let factor: CholeskyFactor = loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += nugget * signal_var;
        }
        match cholesky(&k, None) {
            Ok(f) => break f,
            Err(_) if nugget * 10.0 <= MAX_NUGGET => {
                nugget *= 10.0;
                log::debug!("GP factorization failed; nugget escalated to {nugget:.1e}");
            }
            Err(_) => {
                return Err(Error::Singular(format!(
                    "GP kernel matrix not factorizable at max nugget {MAX_NUGGET}"
                )))
            }
        }
    };
    let weights = factor.solve_mat(&outputs);
    Ok(GpEmulator {
        inputs,
        outputs,
        weights,
        lengthscales,
        signal_var,
        nugget,
    })
}

/// Emulated potential `v -> (Phi(v), grad Phi(v))`: the GP mean substituted
/// into a matrix-normal potential.
pub struct EmulatedPotential<'a> {
    emulator: &'a GpEmulator,
    model: &'a MatrixNormalModel,
    data: DVector<f64>,
}

/// Compose an emulator with a data model; shapes are checked once here.
pub fn emulated_potential<'a>(
    emulator: &'a GpEmulator,
    model: &'a MatrixNormalModel,
    data: DVector<f64>,
) -> Result<EmulatedPotential<'a>> {
    if emulator.output_dim() != data.len() {
        return Err(Error::Config(format!(
            "emulator output dim {} does not match data length {}",
            emulator.output_dim(),
            data.len()
        )));
    }
    if let Some(d) = model.data_dim() {
        if d != data.len() {
            return Err(Error::Config(format!(
                "model expects data dim {d}, got {}",
                data.len()
            )));
        }
    }
    // Exercise the model once so shape errors surface at build time.
    model.potential_vec(&DVector::zeros(data.len()))?;
    Ok(EmulatedPotential {
        emulator,
        model,
        data,
    })
}

impl EmulatedPotential<'_> {
    fn residual(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.data - self.emulator.predict_mean(v)?)
    }
}

impl Potential for EmulatedPotential<'_> {
    fn value(&self, v: &DVector<f64>) -> f64 {
        match self.residual(v).and_then(|r| self.model.potential_vec(&r)) {
            Ok(p) => p,
            Err(_) => f64::INFINITY,
        }
    }

    fn value_grad(&self, v: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let compute = || -> Result<(f64, DVector<f64>)> {
            let r = self.residual(v)?;
            let phi = self.model.potential_vec(&r)?;
            let weighted = self.model.grad_vec(&r)?;
            let jac = self.emulator.predict_gradient(v)?;
            Ok((phi, -(jac.transpose() * weighted)))
        };
        match compute() {
            Ok(pair) => Some(pair),
            Err(_) => Some((f64::INFINITY, DVector::zeros(v.len()))),
        }
    }
}
