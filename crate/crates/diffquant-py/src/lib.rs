//! Python bindings: thin wrappers over the schedule, mixture, quantizer, and
//! experiment harness. Matrices cross the boundary as `list[list[float]]`;
//! anything heavier should go through the CSV artifacts instead.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use diffquant::config::ExperimentConfig;
use diffquant::gmm::GaussianMixture;
use diffquant::harness;
use diffquant::quantizer::{mse_calibrate, quant_dequant, Bits, Granularity, QuantParams};
use diffquant::rng::Rng;
use diffquant::schedule::{NoiseSchedule, SigmaChoice};
use diffquant::tensor::Tensor;

fn err(e: diffquant::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    if r == 0 {
        return Err(PyValueError::new_err("need at least one row"));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have uneven lengths"));
    }
    Tensor::new(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn from_tensor(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Linear beta schedule with its derived quantities.
#[pyclass(frozen)]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    #[new]
    fn new(t_max: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner =
            NoiseSchedule::linear(t_max, beta_start, beta_end, SigmaChoice::default()).map_err(err)?;
        Ok(Schedule { inner })
    }

    fn t_max(&self) -> usize {
        self.inner.t_max()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.t_max() {
            return Err(PyValueError::new_err(format!("t {t} above t_max")));
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.check(t)?;
        Ok(self.inner.sigma(t))
    }
}

impl Schedule {
    fn check(&self, t: usize) -> PyResult<()> {
        if t < 1 || t > self.inner.t_max() {
            return Err(PyValueError::new_err(format!(
                "t {t} outside 1..={}",
                self.inner.t_max()
            )));
        }
        Ok(())
    }
}

/// Isotropic Gaussian mixture over the data space.
#[pyclass(frozen)]
struct Mixture {
    inner: GaussianMixture,
}

#[pymethods]
impl Mixture {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> PyResult<Self> {
        let inner = GaussianMixture::new(weights, to_tensor(means)?, stds).map_err(err)?;
        Ok(Mixture { inner })
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        from_tensor(&self.inner.sample(&mut rng, n))
    }

    /// Optimal noise prediction for diffused points `x_t` at timestep `t`.
    fn analytic_eps(&self, x_t: Vec<Vec<f64>>, t: usize, schedule: &Schedule) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.analytic_eps(&to_tensor(x_t)?, t, &schedule.inner).map_err(err)?;
        Ok(from_tensor(&out))
    }
}

/// A fitted fake-quantization grid.
#[pyclass(frozen)]
struct Quantizer {
    inner: QuantParams,
}

#[pymethods]
impl Quantizer {
    /// Fit by MSE grid scan. `granularity` is "per_tensor" (asymmetric,
    /// activations) or "per_channel" (symmetric per column, weights).
    #[staticmethod]
    #[pyo3(signature = (values, bits, granularity, grid = 100))]
    fn fit(values: Vec<Vec<f64>>, bits: u32, granularity: &str, grid: usize) -> PyResult<Self> {
        let b = match bits {
            4 => Bits::B4,
            6 => Bits::B6,
            8 => Bits::B8,
            _ => return Err(PyValueError::new_err("bits must be 4, 6, or 8")),
        };
        let g = match granularity {
            "per_tensor" => Granularity::PerTensor,
            "per_channel" => Granularity::PerChannel,
            other => {
                return Err(PyValueError::new_err(format!(
                    "granularity {other:?}, expected per_tensor or per_channel"
                )))
            }
        };
        let inner = mse_calibrate(&[to_tensor(values)?], b, g, grid).map_err(err)?;
        Ok(Quantizer { inner })
    }

    fn apply(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_tensor(&quant_dequant(&to_tensor(values)?, &self.inner).map_err(err)?))
    }

    #[getter]
    fn scale(&self) -> Vec<f64> {
        self.inner.scale.clone()
    }

    #[getter]
    fn zero_point(&self) -> Vec<i64> {
        self.inner.zero_point.clone()
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }
}

/// One experiment run's summary line.
#[pyclass(frozen, get_all)]
struct Summary {
    run_id: String,
    config_label: String,
    intra_enabled: bool,
    inter_stages: usize,
    correction_mode: String,
    seed: u64,
    swd_to_fp: f64,
    final_cosine: f64,
    eval_count: usize,
}

fn summaries(rows: Vec<diffquant::metrics::SummaryRow>) -> Vec<Summary> {
    rows.into_iter()
        .map(|r| Summary {
            run_id: r.run_id,
            config_label: r.config_label,
            intra_enabled: r.intra_enabled,
            inter_stages: r.inter_stages,
            correction_mode: r.correction_mode,
            seed: r.seed,
            swd_to_fp: r.swd_to_fp,
            final_cosine: r.final_cosine,
            eval_count: r.eval_count,
        })
        .collect()
}

fn load(config_path: PathBuf) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_path(&config_path).map_err(err)
}

/// Run the configured variant against its paired FP reference; returns the
/// summary rows and writes the full artifact set to the config's out_dir.
#[pyfunction]
fn run_experiment(config_path: PathBuf) -> PyResult<Vec<Summary>> {
    Ok(summaries(harness::run_experiment(&load(config_path)?).map_err(err)?))
}

/// Run the whole variant matrix (plain, smoothed, staged, both) plus FP.
#[pyfunction]
fn ablate(config_path: PathBuf) -> PyResult<Vec<Summary>> {
    Ok(summaries(harness::ablate(&load(config_path)?).map_err(err)?))
}

/// Re-verify the artifacts under the config's out_dir and render the report.
#[pyfunction]
fn report(config_path: PathBuf) -> PyResult<String> {
    let cfg = load(config_path)?;
    let out = cfg.run.out_dir.clone();
    harness::report(&cfg, &out).map_err(err)
}

/// Train per config and save the network to out_dir/model.dqw; returns the
/// saved path.
#[pyfunction]
fn train_to_disk(config_path: PathBuf) -> PyResult<String> {
    let (path, _) = harness::train_to_disk(&load(config_path)?).map_err(err)?;
    Ok(path.display().to_string())
}

#[pymodule]
fn diffquant_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Schedule>()?;
    m.add_class::<Mixture>()?;
    m.add_class::<Quantizer>()?;
    m.add_class::<Summary>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(train_to_disk, m)?)?;
    Ok(())
}
