//! Python bindings for the codec, the classical baselines, channels and the
//! measurement tools.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use turbolab::classic::{self, Repetition, Trellis, TurboCode, TurboVariant};
use turbolab::eval::{self, Coder, StopRule, Uncoded};
use turbolab::train::{self, TrainConfig};
use turbolab::turboae::{self, Architecture, PowerMode, TurboAe};
use turbolab::{BitBlock, ChannelSpec, Error, RealBlock, Rng};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::FileNotFound(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn bits(rows: Vec<Vec<u8>>) -> PyResult<Vec<BitBlock>> {
    rows.into_iter().map(|r| BitBlock::new(r).map_err(py_err)).collect()
}

fn channel(spec: &str) -> PyResult<ChannelSpec> {
    spec.parse().map_err(py_err)
}

fn stop(min_errors: u64, max_bits: u64) -> StopRule {
    StopRule { min_errors, max_bits }
}

/// Learned encoder and iterative decoder.
#[pyclass(name = "TurboAE")]
struct PyTurboAe {
    inner: TurboAe<f32>,
}

#[pymethods]
impl PyTurboAe {
    /// `arch` is one of `canonical`, `desk`, `tiny`; `power` is
    /// `continuous` or `binary`.
    #[new]
    #[pyo3(signature = (arch = "desk", power = "continuous", seed = 0, block_len = None))]
    fn new(arch: &str, power: &str, seed: u64, block_len: Option<usize>) -> PyResult<Self> {
        let mut a = match arch {
            "canonical" => Architecture::canonical(),
            "desk" => Architecture::desk(),
            "tiny" => Architecture::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown architecture `{other}`"))),
        };
        if let Some(k) = block_len {
            a.block_len = k;
        }
        let power: PowerMode = power.parse().map_err(py_err)?;
        Ok(Self {
            inner: TurboAe::new(a, power, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = turboae::load_model::<f32>(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        turboae::save_model(&self.inner, &path, &BTreeMap::new()).map_err(py_err)
    }

    #[getter]
    fn block_len(&self) -> usize {
        self.inner.block_len()
    }

    #[getter]
    fn power(&self) -> &'static str {
        self.inner.power_mode().name()
    }

    /// `(encoder, decoder)` parameter counts.
    fn param_counts(&self) -> (usize, usize) {
        self.inner.count_params()
    }

    /// `(encoder, decoder)` multiply-accumulates per block.
    fn flops(&self) -> (u64, u64) {
        self.inner.count_flops(self.inner.block_len())
    }

    fn set_interleaver(&mut self, seed: u64) {
        let k = self.inner.block_len();
        self.inner.set_permutation(turbolab::make_permutation(k, seed));
    }

    /// Codewords as `[block][position][stream]`.
    fn encode(&self, messages: Vec<Vec<u8>>) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let x = self
            .inner
            .encode(&bits(messages)?, &self.inner.eval_norm_mode())
            .map_err(py_err)?;
        Ok(x.iter()
            .map(|b| b.values().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect())
    }

    /// Bit posteriors `P(u = 1 | y)` per block.
    fn decode(&self, received: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Vec<f64>>> {
        let y = received
            .into_iter()
            .map(|b| RealBlock::new(b.into_iter().flatten().collect(), 3).map_err(py_err))
            .collect::<PyResult<Vec<_>>>()?;
        self.inner.decode(&y).map_err(py_err)
    }

    /// Trains with the desk preset plus `overrides`; returns the epoch log as
    /// dictionaries.
    #[pyo3(signature = (overrides = None))]
    fn train(&mut self, py: Python<'_>, overrides: Option<BTreeMap<String, String>>) -> PyResult<Vec<BTreeMap<String, f64>>> {
        let mut cfg = TrainConfig::desk();
        cfg.arch = self.inner.architecture();
        for (k, v) in overrides.unwrap_or_default() {
            cfg.set(&k, &v).map_err(py_err)?;
        }
        let model = self.inner.clone();
        let (model, log) = py
            .detach(|| train::run_training(model, &cfg, &mut |_, _| {}))
            .map_err(py_err)?;
        self.inner = model;
        Ok(log
            .records
            .iter()
            .map(|r| {
                BTreeMap::from([
                    ("epoch".to_string(), r.epoch as f64),
                    ("enc_loss".to_string(), r.enc_loss),
                    ("dec_loss".to_string(), r.dec_loss),
                    ("test_loss".to_string(), r.test_loss),
                    ("batch".to_string(), r.batch as f64),
                    ("lr".to_string(), r.lr),
                ])
            })
            .collect())
    }

    /// `|f(u) - f(u')|` per position and stream for a single flipped bit.
    #[pyo3(signature = (flip_index = 20, seed = 0))]
    fn perturbation(&self, flip_index: usize, seed: u64) -> PyResult<Vec<[f64; 3]>> {
        eval::perturbation_probe(&self.inner, flip_index, seed).map_err(py_err)
    }
}

/// Classical turbo code with an exact log-MAP decoder.
#[pyclass(name = "TurboCode")]
struct PyTurboCode {
    inner: TurboCode,
}

#[pymethods]
impl PyTurboCode {
    /// `variant` is `757` or `lte`.
    #[new]
    #[pyo3(signature = (variant = "757", k = 100, interleaver_seed = 0))]
    fn new(variant: &str, k: usize, interleaver_seed: u64) -> PyResult<Self> {
        let v = match variant {
            "757" | "turbo757" => TurboVariant::Turbo757,
            "lte" | "turbolte" => TurboVariant::TurboLte,
            other => return Err(PyValueError::new_err(format!("unknown turbo variant `{other}`"))),
        };
        Ok(Self {
            inner: TurboCode::new(v, k, interleaver_seed),
        })
    }

    fn encode(&self, message: Vec<u8>) -> PyResult<Vec<[f64; 3]>> {
        let u = BitBlock::new(message).map_err(py_err)?;
        let x = self.inner.encode(&u).map_err(py_err)?;
        Ok(x.values().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    #[pyo3(signature = (received, channel = "awgn"))]
    fn decode(&self, received: Vec<[f64; 3]>, channel: &str) -> PyResult<Vec<u32>> {
        let y = RealBlock::new(received.into_iter().flatten().collect(), 3).map_err(py_err)?;
        let spec: ChannelSpec = self::channel(channel)?;
        let u = self.inner.decode(&y, &spec).map_err(py_err)?;
        Ok(u.bits().iter().map(|&b| b as u32).collect())
    }
}

/// Exact log-MAP on a single RSC trellis; returns `(posterior, extrinsic)`.
#[pyfunction]
#[pyo3(signature = (trellis, sys, par, prior))]
fn bcjr(trellis: &str, sys: Vec<f64>, par: Vec<f64>, prior: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let t = match trellis {
        "757" => Trellis::turbo757(),
        "lte" => Trellis::lte(),
        other => return Err(PyValueError::new_err(format!("unknown trellis `{other}`"))),
    };
    let out = classic::bcjr(&t, &sys, &par, &prior).map_err(py_err)?;
    Ok((out.posterior, out.extrinsic))
}

/// Passes one stream through a channel such as `awgn:snr=1` or `bsc:p=0.1`.
#[pyfunction]
#[pyo3(signature = (spec, x, seed = 0))]
fn channel_apply(spec: &str, x: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
    channel(spec)?.apply_slice(&x, &mut Rng::new(seed)).map_err(py_err)
}

fn build_coder(coder: &Bound<'_, PyAny>, k: usize, interleaver_seed: u64) -> PyResult<Box<dyn Coder>> {
    if let Ok(m) = coder.extract::<PyRef<'_, PyTurboAe>>() {
        return Ok(Box::new(m.inner.clone()));
    }
    let name: String = coder.extract()?;
    Ok(match name.as_str() {
        "turbo757" => Box::new(TurboCode::new(TurboVariant::Turbo757, k, interleaver_seed)),
        "turbolte" => Box::new(TurboCode::new(TurboVariant::TurboLte, k, interleaver_seed)),
        "uncoded" => Box::new(Uncoded { k }),
        s => match s.strip_prefix("rep").and_then(|r| r.parse::<usize>().ok()) {
            Some(r) if r >= 1 => Box::new(Repetition { r, k }),
            _ => return Err(PyValueError::new_err(format!("unknown coder `{s}`"))),
        },
    })
}

/// Monte-Carlo BER/BLER; returns the CSV text of the records.
#[pyfunction]
#[pyo3(signature = (coder, channel = "awgn", snr = vec![0.0], seed = 0, k = 100, min_errors = 100, max_bits = 1_000_000, interleaver_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn measure(
    py: Python<'_>,
    coder: &Bound<'_, PyAny>,
    channel: &str,
    snr: Vec<f64>,
    seed: u64,
    k: usize,
    min_errors: u64,
    max_bits: u64,
    interleaver_seed: u64,
) -> PyResult<String> {
    let c = build_coder(coder, k, interleaver_seed)?;
    let spec = self::channel(channel)?;
    let records = py
        .detach(|| eval::measure(c.as_ref(), &spec, &snr, stop(min_errors, max_bits), seed))
        .map_err(py_err)?;
    Ok(eval::records_to_csv(&records))
}

/// KSG mutual information in nats.
#[pyfunction]
#[pyo3(signature = (x, y, k = 4))]
fn ksg_mi(py: Python<'_>, x: Vec<f64>, y: Vec<f64>, k: usize) -> PyResult<f64> {
    py.detach(|| eval::ksg_mi_scalar(&x, &y, k)).map_err(py_err)
}

#[pymodule]
pub fn pyturbolab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTurboAe>()?;
    m.add_class::<PyTurboCode>()?;
    m.add_function(wrap_pyfunction!(bcjr, m)?)?;
    m.add_function(wrap_pyfunction!(channel_apply, m)?)?;
    m.add_function(wrap_pyfunction!(measure, m)?)?;
    m.add_function(wrap_pyfunction!(ksg_mi, m)?)?;
    m.add("CSV_HEADER", eval::CSV_HEADER)?;
    Ok(())
}
