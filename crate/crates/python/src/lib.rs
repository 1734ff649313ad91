use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use fasdg::data::{default_domains, generate_counts, SyntheticDomainSpec};
use fasdg::haf::{haf_forward, HafConfig, HafParams};
use fasdg::numerics::{self, Tensor};
use fasdg::protocol::{self as metrics, EvalRun, ThresholdPolicy};
use fasdg::tevd::{self, FeatureTriplet};
use fasdg::text::{self, EncoderKind, ImageType};
use fasdg::trainer;
use fasdg::Error;

use rand::SeedableRng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(0).max(1);
    t.values().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn run(scores: Vec<f64>, labels: Vec<u8>, threshold: Option<f64>) -> PyResult<EvalRun> {
    let r = EvalRun::new(scores, labels).map_err(py_err)?;
    Ok(match threshold {
        Some(t) => r.with_policy(ThresholdPolicy::Fixed(t)),
        None => r,
    })
}

/// Unit-normalize a vector.
#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    numerics::l2_normalize(&v).map_err(py_err)
}

#[pyfunction]
fn layer_norm(x: Vec<Vec<f64>>, gain: Vec<f64>, bias: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let g = Tensor::vector(gain).map_err(py_err)?;
    let b = Tensor::vector(bias).map_err(py_err)?;
    let out = numerics::layer_norm(&matrix(x)?, &g, &b).map_err(py_err)?;
    Ok(to_rows(&out))
}

#[pyfunction]
fn scaled_dot_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    heads: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let out = numerics::scaled_dot_attention(&matrix(q)?, &matrix(k)?, &matrix(v)?, heads).map_err(py_err)?;
    Ok(to_rows(&out))
}

/// Fused feature of an `L × D` matrix of per-layer tokens under freshly
/// initialized fusion parameters.
#[pyfunction]
#[pyo3(signature = (x, out_dim = 16, heads = 4, seed = 0))]
fn haf_feature(x: Vec<Vec<f64>>, out_dim: usize, heads: usize, seed: u64) -> PyResult<Vec<f64>> {
    let x = matrix(x)?;
    let cfg = HafConfig {
        dim: x.shape()[1],
        out_dim,
        heads,
        ..HafConfig::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = HafParams::init(cfg, &mut rng).map_err(py_err)?;
    Ok(haf_forward(&x, &params).map_err(py_err)?.vf)
}

#[pyfunction]
#[pyo3(signature = (v, tm, tn, alpha = tevd::DEFAULT_ALPHA))]
fn triplet_loss(v: Vec<f64>, tm: Vec<f64>, tn: Vec<f64>, alpha: f64) -> PyResult<f64> {
    let t = FeatureTriplet::normalized(&v, &tm, &tn).map_err(py_err)?;
    tevd::triplet_loss(&t, alpha).map_err(py_err)
}

#[pyfunction]
fn total_loss(cls: f64, tri: f64, lam: f64) -> PyResult<f64> {
    tevd::total_loss(cls, tri, lam).map_err(py_err)
}

#[pyfunction]
fn compute_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    Ok(metrics::compute_auc(&run(scores, labels, None)?))
}

/// `(hter, tau)`; the EER threshold unless `threshold` is given.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = None))]
fn compute_hter(scores: Vec<f64>, labels: Vec<u8>, threshold: Option<f64>) -> PyResult<(f64, f64)> {
    Ok(metrics::compute_hter(&run(scores, labels, threshold)?))
}

#[pyfunction]
fn compute_far_frr(scores: Vec<f64>, labels: Vec<u8>, tau: f64) -> PyResult<(f64, f64)> {
    Ok(metrics::compute_far_frr(&run(scores, labels, None)?, tau))
}

#[pyfunction]
fn prompt_digest(prompt: &str) -> String {
    text::prompt_digest(prompt)
}

#[pyclass(name = "Sample", frozen, from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: fasdg::data::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain.clone()
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn label(&self) -> u8 {
        self.inner.label
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.image.shape().to_vec()
    }

    /// Row-major `C × H × W` pixels.
    fn pixels(&self) -> Vec<f64> {
        self.inner.image.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, kind={}, domain={:?})", self.inner.id, self.inner.kind, self.inner.domain)
    }
}

fn unwrap_samples(samples: &[PySample]) -> Vec<fasdg::data::Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

/// Synthetic samples: `real`, `print` and `replay` images of one styled
/// domain.
#[pyfunction]
#[pyo3(signature = (domain, seed, real, print, replay, brightness = 0.0, contrast = 1.0, noise_sigma = 0.0, hue = 0.0, blur_radius = 0, size = 32))]
#[allow(clippy::too_many_arguments)]
fn generate_domain(
    domain: &str,
    seed: u64,
    real: usize,
    print: usize,
    replay: usize,
    brightness: f64,
    contrast: f64,
    noise_sigma: f64,
    hue: f64,
    blur_radius: usize,
    size: usize,
) -> PyResult<Vec<PySample>> {
    let spec = SyntheticDomainSpec {
        brightness,
        contrast,
        noise_sigma,
        hue,
        blur_radius,
        height: size,
        width: size,
        ..SyntheticDomainSpec::new(domain, seed)
    };
    let out = generate_counts(&spec, [real, print, replay]).map_err(py_err)?;
    Ok(out.into_iter().map(|inner| PySample { inner }).collect())
}

/// Every sample of the four default synthetic domains.
#[pyfunction]
fn synthetic_domains() -> PyResult<Vec<PySample>> {
    let mut out = Vec::new();
    for plan in default_domains() {
        out.extend(plan.generate().map_err(py_err)?.into_iter().map(|inner| PySample { inner }));
    }
    Ok(out)
}

#[pyclass(name = "PromptLibrary", frozen)]
struct PyPromptLibrary {
    inner: text::PromptLibrary,
}

#[pymethods]
impl PyPromptLibrary {
    #[staticmethod]
    fn shipped() -> Self {
        PyPromptLibrary {
            inner: text::PromptLibrary::shipped(),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPromptLibrary {
            inner: text::PromptLibrary::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyPromptLibrary {
            inner: text::PromptLibrary::parse(text, "<python>").map_err(py_err)?,
        })
    }

    fn truncated(&self, n: usize) -> PyResult<Self> {
        Ok(PyPromptLibrary {
            inner: self.inner.truncated(n).map_err(py_err)?,
        })
    }

    /// Active prompts of `kind` (`real`, `print` or `replay`).
    fn prompts(&self, kind: &str) -> PyResult<Vec<String>> {
        let ty: ImageType = kind.parse().map_err(py_err)?;
        Ok(self.inner.active(ty).to_vec())
    }

    /// `(matching, non_matching)` prompts for an image of `kind`.
    fn sample_pair(&self, kind: &str, seed: u64) -> PyResult<(String, String)> {
        let ty: ImageType = kind.parse().map_err(py_err)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = text::sample_prompt_pair(&self.inner, ty, &mut rng).map_err(py_err)?;
        Ok((p.matching, p.non_matching))
    }
}

#[pyclass(name = "TextEncoder", frozen)]
struct PyTextEncoder {
    inner: text::TextEncoder,
}

#[pymethods]
impl PyTextEncoder {
    #[new]
    #[pyo3(signature = (kind = "hash", dim = 16))]
    fn new(kind: &str, dim: usize) -> PyResult<Self> {
        let kind: EncoderKind = kind.parse().map_err(py_err)?;
        Ok(PyTextEncoder {
            inner: text::TextEncoder::hashed(kind, dim).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load_table(path: &str) -> PyResult<Self> {
        Ok(PyTextEncoder {
            inner: text::TextEncoder::load_table(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn calls(&self) -> usize {
        self.inner.calls()
    }

    fn encode(&self, prompt: &str) -> PyResult<Vec<f64>> {
        self.inner.encode(prompt).map_err(py_err)
    }
}

#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    fn new() -> Self {
        PyTrainConfig {
            inner: trainer::TrainConfig::default(),
        }
    }

    /// Small two-layer model on 16×16 images.
    #[staticmethod]
    fn micro() -> Self {
        PyTrainConfig {
            inner: trainer::TrainConfig::micro(),
        }
    }

    /// Set one key such as `train.epochs` or `model.layers`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        if self.inner.set(key, value).map_err(py_err)? {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("unknown key {key:?}")))
        }
    }

    fn items(&self) -> Vec<(String, String)> {
        self.inner.pairs()
    }
}

#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: trainer::Checkpoint::load(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: trainer::Checkpoint::from_bytes(data).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// Scores in `[0, 1]`, higher meaning live; no text is used.
    fn evaluate(&self, samples: Vec<PySample>) -> PyResult<Vec<f64>> {
        Ok(trainer::evaluate(&self.inner, &unwrap_samples(&samples)).map_err(py_err)?.scores)
    }
}

/// Train and return `(checkpoint, [(epoch, mean_loss, mean_cls, mean_tri)])`.
/// Raises if the loss becomes non-finite.
#[pyfunction]
fn train(
    py: Python<'_>,
    config: &PyTrainConfig,
    samples: Vec<PySample>,
    library: &PyPromptLibrary,
    encoder: &PyTextEncoder,
) -> PyResult<(PyCheckpoint, Vec<(usize, f64, f64, f64)>)> {
    let data = unwrap_samples(&samples);
    let out = py
        .detach(|| trainer::train(&config.inner, &data, &library.inner, &encoder.inner))
        .map_err(py_err)?;
    if let Some(msg) = out.diverged {
        return Err(py_err(Error::Diverged {
            epoch: out.checkpoint.epoch,
            message: msg,
        }));
    }
    let log = out
        .log
        .iter()
        .map(|e| (e.epoch, e.mean_loss, e.mean_cls, e.mean_tri))
        .collect();
    Ok((PyCheckpoint { inner: out.checkpoint }, log))
}

/// Run the CLI in-process; returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    fasdg::cli::main_with_args(std::iter::once("fasdg".to_string()).chain(args))
}

#[pymodule]
fn pyfasdg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_dot_attention, m)?)?;
    m.add_function(wrap_pyfunction!(haf_feature, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_auc, m)?)?;
    m.add_function(wrap_pyfunction!(compute_hter, m)?)?;
    m.add_function(wrap_pyfunction!(compute_far_frr, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_digest, m)?)?;
    m.add_function(wrap_pyfunction!(generate_domain, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_domains, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<PySample>()?;
    m.add_class::<PyPromptLibrary>()?;
    m.add_class::<PyTextEncoder>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
