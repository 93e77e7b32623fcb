//! Python bindings: phantoms, preprocessing, the classifier, ensembling and
//! the metric. Arrays cross the boundary as flat lists plus a shape.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use traumakit::ensemble::{self, PatientProbs, PatientSet, SliceProbs};
use traumakit::metric::{self, MetricOptions};
use traumakit::nn::{self, Tensor};
use traumakit::phantom::{self, PhantomConfig};
use traumakit::pipeline;
use traumakit::traumanet::{self as tn, TraumaNetConfig};
use traumakit::volumeprep::{self, LabelVector, PrepParams};

fn err(e: traumakit::Error) -> PyErr {
    match e {
        traumakit::Error::Config(_) | traumakit::Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "LabelSchema")]
struct PySchema(traumakit::LabelSchema);

#[pymethods]
impl PySchema {
    /// The default schema, or one parsed from JSON.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let s: traumakit::LabelSchema = from_json(json)?;
        s.validate().map_err(err)?;
        Ok(Self(s))
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    fn group_names(&self) -> Vec<String> {
        self.0.groups.iter().map(|g| g.name.clone()).collect()
    }

    fn total_states(&self) -> usize {
        self.0.total_states()
    }

    fn __repr__(&self) -> String {
        format!("LabelSchema(groups={:?})", self.group_names())
    }
}

fn schema_or_default(schema: Option<&PySchema>) -> traumakit::LabelSchema {
    schema.map(|s| s.0.clone()).unwrap_or_default()
}

#[pyclass(name = "PhantomStudy")]
struct PyStudy(phantom::PhantomStudy);

#[pymethods]
impl PyStudy {
    #[getter]
    fn study_id(&self) -> String {
        self.0.study_id.clone()
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.0.dims()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.patient_labels.clone()
    }

    /// Flat intensities in depth, height, width order.
    fn volume(&self) -> Vec<f32> {
        self.0.volume.data().to_vec()
    }

    fn organ_mask(&self, organ: usize) -> PyResult<Vec<u8>> {
        self.0
            .organ_masks
            .get(organ)
            .map(|m| m.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no organ {organ}")))
    }

    fn lesion_mask(&self) -> Vec<u8> {
        self.0.lesion_mask.data().to_vec()
    }

    /// Preprocess with ground-truth masks; returns (flat T*3*H*W data, [T, 3, H, W]).
    #[pyo3(signature = (prep_json=None, schema=None))]
    fn prepare(&self, prep_json: Option<&str>, schema: Option<&PySchema>) -> PyResult<(Vec<f32>, [usize; 4])> {
        let params: PrepParams = from_json(prep_json)?;
        let schema = schema_or_default(schema);
        let p = volumeprep::prepare_study(&self.0, &self.0.organ_masks, &schema, &params).map_err(err)?;
        let shape = [p.seq_len(), 3, p.sequence.height, p.sequence.width];
        Ok((p.sequence.data, shape))
    }
}

/// Generate one phantom study.
#[pyfunction]
#[pyo3(signature = (seed, config_json=None, schema=None))]
fn generate_study(seed: u64, config_json: Option<&str>, schema: Option<&PySchema>) -> PyResult<PyStudy> {
    let cfg: PhantomConfig = from_json(config_json)?;
    phantom::generate_study(seed, &cfg, &schema_or_default(schema))
        .map(PyStudy)
        .map_err(err)
}

/// Write a phantom dataset directory; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (root_seed, count, out, config_json=None, schema=None))]
fn generate_dataset(root_seed: u64, count: usize, out: PathBuf, config_json: Option<&str>, schema: Option<&PySchema>) -> PyResult<String> {
    let cfg: PhantomConfig = from_json(config_json)?;
    let m = phantom::generate_dataset(root_seed, count, &cfg, &schema_or_default(schema), &out).map_err(err)?;
    to_json(&m)
}

#[pyfunction]
fn normalize_labels(values: Vec<f64>) -> PyResult<Vec<f64>> {
    volumeprep::normalize_labels(&LabelVector::new(values))
        .map(|v| v.values)
        .map_err(err)
}

#[pyfunction]
fn combine_patient_label(values: Vec<f64>, patient: f64) -> PyResult<Vec<f64>> {
    volumeprep::combine_patient_label(&LabelVector::new(values), patient)
        .map(|v| v.values)
        .map_err(err)
}

/// Soft Dice loss between two equally sized flat arrays.
#[pyfunction]
fn dice_loss(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    let n = pred.len();
    let p = Tensor::from_vec(&[n], pred).map_err(err)?;
    let t = Tensor::from_vec(&[truth.len()], truth).map_err(err)?;
    nn::dice_loss(&p, &t, nn::loss::DICE_EPS).map_err(err)
}

#[pyclass(name = "TraumaNet")]
struct PyTraumaNet(tn::TraumaNet);

#[pymethods]
impl PyTraumaNet {
    /// A freshly initialised network from a JSON config (defaults otherwise).
    #[new]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: TraumaNetConfig = from_json(config_json)?;
        tn::TraumaNet::new(cfg, seed).map(Self).map_err(err)
    }

    /// Load a checkpoint directory written by `traumakit train`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        pipeline::load_model(&dir).map(|(m, _)| Self(m)).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        to_json(self.0.config())
    }

    fn parameter_count(&self) -> usize {
        self.0.params.numel()
    }

    /// Class scores for a `[B, T, 3, H, W]` input; returns (flat scores, [B, T, C]).
    fn forward(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = Tensor::from_vec(&shape, data).map_err(err)?;
        let out = self.0.forward(&x).map_err(err)?;
        let s = out.class_scores.shape().to_vec();
        Ok((out.class_scores.into_vec(), s))
    }
}

fn to_patients(p: BTreeMap<String, Vec<f64>>) -> PatientSet {
    p.into_iter().map(|(k, values)| (k, PatientProbs { values })).collect()
}

fn from_patients(p: PatientSet) -> BTreeMap<String, Vec<f64>> {
    p.into_iter().map(|(k, v)| (k, v.values)).collect()
}

/// Mean over models of per-slice probabilities.
#[pyfunction]
fn slice_ensemble(models: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let preds: Vec<SliceProbs> = models.into_iter().map(|slices| SliceProbs { slices }).collect();
    ensemble::slice_ensemble(&preds).map(|s| s.slices).map_err(err)
}

/// Per-patient max aggregation of per-slice probabilities.
#[pyfunction]
#[pyo3(signature = (slices, schema=None))]
fn patient_aggregate(slices: Vec<Vec<f64>>, schema: Option<&PySchema>) -> PyResult<Vec<f64>> {
    ensemble::patient_aggregate(&SliceProbs { slices }, &schema_or_default(schema))
        .map(|p| p.values)
        .map_err(err)
}

#[pyfunction]
fn final_ensemble(sets: Vec<BTreeMap<String, Vec<f64>>>) -> PyResult<BTreeMap<String, Vec<f64>>> {
    let sets: Vec<PatientSet> = sets.into_iter().map(to_patients).collect();
    ensemble::final_ensemble(&sets).map(from_patients).map_err(err)
}

/// Score patient predictions against true state indices; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (preds, truth, schema=None, options_json=None))]
fn evaluate(
    preds: BTreeMap<String, Vec<f64>>,
    truth: BTreeMap<String, Vec<usize>>,
    schema: Option<&PySchema>,
    options_json: Option<&str>,
) -> PyResult<String> {
    let opts: MetricOptions = from_json(options_json)?;
    let r = metric::evaluate(&to_patients(preds), &truth, &schema_or_default(schema), &opts).map_err(err)?;
    to_json(&r)
}

#[pymodule]
fn traumakit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", pipeline::VERSION)?;
    m.add_class::<PySchema>()?;
    m.add_class::<PyStudy>()?;
    m.add_class::<PyTraumaNet>()?;
    m.add_function(wrap_pyfunction!(generate_study, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_labels, m)?)?;
    m.add_function(wrap_pyfunction!(combine_patient_label, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(slice_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(patient_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(final_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
