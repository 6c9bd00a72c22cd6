//! Python bindings. Boxes cross the boundary as `(x, y, w, h, src, tgt)`
//! tuples and images as [`Image`] objects holding interleaved RGB bytes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use idattn::flow::{sample_edit, PreparedTask, SamplerConfig};
use idattn::io::pnm::{decode_ppm, encode_ppm};
use idattn::io::{parse_attention, Checkpoint};
use idattn::masks::{schedule, AttnMask};
use idattn::metrics::elo::{EloConfig, GameResult, Outcome};
use idattn::model::{ModelConfig, ModelState};
use idattn::partition::BoxSpec;
use idattn::synth::{GlyphFont, SynthConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(idattn_py, IdattnError, PyException);

type BoxTuple = (usize, usize, usize, usize, String, String);

fn err(e: impl std::fmt::Display) -> PyErr {
    IdattnError::new_err(e.to_string())
}

fn boxes_from(tuples: Vec<BoxTuple>) -> Vec<BoxSpec> {
    tuples
        .into_iter()
        .map(|(x, y, w, h, src, tgt)| BoxSpec::new(x, y, w, h).with_text(&src, &tgt))
        .collect()
}

fn box_tuple(b: &BoxSpec) -> BoxTuple {
    (b.x, b.y, b.w, b.h, b.src.clone(), b.tgt.clone())
}

fn model_config(json: Option<&str>) -> PyResult<ModelConfig> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(err),
        None => Ok(ModelConfig::default()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: serde_json::Result<String>) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text.map_err(err)?,))
}

/// 8-bit RGB image.
#[pyclass(frozen, eq, skip_from_py_object, module = "idattn_py")]
#[derive(Clone, PartialEq)]
pub struct Image(idattn::image::RgbImage);

#[pymethods]
impl Image {
    #[new]
    fn new(width: usize, height: usize, data: Vec<u8>) -> PyResult<Self> {
        idattn::image::RgbImage::new(width, height, data).map(Image).map_err(err)
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, color: (u8, u8, u8)) -> Self {
        Image(idattn::image::RgbImage::filled(width, height, [color.0, color.1, color.2]))
    }

    #[staticmethod]
    fn from_ppm(bytes: &[u8]) -> PyResult<Self> {
        decode_ppm(bytes).map(Image).map_err(err)
    }

    fn to_ppm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_ppm(&self.0))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.data())
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(frozen, module = "idattn_py")]
pub struct Model(ModelState);

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|c| Model(c.model)).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_parameters()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, serde_json::to_string(&self.0.config))
    }

    #[pyo3(signature = (reference, boxes, steps = 16, schedule = "default", seed = 0))]
    fn edit(&self, reference: &Image, boxes: Vec<BoxTuple>, steps: usize, schedule: &str, seed: u64) -> PyResult<Image> {
        let sampler = SamplerConfig {
            steps,
            attention: parse_attention(schedule, &self.0.config).map_err(err)?,
        };
        sample_edit(&self.0, &reference.0, &boxes_from(boxes), &sampler, seed)
            .map(Image)
            .map_err(err)
    }
}

/// Token index sets of the joint sequence as a dict.
#[pyfunction]
#[pyo3(signature = (boxes, model_config = None))]
fn layout<'py>(py: Python<'py>, boxes: Vec<BoxTuple>, model_config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let task = PreparedTask::new(&self::model_config(model_config)?, &boxes_from(boxes)).map_err(err)?;
    json_to_py(py, serde_json::to_string(&task.layout))
}

fn mask_bytes(m: &AttnMask) -> Vec<u8> {
    (0..m.seq_len()).flat_map(|i| m.row(i).iter().map(|&a| a as u8)).collect()
}

/// `(seq_len, dis, har)` with each mask as row-major 0/1 bytes.
#[pyfunction]
#[pyo3(signature = (boxes, model_config = None))]
fn masks<'py>(
    py: Python<'py>,
    boxes: Vec<BoxTuple>,
    model_config: Option<&str>,
) -> PyResult<(usize, Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let task = PreparedTask::new(&self::model_config(model_config)?, &boxes_from(boxes)).map_err(err)?;
    Ok((
        task.layout.seq_len,
        PyBytes::new(py, &mask_bytes(&task.masks.dis)),
        PyBytes::new(py, &mask_bytes(&task.masks.har)),
    ))
}

/// Per-layer regime names of the default schedule.
#[pyfunction]
#[pyo3(name = "schedule")]
fn default_schedule(num_layers: usize, early_count: usize, late_count: usize) -> PyResult<Vec<String>> {
    let s = schedule(num_layers, early_count, late_count, None).map_err(err)?;
    Ok(s.regimes.iter().map(|r| r.to_string()).collect())
}

/// Token ids of the full text block for the given target strings.
#[pyfunction]
#[pyo3(signature = (targets, model_config = None))]
fn encode_prompt(targets: Vec<String>, model_config: Option<&str>) -> PyResult<(Vec<usize>, usize, Vec<usize>)> {
    let cfg = self::model_config(model_config)?;
    let vocab = idattn::encoder::GlyphVocab {
        max_str_len: cfg.max_str_len,
        ..Default::default()
    };
    let strings: Vec<&str> = targets.iter().map(String::as_str).collect();
    let bundle = idattn::encoder::assemble(cfg.utility_len, &strings, &vocab).map_err(err)?;
    Ok((bundle.token_ids, bundle.global_len, bundle.inst_lens))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    idattn::metrics::levenshtein(a, b)
}

#[pyfunction]
fn cer(pred: &str, tgt: &str) -> f64 {
    idattn::metrics::cer(pred, tgt)
}

/// `(mae, mse)` over pixels outside every box.
#[pyfunction]
fn region_mae_mse(reference: &Image, edited: &Image, boxes: Vec<BoxTuple>) -> PyResult<(f64, f64)> {
    idattn::metrics::region_mae_mse(&reference.0, &edited.0, &boxes_from(boxes)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (reference, edited, boxes, threshold = idattn::metrics::ATTEMPT_THRESHOLD))]
fn attempt_rate(reference: &Image, edited: &Image, boxes: Vec<BoxTuple>, threshold: f64) -> PyResult<f64> {
    idattn::metrics::attempt_rate(&reference.0, &edited.0, &boxes_from(boxes), threshold).map_err(err)
}

/// Ratings from `(a, b, result)` games where result is `"a"`, `"b"` or `"draw"`.
#[pyfunction]
#[pyo3(signature = (games, k = 32.0, init = 1200.0, epochs = 1, seed = 0))]
fn elo(games: Vec<(String, String, String)>, k: f64, init: f64, epochs: usize, seed: u64) -> PyResult<BTreeMap<String, f64>> {
    let outcomes = games
        .into_iter()
        .map(|(a, b, r)| {
            let result = match r.as_str() {
                "a" => GameResult::A,
                "b" => GameResult::B,
                "draw" => GameResult::Draw,
                other => return Err(err(format!("unknown result {other:?}"))),
            };
            Ok(Outcome { a, b, result })
        })
        .collect::<PyResult<Vec<_>>>()?;
    idattn::metrics::elo(&outcomes, &EloConfig { k, init, epochs, seed }).map_err(err)
}

/// `(reference, target, boxes)` of one synthetic sample.
#[pyfunction]
#[pyo3(signature = (seed, synth_config = None))]
fn render_sample(seed: u64, synth_config: Option<&str>) -> PyResult<(Image, Image, Vec<BoxTuple>)> {
    let cfg: SynthConfig = match synth_config {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => SynthConfig::default(),
    };
    let s = idattn::synth::render_sample(seed, &cfg).map_err(err)?;
    Ok((Image(s.reference), Image(s.target), s.boxes.iter().map(box_tuple).collect()))
}

/// Reads the glyph string rendered inside `bbox`.
#[pyfunction]
fn decode_glyphs(image: &Image, bbox: BoxTuple) -> PyResult<String> {
    let b = &boxes_from(vec![bbox])[0];
    idattn::synth::decode_glyphs(&image.0, b, &GlyphFont::default()).map_err(err)
}

#[pymodule]
pub fn idattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IdattnError", m.py().get_type::<IdattnError>())?;
    m.add_class::<Image>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(layout, m)?)?;
    m.add_function(wrap_pyfunction!(masks, m)?)?;
    m.add_function(wrap_pyfunction!(default_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(encode_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(region_mae_mse, m)?)?;
    m.add_function(wrap_pyfunction!(attempt_rate, m)?)?;
    m.add_function(wrap_pyfunction!(elo, m)?)?;
    m.add_function(wrap_pyfunction!(render_sample, m)?)?;
    m.add_function(wrap_pyfunction!(decode_glyphs, m)?)?;
    Ok(())
}
