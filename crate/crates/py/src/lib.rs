//! Python bindings: an `Engine` class wrapping either engine in `f64`, plus
//! script running. Errors surface as `choreo_py.ChoreoError`.

use choreo::baseline::BaselineEngine;
use choreo::cost::RunTotals;
use choreo::engine::{Choreographer, DecodeCall, DecodeOutput, Engine, FinishReason, PrefillCall, DEFAULT_CAPACITY};
use choreo::fixtures::cookbook_config;
use choreo::script::{run_script, write_trace, Script};
use choreo::{MessageId, ModelConfig, SamplingParams};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(choreo_py, ChoreoError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    ChoreoError::new_err(e.to_string())
}

fn config(preset: &str, config_json: Option<&str>) -> PyResult<ModelConfig> {
    let cfg = match (config_json, preset) {
        (Some(text), _) => serde_json::from_str(text).map_err(err)?,
        (None, "default") => ModelConfig::default(),
        (None, "tiny") => ModelConfig::tiny(),
        (None, "cookbook") => cookbook_config(),
        (None, other) => return Err(err(format!("unknown preset {other:?}"))),
    };
    Ok(cfg)
}

enum Inner {
    Choreo(Engine<f64>),
    Baseline(BaselineEngine<f64>),
}

impl Inner {
    fn get(&mut self) -> &mut dyn Choreographer {
        match self {
            Inner::Choreo(e) => e,
            Inner::Baseline(e) => e,
        }
    }

    fn get_ref(&self) -> &dyn Choreographer {
        match self {
            Inner::Choreo(e) => e,
            Inner::Baseline(e) => e,
        }
    }
}

fn ids(v: Vec<usize>) -> Vec<MessageId> {
    v.into_iter().map(MessageId).collect()
}

fn prefill_call(
    message: String,
    parents: Vec<usize>,
    offsets: Option<Vec<Option<usize>>>,
    new_offset: Option<usize>,
) -> PrefillCall {
    let mut call = PrefillCall::new(message).parents(ids(parents));
    if let Some(o) = offsets {
        call = call.offsets(o);
    }
    if let Some(n) = new_offset {
        call = call.new_offset(n);
    }
    call
}

#[allow(clippy::too_many_arguments)]
fn decode_call(
    header: String,
    parents: Vec<usize>,
    offsets: Option<Vec<Option<usize>>>,
    new_offset: Option<usize>,
    max_tokens: usize,
    temperature: Option<f64>,
    top_p: f64,
    seed: u64,
    force: Option<String>,
) -> DecodeCall {
    let sampling = match temperature {
        Some(t) => SamplingParams::temperature(t, top_p, seed, max_tokens),
        None => SamplingParams::greedy(max_tokens),
    };
    let mut call = DecodeCall::new(header).parents(ids(parents)).sampling(sampling);
    if let Some(o) = offsets {
        call = call.offsets(o);
    }
    if let Some(n) = new_offset {
        call = call.new_offset(n);
    }
    if let Some(f) = force {
        call = call.force_text(&f);
    }
    call
}

fn output<'py>(py: Python<'py>, o: &DecodeOutput) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", o.id.0)?;
    d.set_item("text", o.text())?;
    d.set_item("tokens", o.tokens.clone())?;
    d.set_item("logits", o.step_logits.clone())?;
    d.set_item(
        "finish",
        match o.finish {
            FinishReason::Eos => "eos",
            FinishReason::MaxTokens => "max_tokens",
        },
    )?;
    Ok(d)
}

fn item<'py, T: FromPyObjectOwned<'py>>(d: &Bound<'py, PyDict>, key: &str) -> PyResult<Option<T>> {
    match d.get_item(key)? {
        Some(v) if !v.is_none() => Ok(Some(v.extract().map_err(Into::into)?)),
        _ => Ok(None),
    }
}

#[pyclass(name = "Engine", module = "choreo_py")]
struct PyEngine {
    inner: Inner,
}

#[pymethods]
impl PyEngine {
    /// `kind` is "choreo" or "baseline"; `preset` is "default", "tiny" or
    /// "cookbook" unless `config_json` is given.
    #[new]
    #[pyo3(signature = (kind = "choreo", preset = "default", config_json = None, prefix_cache = true))]
    fn new(kind: &str, preset: &str, config_json: Option<&str>, prefix_cache: bool) -> PyResult<Self> {
        let cfg = config(preset, config_json)?;
        let inner = match kind {
            "choreo" => Inner::Choreo(Engine::from_config(&cfg).map_err(err)?),
            "baseline" => Inner::Baseline(BaselineEngine::from_config(&cfg).map_err(err)?.with_prefix_cache(prefix_cache)),
            other => return Err(err(format!("unknown engine {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            Inner::Choreo(_) => "choreo",
            Inner::Baseline(_) => "baseline",
        }
    }

    #[pyo3(signature = (message, parents = vec![], offsets = None, new_offset = None))]
    fn prefill(
        &mut self,
        message: String,
        parents: Vec<usize>,
        offsets: Option<Vec<Option<usize>>>,
        new_offset: Option<usize>,
    ) -> PyResult<usize> {
        let call = prefill_call(message, parents, offsets, new_offset);
        Ok(self.inner.get().prefill(call).map_err(err)?.0)
    }

    /// Each call is a dict with `message` and optional `parents`, `offsets`,
    /// `new_offset`.
    fn prefill_parallel(&mut self, calls: Vec<Bound<'_, PyDict>>) -> PyResult<Vec<usize>> {
        let calls = calls
            .iter()
            .map(|d| {
                let message: String = item(d, "message")?.ok_or_else(|| err("call needs a message"))?;
                Ok(prefill_call(
                    message,
                    item(d, "parents")?.unwrap_or_default(),
                    item(d, "offsets")?,
                    item(d, "new_offset")?,
                ))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let out = self.inner.get().prefill_parallel(calls).map_err(err)?;
        Ok(out.into_iter().map(|m| m.0).collect())
    }

    #[pyo3(signature = (
        header, parents = vec![], offsets = None, new_offset = None,
        max_tokens = 32, temperature = None, top_p = 1.0, seed = 0, force = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn decode<'py>(
        &mut self,
        py: Python<'py>,
        header: String,
        parents: Vec<usize>,
        offsets: Option<Vec<Option<usize>>>,
        new_offset: Option<usize>,
        max_tokens: usize,
        temperature: Option<f64>,
        top_p: f64,
        seed: u64,
        force: Option<String>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let call = decode_call(header, parents, offsets, new_offset, max_tokens, temperature, top_p, seed, force);
        let out = self.inner.get().decode(call).map_err(err)?;
        output(py, &out)
    }

    /// Each call is a dict with `header` and the keyword arguments of
    /// `decode`.
    fn decode_parallel<'py>(
        &mut self,
        py: Python<'py>,
        calls: Vec<Bound<'py, PyDict>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let calls = calls
            .iter()
            .map(|d| {
                let header: String = item(d, "header")?.ok_or_else(|| err("call needs a header"))?;
                Ok(decode_call(
                    header,
                    item(d, "parents")?.unwrap_or_default(),
                    item(d, "offsets")?,
                    item(d, "new_offset")?,
                    item(d, "max_tokens")?.unwrap_or(32),
                    item(d, "temperature")?,
                    item(d, "top_p")?.unwrap_or(1.0),
                    item(d, "seed")?.unwrap_or(0),
                    item(d, "force")?,
                ))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let outs = self.inner.get().decode_parallel(calls).map_err(err)?;
        outs.iter().map(|o| output(py, o)).collect()
    }

    fn message_text(&self, id: usize) -> PyResult<String> {
        self.inner.get_ref().message_text(MessageId(id)).map_err(err)
    }

    fn message_tokens(&self, id: usize) -> PyResult<Vec<u32>> {
        self.inner.get_ref().message_tokens(MessageId(id)).map_err(err)
    }

    fn message_count(&self) -> usize {
        self.inner.get_ref().message_count()
    }

    /// Cached tokens; for the baseline, tokens stored across all messages.
    fn token_count(&self) -> PyResult<usize> {
        match &self.inner {
            Inner::Choreo(e) => Ok(e.cache().token_count()),
            Inner::Baseline(e) => (0..e.message_count())
                .map(|i| e.message_tokens(MessageId(i)).map(|t| t.len()))
                .sum::<choreo::Result<usize>>()
                .map_err(err),
        }
    }

    /// Per-call costs as a JSON array.
    fn cost_log_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.get_ref().cost_log()).map_err(err)
    }

    /// Summed costs: prefill, reposition and decode FLOPs, decode calls.
    fn totals<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let t = RunTotals::from_log(self.inner.get_ref().cost_log());
        let d = PyDict::new(py);
        d.set_item("prefill_flops", t.prefill_flops)?;
        d.set_item("reposition_flops", t.reposition_flops)?;
        d.set_item("decode_flops", t.decode_flops)?;
        d.set_item("decode_calls", t.decode_steps)?;
        d.set_item("cache_hit_tokens", t.cache_hit_tokens)?;
        Ok(d)
    }

    /// Run a workflow script (JSON text) and return its trace as JSONL.
    fn run_script(&mut self, script: &str) -> PyResult<String> {
        let s = Script::parse(script).map_err(err)?;
        let trace = run_script(self.inner.get(), &s).map_err(err)?;
        Ok(write_trace(&trace, &Script::sha256(&s.to_json())))
    }
}

#[pymodule]
fn choreo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngine>()?;
    m.add("ChoreoError", m.py().get_type::<ChoreoError>())?;
    m.add("DEFAULT_CAPACITY", DEFAULT_CAPACITY)?;
    Ok(())
}
