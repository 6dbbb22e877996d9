//! JSON checkpoints: every parameter is stored as `{shape, data}` where `data`
//! is base64 of the little-endian `f64` bytes. Optimizer state lives under the
//! reserved `"optim"` key.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AdamW, AutodiffError, ParamStore, Tensor};

pub const OPTIM_KEY: &str = "optim";

#[derive(Serialize, Deserialize)]
struct EncodedTensor {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct EncodedOptim {
    step: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, EncodedTensor>,
    v: BTreeMap<String, EncodedTensor>,
}

fn encode_values(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_values(name: &str, s: &str) -> Result<Vec<f64>, AutodiffError> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| AutodiffError::Checkpoint(format!("`{name}`: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(AutodiffError::Checkpoint(format!(
            "`{name}`: byte length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn encode(shape: &[usize], data: &[f64]) -> EncodedTensor {
    EncodedTensor {
        shape: shape.to_vec(),
        data: encode_values(data),
    }
}

fn decode(name: &str, e: &EncodedTensor) -> Result<Tensor, AutodiffError> {
    Tensor::new(e.shape.clone(), decode_values(name, &e.data)?)
        .map_err(|err| AutodiffError::Checkpoint(format!("`{name}`: {err}")))
}

pub fn to_json(params: &ParamStore, optim: Option<&AdamW>) -> Value {
    let mut root = Map::new();
    for (name, t) in params.iter() {
        root.insert(
            name.clone(),
            serde_json::to_value(encode(&t.shape, &t.data)).expect("serializable"),
        );
    }
    if let Some(o) = optim {
        let shape_of = |name: &String, len: usize| {
            params
                .get(name)
                .map(|t| t.shape.clone())
                .unwrap_or_else(|| vec![len])
        };
        let enc = EncodedOptim {
            step: o.step,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            m: o.first_moment
                .iter()
                .map(|(k, v)| (k.clone(), encode(&shape_of(k, v.len()), v)))
                .collect(),
            v: o.second_moment
                .iter()
                .map(|(k, v)| (k.clone(), encode(&shape_of(k, v.len()), v)))
                .collect(),
        };
        root.insert(
            OPTIM_KEY.into(),
            serde_json::to_value(enc).expect("serializable"),
        );
    }
    Value::Object(root)
}

pub fn from_json(doc: &Value) -> Result<(ParamStore, Option<AdamW>), AutodiffError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| AutodiffError::Checkpoint("checkpoint root must be an object".into()))?;
    let mut params = ParamStore::new();
    let mut optim = None;
    for (name, value) in obj {
        if name == OPTIM_KEY {
            let enc: EncodedOptim = serde_json::from_value(value.clone())
                .map_err(|e| AutodiffError::Checkpoint(format!("optim: {e}")))?;
            let mut o = AdamW::new(enc.lr, enc.weight_decay);
            o.step = enc.step;
            o.beta1 = enc.beta1;
            o.beta2 = enc.beta2;
            o.eps = enc.eps;
            for (k, t) in &enc.m {
                o.first_moment.insert(k.clone(), decode(k, t)?.data);
            }
            for (k, t) in &enc.v {
                o.second_moment.insert(k.clone(), decode(k, t)?.data);
            }
            optim = Some(o);
            continue;
        }
        let enc: EncodedTensor = serde_json::from_value(value.clone())
            .map_err(|e| AutodiffError::Checkpoint(format!("`{name}`: {e}")))?;
        params.insert(name.clone(), decode(name, &enc)?);
    }
    Ok((params, optim))
}

/// Compares a loaded store against the expected layout and lists every
/// missing, unexpected, or mis-shaped key.
pub fn check_layout(expected: &ParamStore, loaded: &ParamStore) -> Result<(), AutodiffError> {
    let mut problems = Vec::new();
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some(l) if l.shape != t.shape => problems.push(format!(
                "`{name}` has shape {:?}, expected {:?}",
                l.shape, t.shape
            )),
            Some(_) => {}
        }
    }
    for name in loaded.names() {
        if expected.get(name).is_none() {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(AutodiffError::Checkpoint(problems.join("; ")))
    }
}
