//! JSON model files.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so a save/load cycle is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::lstm::{Linear, LstmLayer};
use super::model::{ArchConfig, Params, Role, SeqModel};
use crate::error::{Error, Result};
use crate::personalize::PersonalizationMethod;
use crate::trace::DomainVocab;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LstmRepr {
    w_ih: Vec<Vec<f64>>,
    w_hh: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerRepr {
    Lstm(LstmRepr),
    Head(HeadRepr),
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    version: u32,
    arch: ArchConfig,
    vocab_fingerprint: String,
    role: Role,
    temperature: f64,
    #[serde(default)]
    method: Option<PersonalizationMethod>,
    #[serde(default)]
    parent: Option<String>,
    params: BTreeMap<String, LayerRepr>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(name: &str, rows: Vec<Vec<f64>>, shape: (usize, usize)) -> Result<Array2<f64>> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Serialization(format!(
            "{name} does not have shape {}x{}",
            shape.0, shape.1
        )));
    }
    Ok(Array2::from_shape_vec(shape, flat).expect("shape checked"))
}

fn vector(name: &str, v: Vec<f64>, len: usize) -> Result<Array1<f64>> {
    if v.len() != len {
        return Err(Error::Serialization(format!("{name} has {} entries, expected {len}", v.len())));
    }
    Ok(Array1::from(v))
}

impl SeqModel {
    pub fn to_json(&self) -> Result<String> {
        let mut params = BTreeMap::new();
        for (i, l) in self.params.lstm.iter().enumerate() {
            params.insert(
                format!("lstm{i}"),
                LayerRepr::Lstm(LstmRepr {
                    w_ih: rows(&l.w_ih),
                    w_hh: rows(&l.w_hh),
                    bias: l.bias.to_vec(),
                }),
            );
        }
        params.insert(
            "head".into(),
            LayerRepr::Head(HeadRepr {
                weight: rows(&self.params.head.weight),
                bias: self.params.head.bias.to_vec(),
            }),
        );
        let repr = ModelRepr {
            version: FORMAT_VERSION,
            arch: self.arch.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            role: self.role,
            temperature: self.temperature,
            method: self.method,
            parent: self.parent.clone(),
            params,
        };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut repr: ModelRepr = serde_json::from_str(text)?;
        if repr.version != FORMAT_VERSION {
            return Err(Error::Serialization(format!("unsupported model format {}", repr.version)));
        }
        repr.arch.validate()?;
        let arch = repr.arch;
        let mut lstm = Vec::new();
        let mut input = arch.input_width;
        for (i, &h) in arch.hidden_sizes.iter().enumerate() {
            let name = format!("lstm{i}");
            let Some(LayerRepr::Lstm(l)) = repr.params.remove(&name) else {
                return Err(Error::Serialization(format!("missing LSTM layer {name}")));
            };
            lstm.push(LstmLayer {
                w_ih: matrix(&format!("{name}.w_ih"), l.w_ih, (input, 4 * h))?,
                w_hh: matrix(&format!("{name}.w_hh"), l.w_hh, (h, 4 * h))?,
                bias: vector(&format!("{name}.bias"), l.bias, 4 * h)?,
            });
            input = h;
        }
        let head = match repr.params.remove("head") {
            Some(LayerRepr::Head(h)) => Linear {
                weight: matrix("head.weight", h.weight, (input, arch.output_size))?,
                bias: vector("head.bias", h.bias, arch.output_size)?,
            },
            _ => return Err(Error::Serialization("missing head layer".into())),
        };
        if let Some(extra) = repr.params.keys().next() {
            return Err(Error::Serialization(format!("unexpected layer {extra}")));
        }
        Ok(SeqModel {
            arch,
            params: Params { lstm, head },
            vocab_fingerprint: repr.vocab_fingerprint,
            role: repr.role,
            method: repr.method,
            parent: repr.parent,
            temperature: repr.temperature,
        })
    }
}

pub fn save_model(model: &SeqModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SeqModel> {
    SeqModel::from_json(&fs::read_to_string(path)?)
}

/// Loads a model and checks that it was built over `vocab`.
pub fn load_model_for(path: impl AsRef<Path>, vocab: &DomainVocab) -> Result<SeqModel> {
    let model = load_model(path)?;
    model.check_vocab(vocab)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqnet::model::init_model;
    use crate::trace::Scale;

    #[test]
    fn round_trip_is_bit_exact() {
        let v = DomainVocab::from_locations(Scale::Building, ["a", "b", "c"].map(String::from));
        let mut m = init_model(&ArchConfig::stacked(v.encoded_width(), 5, 2, 3), &v, 4).unwrap();
        m.params.lstm[0].w_ih[[0, 0]] = 0.1 + 0.2;
        m.params.head.bias[1] = -1.0 / 3.0;
        m.temperature = 0.05;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&m, &path).unwrap();
        let back = load_model_for(&path, &v).unwrap();
        assert_eq!(back, m);
        let other = DomainVocab::from_locations(Scale::Building, ["a", "b", "d"].map(String::from));
        assert!(matches!(load_model_for(&path, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let v = DomainVocab::from_locations(Scale::Building, ["a", "b"].map(String::from));
        let m = init_model(&ArchConfig::stacked(v.encoded_width(), 3, 1, 2), &v, 0).unwrap();
        let text = m.to_json().unwrap().replace("\"hidden_sizes\":[3]", "\"hidden_sizes\":[4]");
        assert!(matches!(SeqModel::from_json(&text), Err(Error::Serialization(_))));
    }
}
