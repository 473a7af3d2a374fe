//! JSON checkpoints for single adapters.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "kind": "tri",
//!   "layout": "row-major",
//!   "spec": { "m": 4, "n": 3, "r1": 2, "r2": 2, "mode": "abc", "init": "output_preserving", "seed": 7, "scale": 1.0 },
//!   "matrices": {
//!     "A": { "rows": 2, "cols": 3, "encoding": "base64", "data": "..." },
//!     "B": { "rows": 2, "cols": 2, "encoding": "array", "data": [0.0, 0.0, 0.0, 0.0] },
//!     "C": { "rows": 4, "cols": 2, "encoding": "base64", "data": "..." }
//!   }
//! }
//! ```
//!
//! `base64` data is the standard-alphabet encoding of the entries as
//! little-endian IEEE-754 doubles, so it round-trips bit-exactly. `array`
//! holds plain JSON numbers. LoRA checkpoints use `"kind": "lora"`, a spec of
//! `{m, n, r, scale}`, and matrices `A` and `B`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterSpec, LoraAdapter, TriAdapter};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const LAYOUT: &str = "row-major";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    #[default]
    Base64,
    Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Payload {
    Text(String),
    Numbers(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    encoding: Encoding,
    data: Payload,
}

impl EncodedMatrix {
    fn encode(m: &Matrix, encoding: Encoding) -> Self {
        let data = match encoding {
            Encoding::Base64 => {
                let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
                Payload::Text(STANDARD.encode(bytes))
            }
            Encoding::Array => Payload::Numbers(m.as_slice().to_vec()),
        };
        EncodedMatrix {
            rows: m.rows(),
            cols: m.cols(),
            encoding,
            data,
        }
    }

    fn decode(&self, name: &str) -> Result<Matrix> {
        let values = match (&self.encoding, &self.data) {
            (Encoding::Base64, Payload::Text(s)) => {
                let bytes = STANDARD
                    .decode(s)
                    .map_err(|e| Error::invalid(format!("matrix {name}: bad base64: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::invalid(format!(
                        "matrix {name}: byte length {} is not a multiple of 8",
                        bytes.len()
                    )));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect()
            }
            (Encoding::Array, Payload::Numbers(v)) => v.clone(),
            (enc, _) => {
                return Err(Error::invalid(format!(
                    "matrix {name}: data does not match encoding {enc:?}"
                )))
            }
        };
        Matrix::from_vec(self.rows, self.cols, values).map_err(|e| Error::invalid(format!("matrix {name}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
enum KindSpec {
    Tri(AdapterSpec),
    Lora(LoraSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    #[serde(flatten)]
    kind: KindSpec,
    layout: String,
    matrices: BTreeMap<String, EncodedMatrix>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Tri(TriAdapter),
    Lora(LoraAdapter),
}

impl Checkpoint {
    pub fn to_json(&self, encoding: Encoding) -> Result<String> {
        let mut matrices = BTreeMap::new();
        let kind = match self {
            Checkpoint::Tri(ad) => {
                matrices.insert("A".to_string(), EncodedMatrix::encode(ad.a(), encoding));
                matrices.insert("B".to_string(), EncodedMatrix::encode(ad.b(), encoding));
                matrices.insert("C".to_string(), EncodedMatrix::encode(ad.c(), encoding));
                KindSpec::Tri(ad.spec().clone())
            }
            Checkpoint::Lora(ad) => {
                matrices.insert("A".to_string(), EncodedMatrix::encode(&ad.a, encoding));
                matrices.insert("B".to_string(), EncodedMatrix::encode(&ad.b, encoding));
                KindSpec::Lora(LoraSpec {
                    m: ad.b.rows(),
                    n: ad.a.cols(),
                    r: ad.rank(),
                    scale: ad.scale,
                })
            }
        };
        let env = Envelope {
            format_version: FORMAT_VERSION,
            kind,
            layout: LAYOUT.to_string(),
            matrices,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        if env.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                env.format_version
            )));
        }
        if env.layout != LAYOUT {
            return Err(Error::invalid(format!("unsupported layout {:?}", env.layout)));
        }
        let get = |name: &str| -> Result<Matrix> {
            env.matrices
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing matrix {name}")))?
                .decode(name)
        };
        let expected: &[&str] = match env.kind {
            KindSpec::Tri(_) => &["A", "B", "C"],
            KindSpec::Lora(_) => &["A", "B"],
        };
        if let Some(extra) = env.matrices.keys().find(|k| !expected.contains(&k.as_str())) {
            return Err(Error::invalid(format!("unexpected matrix {extra}")));
        }
        match &env.kind {
            KindSpec::Tri(spec) => Ok(Checkpoint::Tri(TriAdapter::from_parts(
                spec.clone(),
                get("A")?,
                get("B")?,
                get("C")?,
            )?)),
            KindSpec::Lora(spec) => {
                let mut ad = LoraAdapter::from_parts(get("A")?, get("B")?)?;
                if (ad.b.rows(), ad.a.cols(), ad.rank()) != (spec.m, spec.n, spec.r) {
                    return Err(Error::invalid(format!(
                        "lora matrices are {}x{} rank {}, spec says {}x{} rank {}",
                        ad.b.rows(),
                        ad.a.cols(),
                        ad.rank(),
                        spec.m,
                        spec.n,
                        spec.r
                    )));
                }
                ad.scale = spec.scale;
                Ok(Checkpoint::Lora(ad))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{InitScheme, TrainMode};

    fn tri() -> TriAdapter {
        TriAdapter::init(AdapterSpec::new(5, 4, 2, TrainMode::Cb, 9).with_init(InitScheme::LecunAll)).unwrap()
    }

    #[test]
    fn tri_round_trips_bit_exactly() {
        let ck = Checkpoint::Tri(tri());
        for enc in [Encoding::Base64, Encoding::Array] {
            let text = ck.to_json(enc).unwrap();
            assert!(text.contains("\"layout\": \"row-major\""));
            assert!(text.contains("\"format_version\": 1"));
            let back = Checkpoint::from_json(&text).unwrap();
            let (Checkpoint::Tri(a), Checkpoint::Tri(b)) = (&ck, &back) else {
                panic!()
            };
            assert_eq!(a.spec(), b.spec());
            assert!(a.a().bit_eq(b.a()) && a.b().bit_eq(b.b()) && a.c().bit_eq(b.c()));
        }
    }

    #[test]
    fn lora_round_trips() {
        let mut ad = LoraAdapter::init(6, 3, 2, 1).unwrap();
        ad.b.set(1, 1, -0.1);
        ad.scale = 2.0;
        let back = Checkpoint::from_json(&Checkpoint::Lora(ad.clone()).to_json(Encoding::Base64).unwrap()).unwrap();
        assert_eq!(back, Checkpoint::Lora(ad));
    }

    #[test]
    fn base64_is_little_endian_row_major() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let EncodedMatrix {
            data: Payload::Text(s), ..
        } = EncodedMatrix::encode(&m, Encoding::Base64)
        else {
            panic!()
        };
        let mut expected = 1.0f64.to_le_bytes().to_vec();
        expected.extend(2.0f64.to_le_bytes());
        assert_eq!(STANDARD.decode(s).unwrap(), expected);
    }

    #[test]
    fn rejects_bad_documents() {
        let good = Checkpoint::Tri(tri()).to_json(Encoding::Array).unwrap();
        let cases = [
            good.replace("\"format_version\": 1", "\"format_version\": 2"),
            good.replace("row-major", "column-major"),
            good.replace("\"C\"", "\"D\""),
            good.replace("\"rows\": 5", "\"rows\": 6"),
            good.replace("\"layout\"", "\"extra\": 0, \"layout\""),
        ];
        for text in cases {
            assert!(Checkpoint::from_json(&text).is_err(), "{text}");
        }
    }
}
