//! Model file format.
//!
//! ```text
//! magic      8 bytes   "APEMNET\n"
//! version    u32 LE
//! manifest   u64 LE length + UTF-8 JSON (layer list, input shape, parameter table)
//! weights    u64 LE byte length + little-endian f64 values
//! checksum   32 bytes  SHA-256 of everything above
//! ```
//!
//! Parameters are stored layer by layer, weight before bias, in the order the
//! manifest's parameter table lists them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layer, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"APEMNET\n";
const CHECKSUM_LEN: usize = 32;
const KNOWN_KINDS: [&str; 5] = ["dense", "conv2d", "relu", "maxpool2d", "flatten"];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<serde_json::Value>,
    parameters: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    layer: usize,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

pub fn encode_model<S: Scalar>(net: &Network<S>) -> Vec<u8> {
    let mut parameters = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        for (name, t) in [("weight", layer.weight()), ("bias", layer.bias())] {
            parameters.push(ParamEntry {
                layer: i,
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                count: t.len(),
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers: net
            .specs()
            .iter()
            .map(|s| serde_json::to_value(s).expect("layer spec serializes"))
            .collect(),
        parameters,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(text.len() + blob.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of model data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

pub fn decode_model<S: Scalar>(bytes: &[u8], origin: &str) -> Result<Network<S>> {
    if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
        return Err(Error::Checksum(origin.to_string()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body)[..] != *checksum {
        return Err(Error::Checksum(origin.to_string()));
    }

    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format(format!(
            "{origin}: not an apemkit model file"
        )));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let mlen = r.u64()?;
    let text = std::str::from_utf8(r.take(mlen)?)
        .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let blen = r.u64()?;
    let blob = r.take(blen)?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after weight blob".into()));
    }
    if blen % 8 != 0 {
        return Err(Error::Format(
            "weight blob length is not a multiple of 8".into(),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let specs = manifest
        .layers
        .iter()
        .map(parse_layer)
        .collect::<Result<Vec<_>>>()?;

    let param = |layer: usize, name: &str| -> Result<Tensor<S>> {
        let entry = manifest
            .parameters
            .iter()
            .find(|p| p.layer == layer && p.name == name)
            .ok_or_else(|| Error::Format(format!("layer {layer} is missing its {name}")))?;
        let end = entry
            .offset
            .checked_add(entry.count)
            .filter(|&e| e <= values.len())
            .ok_or_else(|| Error::Format(format!("layer {layer} {name} exceeds weight blob")))?;
        Tensor::new(
            entry.shape.clone(),
            values[entry.offset..end]
                .iter()
                .map(|&v| S::of(v))
                .collect(),
        )
        .map_err(|e| Error::Format(format!("layer {layer} {name}: {e}")))
    };

    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let layer = if spec.param_shapes().is_some() {
            Layer::new(spec, param(i, "weight")?, param(i, "bias")?)?
        } else {
            Layer::zeroed(spec)
        };
        layers.push(layer);
    }
    Network::new(manifest.input_shape, layers)
}

fn parse_layer(v: &serde_json::Value) -> Result<LayerSpec> {
    let kind = v
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Format("layer entry without a `kind` string".into()))?;
    if !KNOWN_KINDS.contains(&kind) {
        return Err(Error::UnknownLayerKind(kind.to_string()));
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("{kind} layer: {e}")))
}

pub fn save_model<S: Scalar>(net: &Network<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Network<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}
