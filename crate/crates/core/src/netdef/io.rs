use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvLayer, FcLayer, Layer, Model};
use crate::error::{FormatError, Result};
use crate::format::{read_container, write_container, BlobReader, BlobWriter};
use crate::tensor::{KernelSet, Shape3};

pub(crate) const MODEL_KIND: &str = "model";

/// Architecture entry of a manifest; weights live in named blob sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub(crate) enum LayerEntry {
    Conv {
        n: usize,
        m: usize,
        d: usize,
        p: usize,
        weights: String,
        bias: String,
    },
    Fc {
        n_in: usize,
        n_out: usize,
        weights: String,
        bias: String,
    },
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    Relu,
    Flatten,
    Softmax,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelBody {
    name: String,
    input_shape: Shape3,
    classes: usize,
    dtype: String,
    layers: Vec<LayerEntry>,
}

pub(crate) fn encode_layer(layer: &Layer, prefix: &str, blob: &mut BlobWriter) -> LayerEntry {
    match layer {
        Layer::Conv(c) => LayerEntry::Conv {
            n: c.kernels.k_rows(),
            m: c.kernels.k_cols(),
            d: c.kernels.depth(),
            p: c.kernels.count(),
            weights: blob.push_f64(format!("{prefix}.weights"), c.kernels.data()),
            bias: blob.push_f64(format!("{prefix}.bias"), &c.bias),
        },
        Layer::Fc(f) => LayerEntry::Fc {
            n_in: f.n_in,
            n_out: f.n_out,
            weights: blob.push_f64(format!("{prefix}.weights"), &f.weights),
            bias: blob.push_f64(format!("{prefix}.bias"), &f.bias),
        },
        Layer::MaxPool { window, stride } => LayerEntry::MaxPool {
            window: *window,
            stride: *stride,
        },
        Layer::Relu => LayerEntry::Relu,
        Layer::Flatten => LayerEntry::Flatten,
        Layer::Softmax => LayerEntry::Softmax,
    }
}

pub(crate) fn decode_layer(entry: &LayerEntry, blob: &mut BlobReader) -> Result<Layer> {
    Ok(match entry {
        LayerEntry::Conv {
            n,
            m,
            d,
            p,
            weights,
            bias,
        } => {
            let w = blob.f64s(weights, n * m * d * p)?;
            let b = blob.f64s(bias, *p)?;
            Layer::Conv(ConvLayer {
                kernels: KernelSet::new(*p, *n, *m, *d, w)?,
                bias: b,
            })
        }
        LayerEntry::Fc {
            n_in,
            n_out,
            weights,
            bias,
        } => {
            let w = blob.f64s(weights, n_in * n_out)?;
            let b = blob.f64s(bias, *n_out)?;
            Layer::Fc(FcLayer::new(*n_in, *n_out, w, b)?)
        }
        LayerEntry::MaxPool { window, stride } => Layer::MaxPool {
            window: *window,
            stride: *stride,
        },
        LayerEntry::Relu => Layer::Relu,
        LayerEntry::Flatten => Layer::Flatten,
        LayerEntry::Softmax => Layer::Softmax,
    })
}

/// Writes `path` (manifest) and its sibling `.nmb` blob.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut blob = BlobWriter::new();
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| encode_layer(l, &format!("layer{i}"), &mut blob))
        .collect();
    let body = ModelBody {
        name: model.name.clone(),
        input_shape: model.input_shape,
        classes: model.classes,
        dtype: "f64-le".into(),
        layers,
    };
    write_container(path.as_ref(), MODEL_KIND, &body, blob, model.provenance.as_ref())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let (body, mut blob, provenance) = read_container::<ModelBody>(path.as_ref(), MODEL_KIND)?;
    if body.dtype != "f64-le" {
        return Err(FormatError::Structure(format!("unsupported dtype `{}`", body.dtype)).into());
    }
    let layers = body
        .layers
        .iter()
        .map(|e| decode_layer(e, &mut blob))
        .collect::<Result<Vec<_>>>()?;
    blob.finish()?;
    let model = Model {
        name: body.name,
        input_shape: body.input_shape,
        classes: body.classes,
        layers,
        provenance,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::netdef::{forward_reference, Arch};
    use crate::tensor::Tensor3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        Arch::Small {
            conv: (4, 6),
            hidden: 12,
            kernel: 3,
        }
        .build("small", Shape3::new(8, 8, 2), 3, 9)
        .unwrap()
    }

    #[test]
    fn lenet_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Arch::LeNet.build("lenet", Shape3::new(28, 28, 1), 10, 4).unwrap();
        model.provenance = Some(serde_json::json!({"seed": 4}));
        let path = dir.path().join("m.nmj");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.layers.len(), model.layers.len());
        for (a, b) in model.layers.iter().zip(&back.layers) {
            match (a, b) {
                (Layer::Conv(x), Layer::Conv(y)) => {
                    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(x.kernels.data()), bits(y.kernels.data()));
                }
                _ => assert_eq!(a, b),
            }
        }
        assert_eq!(back, model);
    }

    #[test]
    fn round_trip_preserves_decisions() {
        let dir = tempfile::tempdir().unwrap();
        let model = small();
        let path = dir.path().join("s.nmj");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let x = Tensor3::from_vec(8, 8, 2, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let a = forward_reference(&model, &x).unwrap();
            let b = forward_reference(&back, &x).unwrap();
            assert_eq!(a.predicted(), b.predicted());
        }
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nmj");
        save_model(&small(), &path).unwrap();
        let blob = crate::format::blob_path(&path);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Checksum { .. })), "{err}");
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nmj");
        save_model(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"version\": 1", "\"version\": 7", 1)).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Version { found: 7, .. })), "{err}");
    }

    #[test]
    fn layer_count_mismatch_is_structural() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nmj");
        save_model(&small(), &path).unwrap();
        let mut value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        // drop the classifier (and keep softmax last) so one weight section is orphaned
        let layers = value["body"]["layers"].as_array_mut().unwrap();
        let n = layers.len();
        layers.remove(n - 2);
        std::fs::write(&path, serde_json::to_vec(&value).unwrap()).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Structure(_))), "{err}");
    }
}
