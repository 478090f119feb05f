use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::KMeansConfig;
use super::merged::{
    ELayer, EMember, LayerParams, MemberGeometry, MergeParams, MergedModel, SegmentCodebook,
    TaskLayer, TaskModel,
};
use crate::align::AlignmentPlan;
use crate::error::{FormatError, Result};
use crate::format::{read_container, write_container, BlobWriter, ElemType};
use crate::netdef::io::{decode_layer, encode_layer, LayerEntry};
use crate::netdef::LayerKind;
use crate::tensor::Shape3;

pub(crate) const MERGED_KIND: &str = "merged";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TaskEntry {
    Quantized { elayer: usize, member: usize },
    Plain { layer: LayerEntry },
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskBody {
    name: String,
    input_shape: Shape3,
    classes: usize,
    layers: Vec<TaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookBody {
    segment: usize,
    count: usize,
    vectors: usize,
    quant_error: f64,
    members: Vec<usize>,
    words: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberBody {
    task: usize,
    layer: usize,
    geometry: MemberGeometry,
    books: Vec<usize>,
    assign: String,
    bias: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ELayerBody {
    name: String,
    kind: LayerKind,
    params: LayerParams,
    codebooks: Vec<CodebookBody>,
    members: Vec<MemberBody>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MergedBody {
    dtype: String,
    plan: AlignmentPlan,
    params: MergeParams,
    kmeans: KMeansConfig,
    tasks: Vec<TaskBody>,
    elayers: Vec<ELayerBody>,
}

/// Writes a merged model: codebooks as `f64` sections, assignments as packed
/// `u8`/`u16` index sections, biases and unquantized layers as `f64`.
pub fn save_merged(mm: &MergedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut blob = BlobWriter::new();
    let elayers = mm
        .elayers
        .iter()
        .enumerate()
        .map(|(li, layer)| {
            let codebooks = layer
                .codebooks
                .iter()
                .enumerate()
                .map(|(bi, b)| CodebookBody {
                    segment: b.segment,
                    count: b.count(),
                    vectors: b.vectors,
                    quant_error: b.quant_error,
                    members: b.members.clone(),
                    words: blob.push_f64(format!("e{li}.book{bi}"), &b.words),
                })
                .collect();
            let members = layer
                .members
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    let widest = m.books.iter().map(|&b| layer.codebooks[b].count()).max().unwrap_or(1);
                    MemberBody {
                        task: m.task,
                        layer: m.layer,
                        geometry: m.geometry,
                        books: m.books.clone(),
                        assign: blob.push_indices(
                            format!("e{li}.m{mi}.assign"),
                            &m.assign,
                            ElemType::for_codebook(widest),
                        ),
                        bias: blob.push_f64(format!("e{li}.m{mi}.bias"), &m.bias),
                    }
                })
                .collect();
            ELayerBody {
                name: layer.name.clone(),
                kind: layer.kind,
                params: layer.params,
                codebooks,
                members,
            }
        })
        .collect();
    let tasks = mm
        .tasks
        .iter()
        .enumerate()
        .map(|(ti, t)| TaskBody {
            name: t.name.clone(),
            input_shape: t.input_shape,
            classes: t.classes,
            layers: t
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| match l {
                    TaskLayer::Quantized { elayer, member } => TaskEntry::Quantized {
                        elayer: *elayer,
                        member: *member,
                    },
                    TaskLayer::Plain(layer) => TaskEntry::Plain {
                        layer: encode_layer(layer, &format!("t{ti}.layer{i}"), &mut blob),
                    },
                })
                .collect(),
        })
        .collect();
    let body = MergedBody {
        dtype: "f64-le".into(),
        plan: mm.plan.clone(),
        params: mm.params.clone(),
        kmeans: mm.kmeans.clone(),
        tasks,
        elayers,
    };
    write_container(path.as_ref(), MERGED_KIND, &body, blob, mm.provenance.as_ref())
}

pub fn load_merged(path: impl AsRef<Path>) -> Result<MergedModel> {
    let (body, mut blob, provenance) = read_container::<MergedBody>(path.as_ref(), MERGED_KIND)?;
    let structure = |msg: String| FormatError::Structure(msg);
    let mut elayers = Vec::with_capacity(body.elayers.len());
    for e in &body.elayers {
        let r = e.params.r;
        if r == 0 {
            return Err(structure(format!("layer `{}` has r = 0", e.name)).into());
        }
        let codebooks = e
            .codebooks
            .iter()
            .map(|b| {
                Ok(SegmentCodebook {
                    segment: b.segment,
                    r,
                    words: blob.f64s(&b.words, b.count * r)?,
                    vectors: b.vectors,
                    quant_error: b.quant_error,
                    members: b.members.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let members = e
            .members
            .iter()
            .map(|m| {
                let rho = m.geometry.depth().div_ceil(r);
                if m.books.len() != rho || m.books.iter().any(|&b| b >= codebooks.len()) {
                    return Err(structure(format!("layer `{}`: bad codebook map", e.name)).into());
                }
                let assign = blob.indices(&m.assign, m.geometry.vectors_per_segment() * rho)?;
                let bias = blob.f64s(&m.bias, m.geometry.outputs())?;
                Ok(EMember {
                    task: m.task,
                    layer: m.layer,
                    geometry: m.geometry,
                    books: m.books.clone(),
                    assign,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        elayers.push(ELayer {
            name: e.name.clone(),
            kind: e.kind,
            params: e.params,
            codebooks,
            members,
        });
    }
    let mut tasks = Vec::with_capacity(body.tasks.len());
    for t in &body.tasks {
        let layers = t
            .layers
            .iter()
            .map(|entry| match entry {
                TaskEntry::Quantized { elayer, member } => {
                    if elayers.get(*elayer).is_none_or(|l| l.members.get(*member).is_none()) {
                        return Err(structure(format!("task `{}` references a missing layer", t.name)).into());
                    }
                    Ok(TaskLayer::Quantized {
                        elayer: *elayer,
                        member: *member,
                    })
                }
                TaskEntry::Plain { layer } => Ok(TaskLayer::Plain(decode_layer(layer, &mut blob)?)),
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(TaskModel {
            name: t.name.clone(),
            input_shape: t.input_shape,
            classes: t.classes,
            layers,
        });
    }
    blob.finish()?;
    let mm = MergedModel {
        plan: body.plan,
        params: body.params,
        kmeans: body.kmeans,
        tasks,
        elayers,
        provenance,
    };
    for t in 0..mm.tasks.len() {
        mm.dequantized_model(t)?.validate()?;
    }
    Ok(mm)
}
