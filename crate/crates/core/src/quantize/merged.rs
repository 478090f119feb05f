use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decompose::{copy_segment, segment_count};
use super::kmeans::{derive_seed, kmeans, KMeansConfig};
use crate::align::{validate, AlignmentPlan};
use crate::error::{Error, Result};
use crate::netdef::{ConvLayer, FcLayer, Layer, LayerKind, Model};
use crate::tensor::{KernelSet, Shape3};

/// Segment length and codeword count for one merged layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub r: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// Keep every distinct segment vector as its own codeword.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub lossless: bool,
}

impl LayerParams {
    pub fn new(r: usize, c: usize) -> Self {
        Self {
            r,
            c,
            lossless: false,
        }
    }

    pub fn lossless(r: usize) -> Self {
        Self {
            r,
            c: usize::MAX,
            lossless: true,
        }
    }
}

/// Per-layer parameters keyed by layer name (`conv1`, `fc1`, ...; matched
/// case-insensitively). Unpaired layers are looked up as `<model>.<layer>`,
/// then `<layer>`, then the `default` key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergeParams(pub BTreeMap<String, LayerParams>);

impl MergeParams {
    pub fn uniform(params: LayerParams) -> Self {
        Self(BTreeMap::from([("default".to_string(), params)]))
    }

    pub fn with(mut self, name: &str, params: LayerParams) -> Self {
        self.0.insert(name.to_ascii_lowercase(), params);
        self
    }

    fn get(&self, key: &str) -> Option<LayerParams> {
        self.0
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| *v)
    }

    pub fn lookup(&self, keys: &[&str]) -> Result<LayerParams> {
        keys.iter()
            .chain(std::iter::once(&"default"))
            .find_map(|k| self.get(k))
            .ok_or_else(|| Error::Config(format!("no (r, C) parameters for layer `{}`", keys[0])))
    }
}

/// Codewords of one depth segment, stored codeword-major (`count x r`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCodebook {
    /// 0-based segment index `v`.
    pub segment: usize,
    pub r: usize,
    pub words: Vec<f64>,
    /// Number of segment vectors clustered into this book (`C_AB` when shared).
    pub vectors: usize,
    /// Sum of squared distances at build time.
    pub quant_error: f64,
    /// Indices into the owning layer's `members` that use this book.
    pub members: Vec<usize>,
}

impl SegmentCodebook {
    pub fn count(&self) -> usize {
        self.words.len() / self.r
    }

    #[inline]
    pub fn word(&self, c: usize) -> &[f64] {
        &self.words[c * self.r..(c + 1) * self.r]
    }

    pub fn is_shared(&self) -> bool {
        self.members.len() > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MemberGeometry {
    Conv { n: usize, m: usize, d: usize, p: usize },
    Fc { n_in: usize, n_out: usize },
}

impl MemberGeometry {
    /// Length of the vector that gets segmented (`d` or `N_I`).
    pub fn depth(&self) -> usize {
        match *self {
            MemberGeometry::Conv { d, .. } => d,
            MemberGeometry::Fc { n_in, .. } => n_in,
        }
    }

    /// Number of depth vectors per segment (`p * n * m` or `N_O`).
    pub fn vectors_per_segment(&self) -> usize {
        match *self {
            MemberGeometry::Conv { n, m, p, .. } => p * n * m,
            MemberGeometry::Fc { n_out, .. } => n_out,
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            MemberGeometry::Conv { p, .. } => p,
            MemberGeometry::Fc { n_out, .. } => n_out,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.depth() * self.vectors_per_segment()
    }
}

/// One model's view of a merged layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EMember {
    pub task: usize,
    /// Index of the layer in the task's original layer list.
    pub layer: usize,
    pub geometry: MemberGeometry,
    /// Codebook index (into the layer's `codebooks`) for each segment `v`.
    pub books: Vec<usize>,
    /// Codeword per depth vector and segment: for Conv at
    /// `((t * n + a) * m + b) * rho + v`, for FC at `o * rho + v`.
    pub assign: Vec<u32>,
    pub bias: Vec<f64>,
}

impl EMember {
    pub fn segments(&self) -> usize {
        self.books.len()
    }

    /// Dense weights with every segment replaced by its codeword.
    pub fn dequantized(&self, codebooks: &[SegmentCodebook], r: usize) -> Result<Layer> {
        let rho = self.segments();
        let d = self.geometry.depth();
        let vectors = self.geometry.vectors_per_segment();
        let mut data = vec![0.0; vectors * d];
        for q in 0..vectors {
            let row = &mut data[q * d..(q + 1) * d];
            for v in 0..rho {
                let book = &codebooks[self.books[v]];
                let c = self.assign[q * rho + v] as usize;
                if c >= book.count() {
                    return Err(Error::CodewordRange {
                        index: c,
                        count: book.count(),
                    });
                }
                let start = v * r;
                let end = (start + r).min(d);
                row[start..end].copy_from_slice(&book.word(c)[..end - start]);
            }
        }
        Ok(match self.geometry {
            MemberGeometry::Conv { n, m, d, p } => Layer::Conv(ConvLayer {
                kernels: KernelSet::new(p, n, m, d, data)?,
                bias: self.bias.clone(),
            }),
            MemberGeometry::Fc { n_in, n_out } => {
                Layer::Fc(FcLayer::new(n_in, n_out, data, self.bias.clone())?)
            }
        })
    }
}

/// A merged (E-Conv or E-FC) layer: codebooks shared by its members.
#[derive(Debug, Clone, PartialEq)]
pub struct ELayer {
    pub name: String,
    pub kind: LayerKind,
    pub params: LayerParams,
    pub codebooks: Vec<SegmentCodebook>,
    pub members: Vec<EMember>,
}

impl ELayer {
    pub fn r(&self) -> usize {
        self.params.r
    }

    pub fn member_for(&self, task: usize) -> Option<&EMember> {
        self.members.iter().find(|m| m.task == task)
    }

    pub fn dequantized(&self, member: usize) -> Result<Layer> {
        self.members[member].dequantized(&self.codebooks, self.r())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskLayer {
    Quantized { elayer: usize, member: usize },
    Plain(Layer),
}

/// Layer sequence of one original model inside the merged model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub name: String,
    pub input_shape: Shape3,
    pub classes: usize,
    pub layers: Vec<TaskLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub plan: AlignmentPlan,
    pub params: MergeParams,
    pub kmeans: KMeansConfig,
    pub tasks: Vec<TaskModel>,
    pub elayers: Vec<ELayer>,
    pub provenance: Option<serde_json::Value>,
}

impl MergedModel {
    /// Resolves a task by name, or by letter (`A`, `B`, ...) / 0-based index.
    pub fn task_index(&self, task: &str) -> Result<usize> {
        task_index(self.tasks.iter().map(|t| t.name.as_str()), task)
    }

    /// The dense network task `task` actually computes.
    pub fn dequantized_model(&self, task: usize) -> Result<Model> {
        let tm = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let layers = tm
            .layers
            .iter()
            .map(|l| match l {
                TaskLayer::Plain(layer) => Ok(layer.clone()),
                TaskLayer::Quantized { elayer, member } => self.elayers[*elayer].dequantized(*member),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            name: tm.name.clone(),
            input_shape: tm.input_shape,
            classes: tm.classes,
            layers,
            provenance: None,
        })
    }

    /// `(elayer, member)` for each quantized layer of `task`, in layer order.
    pub fn quantized_layers(&self, task: usize) -> Vec<(usize, usize, usize)> {
        self.tasks[task]
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                TaskLayer::Quantized { elayer, member } => Some((i, *elayer, *member)),
                TaskLayer::Plain(_) => None,
            })
            .collect()
    }
}

pub(crate) fn task_index<'a>(names: impl Iterator<Item = &'a str>, task: &str) -> Result<usize> {
    let names: Vec<&str> = names.collect();
    if let Some(i) = names.iter().position(|n| *n == task) {
        return Ok(i);
    }
    let bytes = task.as_bytes();
    if bytes.len() == 1 && bytes[0].is_ascii_uppercase() {
        let i = (bytes[0] - b'A') as usize;
        if i < names.len() {
            return Ok(i);
        }
    }
    if let Ok(i) = task.parse::<usize>() {
        if i < names.len() {
            return Ok(i);
        }
    }
    Err(Error::UnknownTask(task.to_string()))
}

fn geometry(layer: &Layer) -> Option<MemberGeometry> {
    match layer {
        Layer::Conv(c) => Some(MemberGeometry::Conv {
            n: c.kernels.k_rows(),
            m: c.kernels.k_cols(),
            d: c.kernels.depth(),
            p: c.kernels.count(),
        }),
        Layer::Fc(f) => Some(MemberGeometry::Fc {
            n_in: f.n_in,
            n_out: f.n_out,
        }),
        _ => None,
    }
}

fn weights(layer: &Layer) -> (&[f64], &[f64]) {
    match layer {
        Layer::Conv(c) => (c.kernels.data(), &c.bias),
        Layer::Fc(f) => (&f.weights, &f.bias),
        _ => (&[], &[]),
    }
}

/// Stacks segment `v` of every depth vector of the given layers, in member
/// order. This is the vector set one codebook is learned from.
pub fn segment_vectors(layers: &[&Layer], v: usize, r: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut seg = vec![0.0; r];
    for layer in layers {
        let Some(geom) = geometry(layer) else { continue };
        let (w, _) = weights(layer);
        let d = geom.depth();
        for q in 0..geom.vectors_per_segment() {
            copy_segment(&w[q * d..(q + 1) * d], v, r, &mut seg);
            out.extend_from_slice(&seg);
        }
    }
    out
}

struct PendingLayer {
    name: String,
    kind: LayerKind,
    params: LayerParams,
    /// (task, layer index) per member.
    members: Vec<(usize, usize)>,
}

/// Quantizes every Conv/FC layer except the classifiers. Plan rows become
/// shared E-layers; unpaired layers get model-private codebooks.
pub fn build_merged(
    models: &[&Model],
    plan: &AlignmentPlan,
    params: &MergeParams,
    cfg: &KMeansConfig,
) -> Result<MergedModel> {
    validate(plan, models).map_err(|violations| {
        Error::Plan(
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    for m in models {
        m.validate()?;
    }

    let mut pending = Vec::new();
    let row_sets = [(LayerKind::Conv, &plan.conv_pairs), (LayerKind::Fc, &plan.fc_pairs)];
    for (kind, rows) in row_sets {
        for (i, row) in rows.iter().enumerate() {
            let name = format!("{}{}", if kind == LayerKind::Conv { "conv" } else { "fc" }, i + 1);
            let params = params.lookup(&[&name])?;
            let members = row
                .iter()
                .enumerate()
                .map(|(task, r)| (task, r.resolve(models[task]).expect("validated plan")))
                .collect();
            pending.push(PendingLayer {
                name,
                kind,
                params,
                members,
            });
        }
    }
    for (task, model) in models.iter().enumerate() {
        let classifier = model.classifier_index();
        for layer_ref in &plan.unpaired[task] {
            let idx = layer_ref.resolve(model).expect("validated plan");
            if Some(idx) == classifier {
                continue;
            }
            let name = format!("{}.{layer_ref}", model.name);
            let params = params.lookup(&[&name, &layer_ref.to_string()])?;
            pending.push(PendingLayer {
                name,
                kind: layer_ref.kind,
                params,
                members: vec![(task, idx)],
            });
        }
    }

    // validate parameters and lay out clustering jobs
    struct Job {
        layer: usize,
        segment: usize,
        members: Vec<usize>,
    }
    let mut jobs = Vec::new();
    for (li, p) in pending.iter().enumerate() {
        let LayerParams { r, c, lossless } = p.params;
        if r == 0 {
            return Err(Error::Config(format!("layer {}: r must be at least 1", p.name)));
        }
        if c == 0 {
            return Err(Error::Config(format!("layer {}: C must be at least 1", p.name)));
        }
        let geoms: Vec<MemberGeometry> = p
            .members
            .iter()
            .map(|&(t, l)| geometry(&models[t].layers[l]).expect("weighted layer"))
            .collect();
        if geoms.iter().all(|g| r > g.depth()) {
            return Err(Error::Config(format!(
                "layer {}: r = {r} exceeds the depth of every merged layer",
                p.name
            )));
        }
        let rhos: Vec<usize> = geoms.iter().map(|g| segment_count(g.depth(), r)).collect();
        let max_rho = *rhos.iter().max().expect("non-empty row");
        for v in 0..max_rho {
            let members: Vec<usize> = (0..rhos.len()).filter(|&k| rhos[k] > v).collect();
            let c_ab: usize = members.iter().map(|&k| geoms[k].vectors_per_segment()).sum();
            if members.len() > 1 && !lossless && c >= c_ab {
                return Err(Error::Config(format!(
                    "layer {}: C = {c} does not compress {c_ab} shared segment vectors",
                    p.name
                )));
            }
            jobs.push(Job {
                layer: li,
                segment: v,
                members,
            });
        }
    }

    let results = jobs
        .par_iter()
        .map(|job| {
            let p = &pending[job.layer];
            let layers: Vec<&Layer> = job
                .members
                .iter()
                .map(|&k| {
                    let (t, l) = p.members[k];
                    &models[t].layers[l]
                })
                .collect();
            let data = segment_vectors(&layers, job.segment, p.params.r);
            let seeded = KMeansConfig {
                seed: derive_seed(cfg.seed, &[job.layer as u64, job.segment as u64]),
                ..cfg.clone()
            };
            kmeans(&data, p.params.r, p.params.c, &seeded)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut elayers: Vec<ELayer> = pending
        .iter()
        .map(|p| ELayer {
            name: p.name.clone(),
            kind: p.kind,
            params: p.params,
            codebooks: Vec::new(),
            members: p
                .members
                .iter()
                .map(|&(task, layer)| {
                    let geom = geometry(&models[task].layers[layer]).expect("weighted layer");
                    let rho = segment_count(geom.depth(), p.params.r);
                    EMember {
                        task,
                        layer,
                        geometry: geom,
                        books: vec![usize::MAX; rho],
                        assign: vec![0; geom.vectors_per_segment() * rho],
                        bias: weights(&models[task].layers[layer]).1.to_vec(),
                    }
                })
                .collect(),
        })
        .collect();
    for (job, res) in jobs.iter().zip(results) {
        let layer = &mut elayers[job.layer];
        let book = layer.codebooks.len();
        let mut offset = 0;
        for &k in &job.members {
            let member = &mut layer.members[k];
            let rho = member.segments();
            let count = member.geometry.vectors_per_segment();
            member.books[job.segment] = book;
            for q in 0..count {
                member.assign[q * rho + job.segment] = res.assignments[offset + q];
            }
            offset += count;
        }
        layer.codebooks.push(SegmentCodebook {
            segment: job.segment,
            r: layer.params.r,
            vectors: offset,
            quant_error: res.error,
            members: job.members.clone(),
            words: res.centroids,
        });
    }

    let mut slot: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for (li, layer) in elayers.iter().enumerate() {
        for (mi, m) in layer.members.iter().enumerate() {
            slot.insert((m.task, m.layer), (li, mi));
        }
    }
    let tasks = models
        .iter()
        .enumerate()
        .map(|(t, model)| TaskModel {
            name: model.name.clone(),
            input_shape: model.input_shape,
            classes: model.classes,
            layers: model
                .layers
                .iter()
                .enumerate()
                .map(|(i, layer)| match slot.get(&(t, i)) {
                    Some(&(elayer, member)) => TaskLayer::Quantized { elayer, member },
                    None => TaskLayer::Plain(layer.clone()),
                })
                .collect(),
        })
        .collect();

    Ok(MergedModel {
        plan: plan.clone(),
        params: params.clone(),
        kmeans: cfg.clone(),
        tasks,
        elayers,
        provenance: None,
    })
}
