use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use neuralmerger::netdef::{Layer, Model};
use neuralmerger::quantize::{compression_stats, MemberGeometry, MergedModel, TaskLayer};
use serde_json::{json, Value};

use crate::cmd::{load_artifact, Artifact};

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Print every field as JSON.
    #[arg(long)]
    pub json: bool,
    /// List every codebook instead of a per-layer summary.
    #[arg(long)]
    pub codebooks: bool,
}

pub fn run(args: InspectArgs) -> Result<()> {
    let mut out = String::new();
    match load_artifact(&args.model)? {
        Artifact::Model(model) if args.json => out = serde_json::to_string_pretty(&model_json(&model)?)? + "\n",
        Artifact::Model(model) => print_model(&mut out, &model)?,
        Artifact::Merged(merged) if args.json => {
            out = serde_json::to_string_pretty(&merged_json(&merged)?)? + "\n"
        }
        Artifact::Merged(merged) => print_merged(&mut out, &merged, args.codebooks)?,
    }
    // A closed pipe (`inspect | head`) is not an error.
    match std::io::stdout().lock().write_all(out.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn c_label(c: usize) -> String {
    if c == usize::MAX {
        "lossless".into()
    } else {
        c.to_string()
    }
}

fn describe(layer: &Layer) -> String {
    match layer {
        Layer::Conv(c) => {
            let k = &c.kernels;
            format!("conv {}x{}x{} x {}", k.k_rows(), k.k_cols(), k.depth(), k.count())
        }
        Layer::Fc(f) => format!("fc {} -> {}", f.n_in, f.n_out),
        Layer::MaxPool { window, stride } => format!("maxpool {window}/{stride}"),
        Layer::Relu => "relu".into(),
        Layer::Flatten => "flatten".into(),
        Layer::Softmax => "softmax".into(),
    }
}

fn geometry(g: &MemberGeometry) -> String {
    match *g {
        MemberGeometry::Conv { n, m, d, p } => format!("{n}x{m}x{d} x {p}"),
        MemberGeometry::Fc { n_in, n_out } => format!("{n_in} -> {n_out}"),
    }
}

fn model_json(model: &Model) -> Result<Value> {
    let shapes = model.validate()?;
    let layers: Vec<Value> = model
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| json!({"layer": describe(l), "output": s, "params": l.param_count()}))
        .collect();
    Ok(json!({
        "kind": "model",
        "name": model.name,
        "input_shape": model.input_shape,
        "classes": model.classes,
        "params": model.param_count(),
        "layers": layers,
        "provenance": model.provenance,
    }))
}

fn print_model(out: &mut String, model: &Model) -> Result<()> {
    let shapes = model.validate()?;
    writeln!(
        out,
        "model `{}`: input {}, {} classes, {} parameters",
        model.name,
        model.input_shape,
        model.classes,
        model.param_count()
    )?;
    for (i, (layer, shape)) in model.layers.iter().zip(&shapes).enumerate() {
        writeln!(out, "  {i:>2} {:<24} -> {shape}  ({} params)", describe(layer), layer.param_count())?;
    }
    print_provenance(out, model.provenance.as_ref())
}

fn merged_json(mm: &MergedModel) -> Result<Value> {
    let report = stats(mm)?;
    let elayers: Vec<Value> = mm
        .elayers
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "kind": e.kind,
                "params": e.params,
                "members": e.members.iter().map(|m| json!({
                    "task": mm.tasks[m.task].name,
                    "layer": m.layer,
                    "geometry": m.geometry,
                    "books": m.books,
                })).collect::<Vec<_>>(),
                "codebooks": e.codebooks.iter().map(|b| json!({
                    "segment": b.segment,
                    "words": b.count(),
                    "vectors": b.vectors,
                    "quant_error": b.quant_error,
                    "members": b.members.iter().map(|&t| mm.tasks[t].name.clone()).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let tasks: Vec<Value> = mm
        .tasks
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "input_shape": t.input_shape,
                "classes": t.classes,
                "layers": t.layers.iter().map(|l| match l {
                    TaskLayer::Quantized { elayer, .. } => json!({"merged": mm.elayers[*elayer].name}),
                    TaskLayer::Plain(layer) => json!({"plain": describe(layer)}),
                }).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "kind": "merged",
        "tasks": tasks,
        "plan": mm.plan,
        "params": mm.params,
        "kmeans": mm.kmeans,
        "elayers": elayers,
        "compression": report,
        "provenance": mm.provenance,
    }))
}

/// Storage accounting against the dense models the merged tasks compute,
/// which share the originals' geometry.
fn stats(mm: &MergedModel) -> Result<neuralmerger::quantize::CompressionReport> {
    let dense = (0..mm.tasks.len())
        .map(|t| mm.dequantized_model(t))
        .collect::<neuralmerger::Result<Vec<_>>>()?;
    let refs: Vec<&Model> = dense.iter().collect();
    Ok(compression_stats(&refs, mm))
}

fn print_merged(out: &mut String, mm: &MergedModel, all_books: bool) -> Result<()> {
    let names: Vec<&str> = mm.tasks.iter().map(|t| t.name.as_str()).collect();
    writeln!(out, "merged model: {} tasks ({})", names.len(), names.join(", "))?;
    let report = stats(mm)?;
    for (e, sizes) in mm.elayers.iter().zip(&report.layers) {
        let kind = format!("{:?}", e.kind).to_lowercase();
        writeln!(out, "{} ({kind}): r={} C={}", e.name, e.params.r, c_label(e.params.c))?;
        for m in &e.members {
            writeln!(
                out,
                "  task {:<10} layer {:>2}  {}  {} segments",
                mm.tasks[m.task].name,
                m.layer,
                geometry(&m.geometry),
                m.segments()
            )?;
        }
        if all_books {
            for (i, b) in e.codebooks.iter().enumerate() {
                let members: Vec<&str> = b.members.iter().map(|&t| names[t]).collect();
                writeln!(
                    out,
                    "  codebook {i:>3}: segment {:>3}, {:>5} words, {:>7} vectors, error {:.6e}, used by {}",
                    b.segment,
                    b.count(),
                    b.vectors,
                    b.quant_error,
                    members.join("+")
                )?;
            }
        } else {
            let books = &e.codebooks;
            let shared = books.iter().filter(|b| b.is_shared()).count();
            let words = books.iter().map(|b| b.count());
            let (lo, hi) = (words.clone().min().unwrap_or(0), words.max().unwrap_or(0));
            let vectors: usize = books.iter().map(|b| b.vectors).sum();
            let error: f64 = books.iter().map(|b| b.quant_error).sum();
            writeln!(
                out,
                "  codebooks: {} ({shared} shared), {lo}..{hi} words, {vectors} vectors, total error {error:.6e}",
                books.len()
            )?;
        }
        writeln!(
            out,
            "  storage: {} B dense -> {} B codebooks + {} B indices ({:.2}x)",
            sizes.original_bytes, sizes.codebook_bytes, sizes.index_bytes, sizes.ratio
        )?;
    }
    writeln!(
        out,
        "compression: coefficients {:.2}x ({} -> {} B), whole model {:.2}x ({} -> {} B)",
        report.coefficients.ratio,
        report.coefficients.original_bytes,
        report.coefficients.merged_bytes,
        report.whole_model.ratio,
        report.whole_model.original_bytes,
        report.whole_model.merged_bytes
    )?;
    writeln!(out, "kmeans: {}", serde_json::to_string(&mm.kmeans)?)?;
    writeln!(out, "plan: {}", serde_json::to_string(&mm.plan)?)?;
    print_provenance(out, mm.provenance.as_ref())
}

fn print_provenance(out: &mut String, p: Option<&Value>) -> Result<()> {
    match p {
        Some(p) => writeln!(out, "provenance: {}", serde_json::to_string(p)?)?,
        None => writeln!(out, "provenance: none")?,
    }
    Ok(())
}
