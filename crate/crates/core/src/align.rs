//! Layer correspondence between the models being merged.
//!
//! A plan has one column per model and one row per merged layer. Entries are
//! 1-based ordinals: row `[2, 3]` of `conv_pairs` merges the second Conv of
//! the first model with the third Conv of the second. In plan files an entry
//! may also name a layer explicitly (`"fc1"`, `"conv2"`), which is how a
//! cross-type pairing can be written down and then rejected by [`validate`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::netdef::{LayerKind, Model};

/// A Conv or FC layer identified by its 1-based ordinal among layers of its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerRef {
    pub kind: LayerKind,
    pub ordinal: usize,
}

impl LayerRef {
    pub fn conv(ordinal: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            ordinal,
        }
    }

    pub fn fc(ordinal: usize) -> Self {
        Self {
            kind: LayerKind::Fc,
            ordinal,
        }
    }

    /// Index into `model.layers`, if the layer exists.
    pub fn resolve(&self, model: &Model) -> Option<usize> {
        let list = match self.kind {
            LayerKind::Conv => model.conv_indices(),
            LayerKind::Fc => model.fc_indices(),
            _ => return None,
        };
        self.ordinal.checked_sub(1).and_then(|i| list.get(i).copied())
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            _ => "layer",
        };
        write!(f, "{kind}{}", self.ordinal)
    }
}

impl std::str::FromStr for LayerRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (kind, rest) = if let Some(rest) = s.strip_prefix("conv") {
            (LayerKind::Conv, rest)
        } else if let Some(rest) = s.strip_prefix("fc") {
            (LayerKind::Fc, rest)
        } else {
            return Err(format!("layer reference `{s}` must look like conv<k> or fc<k>"));
        };
        let ordinal = rest
            .parse()
            .map_err(|_| format!("layer reference `{s}` has no ordinal"))?;
        Ok(Self { kind, ordinal })
    }
}

impl Serialize for LayerRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EntryRepr {
    Ordinal(usize),
    Named(LayerRef),
}

fn rows_to_repr(rows: &[Vec<LayerRef>], kind: LayerKind) -> Vec<Vec<EntryRepr>> {
    rows.iter()
        .map(|row| {
            row.iter()
                .map(|r| {
                    if r.kind == kind {
                        EntryRepr::Ordinal(r.ordinal)
                    } else {
                        EntryRepr::Named(*r)
                    }
                })
                .collect()
        })
        .collect()
}

fn rows_from_repr(rows: Vec<Vec<EntryRepr>>, kind: LayerKind) -> Vec<Vec<LayerRef>> {
    rows.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|e| match e {
                    EntryRepr::Ordinal(ordinal) => LayerRef { kind, ordinal },
                    EntryRepr::Named(r) => r,
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    models: Vec<String>,
    conv_pairs: Vec<Vec<EntryRepr>>,
    fc_pairs: Vec<Vec<EntryRepr>>,
    #[serde(default)]
    unpaired: Vec<Vec<LayerRef>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPlan {
    pub models: Vec<String>,
    pub conv_pairs: Vec<Vec<LayerRef>>,
    pub fc_pairs: Vec<Vec<LayerRef>>,
    /// Weighted layers of each model that no row pairs, classifiers included.
    pub unpaired: Vec<Vec<LayerRef>>,
}

impl Serialize for AlignmentPlan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PlanRepr {
            models: self.models.clone(),
            conv_pairs: rows_to_repr(&self.conv_pairs, LayerKind::Conv),
            fc_pairs: rows_to_repr(&self.fc_pairs, LayerKind::Fc),
            unpaired: self.unpaired.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AlignmentPlan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PlanRepr::deserialize(d)?;
        Ok(Self {
            models: repr.models,
            conv_pairs: rows_from_repr(repr.conv_pairs, LayerKind::Conv),
            fc_pairs: rows_from_repr(repr.fc_pairs, LayerKind::Fc),
            unpaired: repr.unpaired,
        })
    }
}

impl AlignmentPlan {
    /// All rows, Conv rows first.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<LayerRef>> {
        self.conv_pairs.iter().chain(&self.fc_pairs)
    }

    /// Recomputes `unpaired` from the rows.
    pub fn with_unpaired(mut self, models: &[&Model]) -> Self {
        self.unpaired = models
            .iter()
            .enumerate()
            .map(|(col, model)| {
                let used: BTreeSet<LayerRef> = self
                    .rows()
                    .filter_map(|row| row.get(col).copied())
                    .collect();
                weighted_refs(model)
                    .into_iter()
                    .filter(|r| !used.contains(r))
                    .collect()
            })
            .collect();
        self
    }

    /// Adds a model as a new column, pairing it with the existing rows input
    /// side first. Rows beyond the new model's depth are dropped.
    pub fn extend(&self, models: &[&Model], new_model: &Model) -> Result<Self> {
        let (convs, fcs) = mergeable_counts(new_model);
        if convs + fcs == 0 {
            return Err(Error::Plan(format!(
                "model `{}` has no mergeable layers",
                new_model.name
            )));
        }
        let grow = |rows: &[Vec<LayerRef>], count: usize, make: fn(usize) -> LayerRef| {
            rows.iter()
                .take(count)
                .enumerate()
                .map(|(i, row)| {
                    let mut row = row.clone();
                    row.push(make(i + 1));
                    row
                })
                .collect::<Vec<_>>()
        };
        let mut all: Vec<&Model> = models.to_vec();
        all.push(new_model);
        let mut names = self.models.clone();
        names.push(new_model.name.clone());
        let plan = AlignmentPlan {
            models: names,
            conv_pairs: grow(&self.conv_pairs, convs, LayerRef::conv),
            fc_pairs: grow(&self.fc_pairs, fcs, LayerRef::fc),
            unpaired: Vec::new(),
        };
        Ok(plan.with_unpaired(&all))
    }
}

fn weighted_refs(model: &Model) -> Vec<LayerRef> {
    let convs = (1..=model.conv_indices().len()).map(LayerRef::conv);
    let fcs = (1..=model.fc_indices().len()).map(LayerRef::fc);
    convs.chain(fcs).collect()
}

/// Conv count and non-classifier FC count.
fn mergeable_counts(model: &Model) -> (usize, usize) {
    (
        model.conv_indices().len(),
        model.fc_indices().len().saturating_sub(1),
    )
}

/// Input-anchored plan: the i-th Conv (and i-th non-classifier FC) of every
/// model are merged for `i` up to the shallowest model's count.
pub fn default_plan(models: &[&Model]) -> Result<AlignmentPlan> {
    if models.len() < 2 {
        return Err(Error::Plan("merging needs at least two models".into()));
    }
    let mut c_min = usize::MAX;
    let mut f_min = usize::MAX;
    for model in models {
        let (c, f) = mergeable_counts(model);
        if c + f == 0 {
            return Err(Error::Plan(format!("model `{}` has no mergeable layers", model.name)));
        }
        c_min = c_min.min(c);
        f_min = f_min.min(f);
    }
    let rows = |count: usize, make: fn(usize) -> LayerRef| {
        (1..=count)
            .map(|i| vec![make(i); models.len()])
            .collect::<Vec<_>>()
    };
    let plan = AlignmentPlan {
        models: models.iter().map(|m| m.name.clone()).collect(),
        conv_pairs: rows(c_min, LayerRef::conv),
        fc_pairs: rows(f_min, LayerRef::fc),
        unpaired: Vec::new(),
    };
    Ok(plan.with_unpaired(models))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewModels(usize),
    ModelNames { expected: Vec<String>, found: Vec<String> },
    RowWidth { row: usize, width: usize, models: usize },
    MissingLayer { model: usize, layer: LayerRef },
    MixedTypes { row: usize, layers: Vec<LayerRef> },
    WrongList { row: usize, layer: LayerRef },
    ClassifierPaired { model: usize, layer: LayerRef },
    NotIncreasing { model: usize, previous: LayerRef, next: LayerRef },
    Duplicate { model: usize, layer: LayerRef },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewModels(n) => write!(f, "plan covers {n} model(s), need at least 2"),
            Violation::ModelNames { expected, found } => {
                write!(f, "plan models {found:?} do not match {expected:?}")
            }
            Violation::RowWidth { row, width, models } => {
                write!(f, "row {row} has {width} entries for {models} models")
            }
            Violation::MissingLayer { model, layer } => {
                write!(f, "model {model} has no layer {layer}")
            }
            Violation::MixedTypes { row, layers } => {
                let names: Vec<String> = layers.iter().map(ToString::to_string).collect();
                write!(f, "row {row} pairs layers of different types: {}", names.join(", "))
            }
            Violation::WrongList { row, layer } => {
                write!(f, "row {row}: {layer} listed under the wrong layer type")
            }
            Violation::ClassifierPaired { model, layer } => {
                write!(f, "model {model}: classifier {layer} cannot be merged")
            }
            Violation::NotIncreasing { model, previous, next } => {
                write!(f, "model {model}: {next} follows {previous}, mapping must strictly increase")
            }
            Violation::Duplicate { model, layer } => {
                write!(f, "model {model}: {layer} appears in more than one row")
            }
        }
    }
}

/// Reports every invariant violation; `Ok` iff there are none.
pub fn validate(plan: &AlignmentPlan, models: &[&Model]) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if plan.models.len() < 2 {
        out.push(Violation::TooFewModels(plan.models.len()));
    }
    let names: Vec<String> = models.iter().map(|m| m.name.clone()).collect();
    if names != plan.models {
        out.push(Violation::ModelNames {
            expected: names,
            found: plan.models.clone(),
        });
    }
    let width = models.len();
    let lists = [
        (LayerKind::Conv, &plan.conv_pairs, 0usize),
        (LayerKind::Fc, &plan.fc_pairs, plan.conv_pairs.len()),
    ];
    for (kind, rows, row_base) in lists {
        for (r, row) in rows.iter().enumerate() {
            let row_no = row_base + r + 1;
            if row.len() != width {
                out.push(Violation::RowWidth {
                    row: row_no,
                    width: row.len(),
                    models: width,
                });
            }
            if row.iter().any(|l| l.kind != row[0].kind) {
                out.push(Violation::MixedTypes {
                    row: row_no,
                    layers: row.clone(),
                });
            }
            for layer in row {
                if layer.kind != kind {
                    out.push(Violation::WrongList {
                        row: row_no,
                        layer: *layer,
                    });
                }
            }
            for (col, layer) in row.iter().enumerate().take(width) {
                let model = models[col];
                if layer.resolve(model).is_none() {
                    out.push(Violation::MissingLayer { model: col, layer: *layer });
                } else if layer.kind == LayerKind::Fc && Some(layer.ordinal) == Some(model.fc_indices().len()) {
                    out.push(Violation::ClassifierPaired { model: col, layer: *layer });
                }
            }
        }
    }
    // per-column monotonicity over layer positions, Conv rows then FC rows
    for (col, model) in models.iter().enumerate() {
        let mut seen = BTreeSet::new();
        let mut previous: Option<(usize, LayerRef)> = None;
        for row in plan.rows() {
            let Some(layer) = row.get(col) else { continue };
            if !seen.insert(*layer) {
                out.push(Violation::Duplicate { model: col, layer: *layer });
            }
            let Some(pos) = layer.resolve(model) else { continue };
            if let Some((prev_pos, prev)) = previous {
                if pos <= prev_pos {
                    out.push(Violation::NotIncreasing {
                        model: col,
                        previous: prev,
                        next: *layer,
                    });
                }
            }
            previous = Some((pos, *layer));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::Arch;
    use crate::tensor::Shape3;

    fn lenet(name: &str) -> Model {
        Arch::LeNet.build(name, Shape3::new(28, 28, 1), 10, 0).unwrap()
    }

    /// Conv count `convs`, one hidden FC, built by stacking extra 3x3 convs.
    fn deep(name: &str, convs: usize) -> Model {
        use crate::netdef::{ConvLayer, Layer};
        use crate::tensor::KernelSet;
        let mut model = Arch::Small {
            conv: (4, 4),
            hidden: 8,
            kernel: 3,
        }
        .build(name, Shape3::new(8, 8, 1), 2, 1)
        .unwrap();
        for _ in 2..convs {
            let extra = Layer::Conv(ConvLayer {
                kernels: KernelSet::zeros(4, 3, 3, 4).unwrap(),
                bias: vec![0.0; 4],
            });
            model.layers.insert(3, extra);
        }
        model.validate().unwrap();
        model
    }

    #[test]
    fn identical_lenets_pair_layer_by_layer() {
        let (a, b) = (lenet("a"), lenet("b"));
        let plan = default_plan(&[&a, &b]).unwrap();
        assert_eq!(
            plan.conv_pairs,
            vec![vec![LayerRef::conv(1); 2], vec![LayerRef::conv(2); 2]]
        );
        assert_eq!(plan.fc_pairs, vec![vec![LayerRef::fc(1); 2]]);
        assert_eq!(plan.unpaired, vec![vec![LayerRef::fc(2)], vec![LayerRef::fc(2)]]);
        assert_eq!(validate(&plan, &[&a, &b]), Ok(()));
    }

    #[test]
    fn surplus_convs_stay_unpaired() {
        let (a, b) = (deep("a", 2), deep("b", 5));
        let plan = default_plan(&[&a, &b]).unwrap();
        assert_eq!(plan.conv_pairs.len(), 2);
        let surplus: Vec<_> = plan.unpaired[1].iter().filter(|r| r.kind == LayerKind::Conv).collect();
        assert_eq!(surplus.len(), 3);
        assert_eq!(validate(&plan, &[&a, &b]), Ok(()));
    }

    #[test]
    fn extending_adds_a_valid_column() {
        let (a, b, c) = (lenet("a"), lenet("b"), deep("c", 3));
        let plan = default_plan(&[&a, &b]).unwrap().extend(&[&a, &b], &c).unwrap();
        assert_eq!(plan.models, vec!["a", "b", "c"]);
        assert!(plan.rows().all(|row| row.len() == 3));
        assert_eq!(validate(&plan, &[&a, &b, &c]), Ok(()));
    }

    #[test]
    fn cross_type_pair_is_reported() {
        let (a, b) = (lenet("a"), lenet("b"));
        let json = r#"{"models": ["a", "b"], "conv_pairs": [[1, "fc1"]], "fc_pairs": []}"#;
        let plan: AlignmentPlan = serde_json::from_str(json).unwrap();
        let errs = validate(&plan, &[&a, &b]).unwrap_err();
        assert!(errs.iter().any(|v| matches!(v, Violation::MixedTypes { .. })), "{errs:?}");
    }

    #[test]
    fn decreasing_indices_are_reported() {
        let (a, b) = (lenet("a"), lenet("b"));
        let json = r#"{"models": ["a", "b"], "conv_pairs": [[2, 1], [1, 2]], "fc_pairs": []}"#;
        let plan: AlignmentPlan = serde_json::from_str(json).unwrap();
        let errs = validate(&plan, &[&a, &b]).unwrap_err();
        // first column runs 2 -> 1; the second (1 -> 2) is fine
        assert_eq!(
            errs,
            vec![Violation::NotIncreasing {
                model: 0,
                previous: LayerRef::conv(2),
                next: LayerRef::conv(1),
            }]
        );
    }

    #[test]
    fn classifier_pairing_is_reported() {
        let (a, b) = (lenet("a"), lenet("b"));
        let json = r#"{"models": ["a", "b"], "conv_pairs": [], "fc_pairs": [[2, 2]]}"#;
        let plan: AlignmentPlan = serde_json::from_str(json).unwrap();
        let errs = validate(&plan, &[&a, &b]).unwrap_err();
        assert!(errs.iter().any(|v| matches!(v, Violation::ClassifierPaired { .. })));
    }

    #[test]
    fn plan_json_round_trips() {
        let (a, b) = (lenet("a"), lenet("b"));
        let plan = default_plan(&[&a, &b]).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains("\"conv_pairs\":[[1,1],[2,2]]"), "{text}");
        let back: AlignmentPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn model_without_mergeable_layers_is_rejected() {
        use crate::netdef::{ConvLayer, FcLayer, Layer};
        use crate::tensor::KernelSet;
        let bare = Model {
            name: "bare".into(),
            input_shape: Shape3::new(2, 2, 1),
            classes: 2,
            layers: vec![
                Layer::Conv(ConvLayer {
                    kernels: KernelSet::zeros(1, 1, 1, 1).unwrap(),
                    bias: vec![0.0],
                }),
                Layer::Flatten,
                Layer::Fc(FcLayer::new(4, 2, vec![0.0; 8], vec![0.0; 2]).unwrap()),
                Layer::Softmax,
            ],
            provenance: None,
        };
        // a conv is mergeable, so strip it down to the classifier alone
        let mut only_fc = bare.clone();
        only_fc.layers.remove(0);
        only_fc.input_shape = Shape3::new(2, 2, 1);
        assert!(default_plan(&[&bare, &only_fc]).is_err());
    }
}
