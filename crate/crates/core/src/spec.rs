//! Properties, specifications and satisfaction functions.
//!
//! A satisfaction function is nonnegative exactly on the outputs that satisfy
//! a property. Output sets are never built explicitly.

use crate::model::{Hyperbox, Model, ModelError, Result};
use crate::qp::{solve_qp, ConvexQp, QpStatus};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Threshold a verifier checks satisfaction against.
pub const VERIFICATION_THRESHOLD: f64 = 0.0;
/// Margin removal aims for so that repaired points are strictly satisfied.
pub const SATISFACTION_CONSTANT: f64 = 1e-4;

const POLYTOPE_MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTerm {
    pub a: Vec<f64>,
    pub c: f64,
}

impl AffineTerm {
    pub fn new(a: Vec<f64>, c: f64) -> Self {
        AffineTerm { a, c }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.a.iter().zip(y).map(|(a, y)| a * y).sum::<f64>() + self.c
    }

    /// Smallest value of the term over a box of outputs.
    pub fn lower_bound(&self, y: &Hyperbox) -> f64 {
        let mut v = self.c;
        for (j, &a) in self.a.iter().enumerate() {
            v += if a >= 0.0 { a * y.lo()[j] } else { a * y.hi()[j] };
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SatDoc", into = "SatDoc")]
pub enum SatisfactionFn {
    Affine(AffineTerm),
    MinOfAffine(Vec<AffineTerm>),
    MaxOfAffine(Vec<AffineTerm>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SatDoc {
    #[serde(rename = "type")]
    kind: String,
    terms: Vec<AffineTerm>,
}

impl TryFrom<SatDoc> for SatisfactionFn {
    type Error = String;

    fn try_from(doc: SatDoc) -> std::result::Result<Self, String> {
        let SatDoc { kind, mut terms } = doc;
        if terms.is_empty() {
            return Err("satisfaction function needs at least one term".into());
        }
        let dim = terms[0].a.len();
        if dim == 0 || terms.iter().any(|t| t.a.len() != dim) {
            return Err("satisfaction terms must share a nonzero output dimension".into());
        }
        match kind.as_str() {
            "affine" if terms.len() == 1 => Ok(SatisfactionFn::Affine(terms.remove(0))),
            "affine" => Err("affine satisfaction function takes exactly one term".into()),
            "min_affine" => Ok(SatisfactionFn::MinOfAffine(terms)),
            "max_affine" => Ok(SatisfactionFn::MaxOfAffine(terms)),
            other => Err(format!("unknown satisfaction function type {other:?}")),
        }
    }
}

impl From<SatisfactionFn> for SatDoc {
    fn from(s: SatisfactionFn) -> Self {
        let (kind, terms) = match s {
            SatisfactionFn::Affine(t) => ("affine", vec![t]),
            SatisfactionFn::MinOfAffine(ts) => ("min_affine", ts),
            SatisfactionFn::MaxOfAffine(ts) => ("max_affine", ts),
        };
        SatDoc {
            kind: kind.to_string(),
            terms,
        }
    }
}

impl SatisfactionFn {
    pub fn affine(a: Vec<f64>, c: f64) -> Self {
        SatisfactionFn::Affine(AffineTerm::new(a, c))
    }

    pub fn terms(&self) -> &[AffineTerm] {
        match self {
            SatisfactionFn::Affine(t) => std::slice::from_ref(t),
            SatisfactionFn::MinOfAffine(ts) | SatisfactionFn::MaxOfAffine(ts) => ts,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.terms()[0].a.len()
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.output_dim() {
            return Err(ModelError::Dimension {
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        Ok(self.eval_unchecked(y))
    }

    fn eval_unchecked(&self, y: &[f64]) -> f64 {
        match self {
            SatisfactionFn::Affine(t) => t.eval(y),
            SatisfactionFn::MinOfAffine(ts) => ts.iter().map(|t| t.eval(y)).fold(f64::INFINITY, f64::min),
            SatisfactionFn::MaxOfAffine(ts) => {
                ts.iter().map(|t| t.eval(y)).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Index of the term attaining the value; the lowest index wins ties.
    pub fn active_term(&self, y: &[f64]) -> usize {
        let ts = self.terms();
        let mut best = 0;
        let mut bv = ts[0].eval(y);
        for (k, t) in ts.iter().enumerate().skip(1) {
            let v = t.eval(y);
            let better = match self {
                SatisfactionFn::MaxOfAffine(_) => v > bv,
                _ => v < bv,
            };
            if better {
                best = k;
                bv = v;
            }
        }
        best
    }

    /// A subgradient with respect to the output: the active term's slope.
    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        self.terms()[self.active_term(y)].a.clone()
    }

    /// Sound lower bound over a box of outputs.
    pub fn lower_bound(&self, y: &Hyperbox) -> f64 {
        match self {
            SatisfactionFn::Affine(t) => t.lower_bound(y),
            SatisfactionFn::MinOfAffine(ts) => ts
                .iter()
                .map(|t| t.lower_bound(y))
                .fold(f64::INFINITY, f64::min),
            SatisfactionFn::MaxOfAffine(ts) => ts
                .iter()
                .map(|t| t.lower_bound(y))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Same function minus `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let shift = |t: &AffineTerm| AffineTerm::new(t.a.clone(), t.c - delta);
        match self {
            SatisfactionFn::Affine(t) => SatisfactionFn::Affine(shift(t)),
            SatisfactionFn::MinOfAffine(ts) => SatisfactionFn::MinOfAffine(ts.iter().map(shift).collect()),
            SatisfactionFn::MaxOfAffine(ts) => SatisfactionFn::MaxOfAffine(ts.iter().map(shift).collect()),
        }
    }

    /// Concave in the output (affine or a minimum of affine terms).
    pub fn is_concave(&self) -> bool {
        !matches!(self, SatisfactionFn::MaxOfAffine(ts) if ts.len() > 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InputDoc", into = "InputDoc")]
pub enum InputSet {
    Box(Hyperbox),
    /// Convex hull of the listed vertices.
    Vertices(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum InputDoc {
    Box(Hyperbox),
    Vertices(Vec<Vec<f64>>),
}

impl TryFrom<InputDoc> for InputSet {
    type Error = String;

    fn try_from(doc: InputDoc) -> std::result::Result<Self, String> {
        match doc {
            InputDoc::Box(b) => Ok(InputSet::Box(b)),
            InputDoc::Vertices(vs) => {
                InputSet::vertices(vs).map_err(|e| e.to_string())
            }
        }
    }
}

impl From<InputSet> for InputDoc {
    fn from(s: InputSet) -> Self {
        match s {
            InputSet::Box(b) => InputDoc::Box(b),
            InputSet::Vertices(v) => InputDoc::Vertices(v),
        }
    }
}

impl InputSet {
    pub fn vertices(vs: Vec<Vec<f64>>) -> Result<Self> {
        if vs.is_empty() {
            return Err(ModelError::Invalid("vertex list is empty".into()));
        }
        let n = vs[0].len();
        if n == 0 || vs.iter().any(|v| v.len() != n) {
            return Err(ModelError::Invalid("vertices must share a nonzero dimension".into()));
        }
        if vs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("vertices must be finite".into()));
        }
        Ok(InputSet::Vertices(vs))
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSet::Box(b) => b.dim(),
            InputSet::Vertices(vs) => vs[0].len(),
        }
    }

    pub fn as_box(&self) -> Option<&Hyperbox> {
        match self {
            InputSet::Box(b) => Some(b),
            InputSet::Vertices(_) => None,
        }
    }

    /// Smallest box containing the set.
    pub fn bounding_box(&self) -> Hyperbox {
        match self {
            InputSet::Box(b) => b.clone(),
            InputSet::Vertices(vs) => {
                let n = vs[0].len();
                let mut lo = vec![f64::INFINITY; n];
                let mut hi = vec![f64::NEG_INFINITY; n];
                for v in vs {
                    for i in 0..n {
                        lo[i] = lo[i].min(v[i]);
                        hi[i] = hi[i].max(v[i]);
                    }
                }
                Hyperbox::new(lo, hi).expect("finite vertices give a valid box")
            }
        }
    }

    /// Number of vertices the set is described by (`None` if it overflows).
    pub fn vertex_count(&self) -> Option<u128> {
        match self {
            InputSet::Box(b) => (b.dim() <= 120).then(|| b.vertex_count()),
            InputSet::Vertices(vs) => Some(vs.len() as u128),
        }
    }

    /// Vertices in enumeration order (lexicographic for boxes, listed order otherwise).
    pub fn vertex_list(&self) -> Vec<Vec<f64>> {
        match self {
            InputSet::Box(b) => b.vertices().collect(),
            InputSet::Vertices(vs) => vs.clone(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            InputSet::Box(b) => b.contains(x),
            InputSet::Vertices(vs) => polytope_contains(vs, x),
        }
    }
}

/// Membership in the convex hull by minimising the distance over convex weights.
fn polytope_contains(vs: &[Vec<f64>], x: &[f64]) -> bool {
    if vs.iter().any(|v| v.as_slice() == x) {
        return true;
    }
    let bb = InputSet::Vertices(vs.to_vec()).bounding_box();
    let slack = POLYTOPE_MEMBERSHIP_TOL;
    if x
        .iter()
        .enumerate()
        .any(|(i, v)| *v < bb.lo()[i] - slack || *v > bb.hi()[i] + slack)
    {
        return false;
    }
    let k = vs.len();
    let n = x.len();
    let mut hess = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            hess[i * k + j] = (0..n).map(|d| vs[i][d] * vs[j][d]).sum();
        }
    }
    let lin: Vec<f64> = (0..k)
        .map(|i| -(0..n).map(|d| vs[i][d] * x[d]).sum::<f64>())
        .collect();
    let mut rows = Vec::with_capacity((k + 2) * k);
    let mut rhs = Vec::with_capacity(k + 2);
    for i in 0..k {
        let mut r = vec![0.0; k];
        r[i] = 1.0;
        rows.extend(r);
        rhs.push(0.0);
    }
    rows.extend(std::iter::repeat(1.0).take(k));
    rhs.push(1.0);
    rows.extend(std::iter::repeat(-1.0).take(k));
    rhs.push(-1.0);
    let Ok(qp) = ConvexQp::new(hess, lin, rows, rhs) else {
        return false;
    };
    match solve_qp(&qp, 1e-12) {
        Ok(sol) if sol.status == QpStatus::Optimal => {
            let mut dist2 = 0.0;
            for d in 0..n {
                let p: f64 = (0..k).map(|i| sol.x[i] * vs[i][d]).sum();
                dist2 += (p - x[d]).powi(2);
            }
            dist2.sqrt() <= slack
        }
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Property {
    pub name: String,
    pub input: InputSet,
    pub sat: SatisfactionFn,
}

impl Property {
    pub fn new(name: impl Into<String>, input: InputSet, sat: SatisfactionFn) -> Self {
        Property {
            name: name.into(),
            input,
            sat,
        }
    }

    pub fn satisfaction(&self, y: &[f64]) -> Result<f64> {
        self.sat.eval(y)
    }

    /// Satisfaction of the model output at `x`.
    pub fn value_at(&self, model: &Model, x: &[f64]) -> Result<f64> {
        self.sat.eval(&model.forward(x)?)
    }

    /// Same property with the satisfaction function lowered by `delta`.
    pub fn shifted(&self, delta: f64) -> Property {
        Property {
            name: self.name.clone(),
            input: self.input.clone(),
            sat: self.sat.shifted(delta),
        }
    }

    /// One affine property per term of a conjunction.
    pub fn split_linear(&self) -> Result<Vec<Property>> {
        match &self.sat {
            SatisfactionFn::Affine(_) => Ok(vec![self.clone()]),
            SatisfactionFn::MinOfAffine(ts) if ts.len() == 1 => Ok(vec![Property::new(
                self.name.clone(),
                self.input.clone(),
                SatisfactionFn::Affine(ts[0].clone()),
            )]),
            SatisfactionFn::MinOfAffine(ts) => Ok(ts
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    Property::new(
                        format!("{}#{}", self.name, k),
                        self.input.clone(),
                        SatisfactionFn::Affine(t.clone()),
                    )
                })
                .collect()),
            SatisfactionFn::MaxOfAffine(_) => Err(ModelError::Invalid(
                "disjunctive satisfaction functions cannot be split".into(),
            )),
        }
    }
}

/// True iff `x` is in the input set and the satisfaction is below `threshold`.
pub fn is_counterexample(model: &Model, prop: &Property, x: &[f64], threshold: f64) -> bool {
    if !prop.input.contains(x) {
        return false;
    }
    match prop.value_at(model, x) {
        Ok(v) => v < threshold,
        Err(_) => false,
    }
}

/// L∞ robustness around `x`: the label output must be at least every other output.
pub fn robustness_property(
    name: impl Into<String>,
    x: &[f64],
    label: usize,
    epsilon: f64,
    num_classes: usize,
    domain: Option<&Hyperbox>,
) -> Result<Property> {
    if !(epsilon > 0.0) {
        return Err(ModelError::Invalid("radius must be positive".into()));
    }
    if label >= num_classes {
        return Err(ModelError::Invalid(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let mut lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let mut hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();
    if let Some(d) = domain {
        if d.dim() != x.len() {
            return Err(ModelError::Dimension {
                expected: x.len(),
                got: d.dim(),
            });
        }
        for i in 0..x.len() {
            lo[i] = lo[i].max(d.lo()[i]);
            hi[i] = hi[i].min(d.hi()[i]);
        }
    }
    let terms = (0..num_classes)
        .map(|i| {
            let mut a = vec![0.0; num_classes];
            a[label] += 1.0;
            a[i] -= 1.0;
            AffineTerm::new(a, 0.0)
        })
        .collect();
    Ok(Property::new(
        name,
        InputSet::Box(Hyperbox::new(lo, hi)?),
        SatisfactionFn::MinOfAffine(terms),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecDoc", into = "SpecDoc")]
pub struct Specification {
    properties: Vec<Property>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    properties: Vec<Property>,
}

impl TryFrom<SpecDoc> for Specification {
    type Error = String;

    fn try_from(doc: SpecDoc) -> std::result::Result<Self, String> {
        Specification::new(doc.properties).map_err(|e| e.to_string())
    }
}

impl From<Specification> for SpecDoc {
    fn from(s: Specification) -> Self {
        SpecDoc {
            properties: s.properties,
        }
    }
}

impl Specification {
    pub fn new(properties: Vec<Property>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &properties {
            if !seen.insert(p.name.as_str()) {
                return Err(ModelError::Invalid(format!("duplicate property name {:?}", p.name)));
            }
        }
        Ok(Specification { properties })
    }

    pub fn properties(&self) -> &[Property] {
        &self.properties
    }

    pub fn len(&self) -> usize {
        self.properties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.properties.is_empty()
    }

    /// Checks every property against the model's input and output dimensions.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        for p in &self.properties {
            if p.input.dim() != model.input_dim() {
                return Err(ModelError::Dimension {
                    expected: model.input_dim(),
                    got: p.input.dim(),
                });
            }
            if p.sat.output_dim() != model.output_dim() {
                return Err(ModelError::Dimension {
                    expected: model.output_dim(),
                    got: p.sat.output_dim(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("specification serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))
    }
}
