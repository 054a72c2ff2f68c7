//! Training losses and their per-method composition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{log_softmax_rows, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::CaptureSite;

/// Per-position span membership for one teacher-forced row.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SpanMasks {
    /// Positions whose logits belong to the prompt (BOS through the last input byte).
    pub input: Vec<bool>,
    /// Positions that predict a response byte or the closing EOS.
    pub response: Vec<bool>,
    pub pad: Vec<bool>,
}

fn positions(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl SpanMasks {
    pub fn input_positions(&self) -> Vec<usize> {
        positions(&self.input)
    }

    pub fn response_positions(&self) -> Vec<usize> {
        positions(&self.response)
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.input.len();
        if self.response.len() != n || self.pad.len() != n {
            return Err(Error::shape("span masks", &[n], &[self.response.len(), self.pad.len()]));
        }
        for i in 0..n {
            let claimed = self.input[i] as u8 + self.response[i] as u8 + self.pad[i] as u8;
            if claimed > 1 {
                return Err(Error::Degenerate(format!("position {i} belongs to more than one span")));
            }
        }
        if !self.response.contains(&true) {
            return Err(Error::Degenerate("example has no response positions".into()));
        }
        Ok(())
    }
}

/// Which way round the divergence is taken. `Forward` is KL(student ‖ reference).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    Forward,
    Reverse,
}

/// Mean over response positions of `-log p(target)`.
pub fn nll_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize], masks: &SpanMasks) -> Result<Var> {
    let rows = masks.response_positions();
    if rows.is_empty() {
        return Err(Error::Degenerate("nll_loss: empty response mask".into()));
    }
    if targets.len() != tape.shape(logits)[0] {
        return Err(Error::shape("nll_loss targets", tape.shape(logits), &[targets.len()]));
    }
    let picked_targets: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let sel = tape.gather_rows(logits, &rows)?;
    let ls = tape.log_softmax(sel)?;
    let lp = tape.pick_cols(ls, &picked_targets)?;
    let mean = tape.mean_all(lp);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over input positions of the per-position KL between the student's
/// and the reference's next-token distributions. Only the student receives
/// gradient; `reference` is read as a constant.
pub fn kl_input_alignment<T: Real>(
    tape: &mut Tape<T>,
    student: Var,
    reference: &Tensor<T>,
    masks: &SpanMasks,
    direction: KlDirection,
) -> Result<Var> {
    if tape.shape(student) != reference.shape() {
        return Err(Error::shape("kl_input_alignment", tape.shape(student), reference.shape()));
    }
    let rows = masks.input_positions();
    if rows.is_empty() {
        return Err(Error::Degenerate("kl_input_alignment: empty input mask".into()));
    }
    let ref_ls = log_softmax_rows(&reference.select_rows(&rows))?;
    let sel = tape.gather_rows(student, &rows)?;
    let ls = tape.log_softmax(sel)?;
    let per_row = match direction {
        KlDirection::Forward => {
            let lr = tape.constant(ref_ls);
            let p = tape.exp(ls);
            let diff = tape.sub(ls, lr)?;
            let terms = tape.mul(p, diff)?;
            tape.sum_rows(terms)?
        }
        KlDirection::Reverse => {
            let p_ref = Tensor::new(ref_ls.shape(), ref_ls.data().iter().map(|v| v.exp()).collect())?;
            let lr = tape.constant(ref_ls);
            let pr = tape.constant(p_ref);
            let diff = tape.sub(lr, ls)?;
            let terms = tape.mul(pr, diff)?;
            tape.sum_rows(terms)?
        }
    };
    // Each row is a divergence; rounding can leave it a hair below zero.
    let per_row = tape.clamp_min(per_row, 0.0);
    Ok(tape.mean_all(per_row))
}

/// Mean squared difference over input positions, averaged over the captured
/// tensors (one per layer, or four per layer for `attn_all`).
pub fn feature_alignment_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &[Var],
    reference: &[Tensor<T>],
    masks: &SpanMasks,
) -> Result<Var> {
    if student.len() != reference.len() || student.is_empty() {
        return Err(Error::shape("feature_alignment_loss", &[student.len()], &[reference.len()]));
    }
    let rows = masks.input_positions();
    if rows.is_empty() {
        return Err(Error::Degenerate("feature_alignment_loss: empty input mask".into()));
    }
    let mut acc: Option<Var> = None;
    for (&s, r) in student.iter().zip(reference) {
        if tape.shape(s) != r.shape() {
            return Err(Error::shape("feature_alignment_loss", tape.shape(s), r.shape()));
        }
        let sel = tape.gather_rows(s, &rows)?;
        let target = tape.constant(r.select_rows(&rows));
        let d = tape.sub(sel, target)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / student.len() as f64))
}

/// Fine-tuning method. Parsed from and printed as `sft`, `lora`,
/// `lora+orthogonal`, `lora+feature:<site>` and `lora+selfaug`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Sft,
    Lora,
    LoraOrthogonal,
    LoraFeature(CaptureSite),
    LoraSelfAug,
}

impl Method {
    pub fn uses_lora(self) -> bool {
        self != Method::Sft
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::LoraFeature(_) | Method::LoraSelfAug)
    }

    /// Feature site the student forward must capture.
    pub fn capture(self) -> Option<CaptureSite> {
        match self {
            Method::LoraFeature(site) if site != CaptureSite::Logits => Some(site),
            _ => None,
        }
    }

    /// The alignment-position ablation treats `logits` as SelfAug itself.
    pub fn for_site(site: CaptureSite) -> Method {
        match site {
            CaptureSite::Logits => Method::LoraSelfAug,
            s => Method::LoraFeature(s),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Sft => f.write_str("sft"),
            Method::Lora => f.write_str("lora"),
            Method::LoraOrthogonal => f.write_str("lora+orthogonal"),
            Method::LoraFeature(site) => write!(f, "lora+feature:{site}"),
            Method::LoraSelfAug => f.write_str("lora+selfaug"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sft" => Method::Sft,
            "lora" => Method::Lora,
            "lora+orthogonal" => Method::LoraOrthogonal,
            "lora+selfaug" => Method::LoraSelfAug,
            _ => match s.strip_prefix("lora+feature:") {
                Some(site) => Method::LoraFeature(site.parse()?),
                None => return Err(Error::Config(format!("unknown method '{s}'"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scalar loss components as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub aux: f64,
    pub total: f64,
    pub alpha: f64,
    pub aux_weight: f64,
}

/// Loss terms for one example, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ExampleTerms {
    pub nll: Var,
    pub kl: Option<Var>,
    pub feature: Option<Var>,
}

/// What the reference model produced for the example, if the method needs it.
pub struct ReferenceView<'a, T> {
    pub logits: &'a Tensor<T>,
    pub features: &'a [Tensor<T>],
}

/// Per-example terms for `method` from one student forward.
pub fn example_terms<T: Real>(
    tape: &mut Tape<T>,
    method: Method,
    logits: Var,
    features: &[Var],
    targets: &[usize],
    masks: &SpanMasks,
    reference: Option<ReferenceView<'_, T>>,
    direction: KlDirection,
) -> Result<ExampleTerms> {
    let nll = nll_loss(tape, logits, targets, masks)?;
    let missing = || Error::Config(format!("method {method} needs a reference model"));
    let (kl, feature) = match method {
        Method::LoraSelfAug => {
            let r = reference.ok_or_else(missing)?;
            (Some(kl_input_alignment(tape, logits, r.logits, masks, direction)?), None)
        }
        Method::LoraFeature(_) => {
            let r = reference.ok_or_else(missing)?;
            (None, Some(feature_alignment_loss(tape, features, r.features, masks)?))
        }
        _ => (None, None),
    };
    Ok(ExampleTerms { nll, kl, feature })
}

/// Batch objective handles: `total` is what gets backpropagated.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub aux: Option<Var>,
    pub alpha: f64,
    pub aux_weight: f64,
}

impl BatchLoss {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        LossBreakdown {
            nll: read(Some(self.nll)),
            kl: read(self.kl),
            aux: read(self.aux),
            total: read(Some(self.total)),
            alpha: self.alpha,
            aux_weight: self.aux_weight,
        }
    }
}

fn mean_of<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// `nll + alpha·kl + aux_weight·aux`, each averaged over the batch. The
/// orthogonal penalty is a property of the weights and enters once.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    method: Method,
    terms: &[ExampleTerms],
    orthogonal: Option<Var>,
    alpha: f64,
    aux_weight: f64,
) -> Result<BatchLoss> {
    if terms.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let nlls: Vec<Var> = terms.iter().map(|t| t.nll).collect();
    let nll = mean_of(tape, &nlls)?;
    let mut loss = BatchLoss {
        total: nll,
        nll,
        kl: None,
        aux: None,
        alpha: 0.0,
        aux_weight: 0.0,
    };
    match method {
        Method::Sft | Method::Lora => {}
        Method::LoraSelfAug => {
            let kls: Option<Vec<Var>> = terms.iter().map(|t| t.kl).collect();
            let kl = mean_of(tape, &kls.ok_or_else(|| Error::Config("missing KL term".into()))?)?;
            let weighted = tape.scale(kl, alpha);
            loss.total = tape.add(nll, weighted)?;
            loss.kl = Some(kl);
            loss.alpha = alpha;
        }
        Method::LoraFeature(_) => {
            let feats: Option<Vec<Var>> = terms.iter().map(|t| t.feature).collect();
            let aux = mean_of(tape, &feats.ok_or_else(|| Error::Config("missing feature term".into()))?)?;
            let weighted = tape.scale(aux, aux_weight);
            loss.total = tape.add(nll, weighted)?;
            loss.aux = Some(aux);
            loss.aux_weight = aux_weight;
        }
        Method::LoraOrthogonal => {
            let aux = orthogonal.ok_or_else(|| Error::Config("missing orthogonal penalty".into()))?;
            let weighted = tape.scale(aux, aux_weight);
            loss.total = tape.add(nll, weighted)?;
            loss.aux = Some(aux);
            loss.aux_weight = aux_weight;
        }
    }
    Ok(loss)
}
