//! A trained model that labels augmented samples whose meaning may have
//! drifted from the original's.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedGroup, Payload, Target};
use crate::data::InputEncoder;
use crate::diffcore::{checkpoint, Model, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probs(Vec<f64>),
    Real(f64),
}

impl Prediction {
    pub fn into_target(self) -> Target {
        match self {
            Prediction::Probs(p) => Target::Soft(p),
            Prediction::Real(v) => Target::Real(v),
        }
    }
}

/// Read-only after construction, so predictions may run concurrently.
#[derive(Debug, Clone)]
pub struct TeacherHandle {
    pub path: Option<PathBuf>,
    pub task: TaskKind,
    model: Model<f64>,
    encoder: InputEncoder,
}

impl TeacherHandle {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, header) = checkpoint::load::<f64>(path)?;
        let encoder = InputEncoder::new(header.model.input_shape.clone(), header.normalization);
        let mut t = TeacherHandle::from_model(model, encoder)?;
        t.path = Some(path.to_path_buf());
        Ok(t)
    }

    pub fn from_model(model: Model<f64>, encoder: InputEncoder) -> Result<Self> {
        if model.spec().input_shape != encoder.input_shape {
            return Err(Error::Shape(format!(
                "teacher input {:?} vs encoder {:?}",
                model.spec().input_shape,
                encoder.input_shape
            )));
        }
        let task = if model.spec().is_classifier() {
            TaskKind::Classification
        } else {
            TaskKind::Regression
        };
        Ok(TeacherHandle {
            path: None,
            task,
            model,
            encoder,
        })
    }

    pub fn model(&self) -> &Model<f64> {
        &self.model
    }
}

pub fn teacher_predict(t: &TeacherHandle, payload: &Payload) -> Result<Prediction> {
    let mut x = Vec::with_capacity(t.encoder.width());
    t.encoder.encode_into(payload, &mut x)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&t.encoder.input_shape);
    let out = t.model.predict(&Tensor::new(shape, x)?)?;
    Ok(match t.task {
        TaskKind::Classification => Prediction::Probs(out.data().iter().map(|v| v.exp()).collect()),
        TaskKind::Regression => Prediction::Real(out.data()[0]),
    })
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn probs(t: &TeacherHandle, payload: &Payload) -> Result<Vec<f64>> {
    match teacher_predict(t, payload)? {
        Prediction::Probs(p) => Ok(p),
        Prediction::Real(_) => Err(Error::InvalidArgument("teacher is a regressor".into())),
    }
}

/// Every augmented member's target becomes the teacher's prediction; the
/// original keeps its ground-truth label.
pub fn relabel_hard(group: &AugmentedGroup, t: &TeacherHandle) -> Result<AugmentedGroup> {
    let mut out = group.clone();
    if group.len() <= 1 {
        return Ok(out);
    }
    let mut targets = vec![group.label.clone()];
    for m in &group.members[1..] {
        targets.push(teacher_predict(t, m)?.into_target());
    }
    out.member_targets = Some(targets);
    Ok(out)
}

/// The teacher's distribution for `member` when the teacher puts it in a
/// different class than `original`, otherwise `None`.
pub fn disagreement_target(t: &TeacherHandle, member: &Payload, original: &Payload) -> Result<Option<Vec<f64>>> {
    let pz = probs(t, member)?;
    let px = probs(t, original)?;
    Ok((argmax(&pz) != argmax(&px)).then_some(pz))
}

/// Target for the divergence term of `member`: the student's own output on
/// the original unless the teacher disagrees on the class.
pub fn soft_target_for(
    member: &Payload,
    original: &Payload,
    model_out_x: &[f64],
    t: &TeacherHandle,
) -> Result<Vec<f64>> {
    Ok(disagreement_target(t, member, original)?.unwrap_or_else(|| model_out_x.to_vec()))
}

/// Picks between the two inputs: the teacher's prediction `p` when
/// `|f_x − p| > threshold`, else `f_x`.
pub fn regression_rule(f_x: f64, p: f64, threshold: f64) -> f64 {
    if (f_x - p).abs() > threshold {
        p
    } else {
        f_x
    }
}

pub fn regression_target_for(member: &Payload, f_x: f64, t: &TeacherHandle, threshold: f64) -> Result<f64> {
    match teacher_predict(t, member)? {
        Prediction::Real(p) => Ok(regression_rule(f_x, p, threshold)),
        Prediction::Probs(_) => Err(Error::InvalidArgument("teacher is a classifier".into())),
    }
}
