//! The training loop: every optimizer step draws `S` augmentation groups,
//! reweights each group's member losses according to the mode, averages
//! over the groups and takes an SGD step.
//!
//! Groups are processed in fixed chunks of [`CHUNK_GROUPS`], each on its own
//! tape. Chunk gradients are summed in chunk order, so results do not depend
//! on the number of worker threads.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{stream, AugmentedGroup, Sample, Target};
use crate::data::InputEncoder;
use crate::diffcore::{sgd_step, Gradients, LrSchedule, Model, ModelSpec, OptimState, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::reweight::{self, LossMode, MmelConfig, WeightVector};
use crate::teacher::{self, argmax, Prediction, TeacherHandle};

pub const CHUNK_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One uniformly drawn member per group per epoch.
    BaselineDa,
    /// Mean loss over all members.
    Uniform,
    MmelHard,
    MmelSoft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mmel: MmelConfig,
    /// Augmented copies per sample, `|B| − 1`.
    pub n_aug: usize,
    /// Worker threads; 0 runs everything on the calling thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::MmelHard,
            batch_size: 128,
            epochs: 200,
            schedule: LrSchedule {
                base: 0.1,
                milestones: vec![60, 120, 160],
                factor: 0.2,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            mmel: MmelConfig::default(),
            n_aug: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.mode == TrainMode::MmelSoft && self.n_aug == 0 {
            return bad("mmel_soft needs n_aug >= 1".into());
        }
        let want = if self.mode == TrainMode::MmelSoft {
            LossMode::Soft
        } else {
            LossMode::Hard
        };
        if matches!(self.mode, TrainMode::MmelHard | TrainMode::MmelSoft) && self.mmel.mode != want {
            return bad(format!("mode {:?} with mmel.mode {:?}", self.mode, self.mmel.mode));
        }
        LrSchedule::new(
            self.schedule.base,
            self.schedule.milestones.clone(),
            self.schedule.factor,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "momentum {} / weight_decay {}",
                self.momentum, self.weight_decay
            ));
        }
        self.mmel.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// One row of the per-epoch metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean over groups of the differentiated reweighted loss.
    pub weighted_loss: f64,
    /// Mean over groups of the unweighted member loss.
    pub plain_loss: f64,
    /// Mean over groups of the KL penalty `−λ_P·Σ w ln(m·w)` (scaled by
    /// `λ_T` in soft mode).
    pub entropy_term: f64,
    pub max_weight: f64,
    /// Fraction of forwarded members predicted as their target's class
    /// (within `regression_threshold` for regressors).
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,weighted_loss,plain_loss,entropy_term,max_weight,train_acc,eval_acc,lr,seconds";

/// CSV text of `records`. With `zero_time` the `seconds` column is written
/// as 0 so that replays are byte-identical.
pub fn metrics_csv(records: &[MetricsRecord], zero_time: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let eval = r.eval_acc.map(|v| format!("{:.6}", v)).unwrap_or_default();
        let secs = if zero_time { 0.0 } else { r.seconds };
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.6},{:.6},{},{},{:.3}",
            r.epoch, r.weighted_loss, r.plain_loss, r.entropy_term, r.max_weight, r.train_acc, eval, r.lr, secs
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord], zero_time: bool) -> Result<()> {
    std::fs::write(path, metrics_csv(records, zero_time))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// How the divergence target of an augmented member is chosen in soft
/// mode.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherHint {
    /// The student's output on the original.
    Student,
    /// The teacher put the member in another class; use its distribution.
    Replace(Vec<f64>),
    /// Regression: the teacher's prediction, used when it is farther than
    /// the threshold from the student's output on the original.
    Threshold(f64),
}

/// Precomputes soft-mode hints for every member of `group`.
pub fn teacher_hints(group: &AugmentedGroup, t: &TeacherHandle) -> Result<Vec<TeacherHint>> {
    let mut hints = vec![TeacherHint::Student];
    for m in group.members.iter().skip(1) {
        hints.push(match t.task {
            teacher::TaskKind::Classification => match teacher::disagreement_target(t, m, &group.original)? {
                Some(p) => TeacherHint::Replace(p),
                None => TeacherHint::Student,
            },
            teacher::TaskKind::Regression => match teacher::teacher_predict(t, m)? {
                Prediction::Real(p) => TeacherHint::Threshold(p),
                Prediction::Probs(_) => unreachable!("regression teacher returned probabilities"),
            },
        });
    }
    Ok(hints)
}

/// Result of one group's forward and backward pass.
#[derive(Debug, Clone)]
pub struct GroupStep<T> {
    /// The differentiated reweighted loss.
    pub loss: f64,
    /// The maximal objective value: `loss` plus the entropy term.
    pub objective: f64,
    pub weights: WeightVector,
    /// Divergence targets of the augmented members (soft mode).
    pub targets: Vec<Vec<f64>>,
    pub grads: Gradients<T>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    weighted: f64,
    plain: f64,
    entropy: f64,
    max_weight: f64,
    correct: usize,
    seen: usize,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        self.weighted += o.weighted;
        self.plain += o.plain;
        self.entropy += o.entropy;
        self.max_weight += o.max_weight;
        self.correct += o.correct;
        self.seen += o.seen;
    }
}

struct Job<'a> {
    group: &'a AugmentedGroup,
    hints: Option<&'a [TeacherHint]>,
    /// Member indices to forward.
    rows: Vec<usize>,
    frozen: Option<&'a [Vec<f64>]>,
}

struct GroupOutcome {
    weights: WeightVector,
    weighted: f64,
    entropy: f64,
    targets: Vec<Vec<f64>>,
}

struct ChunkOutcome<T> {
    grads: Option<Gradients<T>>,
    stats: Stats,
    groups: Vec<GroupOutcome>,
    loss: f64,
}

fn dense_target(t: &Target, classes: usize) -> Result<Vec<f64>> {
    match t {
        Target::Class(c) if *c < classes => {
            let mut v = vec![0.0; classes];
            v[*c] = 1.0;
            Ok(v)
        }
        Target::Soft(p) if p.len() == classes => Ok(p.clone()),
        other => Err(Error::InvalidArgument(format!(
            "target {:?} does not fit {} classes",
            other, classes
        ))),
    }
}

fn real_target(t: &Target) -> Result<f64> {
    match t {
        Target::Real(v) => Ok(*v),
        Target::Class(c) => Ok(*c as f64),
        Target::Soft(_) => Err(Error::InvalidArgument("soft target for a regressor".into())),
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `Σ softmax((v + shift)/λ)·(v + shift)` over `rows` of `losses`, with the
/// weights left on the tape.
fn attached_block<T: Real>(
    tape: &mut Tape<T>,
    losses: Var,
    rows: Vec<usize>,
    shift: Vec<T>,
    lambda: f64,
) -> Result<Var> {
    let n = rows.len();
    let mut v = tape.select_rows(losses, rows)?;
    if shift.iter().any(|s| *s != T::zero()) {
        let c = tape.input(Tensor::new(vec![n], shift)?);
        v = tape.add(v, c)?;
    }
    let scaled = tape.scale(v, T::lit(1.0 / lambda));
    let row = tape.reshape(scaled, vec![1, n])?;
    let logw = tape.log_softmax(row)?;
    let w = tape.exp(logw);
    let w = tape.reshape(w, vec![n])?;
    let prod = tape.mul(w, v)?;
    Ok(tape.sum(prod))
}

fn run_chunk<T: Real>(
    model: &Model<T>,
    encoder: &InputEncoder,
    cfg: &TrainConfig,
    jobs: &[Job<'_>],
    scale: f64,
    want_grads: bool,
) -> Result<ChunkOutcome<T>> {
    let classifier = model.spec().is_classifier();
    let out_width: usize = model.spec().output_shape()?.iter().product();
    let total_rows: usize = jobs.iter().map(|j| j.rows.len()).sum();
    let mut x = Vec::with_capacity(total_rows * encoder.width());
    for j in jobs {
        for &r in &j.rows {
            encoder.encode_into(&j.group.members[r], &mut x)?;
        }
    }
    let mut shape = vec![total_rows];
    shape.extend_from_slice(&encoder.input_shape);
    let mut tape = Tape::new();
    let xin = tape.input(Tensor::new(shape, x)?);
    let out = model.forward(&mut tape, xin)?;
    let values = tape.value(out).to_f64_vec();
    let row_out = |r: usize| &values[r * out_width..(r + 1) * out_width];

    // Targets per forwarded row.
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(total_rows);
    let mut divergence_targets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(jobs.len());
    let mut base = 0;
    for j in jobs {
        let soft = cfg.mode == TrainMode::MmelSoft;
        let mut div_t = Vec::new();
        for &r in &j.rows {
            let t = if soft && r > 0 {
                let t = if let Some(f) = j.frozen {
                    f[r - 1].clone()
                } else {
                    let fx = row_out(base);
                    let hint = j.hints.map_or(&TeacherHint::Student, |h| &h[r]);
                    match (classifier, hint) {
                        (true, TeacherHint::Replace(p)) => p.clone(),
                        (true, _) => fx.iter().map(|v| v.exp()).collect(),
                        (false, TeacherHint::Threshold(p)) => {
                            vec![teacher::regression_rule(fx[0], *p, cfg.mmel.regression_threshold)]
                        }
                        (false, _) => fx.to_vec(),
                    }
                };
                div_t.push(t.clone());
                t
            } else if classifier {
                dense_target(j.group.target(r), out_width)?
            } else {
                vec![real_target(j.group.target(r))?]
            };
            targets.push(t);
        }
        divergence_targets.push(div_t);
        base += j.rows.len();
    }
    let flat: Vec<T> = targets.iter().flatten().map(|&v| T::lit(v)).collect();
    let row_losses = if classifier {
        tape.cross_entropy_rows(out, flat)?
    } else {
        tape.squared_error_rows(out, flat)?
    };
    let rl = tape.value(row_losses).to_f64_vec();

    let mut stats = Stats::default();
    let mut groups = Vec::with_capacity(jobs.len());
    let mut coefs = vec![0.0f64; total_rows];
    let mut attached: Vec<(Vec<usize>, Vec<T>, f64, f64)> = Vec::new();
    // Cross-entropy rows stand in for KL divergences; this restores the
    // constant target-entropy difference in the reported loss.
    let mut offset = 0.0;
    let mut base = 0;
    for (j, div_t) in jobs.iter().zip(divergence_targets) {
        let n = j.rows.len();
        let losses = &rl[base..base + n];
        for (k, &r) in j.rows.iter().enumerate() {
            let o = row_out(base + k);
            let hit = if classifier {
                argmax(o) == argmax(&targets[base + k])
            } else {
                (o[0] - real_target(j.group.target(r))?).abs() <= cfg.mmel.regression_threshold
            };
            stats.correct += hit as usize;
        }
        stats.seen += n;
        let lambda = cfg.mmel.lambda_p;
        let outcome = match cfg.mode {
            TrainMode::BaselineDa | TrainMode::Uniform => {
                let w = WeightVector::uniform(n);
                for (k, c) in coefs[base..base + n].iter_mut().enumerate() {
                    *c = w.as_slice()[k] * scale;
                }
                let mean = losses.iter().sum::<f64>() / n as f64;
                stats.plain += mean;
                GroupOutcome {
                    weights: w,
                    weighted: mean,
                    entropy: 0.0,
                    targets: Vec::new(),
                }
            }
            TrainMode::MmelHard => {
                let obj = reweight::hard_objective(losses, lambda)?;
                let weighted: f64 = obj.weights.as_slice().iter().zip(losses).map(|(w, l)| w * l).sum();
                if cfg.mmel.detach_weights {
                    for (k, c) in coefs[base..base + n].iter_mut().enumerate() {
                        *c = obj.weights.as_slice()[k] * scale;
                    }
                } else {
                    attached.push(((base..base + n).collect(), vec![T::zero(); n], lambda, scale));
                }
                stats.plain += losses.iter().sum::<f64>() / n as f64;
                GroupOutcome {
                    weights: obj.weights,
                    weighted,
                    entropy: obj.value - weighted,
                    targets: div_t,
                }
            }
            TrainMode::MmelSoft => {
                if n < 2 {
                    return Err(Error::DegenerateGroup(format!(
                        "group {} has no augmented members in soft mode",
                        j.group.id
                    )));
                }
                let shift: Vec<f64> = if classifier {
                    div_t.iter().map(|t| -entropy(t)).collect()
                } else {
                    vec![0.0; n - 1]
                };
                let div: Vec<f64> = losses[1..].iter().zip(&shift).map(|(l, s)| l + s).collect();
                let lt = cfg.mmel.lambda_t;
                let obj = reweight::soft_objective(losses[0], &div, &cfg.mmel)?;
                let wdiv: f64 = obj.weights.as_slice().iter().zip(&div).map(|(w, d)| w * d).sum();
                let weighted = losses[0] + lt * wdiv;
                coefs[base] = scale;
                if cfg.mmel.detach_weights {
                    for (k, c) in coefs[base + 1..base + n].iter_mut().enumerate() {
                        *c = lt * obj.weights.as_slice()[k] * scale;
                        offset += *c * shift[k];
                    }
                } else {
                    let shift_t = shift.iter().map(|&s| T::lit(s)).collect();
                    attached.push(((base + 1..base + n).collect(), shift_t, lambda, lt * scale));
                }
                stats.plain += losses[0] + lt * div.iter().sum::<f64>() / (n - 1) as f64;
                GroupOutcome {
                    weights: obj.weights,
                    weighted,
                    entropy: obj.value - weighted,
                    targets: div_t,
                }
            }
        };
        stats.weighted += outcome.weighted;
        stats.entropy += outcome.entropy;
        stats.max_weight += outcome.weights.max();
        groups.push(outcome);
        base += n;
    }

    let mut total = tape.weighted_sum(row_losses, coefs.iter().map(|&c| T::lit(c)).collect())?;
    for (rows, shift, lambda, coef) in attached {
        let block = attached_block(&mut tape, row_losses, rows, shift, lambda)?;
        let block = tape.scale(block, T::lit(coef));
        total = tape.add(total, block)?;
    }
    let loss = tape.value(total).item()?.as_f64() + offset;
    let grads = if want_grads { Some(tape.gradients(total)?) } else { None };
    Ok(ChunkOutcome {
        grads,
        stats,
        groups,
        loss,
    })
}

fn check_group(group: &AugmentedGroup, cfg: &TrainConfig) -> Result<()> {
    group.validate()?;
    if cfg.mode == TrainMode::MmelSoft && group.len() < 2 {
        return Err(Error::DegenerateGroup(format!(
            "group {} has a single member",
            group.id
        )));
    }
    Ok(())
}

fn all_rows(group: &AugmentedGroup, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    match cfg.mode {
        TrainMode::BaselineDa => {
            let mut rng = stream(cfg.seed, &group.id, epoch as u64, "pick");
            vec![rng.random_range(0..group.len())]
        }
        _ => (0..group.len()).collect(),
    }
}

fn single_group<T: Real>(
    model: &Model<T>,
    encoder: &InputEncoder,
    group: &AugmentedGroup,
    cfg: &TrainConfig,
    hints: Option<&[TeacherHint]>,
    frozen: Option<&[Vec<f64>]>,
    epoch: usize,
) -> Result<GroupStep<T>> {
    check_group(group, cfg)?;
    let job = Job {
        group,
        hints,
        rows: all_rows(group, cfg, epoch),
        frozen,
    };
    let mut out = run_chunk(model, encoder, cfg, std::slice::from_ref(&job), 1.0, true)?;
    let g = out.groups.pop().expect("one group");
    Ok(GroupStep {
        loss: out.loss,
        objective: g.weighted + g.entropy,
        weights: g.weights,
        targets: g.targets,
        grads: out.grads.expect("gradients requested"),
    })
}

/// Forward and backward pass for one group. In baseline mode `epoch`
/// selects the drawn member.
pub fn group_step<T: Real>(
    model: &Model<T>,
    encoder: &InputEncoder,
    group: &AugmentedGroup,
    cfg: &TrainConfig,
    hints: Option<&[TeacherHint]>,
    epoch: usize,
) -> Result<GroupStep<T>> {
    single_group(model, encoder, group, cfg, hints, None, epoch)
}

/// As [`group_step`] in soft mode, but with the divergence targets of the
/// augmented members fixed to `targets` instead of read off the model.
pub fn group_step_with_targets<T: Real>(
    model: &Model<T>,
    encoder: &InputEncoder,
    group: &AugmentedGroup,
    cfg: &TrainConfig,
    targets: &[Vec<f64>],
) -> Result<GroupStep<T>> {
    if targets.len() + 1 != group.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} augmented members",
            targets.len(),
            group.len() - 1
        )));
    }
    single_group(model, encoder, group, cfg, None, Some(targets), 0)
}

/// Everything [`train`] needs besides the configuration.
pub struct TrainData<'a> {
    pub spec: ModelSpec,
    pub encoder: InputEncoder,
    /// Original training samples; each needs a group with the same id.
    pub samples: &'a [Sample],
    pub groups: &'a [AugmentedGroup],
    pub eval: Option<&'a [Sample]>,
    pub teacher: Option<&'a TeacherHandle>,
    /// Starting parameters; drawn from the seed when absent.
    pub init: Option<Model<f64>>,
}

pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRecord>,
}

fn pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads == 0 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))
}

pub fn train<T: Real>(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let by_id: std::collections::HashMap<&str, &AugmentedGroup> =
        data.groups.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut groups = Vec::with_capacity(data.samples.len());
    for s in data.samples {
        let g = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Dataset(format!("no augmentation group for sample {}", s.id)))?;
        check_group(g, cfg)?;
        groups.push(*g);
    }
    if groups.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let hints: Option<Vec<Vec<TeacherHint>>> = match (cfg.mode, data.teacher) {
        (TrainMode::MmelSoft, Some(t)) => Some(groups.iter().map(|g| teacher_hints(g, t)).collect::<Result<_>>()?),
        _ => None,
    };
    let mut model: Model<T> = match data.init {
        Some(m) => {
            if m.spec() != &data.spec {
                return Err(Error::Config("initial model does not match the model spec".into()));
            }
            m.cast()
        }
        None => Model::<f64>::init(data.spec.clone(), &mut stream(cfg.seed, "model", 0, "init"))?.cast(),
    };
    let mut opt = OptimState::new(&model, cfg.schedule.base, cfg.momentum, cfg.weight_decay)?;
    let workers = pool(cfg.threads)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        opt.lr = cfg.schedule.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64, "epoch"));
        let mut stats = Stats::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let jobs: Vec<Job<'_>> = batch
                .iter()
                .map(|&i| Job {
                    group: groups[i],
                    hints: hints.as_ref().map(|h| h[i].as_slice()),
                    rows: all_rows(groups[i], cfg, epoch),
                    frozen: None,
                })
                .collect();
            let chunks: Vec<&[Job<'_>]> = jobs.chunks(CHUNK_GROUPS).collect();
            let run = |c: &&[Job<'_>]| run_chunk(&model, &data.encoder, cfg, c, scale, true);
            let outcomes: Vec<Result<ChunkOutcome<T>>> = match &workers {
                Some(p) => p.install(|| chunks.par_iter().map(run).collect()),
                None => chunks.iter().map(run).collect(),
            };
            let mut grads = Gradients::empty();
            let mut batch_loss = 0.0;
            for o in outcomes {
                let o = o.map_err(|e| match e {
                    Error::NonFinite(m) => Error::Diverged {
                        epoch,
                        batch: b,
                        message: m,
                    },
                    other => other,
                })?;
                grads.accumulate(o.grads.as_ref().expect("gradients requested"));
                stats.add(&o.stats);
                batch_loss += o.loss;
            }
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("loss {} or gradient is not finite", batch_loss),
                });
            }
            model.accumulate(&grads);
            sgd_step(&mut model, &mut opt)?;
        }
        let n = groups.len() as f64;
        let eval_acc = match data.eval {
            Some(e) if !e.is_empty() => Some(evaluate(&model, &data.encoder, e, cfg.mmel.regression_threshold)?.score),
            _ => None,
        };
        metrics.push(MetricsRecord {
            epoch,
            weighted_loss: stats.weighted / n,
            plain_loss: stats.plain / n,
            entropy_term: stats.entropy / n,
            max_weight: stats.max_weight / n,
            train_acc: stats.correct as f64 / stats.seen.max(1) as f64,
            eval_acc,
            lr: opt.lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutput { model, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    /// Accuracy for classifiers; for regressors the fraction of predictions
    /// within the threshold of the target.
    pub score: f64,
    /// Mean squared error, regressors only.
    pub mse: Option<f64>,
}

/// Plain forward passes over `samples`, no augmentation.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    encoder: &InputEncoder,
    samples: &[Sample],
    threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let classifier = model.spec().is_classifier();
    let out_width: usize = model.spec().output_shape()?.iter().product();
    let mut hits = 0usize;
    let mut sq = 0.0;
    for chunk in samples.chunks(256) {
        let mut x = Vec::with_capacity(chunk.len() * encoder.width());
        for s in chunk {
            encoder.encode_into(&s.payload, &mut x)?;
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&encoder.input_shape);
        let out = model.predict(&Tensor::new(shape, x)?)?.to_f64_vec();
        for (s, o) in chunk.iter().zip(out.chunks_exact(out_width)) {
            if classifier {
                hits += (argmax(o) == argmax(&dense_target(&s.label, out_width)?)) as usize;
            } else {
                let d = o[0] - real_target(&s.label)?;
                sq += d * d;
                hits += (d.abs() <= threshold) as usize;
            }
        }
    }
    let n = samples.len();
    Ok(Evaluation {
        samples: n,
        score: hits as f64 / n as f64,
        mse: (!classifier).then(|| sq / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Payload;
    use crate::data::make_blobs;
    use std::f64::consts::LN_2;

    fn vgroup(id: &str, members: &[[f32; 2]], label: usize) -> AugmentedGroup {
        let payloads: Vec<Payload> = members
            .iter()
            .map(|m| Payload::Vector { features: m.to_vec() })
            .collect();
        AugmentedGroup {
            id: id.into(),
            kind: crate::augment::Kind::Vector,
            original: payloads[0].clone(),
            label: Target::Class(label),
            members: payloads,
            member_targets: None,
        }
    }

    /// Logits equal to the two features, so member losses are chosen by
    /// hand: features `[a, b]` with label 0 give loss `ln(1 + e^(b−a))`.
    fn identity_model() -> Model<f64> {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        Model::from_params(ModelSpec::linear(2, 2), vec![w, b]).unwrap()
    }

    fn cfg(mode: TrainMode) -> TrainConfig {
        let mut c = TrainConfig {
            mode,
            n_aug: 2,
            ..TrainConfig::default()
        };
        if mode == TrainMode::MmelSoft {
            c.mmel.mode = LossMode::Soft;
        }
        c
    }

    /// Features whose label-0 cross-entropy equals `l`.
    fn with_loss(l: f64) -> [f32; 2] {
        [0.0, ((l.exp() - 1.0).ln()) as f32]
    }

    #[test]
    fn uniform_is_mean() {
        let enc = InputEncoder::new(vec![2], None);
        let g = vgroup("g", &[with_loss(1.0), with_loss(2.0), with_loss(3.0)], 0);
        let s = group_step(&identity_model(), &enc, &g, &cfg(TrainMode::Uniform), None, 0).unwrap();
        assert!((s.loss - 2.0).abs() < 1e-6);
        assert_eq!(s.weights, WeightVector::uniform(3));
    }

    #[test]
    fn hard_weights_follow_losses() {
        let enc = InputEncoder::new(vec![2], None);
        let g = vgroup("g", &[[0.0, -80.0], with_loss(LN_2)], 0);
        let s = group_step(&identity_model(), &enc, &g, &cfg(TrainMode::MmelHard), None, 0).unwrap();
        let w = s.weights.as_slice();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-6 && (w[1] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.loss - 2.0 / 3.0 * LN_2).abs() < 1e-6);
        assert!((s.objective - 1.5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn soft_consistency_and_degenerate() {
        let enc = InputEncoder::new(vec![2], None);
        let x = [0.3f32, -0.2];
        let g = vgroup("g", &[x, x, x], 1);
        let s = group_step(&identity_model(), &enc, &g, &cfg(TrainMode::MmelSoft), None, 0).unwrap();
        let logits = [0.3f32 as f64, -0.2f32 as f64];
        let orig_expected = -(logits[1] - crate::diffcore::log_sum_exp(&logits));
        assert!((s.loss - orig_expected).abs() < 1e-12);
        assert!((s.objective - orig_expected).abs() < 1e-12);
        let single = vgroup("h", &[x], 1);
        assert!(group_step(&identity_model(), &enc, &single, &cfg(TrainMode::MmelSoft), None, 0).is_err());
    }

    #[test]
    fn baseline_without_augmentation() {
        let enc = InputEncoder::new(vec![2], None);
        let g = vgroup("g", &[with_loss(0.7)], 0);
        let s = group_step(&identity_model(), &enc, &g, &cfg(TrainMode::BaselineDa), None, 3).unwrap();
        assert!((s.loss - 0.7).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(TrainMode::Uniform).validate().is_ok());
        let mut c = cfg(TrainMode::MmelSoft);
        c.n_aug = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(TrainMode::Uniform);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn blobs_run(mode: TrainMode, lr: f64, epochs: usize, threads: usize) -> (Model<f64>, TrainOutput<f64>) {
        let ds = make_blobs(60, 2, 2, 1).unwrap();
        let groups: Vec<AugmentedGroup> = ds
            .samples
            .iter()
            .map(|s| crate::augment::build_vector_group(s, 2, 0.3, 5).unwrap())
            .collect();
        let spec = ModelSpec::linear(2, 2);
        let init = Model::<f64>::init(spec.clone(), &mut stream(0, "m", 0, "t")).unwrap();
        let mut c = cfg(mode);
        c.schedule = LrSchedule::constant(lr);
        c.epochs = epochs;
        c.batch_size = 16;
        c.threads = threads;
        let out = train::<f64>(
            &c,
            TrainData {
                spec,
                encoder: InputEncoder::new(vec![2], None),
                samples: &ds.samples,
                groups: &groups,
                eval: Some(&ds.samples),
                teacher: None,
                init: Some(init.clone()),
            },
        )
        .unwrap();
        (init, out)
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (init, out) = blobs_run(TrainMode::Uniform, 0.0, 1, 0);
        assert_eq!(out.model.params(), init.params());
        assert_eq!(out.metrics.len(), 1);
    }

    #[test]
    fn replay_and_threads_agree() {
        let (_, a) = blobs_run(TrainMode::MmelHard, 0.05, 3, 0);
        let (_, b) = blobs_run(TrainMode::MmelHard, 0.05, 3, 0);
        let (_, c) = blobs_run(TrainMode::MmelHard, 0.05, 3, 2);
        assert_eq!(metrics_csv(&a.metrics, true), metrics_csv(&b.metrics, true));
        assert_eq!(metrics_csv(&a.metrics, true), metrics_csv(&c.metrics, true));
        assert_eq!(a.model.params(), c.model.params());
        assert!(a.metrics.iter().enumerate().all(|(i, m)| m.epoch == i && m.lr == 0.05));
    }

    #[test]
    fn missing_group_names_sample() {
        let ds = make_blobs(3, 2, 2, 1).unwrap();
        let c = TrainConfig {
            epochs: 1,
            ..cfg(TrainMode::Uniform)
        };
        let err = train::<f64>(
            &c,
            TrainData {
                spec: ModelSpec::linear(2, 2),
                encoder: InputEncoder::new(vec![2], None),
                samples: &ds.samples,
                groups: &[],
                eval: None,
                teacher: None,
                init: None,
            },
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("blob-0"));
    }

    #[test]
    fn evaluate_cases() {
        let model = Model::<f64>::zeros(ModelSpec::linear(2, 2)).unwrap();
        let enc = InputEncoder::new(vec![2], None);
        let ds = make_blobs(40, 2, 2, 3).unwrap();
        let zeros = ds.samples.iter().filter(|s| s.label == Target::Class(0)).count();
        let e = evaluate(&model, &enc, &ds.samples, 0.5).unwrap();
        assert!((e.score - zeros as f64 / 40.0).abs() < 1e-12);
        assert_eq!(e, evaluate(&model, &enc, &ds.samples, 0.5).unwrap());
        assert!(evaluate(&model, &enc, &[], 0.5).is_err());
    }
}
