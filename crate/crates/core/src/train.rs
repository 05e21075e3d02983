//! Training, evaluation, attention dumps and the mask-mode ablation.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SceneSpec};
use crate::error::{Error, Result};
use crate::mask::{GraphMask, ModalSpan};
use crate::model::{predict, ModelConfig, MultimodalEncoder};
use crate::ops;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{encode_mgtn, Tensor};
use crate::text::{text_graph, Lexicon};
use crate::vision::{patchify, Connectivity, PatchGrid};

/// Which fused mask the model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Block mask composed from the text and dense region graphs.
    #[default]
    Graph,
    /// Every cell Open.
    Open,
    /// Seeded Bernoulli(1/2) per cell, diagonal Open.
    Random,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Graph, MaskMode::Open, MaskMode::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Graph => "graph",
            MaskMode::Open => "open",
            MaskMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub lambda: f64,
    pub train_size: usize,
    pub eval_size: usize,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub connectivity: Connectivity,
    pub scene: SceneSpec,
    /// Plain transformer: no `G` and no `λĜ` term at all.
    pub vanilla: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            mask_mode: MaskMode::Graph,
            lambda: 1.0,
            train_size: 2000,
            eval_size: 500,
            eval_every: 250,
            d_model: 32,
            heads: 4,
            num_layers: 2,
            d_ff: 64,
            l_max: 64,
            connectivity: Connectivity::Full,
            scene: SceneSpec::default(),
            vanilla: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.train_size == 0 {
            return Err(Error::Config("steps, batch_size and train_size must be positive".into()));
        }
        self.scene.validate()?;
        self.model_config(1, 1).validate()
    }

    pub fn model_config(&self, text_vocab_size: usize, answers: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            num_layers: self.num_layers,
            d_ff: self.d_ff,
            l_max: self.l_max,
            lambda: self.lambda,
            answer_vocab_size: answers,
            text_vocab_size,
            patch_input_dim: self.scene.patch_dim(),
            connectivity: self.connectivity,
            seed: self.seed,
        }
    }

    /// Seed of the held-out set, distinct from the training seed.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0x005E_ED0F_E7A1
    }
}

/// A sample turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub grid: PatchGrid,
    pub tokens: Vec<usize>,
    pub surfaces: Vec<String>,
    /// `None` for the vanilla path.
    pub mask: Option<GraphMask>,
    pub answer: usize,
}

/// Tokenizes, patchifies and builds the fused mask of every sample. Random
/// masks draw from one generator seeded by `seed`, in sample order.
pub fn prepare(
    model: &MultimodalEncoder,
    ds: &Dataset,
    mode: MaskMode,
    vanilla: bool,
    seed: u64,
) -> Result<Vec<Prepared>> {
    let lexicon = Lexicon::default();
    let ids: HashMap<&str, usize> = ds
        .text_vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x00DD_BA11);
    ds.samples
        .iter()
        .map(|s| {
            let grid = patchify(&s.image, ds.scene.patch_size)?;
            let (tokens, tg) = text_graph(&s.question, &lexicon)?;
            let token_ids: Vec<usize> = tokens
                .iter()
                .map(|t| ids.get(t.surface.as_str()).copied().unwrap_or(0))
                .collect();
            let spans = model.spans(grid.len(), token_ids.len())?;
            let l = 1 + grid.len() + token_ids.len();
            let mask = if vanilla {
                None
            } else {
                Some(match mode {
                    MaskMode::Graph => model.compose_mask(&spans, &model.vision_graph(&grid)?, &tg)?,
                    MaskMode::Open => GraphMask::all_open(l),
                    MaskMode::Random => GraphMask::random(l, &mut rng),
                })
            };
            Ok(Prepared {
                grid,
                tokens: token_ids,
                surfaces: tokens.into_iter().map(|t| t.surface).collect(),
                mask,
                answer: s.answer,
            })
        })
        .collect()
}

/// One JSON-lines record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub answer: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Builds a report from (truth, prediction) pairs.
    pub fn from_pairs(answers: &[String], pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let k = answers.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (t, p) in pairs {
            confusion[t][p] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = (0..k)
            .map(|i| {
                let t: usize = confusion[i].iter().sum();
                ClassReport {
                    answer: answers[i].clone(),
                    total: t,
                    correct: confusion[i][i],
                    accuracy: if t == 0 { 0.0 } else { confusion[i][i] as f64 / t as f64 },
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class,
            confusion,
        }
    }
}

pub fn logits(model: &MultimodalEncoder, p: &Prepared) -> Result<Tensor> {
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &p.grid, &p.tokens, p.mask.as_ref())?;
    Ok(tape.value(out.logits).detached())
}

pub fn evaluate(model: &MultimodalEncoder, samples: &[Prepared], answers: &[String]) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .map(|p| Ok((p.answer, predict(&logits(model, p)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(answers, pairs))
}

/// Evaluates a checkpoint on a dataset whose vocabularies must match it.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset, mode: MaskMode, vanilla: bool, seed: u64) -> Result<EvalReport> {
    check_vocab(ckpt, ds)?;
    let prepared = prepare(&ckpt.model, ds, mode, vanilla, seed)?;
    evaluate(&ckpt.model, &prepared, &ds.answers)
}

pub fn check_vocab(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.text_vocab != ds.text_vocab {
        return Err(Error::Config("dataset text vocabulary differs from the checkpoint's".into()));
    }
    if ckpt.answers != ds.answers {
        return Err(Error::Config(format!(
            "dataset answers {:?} differ from the checkpoint's {:?}",
            ds.answers, ckpt.answers
        )));
    }
    if ckpt.model.config.patch_input_dim != ds.scene.patch_dim() {
        return Err(Error::Config(format!(
            "dataset patches have {} values, checkpoint expects {}",
            ds.scene.patch_dim(),
            ckpt.model.config.patch_input_dim
        )));
    }
    Ok(())
}

/// Mean cross-entropy over `batch` and its gradients, reduced in batch order.
fn batch_step(model: &MultimodalEncoder, samples: &[Prepared], batch: &[usize]) -> Result<(f64, Vec<Gradients>)> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for &i in batch {
        let p = &samples[i];
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, &p.grid, &p.tokens, p.mask.as_ref())?;
        let l = tape.cross_entropy(out.logits, p.answer)?;
        loss += tape.value(l).data()[0] * scale;
        grads.push(tape.backward(l, scale));
    }
    Ok((loss, grads))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub train_accuracy: f64,
    pub eval: Option<EvalReport>,
}

/// Adam on mean cross-entropy. Every step appends one JSON line to `log`.
/// `resume` continues from a checkpoint's parameters and optimizer state.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    resume: Option<Checkpoint>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut adam) = match resume {
        Some(ck) => {
            check_vocab(&ck, train_set)?;
            let adam = ck.adam.unwrap_or_else(|| AdamState::new(&ck.model.store));
            (ck.model, adam)
        }
        None => {
            let m = MultimodalEncoder::new(cfg.model_config(train_set.text_vocab.len(), train_set.answers.len()))?;
            let a = AdamState::new(&m.store);
            (m, a)
        }
    };
    let train_samples = prepare(&model, train_set, cfg.mask_mode, cfg.vanilla, cfg.seed)?;
    let eval_samples = match eval_set {
        Some(ds) => Some(prepare(&model, ds, cfg.mask_mode, cfg.vanilla, cfg.eval_seed())?),
        None => None,
    };

    let adam_cfg = cfg.adam();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(adam.step));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut last_eval = None;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = match batch_step(&model, &train_samples, &batch) {
            Err(Error::Numeric(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            r => r?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        model.store.zero_grads();
        for g in &grads {
            g.apply_to(&mut model.store);
        }
        adam_step(&mut model.store, &mut adam, &adam_cfg)?;

        let mut rec = MetricRecord {
            step,
            loss,
            eval_acc: None,
        };
        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if let (true, Some(es)) = (due, &eval_samples) {
            let report = evaluate(&model, es, &train_set.answers)?;
            rec.eval_acc = Some(report.accuracy);
            last_eval = Some(report);
        }
        log.write_all((serde_json::to_string(&rec)? + "\n").as_bytes())?;
        metrics.push(rec);
    }
    log.flush()?;
    model.store.zero_grads();

    let train_accuracy = evaluate(&model, &train_samples, &train_set.answers)?.accuracy;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            adam: Some(adam),
            text_vocab: train_set.text_vocab.clone(),
            answers: train_set.answers.clone(),
        },
        metrics,
        train_accuracy,
        eval: last_eval,
    })
}

/// Reads a JSON-lines metrics log, skipping a trailing partial line.
pub fn read_metrics(text: &str) -> Vec<MetricRecord> {
    text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}

/// Post-softmax attention of one head for one sample, with its context.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub weights: Tensor,
    pub sidecar: DumpSidecar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub layer: usize,
    pub head: usize,
    pub spans: Vec<ModalSpan>,
    pub tokens: Vec<String>,
    pub question_tokens: usize,
    pub answer: usize,
    pub answer_probs: Vec<f64>,
}

pub fn dump_attention(model: &MultimodalEncoder, sample: &Prepared, layer: usize, head: usize) -> Result<AttentionDump> {
    if layer >= model.layers.len() {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            len: model.layers.len(),
        });
    }
    if head >= model.config.heads {
        return Err(Error::Index {
            what: "head",
            index: head,
            len: model.config.heads,
        });
    }
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, &sample.grid, &sample.tokens, sample.mask.as_ref())?;
    let weights = tape.value(out.attention[layer][head]).detached();
    let probs = ops::softmax(tape.value(out.logits).data());
    let mut tokens = vec!["[CLS]".to_string()];
    tokens.extend((0..sample.grid.len()).map(|i| format!("patch{i}")));
    tokens.extend(sample.surfaces.iter().cloned());
    Ok(AttentionDump {
        weights,
        sidecar: DumpSidecar {
            layer,
            head,
            spans: out.spans,
            tokens,
            question_tokens: sample.surfaces.len(),
            answer: sample.answer,
            answer_probs: probs,
        },
    })
}

/// Writes `<stem>.mgtn` (weights) and `<stem>.json` (sidecar).
pub fn write_dump(stem: &Path, dump: &AttentionDump) -> Result<()> {
    std::fs::write(stem.with_extension("mgtn"), encode_mgtn(&dump.weights))?;
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&dump.sidecar)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: MaskMode,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub final_loss: f64,
    pub finite: bool,
}

/// Trains one model per mask mode from the same seed and data.
pub fn run_ablation(base: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<Vec<AblationRow>> {
    MaskMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig {
                mask_mode: mode,
                ..base.clone()
            };
            let out = train(&cfg, train_set, Some(eval_set), None, &mut std::io::sink())?;
            let final_loss = out.metrics.last().map_or(f64::NAN, |m| m.loss);
            Ok(AblationRow {
                mode,
                train_accuracy: out.train_accuracy,
                eval_accuracy: out.eval.map_or(0.0, |e| e.accuracy),
                final_loss,
                finite: out.metrics.iter().all(|m| m.loss.is_finite()),
            })
        })
        .collect()
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| mask | train acc | held-out acc | final loss |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.6} |\n",
            r.mode.as_str(),
            r.train_accuracy,
            r.eval_accuracy,
            r.final_loss
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 20,
            batch_size: 4,
            lr: 3e-3,
            train_size: 16,
            eval_size: 8,
            eval_every: 10,
            d_model: 16,
            heads: 2,
            d_ff: 16,
            l_max: 24,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metrics_log_is_json_lines() {
        let cfg = quick();
        let tr = generate_dataset(cfg.train_size, cfg.seed, cfg.scene).unwrap();
        let ev = generate_dataset(cfg.eval_size, cfg.eval_seed(), cfg.scene).unwrap();
        let mut log = Vec::new();
        let out = train(&cfg, &tr, Some(&ev), None, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 20);
        let parsed = read_metrics(&text);
        assert_eq!(parsed, out.metrics);
        assert_eq!(parsed.iter().filter(|m| m.eval_acc.is_some()).count(), 2);
        // a truncated final line is skipped, earlier lines still parse
        let cut = &text[..text.len() - 7];
        assert_eq!(read_metrics(cut).len(), 19);
    }

    #[test]
    fn invalid_lr_rejected() {
        let cfg = TrainConfig { lr: -1.0, ..quick() };
        let tr = generate_dataset(8, 1, cfg.scene).unwrap();
        assert!(matches!(train(&cfg, &tr, None, None, &mut std::io::sink()), Err(Error::Config(_))));
    }

    #[test]
    fn report_from_confusion() {
        let answers: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let r = EvalReport::from_pairs(&answers, [(0, 0), (0, 1), (1, 1), (1, 1)]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.per_class[0].accuracy, 0.5);
    }

    #[test]
    fn random_mask_diagonal_open() {
        let cfg = quick();
        let tr = generate_dataset(6, 3, cfg.scene).unwrap();
        let model = MultimodalEncoder::new(cfg.model_config(tr.text_vocab.len(), 4)).unwrap();
        let p = prepare(&model, &tr, MaskMode::Random, false, 5).unwrap();
        for s in &p {
            let m = s.mask.as_ref().unwrap();
            assert!((0..m.size()).all(|i| m.is_open(i, i)));
            assert!(m.blocked_count() > 0);
        }
        assert_eq!(p, prepare(&model, &tr, MaskMode::Random, false, 5).unwrap());
    }
}
