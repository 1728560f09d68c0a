//! AdamW training loop with patch sampling, validation and checkpointing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cisunet_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_graph, to_channels_last};
use crate::checkpoint::{Checkpoint, OptimizerState, RngState};
use crate::config::RunConfig;
use crate::data::{CropSampler, ImageVolume, LabelMap, LabelVolume};
use crate::error::{Error, Result};
use crate::inference::{
    labels_from_logits, sliding_window_predict, Blend, SegmentationModel, DEFAULT_OVERLAP,
};
use crate::loss::{dice_ce, LossWeights};
use crate::metrics::evaluate_case;
use crate::params::NetworkParameters;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            state: OptimizerState {
                step: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut NetworkParameters<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::invalid(
                    "adamw",
                    format!("gradient shape mismatch for `{name}`"),
                ));
            }
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = f64::from(g);
                let m_new = ADAM_BETA1 * f64::from(*m) + (1.0 - ADAM_BETA1) * g;
                let v_new = ADAM_BETA2 * f64::from(*v) + (1.0 - ADAM_BETA2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let mut wf = f64::from(*w);
                wf -= self.lr * self.weight_decay * wf;
                wf -= self.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + ADAM_EPS);
                *w = wf as f32;
            }
        }
        Ok(())
    }
}

/// A preprocessed image/label pair.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub id: String,
    pub image: ImageVolume,
    pub labels: LabelVolume,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Mean foreground DSC over the validation cases, when validated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_dsc: Option<f64>,
    pub elapsed_s: f64,
}

/// Append-only log, optionally mirrored to a file.
#[derive(Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    sink: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrainingLog {
            entries: Vec::new(),
            sink: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.iteration <= last.iteration {
                return Err(Error::invalid(
                    "training_log",
                    format!("iteration {} after {}", entry.iteration, last.iteration),
                ));
            }
        }
        if let (Some(sink), Some(path)) = (&mut self.sink, &self.path) {
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::invalid("training_log", e.to_string()))?;
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| Error::invalid("checkpoint", format!("bad rng position `{}`", s.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Training state: weights, optimiser, iteration counter and sampling rng.
pub struct Trainer {
    pub config: RunConfig,
    pub params: NetworkParameters<f32>,
    pub optimizer: AdamW,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh weights and rng, both derived from `config.train.rng_seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.rng_seed;
        Ok(Trainer {
            params: NetworkParameters::init(&config.model, seed),
            optimizer: AdamW::new(config.train.learning_rate, config.train.weight_decay),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            config,
        })
    }

    /// Resumes from a checkpoint, keeping its configuration.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config)?;
        t.params = ckpt.params;
        t.iteration = ckpt.iteration;
        if let Some(state) = ckpt.optimizer {
            t.optimizer.state = state;
        }
        if let Some(rng) = &ckpt.rng {
            t.rng = restore_rng(rng)?;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.state.clone()),
            rng: Some(rng_state(&self.rng)),
        }
    }

    pub fn model(&self) -> SegmentationModel {
        SegmentationModel {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn samplers(&self, cases: &[TrainingCase]) -> Result<Vec<CropSampler>> {
        cases
            .iter()
            .map(|c| {
                if let Some(&bad) = c
                    .labels
                    .label_set()
                    .iter()
                    .find(|&&l| l as usize >= self.config.model.num_classes)
                {
                    return Err(Error::invalid(
                        "train",
                        format!(
                            "case {} has label {bad} but the model has {} classes",
                            c.id, self.config.model.num_classes
                        ),
                    ));
                }
                CropSampler::new(
                    c.id.clone(),
                    &c.image,
                    &c.labels,
                    self.config.train.patch_size,
                )
            })
            .collect()
    }

    /// Draws a batch: `samples_per_volume` crops from each randomly chosen
    /// volume until `batch_size` crops are collected.
    fn sample_batch(&mut self, samplers: &[CropSampler]) -> Result<(Tensor<f32>, Vec<u16>)> {
        let batch = self.config.train.batch_size;
        let per_volume = self.config.data.samples_per_volume;
        let ratio = self.config.data.pos_neg_ratio;
        let patch = self.config.train.patch_size;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut drawn = 0;
        while drawn < batch {
            let sampler = &samplers[self.rng.random_range(0..samplers.len())];
            for _ in 0..per_volume.min(batch - drawn) {
                let p = sampler.sample(ratio, &mut self.rng)?;
                images.extend_from_slice(p.image.data());
                labels.extend_from_slice(p.labels.data());
                drawn += 1;
            }
        }
        let x = Tensor::new([batch, 1, patch[0], patch[1], patch[2]], images)?;
        Ok((x, labels))
    }

    /// One optimisation step; returns the loss before the update.
    pub fn step(&mut self, samplers: &[CropSampler]) -> Result<f64> {
        if samplers.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let (x, labels) = self.sample_batch(samplers)?;
        let weights = LossWeights::new(self.config.train.lambda_dice, self.config.train.lambda_ce)?;
        let g = Graph::new();
        let bound = self.params.bind(&g);
        let input = g.constant(to_channels_last(&x)?);
        let logits = forward_graph(&g, &input, &bound, &self.config.model)?;
        let loss = dice_ce(&g, &logits, &labels, weights)?;
        let value = f64::from(loss.value().data()[0]);
        self.iteration += 1;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                loss: value,
            });
        }
        let grads = bound.gradients(&g.backward(&loss)?);
        drop(bound);
        drop(g);
        self.optimizer.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Mean foreground DSC of sliding-window predictions on `cases`.
    pub fn validate(&self, cases: &[TrainingCase]) -> Result<f64> {
        let model = self.model();
        let map = LabelMap::generic(self.config.model.num_classes);
        let mut total = 0.0;
        for c in cases {
            let logits = sliding_window_predict(
                &c.image,
                &model,
                self.config.train.patch_size,
                DEFAULT_OVERLAP,
                Blend::Gaussian,
            )?;
            let pred = labels_from_logits(&logits, c.image.geometry().clone())?;
            total += evaluate_case(&c.id, &pred, &c.labels, &map)?.mean_dsc();
        }
        Ok(total / cases.len().max(1) as f64)
    }

    /// Runs until `config.train.iterations`, logging every step. When
    /// `out_dir` is set, checkpoints go to `iter_NNNNNN.ckpt` every
    /// `checkpoint_every` iterations and to `final.ckpt` at the end.
    pub fn train(
        &mut self,
        cases: &[TrainingCase],
        validation: &[TrainingCase],
        out_dir: Option<&Path>,
        log: &mut TrainingLog,
    ) -> Result<()> {
        if cases.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let samplers = self.samplers(cases)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let start = Instant::now();
        let tc = self.config.train.clone();
        while self.iteration < tc.iterations {
            let loss = self.step(&samplers)?;
            let val_dsc = if tc.validate_every > 0
                && self.iteration.is_multiple_of(tc.validate_every)
                && !validation.is_empty()
            {
                Some(self.validate(validation)?)
            } else {
                None
            };
            log::info!("iteration {} loss {loss:.5}", self.iteration);
            log.push(LogEntry {
                iteration: self.iteration,
                loss,
                val_dsc,
                elapsed_s: start.elapsed().as_secs_f64(),
            })?;
            if let Some(dir) = out_dir {
                if self.iteration.is_multiple_of(tc.checkpoint_every) {
                    self.checkpoint()
                        .save(dir.join(format!("iter_{:06}.ckpt", self.iteration)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Preprocessed training cases loaded from a dataset directory.
pub fn load_training_cases(root: &Path, config: &RunConfig) -> Result<Vec<TrainingCase>> {
    use crate::data::{list_cases, preprocess_image, preprocess_labels, read_image, read_labels};
    let mut out = Vec::new();
    for case in list_cases(root)? {
        let Some(lp) = &case.labels else {
            return Err(Error::Dataset {
                path: case.image.clone(),
                msg: format!("no label file for case {}", case.id),
            });
        };
        let image = preprocess_image(&read_image(&case.image)?, &config.data)?;
        let labels = preprocess_labels(&read_labels(lp)?, &config.data)?;
        if image.dims() != labels.dims() {
            return Err(Error::Dataset {
                path: lp.clone(),
                msg: format!(
                    "image {:?} and labels {:?} differ after resampling",
                    image.dims(),
                    labels.dims()
                ),
            });
        }
        out.push(TrainingCase {
            id: case.id,
            image,
            labels,
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "no cases found".into(),
        });
    }
    Ok(out)
}
