use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::loss::{loss, LossWeights, PairPlan};
use super::net::{argmax_rows, SacNet};
use super::optim::Adam;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: &str = "step,epoch,loss,ce,contrastive,train_acc";

/// One optimizer step as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub ce: f64,
    pub contrastive: f64,
    /// Accuracy of the batch before the update.
    pub train_acc: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.ce, self.contrastive, self.train_acc
        )
    }
}

/// A batch and the within-batch pairs the contrastive term compares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub indices: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

/// One epoch of class-balanced batches over `train`.
///
/// Each batch holds `batch_size / 2` class slots, filled by cycling through a
/// shuffled class order; every slot contributes two samples of its class,
/// drawn without replacement from a shuffled per-class pool that refills
/// when exhausted. Pairs join consecutive samples: `(2i, 2i+1)` share a
/// class and `(2i+1, 2i+2)` straddle two slots. The epoch has
/// `⌈|train| / batch_size⌉` batches.
pub fn plan_epoch(rng: &mut ChaCha8Rng, train: &[usize], labels: &[usize], batch_size: usize) -> Vec<PlannedBatch> {
    let mut classes: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut pools: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| train.iter().copied().filter(|&i| labels[i] == c).collect())
        .collect();
    let mut cursors = vec![0usize; classes.len()];
    for p in &mut pools {
        p.shuffle(rng);
    }
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.shuffle(rng);
    let mut next_class = 0;
    let slots = (batch_size / 2).max(1);
    let n_batches = train.len().div_ceil(batch_size.max(1));
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut indices = Vec::with_capacity(2 * slots);
        for _ in 0..slots {
            if next_class == order.len() {
                order.shuffle(rng);
                next_class = 0;
            }
            let c = order[next_class];
            next_class += 1;
            for _ in 0..2 {
                if cursors[c] == pools[c].len() {
                    pools[c].shuffle(rng);
                    cursors[c] = 0;
                }
                indices.push(pools[c][cursors[c]]);
                cursors[c] += 1;
            }
        }
        let mut pairs = Vec::with_capacity(2 * slots);
        for i in 0..slots {
            pairs.push((2 * i, 2 * i + 1));
            if i + 1 < slots {
                pairs.push((2 * i + 1, 2 * i + 2));
            }
        }
        batches.push(PlannedBatch { indices, pairs });
    }
    batches
}

/// A model with its optimizer, sampler state and position in training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: SacNet,
    pub adam: Adam,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Sets `n_classes` from the dataset when it is `auto`, and checks an
/// explicit value can hold every label.
pub fn resolve_classes(config: &mut RunConfig, n_subjects: usize) -> Result<()> {
    match config.model.n_classes {
        None => config.model.n_classes = Some(n_subjects),
        Some(c) if c < n_subjects => {
            return Err(Error::ConfigMismatch(format!(
                "n_classes {} is smaller than the {} subjects in the data",
                c, n_subjects
            )))
        }
        Some(_) => {}
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = SacNet::new(&config.model)?;
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
        let adam = Adam::new(config.model.lr, &sizes);
        // The sampler stream is kept apart from the initialization stream.
        let rng = ChaCha8Rng::seed_from_u64(config.model.seed ^ 0x5A17_C0DE_D00D_F00D);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let adam = match &ck.optimizer {
            Some(a) => a.clone(),
            None => {
                let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
                Adam::new(ck.config.model.lr, &sizes)
            }
        };
        Ok(Trainer {
            config: ck.config.clone(),
            model,
            adam,
            rng: ck.rng.restore(),
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, Some(&self.adam), self.epoch, self.step, &self.rng)
    }

    fn weights(&self) -> LossWeights {
        let m = &self.config.model;
        LossWeights {
            w_ce: m.w_ce,
            w_con: m.w_con,
            margin: m.margin,
        }
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn train_step(&mut self, ds: &Dataset, batch: &PlannedBatch) -> Result<StepRecord> {
        let labels = ds.labels(&batch.indices);
        let plan = PairPlan::from_indices(&batch.pairs, &labels);
        let mut g = Graph::new();
        let x = g.constant(ds.batch(&batch.indices));
        let out = self.model.forward(&mut g, x)?;
        let l = loss(&mut g, out.embedding, out.logits, &labels, &plan, &self.weights())?;
        let total = g.data(l.total)[0];
        let preds = argmax_rows(g.data(out.logits), self.model.n_classes());
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        g.backward(l.total)?;
        let params = self.model.named_params();
        debug_assert_eq!(g.learnable_leaves().len(), params.len());
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| {
                g.bound_var(t)
                    .and_then(|v| g.grad(v))
                    .map_or_else(|| vec![0.0; t.numel()], |s| s.to_vec())
            })
            .collect();
        drop(g);
        let mut slots: Vec<&mut Tensor> = self.model.named_params_mut().into_iter().map(|(_, t)| t).collect();
        self.adam.step(&mut slots, &grads)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            loss: total,
            ce: l.ce,
            contrastive: l.contrastive,
            train_acc: correct as f64 / labels.len() as f64,
        })
    }

    pub fn run_epoch(&mut self, ds: &Dataset, train: &[usize]) -> Result<Vec<StepRecord>> {
        let labels: Vec<usize> = ds.samples.iter().map(|s| s.subject).collect();
        let plan = plan_epoch(&mut self.rng, train, &labels, self.config.model.batch_size);
        let mut records = Vec::with_capacity(plan.len());
        for batch in &plan {
            let r = self.train_step(ds, batch)?;
            if !r.loss.is_finite() {
                return Err(Error::InvalidConfig(format!("loss diverged at step {}", r.step)));
            }
            records.push(r);
        }
        self.epoch += 1;
        Ok(records)
    }
}

/// Fraction of `indices` whose argmax logit equals the subject label.
pub fn accuracy(model: &SacNet, ds: &Dataset, indices: &[usize], chunk: usize) -> Result<f64> {
    let (_, logits) = model.infer(&ds.batch(indices), chunk)?;
    let preds = argmax_rows(logits.data(), model.n_classes());
    let labels = ds.labels(indices);
    Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / indices.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv` and per-epoch checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Measure full train-set accuracy after every epoch.
    pub track_accuracy: bool,
    /// Print one progress line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    /// Train-set accuracy after each epoch, when tracked.
    pub epoch_accuracy: Vec<f64>,
}

/// Path of the checkpoint written after `epoch`.
pub fn epoch_checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:03}.sacn"))
}

/// Trains until `config.model.epochs` epochs are complete.
pub fn train(trainer: &mut Trainer, ds: &Dataset, train_idx: &[usize], opts: &TrainOptions) -> Result<TrainSummary> {
    let mut summary = TrainSummary::default();
    let mut log = match &opts.out_dir {
        None => None,
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = trainer.step == 0;
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
    };
    while trainer.epoch < trainer.config.model.epochs as u64 {
        let records = trainer.run_epoch(ds, train_idx)?;
        if let Some((f, path)) = &mut log {
            for r in &records {
                writeln!(f, "{}", r.csv_line()).map_err(|e| Error::io(&*path, e))?;
            }
        }
        if opts.track_accuracy {
            let acc = accuracy(&trainer.model, ds, train_idx, trainer.config.model.batch_size)?;
            summary.epoch_accuracy.push(acc);
        }
        if let Some(dir) = &opts.out_dir {
            let ck = trainer.checkpoint();
            ck.save(&epoch_checkpoint_path(dir, trainer.epoch))?;
            ck.save(&dir.join("checkpoint.sacn"))?;
        }
        if opts.progress {
            let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64;
            let acc = summary.epoch_accuracy.last().map_or(String::new(), |a| format!(" train_acc={a:.3}"));
            eprintln!("epoch {} steps {} mean_loss={mean:.5}{acc}", trainer.epoch, trainer.step);
        }
        summary.records.extend(records);
    }
    Ok(summary)
}
