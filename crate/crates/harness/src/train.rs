//! Training and evaluation for the three regimes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tipool::data::{make_batches, stack_samples, BatchMode, LabeledImageSet};
use tipool::layers::SoftmaxXent;
use tipool::{Adadelta32, Mode, Network32, Sgd, Tensor32, TransformSet};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{OptimizerConfig, Regime, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::metrics::{self, MetricsRow};

const EVAL_CHUNK: usize = 100;

/// A generator for one purpose within one epoch. Streams are derived from
/// the seed alone, so resuming at an epoch boundary needs no saved state.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generator for parameter initialization.
pub fn init_stream(seed: u64) -> ChaCha8Rng {
    stream(seed, 0)
}

/// Batch-order and dropout generators for a 1-based epoch.
pub fn epoch_streams(seed: u64, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    (stream(seed, 2 * epoch as u64), stream(seed, 2 * epoch as u64 + 1))
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adadelta(Adadelta32),
    Sgd(Sgd),
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig) -> Result<Self> {
        Ok(match *cfg {
            OptimizerConfig::Adadelta { rho, eps } => Optimizer::Adadelta(Adadelta32::new(rho, eps)?),
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd(Sgd::new(lr)?),
        })
    }

    fn step(&mut self, net: &mut Network32) -> Result<()> {
        let mut params = net.params_mut();
        match self {
            Optimizer::Adadelta(o) => o.step(&mut params)?,
            Optimizer::Sgd(o) => o.step(&mut params)?,
        }
        Ok(())
    }
}

pub fn build_network(header: &CheckpointHeader) -> Result<Network32> {
    let phi = match header.regime {
        Regime::Augment => TransformSet::identity(),
        Regime::Ti | Regime::Mil => header.transforms.clone(),
    };
    // parameters are overwritten from the checkpoint
    Ok(Network32::new(header.topology.clone(), phi, &mut init_stream(header.seed))?)
}

pub fn load_parameters(net: &mut Network32, ck: &Checkpoint) -> Result<()> {
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        let t = ck
            .block(name)
            .ok_or_else(|| HarnessError::Format(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(HarnessError::Format(format!(
                "parameter {name}: checkpoint shape {:?}, network {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// Restores a network from a checkpoint, ready for evaluation.
pub fn network_from_checkpoint(ck: &Checkpoint) -> Result<Network32> {
    let mut net = build_network(&ck.header)?;
    load_parameters(&mut net, ck)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

fn count_errors(logits: &Tensor32, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            // first maximum wins, matching the tie rule elsewhere
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best != label
        })
        .count()
}

fn logits_for(net: &mut Network32, regime: Regime, inputs: Tensor32, rng: &mut ChaCha8Rng) -> Result<Tensor32> {
    Ok(match regime {
        Regime::Mil => net.forward_mil(inputs, rng)?,
        Regime::Ti | Regime::Augment => net.forward(inputs, rng)?,
    })
}

fn check_geometry(net: &Network32, set: &LabeledImageSet) -> Result<()> {
    let s = net.topology().input_size;
    if set.image_size() != (s, s) {
        return Err(HarnessError::Config(format!(
            "network expects {s}x{s} images, data is {:?}",
            set.image_size()
        )));
    }
    Ok(())
}

/// Classification error in percent, evaluation mode.
pub fn evaluate(net: &mut Network32, regime: Regime, set: &LabeledImageSet) -> Result<f64> {
    check_geometry(net, set)?;
    if set.is_empty() {
        return Err(HarnessError::Config("cannot evaluate an empty set".into()));
    }
    let mode = net.mode();
    net.set_mode(Mode::Eval);
    let phi = net.transforms().clone();
    let mut rng = stream(0, 0);
    let mut wrong = 0;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = stack_samples(set, &phi, chunk)?;
        let logits = logits_for(net, regime, batch.inputs, &mut rng);
        let logits = match logits {
            Ok(l) => l,
            Err(e) => {
                net.set_mode(mode);
                return Err(e);
            }
        };
        wrong += count_errors(&logits, &batch.labels);
    }
    net.set_mode(mode);
    Ok(100.0 * wrong as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub epochs: usize,
    pub presentations: u64,
    pub final_test_err_pct: f64,
    pub best_test_err_pct: f64,
    pub metrics: Vec<MetricsRow>,
}

pub struct Trainer {
    cfg: TrainConfig,
    net: Network32,
    /// Transforms applied to training samples when batching.
    phi: TransformSet,
    opt: Optimizer,
    epoch: usize,
    presentations: u64,
    best_test_err_pct: Option<f64>,
    metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let topology = cfg.topology.build(cfg.dropout);
        let net = Network32::new(topology, cfg.network_transforms()?, &mut init_stream(cfg.seed))?;
        Ok(Trainer {
            phi: cfg.transforms.build()?,
            opt: Optimizer::new(&cfg.optimizer)?,
            cfg,
            net,
            epoch: 0,
            presentations: 0,
            best_test_err_pct: None,
            metrics: Vec::new(),
        })
    }

    /// Continues a run from `ck`; the checkpoint must describe the same
    /// network, transforms and regime as `cfg`.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let h = &ck.header;
        if h.regime != t.cfg.regime || &h.topology != t.net.topology() || h.transforms != t.phi || h.seed != t.cfg.seed
        {
            return Err(HarnessError::Config("checkpoint does not match the configuration".into()));
        }
        load_parameters(&mut t.net, ck)?;
        if let Optimizer::Adadelta(o) = &mut t.opt {
            let n = t.net.params().len();
            let state = (0..n)
                .map(|i| match (ck.block(&format!("optim.{i}.grad_sq")), ck.block(&format!("optim.{i}.update_sq"))) {
                    (Some(g), Some(u)) => Some((g.clone(), u.clone())),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>()
                .unwrap_or_default();
            *o = o.clone().with_state(state);
        }
        t.epoch = h.epoch;
        t.presentations = h.presentations;
        t.best_test_err_pct = h.best_test_err_pct;
        t.metrics = h.metrics.clone();
        Ok(t)
    }

    pub fn network(&self) -> &Network32 {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network32 {
        &mut self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn presentations(&self) -> u64 {
        self.presentations
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blocks: Vec<(String, Tensor32)> =
            self.net.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        if let Optimizer::Adadelta(o) = &self.opt {
            for (i, (g, u)) in o.state().iter().enumerate() {
                blocks.push((format!("optim.{i}.grad_sq"), g.clone()));
                blocks.push((format!("optim.{i}.update_sq"), u.clone()));
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                regime: self.cfg.regime,
                topology: self.net.topology().clone(),
                transforms: self.phi.clone(),
                optimizer: self.cfg.optimizer,
                epoch: self.epoch,
                presentations: self.presentations,
                seed: self.cfg.seed,
                best_test_err_pct: self.best_test_err_pct,
                metrics: self.metrics.clone(),
            },
            blocks,
        }
    }

    fn batch_mode(&self) -> BatchMode {
        match self.cfg.regime {
            Regime::Augment => BatchMode::Augment,
            Regime::Ti | Regime::Mil => BatchMode::Ti,
        }
    }

    fn dump_diagnostics(&self, out: Option<&Path>, batch: usize, indices: &[usize], msg: &str) {
        let Some(out) = out else { return };
        let mut text = format!(
            "message = {msg:?}\nepoch = {}\nbatch = {batch}\nsamples = {indices:?}\n\n[parameters]\n",
            self.epoch + 1
        );
        for (name, p) in self.net.params() {
            let finite = p.value.data().iter().all(|v| v.is_finite());
            let max_abs = p.value.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            text.push_str(&format!("\"{name}\" = {{ finite = {finite}, max_abs = {max_abs:e} }}\n"));
        }
        // best effort: the numeric error is what gets reported
        let _ = write_atomic(&out.join("diagnostic.toml"), text.as_bytes());
    }

    /// One pass over the training set, stopping early once `budget`
    /// presentations have been seen. Returns (mean loss, error %).
    fn train_epoch(&mut self, train: &LabeledImageSet, budget: u64, out: Option<&Path>) -> Result<(f64, f64)> {
        let epoch = self.epoch + 1;
        let (batch_rng, mut drop_rng) = epoch_streams(self.cfg.seed, epoch);
        let stream = make_batches(train, &self.phi, self.cfg.batch_size, self.batch_mode(), batch_rng)?;
        self.net.set_mode(Mode::Train);
        let (mut loss_sum, mut wrong, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, batch) in stream.enumerate() {
            if self.presentations >= budget {
                break;
            }
            let batch = batch?;
            let mut xent = SoftmaxXent::default();
            let step = (|| -> Result<(f32, usize)> {
                let logits = logits_for(&mut self.net, self.cfg.regime, batch.inputs.clone(), &mut drop_rng)?;
                let loss = xent.forward(&logits, &batch.labels)?;
                if !loss.is_finite() {
                    return Err(HarnessError::Numeric(format!("loss is {loss}")));
                }
                let wrong = count_errors(&logits, &batch.labels);
                self.net.zero_grad();
                self.net.backward(&xent.backward()?)?;
                self.opt.step(&mut self.net)?;
                Ok((loss, wrong))
            })();
            let (loss, w) = match step {
                Ok(v) => v,
                Err(e @ HarnessError::Numeric(_)) => {
                    self.dump_diagnostics(out, b, &batch.indices, &e.to_string());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let n = batch.labels.len();
            loss_sum += f64::from(loss) * n as f64;
            wrong += w;
            seen += n;
            self.presentations += batch.presentations() as u64;
        }
        self.epoch = epoch;
        let seen = seen.max(1) as f64;
        Ok((loss_sum / seen, 100.0 * wrong as f64 / seen))
    }

    /// Trains until the presentation budget is spent. With `out` set, writes
    /// `metrics.csv`, `final.tipl` (after every epoch) and `best.tipl`.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<RunSummary> {
        check_geometry(&self.net, &data.train)?;
        check_geometry(&self.net, &data.test)?;
        let budget = self.cfg.budget(data.train.len())?;
        let start = Instant::now();
        while self.presentations < budget {
            let (train_loss, train_err_pct) = self.train_epoch(&data.train, budget, out)?;
            let last = self.presentations >= budget;
            let due = self.cfg.eval_every > 0 && self.epoch.is_multiple_of(self.cfg.eval_every);
            let test_err_pct = if due || last {
                Some(evaluate(&mut self.net, self.cfg.regime, &data.test)?)
            } else {
                None
            };
            let wall_s = if self.cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            self.metrics.push(MetricsRow {
                epoch: self.epoch,
                presentations: self.presentations,
                train_loss,
                train_err_pct,
                test_err_pct,
                wall_s,
            });
            let improved = test_err_pct.is_some_and(|e| self.best_test_err_pct.is_none_or(|b| e < b));
            if improved {
                self.best_test_err_pct = test_err_pct;
            }
            if let Some(out) = out {
                metrics::write_csv(&out.join("metrics.csv"), &self.metrics)?;
                let ck = self.checkpoint();
                ck.save(&out.join("final.tipl"))?;
                if improved {
                    ck.save(&out.join("best.tipl"))?;
                }
            }
        }
        let final_test_err_pct = match self.metrics.last().and_then(|r| r.test_err_pct) {
            Some(e) => e,
            None => evaluate(&mut self.net, self.cfg.regime, &data.test)?,
        };
        Ok(RunSummary {
            epochs: self.epoch,
            presentations: self.presentations,
            final_test_err_pct,
            best_test_err_pct: self.best_test_err_pct.unwrap_or(final_test_err_pct),
            metrics: self.metrics.clone(),
        })
    }
}

/// Loads data, trains and writes outputs under `cfg.out_dir`.
pub fn cmd_train(cfg: TrainConfig, data_dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let data = crate::dataset::load(&cfg.data, data_dir)?;
    let out: PathBuf = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg)?,
    };
    trainer.run(&data, Some(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_counting_uses_first_maximum() {
        let logits = Tensor32::from_vec(&[3, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 5.0, 0.0, 0.0]).unwrap();
        assert_eq!(count_errors(&logits, &[0, 2, 0]), 1);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        use rand::Rng;
        let draw = |seed, epoch| {
            let (mut b, mut d) = epoch_streams(seed, epoch);
            (b.gen::<u64>(), d.gen::<u64>())
        };
        let (b, d) = draw(3, 1);
        assert_eq!((b, d), draw(3, 1));
        assert_ne!(b, d);
        assert_ne!(b, draw(3, 2).0);
        assert_ne!(b, draw(4, 1).0);
        assert_ne!(b, init_stream(3).gen::<u64>());
    }
}
