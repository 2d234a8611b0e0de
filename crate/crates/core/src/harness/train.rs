use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{write_text, RunConfig, RunPaths};
use crate::autograd::Graph;
use crate::backbone::{ForwardOptions, SegmentationModel};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, binary_iou_dice, gate_stats, GateRecord, GateStats, SampleScore, Side};
use crate::optim::Adam;
use crate::params::{named_rng, ParamStore};
use crate::synthdata::{load_examples, Example};
use crate::tensor::Tensor;
use crate::zoomloss::zoom_loss_graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub temperature: f64,
    pub train_loss: f64,
    pub train_dice_term: f64,
    /// Focal term under the zoom objective, BCE under Dice+BCE.
    pub train_pixel_term: f64,
    pub train_size_weight: f64,
    pub train_open_rate: f64,
    pub val_miou: f64,
    pub val_mdice: f64,
    pub val_open_rate: f64,
}

const METRICS_HEADER: &str = "epoch,temperature,train_loss,train_dice_term,train_pixel_term,\
train_size_weight,train_open_rate,val_miou,val_mdice,val_open_rate";

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.temperature,
            self.train_loss,
            self.train_dice_term,
            self.train_pixel_term,
            self.train_size_weight,
            self.train_open_rate,
            self.val_miou,
            self.val_mdice,
            self.val_open_rate
        )
    }

    /// Parses the rows of a `metrics.csv` written by [`train`].
    pub fn parse_csv(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let bad = || Error::InvalidInput(format!("malformed metrics row {line:?}"));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 10 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
                Ok(Self {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    temperature: num(1)?,
                    train_loss: num(2)?,
                    train_dice_term: num(3)?,
                    train_pixel_term: num(4)?,
                    train_size_weight: num(5)?,
                    train_open_rate: num(6)?,
                    val_miou: num(7)?,
                    val_mdice: num(8)?,
                    val_open_rate: num(9)?,
                })
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    pub model: SegmentationModel,
    pub store: ParamStore,
}

struct Logs {
    paths: RunPaths,
    metrics: String,
    gates: String,
}

impl Logs {
    fn gate_rows(&mut self, epoch: usize, phase: &str, stats: &GateStats) {
        for l in &stats.per_layer {
            let side = match l.side {
                Side::Begin => "begin",
                Side::End => "end",
            };
            let _ = writeln!(
                self.gates,
                "{epoch},{phase},{},{side},{},{},{}",
                l.layer, l.calls, l.opened, l.open_rate
            );
        }
    }

    fn flush(&self) -> Result<()> {
        write_text(&self.paths.metrics(), &self.metrics)?;
        write_text(&self.paths.gates(), &self.gates)
    }
}

pub(crate) fn check_shapes(examples: &[Example], cfg: &RunConfig) -> Result<()> {
    for ex in examples {
        if ex.sample.shape() != cfg.model.volume_shape {
            return Err(Error::Config(format!(
                "{}: volume shape {:?} differs from model volume_shape {:?}",
                ex.sample.sample_id,
                ex.sample.shape(),
                cfg.model.volume_shape
            )));
        }
    }
    Ok(())
}

/// Scores `examples` in eval mode; returns per-sample scores and gate records.
pub(crate) fn score(
    model: &SegmentationModel,
    store: &ParamStore,
    examples: &[Example],
    temperature: f64,
    threshold: f64,
) -> Result<(Vec<SampleScore>, Vec<GateRecord>)> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut records = Vec::new();
    for ex in examples {
        let (probs, traces) = model.predict(store, &ex.sample.image, &ex.prompts, temperature)?;
        let (iou, dice) = binary_iou_dice(&probs, &ex.sample.label, threshold)?;
        scores.push(SampleScore {
            sample_id: ex.sample.sample_id.clone(),
            iou,
            dice,
        });
        records.extend(traces.iter().map(|t| t.record()));
    }
    Ok((scores, records))
}

fn numerical(msg: String) -> Error {
    Error::Numerical(msg)
}

/// Trains a model from `cfg`, writing `config.echo`, `metrics.csv`,
/// `gates.csv` and the checkpoint into the run directory. A non-finite loss
/// or gradient aborts with [`Error::Numerical`] after saving the last good
/// parameters.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (_, mut train_set) = load_examples(&cfg.train_manifest)?;
    if let Some(cap) = cfg.max_train_samples {
        train_set.truncate(cap);
    }
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training manifest has no samples".into()));
    }
    let (_, mut val_set) = load_examples(&cfg.test_manifest)?;
    val_set.sort_by(|a, b| a.sample.sample_id.cmp(&b.sample.sample_id));
    val_set.truncate(cfg.val_samples);
    check_shapes(&train_set, cfg)?;
    check_shapes(&val_set, cfg)?;

    let paths = RunPaths::new(cfg.run_dir());
    write_text(&paths.config_echo(), &cfg.to_toml()?)?;
    let (model, mut store) = SegmentationModel::new(cfg.model.clone(), cfg.seed)?;
    // checkpoints hold f32, so parameters must stay within its range
    let mut opt = Adam::new(&store, cfg.lr, cfg.optimizer).with_limit(f64::from(f32::MAX));
    let mut shuffle_rng = named_rng(cfg.seed, "train.shuffle");
    let mut noise_rng = named_rng(cfg.seed, "train.gate_noise");
    let mut logs = Logs {
        paths,
        metrics: format!("{METRICS_HEADER}\n"),
        gates: "epoch,phase,layer,side,calls,opened,open_rate\n".into(),
    };
    let save = |store: &ParamStore, logs: &Logs| -> Result<()> {
        logs.flush()?;
        checkpoint::save(store, cfg, &logs.paths.checkpoint_bin(), &logs.paths.checkpoint_index())
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut accum: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for epoch in 0..cfg.epochs {
        let temperature = cfg.gate_temperature.at(epoch, cfg.epochs);
        let opts = ForwardOptions::train(cfg.estimator, temperature);
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut train_records = Vec::new();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let scale = 1.0 / (batch.len() * cfg.grad_accumulation) as f64;
            for &i in *batch {
                let ex = &train_set[i];
                let mut g = Graph::new();
                let out = model.forward(&mut g, &store, &ex.sample.image, &ex.prompts, &opts, Some(&mut noise_rng))?;
                train_records.extend(out.traces.iter().map(|t| t.record()));
                let bad = g.value(out.probs).first_non_finite().map(|(_, v)| v);
                let report = match bad {
                    None => Some(zoom_loss_graph(&mut g, out.probs, &ex.sample.label, &cfg.loss)?),
                    Some(_) => None,
                };
                let Some((loss, report)) = report.filter(|(_, r)| r.total.is_finite()) else {
                    save(&store, &logs)?;
                    return Err(numerical(format!(
                        "non-finite loss at epoch {} on {}; last good parameters saved to {}",
                        epoch + 1,
                        ex.sample.sample_id,
                        logs.paths.checkpoint_bin().display()
                    )));
                };
                sums[0] += report.total;
                sums[1] += report.dice_term;
                sums[2] += report.focal_term;
                sums[3] += report.size_weight;
                for (id, grad) in g.backward(loss).params(&g) {
                    let acc = accum[id.index()].data_mut();
                    for (a, v) in acc.iter_mut().zip(grad.data()) {
                        *a += scale * v;
                    }
                }
            }
            let last = b + 1 == batches.len();
            if (b + 1) % cfg.grad_accumulation == 0 || last {
                if accum.iter().any(|t| t.first_non_finite().is_some()) {
                    save(&store, &logs)?;
                    return Err(numerical(format!(
                        "non-finite gradient at epoch {}; last good parameters saved",
                        epoch + 1
                    )));
                }
                let grads: Vec<_> = store.ids().zip(accum.iter().cloned()).collect();
                if let Err(Error::Numerical(msg)) = opt.step(&mut store, &grads) {
                    save(&store, &logs)?;
                    return Err(numerical(format!(
                        "{msg} at epoch {}; last good parameters saved",
                        epoch + 1
                    )));
                }
                accum.iter_mut().for_each(|t| t.data_mut().fill(0.0));
            }
        }

        let (scores, val_records) = score(&model, &store, &val_set, temperature, cfg.threshold)?;
        let (val_miou, val_mdice) = if scores.is_empty() {
            (0.0, 0.0)
        } else {
            let r = aggregate(scores, cfg.threshold)?;
            (r.miou, r.mdice)
        };
        let n = train_set.len() as f64;
        let train_stats = gate_stats(&train_records);
        let val_stats = gate_stats(&val_records);
        let m = EpochMetrics {
            epoch: epoch + 1,
            temperature,
            train_loss: sums[0] / n,
            train_dice_term: sums[1] / n,
            train_pixel_term: sums[2] / n,
            train_size_weight: sums[3] / n,
            train_open_rate: train_stats.overall_open_rate,
            val_miou,
            val_mdice,
            val_open_rate: val_stats.overall_open_rate,
        };
        let _ = writeln!(logs.metrics, "{}", m.csv_row());
        logs.gate_rows(epoch + 1, "train", &train_stats);
        logs.gate_rows(epoch + 1, "val", &val_stats);
        logs.flush()?;
        progress(&m);
        history.push(m);
    }
    save(&store, &logs)?;
    Ok(TrainOutcome {
        run_dir: logs.paths.dir,
        epochs: history,
        model,
        store,
    })
}
