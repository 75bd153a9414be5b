//! Experiment configuration, the training loop, and run records.
//!
//! A run directory holds `loss_trace.csv` (one line per step),
//! `curve.csv` (one line per evaluation), `reports/epoch_NNN.json`,
//! `last.ckpt`, `best.ckpt`, and `run.json`, which is rewritten atomically
//! after every epoch so an interrupted run always leaves a parseable record.

use crate::data::{read_dataset, Sample};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::metrics::{evaluate, EvalOptions, EvalReport, MetricKind};
use crate::nn::{AdamConfig, AdamState, Block, Checkpoint, Head, NetworkSpec};
use crate::objective::{baseline_aug_batch, two_branch_step, LossConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_input")]
    pub input: [usize; 3],
    /// Pooling layers applied to the input before the first block.
    #[serde(default)]
    pub stem_pools: usize,
    /// `[convs, channels]` per block.
    #[serde(default = "default_blocks")]
    pub blocks: Vec<[usize; 2]>,
    #[serde(default)]
    pub head: Head,
    /// Penalty weight at every top-block mask layer.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_input() -> [usize; 3] {
    [120, 120, 1]
}

fn default_blocks() -> Vec<[usize; 2]> {
    vec![[3, 32], [2, 64], [2, 128]]
}

fn default_lambda() -> f64 {
    1.0
}

fn default_classes() -> usize {
    10
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: default_input(),
            stem_pools: 0,
            blocks: default_blocks(),
            head: Head::default(),
            lambda: default_lambda(),
            classes: default_classes(),
        }
    }
}

impl NetworkConfig {
    pub fn build(&self) -> Result<NetworkSpec> {
        if !(self.lambda >= 0.0) {
            return Err(invalid!("lambda must be non-negative, got {}", self.lambda));
        }
        let blocks: Vec<Block> = self.blocks.iter().map(|b| Block::new(b[0], b[1])).collect();
        NetworkSpec::from_blocks(self.input, self.stem_pools, &blocks, self.classes, self.head, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory; there is no clock-based seeding.
    pub seed: u64,
    /// Directory with `train/` and `test/` datasets.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Evaluate every this many epochs (and always after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub metric: MetricKind,
    /// Also measure guided-backprop localization at every evaluation.
    #[serde(default)]
    pub localization: bool,
    /// Train on at most this many samples (all when absent).
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub network: NetworkConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_eval_every() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid!("config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| invalid!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid!("batch_size and eval_every must be positive"));
        }
        self.loss.validate()?;
        for split in ["train", "test"] {
            let p = self.data_dir.join(split);
            if !p.is_dir() {
                return Err(invalid!("dataset directory {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Network for this run, with dropout added for regularized variants.
    pub fn network(&self) -> Result<NetworkSpec> {
        let net = self.network.build()?;
        if self.loss.variant.regularizes() && self.loss.dropout > 0.0 {
            net.with_dropout_before_fc(self.loss.dropout)
        } else {
            Ok(net)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted { step: u64, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub value: f64,
    pub report: String,
    pub localization: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub steps: u64,
    pub epochs: Vec<EpochEntry>,
    pub loss_trace: String,
    pub curve: String,
    pub checkpoints: Vec<String>,
    pub best: Option<BestEpoch>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }

    /// Best evaluation recomputed from the epoch list (first maximum wins).
    pub fn recompute_best(&self) -> Option<BestEpoch> {
        self.epochs.iter().fold(None, |best: Option<BestEpoch>, e| match best {
            Some(b) if b.value >= e.value => Some(b),
            _ => Some(BestEpoch {
                epoch: e.epoch,
                value: e.value,
            }),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        io::write_atomic(&dir.join("run.json"), &json)
    }
}

pub const LOSS_TRACE_HEADER: &str = "step,L_d,L_c,total,wall_ms";

/// One parsed line of a loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceLine {
    pub step: u64,
    pub discriminative: f64,
    pub compositional: f64,
    pub total: f64,
    pub wall_ms: f64,
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<TraceLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset: line as u64,
        message: msg,
    };
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i, format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i, e.to_string()));
            Ok(TraceLine {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| bad(i, e.to_string()))?,
                discriminative: num(f[1])?,
                compositional: num(f[2])?,
                total: num(f[3])?,
                wall_ms: num(f[4])?,
            })
        })
        .collect()
}

fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<Sample>> {
    Ok(read_dataset(&cfg.data_dir.join(split))?.1)
}

/// Trains from scratch as configured, evaluating on the test split.
///
/// Epoch 0 is the evaluation of the initial parameters. A non-finite loss
/// aborts the run with the step recorded in `run.json`.
pub fn train_run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mut train = load_split(cfg, "train")?;
    if let Some(n) = cfg.max_train {
        train.truncate(n);
    }
    let test = load_split(cfg, "test")?;
    if train.is_empty() {
        return Err(invalid!("empty training set"));
    }
    train_on(cfg, &train, &test)
}

/// [`train_run`] on samples already in memory; `cfg.data_dir` is not read.
pub fn train_on(cfg: &ExperimentConfig, train: &[Sample], test: &[Sample]) -> Result<RunRecord> {
    let net = cfg.network()?;
    let out = &cfg.out_dir;
    io::create_dir_all(&out.join("reports"))?;
    let trace_path = out.join("loss_trace.csv");
    let curve_path = out.join("curve.csv");
    io::write_atomic(&trace_path, format!("{LOSS_TRACE_HEADER}\n").as_bytes())?;
    let metric_name = match cfg.metric {
        MetricKind::Topk => "topk",
        MetricKind::Ap => "map",
    };
    io::write_atomic(&curve_path, format!("epoch,{metric_name}\n").as_bytes())?;

    let mut params = net.init_params(cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.optimizer);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    step_rng.set_stream(2);
    let eval_opts = EvalOptions {
        metric: cfg.metric,
        localization: cfg.localization,
        ..Default::default()
    };

    let mut record = RunRecord {
        config: cfg.clone(),
        status: RunStatus::Running,
        steps: 0,
        epochs: Vec::new(),
        loss_trace: "loss_trace.csv".into(),
        curve: "curve.csv".into(),
        checkpoints: Vec::new(),
        best: None,
    };

    let evaluate_epoch = |epoch: usize, params: &crate::autodiff::ParamSet, adam: &AdamState, record: &mut RunRecord| -> Result<()> {
        let mut report = evaluate(&net, params, test, &eval_opts)?;
        report.epoch = Some(epoch);
        let name = format!("reports/epoch_{epoch:03}.json");
        io::write_atomic(&out.join(&name), report.to_json()?.as_bytes())?;
        io::append_line(&curve_path, &format!("{epoch},{}", report.value))?;
        let ckpt = Checkpoint {
            network: net.clone(),
            params: params.clone(),
            adam: Some(adam.clone()),
        };
        ckpt.save(&out.join("last.ckpt"))?;
        let improved = record.best.as_ref().is_none_or(|b| report.value > b.value);
        if improved {
            ckpt.save(&out.join("best.ckpt"))?;
            record.best = Some(BestEpoch {
                epoch,
                value: report.value,
            });
        }
        for c in ["last.ckpt", "best.ckpt"] {
            if !record.checkpoints.iter().any(|x| x == c) {
                record.checkpoints.push(c.into());
            }
        }
        record.epochs.push(EpochEntry {
            epoch,
            value: report.value,
            report: name,
            localization: report.localization.as_ref().map(|l| l.mean),
        });
        record.save(out)
    };

    evaluate_epoch(0, &params, &adam, &mut record)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let raw: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = if cfg.loss.variant.augments() {
                baseline_aug_batch(&raw, &mut step_rng)?
            } else {
                raw
            };
            let step = record.steps + 1;
            let result = two_branch_step(&batch, &net, &mut params, &cfg.loss, &mut step_rng).and_then(|o| {
                if o.loss.total.is_finite() {
                    Ok(o)
                } else {
                    Err(Error::Numerical(format!("non-finite loss {}", o.loss.total)))
                }
            });
            let output = match result {
                Ok(o) => o,
                Err(e @ Error::Numerical(_)) => {
                    record.status = RunStatus::Aborted {
                        step,
                        message: e.to_string(),
                    };
                    record.save(out)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut params)?;
            record.steps = step;
            let l = &output.loss;
            io::append_line(
                &trace_path,
                &format!(
                    "{step},{},{},{},{:.3}",
                    l.discriminative,
                    l.compositional,
                    l.total,
                    start.elapsed().as_secs_f64() * 1e3
                ),
            )?;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            evaluate_epoch(epoch, &params, &adam, &mut record)?;
        }
    }
    record.status = RunStatus::Completed;
    record.save(out)?;
    Ok(record)
}

/// Evaluates a checkpoint on a dataset directory.
pub fn evaluate_run(checkpoint: &Path, data_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, samples) = read_dataset(data_dir)?;
    evaluate(&ckpt.network, &ckpt.params, &samples, opts)
}

/// Writes `epoch,value` lines for the per-epoch headline metric.
pub fn write_curve_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut s = String::from("epoch,value\n");
    for e in &record.epochs {
        s.push_str(&format!("{},{}\n", e.epoch, e.value));
    }
    io::write_atomic(path, s.as_bytes())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            eval_every: 1,
            metric: MetricKind::Topk,
            localization: false,
            max_train: None,
            network: NetworkConfig::default(),
            loss: LossConfig::new(crate::objective::Variant::CompFull),
            optimizer: AdamConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"
seed = 3
data_dir = "d"
out_dir = "o"
[loss]
variant = "comp-full"
"#;
        let c = ExperimentConfig::from_toml(ok).unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.loss.gamma, 0.5);
        assert_eq!(c.network.blocks, vec![[3, 32], [2, 64], [2, 128]]);
        let typo = ok.replace("seed = 3", "seed = 3\nbatch_szie = 4");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let no_seed = ok.replace("seed = 3", "");
        assert!(ExperimentConfig::from_toml(&no_seed).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn best_is_first_maximum() {
        let mut r = RunRecord {
            config: ExperimentConfig::default(),
            status: RunStatus::Completed,
            steps: 0,
            epochs: Vec::new(),
            loss_trace: String::new(),
            curve: String::new(),
            checkpoints: Vec::new(),
            best: None,
        };
        for (e, v) in [(0, 0.1), (1, 0.4), (2, 0.4), (3, 0.2)] {
            r.epochs.push(EpochEntry {
                epoch: e,
                value: v,
                report: String::new(),
                localization: None,
            });
        }
        assert_eq!(r.recompute_best(), Some(BestEpoch { epoch: 1, value: 0.4 }));
    }
}
