//! Staged workflow over a work directory.
//!
//! Every stage reads the artifacts of the stages before it and writes its
//! own, stamped with a hash of the configuration keys it depends on. A
//! downstream stage refuses artifacts whose stamp no longer matches.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attack::{attack_direct_use, attack_finetune, tee_only_retrain};
use crate::container::{peek, read_two_branch, read_victim, write_two_branch, write_victim, Meta};
use crate::data::{idx_paths, load_cifar_binary, load_idx, write_idx, Dataset, Normalization, Split};
use crate::error::{io_err, Error, Result};
use crate::finalize::{export_split, import, posthoc_finetune, rollback_mr};
use crate::graph::{tiny_cnn, tiny_resnet, BranchGraph};
use crate::prune::{collect_bn_weights, composite_weights, iterative_prune, load_history, save_checkpoint, write_manifest, PruneConfig};
use crate::resources::count_resources;
use crate::sim::{audit_check, deploy, report_for};
use crate::synth::{generate, SynthConfig};
use crate::train::{accuracy_single, accuracy_two_branch, train_transfer, train_victim, EpochMetrics, Penalty, TrainConfig, TransferEval};
use crate::twobranch::{init_twobranch, InitOptions};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainVictim,
    Init,
    Transfer,
    Prune,
    Finalize,
    Export,
    Simulate,
    Attack,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::TrainVictim,
        Stage::Init,
        Stage::Transfer,
        Stage::Prune,
        Stage::Finalize,
        Stage::Export,
        Stage::Simulate,
        Stage::Attack,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainVictim => "train-victim",
            Stage::Init => "init",
            Stage::Transfer => "transfer",
            Stage::Prune => "prune",
            Stage::Finalize => "finalize",
            Stage::Export => "export",
            Stage::Simulate => "simulate",
            Stage::Attack => "attack",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Every recognised key: the first stage that reads it, its default, and a
/// one-line description.
pub const KEYS: &[(&str, Stage, &str, &str)] = &[
    ("seed", Stage::TrainVictim, "0", "seed for data, initialization, shuffling and subsets"),
    ("data.source", Stage::TrainVictim, "synth", "synth, idx or cifar"),
    ("data.dir", Stage::TrainVictim, "", "directory holding the four MNIST-named IDX files"),
    ("data.cifar_train", Stage::TrainVictim, "", "comma-separated CIFAR binary training files"),
    ("data.cifar_test", Stage::TrainVictim, "", "comma-separated CIFAR binary test files"),
    ("data.classes", Stage::TrainVictim, "10", "number of classes"),
    ("data.train_size", Stage::TrainVictim, "10000", "training samples; 0 keeps the whole file"),
    ("data.test_size", Stage::TrainVictim, "2000", "test samples; 0 keeps the whole file"),
    ("norm.mean", Stage::TrainVictim, "auto", "per-channel mean after scaling to [0,1]; auto picks MNIST or CIFAR-10 values"),
    ("norm.std", Stage::TrainVictim, "auto", "per-channel std after scaling to [0,1]"),
    ("model.arch", Stage::TrainVictim, "tiny-cnn", "tiny-cnn or tiny-resnet"),
    ("model.widths", Stage::TrainVictim, "8,16,16,32", "conv widths: four for tiny-cnn, three for tiny-resnet"),
    ("train.momentum", Stage::TrainVictim, "0.9", "SGD momentum"),
    ("train.weight_decay", Stage::TrainVictim, "0.0001", "SGD weight decay"),
    ("train.batch_size", Stage::TrainVictim, "64", "minibatch size"),
    ("train.lr_schedule_period", Stage::TrainVictim, "5", "divide the learning rate by ten every this many epochs; 0 disables"),
    ("victim.epochs", Stage::TrainVictim, "10", "victim training epochs"),
    ("victim.lr", Stage::TrainVictim, "0.1", "victim learning rate"),
    ("model.merge_logits", Stage::Init, "true", "also merge M_R's logits into the output"),
    ("transfer.epochs", Stage::Transfer, "5", "joint training epochs"),
    ("transfer.lr", Stage::Transfer, "0.1", "joint training learning rate"),
    ("transfer.lambda", Stage::Transfer, "0.0001", "sparsity coefficient"),
    ("transfer.penalty", Stage::Transfer, "composite", "composite |g_R+g_T| or separate |g_R|+|g_T|"),
    ("prune.ratio", Stage::Prune, "0.1", "fraction of prunable channels removed per iteration"),
    ("prune.theta_drop", Stage::Prune, "0.02", "largest tolerated accuracy drop against the victim, as a fraction"),
    ("prune.retrain_epochs", Stage::Prune, "2", "retraining epochs after each pruning step"),
    ("prune.retrain_lr", Stage::Prune, "0.01", "retraining learning rate"),
    ("prune.max_iterations", Stage::Prune, "20", "upper bound on pruning iterations"),
    ("finalize.finetune_epochs", Stage::Finalize, "2", "M_T-only fine-tuning epochs after rollback; 0 skips"),
    ("finalize.finetune_lr", Stage::Finalize, "0.01", "fine-tuning learning rate"),
    ("export.dir", Stage::Export, "export", "destination of the exported pair, relative to the work directory"),
    ("simulate.samples", Stage::Simulate, "100", "test inputs run through the split runtime"),
    ("attack.fractions", Stage::Attack, "0.01,0.05,0.1,0.25,0.5,1.0", "training-data fractions for the fine-tune attack"),
    ("attack.epochs", Stage::Attack, "5", "attacker training epochs"),
    ("attack.lr", Stage::Attack, "0.1", "attacker learning rate"),
];

/// Resolved key=value configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, _, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`; run `tbnet keys` for the list"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key `{key}` missing from KEYS"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Config(format!("`{key}` entry `{s}`: {e}"))))
            .collect()
    }

    /// Canonical text: every key in order, defaults included.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash over every key read by `stage` or any stage before it.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        for (k, st, _, _) in KEYS {
            if *st <= stage {
                h.update(format!("{k}={}\n", self.raw(k)));
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// What a stage produced, as reported on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

pub struct Pipeline {
    pub config: Config,
    pub workdir: PathBuf,
    data: Option<(Dataset, Dataset)>,
}

const VICTIM: &str = "victim.tbnt";
const INIT: &str = "init.tbnt";
const TRANSFER: &str = "transfer.tbnt";
const CHECKPOINTS: &str = "checkpoints";
const MANIFEST: &str = "manifest.jsonl";
const REE_FILE: &str = "tbnet.ree.tbnt";
const TEE_FILE: &str = "tbnet.tee.tbnt";
const AUDIT_FILE: &str = "audit.jsonl";
const REPORT_FILE: &str = "report.json";

impl Pipeline {
    pub fn new(config: Config, workdir: impl Into<PathBuf>) -> Result<Self> {
        let workdir = workdir.into();
        fs::create_dir_all(&workdir).map_err(io_err(&workdir))?;
        Ok(Self {
            config,
            workdir,
            data: None,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn report_path(&self, stage: Stage) -> PathBuf {
        self.workdir.join("reports").join(format!("{stage}.json"))
    }

    pub fn metrics_path(&self, stage: Stage) -> PathBuf {
        self.workdir.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn run(&mut self, stage: Stage) -> Result<StageOutput> {
        log::info!("stage {stage}");
        match stage {
            Stage::TrainVictim => self.train_victim(),
            Stage::Init => self.init(),
            Stage::Transfer => self.transfer(),
            Stage::Prune => self.prune(),
            Stage::Finalize => self.finalize(),
            Stage::Export => self.export(),
            Stage::Simulate => self.simulate(),
            Stage::Attack => self.attack(),
            Stage::Report => self.report(),
        }
    }

    pub fn run_all(&mut self) -> Result<Vec<StageOutput>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn meta(&self, stage: Stage) -> Meta {
        Meta::new(stage.name(), &self.config.stage_hash(stage))
    }

    /// Fails unless `file` exists and was written by `producer` under the
    /// current configuration.
    fn require(&self, consumer: Stage, producer: Stage, file: &Path) -> Result<()> {
        if !file.exists() {
            return Err(Error::Stage(format!(
                "`{consumer}` needs {} from the `{producer}` stage; run `tbnet {producer}` first",
                file.display()
            )));
        }
        let meta = peek(file)?.meta;
        self.check_stamp(consumer, producer, file, &meta.stage, &meta.config_hash)
    }

    fn check_stamp(&self, consumer: Stage, producer: Stage, file: &Path, stage: &str, hash: &str) -> Result<()> {
        if stage != producer.name() {
            return Err(Error::Stage(format!(
                "{} was written by `{stage}`, but `{consumer}` expects output of `{producer}`",
                file.display()
            )));
        }
        let expected = self.config.stage_hash(producer);
        if hash != expected {
            return Err(Error::Stage(format!(
                "{} is stale: it was produced under configuration {hash}, current is {expected}; rerun `tbnet {producer}` and the stages after it",
                file.display()
            )));
        }
        Ok(())
    }

    fn write_report(&self, stage: Stage, body: Value) -> Result<PathBuf> {
        let path = self.report_path(stage);
        let mut doc = json!({
            "stage": stage.name(),
            "config_hash": self.config.stage_hash(stage),
        });
        if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
            d.extend(b);
        }
        write_json(&path, &doc)?;
        Ok(path)
    }

    fn read_report(&self, consumer: Stage, producer: Stage) -> Result<Value> {
        let path = self.report_path(producer);
        if !path.exists() {
            return Err(Error::Stage(format!(
                "`{consumer}` needs {} from the `{producer}` stage; run `tbnet {producer}` first",
                path.display()
            )));
        }
        let v: Value = read_json(&path)?;
        let stage = v["stage"].as_str().unwrap_or_default().to_string();
        let hash = v["config_hash"].as_str().unwrap_or_default().to_string();
        self.check_stamp(consumer, producer, &path, &stage, &hash)?;
        Ok(v)
    }

    fn write_metrics(&self, stage: Stage, metrics: &[EpochMetrics]) -> Result<PathBuf> {
        let path = self.metrics_path(stage);
        let mut s = String::new();
        for m in metrics {
            let mut v = serde_json::to_value(m)?;
            v["stage"] = json!(stage.name());
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
        }
        write_text(&path, &s)?;
        Ok(path)
    }

    fn seed(&self) -> Result<u64> {
        self.config.get("seed")
    }

    fn base_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            momentum: self.config.get("train.momentum")?,
            weight_decay: self.config.get("train.weight_decay")?,
            batch_size: self.config.get("train.batch_size")?,
            lr_schedule_period: self.config.get("train.lr_schedule_period")?,
            lambda_sparsity: 0.0,
            seed: self.seed()?,
            ..TrainConfig::default()
        })
    }

    pub fn victim_train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.config.get("victim.lr")?,
            epochs: self.config.get("victim.epochs")?,
            ..self.base_train()?
        })
    }

    pub fn transfer_train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.config.get("transfer.lr")?,
            epochs: self.config.get("transfer.epochs")?,
            lambda_sparsity: self.config.get("transfer.lambda")?,
            penalty: self.config.get::<Penalty>("transfer.penalty")?,
            ..self.base_train()?
        })
    }

    pub fn prune_config(&self) -> Result<PruneConfig> {
        Ok(PruneConfig {
            ratio: self.config.get("prune.ratio")?,
            theta_drop: self.config.get("prune.theta_drop")?,
            retrain: TrainConfig {
                lr: self.config.get("prune.retrain_lr")?,
                epochs: self.config.get("prune.retrain_epochs")?,
                ..self.transfer_train_config()?
            },
            max_iterations: self.config.get("prune.max_iterations")?,
        })
    }

    pub fn finetune_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.config.get("finalize.finetune_lr")?,
            epochs: self.config.get("finalize.finetune_epochs")?,
            ..self.base_train()?
        })
    }

    pub fn attack_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.config.get("attack.lr")?,
            epochs: self.config.get("attack.epochs")?,
            ..self.base_train()?
        })
    }

    fn normalization(&self, channels: usize) -> Result<Normalization> {
        let pick = |key: &str, mnist: f32, cifar: &[f32]| -> Result<Vec<f32>> {
            if self.config.raw(key) == "auto" {
                return Ok(match channels {
                    1 => vec![mnist],
                    3 => cifar.to_vec(),
                    c => vec![if key == "norm.std" { 1.0 } else { 0.0 }; c],
                });
            }
            self.config.list(key)
        };
        let (m, c) = (Normalization::mnist(), Normalization::cifar10());
        let norm = Normalization {
            mean: pick("norm.mean", m.mean[0], &c.mean)?,
            std: pick("norm.std", m.std[0], &c.std)?,
        };
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization has {} means and {} stds for {channels}-channel data",
                norm.mean.len(),
                norm.std.len()
            )));
        }
        if norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("norm.std entries must be positive".into()));
        }
        Ok(norm)
    }

    /// Training and test sets, loaded once per pipeline.
    pub fn datasets(&mut self) -> Result<&(Dataset, Dataset)> {
        if self.data.is_none() {
            self.data = Some(self.load_data()?);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seed()?;
        let classes: usize = self.config.get("data.classes")?;
        let train_size: usize = self.config.get("data.train_size")?;
        let test_size: usize = self.config.get("data.test_size")?;
        let (train, test) = match self.config.raw("data.source") {
            "synth" => {
                if classes != crate::synth::CLASSES {
                    return Err(Error::Config(format!("synthetic digits have 10 classes, data.classes is {classes}")));
                }
                if train_size == 0 || test_size == 0 {
                    return Err(Error::Config("synthetic data needs nonzero data.train_size and data.test_size".into()));
                }
                let norm = self.normalization(1)?;
                let side = crate::synth::SIDE;
                let cfg = SynthConfig::default();
                let make = |n: usize, s: u64, split: Split| {
                    let (px, lb) = generate(n, s, &cfg);
                    Dataset::from_bytes(&px, [n, 1, side, side], lb.iter().map(|&l| l as usize).collect(), classes, &norm, split)
                };
                let base = seed.wrapping_mul(2);
                return Ok((make(train_size, base + 1, Split::Train)?, make(test_size, base + 2, Split::Test)?));
            }
            "idx" => {
                let dir = PathBuf::from(self.config.raw("data.dir"));
                if dir.as_os_str().is_empty() {
                    return Err(Error::Config("data.source = idx needs data.dir".into()));
                }
                let [tri, trl, tei, tel] = idx_paths(&dir);
                let norm = self.probe_norm(&tri)?;
                (load_idx(&tri, &trl, classes, &norm, Split::Train)?, load_idx(&tei, &tel, classes, &norm, Split::Test)?)
            }
            "cifar" => {
                let norm = self.normalization(3)?;
                let load = |key: &str, split: Split| -> Result<Dataset> {
                    let files: Vec<String> = self.config.list(key)?;
                    if files.is_empty() {
                        return Err(Error::Config(format!("data.source = cifar needs {key}")));
                    }
                    let sets = files
                        .iter()
                        .map(|f| load_cifar_binary(Path::new(f), classes, &norm, split))
                        .collect::<Result<Vec<_>>>()?;
                    Dataset::concat(&sets)
                };
                (load("data.cifar_train", Split::Train)?, load("data.cifar_test", Split::Test)?)
            }
            other => return Err(Error::Config(format!("data.source must be synth, idx or cifar, got `{other}`"))),
        };
        let cut = |d: Dataset, n: usize, s: u64| if n == 0 || n == d.len() { Ok(d) } else { d.subset(n, s) };
        Ok((cut(train, train_size, seed)?, cut(test, test_size, seed.wrapping_add(1))?))
    }

    fn probe_norm(&self, images: &Path) -> Result<Normalization> {
        let bytes = fs::read(images).map_err(io_err(images))?;
        let idx = crate::data::parse_idx(&bytes, crate::data::IDX_IMAGES_MAGIC, images)?;
        let channels = if idx.dims.len() == 4 { idx.dims[1] } else { 1 };
        self.normalization(channels)
    }

    fn fresh_victim(&mut self) -> Result<BranchGraph> {
        let (train, _) = self.datasets()?;
        let [c, h, w] = train.sample_shape();
        let classes = train.classes;
        let widths: Vec<usize> = self.config.list("model.widths")?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed()?);
        match (self.config.raw("model.arch"), widths.as_slice()) {
            ("tiny-cnn", &[a, b, d, e]) => tiny_cnn([c, h, w], classes, [a, b, d, e], &mut rng),
            ("tiny-resnet", &[a, b, d]) => tiny_resnet([c, h, w], classes, [a, b, d], &mut rng),
            (arch @ ("tiny-cnn" | "tiny-resnet"), ws) => Err(Error::Config(format!("{arch} does not take {} widths", ws.len()))),
            (arch, _) => Err(Error::Config(format!("model.arch must be tiny-cnn or tiny-resnet, got `{arch}`"))),
        }
    }

    fn load_victim(&self, consumer: Stage) -> Result<BranchGraph> {
        let path = self.path(VICTIM);
        self.require(consumer, Stage::TrainVictim, &path)?;
        Ok(read_victim(&path)?.0)
    }

    fn train_victim(&mut self) -> Result<StageOutput> {
        let mut graph = self.fresh_victim()?;
        let cfg = self.victim_train_config()?;
        let data = self.datasets()?.clone();
        let metrics = train_victim(&mut graph, &data.0, Some(&data.1), &cfg, |m| {
            log::info!("victim epoch {}: loss {:.4}", m.epoch, m.train_loss);
            Ok(())
        })?;
        let accuracy = accuracy_single(&graph, &data.1)?;
        let res = count_resources(&graph)?;
        let path = self.path(VICTIM);
        write_victim(&path, &graph, self.meta(Stage::TrainVictim).with("accuracy", accuracy))?;
        let summary = json!({
            "accuracy": accuracy,
            "train_samples": data.0.len(),
            "test_samples": data.1.len(),
            "param_count": res.param_count,
            "param_bytes": res.param_bytes,
            "macs": res.macs,
        });
        let files = vec![path, self.write_metrics(Stage::TrainVictim, &metrics)?, self.write_report(Stage::TrainVictim, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::TrainVictim,
            files,
            summary,
        })
    }

    fn init(&mut self) -> Result<StageOutput> {
        let victim = self.load_victim(Stage::Init)?;
        let options = InitOptions {
            merge_logits: self.config.get("model.merge_logits")?,
        };
        let model = init_twobranch(&victim, self.seed()?.wrapping_add(1), options)?;
        let path = self.path(INIT);
        write_two_branch(&path, &model, self.meta(Stage::Init))?;
        let summary = json!({
            "merge_points": model.merge_points.len(),
            "channels": model.channel_totals().1,
        });
        let files = vec![path, self.write_report(Stage::Init, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::Init,
            files,
            summary,
        })
    }

    fn transfer(&mut self) -> Result<StageOutput> {
        let path = self.path(INIT);
        self.require(Stage::Transfer, Stage::Init, &path)?;
        let (mut model, _) = read_two_branch(&path)?;
        let cfg = self.transfer_train_config()?;
        let (train, test) = self.datasets()?.clone();
        let eval = TransferEval {
            test: &test,
            branches: true,
        };
        let metrics = train_transfer(&mut model, &train, Some(&eval), &cfg, |m| {
            log::info!("transfer epoch {}: loss {:.4}", m.epoch, m.train_loss);
            Ok(())
        })?;
        let out = self.path(TRANSFER);
        write_two_branch(&out, &model, self.meta(Stage::Transfer))?;
        let bn = collect_bn_weights(&model)?;
        let composite = composite_weights(&bn.ree, &bn.tee)?;
        let last = metrics.last();
        let summary = json!({
            "accuracy": accuracy_two_branch(&model, &test)?,
            "ree_alone_accuracy": last.and_then(|m| m.acc_ree),
            "tee_alone_accuracy": last.and_then(|m| m.acc_tee),
            "median_abs_composite": median_abs(&composite),
            "median_abs_gamma_ree": median_abs(&bn.ree),
            "median_abs_gamma_tee": median_abs(&bn.tee),
        });
        let files = vec![out, self.write_metrics(Stage::Transfer, &metrics)?, self.write_report(Stage::Transfer, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::Transfer,
            files,
            summary,
        })
    }

    fn prune(&mut self) -> Result<StageOutput> {
        let path = self.path(TRANSFER);
        self.require(Stage::Prune, Stage::Transfer, &path)?;
        let victim = self.load_victim(Stage::Prune)?;
        let (model, _) = read_two_branch(&path)?;
        let cfg = self.prune_config()?;
        let (train, test) = self.datasets()?.clone();
        let victim_accuracy = accuracy_single(&victim, &test)?;
        let dir = self.path(CHECKPOINTS);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let meta = self.meta(Stage::Prune);
        let mut files = Vec::new();
        let outcome = iterative_prune(model, &train, &test, &cfg, victim_accuracy, |cp| {
            files.push(save_checkpoint(&dir, cp, meta.clone())?);
            Ok(())
        })?;
        let manifest = dir.join(MANIFEST);
        write_manifest(&manifest, &outcome.history)?;
        files.push(manifest);
        let iterations = outcome
            .history
            .iter()
            .map(|cp| {
                let r = report_for(&cp.model.ree, &cp.model.tee, &victim, 0)?;
                Ok(json!({
                    "iteration": cp.iteration,
                    "accuracy": cp.accuracy,
                    "ree_alone_accuracy": accuracy_single(&cp.model.ree, &test)?,
                    "tee_channels": cp.model.channel_totals().1,
                    "tee_param_bytes": r.tee_param_bytes,
                    "tee_macs": r.tee_macs,
                    "memory_reduction_ratio": r.memory_reduction_ratio,
                    "mac_reduction_ratio": r.mac_reduction_ratio,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = json!({
            "victim_accuracy": victim_accuracy,
            "status": outcome.status,
            "rejected": outcome.rejected,
            "iterations": iterations,
        });
        files.push(self.write_report(Stage::Prune, summary.clone())?);
        Ok(StageOutput {
            stage: Stage::Prune,
            files,
            summary,
        })
    }

    fn finalize(&mut self) -> Result<StageOutput> {
        let manifest = self.path(CHECKPOINTS).join(MANIFEST);
        if !manifest.exists() {
            return Err(Error::Stage(format!(
                "`finalize` needs {} from the `prune` stage; run `tbnet prune` first",
                manifest.display()
            )));
        }
        let history = load_history(&manifest)?;
        for cp in &history {
            let file = self.path(CHECKPOINTS).join(crate::prune::checkpoint_file_name(cp.iteration));
            self.require(Stage::Finalize, Stage::Prune, &file)?;
        }
        let fin = rollback_mr(&history)?;
        let mut model = fin.model;
        let (train, test) = self.datasets()?.clone();
        let before = accuracy_two_branch(&model, &test)?;
        let cfg = self.finetune_config()?;
        let metrics = if cfg.epochs > 0 { posthoc_finetune(&mut model, &train, &cfg)? } else { Vec::new() };
        let accuracy = accuracy_two_branch(&model, &test)?;
        let (ree, tee) = (self.path(REE_FILE), self.path(TEE_FILE));
        export_split(&model, &ree, &tee, self.meta(Stage::Finalize).with("iteration", fin.iteration))?;
        let (rc, tc) = model.channel_totals();
        let summary = json!({
            "iteration": fin.iteration,
            "accuracy_before_finetune": before,
            "accuracy": accuracy,
            "ree_channels": rc,
            "tee_channels": tc,
            "kept": fin.mask.popcount(),
            "mask_len": fin.mask.len(),
        });
        let files = vec![ree, tee, self.write_metrics(Stage::Finalize, &metrics)?, self.write_report(Stage::Finalize, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::Finalize,
            files,
            summary,
        })
    }

    fn split_files(&self, consumer: Stage) -> Result<(PathBuf, PathBuf)> {
        let (ree, tee) = (self.path(REE_FILE), self.path(TEE_FILE));
        self.require(consumer, Stage::Finalize, &ree)?;
        self.require(consumer, Stage::Finalize, &tee)?;
        Ok((ree, tee))
    }

    fn export(&mut self) -> Result<StageOutput> {
        let (ree, tee) = self.split_files(Stage::Export)?;
        let dest = self.workdir.join(self.config.raw("export.dir"));
        fs::create_dir_all(&dest).map_err(io_err(&dest))?;
        let mut files = Vec::new();
        let mut digests = BTreeMap::new();
        for src in [&ree, &tee] {
            let name = src.file_name().expect("file name");
            let dst = dest.join(name);
            let bytes = fs::read(src).map_err(io_err(src))?;
            fs::write(&dst, &bytes).map_err(io_err(&dst))?;
            if fs::read(&dst).map_err(io_err(&dst))? != bytes {
                return Err(Error::Io {
                    path: dst,
                    source: std::io::Error::other("copy differs from source"),
                });
            }
            digests.insert(name.to_string_lossy().into_owned(), hex::encode(Sha256::digest(&bytes)));
            files.push(dst);
        }
        import(&files[0], &files[1])?;
        let summary = json!({ "files": digests });
        files.push(self.write_report(Stage::Export, summary.clone())?);
        Ok(StageOutput {
            stage: Stage::Export,
            files,
            summary,
        })
    }

    fn simulate(&mut self) -> Result<StageOutput> {
        let (ree, tee) = self.split_files(Stage::Simulate)?;
        let victim = self.path(VICTIM);
        self.require(Stage::Simulate, Stage::TrainVictim, &victim)?;
        let reference = import(&ree, &tee)?;
        let samples: usize = self.config.get("simulate.samples")?;
        let (_, test) = self.datasets()?.clone();
        let n = samples.min(test.len());
        let mut runtime = deploy(&ree, &tee)?;
        let (mut agree, mut correct) = (0usize, 0usize);
        for i in 0..n {
            let (x, y) = test.batch(&[i])?;
            let out = runtime.infer(&x)?;
            let mem = reference.forward(&x, Mode::Eval)?.logits;
            agree += usize::from(out.prediction.logits.data() == mem.data());
            correct += usize::from(out.prediction.classes[0] == y[0]);
        }
        let resources = crate::sim::resource_report(&runtime, &victim)?;
        let log = runtime.teardown();
        let verdict = audit_check(&log);
        let audit = self.path(AUDIT_FILE);
        log.write(&audit)?;
        let summary = json!({
            "samples": n,
            "bitwise_agreement": agree,
            "accuracy": if n > 0 { correct as f64 / n as f64 } else { 0.0 },
            "audit": verdict,
            "message_bytes": log.message_bytes(),
            "resources": resources,
        });
        let files = vec![audit, self.write_report(Stage::Simulate, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::Simulate,
            files,
            summary,
        })
    }

    fn attack(&mut self) -> Result<StageOutput> {
        let (ree, tee) = self.split_files(Stage::Attack)?;
        let fractions: Vec<f64> = self.config.list("attack.fractions")?;
        let cfg = self.attack_config()?;
        let (train, test) = self.datasets()?.clone();
        let direct = attack_direct_use(&ree, &test)?;
        let curve = attack_finetune(&ree, &fractions, &train, &test, &cfg)?;
        // the defender-side ablation has the whole model at hand
        let model = import(&ree, &tee)?;
        let tee_only = tee_only_retrain(&model, &train, &test, &cfg)?;
        let summary = json!({
            "direct_use": direct,
            "finetune": curve,
            "tee_only": tee_only,
        });
        let files = vec![self.write_report(Stage::Attack, summary.clone())?];
        Ok(StageOutput {
            stage: Stage::Attack,
            files,
            summary,
        })
    }

    fn report(&mut self) -> Result<StageOutput> {
        let victim = self.read_report(Stage::Report, Stage::TrainVictim)?;
        let transfer = self.read_report(Stage::Report, Stage::Transfer)?;
        let prune = self.read_report(Stage::Report, Stage::Prune)?;
        let finalize = self.read_report(Stage::Report, Stage::Finalize)?;
        let simulate = self.read_report(Stage::Report, Stage::Simulate)?;
        let attack = self.read_report(Stage::Report, Stage::Attack)?;
        let tbnet = &finalize["accuracy"];
        let gap = match (tbnet.as_f64(), attack["direct_use"].as_f64()) {
            (Some(t), Some(a)) => json!(t - a),
            _ => Value::Null,
        };
        let full = attack["finetune"]
            .as_array()
            .and_then(|c| c.iter().find(|p| p["fraction"].as_f64() == Some(1.0)))
            .map_or(Value::Null, |p| p["accuracy"].clone());
        let summary = json!({
            "victim_accuracy": victim["accuracy"],
            "tbnet_accuracy": tbnet,
            "direct_use_accuracy": attack["direct_use"],
            "accuracy_gap": gap,
            "finetune_full_data_accuracy": full,
            "finetune_curve": attack["finetune"],
            "tee_only_best_accuracy": attack["tee_only"]["best_accuracy"],
            "transfer_accuracy": transfer["accuracy"],
            "median_abs_composite": transfer["median_abs_composite"],
            "prune_status": prune["status"],
            "accepted_iterations": prune["iterations"].as_array().map_or(0, |v| v.len().saturating_sub(1)),
            "memory_reduction_ratio": simulate["resources"]["memory_reduction_ratio"],
            "mac_reduction_ratio": simulate["resources"]["mac_reduction_ratio"],
            "tee_param_bytes": simulate["resources"]["tee_param_bytes"],
            "victim_param_bytes": simulate["resources"]["baseline_tee_param_bytes"],
            "message_bytes_per_inference": simulate["resources"]["message_bytes_per_inference"],
            "audit_pass": simulate["audit"]["pass"],
            "split_bitwise_agreement": simulate["bitwise_agreement"],
        });
        let path = self.path(REPORT_FILE);
        write_json(&path, &summary)?;
        Ok(StageOutput {
            stage: Stage::Report,
            files: vec![path],
            summary,
        })
    }
}

/// Writes `n` synthetic digits as an MNIST-style IDX pair.
pub fn synth_digits(images: &Path, labels: &Path, n: usize, seed: u64) -> Result<()> {
    let (px, lb) = generate(n, seed, &SynthConfig::default());
    let side = crate::synth::SIDE;
    write_idx(images, labels, &px, [n, side, side], &lb)
}

/// Generates train and test IDX pairs under `dir` with the file names the
/// `idx` source expects.
pub fn synth_digits_dir(dir: &Path, train: usize, test: usize, seed: u64) -> Result<[PathBuf; 4]> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = idx_paths(dir);
    synth_digits(&paths[0], &paths[1], train, seed.wrapping_mul(2) + 1)?;
    synth_digits(&paths[2], &paths[3], test, seed.wrapping_mul(2) + 2)?;
    Ok(paths)
}

pub fn median_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
