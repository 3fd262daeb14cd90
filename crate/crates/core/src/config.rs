//! Run configuration (TOML), its hash, and the bookkeeping that stamps
//! every artifact and turns reruns into no-ops.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::bench::SubtleBias;
use crate::corpus::LengthDist;
use crate::corpus::CorpusFormat;
use crate::error::{Error, Result};
use crate::eval::{EvalMode, LengthBuckets};
use crate::mixture::GenerateOptions;
use crate::model::{BowHyper, ShallowHyper, TransformerConfig};
use crate::train::TrainHyper;
use crate::transforms::ChatClientConfig;

/// Bumped on incompatible changes to the file layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    pub label: u16,
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    Separable,
    SubtleBias,
}

/// What `synth` writes: domain `i` goes to the paths of dataset `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub benchmark: BenchmarkKind,
    pub n_train: usize,
    pub n_test: usize,
    pub words_per_domain: usize,
    pub length: LengthDist,
    pub subtle: SubtleBias,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            benchmark: BenchmarkKind::SubtleBias,
            n_train: 2000,
            n_test: 500,
            words_per_domain: 40,
            length: LengthDist::Uniform { min: 10, max: 60 },
            subtle: SubtleBias::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub max_words: usize,
    pub min_count: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            max_words: 4000,
            min_count: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Transformer,
    Bow,
    Shallow,
}

/// Model preset plus optional overrides. `vocab_size` always follows the
/// tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub hidden_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub context_length: Option<usize>,
    pub classifier: ClassifierKind,
    /// Start classification from the pretrained language model.
    pub finetune: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            hidden_dim: None,
            n_heads: None,
            n_layers: None,
            context_length: None,
            classifier: ClassifierKind::Transformer,
            finetune: false,
        }
    }
}

impl ModelSection {
    pub fn transformer_config(&self, vocab_size: usize, n_classes: usize) -> Result<TransformerConfig> {
        let base = TransformerConfig::preset(&self.preset)?;
        let cfg = TransformerConfig {
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            context_length: self.context_length.unwrap_or(base.context_length),
            vocab_size,
            n_classes,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSection {
    pub rows_per_shard: usize,
}

impl Default for PackSection {
    fn default() -> Self {
        PackSection { rows_per_shard: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Extra language-model corpora; the training splits of all datasets
    /// are always included.
    pub extra: Vec<PathBuf>,
    pub format: CorpusFormat,
    pub hyper: TrainHyper,
    /// Token budget as a multiple of the parameter count, e.g. 20. Unset
    /// means one pass over the packed rows (or `hyper.epochs`).
    pub tokens_per_param: Option<f64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            extra: Vec::new(),
            format: CorpusFormat::default(),
            tokens_per_param: None,
            hyper: TrainHyper {
                lr: 3e-3,
                warmup_steps: 20,
                ..TrainHyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub modes: Vec<EvalMode>,
    pub buckets: LengthBuckets,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            modes: vec![EvalMode::WholeSeq],
            buckets: LengthBuckets {
                bucket_width: 32,
                max_len: 256,
                per_bucket: 300,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSection {
    pub client: ChatClientConfig,
    pub parallelism: usize,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection {
            client: ChatClientConfig::default(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Training-token budgets, strictly increasing.
    pub token_budgets: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            token_budgets: vec![500_000, 1_000_000, 2_000_000, 4_000_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pack: PackSection,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub bow: BowHyper,
    #[serde(default)]
    pub shallow: ShallowHyper,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub generate: GenerateOptions,
    #[serde(default)]
    pub grid: GridSection,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// A small three-domain synthetic experiment under `output_dir`.
    pub fn tiny(output_dir: impl Into<PathBuf>) -> Self {
        let output_dir = output_dir.into();
        let datasets = (0..3)
            .map(|i| DatasetSource {
                name: format!("domain{i}"),
                label: i,
                train: output_dir.join(format!("data/domain{i}.train.jsonl")),
                test: Some(output_dir.join(format!("data/domain{i}.test.jsonl"))),
                format: CorpusFormat::default(),
            })
            .collect();
        RunConfig {
            version: SCHEMA_VERSION,
            experiment: "tiny".into(),
            seed: 0,
            output_dir,
            deterministic: true,
            datasets,
            synth: Some(SynthSection::default()),
            tokenizer: TokenizerSection::default(),
            model: ModelSection {
                hidden_dim: Some(64),
                n_layers: Some(2),
                context_length: Some(128),
                ..ModelSection::default()
            },
            pack: PackSection::default(),
            train: TrainHyper {
                lr: 3e-3,
                warmup_steps: 20,
                ..TrainHyper::default()
            },
            bow: BowHyper::default(),
            shallow: ShallowHyper::default(),
            pretrain: PretrainSection::default(),
            eval: EvalSection::default(),
            transform: TransformSection::default(),
            generate: GenerateOptions {
                n: 256,
                max_len: 64,
                ..GenerateOptions::default()
            },
            grid: GridSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in &mut self.datasets {
            fix(&mut d.train);
            if let Some(t) = &mut d.test {
                fix(t);
            }
        }
        for p in &mut self.pretrain.extra {
            fix(p);
        }
        if let Some(c) = &mut self.transform.client.cache_dir {
            fix(c);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if self.datasets.len() < 2 {
            return Err(Error::Config("at least two datasets are needed".into()));
        }
        let mut labels: Vec<u16> = self.datasets.iter().map(|d| d.label).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dataset labels must be distinct".into()));
        }
        if labels.iter().enumerate().any(|(i, &l)| l as usize != i) {
            return Err(Error::Config("dataset labels must be 0..k".into()));
        }
        TransformerConfig::preset(&self.model.preset)?;
        self.train.validate()?;
        self.pretrain.hyper.validate()?;
        if self.pretrain.tokens_per_param.is_some_and(|k| !(k > 0.0)) {
            return Err(Error::Config("pretrain.tokens_per_param must be positive".into()));
        }
        if self.pack.rows_per_shard == 0 {
            return Err(Error::Config("rows_per_shard must be positive".into()));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("no eval modes".into()));
        }
        if self.grid.token_budgets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("grid token budgets must be strictly increasing".into()));
        }
        self.transform.client.validate()?;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.datasets.len()
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is left
    /// out, and paths inside it are taken relative to it, so a moved run
    /// keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        let rel = |p: &mut PathBuf| {
            if let Ok(r) = p.strip_prefix(&self.output_dir) {
                *p = r.to_path_buf();
            }
        };
        for d in &mut c.datasets {
            rel(&mut d.train);
            if let Some(t) = d.test.as_mut() {
                rel(t);
            }
        }
        c.pretrain.extra.iter_mut().for_each(rel);
        let mut v = serde_json::to_value(&c).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }

    /// Metadata block stamped into reports and checkpoints.
    pub fn metadata(&self, stage: &str) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "experiment": self.experiment,
            "stage": stage,
            "schema_version": SCHEMA_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config_hash: String,
    seed: u64,
    outputs: Vec<PathBuf>,
}

fn stamp_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.path(&format!("stamps/{stage}.json"))
}

/// True when `stage` already ran with this config and its outputs exist.
pub fn is_up_to_date(cfg: &RunConfig, stage: &str) -> bool {
    let Ok(data) = std::fs::read(stamp_path(cfg, stage)) else {
        return false;
    };
    let Ok(s) = serde_json::from_slice::<Stamp>(&data) else {
        return false;
    };
    s.config_hash == cfg.hash() && s.seed == cfg.seed && s.outputs.iter().all(|p| p.exists())
}

pub fn write_stamp(cfg: &RunConfig, stage: &str, outputs: &[PathBuf]) -> Result<()> {
    let path = stamp_path(cfg, stage);
    ensure_parent(&path)?;
    let s = Stamp {
        stage: stage.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        outputs: outputs.to_vec(),
    };
    std::fs::write(&path, serde_json::to_vec_pretty(&s)?).map_err(|e| Error::io(&path, e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Write a report twice: one structured record at `<stem>.jsonl` and the
/// human table at `<stem>.txt`. Both carry the metadata block.
pub fn write_report<T: Serialize>(cfg: &RunConfig, stage: &str, stem: &Path, report: &T, table: &str) -> Result<Vec<PathBuf>> {
    let json_path = stem.with_extension("jsonl");
    let txt_path = stem.with_extension("txt");
    ensure_parent(&json_path)?;
    let doc = serde_json::json!({ "metadata": cfg.metadata(stage), "report": report });
    std::fs::write(&json_path, format!("{doc}\n")).map_err(|e| Error::io(&json_path, e))?;
    let meta = cfg.metadata(stage);
    let txt = format!(
        "# {} stage={} config={} seed={}\n{table}",
        cfg.experiment, stage, meta["config_hash"].as_str().unwrap_or_default(), cfg.seed
    );
    std::fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_path, e))?;
    Ok(vec![json_path, txt_path])
}
