//! Run configuration: a TOML file with one table per concern, unknown keys
//! rejected. Any key can be overridden from the command line with
//! `--set section.key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use lagrow::data::{load_text_corpus, make_synthetic_corpus_with_vocab, Corpus, SyntheticKind, SYNTHETIC_VOCAB};
use lagrow::growth::{divisors, DesignSpace, InitScheme};
use lagrow::nn::ModelConfig;
use lagrow::optim::AdamWConfig;
use lagrow::race::{RaceConfig, StackingSchedule, StageSpec};
use lagrow::train::DataConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model init seed, and the growth seed unless `race.growth_seed` is set.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub race: RaceSection,
    #[serde(default)]
    pub stack: StackSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_model() -> ModelConfig {
    ModelConfig { num_layers: 4, d_model: 64, n_heads: 4, d_ff: 128, vocab_size: 48, max_seq_len: 32 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    MarkovBigram,
    CopyTask,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Corpus length in tokens, synthetic sources only.
    pub size: usize,
    /// Token alphabet size, synthetic sources only.
    pub vocab: usize,
    /// Seeds both corpus generation and the batch schedule.
    pub seed: u64,
    /// Text file for `source = "text"`, relative to the config file.
    pub path: Option<PathBuf>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub val_batches: usize,
    pub val_batch_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = DataConfig::default();
        DataSection {
            source: DataSource::MarkovBigram,
            size: 200_000,
            vocab: SYNTHETIC_VOCAB,
            seed: 0,
            path: None,
            batch_size: g.batch_size,
            seq_len: g.seq_len,
            val_batches: g.val_batches,
            val_batch_size: g.val_batch_size,
        }
    }
}

impl DataSection {
    pub fn geometry(&self) -> DataConfig {
        DataConfig {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            val_batches: self.val_batches,
            val_batch_size: self.val_batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    /// Write `ckpt-<step>` every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 1000, checkpoint_every: 0, eval_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaceSection {
    /// Start indices; all feasible ones when absent.
    pub indices: Option<Vec<usize>>,
    /// Block sizes; all divisors of `grow` when absent.
    pub block_sizes: Option<Vec<usize>>,
    pub schemes: Vec<InitScheme>,
    pub grow: usize,
    pub k_race: u64,
    pub cadence: u64,
    pub growth_seed: Option<u64>,
    pub continue_budget: u64,
    /// Step (relative to the race start) whose losses count as final in the
    /// report's oracle block; the end of the race when absent.
    pub horizon: Option<u64>,
}

impl Default for RaceSection {
    fn default() -> Self {
        RaceSection {
            indices: None,
            block_sizes: None,
            schemes: vec![InitScheme::Duplicate, InitScheme::Random],
            grow: 2,
            k_race: 100,
            cadence: 10,
            growth_seed: None,
            continue_budget: 0,
            horizon: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackMode {
    Adaptive,
    Fixed,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackSection {
    pub mode: StackMode,
    /// Block size of the fixed post-stacking baseline.
    pub block: usize,
    pub k_race: u64,
    pub cadence: u64,
    pub stages: Vec<StageSpec>,
}

impl Default for StackSection {
    fn default() -> Self {
        let stage = |budget, grow| StageSpec {
            budget,
            grow,
            indices: None,
            block_sizes: None,
            schemes: vec![InitScheme::Duplicate],
        };
        StackSection {
            mode: StackMode::Adaptive,
            block: 1,
            k_race: 50,
            cadence: 10,
            stages: vec![stage(200, 0), stage(200, 1), stage(200, 1)],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Record wall-clock milliseconds; off by default so logs are
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: default_out_dir(),
            model: default_model(),
            optim: AdamWConfig::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            race: RaceSection::default(),
            stack: StackSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    /// Load `path` (or start from defaults), apply `key=value` overrides,
    /// resolve relative data paths against the config file's directory and
    /// validate. Keys the file leaves out keep their defaults.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = defaults_table();
        let mut base = PathBuf::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).at(p)?;
            let file: toml::Table = text.parse().map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
            base = p.parent().map(Path::to_path_buf).unwrap_or_default();
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg = from_table(table)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse config text without touching the filesystem.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = defaults_table();
        merge(&mut table, text.parse().map_err(|e: toml::de::Error| CliError::config(e.to_string()))?);
        let cfg = from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.data.geometry().validate()?;
        let d = &self.data;
        if d.seq_len > self.model.max_seq_len {
            return Err(CliError::config(format!(
                "data.seq_len {} exceeds model.max_seq_len {}",
                d.seq_len, self.model.max_seq_len
            )));
        }
        match (d.source, &d.path) {
            (DataSource::Text, None) => return Err(CliError::config("data.source = \"text\" needs data.path")),
            (DataSource::Text, Some(p)) if !p.is_file() => {
                return Err(CliError::config(format!("data.path {} is not a readable file", p.display())))
            }
            (DataSource::Text, Some(_)) => {}
            (_, Some(_)) => return Err(CliError::config("data.path is only used with data.source = \"text\"")),
            (_, None) if d.size < 1 => return Err(CliError::config("data.size must be >= 1")),
            (_, None) if d.vocab < 3 => return Err(CliError::config("data.vocab must be >= 3")),
            (_, None) if d.vocab > self.model.vocab_size => {
                return Err(CliError::config(format!(
                    "data.vocab {} exceeds model.vocab_size {}",
                    d.vocab, self.model.vocab_size
                )))
            }
            _ => {}
        }
        let positive = [
            ("train.eval_every", self.train.eval_every as usize),
            ("race.grow", self.race.grow),
            ("race.cadence", self.race.cadence as usize),
            ("stack.block", self.stack.block),
            ("stack.cadence", self.stack.cadence as usize),
        ];
        for (key, v) in positive {
            if v < 1 {
                return Err(CliError::config(format!("{key} must be >= 1, got {v}")));
            }
        }
        if self.race.schemes.is_empty() {
            return Err(CliError::config("race.schemes must name at least one of \"duplicate\", \"random\""));
        }
        if let Some(h) = self.race.horizon {
            if h > self.race.k_race {
                return Err(CliError::config(format!(
                    "race.horizon {h} must lie in [0, race.k_race = {}]",
                    self.race.k_race
                )));
            }
        }
        // TOML integers are signed 64-bit.
        for (key, v) in [("seed", self.seed), ("data.seed", d.seed), ("race.growth_seed", self.race.growth_seed.unwrap_or(0))] {
            if v > i64::MAX as u64 {
                return Err(CliError::config(format!("{key} must be <= {}, got {v}", i64::MAX)));
            }
        }
        self.schedule().validate()?;
        Ok(())
    }

    /// Short stable id for metrics records: the command plus a digest of the
    /// configuration. The output directory is left out so that identical
    /// runs in different places log identical bytes.
    pub fn run_id(&self, command: &str) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        Ok(format!("{command}-{hex}"))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let d = &self.data;
        let corpus = match d.source {
            DataSource::MarkovBigram => make_synthetic_corpus_with_vocab(SyntheticKind::MarkovBigram, d.size, d.seed, d.vocab)?,
            DataSource::CopyTask => make_synthetic_corpus_with_vocab(SyntheticKind::CopyTask, d.size, d.seed, d.vocab)?,
            DataSource::Text => load_text_corpus(d.path.as_deref().expect("validated"))?,
        };
        Ok(corpus)
    }

    pub fn growth_seed(&self) -> u64 {
        self.race.growth_seed.unwrap_or(self.seed)
    }

    pub fn race_config(&self, layers: usize) -> RaceConfig {
        let r = &self.race;
        RaceConfig {
            space: DesignSpace {
                indices: r.indices.clone().unwrap_or_else(|| (0..=layers.saturating_sub(r.grow)).collect()),
                block_sizes: r.block_sizes.clone().unwrap_or_else(|| divisors(r.grow)),
                schemes: r.schemes.clone(),
                grow: r.grow,
            },
            k_race: r.k_race,
            cadence: r.cadence,
            growth_seed: self.growth_seed(),
            continue_budget: r.continue_budget,
        }
    }

    pub fn schedule(&self) -> StackingSchedule {
        StackingSchedule {
            model: self.model.clone(),
            stages: self.stack.stages.clone(),
            k_race: self.stack.k_race,
            cadence: self.stack.cadence,
        }
    }
}

fn defaults_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize")
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))
}

/// Overlay `top` on `base`: tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply one `dotted.key=value` override. The value is read as a TOML value
/// when it parses as one and as a bare string otherwise. Numeric path
/// segments index into arrays (`stack.stages.1.budget=300`).
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} has an empty segment")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for part in path {
        let next = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = descend(next, part, key)?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn descend<'t>(v: &'t mut toml::Value, part: &str, key: &str) -> Result<&'t mut toml::Table> {
    match v {
        toml::Value::Table(t) => Ok(t),
        toml::Value::Array(_) => Err(CliError::config(format!(
            "override {key:?}: {part:?} is an array, index it with a number (e.g. {part}.0)"
        ))),
        _ => Err(CliError::config(format!("override {key:?}: {part:?} is not a table"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("[model]\nnum_layers = 6\n").unwrap();
        assert_eq!(c.model.num_layers, 6);
        assert_eq!(c.model.d_model, RunConfig::default().model.d_model);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nstepz = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "race.indices=[0, 1]".into(),
                "race.schemes=[\"duplicate\"]".into(),
                "data.source=copy-task".into(),
                "optim.peak_lr=0.002".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.race.indices, Some(vec![0, 1]));
        assert_eq!(c.race.schemes, vec![InitScheme::Duplicate]);
        assert_eq!(c.data.source, DataSource::CopyTask);
        assert_eq!(c.optim.peak_lr, 0.002);
    }

    #[test]
    fn bad_values_name_the_key_and_range() {
        let err = RunConfig::load(None, &["race.cadence=0".into()]).unwrap_err();
        assert!(err.to_string().contains("race.cadence must be >= 1"), "{err}");
        let err = RunConfig::load(None, &["race.k_race=10".into(), "race.horizon=20".into()]).unwrap_err();
        assert!(err.to_string().contains("[0, race.k_race = 10]"), "{err}");
        let err = RunConfig::load(None, &["data.seq_len=64".into()]).unwrap_err();
        assert!(err.to_string().contains("max_seq_len"), "{err}");
        let err = RunConfig::load(None, &["data.vocab=64".into()]).unwrap_err();
        assert!(err.to_string().contains("model.vocab_size"), "{err}");
    }

    #[test]
    fn synthetic_vocab_is_configurable() {
        let c = RunConfig::load(None, &["data.vocab=100".into(), "model.vocab_size=100".into(), "data.size=5000".into()]).unwrap();
        assert_eq!(c.corpus().unwrap().vocab_size(), 100);
    }

    #[test]
    fn text_source_needs_an_existing_file() {
        let err = RunConfig::load(None, &["data.source=text".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::load(None, &["data.source=text".into(), "data.path=/no/such/file".into()]).unwrap_err();
        assert!(err.to_string().contains("/no/such/file"));
    }

    #[test]
    fn race_space_defaults_to_full_space() {
        let c = RunConfig::default();
        let rc = c.race_config(4);
        assert_eq!(rc.space.indices, vec![0, 1, 2]);
        assert_eq!(rc.space.block_sizes, vec![1, 2]);
        assert_eq!(rc.growth_seed, 0);
    }
}
