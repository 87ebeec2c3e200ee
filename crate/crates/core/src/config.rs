//! Flat key-value experiment configuration.
//!
//! The on-disk format is a plain text document of `key = value` lines with
//! dotted section prefixes (`stream.batch_size = 8`), `#` comments, and
//! blank lines. Parsing is strict in both directions: unknown keys are hard
//! errors (a silently ignored hyperparameter typo would invalidate a
//! comparison), and keys that have no effect under the chosen mode or
//! strategy are rejected too.
//!
//! Grid documents add `sweep.<key> = a|b|c` lines; the grid expands to the
//! cartesian product of all sweeps applied to the base document. Sweep
//! values are separated by `|` (falling back to `,` when no `|` is
//! present), so a swept value may itself be a comma-separated list.
//!
//! [`preset`] returns ready-made documents for the standard experiments.

use std::collections::BTreeMap;

use crate::domains::domain_preset;
use crate::error::{Error, Result};
use crate::labelspace::builtin_map;
use crate::model::{ModelConfig, Precision};
use crate::strategies::{
    ACCEPTED_SIM_RATIOS, DEFAULT_ESTIMATE_WINDOW, DEFAULT_EWC_LAMBDA, DEFAULT_LWF_LAMBDA,
    DEFAULT_LWF_TEMPERATURE, DEFAULT_MAS_LAMBDA, DEFAULT_REPLAY_CAPACITY, DEFAULT_SIM_RATIO,
};
use crate::stream::{budget_normalized_pair, StreamConfig, StreamMode};

/// A parsed flat document: entries in file order, duplicate keys rejected.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<(String, String)>,
}

impl RawConfig {
    /// Parse `key = value` lines. `#` starts a comment line; blank lines are
    /// skipped; the first `=` splits key from value.
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("config line {}: empty key", idx + 1)));
            }
            if !key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '.' || c == '_')
            {
                return Err(Error::config(format!(
                    "config line {}: key {key:?} may only use lowercase letters, digits, `.` and `_`",
                    idx + 1
                )));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::config(format!(
                    "config line {}: key {key:?} set twice",
                    idx + 1
                )));
            }
            entries.push((key, value));
        }
        Ok(RawConfig { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// A copy with `key` set to `value` (replacing any existing entry).
    fn with(&self, key: &str, value: &str) -> RawConfig {
        let mut out = self.clone();
        match out.entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => out.entries.push((key.to_string(), value.to_string())),
        }
        out
    }

    /// Render back to document text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Apply `(key, value)` overrides to a document — replacing existing entries
/// or appending new ones — and return the updated text. Key validity is
/// enforced when the result is parsed.
pub fn apply_overrides(text: &str, overrides: &[(String, String)]) -> Result<String> {
    let mut raw = RawConfig::parse(text)?;
    for (k, v) in overrides {
        raw = raw.with(k, v);
    }
    Ok(raw.render())
}

/// Tracks which keys a consumer read so leftovers can be rejected.
struct Reader<'a> {
    cfg: &'a RawConfig,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn new(cfg: &'a RawConfig) -> Reader<'a> {
        Reader {
            cfg,
            used: Vec::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        let found = self
            .cfg
            .entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(k, v)| (k.as_str(), v.as_str()));
        if let Some((k, v)) = found {
            if !self.used.contains(&k) {
                self.used.push(k);
            }
            Some(v)
        } else {
            None
        }
    }

    fn str_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or(default).to_string()
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::config(format!("key {key:?}: {v:?} is not a number"))),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| Error::config(format!("key {key:?}: {v:?} is not a whole number"))),
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::config(format!("key {key:?}: {v:?} is not a whole number"))),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::config(format!(
                "key {key:?}: expected true or false, got {v:?}"
            ))),
        }
    }

    /// Reject a key that would have no effect in the current setup.
    fn forbid(&mut self, key: &str, why: &str) -> Result<()> {
        if self.take(key).is_some() {
            return Err(Error::config(format!("key {key:?} {why}")));
        }
        Ok(())
    }

    /// Error on any key never consumed — the typo guard.
    fn finish(self) -> Result<()> {
        for (k, _) in &self.cfg.entries {
            if !self.used.contains(&k.as_str()) {
                return Err(Error::config(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

/// What a run does: learn from the stream under the protocol, or train
/// offline on everything at once (the upper-bound reference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Stream,
    Offline,
}

/// The chosen strategy with its resolved hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyChoice {
    Nt,
    Ewc { lambda: f64, window: usize },
    Mas { lambda: f64, window: usize },
    Lwf { lambda: f64, temperature: f64 },
    Er { capacity: usize },
}

impl StrategyChoice {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyChoice::Nt => "nt",
            StrategyChoice::Ewc { .. } => "ewc",
            StrategyChoice::Mas { .. } => "mas",
            StrategyChoice::Lwf { .. } => "lwf",
            StrategyChoice::Er { .. } => "er",
        }
    }
}

/// In-stream simulator mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMixConfig {
    pub domain: String,
    pub ratio: f64,
}

/// Simulator pretraining before the stream starts.
#[derive(Clone, Debug, PartialEq)]
pub struct SimPretrainConfig {
    pub domain: String,
    /// Pretraining pool size; 0 means "match the stream's total training
    /// size".
    pub total: usize,
    pub epochs: usize,
}

impl SimPretrainConfig {
    pub fn effective_total(&self, stream: &StreamConfig) -> usize {
        if self.total == 0 {
            stream.domains.len() * stream.train_per_domain
        } else {
            self.total
        }
    }
}

/// A fully resolved experiment: every knob explicit, every default applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: RunMode,
    pub strategy: StrategyChoice,
    pub sim_mix: Option<SimMixConfig>,
    pub sim_pretrain: Option<SimPretrainConfig>,
    /// When set, the run additionally reports the plain-training budget that
    /// spends the same compute as this mixing run (`N · (1 + ρ)`).
    pub budget_normalized: bool,
    pub stream: StreamConfig,
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub precision: Precision,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Epochs of the offline upper-bound trainer (offline mode only).
    pub offline_epochs: usize,
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let raw = RawConfig::parse(text)?;
        for (k, _) in raw.entries() {
            if k.starts_with("sweep.") {
                return Err(Error::config(format!(
                    "key {k:?}: sweeps belong in a grid document"
                )));
            }
        }
        ExperimentConfig::from_raw(&raw)
    }

    fn from_raw(raw: &RawConfig) -> Result<ExperimentConfig> {
        let mut r = Reader::new(raw);

        let name = r.str_or("name", "run");
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_graphic() && c != '/') {
            return Err(Error::config(format!(
                "name {name:?} must be non-empty printable text without `/`"
            )));
        }

        let mode = match r.str_or("mode", "stream").as_str() {
            "stream" => RunMode::Stream,
            "offline" => RunMode::Offline,
            other => {
                return Err(Error::config(format!(
                    "mode {other:?}: expected stream or offline"
                )))
            }
        };

        // Stream shape (both modes use it: offline trains on the same
        // splits and evaluates on the same test sets).
        let domain_names = split_list(&r.str_or("stream.domains", "metro,delta,coastal,alpine"));
        let mut domains = Vec::with_capacity(domain_names.len());
        for n in &domain_names {
            let spec = domain_preset(n).ok_or_else(|| {
                Error::config(format!(
                    "unknown domain {n:?}; presets: metro, delta, coastal, alpine, sima, simb"
                ))
            })?;
            domains.push(spec);
        }
        let stream = StreamConfig {
            domains,
            train_per_domain: r.usize_or("stream.train_per_domain", 1700)?,
            test_per_domain: r.usize_or("stream.test_per_domain", 300)?,
            batch_size: r.usize_or("stream.batch_size", 8)?,
            budget: r.usize_or("stream.budget", 4)?,
            mode: match r.str_or("stream.mode", "sequential").as_str() {
                "sequential" => StreamMode::Sequential,
                "mixed" => StreamMode::Mixed,
                other => {
                    return Err(Error::config(format!(
                        "stream.mode {other:?}: expected sequential or mixed"
                    )))
                }
            },
        };
        stream.validate()?;

        // Strategy and simulator knobs are meaningless offline; reject them
        // rather than silently ignoring them.
        let (strategy, sim_mix, sim_pretrain, budget_normalized, offline_epochs) = match mode {
            RunMode::Offline => {
                for key in [
                    "strategy",
                    "strategy.lambda",
                    "strategy.window",
                    "strategy.temperature",
                    "strategy.capacity",
                    "sim.mix",
                    "sim.ratio",
                    "sim.pretrain",
                    "sim.pretrain_total",
                    "sim.pretrain_epochs",
                    "budget_normalized",
                ] {
                    r.forbid(key, "has no effect in offline mode")?;
                }
                let epochs = r.usize_or("offline.epochs", 4)?;
                if epochs == 0 {
                    return Err(Error::config("offline.epochs must be positive"));
                }
                (StrategyChoice::Nt, None, None, false, epochs)
            }
            RunMode::Stream => {
                r.forbid("offline.epochs", "has no effect in stream mode")?;
                let strategy = match r.str_or("strategy", "nt").as_str() {
                    "nt" => {
                        for key in [
                            "strategy.lambda",
                            "strategy.window",
                            "strategy.temperature",
                            "strategy.capacity",
                        ] {
                            r.forbid(key, "has no effect for strategy nt")?;
                        }
                        StrategyChoice::Nt
                    }
                    "ewc" => {
                        r.forbid("strategy.temperature", "has no effect for strategy ewc")?;
                        r.forbid("strategy.capacity", "has no effect for strategy ewc")?;
                        StrategyChoice::Ewc {
                            lambda: r.f64_or("strategy.lambda", DEFAULT_EWC_LAMBDA)?,
                            window: r.usize_or("strategy.window", DEFAULT_ESTIMATE_WINDOW)?,
                        }
                    }
                    "mas" => {
                        r.forbid("strategy.temperature", "has no effect for strategy mas")?;
                        r.forbid("strategy.capacity", "has no effect for strategy mas")?;
                        StrategyChoice::Mas {
                            lambda: r.f64_or("strategy.lambda", DEFAULT_MAS_LAMBDA)?,
                            window: r.usize_or("strategy.window", DEFAULT_ESTIMATE_WINDOW)?,
                        }
                    }
                    "lwf" => {
                        r.forbid("strategy.window", "has no effect for strategy lwf")?;
                        r.forbid("strategy.capacity", "has no effect for strategy lwf")?;
                        StrategyChoice::Lwf {
                            lambda: r.f64_or("strategy.lambda", DEFAULT_LWF_LAMBDA)?,
                            temperature: r
                                .f64_or("strategy.temperature", DEFAULT_LWF_TEMPERATURE)?,
                        }
                    }
                    "er" => {
                        r.forbid("strategy.lambda", "has no effect for strategy er")?;
                        r.forbid("strategy.window", "has no effect for strategy er")?;
                        r.forbid("strategy.temperature", "has no effect for strategy er")?;
                        StrategyChoice::Er {
                            capacity: r.usize_or("strategy.capacity", DEFAULT_REPLAY_CAPACITY)?,
                        }
                    }
                    other => {
                        return Err(Error::config(format!(
                            "strategy {other:?}: expected nt, ewc, mas, lwf, or er"
                        )))
                    }
                };

                let sim_mix = match r.str_or("sim.mix", "none").as_str() {
                    "none" => {
                        r.forbid("sim.ratio", "has no effect without sim.mix")?;
                        None
                    }
                    domain => {
                        let ratio = r.f64_or("sim.ratio", DEFAULT_SIM_RATIO)?;
                        Some(SimMixConfig {
                            domain: validate_sim_domain(domain)?,
                            ratio,
                        })
                    }
                };
                let sim_pretrain = match r.str_or("sim.pretrain", "none").as_str() {
                    "none" => {
                        r.forbid("sim.pretrain_total", "has no effect without sim.pretrain")?;
                        r.forbid("sim.pretrain_epochs", "has no effect without sim.pretrain")?;
                        None
                    }
                    domain => {
                        let epochs = r.usize_or("sim.pretrain_epochs", 2)?;
                        if epochs == 0 {
                            return Err(Error::config("sim.pretrain_epochs must be positive"));
                        }
                        Some(SimPretrainConfig {
                            domain: validate_sim_domain(domain)?,
                            total: r.usize_or("sim.pretrain_total", 0)?,
                            epochs,
                        })
                    }
                };
                let budget_normalized = r.bool_or("budget_normalized", false)?;
                if budget_normalized && sim_mix.is_none() {
                    return Err(Error::config(
                        "budget_normalized pairs a mixing run with a plain baseline; set sim.mix",
                    ));
                }
                (strategy, sim_mix, sim_pretrain, budget_normalized, 0)
            }
        };

        if let Some(mix) = &sim_mix {
            if !ACCEPTED_SIM_RATIOS.contains(&mix.ratio) {
                return Err(Error::config(format!(
                    "sim.ratio {} not in the accepted set {ACCEPTED_SIM_RATIOS:?}",
                    mix.ratio
                )));
            }
        }
        for sim_domain in sim_mix
            .iter()
            .map(|m| &m.domain)
            .chain(sim_pretrain.iter().map(|p| &p.domain))
        {
            let map = builtin_map(sim_domain).ok_or_else(|| {
                Error::config(format!(
                    "simulator {sim_domain:?} has no built-in label map"
                ))
            })?;
            if map.target_space() != stream.domains[0].label_space.name() {
                return Err(Error::config(format!(
                    "simulator {sim_domain:?} maps into {:?} but the stream labels in {:?}",
                    map.target_space(),
                    stream.domains[0].label_space.name()
                )));
            }
        }

        let hidden_channels = r.usize_or("model.hidden_channels", 16)?;
        let num_layers = r.usize_or("model.num_layers", 3)?;
        let kernel_size = r.usize_or("model.kernel_size", 3)?;
        let precision = match r.str_or("model.precision", "double").as_str() {
            "double" => Precision::Double,
            "single" => Precision::Single,
            other => {
                return Err(Error::config(format!(
                    "model.precision {other:?}: expected double or single"
                )))
            }
        };

        let lr = r.f64_or("train.lr", 0.05)?;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("train.lr {lr} must be positive")));
        }
        let seeds = match r.take("train.seed_list") {
            Some(list) => {
                let parts = split_list(list);
                let mut seeds = Vec::with_capacity(parts.len());
                for p in parts {
                    seeds.push(p.parse::<u64>().map_err(|_| {
                        Error::config(format!("train.seed_list entry {p:?} is not a seed"))
                    })?);
                }
                r.forbid("train.seeds", "has no effect when train.seed_list is given")?;
                r.forbid(
                    "train.base_seed",
                    "has no effect when train.seed_list is given",
                )?;
                seeds
            }
            None => {
                let count = r.usize_or("train.seeds", 5)?;
                let base = r.u64_or("train.base_seed", 0)?;
                (0..count as u64).map(|i| base + i).collect()
            }
        };
        if seeds.is_empty() {
            return Err(Error::config("at least one training seed is required"));
        }
        {
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(Error::config("training seeds must be distinct"));
            }
        }

        r.finish()?;

        let cfg = ExperimentConfig {
            name,
            mode,
            strategy,
            sim_mix,
            sim_pretrain,
            budget_normalized,
            stream,
            hidden_channels,
            num_layers,
            kernel_size,
            precision,
            lr,
            seeds,
            offline_epochs,
        };
        // Surface model-shape errors at config time.
        cfg.model_config(0).validate()?;
        cfg.baseline_budget()?;
        Ok(cfg)
    }

    /// Classes of the stream's shared label space.
    pub fn num_classes(&self) -> usize {
        self.stream.domains[0].label_space.num_classes()
    }

    /// The model this experiment trains, seeded for one replicate.
    pub fn model_config(&self, init_seed: u64) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            hidden_channels: self.hidden_channels,
            num_layers: self.num_layers,
            num_classes: self.num_classes(),
            kernel_size: self.kernel_size,
            init_seed,
            precision: self.precision,
        }
    }

    /// The plain-training budget that matches this mixing run's compute,
    /// when budget normalization is requested.
    pub fn baseline_budget(&self) -> Result<Option<usize>> {
        if !self.budget_normalized {
            return Ok(None);
        }
        let mix = self.sim_mix.as_ref().expect("checked at parse time");
        let (_, baseline) = budget_normalized_pair(self.stream.budget, mix.ratio)?;
        Ok(Some(baseline))
    }

    /// The effective configuration as canonical `key = value` text: every
    /// applicable key explicit, sorted, parseable back into an equal config.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("name", self.name.clone());
        put(
            "mode",
            match self.mode {
                RunMode::Stream => "stream",
                RunMode::Offline => "offline",
            }
            .to_string(),
        );
        put(
            "stream.domains",
            self.stream
                .domains
                .iter()
                .map(|d| d.name.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "stream.train_per_domain",
            self.stream.train_per_domain.to_string(),
        );
        put(
            "stream.test_per_domain",
            self.stream.test_per_domain.to_string(),
        );
        put("stream.batch_size", self.stream.batch_size.to_string());
        put("stream.budget", self.stream.budget.to_string());
        put(
            "stream.mode",
            match self.stream.mode {
                StreamMode::Sequential => "sequential",
                StreamMode::Mixed => "mixed",
            }
            .to_string(),
        );
        match self.mode {
            RunMode::Offline => {
                put("offline.epochs", self.offline_epochs.to_string());
            }
            RunMode::Stream => {
                put("strategy", self.strategy.label().to_string());
                match &self.strategy {
                    StrategyChoice::Nt => {}
                    StrategyChoice::Ewc { lambda, window }
                    | StrategyChoice::Mas { lambda, window } => {
                        put("strategy.lambda", lambda.to_string());
                        put("strategy.window", window.to_string());
                    }
                    StrategyChoice::Lwf {
                        lambda,
                        temperature,
                    } => {
                        put("strategy.lambda", lambda.to_string());
                        put("strategy.temperature", temperature.to_string());
                    }
                    StrategyChoice::Er { capacity } => {
                        put("strategy.capacity", capacity.to_string());
                    }
                }
                if let Some(mix) = &self.sim_mix {
                    put("sim.mix", mix.domain.clone());
                    put("sim.ratio", mix.ratio.to_string());
                    put("budget_normalized", self.budget_normalized.to_string());
                }
                if let Some(p) = &self.sim_pretrain {
                    put("sim.pretrain", p.domain.clone());
                    put("sim.pretrain_total", p.total.to_string());
                    put("sim.pretrain_epochs", p.epochs.to_string());
                }
            }
        }
        put("model.hidden_channels", self.hidden_channels.to_string());
        put("model.num_layers", self.num_layers.to_string());
        put("model.kernel_size", self.kernel_size.to_string());
        put(
            "model.precision",
            match self.precision {
                Precision::Double => "double",
                Precision::Single => "single",
            }
            .to_string(),
        );
        put("train.lr", self.lr.to_string());
        put(
            "train.seed_list",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.into_iter().collect()
    }

    /// [`echo`](Self::echo) rendered as a document.
    pub fn echo_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.echo() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn validate_sim_domain(name: &str) -> Result<String> {
    match name {
        "sima" | "simb" => Ok(name.to_string()),
        other => Err(Error::config(format!(
            "simulator domain {other:?}: expected sima or simb (or none)"
        ))),
    }
}

/// A grid document: a base run configuration plus one or more sweeps.
#[derive(Clone, Debug)]
pub struct GridConfig {
    base: RawConfig,
    /// Swept keys in file order with their value lists.
    sweeps: Vec<(String, Vec<String>)>,
}

impl GridConfig {
    pub fn from_text(text: &str) -> Result<GridConfig> {
        let raw = RawConfig::parse(text)?;
        let mut base = RawConfig::default();
        let mut sweeps: Vec<(String, Vec<String>)> = Vec::new();
        for (k, v) in raw.entries() {
            if let Some(target) = k.strip_prefix("sweep.") {
                if target.is_empty() {
                    return Err(Error::config("sweep key is missing its target"));
                }
                let values: Vec<String> = if v.contains('|') {
                    v.split('|')
                        .map(str::trim)
                        .filter(|p| !p.is_empty())
                        .map(str::to_string)
                        .collect()
                } else {
                    split_list(v)
                };
                if values.is_empty() {
                    return Err(Error::config(format!("sweep.{target} has no values")));
                }
                sweeps.push((target.to_string(), values));
            } else {
                base = base.with(k, v);
            }
        }
        if sweeps.is_empty() {
            // A sweep-free grid is a single cell; that is legal and runs the
            // base configuration once.
        }
        for (key, _) in &sweeps {
            if base.get(key).is_some() {
                return Err(Error::config(format!(
                    "key {key:?} is both set and swept; pick one"
                )));
            }
        }
        Ok(GridConfig { base, sweeps })
    }

    pub fn num_cells(&self) -> usize {
        self.sweeps.iter().map(|(_, vs)| vs.len()).product()
    }

    /// All cells in row-major order (first sweep outermost). Each cell
    /// carries its directory-safe name and its own parse outcome, so one
    /// bad cell does not block the others.
    pub fn expand(&self) -> Vec<(String, Result<ExperimentConfig>)> {
        let base_name = self.base.get("name").unwrap_or("run").to_string();
        let mut cells = Vec::with_capacity(self.num_cells());
        let mut index = vec![0usize; self.sweeps.len()];
        loop {
            let mut raw = self.base.clone();
            let mut label = base_name.clone();
            for (slot, (key, values)) in index.iter().zip(&self.sweeps) {
                let value = &values[*slot];
                raw = raw.with(key, value);
                let short = key.rsplit('.').next().unwrap_or(key);
                label.push_str(&format!("--{short}-{}", value.replace(',', "+")));
            }
            raw = raw.with("name", &label);
            cells.push((label, ExperimentConfig::from_raw(&raw)));

            // Odometer increment; done when it wraps.
            let mut pos = self.sweeps.len();
            loop {
                if pos == 0 {
                    return cells;
                }
                pos -= 1;
                index[pos] += 1;
                if index[pos] < self.sweeps[pos].1.len() {
                    break;
                }
                index[pos] = 0;
            }
        }
    }
}

/// Ready-made experiment documents.
///
/// Run presets (for `run`): `nt`, `ewc`, `mas`, `lwf`, `er`, `nt-sima`,
/// `nt-simb`, `er-simb`, `nt-pretrained`, `nt-simb-pretrained`,
/// `nt-mixed-stream`, `nt-simb-mixed-stream`, `supervised`.
///
/// Grid presets (for `grid`): `method-grid`, `ratio-sweep`, `budget-sweep`,
/// `buffer-grid`, `order-grid`.
pub fn preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "nt" => "name = nt\nstrategy = nt\n",
        "ewc" => "name = ewc\nstrategy = ewc\n",
        "mas" => "name = mas\nstrategy = mas\n",
        "lwf" => "name = lwf\nstrategy = lwf\n",
        "er" => "name = er\nstrategy = er\n",
        "nt-sima" => "name = nt-sima\nstrategy = nt\nsim.mix = sima\nsim.ratio = 1\n",
        "nt-simb" => "name = nt-simb\nstrategy = nt\nsim.mix = simb\nsim.ratio = 1\n",
        "er-simb" => "name = er-simb\nstrategy = er\nsim.mix = simb\nsim.ratio = 1\n",
        "nt-pretrained" => "name = nt-pretrained\nstrategy = nt\nsim.pretrain = simb\n",
        "nt-simb-pretrained" => {
            "name = nt-simb-pretrained\nstrategy = nt\nsim.mix = simb\nsim.ratio = 1\nsim.pretrain = simb\n"
        }
        "nt-mixed-stream" => "name = nt-mixed-stream\nstrategy = nt\nstream.mode = mixed\n",
        "nt-simb-mixed-stream" => {
            "name = nt-simb-mixed-stream\nstrategy = nt\nsim.mix = simb\nsim.ratio = 1\nstream.mode = mixed\n"
        }
        "supervised" => "name = supervised\nmode = offline\noffline.epochs = 4\n",
        "method-grid" => {
            "name = methods\nsweep.strategy = nt|ewc|mas|lwf|er\nsweep.sim.mix = none|sima|simb\n"
        }
        "ratio-sweep" => {
            "name = ratio\nstrategy = nt\nsweep.sim.mix = simb\nsweep.sim.ratio = 0.25|0.5|1|2|4|5|8|10\n"
        }
        "budget-sweep" => "name = budget\nstrategy = nt\nsweep.stream.budget = 1|2|3|4|6|8|10\n",
        "buffer-grid" => {
            "name = buffer\nstrategy = er\nsweep.strategy.capacity = 200|800|1000|1200\n"
        }
        "order-grid" => {
            "name = order\nstrategy = nt\nsweep.stream.domains = metro,delta,coastal,alpine|alpine,metro,delta,coastal|coastal,alpine,metro,delta|delta,coastal,alpine,metro\n"
        }
        _ => return None,
    })
}

/// Names of all run presets.
pub const RUN_PRESETS: [&str; 13] = [
    "nt",
    "ewc",
    "mas",
    "lwf",
    "er",
    "nt-sima",
    "nt-simb",
    "er-simb",
    "nt-pretrained",
    "nt-simb-pretrained",
    "nt-mixed-stream",
    "nt-simb-mixed-stream",
    "supervised",
];

/// Names of all grid presets.
pub const GRID_PRESETS: [&str; 5] = [
    "method-grid",
    "ratio-sweep",
    "budget-sweep",
    "buffer-grid",
    "order-grid",
];
