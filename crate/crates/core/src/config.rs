//! Run configuration and its flat key/value file format.
//!
//! A config file is plain text, one `key = value` pair per line. Keys are
//! verbatim the training-parameter names (including spaces and the literal
//! `# queries`), so blank lines are the only non-pair content allowed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Where the decoder's initial queries are gathered from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSource {
    /// Merged C3/C4/C5 confidence map (the default selection path).
    Dqs,
    /// Score C3 alone with its own head.
    C3,
    /// Score C4 alone with its own head.
    C4,
    /// Score all three levels and rank the concatenated score vector.
    C3C4C5,
}

impl SelectionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionSource::Dqs => "dqs",
            SelectionSource::C3 => "c3",
            SelectionSource::C4 => "c4",
            SelectionSource::C3C4C5 => "c3c4c5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dqs" => Ok(SelectionSource::Dqs),
            "c3" => Ok(SelectionSource::C3),
            "c4" => Ok(SelectionSource::C4),
            "c3c4c5" => Ok(SelectionSource::C3C4C5),
            other => Err(Error::Config(format!(
                "unknown selection_source '{other}' (expected dqs|c3|c4|c3c4c5)"
            ))),
        }
    }
}

/// Weights of the six loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
    pub dice: f64,
    pub q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 4.0,
            l1: 5.0,
            giou: 2.0,
            ce: 5.0,
            dice: 5.0,
            q: 80.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_cls", self.cls),
            ("lambda_L1", self.l1),
            ("lambda_giou", self.giou),
            ("lambda_ce", self.ce),
            ("lambda_dice", self.dice),
            ("lambda_q", self.q),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative finite number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Full run configuration shared by the model, trainer and CLI.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub image_size: usize,
    pub num_queries: usize,
    pub d_model: usize,
    pub decoder_layers: usize,
    /// Depth of the patch-embedding transformer encoder.
    pub encoder_depth: usize,
    pub selection_source: SelectionSource,
    pub dqs_aux_loss: bool,
    pub dqs_init: bool,
    pub loss_weights: LossWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 384,
            num_queries: 100,
            d_model: 256,
            decoder_layers: 3,
            encoder_depth: 4,
            selection_source: SelectionSource::Dqs,
            dqs_aux_loss: true,
            dqs_init: true,
            loss_weights: LossWeights::default(),
            learning_rate: 2e-4,
            weight_decay: 0.05,
            batch_size: 32,
            epochs_pretrain: 160,
            epochs_finetune: 80,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// A small configuration used by tests and the overfit experiment.
    pub fn toy(image_size: usize) -> Self {
        RunConfig {
            image_size,
            num_queries: 16,
            d_model: 64,
            decoder_layers: 1,
            encoder_depth: 2,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs_pretrain: 300,
            epochs_finetune: 0,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        let grid = self.image_size / 16;
        if self.num_queries == 0 || self.num_queries > 2 * grid * grid {
            return Err(Error::Config(format!(
                "# queries must lie in [1, {}] for image size {}, got {}",
                2 * grid * grid,
                self.image_size,
                self.num_queries
            )));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model must be a positive multiple of 4, got {}",
                self.d_model
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be >= 1".into()));
        }
        if self.encoder_depth == 0 {
            return Err(Error::Config("encoder_depth must be >= 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is fixed at 0.0".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss_weights.validate()
    }

    /// Spatial side of the 1/16-scale grid.
    pub fn base_grid(&self) -> usize {
        self.image_size / 16
    }

    /// Serialize to the flat key/value text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "learning rate = {}", self.learning_rate);
        let _ = writeln!(s, "weight decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch size = {}", self.batch_size);
        let _ = writeln!(s, "image size = {}", self.image_size);
        let _ = writeln!(s, "epochs for pretrain = {}", self.epochs_pretrain);
        let _ = writeln!(s, "epochs for finetune = {}", self.epochs_finetune);
        let _ = writeln!(s, "# queries = {}", self.num_queries);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "lambda_cls = {}", self.loss_weights.cls);
        let _ = writeln!(s, "lambda_L1 = {}", self.loss_weights.l1);
        let _ = writeln!(s, "lambda_giou = {}", self.loss_weights.giou);
        let _ = writeln!(s, "lambda_ce = {}", self.loss_weights.ce);
        let _ = writeln!(s, "lambda_dice = {}", self.loss_weights.dice);
        let _ = writeln!(s, "lambda_q = {}", self.loss_weights.q);
        let _ = writeln!(s, "selection_source = {}", self.selection_source.as_str());
        let _ = writeln!(s, "dqs_aux_loss = {}", self.dqs_aux_loss);
        let _ = writeln!(s, "dqs_init = {}", self.dqs_init);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "encoder_depth = {}", self.encoder_depth);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parse the flat key/value text format. Unknown keys are rejected;
    /// missing keys fall back to the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map: HashMap<String, String> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }

        let mut cfg = RunConfig::default();
        let mut take = |key: &str| map.remove(key);
        if let Some(v) = take("learning rate") {
            cfg.learning_rate = parse_num(&v, "learning rate")?;
        }
        if let Some(v) = take("weight decay") {
            cfg.weight_decay = parse_num(&v, "weight decay")?;
        }
        if let Some(v) = take("batch size") {
            cfg.batch_size = parse_int(&v, "batch size")?;
        }
        if let Some(v) = take("image size") {
            cfg.image_size = parse_int(&v, "image size")?;
        }
        if let Some(v) = take("epochs for pretrain") {
            cfg.epochs_pretrain = parse_int(&v, "epochs for pretrain")?;
        }
        if let Some(v) = take("epochs for finetune") {
            cfg.epochs_finetune = parse_int(&v, "epochs for finetune")?;
        }
        if let Some(v) = take("# queries") {
            cfg.num_queries = parse_int(&v, "# queries")?;
        }
        if let Some(v) = take("dropout") {
            cfg.dropout = parse_num(&v, "dropout")?;
        }
        if let Some(v) = take("lambda_cls") {
            cfg.loss_weights.cls = parse_num(&v, "lambda_cls")?;
        }
        if let Some(v) = take("lambda_L1") {
            cfg.loss_weights.l1 = parse_num(&v, "lambda_L1")?;
        }
        if let Some(v) = take("lambda_giou") {
            cfg.loss_weights.giou = parse_num(&v, "lambda_giou")?;
        }
        if let Some(v) = take("lambda_ce") {
            cfg.loss_weights.ce = parse_num(&v, "lambda_ce")?;
        }
        if let Some(v) = take("lambda_dice") {
            cfg.loss_weights.dice = parse_num(&v, "lambda_dice")?;
        }
        if let Some(v) = take("lambda_q") {
            cfg.loss_weights.q = parse_num(&v, "lambda_q")?;
        }
        if let Some(v) = take("selection_source") {
            cfg.selection_source = SelectionSource::parse(&v)?;
        }
        if let Some(v) = take("dqs_aux_loss") {
            cfg.dqs_aux_loss = parse_bool(&v, "dqs_aux_loss")?;
        }
        if let Some(v) = take("dqs_init") {
            cfg.dqs_init = parse_bool(&v, "dqs_init")?;
        }
        if let Some(v) = take("d_model") {
            cfg.d_model = parse_int(&v, "d_model")?;
        }
        if let Some(v) = take("decoder_layers") {
            cfg.decoder_layers = parse_int(&v, "decoder_layers")?;
        }
        if let Some(v) = take("encoder_depth") {
            cfg.encoder_depth = parse_int(&v, "encoder_depth")?;
        }
        if let Some(v) = take("seed") {
            cfg.seed = v
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("seed: invalid integer '{v}'")))?;
        }
        if let Some(key) = map.keys().next() {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_text().as_bytes())
    }
}

fn parse_num(v: &str, key: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: invalid number '{v}'")))
}

fn parse_int(v: &str, key: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: invalid integer '{v}'")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: invalid bool '{v}'"))),
    }
}
