use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::parse;

/// How the weight-decay terms are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayScale {
    /// `coef * sum(W^2)`.
    Sum,
    /// `coef * sum(W^2) / P`, with `P` the number of decayed scalars, matching
    /// the per-element normalization of the data terms.
    Mean,
}

impl DecayScale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("decay_scale must be `sum` or `mean`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub lr: f64,
    pub momentum: f64,
    /// RMSProp mean-square decay.
    pub decay_rate: f64,
    pub seed: u64,
    /// `lambda2` doubles as the `weight_decay` key.
    pub loss_weights: LossWeights,
    pub decay_scale: DecayScale,
    /// Write a partial checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Emit a log record every this many steps; 0 logs only the last step.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            phase1_steps: 2000,
            phase2_steps: 5000,
            lr: 1e-3,
            momentum: 0.9,
            decay_rate: 0.9,
            seed: 0,
            loss_weights: LossWeights::default(),
            decay_scale: DecayScale::Mean,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn weight_decay(&self) -> f64 {
        self.loss_weights.lambda2
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.phase1_steps == 0 || self.phase2_steps == 0 {
            return Err(Error::Config("phase step counts must be positive".into()));
        }
        self.loss_weights.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.loss_weights;
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("phase1_steps".into(), self.phase1_steps.to_string()),
            ("phase2_steps".into(), self.phase2_steps.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("decay_rate".into(), self.decay_rate.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("weight_decay".into(), w.lambda2.to_string()),
            ("eta1".into(), w.eta1.to_string()),
            ("eta2".into(), w.eta2.to_string()),
            ("eta3".into(), w.eta3.to_string()),
            ("eta4".into(), w.eta4.to_string()),
            ("decay_scale".into(), self.decay_scale.as_str().into()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("log_every".into(), self.log_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.loss_weights;
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "phase1_steps" => self.phase1_steps = parse(key, value)?,
            "phase2_steps" => self.phase2_steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "decay_rate" => self.decay_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "weight_decay" => w.lambda2 = parse(key, value)?,
            "eta1" => w.eta1 = parse(key, value)?,
            "eta2" => w.eta2 = parse(key, value)?,
            "eta3" => w.eta3 = parse(key, value)?,
            "eta4" => w.eta4 = parse(key, value)?,
            "decay_scale" => self.decay_scale = DecayScale::parse(value.trim())?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
