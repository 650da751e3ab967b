use crate::error::{Error, Result};

/// Stripe masking applied to every training feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            time_masks: 2,
            max_time_width: 16,
            freq_masks: 2,
            max_freq_width: 8,
        }
    }
}

impl SpecAugmentConfig {
    pub const OFF: Self = Self {
        time_masks: 0,
        max_time_width: 0,
        freq_masks: 0,
        max_freq_width: 0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied once every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Beta parameter of the mixup coefficient; 0 disables mixup.
    pub mixup_alpha: f64,
    pub spec_augment: SpecAugmentConfig,
    pub seed: u64,
    /// Evaluate every this many iterations (and after the last); 0 evaluates only at the end.
    pub eval_every: usize,
    /// Fold held out for evaluation; every other fold trains.
    pub eval_fold: u32,
    /// Stop after the first evaluation reaching this accuracy.
    pub stop_at_eval_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay: 0.98,
            decay_every: 5,
            batch_size: 64,
            max_iters: 2000,
            mixup_alpha: 0.2,
            spec_augment: SpecAugmentConfig::default(),
            seed: 0,
            eval_every: 100,
            eval_fold: 2,
            stop_at_eval_acc: None,
        }
    }
}

const KEYS: [&str; 14] = [
    "lr0",
    "decay",
    "decay_every",
    "batch_size",
    "max_iters",
    "mixup_alpha",
    "time_masks",
    "max_time_width",
    "freq_masks",
    "max_freq_width",
    "seed",
    "eval_every",
    "eval_fold",
    "stop_at_eval_acc",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0 && self.lr0.is_finite() && self.decay > 0.0 && self.decay <= 1.0;
        if !positive {
            return Err(Error::Config(
                "lr0 must be positive and decay must lie in (0, 1]".into(),
            ));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "decay_every, batch_size and max_iters must be positive".into(),
            ));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config("mixup_alpha must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Overrides defaults from `key=value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line {raw:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let sa = &mut self.spec_augment;
        match key {
            "lr0" => self.lr0 = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "mixup_alpha" => self.mixup_alpha = parse(key, value)?,
            "time_masks" => sa.time_masks = parse(key, value)?,
            "max_time_width" => sa.max_time_width = parse(key, value)?,
            "freq_masks" => sa.freq_masks = parse(key, value)?,
            "max_freq_width" => sa.max_freq_width = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_fold" => self.eval_fold = parse(key, value)?,
            "stop_at_eval_acc" => {
                self.stop_at_eval_acc = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown training config key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let sa = &self.spec_augment;
        format!(
            "lr0={}\ndecay={}\ndecay_every={}\nbatch_size={}\nmax_iters={}\nmixup_alpha={}\ntime_masks={}\nmax_time_width={}\nfreq_masks={}\nmax_freq_width={}\nseed={}\neval_every={}\neval_fold={}\nstop_at_eval_acc={}\n",
            self.lr0,
            self.decay,
            self.decay_every,
            self.batch_size,
            self.max_iters,
            self.mixup_alpha,
            sa.time_masks,
            sa.max_time_width,
            sa.freq_masks,
            sa.max_freq_width,
            self.seed,
            self.eval_every,
            self.eval_fold,
            self.stop_at_eval_acc.map(|a| a.to_string()).unwrap_or_default()
        )
    }

    /// `lr0 · decay^⌊iter / decay_every⌋`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        lr_schedule(self.lr0, self.decay, self.decay_every, iter)
    }
}

pub fn lr_schedule(lr0: f64, decay: f64, every: usize, iter: usize) -> f64 {
    lr0 * decay.powi((iter / every) as i32)
}
