use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::GlobalPoolMode;

/// Which attention, if any, a block applies before its pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    None,
    Temporal,
    Spectral,
    ParallelLearned,
    ParallelFixed,
    ConcatTS,
    ConcatST,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 7] = [
        Self::None,
        Self::Temporal,
        Self::Spectral,
        Self::ParallelLearned,
        Self::ParallelFixed,
        Self::ConcatTS,
        Self::ConcatST,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Temporal => "temporal",
            Self::Spectral => "spectral",
            Self::ParallelLearned => "parallel_learned",
            Self::ParallelFixed => "parallel_fixed",
            Self::ConcatTS => "concat_TS",
            Self::ConcatST => "concat_ST",
        }
    }

    pub fn uses_temporal(self) -> bool {
        !matches!(self, Self::None | Self::Spectral)
    }

    pub fn uses_spectral(self) -> bool {
        !matches!(self, Self::None | Self::Temporal)
    }

    pub fn has_logits(self) -> bool {
        self == Self::ParallelLearned
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

/// The named models: the baseline, its single-attention variants, the
/// parallel variants (all blocks, one block, fixed weights) and the two
/// serial baselines.
pub const PRESETS: [&str; 11] = [
    "CNN10",
    "T-CNN10",
    "S-CNN10",
    "TS-CNN10-1",
    "TS-CNN10-2",
    "TS-CNN10-3",
    "TS-CNN10-4",
    "TS-CNN10-fixed",
    "TS-CNN10",
    "TS-CNN10-concat",
    "ST-CNN10-concat",
];

/// Suffix selecting the reduced-width desk-scale version of any preset.
pub const SMALL_SUFFIX: &str = "-small";
pub const SMALL_CHANNELS: [usize; 4] = [8, 8, 16, 16];
pub const SMALL_FC_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub block_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
    pub n_classes: usize,
    /// Mel bands of the input feature.
    pub input_bands: usize,
    pub attention_variant: AttentionVariant,
    /// 1-based block indices carrying attention.
    pub attention_blocks: Vec<usize>,
    pub global_pool: GlobalPoolMode,
}

impl ModelConfig {
    pub fn cnn10(n_classes: usize) -> Self {
        Self {
            block_channels: vec![64, 128, 256, 512],
            convs_per_block: 2,
            kernel: 3,
            fc_hidden: 512,
            n_classes,
            input_bands: 40,
            attention_variant: AttentionVariant::None,
            attention_blocks: Vec::new(),
            global_pool: GlobalPoolMode::Mean,
        }
    }

    pub fn preset(name: &str, n_classes: usize) -> Result<Self> {
        let (base, small) = match name.strip_suffix(SMALL_SUFFIX) {
            Some(b) => (b, true),
            None => (name, false),
        };
        let all = vec![1, 2, 3, 4];
        let (variant, blocks) = match base {
            "CNN10" => (AttentionVariant::None, vec![]),
            "T-CNN10" => (AttentionVariant::Temporal, all),
            "S-CNN10" => (AttentionVariant::Spectral, all),
            "TS-CNN10-1" => (AttentionVariant::ParallelLearned, vec![1]),
            "TS-CNN10-2" => (AttentionVariant::ParallelLearned, vec![2]),
            "TS-CNN10-3" => (AttentionVariant::ParallelLearned, vec![3]),
            "TS-CNN10-4" => (AttentionVariant::ParallelLearned, vec![4]),
            "TS-CNN10-fixed" => (AttentionVariant::ParallelFixed, all),
            "TS-CNN10" => (AttentionVariant::ParallelLearned, all),
            "TS-CNN10-concat" => (AttentionVariant::ConcatTS, all),
            "ST-CNN10-concat" => (AttentionVariant::ConcatST, all),
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    valid: format!("{} (each also with a {SMALL_SUFFIX:?} suffix)", PRESETS.join(", ")),
                })
            }
        };
        let mut cfg = Self {
            attention_variant: variant,
            attention_blocks: blocks,
            ..Self::cnn10(n_classes)
        };
        if small {
            cfg.block_channels = SMALL_CHANNELS.to_vec();
            cfg.fc_hidden = SMALL_FC_HIDDEN;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return bad("block_channels must be non-empty and positive".into());
        }
        if self.convs_per_block == 0 || self.kernel.is_multiple_of(2) || self.fc_hidden == 0 || self.input_bands == 0 {
            return bad("convs_per_block, fc_hidden and input_bands must be positive; kernel must be odd".into());
        }
        let none = self.attention_variant == AttentionVariant::None;
        if none != self.attention_blocks.is_empty() {
            return bad("attention_blocks must be empty exactly when the attention variant is none".into());
        }
        let nb = self.block_channels.len();
        if self.attention_blocks.iter().any(|&b| b == 0 || b > nb) {
            return bad(format!("attention blocks must lie in 1..={nb}"));
        }
        let mut sorted = self.attention_blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.attention_blocks {
            return bad("attention blocks must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn has_attention(&self, block: usize) -> bool {
        self.attention_blocks.contains(&block)
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "block_channels={}\nconvs_per_block={}\nkernel={}\nfc_hidden={}\nn_classes={}\ninput_bands={}\nattention_variant={}\nattention_blocks={}\nglobal_pool={}\n",
            join(&self.block_channels),
            self.convs_per_block,
            self.kernel,
            self.fc_hidden,
            self.n_classes,
            self.input_bands,
            self.attention_variant,
            join(&self.attention_blocks),
            match self.global_pool {
                GlobalPoolMode::Mean => "mean",
                GlobalPoolMode::Max => "max",
            }
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::cnn10(2);
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("{key}: not an integer: {v:?}")))
            };
            let list = |v: &str| -> Result<Vec<usize>> {
                if v.is_empty() {
                    Ok(Vec::new())
                } else {
                    v.split(',').map(|x| num(x.trim())).collect()
                }
            };
            match key {
                "block_channels" => cfg.block_channels = list(value)?,
                "convs_per_block" => cfg.convs_per_block = num(value)?,
                "kernel" => cfg.kernel = num(value)?,
                "fc_hidden" => cfg.fc_hidden = num(value)?,
                "n_classes" => cfg.n_classes = num(value)?,
                "input_bands" => cfg.input_bands = num(value)?,
                "attention_variant" => cfg.attention_variant = value.parse()?,
                "attention_blocks" => cfg.attention_blocks = list(value)?,
                "global_pool" => {
                    cfg.global_pool = match value {
                        "mean" => GlobalPoolMode::Mean,
                        "max" => GlobalPoolMode::Max,
                        other => return Err(Error::Config(format!("unknown global_pool {other:?}"))),
                    }
                }
                other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
            }
            seen.push(key.to_string());
        }
        if seen.len() != 9 {
            return Err(Error::Config(format!("model config needs all 9 keys, found {seen:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
