use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BlockError;

/// Which fusion block runs at a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Vanilla,
    Cst,
    Sgst,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Vanilla, BlockKind::Cst, BlockKind::Sgst];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Vanilla => "vanilla",
            BlockKind::Cst => "cst",
            BlockKind::Sgst => "sgst",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = BlockError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" | "vt" => Ok(BlockKind::Vanilla),
            "cst" => Ok(BlockKind::Cst),
            "sgst" => Ok(BlockKind::Sgst),
            other => Err(BlockError::Config(format!("unknown block kind '{other}'"))),
        }
    }
}

/// Normalization applied to the merge matrix before merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeNorm {
    /// Softmax over the N rows of each column: merged tokens are convex
    /// combinations of the heatmap-weighted tokens.
    #[default]
    Softmax,
    /// The matrix is used as is.
    Raw,
}

impl FromStr for MergeNorm {
    type Err = BlockError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "softmax" => Ok(MergeNorm::Softmax),
            "raw" => Ok(MergeNorm::Raw),
            other => Err(BlockError::Config(format!("unknown merge norm '{other}'"))),
        }
    }
}

/// Merged-token ratio K/N as an exact fraction; `K = ceil(num·N / den)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MergeRatio {
    num: u64,
    den: u64,
}

impl MergeRatio {
    pub const ONE_NINTH: MergeRatio = MergeRatio { num: 1, den: 9 };
    pub const ONE: MergeRatio = MergeRatio { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, BlockError> {
        if num == 0 || den == 0 || num > den {
            return Err(BlockError::Config(format!(
                "merge ratio {num}/{den} must lie in (0, 1]"
            )));
        }
        Ok(Self { num, den })
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    /// `ceil(num · n / den)`, at least 1.
    pub fn merged_tokens(self, n: usize) -> usize {
        ((self.num * n as u64).div_ceil(self.den) as usize).max(1)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for MergeRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for MergeRatio {
    type Err = BlockError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BlockError::Config(format!("merge ratio '{s}' is not of the form a/b"));
        let (a, b) = match s.trim().split_once('/') {
            Some((a, b)) => (a, b),
            None => (s.trim(), "1"),
        };
        let num = a.trim().parse().map_err(|_| bad())?;
        let den = b.trim().parse().map_err(|_| bad())?;
        Self::new(num, den)
    }
}

impl TryFrom<String> for MergeRatio {
    type Error = BlockError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MergeRatio> for String {
    fn from(r: MergeRatio) -> String {
        r.to_string()
    }
}

/// Per-block hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Channel count C of the tokens.
    pub channels: usize,
    pub heads: usize,
    /// FFN hidden width is `ffn_ratio · C`.
    pub ffn_ratio: usize,
    /// CST channel transform bottleneck is `C / ctx_reduction`.
    pub ctx_reduction: usize,
    pub merge_ratio: MergeRatio,
    pub merge_norm: MergeNorm,
    /// Only the foreground branch is updated; background tokens pass through.
    pub fg_only: bool,
    /// Token count N the merge matrix is shaped for.
    pub tokens: usize,
}

impl BlockConfig {
    pub fn new(channels: usize, tokens: usize) -> Self {
        Self {
            channels,
            heads: 1,
            ffn_ratio: 4,
            ctx_reduction: 4,
            merge_ratio: MergeRatio::ONE_NINTH,
            merge_norm: MergeNorm::Softmax,
            fg_only: false,
            tokens,
        }
    }

    pub fn merged_tokens(&self) -> usize {
        self.merge_ratio.merged_tokens(self.tokens)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.channels * self.ffn_ratio
    }

    pub fn ctx_hidden(&self) -> usize {
        self.channels / self.ctx_reduction
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        let fail = |m: String| Err(BlockError::Config(m));
        if self.channels == 0 || self.tokens == 0 {
            return fail("channels and tokens must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.ffn_ratio == 0 {
            return fail("ffn_ratio must be positive".into());
        }
        if self.ctx_reduction == 0
            || self.channels % self.ctx_reduction != 0
            || self.ctx_hidden() == 0
        {
            return fail(format!(
                "channels {} not divisible by ctx_reduction {}",
                self.channels, self.ctx_reduction
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_tokens_uses_ceiling() {
        assert_eq!(MergeRatio::ONE_NINTH.merged_tokens(1024), 114);
        assert_eq!(MergeRatio::ONE_NINTH.merged_tokens(9), 1);
        assert_eq!(MergeRatio::ONE_NINTH.merged_tokens(4), 1);
        assert_eq!(MergeRatio::ONE.merged_tokens(17), 17);
        assert_eq!("4/9".parse::<MergeRatio>().unwrap().merged_tokens(256), 114);
        assert_eq!("1/36".parse::<MergeRatio>().unwrap().merged_tokens(1), 1);
    }

    #[test]
    fn ratio_parsing_and_validation() {
        assert!("0/3".parse::<MergeRatio>().is_err());
        assert!("3/2".parse::<MergeRatio>().is_err());
        assert!("x".parse::<MergeRatio>().is_err());
        assert_eq!("1".parse::<MergeRatio>().unwrap(), MergeRatio::ONE);
        assert_eq!(MergeRatio::ONE_NINTH.to_string(), "1/9");
    }

    #[test]
    fn config_validation() {
        let mut c = BlockConfig::new(8, 16);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.ctx_reduction = 16;
        assert!(c.validate().is_err());
    }
}
