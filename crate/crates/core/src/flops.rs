//! Theoretical FLOPs of correlation-aggregation schemes over an `N × C`
//! correlation sequence, term by term, with the formulas taken as written.
//!
//! Default binding: `N = 30⁴`, `C = C_in = C_out = d_model = 16`,
//! `C_inner = 48` (block expansion 3), `d_state = 16`, 1D-conv width `k = 4`,
//! 4D-conv kernel `k = 3`. Note the 1D-conv term carries no `N` factor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total printed for the plain selective-scan scheme, kept for comparison.
pub const PRINTED_MAMBA_TOTAL: f64 = 23.1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Conv4d,
    VanillaAttention,
    Fastformer,
    Mamba,
    MambaSorted,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Conv4d,
        Scheme::VanillaAttention,
        Scheme::Fastformer,
        Scheme::Mamba,
        Scheme::MambaSorted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Conv4d => "conv4d",
            Scheme::VanillaAttention => "vanilla_attention",
            Scheme::Fastformer => "fastformer",
            Scheme::Mamba => "mamba",
            Scheme::MambaSorted => "mamba_sorted",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsConfig {
    /// Sequence length `N`.
    pub n: u64,
    /// Channels `C = C_in = C_out`.
    pub channels: u64,
    /// 4D convolution kernel width.
    pub kernel: u64,
    pub d_model: u64,
    pub d_state: u64,
    pub d_inner: u64,
    pub k_conv: u64,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            n: 30u64.pow(4),
            channels: 16,
            kernel: 3,
            d_model: 16,
            d_state: 16,
            d_inner: 48,
            k_conv: 4,
        }
    }
}

impl FlopsConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.n,
            self.channels,
            self.kernel,
            self.d_model,
            self.d_state,
            self.d_inner,
            self.k_conv,
        ];
        if all.contains(&0) {
            return Err(Error::invalid(format!("FLOPs extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: &'static str,
    pub flops: f64,
}

fn term(name: &'static str, flops: f64) -> Term {
    Term { name, flops }
}

pub fn terms(scheme: Scheme, cfg: &FlopsConfig) -> Result<Vec<Term>> {
    cfg.validate()?;
    let n = cfg.n as f64;
    let c = cfg.channels as f64;
    let k = cfg.kernel as f64;
    let (dm, ds, di, kc) = (cfg.d_model as f64, cfg.d_state as f64, cfg.d_inner as f64, cfg.k_conv as f64);
    let qkv = 3.0 * (2.0 * n * c * c);
    Ok(match scheme {
        Scheme::Conv4d => vec![term("4d convolution", 2.0 * n * c * c * k.powi(4))],
        Scheme::VanillaAttention => vec![
            term("qkv projection", qkv),
            term("dot product", 2.0 * (n * n * c)),
            term("softmax", 3.0 * (n * n)),
            term("weighted sum", 2.0 * (n * n) * c),
        ],
        Scheme::Fastformer => vec![
            term("qkv projection", qkv),
            term("softmax and weighted sum", 2.0 * (3.0 * n + 2.0 * n * c)),
            term("global vector addition", 2.0 * (n * c)),
            term("projection", 2.0 * n * c * c),
        ],
        Scheme::Mamba | Scheme::MambaSorted => {
            let mut t = vec![
                term("input projection", 2.0 * 2.0 * n * c * di),
                term("1d convolution", 2.0 * di * kc * di),
                term("a/b/dt projection", 2.0 * n * di * (2.0 * dm + 1.0)),
                term("selective scan", 9.0 * n * dm * ds),
                term("elementwise", n * di),
                term("output projection", 2.0 * n * di * c),
            ];
            if scheme == Scheme::MambaSorted {
                t.push(term("sorting", 4.0 * (n * n.log2())));
            }
            t
        }
    })
}

pub fn estimate(scheme: Scheme, cfg: &FlopsConfig) -> Result<f64> {
    Ok(terms(scheme, cfg)?.iter().map(|t| t.flops).sum())
}

/// `33.6 GFLOPs`-style rendering with three significant figures.
pub fn human(flops: f64) -> String {
    const UNITS: [(f64, &str); 5] = [(1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, prefix) in UNITS {
        if flops >= scale {
            let v = flops / scale;
            let digits = if v >= 10.0 { 1 } else { 2 };
            return format!("{v:.digits$} {prefix}FLOPs");
        }
    }
    format!("{flops:.0} FLOPs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_schemes() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("transformer".parse::<Scheme>().is_err());
    }

    #[test]
    fn rejects_zero_extents() {
        let cfg = FlopsConfig {
            d_state: 0,
            ..FlopsConfig::default()
        };
        assert!(estimate(Scheme::Mamba, &cfg).is_err());
    }

    #[test]
    fn human_units() {
        assert_eq!(human(3.359232e10), "33.6 GFLOPs");
        assert_eq!(human(1.741e9), "1.74 GFLOPs");
        assert_eq!(human(4.3958e13), "44.0 TFLOPs");
        assert_eq!(human(6.36e7), "63.6 MFLOPs");
    }

    #[test]
    fn sorting_is_the_only_difference() {
        let cfg = FlopsConfig::default();
        let diff = estimate(Scheme::MambaSorted, &cfg).unwrap() - estimate(Scheme::Mamba, &cfg).unwrap();
        let n = cfg.n as f64;
        assert!((diff - 4.0 * n * n.log2()).abs() < 1.0);
    }
}
