use std::fmt;
use std::str::FromStr;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Next-token selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    /// Sample among the `k` highest logits at temperature 1.
    TopK(usize),
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampling::Temperature(t) if !(t.is_finite() && t > 0.0) => {
                Err(Error::Sampling(format!("temperature must be finite and > 0, got {t}")))
            }
            Sampling::TopK(0) => Err(Error::Sampling("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Picks a token from one row of logits. Ties resolve to the lowest id.
    pub fn pick<T: Scalar>(&self, logits: &[T], rng: &mut ChaCha8Rng) -> Result<u32> {
        if logits.is_empty() {
            return Err(Error::Sampling("empty logits".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        match *self {
            Sampling::Greedy => Ok(argmax(&logits) as u32),
            Sampling::Temperature(t) => {
                let ids: Vec<usize> = (0..logits.len()).collect();
                Ok(draw(&logits, &ids, t, rng))
            }
            Sampling::TopK(k) => {
                let mut ids: Vec<usize> = (0..logits.len()).collect();
                ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                ids.truncate(k);
                Ok(draw(&logits, &ids, 1.0, rng))
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(logits: &[f64], ids: &[usize], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = ids.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in ids.iter().zip(&weights) {
        if u < w {
            return i as u32;
        }
        u -= w;
    }
    *ids.last().expect("non-empty") as u32
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Greedy => write!(f, "greedy"),
            Sampling::Temperature(t) => write!(f, "temperature:{t}"),
            Sampling::TopK(k) => write!(f, "top_k:{k}"),
        }
    }
}

impl FromStr for Sampling {
    type Err = Error;

    /// `greedy`, `temperature:0.8` or `top_k:5`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Sampling(format!("cannot parse sampling `{s}`"));
        let sampling = match s.split_once(':') {
            None if s == "greedy" => Sampling::Greedy,
            Some(("temperature", t)) => Sampling::Temperature(t.parse().map_err(|_| bad())?),
            Some(("top_k", k)) => Sampling::TopK(k.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        sampling.validate()?;
        Ok(sampling)
    }
}
