//! Hard-mode pruning statistics over a sample of token windows.

use std::io::Write;
use std::path::Path;

use crate::entmax::Alpha;
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelParams};
use crate::pruning::{GateMode, PruningVariant};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Averages are over windows; counts are totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Analysis {
    pub windows: usize,
    pub window_len: usize,
    /// Dropped fraction of earlier tokens, `[layer][position]`.
    pub sparsity_by_position: Vec<Vec<f64>>,
    pub per_layer: Vec<f64>,
    /// Attendable tokens including the query itself, `[layer][position]`.
    pub kept_by_position: Vec<Vec<f64>>,
    /// Drops fired by each generating token id, `[layer][token]`.
    pub triggers_by_token: Vec<Vec<u64>>,
    /// Drops fired at each query position, `[layer][position]`.
    pub triggers_by_position: Vec<Vec<u64>>,
    /// Keep masks of the first window, `[layer]`, 1 = attendable.
    pub masks: Vec<Matrix<f64>>,
}

impl Analysis {
    pub fn aggregate(&self) -> f64 {
        if self.per_layer.is_empty() {
            0.0
        } else {
            self.per_layer.iter().sum::<f64>() / self.per_layer.len() as f64
        }
    }

    /// Writes the CSV tables plus one `mask_l{layer}.csv` per layer.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let layers = self.per_layer.len();
        let header = |f: &mut dyn Write, first: &str| -> std::io::Result<()> {
            write!(f, "{first}")?;
            for l in 0..layers {
                write!(f, ",l{l}")?;
            }
            writeln!(f)
        };

        let mut f = create(dir, "sparsity_per_layer.csv")?;
        writeln!(f, "layer,sparsity")?;
        for (l, s) in self.per_layer.iter().enumerate() {
            writeln!(f, "{l},{s:.6}")?;
        }

        let by_position = [
            ("sparsity_by_position.csv", &self.sparsity_by_position),
            ("kept_by_position.csv", &self.kept_by_position),
        ];
        for (name, table) in by_position {
            let mut f = create(dir, name)?;
            header(&mut f, "position")?;
            for p in 0..self.window_len {
                write!(f, "{p}")?;
                for row in table.iter() {
                    write!(f, ",{:.6}", row[p])?;
                }
                writeln!(f)?;
            }
        }

        let counts = [
            ("triggers_by_token.csv", "token", &self.triggers_by_token),
            ("triggers_by_position.csv", "position", &self.triggers_by_position),
        ];
        for (name, key, table) in counts {
            let mut f = create(dir, name)?;
            header(&mut f, key)?;
            let width = table.first().map_or(0, Vec::len);
            for i in 0..width {
                write!(f, "{i}")?;
                for row in table.iter() {
                    write!(f, ",{}", row[i])?;
                }
                writeln!(f)?;
            }
        }

        for (l, mask) in self.masks.iter().enumerate() {
            let mut f = create(dir, &format!("mask_l{l}.csv"))?;
            for i in 0..mask.rows() {
                let row: Vec<String> = mask.row(i).iter().map(|&v| (v as u8).to_string()).collect();
                writeln!(f, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
}

/// Runs hard-mode forwards over equally long `windows`.
pub fn analyze<T: Scalar>(params: &ModelParams<T>, windows: &[Vec<u32>], variant: PruningVariant) -> Result<Analysis> {
    let Some(first) = windows.first() else {
        return Err(Error::Config("analyze needs at least one window".into()));
    };
    let n = first.len();
    if n == 0 || windows.iter().any(|w| w.len() != n) {
        return Err(Error::Shape("analysis windows must be non-empty and equally long".into()));
    }
    let cfg = &params.config;
    let layers = cfg.n_layers;
    let mut out = Analysis {
        windows: windows.len(),
        window_len: n,
        sparsity_by_position: vec![vec![0.0; n]; layers],
        per_layer: vec![0.0; layers],
        kept_by_position: vec![vec![0.0; n]; layers],
        triggers_by_token: vec![vec![0; cfg.n_vocab]; layers],
        triggers_by_position: vec![vec![0; n]; layers],
        masks: Vec::new(),
    };
    for chunk in windows.chunks(16) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let traces = forward_batch(params, &refs, Alpha::ONE, GateMode::Hard, variant)?;
        for (trace, tokens) in traces.iter().zip(chunk) {
            if out.masks.is_empty() {
                out.masks = trace.keep_masks().iter().map(|m| m.cast()).collect();
            }
            let report = trace.sparsity()?;
            for l in 0..layers {
                out.per_layer[l] += report.per_layer[l];
                for p in 0..n {
                    out.sparsity_by_position[l][p] += report.per_position[l][p];
                    out.kept_by_position[l][p] += (p + 1 - report.dropped[l][p]) as f64;
                }
                let state = &trace.interactions[l];
                for j in 0..n {
                    if let Some(k) = (j + 1..n).find(|&k| !state.is_kept(k, j)) {
                        out.triggers_by_token[l][tokens[k] as usize] += 1;
                        out.triggers_by_position[l][k] += 1;
                    }
                }
            }
        }
    }
    let tables = out.sparsity_by_position.iter_mut().chain(out.kept_by_position.iter_mut());
    for v in tables.flatten().chain(out.per_layer.iter_mut()) {
        *v /= windows.len() as f64;
    }
    Ok(out)
}
