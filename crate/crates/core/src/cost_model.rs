//! Analytical FLOP accounting for a single diffusion-LLM inference.
//!
//! Per block and per denoising step, a gated transformer with multi-head
//! attention over a canvas of `L` positions costs
//!
//! | component              | FLOP        |
//! |------------------------|-------------|
//! | MLP block              | `6·L·D·F`   |
//! | Q, K, V, O projections | `8·L·D²`    |
//! | dot-product attention  | `4·D·L²`    |
//!
//! which sums to `D·(αL + βL²)` with `α = 6F + 8D` and `β = 4`. A full
//! inference multiplies that by the number of blocks `N` and steps `T`.
//! Embedding and vocabulary projections are not modelled.
//!
//! All counts are exact `u128` integers; overflow is reported, never wrapped.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Flop, Result, Tokens};

/// The quadratic coefficient `β` of the per-block cost.
pub const BETA: u64 = 4;

/// Shape of a diffusion LLM as far as the cost model is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer blocks (`N`).
    pub num_blocks: u64,
    /// Hidden dimension (`D`).
    pub hidden_dim: u64,
    /// MLP inner width (`F`).
    pub mlp_width: u64,
    /// Denoising steps per inference (`T`).
    pub diffusion_steps: u64,
    /// Largest response canvas the model was trained with (`L_max`).
    pub max_response_len: Tokens,
}

impl ModelConfig {
    /// An 8B-class masked diffusion model: 32 blocks, D=4096, F=3D, 128 steps,
    /// 4096-token maximum canvas.
    pub const LLADA_8B: ModelConfig = ModelConfig {
        num_blocks: 32,
        hidden_dim: 4096,
        mlp_width: 12288,
        diffusion_steps: 128,
        max_response_len: 4096,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("mlp_width", self.mlp_width),
            ("diffusion_steps", self.diffusion_steps),
            ("max_response_len", u64::from(self.max_response_len)),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::invalid(format!("model config: {name} must be positive")));
            }
        }
        Ok(())
    }

    /// `α = 6F + 8D`.
    pub fn alpha(&self) -> Result<u128> {
        let f = u128::from(self.mlp_width);
        let d = u128::from(self.hidden_dim);
        f.checked_mul(6)
            .zip(d.checked_mul(8))
            .and_then(|(a, b)| a.checked_add(b))
            .ok_or(Error::Overflow("alpha"))
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::LLADA_8B
    }
}

/// Per-block, per-step FLOP split into the three tabulated components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub mlp_flop: Flop,
    pub proj_flop: Flop,
    pub attn_flop: Flop,
    pub total_flop: Flop,
}

fn mul(terms: &[u128], what: &'static str) -> Result<u128> {
    terms
        .iter()
        .try_fold(1u128, |acc, &t| acc.checked_mul(t))
        .ok_or(Error::Overflow(what))
}

/// Cost of one forward pass through one block over `seq_len` positions.
pub fn per_block_flop(config: &ModelConfig, seq_len: u64) -> Result<CostBreakdown> {
    let l = u128::from(seq_len);
    let d = u128::from(config.hidden_dim);
    let f = u128::from(config.mlp_width);

    let mlp_flop = mul(&[6, l, d, f], "MLP FLOP")?;
    let proj_flop = mul(&[8, l, d, d], "projection FLOP")?;
    let attn_flop = mul(&[u128::from(BETA), d, l, l], "attention FLOP")?;
    let total_flop = mlp_flop
        .checked_add(proj_flop)
        .and_then(|s| s.checked_add(attn_flop))
        .ok_or(Error::Overflow("per-block total"))?;

    Ok(CostBreakdown {
        mlp_flop,
        proj_flop,
        attn_flop,
        total_flop,
    })
}

/// `T · N · D · (αL + βL²)`: the cost of one complete inference over a canvas
/// of `seq_len` positions.
pub fn total_inference_flop(config: &ModelConfig, seq_len: u64) -> Result<Flop> {
    let block = per_block_flop(config, seq_len)?;
    mul(
        &[
            u128::from(config.diffusion_steps),
            u128::from(config.num_blocks),
            block.total_flop,
        ],
        "total inference FLOP",
    )
}

/// The canvas length `α/β` past which attention dominates the linear terms,
/// as an exact floor quotient with its remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossover {
    pub length: u128,
    pub remainder: u128,
}

pub fn crossover_length(config: &ModelConfig) -> Result<Crossover> {
    let alpha = config.alpha()?;
    let beta = u128::from(BETA);
    Ok(Crossover {
        length: alpha / beta,
        remainder: alpha % beta,
    })
}

/// Least-squares fit `flop ≈ a·L + b·L² + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub linear_coeff: f64,
    pub quadratic_coeff: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits a quadratic in `seq_len` to `(seq_len, flop)` samples.
///
/// Abscissae are centred and scaled to `[-1, 1]` before the normal equations
/// are formed; the coefficients are mapped back to the raw basis afterwards.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<QuadraticFit> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::DegenerateFit("non-finite sample".into()));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 distinct seq_len values, got {}",
            xs.len()
        )));
    }

    let n = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let x_scale = points
        .iter()
        .map(|p| (p.0 - x_mean).abs())
        .fold(0.0, f64::max);
    let y_scale = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1.0);

    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(x, y) in points {
        let u = (x - x_mean) / x_scale;
        let row = [1.0, u, u * u];
        let v = y / y_scale;
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * v;
        }
    }
    let [c0, c1, c2] = solve3(ata, aty)?;

    let mut ss_res = 0.0;
    let y_mean = points.iter().map(|p| p.1 / y_scale).sum::<f64>() / n;
    let mut ss_tot = 0.0;
    for &(x, y) in points {
        let u = (x - x_mean) / x_scale;
        let v = y / y_scale;
        let fitted = c0 + c1 * u + c2 * u * u;
        ss_res += (v - fitted).powi(2);
        ss_tot += (v - y_mean).powi(2);
    }
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    // c0 + c1·(x-m)/s + c2·(x-m)²/s², expanded in powers of x
    let (m, s) = (x_mean, x_scale);
    let quadratic_coeff = c2 / (s * s) * y_scale;
    let linear_coeff = (c1 / s - 2.0 * c2 * m / (s * s)) * y_scale;
    let intercept = (c0 - c1 * m / s + c2 * m * m / (s * s)) * y_scale;

    Ok(QuadraticFit {
        linear_coeff,
        quadratic_coeff,
        intercept,
        r_squared,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= scale * 1e-14 {
            return Err(Error::DegenerateFit("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let factor = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// `(seq_len, total_inference_flop)` for each requested length.
pub fn cost_curve(config: &ModelConfig, lengths: &[u64]) -> Result<Vec<(u64, Flop)>> {
    lengths
        .iter()
        .map(|&l| Ok((l, total_inference_flop(config, l)?)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    seq_len: f64,
    flop: f64,
}

/// Reads a `seq_len,flop` CSV.
pub fn read_cost_curve<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["seq_len", "flop"] {
        return Err(Error::invalid(format!(
            "cost curve header must be `seq_len,flop`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize::<CurveRow>()
        .map(|row| row.map(|r| (r.seq_len, r.flop)).map_err(Error::from))
        .collect()
}

pub fn read_cost_curve_file(path: &Path) -> Result<Vec<(f64, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cost_curve(file)
}

/// Writes a `seq_len,flop` CSV with exact integer FLOP values.
pub fn write_cost_curve<W: Write>(mut writer: W, curve: &[(u64, Flop)]) -> std::io::Result<()> {
    writeln!(writer, "seq_len,flop")?;
    for (l, flop) in curve {
        writeln!(writer, "{l},{flop}")?;
    }
    Ok(())
}
