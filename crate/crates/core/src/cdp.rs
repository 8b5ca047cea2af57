//! Contextual disturbance predictor: frozen encoders from contexts to
//! numeric embeddings, a tunable affine decoder `g_θ(d) = C d + b`,
//! and the hypothesis ball its parameters are projected onto.
//!
//! Only the decoder's last layer is ever tuned. A [`ParamLayout`]
//! names which entries of `(C, b)` are free; the packed vector `θ`
//! contains exactly those entries, so structured decoders (a pair of
//! wind coefficients, a bias-only predictor) share one update path.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mpc::PredictionWindow;

/// One contextual observation attached to a step window `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRecord {
    pub start: usize,
    /// Exclusive end of the window the context applies to.
    pub end: usize,
    pub description: String,
    pub source: ContextSource,
    pub metadata: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    Human,
    Log,
    Scripted,
}

impl ContextRecord {
    /// The "no context" record for step `tau`.
    pub fn empty(tau: usize) -> Self {
        Self {
            start: tau,
            end: tau + 1,
            description: String::new(),
            source: ContextSource::Scripted,
            metadata: BTreeMap::new(),
        }
    }

    pub fn covers(&self, tau: usize) -> bool {
        self.start <= tau && tau < self.end
    }
}

/// Numeric embedding plus per-entry provenance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: DVector<f64>,
    pub provenance: Vec<String>,
}

impl Embedding {
    pub fn zero(dim: usize) -> Self {
        Self {
            values: DVector::zeros(dim),
            provenance: vec!["zero".to_string(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Probability-weighted sum of discrete level values, one entry per
/// feature: `entry_i = Σ_j prob_ij · value_ij`.
pub fn encode_categorical(level_probs: &[Vec<f64>], level_values: &[Vec<f64>]) -> Result<Embedding> {
    if level_probs.len() != level_values.len() {
        return Err(Error::Dimension {
            context: "encode_categorical",
            expected: format!("{} feature value sets", level_probs.len()),
            found: format!("{}", level_values.len()),
        });
    }
    let mut values = Vec::with_capacity(level_probs.len());
    let mut provenance = Vec::with_capacity(level_probs.len());
    for (i, (probs, vals)) in level_probs.iter().zip(level_values).enumerate() {
        if probs.len() != vals.len() {
            return Err(Error::Dimension {
                context: "encode_categorical feature",
                expected: format!("{} levels", vals.len()),
                found: format!("{} probabilities", probs.len()),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidProbability(format!(
                "feature {i}: probabilities sum to {sum}"
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProbability(format!(
                "feature {i}: non-finite level value"
            )));
        }
        values.push(probs.iter().zip(vals).map(|(p, v)| p * v).sum());
        provenance.push(format!("categorical:{i}"));
    }
    Ok(Embedding {
        values: DVector::from_vec(values),
        provenance,
    })
}

/// A free parameter slot inside `(C, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    /// Entry `C[row, col]`.
    C(usize, usize),
    /// Entry `b[row]`.
    B(usize),
}

/// Mapping between the packed parameter vector `θ` and the affine
/// decoder pair `(C, b)`. Entries not named by a slot are pinned to
/// zero and never move.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    n: usize,
    p: usize,
    slots: Vec<ParamSlot>,
}

impl ParamLayout {
    /// Every entry free: `C` row-major, then `b`.
    pub fn full(n: usize, p: usize) -> Self {
        let mut slots = Vec::with_capacity(n * p + n);
        for row in 0..n {
            for col in 0..p {
                slots.push(ParamSlot::C(row, col));
            }
        }
        for row in 0..n {
            slots.push(ParamSlot::B(row));
        }
        Self { n, p, slots }
    }

    /// Bias entries first, then `C` row-major. Matches predictors
    /// written as `ŵ = θ₀ + Σ_i θ_i d_i`.
    pub fn bias_first(n: usize, p: usize) -> Self {
        let mut slots = Vec::with_capacity(n * p + n);
        for row in 0..n {
            slots.push(ParamSlot::B(row));
        }
        for row in 0..n {
            for col in 0..p {
                slots.push(ParamSlot::C(row, col));
            }
        }
        Self { n, p, slots }
    }

    /// Hand-picked free entries; everything else pinned to zero.
    pub fn sparse(n: usize, p: usize, slots: Vec<ParamSlot>) -> Result<Self> {
        for slot in &slots {
            let ok = match *slot {
                ParamSlot::C(r, c) => r < n && c < p,
                ParamSlot::B(r) => r < n,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "parameter slot {slot:?} outside a {n}x{p} decoder"
                )));
            }
        }
        Ok(Self { n, p, slots })
    }

    pub fn output_dim(&self) -> usize {
        self.n
    }

    pub fn embedding_dim(&self) -> usize {
        self.p
    }

    /// Packed parameter count.
    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn pack(&self, c: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|slot| match *slot {
                ParamSlot::C(r, cidx) => c[(r, cidx)],
                ParamSlot::B(r) => b[r],
            }),
        )
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let mut c = DMatrix::zeros(self.n, self.p);
        let mut b = DVector::zeros(self.n);
        for (j, slot) in self.slots.iter().enumerate() {
            match *slot {
                ParamSlot::C(r, cidx) => c[(r, cidx)] = theta[j],
                ParamSlot::B(r) => b[r] = theta[j],
            }
        }
        (c, b)
    }

    /// Jacobian of `g_θ(d)` with respect to packed `θ` (n × dim).
    pub fn jacobian(&self, d: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n, self.slots.len());
        for (col, slot) in self.slots.iter().enumerate() {
            match *slot {
                ParamSlot::C(r, cidx) => j[(r, col)] = d[cidx],
                ParamSlot::B(r) => j[(r, col)] = 1.0,
            }
        }
        j
    }
}

/// The tunable last layer: packed `θ` plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    layout: ParamLayout,
    theta: DVector<f64>,
}

impl DecoderParams {
    pub fn new(layout: ParamLayout, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != layout.dim() {
            return Err(Error::Dimension {
                context: "DecoderParams",
                expected: format!("{} packed parameters", layout.dim()),
                found: format!("{}", theta.len()),
            });
        }
        Ok(Self { layout, theta })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let theta = DVector::zeros(layout.dim());
        Self { layout, theta }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: DVector<f64>) -> Result<()> {
        if theta.len() != self.layout.dim() {
            return Err(Error::Dimension {
                context: "DecoderParams::set_theta",
                expected: format!("{}", self.layout.dim()),
                found: format!("{}", theta.len()),
            });
        }
        self.theta = theta;
        Ok(())
    }

    pub fn c_matrix(&self) -> DMatrix<f64> {
        self.layout.unpack(&self.theta).0
    }

    pub fn b_vector(&self) -> DVector<f64> {
        self.layout.unpack(&self.theta).1
    }

    /// `ŵ = C d + b`.
    pub fn decode(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        if d.len() != self.layout.p {
            return Err(Error::Dimension {
                context: "decode",
                expected: format!("embedding of length {}", self.layout.p),
                found: format!("{}", d.len()),
            });
        }
        let mut out = DVector::zeros(self.layout.n);
        for (j, slot) in self.layout.slots.iter().enumerate() {
            match *slot {
                ParamSlot::C(r, cidx) => out[r] += self.theta[j] * d[cidx],
                ParamSlot::B(r) => out[r] += self.theta[j],
            }
        }
        Ok(out)
    }
}

/// Euclidean ball the packed parameters live in.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl HypothesisSet {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidRadius(radius));
        }
        Ok(Self { center, radius })
    }

    pub fn centered_at_zero(dim: usize, radius: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), radius)
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        (theta - &self.center).norm() <= self.radius + 1e-12
    }
}

/// Euclidean projection onto the hypothesis ball.
pub fn project(theta: &DVector<f64>, set: &HypothesisSet) -> DVector<f64> {
    let offset = theta - &set.center;
    let norm = offset.norm();
    if norm <= set.radius {
        theta.clone()
    } else {
        &set.center + offset * (set.radius / norm)
    }
}

/// Frozen context-to-embedding map. Implementations must be pure; a
/// failing encode degrades to the zero embedding at the call site.
pub trait Encoder: Send + Sync {
    fn encode(&self, ctx: &ContextRecord) -> Result<Embedding>;
    fn dim(&self) -> usize;
}

/// Decoder output for one step window plus the embeddings that
/// produced it (kept for the delayed tuner and post-run analysis).
#[derive(Debug, Clone)]
pub struct WindowPrediction {
    pub window: PredictionWindow,
    pub embeddings: Vec<DVector<f64>>,
}

/// Run the encoder and decoder over the contexts for `τ ∈ {t, ..., 𝒯}`,
/// add the known feedforward `base_τ` when present, and clip each
/// prediction to the W-ball. A failing encode for some `τ` degrades to
/// the zero embedding with a warning instead of aborting the loop.
pub fn predict_window(
    encoder: &dyn Encoder,
    params: &DecoderParams,
    contexts: &[ContextRecord],
    bases: Option<&[DVector<f64>]>,
    t: usize,
    w_bound: f64,
) -> Result<WindowPrediction> {
    if let Some(b) = bases {
        if b.len() != contexts.len() {
            return Err(Error::Dimension {
                context: "predict_window bases",
                expected: format!("{}", contexts.len()),
                found: format!("{}", b.len()),
            });
        }
    }
    let mut raw = Vec::with_capacity(contexts.len());
    let mut embeddings = Vec::with_capacity(contexts.len());
    for (i, ctx) in contexts.iter().enumerate() {
        let embedding = match encoder.encode(ctx) {
            Ok(e) => e,
            Err(err) => {
                log::warn!(
                    "encoder failed for step {} ({err}); using zero embedding",
                    t + i
                );
                Embedding::zero(encoder.dim())
            }
        };
        let mut pred = params.decode(&embedding.values)?;
        if let Some(b) = bases {
            pred += &b[i];
        }
        embeddings.push(embedding.values.clone());
        raw.push(pred);
    }
    let window = PredictionWindow::new(t, raw, w_bound)?;
    Ok(WindowPrediction { window, embeddings })
}

/// Table-driven encoder: a columnar text fixture mapping
/// `(channel, step window)` to per-level probabilities.
///
/// File format, one row per channel and window, `#` starts a comment:
///
/// ```text
/// # channel  start  end  p0 p1 p2 p3
/// cpu-ws1    0      30   0.0 1.0 0.0 0.0
/// ```
///
/// `start`/`end` are step indices (end exclusive). The embedding entry
/// for a channel at step `τ` is the probability-weighted sum of the
/// level values for the row covering `τ`; no covering row means level
/// 0 with probability one.
#[derive(Debug, Clone)]
pub struct ScriptedTableEncoder {
    channels: Vec<String>,
    level_values: Vec<f64>,
    rows: Vec<ScriptedRow>,
}

#[derive(Debug, Clone)]
struct ScriptedRow {
    channel: usize,
    start: usize,
    end: usize,
    probs: Vec<f64>,
}

impl ScriptedTableEncoder {
    pub fn from_str(
        table: &str,
        channels: Vec<String>,
        level_values: Vec<f64>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in table.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 + level_values.len() {
                return Err(Error::Config(format!(
                    "scripted table line {}: expected {} fields, found {}",
                    lineno + 1,
                    3 + level_values.len(),
                    fields.len()
                )));
            }
            let channel = channels
                .iter()
                .position(|c| c == fields[0])
                .ok_or_else(|| {
                    Error::Config(format!(
                        "scripted table line {}: unknown channel {}",
                        lineno + 1,
                        fields[0]
                    ))
                })?;
            let parse_usize = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Config(format!("scripted table line {}: {e}", lineno + 1)))
            };
            let start = parse_usize(fields[1])?;
            let end = parse_usize(fields[2])?;
            let probs = fields[3..]
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        Error::Config(format!("scripted table line {}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(ScriptedRow {
                channel,
                start,
                end,
                probs,
            });
        }
        Ok(Self {
            channels,
            level_values,
            rows,
        })
    }

    pub fn from_file(
        path: &std::path::Path,
        channels: Vec<String>,
        level_values: Vec<f64>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text, channels, level_values)
    }
}

impl Encoder for ScriptedTableEncoder {
    fn encode(&self, ctx: &ContextRecord) -> Result<Embedding> {
        let tau = ctx.start;
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(self.channels.len());
        for channel in 0..self.channels.len() {
            let row = self
                .rows
                .iter()
                .find(|r| r.channel == channel && r.start <= tau && tau < r.end);
            match row {
                Some(r) => probs.push(r.probs.clone()),
                None => {
                    // No context: level 0 with probability one.
                    let mut p = vec![0.0; self.level_values.len()];
                    p[0] = 1.0;
                    probs.push(p);
                }
            }
        }
        let values: Vec<Vec<f64>> = vec![self.level_values.clone(); self.channels.len()];
        let mut emb = encode_categorical(&probs, &values)?;
        emb.provenance = self
            .channels
            .iter()
            .map(|c| format!("categorical:{c}"))
            .collect();
        Ok(emb)
    }

    fn dim(&self) -> usize {
        self.channels.len()
    }
}

/// Encoder for context-free predictors: a zero-length embedding, so
/// the decoder reduces to its bias.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullEncoder;

impl Encoder for NullEncoder {
    fn encode(&self, _ctx: &ContextRecord) -> Result<Embedding> {
        Ok(Embedding::zero(0))
    }
    fn dim(&self) -> usize {
        0
    }
}

/// Metadata-driven encoder: reads the named numeric keys out of the
/// context record in a fixed order; a missing key contributes zero.
#[derive(Debug, Clone)]
pub struct MetadataEncoder {
    keys: Vec<String>,
    scales: Vec<f64>,
}

impl MetadataEncoder {
    pub fn new(keys: Vec<String>, scales: Vec<f64>) -> Result<Self> {
        if keys.len() != scales.len() {
            return Err(Error::Dimension {
                context: "MetadataEncoder",
                expected: format!("{} scales", keys.len()),
                found: format!("{}", scales.len()),
            });
        }
        Ok(Self { keys, scales })
    }
}

impl Encoder for MetadataEncoder {
    fn encode(&self, ctx: &ContextRecord) -> Result<Embedding> {
        let values = DVector::from_iterator(
            self.keys.len(),
            self.keys
                .iter()
                .zip(&self.scales)
                .map(|(k, s)| ctx.metadata.get(k).copied().unwrap_or(0.0) / s),
        );
        Ok(Embedding {
            values,
            provenance: self.keys.iter().map(|k| format!("raw:{k}")).collect(),
        })
    }

    fn dim(&self) -> usize {
        self.keys.len()
    }
}
