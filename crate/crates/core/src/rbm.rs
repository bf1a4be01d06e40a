//! Binary restricted Boltzmann machine: energy, tempered conditionals,
//! Gibbs transitions, sufficient statistics and exact evaluation by
//! enumeration of the smaller layer.
//!
//! Units take values in {0, 1}. The energy is
//! `E(v, h) = -h'Wv - b'h - c'v` with `W` stored row-major as
//! `num_hidden x num_visible`. A tempered copy of the model at inverse
//! temperature `beta` has density proportional to `exp(-beta * E)`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Default cap on the size of the enumerated layer for exact computations.
pub const DEFAULT_EXACT_CAP: usize = 25;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// RBM parameters `{W, b, c}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    pub num_visible: usize,
    pub num_hidden: usize,
    /// Row-major `num_hidden x num_visible`.
    pub weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub visible_bias: Vec<f64>,
}

/// Joint configuration `x = (v, h)`, entries in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointState {
    pub visible: Vec<u8>,
    pub hidden: Vec<u8>,
}

/// Values of the sufficient statistics `phi(v, h) = (h v', h, v)`, or
/// gradients with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub num_visible: usize,
    pub num_hidden: usize,
    pub weight_stats: Vec<f64>,
    pub hidden_stats: Vec<f64>,
    pub visible_stats: Vec<f64>,
}

/// Layer whose configurations are enumerated explicitly in exact sums.
/// The other layer is summed out analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Visible,
    Hidden,
}

impl RbmParams {
    pub fn zeros(num_visible: usize, num_hidden: usize) -> Self {
        Self {
            num_visible,
            num_hidden,
            weights: vec![0.0; num_visible * num_hidden],
            hidden_bias: vec![0.0; num_hidden],
            visible_bias: vec![0.0; num_visible],
        }
    }

    pub fn new(
        num_visible: usize,
        num_hidden: usize,
        weights: Vec<f64>,
        hidden_bias: Vec<f64>,
        visible_bias: Vec<f64>,
    ) -> Result<Self> {
        let params = Self {
            num_visible,
            num_hidden,
            weights,
            hidden_bias,
            visible_bias,
        };
        params.validate()?;
        Ok(params)
    }

    /// Small symmetric initialization: weights uniform in
    /// `[-1/sqrt(nv*nh), 1/sqrt(nv*nh)]`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(num_visible: usize, num_hidden: usize, rng: &mut R) -> Self {
        let scale = 1.0 / ((num_visible * num_hidden).max(1) as f64).sqrt();
        let weights = (0..num_visible * num_hidden)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self {
            weights,
            ..Self::zeros(num_visible, num_hidden)
        }
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        check_len("weights", self.num_hidden * self.num_visible, self.weights.len())?;
        check_len("hidden_bias", self.num_hidden, self.hidden_bias.len())?;
        check_len("visible_bias", self.num_visible, self.visible_bias.len())?;
        if !self.all_finite() {
            return Err(Error::InvalidInput("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(f64::is_finite)
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.iter_values().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// All parameters in snapshot order: weights, hidden bias, visible bias.
    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .chain(&self.hidden_bias)
            .chain(&self.visible_bias)
            .copied()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.hidden_bias.len() + self.visible_bias.len()
    }

    /// Mutable access to parameter `k` in snapshot order.
    pub fn value_mut(&mut self, k: usize) -> &mut f64 {
        let nw = self.weights.len();
        let nh = self.hidden_bias.len();
        if k < nw {
            &mut self.weights[k]
        } else if k < nw + nh {
            &mut self.hidden_bias[k - nw]
        } else {
            &mut self.visible_bias[k - nw - nh]
        }
    }

    #[inline]
    pub fn weight_row(&self, hidden: usize) -> &[f64] {
        let nv = self.num_visible;
        &self.weights[hidden * nv..(hidden + 1) * nv]
    }

    /// `params += step * stats`.
    pub fn add_scaled(&mut self, stats: &GradStats, step: f64) -> Result<()> {
        self.check_stats(stats)?;
        for (w, g) in self.weights.iter_mut().zip(&stats.weight_stats) {
            *w += step * g;
        }
        for (b, g) in self.hidden_bias.iter_mut().zip(&stats.hidden_stats) {
            *b += step * g;
        }
        for (c, g) in self.visible_bias.iter_mut().zip(&stats.visible_stats) {
            *c += step * g;
        }
        Ok(())
    }

    fn check_stats(&self, stats: &GradStats) -> Result<()> {
        check_len("weight_stats", self.weights.len(), stats.weight_stats.len())?;
        check_len("hidden_stats", self.num_hidden, stats.hidden_stats.len())?;
        check_len("visible_stats", self.num_visible, stats.visible_stats.len())
    }

    /// Permutes hidden units: new unit `i` is old unit `perm[i]`.
    pub fn permute_hidden(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.weights[i * self.num_visible..(i + 1) * self.num_visible]
                .copy_from_slice(self.weight_row(p));
            out.hidden_bias[i] = self.hidden_bias[p];
        }
        out
    }

    /// Binary snapshot: `num_visible`, `num_hidden` as little-endian u64,
    /// then weights (row-major), hidden bias and visible bias as
    /// little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.num_visible as u64).to_le_bytes())?;
        out.write_all(&(self.num_hidden as u64).to_le_bytes())?;
        for x in self.iter_values() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let nv = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let nh = u64::from_le_bytes(word) as usize;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    input.read_exact(&mut word)?;
                    Ok(f64::from_le_bytes(word))
                })
                .collect()
        };
        let weights = read_vec(nv * nh)?;
        let hidden_bias = read_vec(nh)?;
        let visible_bias = read_vec(nv)?;
        Self::new(nv, nh, weights, hidden_bias, visible_bias)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }
}

impl GradStats {
    pub fn zeros(num_visible: usize, num_hidden: usize) -> Self {
        Self {
            num_visible,
            num_hidden,
            weight_stats: vec![0.0; num_visible * num_hidden],
            hidden_stats: vec![0.0; num_hidden],
            visible_stats: vec![0.0; num_visible],
        }
    }

    /// `self += scale * phi(visible, hidden)` without allocating.
    pub fn accumulate(&mut self, visible: &[u8], hidden: &[f64], scale: f64) {
        let nv = self.num_visible;
        for (i, &h) in hidden.iter().enumerate() {
            let row = &mut self.weight_stats[i * nv..(i + 1) * nv];
            let sh = scale * h;
            for (w, &v) in row.iter_mut().zip(visible) {
                if v != 0 {
                    *w += sh;
                }
            }
            self.hidden_stats[i] += sh;
        }
        for (c, &v) in self.visible_stats.iter_mut().zip(visible) {
            if v != 0 {
                *c += scale;
            }
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &GradStats) -> GradStats {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        GradStats {
            num_visible: self.num_visible,
            num_hidden: self.num_hidden,
            weight_stats: diff(&self.weight_stats, &other.weight_stats),
            hidden_stats: diff(&self.hidden_stats, &other.hidden_stats),
            visible_stats: diff(&self.visible_stats, &other.visible_stats),
        }
    }

    /// Flattened in parameter snapshot order.
    pub fn values(&self) -> Vec<f64> {
        self.weight_stats
            .iter()
            .chain(&self.hidden_stats)
            .chain(&self.visible_stats)
            .copied()
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|x| x.is_finite())
    }
}

impl JointState {
    pub fn zeros(num_visible: usize, num_hidden: usize) -> Self {
        Self {
            visible: vec![0; num_visible],
            hidden: vec![0; num_hidden],
        }
    }

    /// Uniformly random configuration.
    pub fn random<R: Rng + ?Sized>(num_visible: usize, num_hidden: usize, rng: &mut R) -> Self {
        Self {
            visible: (0..num_visible).map(|_| rng.gen_range(0..=1)).collect(),
            hidden: (0..num_hidden).map(|_| rng.gen_range(0..=1)).collect(),
        }
    }

    /// Packs `(v, h)` into an integer index, visible bits first (LSB).
    /// Only meaningful for small models.
    pub fn index(&self) -> usize {
        self.visible
            .iter()
            .chain(&self.hidden)
            .enumerate()
            .fold(0, |acc, (k, &b)| acc | ((b as usize) << k))
    }

    pub fn from_index(index: usize, num_visible: usize, num_hidden: usize) -> Self {
        let bit = |k: usize| ((index >> k) & 1) as u8;
        Self {
            visible: (0..num_visible).map(bit).collect(),
            hidden: (num_visible..num_visible + num_hidden).map(bit).collect(),
        }
    }
}

fn check_state(params: &RbmParams, state: &JointState) -> Result<()> {
    check_len("visible state", params.num_visible, state.visible.len())?;
    check_len("hidden state", params.num_hidden, state.hidden.len())
}

/// `E(v, h) = -(h'Wv + b'h + c'v)`.
pub fn energy(params: &RbmParams, state: &JointState) -> Result<f64> {
    check_state(params, state)?;
    Ok(energy_unchecked(params, state))
}

pub(crate) fn energy_unchecked(params: &RbmParams, state: &JointState) -> f64 {
    let mut total = 0.0;
    for (i, &h) in state.hidden.iter().enumerate() {
        if h != 0 {
            total += params.hidden_bias[i] + dot_binary(params.weight_row(i), &state.visible);
        }
    }
    total += dot_binary(&params.visible_bias, &state.visible);
    -total
}

#[inline]
fn dot_binary(weights: &[f64], bits: &[u8]) -> f64 {
    weights
        .iter()
        .zip(bits)
        .filter(|(_, &b)| b != 0)
        .map(|(w, _)| w)
        .sum()
}

/// `b_i + (W v)_i` for every hidden unit.
pub fn hidden_activation(params: &RbmParams, visible: &[u8]) -> Vec<f64> {
    (0..params.num_hidden)
        .map(|i| params.hidden_bias[i] + dot_binary(params.weight_row(i), visible))
        .collect()
}

/// `c_j + (W' h)_j` for every visible unit.
pub fn visible_activation(params: &RbmParams, hidden: &[u8]) -> Vec<f64> {
    let mut act = params.visible_bias.clone();
    for (i, &h) in hidden.iter().enumerate() {
        if h != 0 {
            for (a, w) in act.iter_mut().zip(params.weight_row(i)) {
                *a += w;
            }
        }
    }
    act
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("inverse temperature {beta} outside [0, 1]")))
    }
}

/// `p_beta(h_i = 1 | v) = sigmoid(beta * (b_i + (W v)_i))`.
pub fn hidden_conditional(params: &RbmParams, visible: &[u8], beta: f64) -> Result<Vec<f64>> {
    check_len("visible", params.num_visible, visible.len())?;
    check_beta(beta)?;
    Ok(hidden_activation(params, visible)
        .into_iter()
        .map(|a| sigmoid(beta * a))
        .collect())
}

/// `p_beta(v_j = 1 | h) = sigmoid(beta * (c_j + (W' h)_j))`.
pub fn visible_conditional(params: &RbmParams, hidden: &[u8], beta: f64) -> Result<Vec<f64>> {
    check_len("hidden", params.num_hidden, hidden.len())?;
    check_beta(beta)?;
    Ok(visible_activation(params, hidden)
        .into_iter()
        .map(|a| sigmoid(beta * a))
        .collect())
}

/// One alternating Gibbs transition at inverse temperature `beta`:
/// `h ~ p_beta(h | v)` followed by `v ~ p_beta(v | h)`, in place.
pub fn gibbs_step<R: Rng + ?Sized>(params: &RbmParams, state: &mut JointState, beta: f64, rng: &mut R) {
    for i in 0..params.num_hidden {
        let a = params.hidden_bias[i] + dot_binary(params.weight_row(i), &state.visible);
        state.hidden[i] = (rng.gen::<f64>() < sigmoid(beta * a)) as u8;
    }
    let act = visible_activation(params, &state.hidden);
    for (v, a) in state.visible.iter_mut().zip(act) {
        *v = (rng.gen::<f64>() < sigmoid(beta * a)) as u8;
    }
}

/// `phi(v, h~) = (h~ v', h~, v)` for a binary visible vector and mean-field
/// hidden activations.
pub fn sufficient_stats(visible: &[u8], hidden_probs: &[f64]) -> GradStats {
    let mut stats = GradStats::zeros(visible.len(), hidden_probs.len());
    stats.accumulate(visible, hidden_probs, 1.0);
    stats
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub(crate) fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub(crate) fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// `log Z(beta)`, enumerating the smaller layer (default cap 25 units).
pub fn exact_log_partition(params: &RbmParams, beta: f64) -> Result<f64> {
    let layer = if params.num_hidden <= params.num_visible {
        Layer::Hidden
    } else {
        Layer::Visible
    };
    log_partition_enumerating(params, beta, layer, DEFAULT_EXACT_CAP)
}

/// Coupling of the enumerated layer to the summed-out layer, laid out as
/// `enumerated x other`.
struct Enumeration {
    own_bias: Vec<f64>,
    other_bias: Vec<f64>,
    coupling: Vec<f64>,
}

impl Enumeration {
    fn new(params: &RbmParams, layer: Layer) -> Self {
        match layer {
            Layer::Hidden => Self {
                own_bias: params.hidden_bias.clone(),
                other_bias: params.visible_bias.clone(),
                coupling: params.weights.clone(),
            },
            Layer::Visible => {
                let (nv, nh) = (params.num_visible, params.num_hidden);
                let mut coupling = vec![0.0; nv * nh];
                for i in 0..nh {
                    for j in 0..nv {
                        coupling[j * nh + i] = params.weights[i * nv + j];
                    }
                }
                Self {
                    own_bias: params.visible_bias.clone(),
                    other_bias: params.hidden_bias.clone(),
                    coupling,
                }
            }
        }
    }

    fn size(&self) -> usize {
        self.own_bias.len()
    }

    fn row(&self, k: usize) -> &[f64] {
        let m = self.other_bias.len();
        &self.coupling[k * m..(k + 1) * m]
    }

    /// Recomputes `(own_bias . s, other_bias + coupling' s)` for bit pattern `s`.
    fn activations(&self, bits: u64, act: &mut [f64]) -> f64 {
        act.copy_from_slice(&self.other_bias);
        let mut own = 0.0;
        for k in 0..self.size() {
            if bits >> k & 1 == 1 {
                own += self.own_bias[k];
                for (a, w) in act.iter_mut().zip(self.row(k)) {
                    *a += w;
                }
            }
        }
        own
    }
}

/// `log Z(beta)` with an explicit choice of the enumerated layer. The sum
/// over the other layer is done analytically, so the cost is
/// `2^n * m` with `n` the enumerated layer size. Configurations are
/// visited in Gray-code order with incremental activation updates.
pub fn log_partition_enumerating(params: &RbmParams, beta: f64, layer: Layer, cap: usize) -> Result<f64> {
    params.validate()?;
    check_beta(beta)?;
    let enumeration = Enumeration::new(params, layer);
    let n = enumeration.size();
    if n > cap || n >= 63 {
        return Err(Error::Intractable { units: n, cap });
    }

    const RESYNC: u64 = 1 << 12;
    let term = |own: f64, act: &[f64]| beta * own + act.iter().map(|&a| softplus(beta * a)).sum::<f64>();

    let mut act = vec![0.0; enumeration.other_bias.len()];
    let mut own = enumeration.activations(0, &mut act);
    let mut lse = LogSumExp::new();
    lse.push(term(own, &act));
    let mut gray: u64 = 0;
    for t in 1..(1u64 << n) {
        let k = t.trailing_zeros() as usize;
        gray ^= 1 << k;
        if t % RESYNC == 0 {
            own = enumeration.activations(gray, &mut act);
        } else {
            let sign = if gray >> k & 1 == 1 { 1.0 } else { -1.0 };
            own += sign * enumeration.own_bias[k];
            for (a, w) in act.iter_mut().zip(enumeration.row(k)) {
                *a += sign * w;
            }
        }
        lse.push(term(own, &act));
    }
    Ok(lse.value())
}

/// `log sum_h exp(-beta E(v, h)) = beta c'v + sum_i softplus(beta (b_i + (Wv)_i))`.
pub fn log_unnormalized_visible(params: &RbmParams, visible: &[u8], beta: f64) -> f64 {
    beta * dot_binary(&params.visible_bias, visible)
        + (0..params.num_hidden)
            .map(|i| softplus(beta * (params.hidden_bias[i] + dot_binary(params.weight_row(i), visible))))
            .sum::<f64>()
}

/// Mean exact log-likelihood `log p(v)` over `data`.
pub fn exact_log_likelihood(params: &RbmParams, data: &[Vec<u8>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    for v in data {
        check_len("data example", params.num_visible, v.len())?;
    }
    let log_z = exact_log_partition(params, 1.0)?;
    let total: f64 = data.iter().map(|v| log_unnormalized_visible(params, v, 1.0)).sum();
    Ok(total / data.len() as f64 - log_z)
}

/// `E_{p(h|v)}[phi(v, h)] = phi(v, E[h | v])` at `beta = 1`.
pub fn positive_stats(params: &RbmParams, visible: &[u8]) -> GradStats {
    let probs: Vec<f64> = hidden_activation(params, visible).into_iter().map(sigmoid).collect();
    sufficient_stats(visible, &probs)
}

/// Exact model expectation `E_{p(v,h)}[phi(v, h)]` at `beta = 1`,
/// enumerating the smaller layer. Intended for small models.
pub fn exact_model_expectation(params: &RbmParams) -> Result<GradStats> {
    params.validate()?;
    let (nv, nh) = (params.num_visible, params.num_hidden);
    let layer = if nh <= nv { Layer::Hidden } else { Layer::Visible };
    let log_z = log_partition_enumerating(params, 1.0, layer, DEFAULT_EXACT_CAP)?;
    let n = match layer {
        Layer::Hidden => nh,
        Layer::Visible => nv,
    };
    let mut stats = GradStats::zeros(nv, nh);
    for bits in 0..(1usize << n) {
        let config: Vec<u8> = (0..n).map(|k| ((bits >> k) & 1) as u8).collect();
        match layer {
            Layer::Hidden => {
                let act = visible_activation(params, &config);
                let log_w = dot_binary(&params.hidden_bias, &config)
                    + act.iter().map(|&a| softplus(a)).sum::<f64>();
                let p = (log_w - log_z).exp();
                let mean_v: Vec<f64> = act.into_iter().map(sigmoid).collect();
                for (i, &h) in config.iter().enumerate() {
                    if h != 0 {
                        stats.hidden_stats[i] += p;
                        for (w, m) in stats.weight_stats[i * nv..(i + 1) * nv].iter_mut().zip(&mean_v) {
                            *w += p * m;
                        }
                    }
                }
                for (c, m) in stats.visible_stats.iter_mut().zip(&mean_v) {
                    *c += p * m;
                }
            }
            Layer::Visible => {
                let p = (log_unnormalized_visible(params, &config, 1.0) - log_z).exp();
                let mean_h: Vec<f64> = hidden_activation(params, &config).into_iter().map(sigmoid).collect();
                stats.accumulate(&config, &mean_h, p);
            }
        }
    }
    Ok(stats)
}

/// Exact gradient of the mean log-likelihood: data expectation of
/// `phi(v, E[h|v])` minus the model expectation of `phi`.
pub fn exact_log_likelihood_gradient(params: &RbmParams, data: &[Vec<u8>]) -> Result<GradStats> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut positive = GradStats::zeros(params.num_visible, params.num_hidden);
    let scale = 1.0 / data.len() as f64;
    for v in data {
        check_len("data example", params.num_visible, v.len())?;
        let probs: Vec<f64> = hidden_activation(params, v).into_iter().map(sigmoid).collect();
        positive.accumulate(v, &probs, scale);
    }
    Ok(positive.sub(&exact_model_expectation(params)?))
}
