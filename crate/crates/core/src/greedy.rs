//! Mixed-precision allocation of codebook counts across layers as a
//! multiple-choice knapsack: pick one option per layer, minimise the summed
//! output error subject to a total size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aq::{calibrate_layer, calibrate_layer_warm, CalibConfig, Gram, QuantizedLayer};
use crate::error::{Error, Result};
use crate::nn::ToyUNet;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `delta[i][j]` and `size_bits[i][j]` describe layer `i` quantized with
/// `ms[j]` codebooks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub layers: Vec<String>,
    pub ms: Vec<usize>,
    pub delta: Vec<Vec<f64>>,
    pub size_bits: Vec<Vec<u64>>,
    pub full_bits: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Chosen codebook count per layer.
    pub m: Vec<usize>,
    pub total_bits: u64,
    pub total_cost: f64,
}

impl SensitivityTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.layers.len();
        if self.delta.len() != n || self.size_bits.len() != n || self.full_bits.len() != n {
            return Err(Error::Validation("table columns disagree in length".into()));
        }
        if self.ms.is_empty() {
            return Err(Error::Validation("no options".into()));
        }
        for i in 0..n {
            if self.delta[i].len() != self.ms.len() || self.size_bits[i].len() != self.ms.len() {
                return Err(Error::Validation(format!(
                    "layer {} has a ragged row",
                    self.layers[i]
                )));
            }
            if self.size_bits[i].windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Validation(format!(
                    "sizes of {} not increasing",
                    self.layers[i]
                )));
            }
            if self.delta[i].iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
                return Err(Error::Validation(format!(
                    "invalid delta for {}",
                    self.layers[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn min_bits(&self) -> u64 {
        self.size_bits.iter().map(|r| r[0]).sum()
    }

    /// Total size with option `j` everywhere.
    pub fn uniform_bits(&self, j: usize) -> u64 {
        self.size_bits.iter().map(|r| r[j]).sum()
    }

    fn allocation(&self, level: &[usize]) -> Allocation {
        Allocation {
            m: level.iter().map(|&j| self.ms[j]).collect(),
            total_bits: self.bits(level),
            total_cost: self.cost(level),
        }
    }

    fn bits(&self, level: &[usize]) -> u64 {
        level
            .iter()
            .enumerate()
            .map(|(i, &j)| self.size_bits[i][j])
            .sum()
    }

    fn cost(&self, level: &[usize]) -> f64 {
        level
            .iter()
            .enumerate()
            .map(|(i, &j)| self.delta[i][j])
            .sum()
    }

    /// Option indices of an allocation.
    pub fn levels(&self, a: &Allocation) -> Result<Vec<usize>> {
        a.m.iter()
            .map(|m| {
                self.ms
                    .iter()
                    .position(|x| x == m)
                    .ok_or_else(|| Error::Validation(format!("M={m} not in table")))
            })
            .collect()
    }
}

fn check_budget(table: &SensitivityTable, budget_bits: u64) -> Result<()> {
    table.validate()?;
    let min_bits = table.min_bits();
    if budget_bits < min_bits {
        return Err(Error::Infeasible {
            min_bits,
            budget_bits,
        });
    }
    Ok(())
}

/// Ratio greedy: from the smallest option everywhere, repeatedly take the
/// upgrade (to any larger option of one layer) with the largest error
/// reduction per added bit that still fits (lowest layer, then smallest
/// option on ties), while any upgrade reduces the error. A local search then applies the best strictly improving change of
/// one or two layers until none remains.
pub fn greedy_solve(table: &SensitivityTable, budget_bits: u64) -> Result<Allocation> {
    check_budget(table, budget_bits)?;
    let n = table.len();
    let top = table.ms.len() - 1;
    let mut level = vec![0usize; n];
    let mut bits = table.bits(&level);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let j = level[i];
            for to in j + 1..=top {
                let add = table.size_bits[i][to] - table.size_bits[i][j];
                if bits + add > budget_bits {
                    break;
                }
                let gain = table.delta[i][j] - table.delta[i][to];
                let ratio = gain / add as f64;
                if gain > 0.0 && best.is_none_or(|(r, _, _)| ratio > r) {
                    best = Some((ratio, i, to));
                }
            }
        }
        match best {
            Some((_, i, to)) => {
                bits += table.size_bits[i][to] - table.size_bits[i][level[i]];
                level[i] = to;
            }
            None => break,
        }
    }
    while let Some(next) = best_local_move(table, &level, budget_bits) {
        level = next;
    }
    Ok(table.allocation(&level))
}

fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-12 * old.abs().max(1e-300)
}

/// Best budget-respecting allocation reachable by changing the option of one
/// layer or of two layers, if it strictly lowers the error.
fn best_local_move(table: &SensitivityTable, level: &[usize], budget: u64) -> Option<Vec<usize>> {
    let n = table.len();
    let k = table.ms.len();
    let bits = table.bits(level);
    let cost = table.cost(level);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |cand: Vec<usize>, b: u64, c: f64| {
        if b <= budget && improves(c, cost) && best.as_ref().is_none_or(|(bc, _)| improves(c, *bc))
        {
            best = Some((c, cand));
        }
    };
    for a in 0..n {
        for ja in 0..k {
            if ja == level[a] {
                continue;
            }
            let b_a = bits - table.size_bits[a][level[a]] + table.size_bits[a][ja];
            let c_a = cost - table.delta[a][level[a]] + table.delta[a][ja];
            let mut cand = level.to_vec();
            cand[a] = ja;
            consider(cand.clone(), b_a, c_a);
            for b in a + 1..n {
                for jb in 0..k {
                    if jb == level[b] {
                        continue;
                    }
                    let mut c2 = cand.clone();
                    c2[b] = jb;
                    consider(
                        c2,
                        b_a - table.size_bits[b][level[b]] + table.size_bits[b][jb],
                        c_a - table.delta[b][level[b]] + table.delta[b][jb],
                    );
                }
            }
        }
    }
    best.map(|(_, l)| l)
}

pub const DP_MAX_LAYERS: usize = 8;
pub const DP_MAX_STATES: usize = 50_000_000;

/// Exact minimum-error allocation by dynamic programming over
/// `(layer, used capacity)`. Sizes are rounded up and the budget down to
/// multiples of `granularity`, which is exact when it divides every size.
pub fn dp_solve(
    table: &SensitivityTable,
    budget_bits: u64,
    granularity: u64,
) -> Result<Allocation> {
    check_budget(table, budget_bits)?;
    let n = table.len();
    if n > DP_MAX_LAYERS {
        return Err(Error::Size(format!(
            "{n} layers, exact solver handles at most {DP_MAX_LAYERS}"
        )));
    }
    if granularity == 0 {
        return Err(Error::Validation("granularity must be positive".into()));
    }
    let cap = (budget_bits / granularity) as usize;
    if (cap + 1).saturating_mul(n.max(1)) > DP_MAX_STATES {
        return Err(Error::Size(format!(
            "{} states exceed the cap of {DP_MAX_STATES}",
            (cap + 1).saturating_mul(n)
        )));
    }
    let k = table.ms.len();
    let w = |i: usize, j: usize| table.size_bits[i][j].div_ceil(granularity) as usize;
    let mut dp = vec![f64::INFINITY; cap + 1];
    dp[0] = 0.0;
    let mut choice = vec![vec![u8::MAX; cap + 1]; n];
    for i in 0..n {
        let mut next = vec![f64::INFINITY; cap + 1];
        for c in 0..=cap {
            for j in 0..k {
                let wj = w(i, j);
                if wj > c || !dp[c - wj].is_finite() {
                    continue;
                }
                let v = dp[c - wj] + table.delta[i][j];
                if v < next[c] {
                    next[c] = v;
                    choice[i][c] = j as u8;
                }
            }
        }
        dp = next;
    }
    // Lowest capacity among the optimal end states.
    let mut end = None;
    for (c, &v) in dp.iter().enumerate() {
        if v.is_finite() && end.is_none_or(|(bv, _)| v < bv) {
            end = Some((v, c));
        }
    }
    let (_, mut c) = end.ok_or(Error::Infeasible {
        min_bits: table.min_bits(),
        budget_bits,
    })?;
    let mut level = vec![0; n];
    for i in (0..n).rev() {
        let j = choice[i][c] as usize;
        level[i] = j;
        c -= w(i, j);
    }
    Ok(table.allocation(&level))
}

/// Layer `layers[i]` calibrated with 1..=`m_max` codebooks, each count warm
/// started from the previous one.
pub fn calibrate_ladder(
    model: &ToyUNet,
    grams: &[Gram],
    layers: &[usize],
    m_max: usize,
    cfg: &CalibConfig,
    seed: u64,
) -> Result<Vec<Vec<QuantizedLayer>>> {
    let root = SeededRng::new(seed);
    layers
        .par_iter()
        .zip(grams.par_iter())
        .map(|(&l, gram)| {
            let spec = &model.specs()[l];
            let w = model.weight(l);
            let mut rng = root.derive(l as u64);
            let mut out = vec![calibrate_layer(
                &spec.id, spec.kind, w, gram, 1, cfg, &mut rng,
            )?];
            for _ in 1..m_max {
                let next = calibrate_layer_warm(w, gram, out.last().unwrap(), cfg, &mut rng)?;
                out.push(next);
            }
            Ok(out)
        })
        .collect()
}

/// Mean output MSE against the unmodified model over `probe`.
pub fn output_mse(
    reference: &[Tensor],
    model: &ToyUNet,
    probe: &[(Tensor, usize, Option<usize>)],
) -> Result<f64> {
    let errs = probe
        .par_iter()
        .zip(reference.par_iter())
        .map(|((x, t, c), r)| model.forward(x, *t, *c)?.0.mse(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Sensitivity of each layer in `layers` (quantized alone, everything else
/// at full precision) for every ladder entry.
pub fn build_table(
    model: &ToyUNet,
    layers: &[usize],
    ladders: &[Vec<QuantizedLayer>],
    probe: &[(Tensor, usize, Option<usize>)],
) -> Result<SensitivityTable> {
    if probe.is_empty() {
        return Err(Error::Validation("empty probe batch".into()));
    }
    let reference = probe
        .par_iter()
        .map(|(x, t, c)| Ok(model.forward(x, *t, *c)?.0))
        .collect::<Result<Vec<_>>>()?;
    let mut delta = Vec::with_capacity(layers.len());
    for (&l, ladder) in layers.iter().zip(ladders) {
        let mut row = Vec::with_capacity(ladder.len());
        for q in ladder {
            let mut m = model.clone();
            m.set_weight(l, q.reconstruct())?;
            row.push(output_mse(&reference, &m, probe)?);
        }
        delta.push(row);
    }
    let table = SensitivityTable {
        layers: layers
            .iter()
            .map(|&l| model.specs()[l].id.clone())
            .collect(),
        ms: ladders
            .first()
            .map_or(vec![], |r| r.iter().map(QuantizedLayer::m).collect()),
        delta,
        size_bits: ladders
            .iter()
            .map(|r| r.iter().map(QuantizedLayer::bits_total).collect())
            .collect(),
        full_bits: layers
            .iter()
            .map(|&l| model.specs()[l].weight_count() as u64 * 32)
            .collect(),
    };
    table.validate()?;
    Ok(table)
}
