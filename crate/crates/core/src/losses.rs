//! Training objective.
//!
//! Every pairwise term uses the RankNet orientation: when candidate `i` is
//! preferred over `j`, the term is `log(1 + exp(s_j - s_i))`, so a larger
//! margin in the right direction lowers the loss.
//!
//! - list loss: pairs from the permutation label, applied to list-view scores
//! - point loss: same pairs, applied to point-view scores
//! - calibration: pairs ordered by point-view scores (strictly), applied to
//!   list-view scores; point-view scores only select pairs and receive no
//!   gradient
//! - in-batch calibration: the calibration rule over all `M * Q` scores of
//!   the batch, intra-query pairs included
//! - adaptive gate: in-batch calibration counts only when the mean
//!   per-query population variance of point-view scores exceeds `tau`
//!
//! The final objective is the plain sum of the enabled components, summed
//! over queries without normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{softplus, Graph, Real, Tensor, Var};
use crate::model::ScoreBundle;
use crate::{Error, Result};

/// Ranks `r_i` of each candidate, a bijection onto `1..=M` (1 = best).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationLabel {
    ranks: Vec<usize>,
}

impl PermutationLabel {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let m = ranks.len();
        let mut seen = vec![false; m];
        for &r in &ranks {
            if r == 0 || r > m || seen[r - 1] {
                return Err(Error::NotPermutation(m));
            }
            seen[r - 1] = true;
        }
        Ok(Self { ranks })
    }

    /// Label from candidate indices listed best first.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let mut ranks = vec![0; order.len()];
        for (pos, &c) in order.iter().enumerate() {
            if c >= order.len() {
                return Err(Error::NotPermutation(order.len()));
            }
            ranks[c] = pos + 1;
        }
        Self::new(ranks)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// `(i, j)` for every pair with `i` ranked above `j`; `M(M-1)/2` pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let m = self.ranks.len();
        let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for i in 0..m {
            for j in 0..m {
                if self.ranks[i] < self.ranks[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// `(i, j)` for every pair with `ps_i > ps_j`; ties contribute nothing.
pub fn calibration_pairs(ps: &[Real]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in ps.iter().enumerate() {
        for (j, b) in ps.iter().enumerate() {
            if a > b {
                out.push((i, j));
            }
        }
    }
    out
}

/// Scores and labels for the queries of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    pub bundles: Vec<ScoreBundle>,
    pub labels: Vec<PermutationLabel>,
}

impl BatchScores {
    pub fn new(bundles: Vec<ScoreBundle>, labels: Vec<PermutationLabel>) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::Config("batch needs at least one query".into()));
        }
        if bundles.len() != labels.len() {
            return Err(Error::Length {
                what: "labels",
                expected: bundles.len(),
                got: labels.len(),
            });
        }
        let m = bundles[0].ls.len();
        for (b, l) in bundles.iter().zip(&labels) {
            for (what, got) in [("ls", b.ls.len()), ("ps", b.ps.len()), ("label", l.len())] {
                if got != m {
                    return Err(Error::Length { what, expected: m, got });
                }
            }
        }
        Ok(Self { bundles, labels })
    }

    pub fn num_queries(&self) -> usize {
        self.bundles.len()
    }
}

/// Loss-relevant training switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: Real,
    pub enable_point_loss: bool,
    pub enable_calibration: bool,
    pub enable_in_batch: bool,
    pub enable_adaptive: bool,
    /// Multiplier on the calibration term.
    pub calibration_weight: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            enable_point_loss: true,
            enable_calibration: true,
            enable_in_batch: true,
            enable_adaptive: true,
            calibration_weight: 1.0,
        }
    }
}

/// Component values of one evaluation of the final objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: Real,
    pub list: Real,
    pub point: Real,
    pub calibration: Real,
    pub variance: Real,
    /// `variance > tau`.
    pub gate_open: bool,
    /// Whether the calibration term contributed this step.
    pub calibration_active: bool,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Length { what, expected, got })
    }
}

fn pair_sum(scores: &[Real], pairs: &[(usize, usize)]) -> Real {
    pairs.iter().map(|&(i, j)| softplus(scores[j] - scores[i])).sum()
}

pub fn list_loss(ls: &[Real], label: &PermutationLabel) -> Result<Real> {
    check_len("ls", label.len(), ls.len())?;
    Ok(pair_sum(ls, &label.pairs()))
}

pub fn point_loss(ps: &[Real], label: &PermutationLabel) -> Result<Real> {
    check_len("ps", label.len(), ps.len())?;
    Ok(pair_sum(ps, &label.pairs()))
}

pub fn cal_loss(ls: &[Real], ps: &[Real]) -> Result<Real> {
    check_len("ps", ls.len(), ps.len())?;
    Ok(pair_sum(ls, &calibration_pairs(ps)))
}

fn flatten(batch: &BatchScores) -> (Vec<Real>, Vec<Real>) {
    let ls = batch.bundles.iter().flat_map(|b| b.ls.iter().copied()).collect();
    let ps = batch.bundles.iter().flat_map(|b| b.ps.iter().copied()).collect();
    (ls, ps)
}

pub fn cal_ib_loss(batch: &BatchScores) -> Result<Real> {
    let (ls, ps) = flatten(batch);
    cal_loss(&ls, &ps)
}

/// Mean over queries of the population variance of their point-view scores.
pub fn batch_variance(batch: &BatchScores) -> Real {
    let per_query: Vec<Vec<Real>> = batch.bundles.iter().map(|b| b.ps.clone()).collect();
    mean_variance(&per_query)
}

fn mean_variance(per_query: &[Vec<Real>]) -> Real {
    let q = per_query.len() as Real;
    per_query
        .iter()
        .map(|ps| {
            let n = ps.len() as Real;
            let mean = ps.iter().sum::<Real>() / n;
            ps.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n
        })
        .sum::<Real>()
        / q
}

pub fn cal_adaib_loss(batch: &BatchScores, tau: Real) -> Result<Real> {
    if batch_variance(batch) > tau {
        cal_ib_loss(batch)
    } else {
        Ok(0.0)
    }
}

/// Final objective on plain values.
pub fn final_loss(batch: &BatchScores, config: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let ls: Vec<Var> = batch
        .bundles
        .iter()
        .map(|b| g.constant(Tensor::vector(b.ls.clone())))
        .collect();
    let ps: Vec<Var> = batch
        .bundles
        .iter()
        .map(|b| g.constant(Tensor::vector(b.ps.clone())))
        .collect();
    let (_, breakdown) = final_loss_graph(&mut g, &ls, &ps, &batch.labels, config)?;
    Ok(breakdown)
}

/// `sum softplus(s_j - s_i)` over `pairs`, recorded on `g`. Empty pair sets give a constant 0.
pub fn pairwise_loss_graph(g: &mut Graph, scores: Var, pairs: Vec<(usize, usize)>) -> Var {
    if pairs.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let d = g.pair_diff(scores, Arc::new(pairs));
    let s = g.softplus(d);
    g.sum(s)
}

/// Final objective recorded on `g` so that gradients reach `ls` and `ps`.
///
/// `ls[q]` and `ps[q]` hold the `M` scores of query `q`.
pub fn final_loss_graph(
    g: &mut Graph,
    ls: &[Var],
    ps: &[Var],
    labels: &[PermutationLabel],
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if ls.is_empty() {
        return Err(Error::Config("batch needs at least one query".into()));
    }
    check_len("ps", ls.len(), ps.len())?;
    check_len("labels", ls.len(), labels.len())?;
    let m = labels[0].len();
    for q in 0..ls.len() {
        check_len("ls", m, g.value(ls[q]).len())?;
        check_len("ps", m, g.value(ps[q]).len())?;
        check_len("label", m, labels[q].len())?;
    }

    let mut list_terms = Vec::new();
    let mut point_terms = Vec::new();
    for q in 0..ls.len() {
        let pairs = labels[q].pairs();
        list_terms.push(pairwise_loss_graph(g, ls[q], pairs.clone()));
        if config.enable_point_loss {
            point_terms.push(pairwise_loss_graph(g, ps[q], pairs));
        }
    }

    let ps_values: Vec<Vec<Real>> = ps.iter().map(|v| g.value(*v).data().to_vec()).collect();
    let variance = mean_variance(&ps_values);
    let gate_open = variance > config.tau;
    let calibration_active = config.enable_calibration && (gate_open || !config.enable_adaptive);

    let mut cal_terms = Vec::new();
    if calibration_active {
        if config.enable_in_batch {
            let flat_ps: Vec<Real> = ps_values.iter().flatten().copied().collect();
            let flat_ls = g.concat(ls, 0);
            cal_terms.push(pairwise_loss_graph(g, flat_ls, calibration_pairs(&flat_ps)));
        } else {
            for (q, ps_q) in ps_values.iter().enumerate() {
                cal_terms.push(pairwise_loss_graph(g, ls[q], calibration_pairs(ps_q)));
            }
        }
    }

    let list = sum_terms(g, &list_terms);
    let point = sum_terms(g, &point_terms);
    let mut cal = sum_terms(g, &cal_terms);
    if config.calibration_weight != 1.0 {
        cal = g.scale(cal, config.calibration_weight);
    }
    let lp = g.add(list, point);
    let total = g.add(lp, cal);
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        list: g.value(list).item(),
        point: g.value(point).item(),
        calibration: g.value(cal).item(),
        variance,
        gate_open,
        calibration_active,
    };
    Ok((total, breakdown))
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Var {
    match terms {
        [] => g.constant(Tensor::scalar(0.0)),
        [first, rest @ ..] => rest.iter().fold(*first, |acc, t| g.add(acc, *t)),
    }
}
