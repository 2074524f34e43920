//! Loss combination for joint completion and classification training.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::kernels::dot;
use crate::tensor::Tensor;

/// Per-task gradients flattened over the shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradients {
    pub task_ids: Vec<String>,
    pub grads: Vec<Vec<f64>>,
}

impl TaskGradients {
    pub fn new(task_ids: Vec<String>, grads: Vec<Vec<f64>>) -> Result<Self> {
        if task_ids.len() != grads.len() {
            return Err(Error::Contract("one gradient per task id required".into()));
        }
        if let Some(first) = grads.first() {
            if let Some(bad) = grads.iter().find(|g| g.len() != first.len()) {
                return Err(Error::shape("task gradients", &[first.len()], &[bad.len()]));
            }
        }
        Ok(Self { task_ids, grads })
    }

    /// Element-wise sum over tasks.
    pub fn summed(&self) -> Vec<f64> {
        let n = self.grads.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for g in &self.grads {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }
}

fn check_weights(n_losses: usize, weights: &[f64]) -> Result<()> {
    if n_losses != weights.len() {
        return Err(Error::shape("combine_weighted", &[n_losses], &[weights.len()]));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("task weights must be finite and >= 0: {weights:?}")));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Config("task weights are all zero".into()));
    }
    Ok(())
}

/// `Σ wᵢ·Lᵢ`.
pub fn combine_weighted(losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_weights(losses.len(), weights)?;
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

pub fn combine_weighted_on_tape(tape: &mut Tape, losses: &[NodeId], weights: &[f64]) -> Result<NodeId> {
    check_weights(losses.len(), weights)?;
    let mut total: Option<NodeId> = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let term = tape.scale(l, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one loss"))
}

/// Gradient surgery. For every task, the other tasks are visited in a random
/// order; whenever the running gradient conflicts with another task's
/// original gradient (negative inner product), its component along that
/// gradient is removed.
pub fn pcgrad<R: Rng + ?Sized>(grads: &TaskGradients, rng: &mut R) -> Result<TaskGradients> {
    let k = grads.grads.len();
    if k < 2 {
        return Err(Error::Domain(format!("gradient surgery needs >= 2 tasks, got {k}")));
    }
    let sq_norms: Vec<f64> = grads.grads.iter().map(|g| dot(g, g)).collect();
    let mut adjusted = Vec::with_capacity(k);
    for i in 0..k {
        let mut gi = grads.grads[i].clone();
        let mut order: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            let gj = &grads.grads[j];
            let inner = dot(&gi, gj);
            if inner < 0.0 {
                if sq_norms[j] == 0.0 {
                    log::warn!("skipping projection onto zero gradient of task {}", grads.task_ids[j]);
                    continue;
                }
                let coef = inner / sq_norms[j];
                for (a, b) in gi.iter_mut().zip(gj) {
                    *a -= coef * b;
                }
            }
        }
        adjusted.push(gi);
    }
    Ok(TaskGradients { task_ids: grads.task_ids.clone(), grads: adjusted })
}

/// Learned per-task log-variances `sᵢ`, initialized at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyState {
    pub log_vars: Vec<f64>,
}

impl UncertaintyState {
    pub fn new(tasks: usize) -> Self {
        Self { log_vars: vec![0.0; tasks] }
    }

    /// Parameter names used when the log-variances share the model optimizer.
    pub fn param_name(task: usize) -> String {
        format!("uncertainty.task{task}.log_var")
    }
}

/// `Σ exp(-sᵢ)·Lᵢ + sᵢ`.
pub fn uncertainty_combine(losses: &[f64], state: &UncertaintyState) -> Result<f64> {
    if losses.len() != state.log_vars.len() {
        return Err(Error::shape("uncertainty_combine", &[losses.len()], &[state.log_vars.len()]));
    }
    Ok(losses
        .iter()
        .zip(&state.log_vars)
        .map(|(l, s)| (-s).exp() * l + s)
        .sum())
}

/// Tape version; `log_vars` are scalar leaves so they receive gradients.
pub fn uncertainty_combine_on_tape(
    tape: &mut Tape,
    losses: &[NodeId],
    log_vars: &[NodeId],
) -> Result<NodeId> {
    if losses.len() != log_vars.len() || losses.is_empty() {
        return Err(Error::shape("uncertainty_combine", &[losses.len()], &[log_vars.len()]));
    }
    let mut total: Option<NodeId> = None;
    for (&l, &s) in losses.iter().zip(log_vars) {
        let neg = tape.scale(s, -1.0)?;
        let precision = tape.exp(neg)?;
        let weighted = tape.mul(precision, l)?;
        let term = tape.add(weighted, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one loss"))
}

/// Default grid for two tasks: completion weight 1, classification weight in
/// `{0, 0.01, 0.1, 0.5, 1, 2}`.
pub fn default_weight_grid() -> Vec<Vec<f64>> {
    [0.0, 0.01, 0.1, 0.5, 1.0, 2.0].iter().map(|&w| vec![1.0, w]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub chamfer: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSearchRow {
    pub weights: Vec<f64>,
    pub seed: u64,
    pub outcome: Result<EvalPoint, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearchResult {
    pub best: Vec<f64>,
    pub best_eval: EvalPoint,
    pub table: Vec<WeightSearchRow>,
}

impl WeightSearchResult {
    /// CSV with one column per weight, then accuracy, chamfer, seed, status.
    pub fn to_csv(&self) -> String {
        let k = self.table.first().map_or(0, |r| r.weights.len());
        let mut out = String::new();
        let header: Vec<String> = (0..k).map(|i| format!("w{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",accuracy,chamfer,seed,status\n");
        for row in &self.table {
            let ws: Vec<String> = row.weights.iter().map(|w| format!("{w}")).collect();
            out.push_str(&ws.join(","));
            match &row.outcome {
                Ok(e) => out.push_str(&format!(
                    ",{},{},{},ok\n",
                    e.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                    e.chamfer,
                    row.seed
                )),
                Err(msg) => out.push_str(&format!(",,,{},\"failed: {}\"\n", row.seed, msg.replace('"', "'"))),
            }
        }
        out
    }
}

/// Runs `train_eval` once per grid point (same seed for all), in parallel,
/// and returns the weights with the lowest held-out Chamfer distance. Failed
/// points are kept in the table and skipped for selection.
pub fn weight_search<F>(grid: &[Vec<f64>], seed: u64, train_eval: F) -> Result<WeightSearchResult>
where
    F: Fn(&[f64], u64) -> Result<EvalPoint> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Domain("weight search grid is empty".into()));
    }
    let table: Vec<WeightSearchRow> = grid
        .par_iter()
        .map(|w| WeightSearchRow {
            weights: w.clone(),
            seed,
            outcome: train_eval(w, seed).and_then(|e| {
                if e.chamfer.is_finite() {
                    Ok(e)
                } else {
                    Err(Error::NonFinite("evaluation chamfer".into()))
                }
            })
            .map_err(|e| e.to_string()),
        })
        .collect();
    let best = table
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|e| (r, *e)))
        .fold(None::<(&WeightSearchRow, EvalPoint)>, |acc, (r, e)| match acc {
            Some((_, b)) if b.chamfer <= e.chamfer => acc,
            _ => Some((r, e)),
        });
    let (row, best_eval) =
        best.ok_or_else(|| Error::Numeric { message: "every weight-search run failed".into(), residual: f64::NAN })?;
    Ok(WeightSearchResult { best: row.weights.clone(), best_eval, table })
}

/// Concatenates tensor payloads into one vector, in iteration order.
pub fn flatten<'a, I>(tensors: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    tensors.into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two(g1: Vec<f64>, g2: Vec<f64>) -> TaskGradients {
        TaskGradients::new(vec!["a".into(), "b".into()], vec![g1, g2]).unwrap()
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(combine_weighted(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(combine_weighted(&[2.0, 4.0], &[1.0, 0.0]).unwrap(), 2.0);
        assert_eq!(combine_weighted(&[2.0, 4.0], &[0.25, 0.5]).unwrap(), 2.5);
        assert!(combine_weighted(&[2.0], &[1.0, 1.0]).is_err());
        assert!(combine_weighted(&[2.0, 4.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pcgrad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = two(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert_eq!(pcgrad(&g, &mut rng).unwrap(), g);

        let out = pcgrad(&two(vec![1.0, 0.0], vec![-1.0, 1.0]), &mut rng).unwrap();
        assert_eq!(out.grads[0], vec![0.5, 0.5]);
        assert_eq!(dot(&out.grads[0], &[-1.0, 1.0]), 0.0);

        let out = pcgrad(&two(vec![0.3, -2.0], vec![-0.3, 2.0]), &mut rng).unwrap();
        assert!(out.grads[0].iter().all(|v| v.abs() < 1e-15));

        assert!(pcgrad(&TaskGradients::new(vec!["a".into()], vec![vec![1.0]]).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let zero = UncertaintyState::new(2);
        assert_eq!(uncertainty_combine(&[2.0, 3.0], &zero).unwrap(), 5.0);
        assert_eq!(
            uncertainty_combine(&[2.0, 3.0], &zero).unwrap(),
            combine_weighted(&[2.0, 3.0], &[1.0, 1.0]).unwrap()
        );
        let s = UncertaintyState { log_vars: vec![2f64.ln()] };
        assert!((uncertainty_combine(&[2.0], &s).unwrap() - (1.0 + 2f64.ln())).abs() < 1e-15);

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(2.0));
        let s = tape.leaf(Tensor::scalar(0.0));
        let total = uncertainty_combine_on_tape(&mut tape, &[l], &[s]).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(s).unwrap().item(), -1.0);
        assert_eq!(grads.get(l).unwrap().item(), 1.0);
    }

    #[test]
    fn weight_search_picks_argmin_and_keeps_failures() {
        let grid = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let values = [3.0, 1.0, 2.0];
        let res = weight_search(&grid, 7, |w, _| {
            let i = w[1] as usize;
            Ok(EvalPoint { chamfer: values[i], accuracy: None })
        })
        .unwrap();
        assert_eq!(res.best, vec![1.0, 1.0]);
        assert_eq!(res.table.len(), 3);

        let single = weight_search(&grid[..1], 7, |_, _| Ok(EvalPoint { chamfer: 5.0, accuracy: Some(0.5) })).unwrap();
        assert_eq!(single.best, grid[0]);

        let res = weight_search(&grid, 7, |w, _| {
            if w[1] == 1.0 {
                Err(Error::NonFinite("boom".into()))
            } else {
                Ok(EvalPoint { chamfer: w[1], accuracy: None })
            }
        })
        .unwrap();
        assert_eq!(res.best, vec![1.0, 0.0]);
        assert!(res.table[1].outcome.is_err());
        let csv = res.to_csv();
        assert!(csv.starts_with("w0,w1,accuracy,chamfer,seed,status\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
