//! The automatic weighting network: a small MLP mapping the concatenation of
//! a per-sample auxiliary loss and the task's one-hot code to a weight in
//! (0, 1).
//!
//! Hidden layers use a rectifier; the output is a sigmoid, which bounds
//! every task weight so no auxiliary task can dominate the joint loss. The
//! default architecture is `8-1000-1`; the alternative shapes used by the
//! architecture ablation are accepted through [`WeightNetArch`].

use ndarray::Array2;
use rand::prelude::*;
use rand_distr::Normal;

use crate::tape::{Tape, Var};
use crate::tasks::{TaskId, NUM_TASKS};
use crate::{Error, Result};

/// Input width: one scalar loss plus the task one-hot.
pub const INPUT_WIDTH: usize = 1 + NUM_TASKS;

/// Layer widths, e.g. `8-1000-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightNetArch(Vec<usize>);

impl WeightNetArch {
    /// The `8-1000-1` default.
    pub fn default_arch() -> Self {
        WeightNetArch(vec![INPUT_WIDTH, 1000, 1])
    }

    pub fn parse(text: &str) -> Result<Self> {
        let widths: Vec<usize> = text
            .split('-')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad architecture `{text}`")))
            })
            .collect::<Result<_>>()?;
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "architecture `{text}` needs at least one hidden layer"
            )));
        }
        if widths[0] != INPUT_WIDTH {
            return Err(Error::InvalidArgument(format!(
                "architecture `{text}` must take {INPUT_WIDTH} inputs"
            )));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "architecture `{text}` must produce one output"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "architecture `{text}` has a zero-width layer"
            )));
        }
        Ok(WeightNetArch(widths))
    }

    pub fn widths(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for WeightNetArch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// One-hot task code fed to the network alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskCode {
    one_hot: [f64; NUM_TASKS],
}

impl TaskCode {
    pub fn for_task(task: TaskId) -> Self {
        let mut one_hot = [0.0; NUM_TASKS];
        one_hot[task.slot()] = 1.0;
        TaskCode { one_hot }
    }

    pub fn new(one_hot: [f64; NUM_TASKS]) -> Result<Self> {
        let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || one_hot.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "task code must be one-hot over seven slots".into(),
            ));
        }
        Ok(TaskCode { one_hot })
    }

    pub fn one_hot(&self) -> &[f64; NUM_TASKS] {
        &self.one_hot
    }
}

/// Trainable parameters of the weighting network: per layer a weight matrix
/// `(in, out)` and a bias row `(1, out)`.
#[derive(Debug, Clone)]
pub struct WeightNetParams {
    arch: WeightNetArch,
    layers: Vec<(Array2<f64>, Array2<f64>)>,
}

impl WeightNetParams {
    /// Weights from a zero-mean normal with standard deviation 0.01, zero
    /// biases: every weight starts near 0.5, so early training resembles
    /// uniform weighting.
    pub fn init_random(arch: WeightNetArch, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 0.01).unwrap();
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| {
                (
                    Array2::from_shape_fn((w[0], w[1]), |_| rng.sample(dist)),
                    Array2::zeros((1, w[1])),
                )
            })
            .collect();
        Self { arch, layers }
    }

    pub fn zeros(arch: WeightNetArch) -> Self {
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| (Array2::zeros((w[0], w[1])), Array2::zeros((1, w[1]))))
            .collect();
        Self { arch, layers }
    }

    pub fn arch(&self) -> &WeightNetArch {
        &self.arch
    }

    pub fn layers(&self) -> &[(Array2<f64>, Array2<f64>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Array2<f64>, Array2<f64>)] {
        &mut self.layers
    }

    /// Mutable views over all parameter tensors, weights before their biases
    /// in layer order. Matches the order of [`record_leaves`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Flattens all parameters into one vector (for gradient checks).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for (w, b) in &mut self.layers {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[at];
                at += 1;
            }
        }
        assert_eq!(at, flat.len(), "flat parameter vector length mismatch");
    }

    /// Records every parameter as a tape leaf; order matches
    /// [`Self::tensors_mut`].
    pub fn record_leaves(&self, tape: &Tape) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [tape.leaf(w.clone()), tape.leaf(b.clone())])
            .collect()
    }
}

/// Scalar forward pass: the weight assigned to one sample, strictly inside
/// (0, 1).
pub fn weight_forward(params: &WeightNetParams, loss: f64, code: &TaskCode) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss fed to the weighting network must be finite, got {loss}"
        )));
    }
    let mut x = Array2::zeros((1, INPUT_WIDTH));
    x[[0, 0]] = loss;
    for (i, &v) in code.one_hot().iter().enumerate() {
        x[[0, 1 + i]] = v;
    }
    let last = params.layers.len() - 1;
    for (i, (w, b)) in params.layers.iter().enumerate() {
        x = x.dot(w) + b;
        if i < last {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
    let z = x[[0, 0]];
    Ok(1.0 / (1.0 + (-z).exp()))
}

/// Tape forward pass over a column of per-sample losses for one task.
///
/// `theta` must come from [`WeightNetParams::record_leaves`] on the same
/// tape (or be constants with the same layout). Returns a `(batch, 1)`
/// column of weights; gradients flow into both `theta` and `losses`.
pub fn weight_forward_tape(
    tape: &Tape,
    params: &WeightNetParams,
    theta: &[Var],
    losses: Var,
    task: TaskId,
) -> Result<Var> {
    let (batch, cols) = tape.shape(losses);
    if cols != 1 {
        return Err(Error::Shape {
            op: "weight_forward",
            detail: format!("losses must be a column, got {batch}x{cols}"),
        });
    }
    if theta.len() != params.layers.len() * 2 {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameter leaves, got {}",
            params.layers.len() * 2,
            theta.len()
        )));
    }
    let code = TaskCode::for_task(task);
    let mut one_hot = Array2::zeros((batch, NUM_TASKS));
    for mut row in one_hot.rows_mut() {
        for (i, &v) in code.one_hot().iter().enumerate() {
            row[i] = v;
        }
    }
    let code_block = tape.constant(one_hot);
    let mut x = tape.concat_cols(losses, code_block)?;
    let last = params.layers.len() - 1;
    for i in 0..params.layers.len() {
        let (w, b) = (theta[2 * i], theta[2 * i + 1]);
        let prod = tape.matmul(x, w)?;
        let bias = tape.broadcast_rows(b, batch)?;
        let pre = tape.add(prod, bias)?;
        x = if i < last {
            tape.relu(pre)?
        } else {
            tape.sigmoid(pre)?
        };
    }
    Ok(x)
}

/// Batch helper used in tests and by the trainer's logging: mean weight the
/// network currently assigns to a set of losses for one task.
pub fn mean_weight(params: &WeightNetParams, losses: &[f64], task: TaskId) -> Result<f64> {
    let code = TaskCode::for_task(task);
    let mut total = 0.0;
    for &l in losses {
        total += weight_forward(params, l, &code)?;
    }
    Ok(total / losses.len().max(1) as f64)
}
