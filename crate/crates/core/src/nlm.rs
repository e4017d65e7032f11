//! Neural logic machine over nullary..ternary predicate streams, with a
//! ternary output head that scores every `(row, column, value)` action.
//!
//! Each layer builds, for every arity `a`, the concatenation of the previous
//! arity-`a` stream, the expanded arity `a - 1` stream and the max/min reduced
//! arity `a + 1` stream. For `a >= 2` that block is then concatenated over all
//! `a!` orderings of its object axes, so a ternary position `(r, c, x)` sees
//! binary facts about `(r, x)` and `(c, x)` as well as `(r, c)`. An affine map
//! and a sigmoid finish the layer.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action;
use crate::sudoku::{PredicateSet, CELLS, SIZE};
use crate::tensor::{masked_softmax, Graph, NodeId, Tensor, TensorError, MAX_ARITY, OBJECT_COUNT};

pub const ARITIES: usize = MAX_ARITY + 1;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Channel counts of the Sudoku input slots: no nullary or unary predicates,
/// row/column stacked as two binary channels, the box predicate as one ternary channel.
pub const SUDOKU_INPUT_CHANNELS: [usize; ARITIES] = [0, 0, 2, 1];
/// Number of actions, one per `(row, column, value)`.
pub const ACTION_COUNT: usize = CELLS * SIZE;

#[derive(Debug, Error)]
pub enum NlmError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid model inputs: {0}")]
    Inputs(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("illegal action {0:?}: cell is not empty")]
    IllegalAction(Action),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlmConfig {
    pub depth: usize,
    pub hidden_channels: usize,
    pub max_arity: usize,
    pub object_count: usize,
    #[serde(default = "sudoku_inputs")]
    pub input_channels: [usize; ARITIES],
}

fn sudoku_inputs() -> [usize; ARITIES] {
    SUDOKU_INPUT_CHANNELS
}

impl Default for NlmConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden_channels: 8,
            max_arity: MAX_ARITY,
            object_count: OBJECT_COUNT,
            input_channels: SUDOKU_INPUT_CHANNELS,
        }
    }
}

impl NlmConfig {
    pub fn new(depth: usize, hidden_channels: usize) -> Self {
        Self {
            depth,
            hidden_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(NlmError::Config(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.hidden_channels < 4 {
            return Err(NlmError::Config(format!(
                "hidden_channels must be >= 4, got {}",
                self.hidden_channels
            )));
        }
        if self.max_arity != MAX_ARITY || self.object_count != OBJECT_COUNT {
            return Err(NlmError::Config(format!(
                "max_arity and object_count are fixed at {MAX_ARITY} and {OBJECT_COUNT}"
            )));
        }
        if self.input_channels[3] == 0 {
            return Err(NlmError::Config(
                "the ternary input slot needs at least one channel".into(),
            ));
        }
        Ok(())
    }

    /// `[d_in, d_out]` of the affine map for every layer and arity.
    pub fn layer_shapes(&self) -> Vec<[[usize; 2]; ARITIES]> {
        let mut prev = self.input_channels;
        (0..self.depth)
            .map(|_| {
                let inputs = layer_input_channels(prev);
                prev = [self.hidden_channels; ARITIES];
                std::array::from_fn(|a| [inputs[a], self.hidden_channels])
            })
            .collect()
    }
}

/// Input width of each arity's affine map given the previous layer's channel counts.
pub fn layer_input_channels(prev: [usize; ARITIES]) -> [usize; ARITIES] {
    std::array::from_fn(|a| {
        let below = if a > 0 { prev[a - 1] } else { 0 };
        let above = if a < MAX_ARITY { 2 * prev[a + 1] } else { 0 };
        (prev[a] + below + above) * factorial(a)
    })
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

fn permutations(arity: usize) -> Vec<Vec<usize>> {
    match arity {
        0 | 1 => vec![(0..arity).collect()],
        2 => vec![vec![0, 1], vec![1, 0]],
        _ => vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-bound..bound))
                .collect::<Vec<_>>()
        };
        let weight = Tensor::new(vec![d_in, d_out], draw(d_in * d_out)).expect("weight shape");
        let bias = Tensor::new(vec![d_out], draw(d_out)).expect("bias shape");
        Self { weight, bias }
    }
}

/// Predicate tensors for the four input slots.
#[derive(Debug, Clone)]
pub struct ArityInputs {
    pub nullary: Option<Tensor>,
    pub unary: Option<Tensor>,
    pub binary: Tensor,
    pub ternary: Tensor,
}

impl ArityInputs {
    pub fn from_predicates(p: &PredicateSet) -> Self {
        Self {
            nullary: None,
            unary: None,
            binary: p.stacked_binary.clone(),
            ternary: p.ternary.clone(),
        }
    }

    fn slots(&self) -> [Option<&Tensor>; ARITIES] {
        [
            self.nullary.as_ref(),
            self.unary.as_ref(),
            Some(&self.binary),
            Some(&self.ternary),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlmModel {
    pub config: NlmConfig,
    pub seed: u64,
    pub layers: Vec<[Linear; ARITIES]>,
    pub head: Linear,
}

impl NlmModel {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: NlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|shapes| shapes.map(|[d_in, d_out]| Linear::init(d_in, d_out, &mut rng)))
            .collect();
        let head = Linear::init(config.hidden_channels, 1, &mut rng);
        Ok(Self {
            config,
            seed,
            layers,
            head,
        })
    }

    /// Parameters in a fixed order: layer by layer, arity 0..=3, weight then
    /// bias; the head last.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * ARITIES * 2 + 2);
        for layer in &self.layers {
            for lin in layer {
                out.push(&lin.weight);
                out.push(&lin.bias);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * ARITIES * 2 + 2);
        for layer in &mut self.layers {
            for lin in layer {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Parameter gradients in [`params`](Self::params) order, zeros where absent.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.params() {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    /// Records the parameters as graph leaves, differentiable when `grad` is set.
    pub fn bind(&self, graph: &mut Graph, grad: bool) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|t| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                leaf.set_requires_grad(grad);
                graph.leaf(leaf)
            })
            .collect()
    }

    /// Collects leaf gradients from a graph produced by [`bind`](Self::bind)
    /// and flattens them in parameter order.
    pub fn bound_grads(&self, graph: &Graph, bound: &[NodeId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for &id in bound {
            let t = graph.value(id);
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    /// Adds a flat gradient vector into the parameters' `grad` buffers.
    pub fn accumulate_flat_grad(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.accumulate_grad(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn check_inputs(&self, inputs: &ArityInputs) -> Result<()> {
        for (a, slot) in inputs.slots().into_iter().enumerate() {
            let expected = self.config.input_channels[a];
            let mut want = vec![OBJECT_COUNT; a];
            want.push(expected);
            match slot {
                None if expected == 0 => {}
                Some(t) if t.shape() == want.as_slice() => {}
                other => {
                    return Err(NlmError::Inputs(format!(
                        "arity {a} slot has shape {:?}, model expects {want:?}",
                        other.map(|t| t.shape().to_vec())
                    )))
                }
            }
        }
        Ok(())
    }

    /// Builds the forward pass on `graph` using parameter leaves from
    /// [`bind`](Self::bind). Returns the `[9, 9, 9]` logits node.
    pub fn forward_on(
        &self,
        graph: &mut Graph,
        bound: &[NodeId],
        inputs: &ArityInputs,
    ) -> Result<NodeId> {
        self.check_inputs(inputs)?;
        let mut prev: [Option<NodeId>; ARITIES] = [None; ARITIES];
        for (a, slot) in inputs.slots().into_iter().enumerate() {
            if let Some(t) = slot {
                if t.channels() > 0 {
                    prev[a] = Some(graph.leaf(t.clone()));
                }
            }
        }
        for (l, _) in self.layers.iter().enumerate() {
            let mut next = [None; ARITIES];
            for (a, out) in next.iter_mut().enumerate() {
                let mut parts = Vec::with_capacity(3);
                if let Some(p) = prev[a] {
                    parts.push(p);
                }
                if a > 0 {
                    if let Some(p) = prev[a - 1] {
                        parts.push(graph.expand_arity(p)?);
                    }
                }
                if a < MAX_ARITY {
                    if let Some(p) = prev[a + 1] {
                        parts.push(graph.reduce_arity(p)?);
                    }
                }
                let block = if parts.is_empty() {
                    let mut shape = vec![OBJECT_COUNT; a];
                    shape.push(0);
                    graph.leaf(Tensor::zeros(shape))
                } else {
                    graph.concat_many(&parts)?
                };
                let block = if a >= 2 {
                    let views = permutations(a)
                        .iter()
                        .map(|perm| graph.permute_objects(block, perm))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    graph.concat_many(&views)?
                } else {
                    block
                };
                let idx = 2 * (l * ARITIES + a);
                let z = graph.matmul_lastdim(block, bound[idx], bound[idx + 1])?;
                *out = Some(graph.sigmoid(z));
            }
            prev = next;
        }
        let n = bound.len();
        let ternary = prev[MAX_ARITY].expect("ternary stream");
        let scores = graph.matmul_lastdim(ternary, bound[n - 2], bound[n - 1])?;
        Ok(graph.reshape(scores, vec![OBJECT_COUNT; MAX_ARITY])?)
    }

    /// Logits without gradient tracking.
    pub fn forward(&self, inputs: &ArityInputs) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false);
        let logits = self.forward_on(&mut graph, &bound, inputs)?;
        Ok(graph.detach(logits))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let lin = |l: &Linear| LinearRecord {
            weight: TensorRecord::from(&l.weight),
            bias: TensorRecord::from(&l.bias),
        };
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|layer| layer.iter().map(lin).collect())
                .collect(),
            head: lin(&self.head),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NlmError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        let shapes = ck.config.layer_shapes();
        if ck.layers.len() != shapes.len() {
            return Err(NlmError::Checkpoint(format!(
                "expected {} layers, found {}",
                shapes.len(),
                ck.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (l, (records, shape)) in ck.layers.into_iter().zip(shapes).enumerate() {
            if records.len() != ARITIES {
                return Err(NlmError::Checkpoint(format!(
                    "layer {l}: expected {ARITIES} arity blocks, found {}",
                    records.len()
                )));
            }
            let mut built = Vec::with_capacity(ARITIES);
            for (a, rec) in records.into_iter().enumerate() {
                built.push(rec.into_linear(shape[a], &format!("layer {l} arity {a}"))?);
            }
            layers.push(built.try_into().expect("four arity blocks"));
        }
        let head = ck
            .head
            .into_linear([ck.config.hidden_channels, 1], "output head")?;
        Ok(Self {
            config: ck.config,
            seed: ck.seed,
            layers,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(std::io::Error::other)?;
        fs::write(path, json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| NlmError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| NlmError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ck)
    }
}

/// On-disk model: one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: NlmConfig,
    pub seed: u64,
    pub layers: Vec<Vec<LinearRecord>>,
    pub head: LinearRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRecord {
    pub weight: TensorRecord,
    pub bias: TensorRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl LinearRecord {
    fn into_linear(self, [d_in, d_out]: [usize; 2], what: &str) -> Result<Linear> {
        if self.weight.shape != [d_in, d_out] || self.bias.shape != [d_out] {
            return Err(NlmError::Checkpoint(format!(
                "{what}: weight {:?} / bias {:?} do not match expected [{d_in}, {d_out}] / [{d_out}]",
                self.weight.shape, self.bias.shape
            )));
        }
        let weight = Tensor::new(self.weight.shape, self.weight.data)
            .map_err(|e| NlmError::Checkpoint(format!("{what}: {e}")))?;
        let bias = Tensor::new(self.bias.shape, self.bias.data)
            .map_err(|e| NlmError::Checkpoint(format!("{what}: {e}")))?;
        Ok(Linear { weight, bias })
    }
}

/// Differentiable log-probability of `action` under the softmax restricted
/// to empty cells. All nine values of a filled cell are excluded.
pub fn log_prob(
    graph: &mut Graph,
    logits: NodeId,
    empty_mask: &[[bool; SIZE]; SIZE],
    action: Action,
) -> Result<NodeId> {
    if !empty_mask[action.r][action.c] {
        return Err(NlmError::IllegalAction(action));
    }
    let mask = flat_mask(empty_mask);
    Ok(graph.masked_log_prob(logits, &mask, action.index())?)
}

pub fn flat_mask(empty_mask: &[[bool; SIZE]; SIZE]) -> Vec<bool> {
    empty_mask
        .iter()
        .flatten()
        .flat_map(|&e| std::iter::repeat_n(e, SIZE))
        .collect()
}

/// Masked action distribution in flat `(r, c, x - 1)` order.
pub fn action_probabilities(logits: &[f64], empty_mask: &[[bool; SIZE]; SIZE]) -> Vec<f64> {
    masked_softmax(logits, &flat_mask(empty_mask))
}

/// Highest-logit action among empty cells; lowest flat index on ties.
pub fn greedy_action(logits: &[f64], empty_mask: &[[bool; SIZE]; SIZE]) -> Option<Action> {
    let mask = flat_mask(empty_mask);
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in logits.iter().zip(&mask).enumerate() {
        if m && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best.map(Action::from_index)
}

/// Inverse-CDF draw from the masked distribution.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return Action::from_index(i);
        }
    }
    Action::from_index(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sudoku::{blank_cells, compute_predicates, generate_solved, Grid};

    fn inputs_for(grid: &Grid) -> (ArityInputs, PredicateSet) {
        let p = compute_predicates(grid);
        (ArityInputs::from_predicates(&p), p)
    }

    #[test]
    fn config_validation() {
        assert!(NlmConfig::default().validate().is_ok());
        assert!(matches!(
            NlmModel::init(NlmConfig::new(1, 8), 0),
            Err(NlmError::Config(_))
        ));
        assert!(matches!(
            NlmModel::init(NlmConfig::new(2, 3), 0),
            Err(NlmError::Config(_))
        ));
        let bad = NlmConfig {
            object_count: 8,
            ..NlmConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = NlmModel::init(NlmConfig::default(), 5).unwrap();
        let b = NlmModel::init(NlmConfig::default(), 5).unwrap();
        let c = NlmModel::init(NlmConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn channel_accounting_depth2_width8() {
        let model = NlmModel::init(NlmConfig::new(2, 8), 1).unwrap();
        // Layer 0 from inputs [0, 0, 2, 1]:
        //   nullary: 0 + 2*0 = 0
        //   unary:   0 + 0 + 2*2 = 4
        //   binary:  (2 + 0 + 2*1) * 2! = 8
        //   ternary: (1 + 2) * 3! = 18
        // Layer 1 from [8, 8, 8, 8]:
        //   nullary: 8 + 16 = 24; unary: 8 + 8 + 16 = 32
        //   binary: (8 + 8 + 16) * 2 = 64; ternary: (8 + 8) * 6 = 96
        let expected = [[0, 4, 8, 18], [24, 32, 64, 96]];
        for (layer, want) in model.layers.iter().zip(expected) {
            for (lin, d_in) in layer.iter().zip(want) {
                assert_eq!(lin.weight.shape(), &[d_in, 8]);
                assert_eq!(lin.bias.shape(), &[8]);
            }
        }
        assert_eq!(model.head.weight.shape(), &[8, 1]);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let model = NlmModel::init(NlmConfig::default(), 3).unwrap();
        let (inputs, _) = inputs_for(&blank_cells(&generate_solved(1), 10, 2).unwrap());
        let a = model.forward(&inputs).unwrap();
        assert_eq!(a.shape(), &[9, 9, 9]);
        let b = model.forward(&inputs).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut model = NlmModel::init(NlmConfig::default(), 3).unwrap();
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.head.bias.data_mut()[0] = 0.25;
        let (inputs, p) = inputs_for(&blank_cells(&generate_solved(1), 4, 2).unwrap());
        let logits = model.forward(&inputs).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.25));
        let probs = action_probabilities(logits.data(), &p.empty_mask);
        for &q in &probs {
            assert!(q == 0.0 || (q - 1.0 / 36.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_wrong_input_shapes() {
        let model = NlmModel::init(NlmConfig::default(), 3).unwrap();
        let (mut inputs, _) = inputs_for(&Grid::empty());
        inputs.binary = Tensor::zeros(vec![9, 9, 3]);
        assert!(matches!(model.forward(&inputs), Err(NlmError::Inputs(_))));
        let (mut inputs, _) = inputs_for(&Grid::empty());
        inputs.unary = Some(Tensor::zeros(vec![9, 2]));
        assert!(matches!(model.forward(&inputs), Err(NlmError::Inputs(_))));
    }

    #[test]
    fn log_prob_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![9, 9, 9]));
        let puzzle = blank_cells(&generate_solved(4), 5, 1).unwrap();
        let p = compute_predicates(&puzzle);
        let (r, c) = puzzle.empty_cells()[2];
        let lp = log_prob(&mut g, logits, &p.empty_mask, Action::new(r, c, 7)).unwrap();
        assert!((g.value(lp).item() - (1.0f64 / 45.0).ln()).abs() < 1e-12);

        let filled = (0..9)
            .flat_map(|r| (0..9).map(move |c| (r, c)))
            .find(|&(r, c)| puzzle.get(r, c) != 0)
            .unwrap();
        assert!(matches!(
            log_prob(
                &mut g,
                logits,
                &p.empty_mask,
                Action::new(filled.0, filled.1, 1)
            ),
            Err(NlmError::IllegalAction(_))
        ));

        let one = blank_cells(&generate_solved(4), 1, 1).unwrap();
        let p1 = compute_predicates(&one);
        let (r, c) = one.empty_cells()[0];
        let mut data = vec![0.0; ACTION_COUNT];
        let action = Action::new(r, c, 3);
        data[action.index()] = 40.0;
        let logits = g.leaf(Tensor::new(vec![9, 9, 9], data).unwrap());
        let lp = log_prob(&mut g, logits, &p1.empty_mask, action).unwrap();
        assert!(g.value(lp).item() > -1e-12);
    }

    #[test]
    fn greedy_and_sampling_respect_mask() {
        let puzzle = blank_cells(&generate_solved(9), 3, 3).unwrap();
        let p = compute_predicates(&puzzle);
        let mut logits = vec![0.0; ACTION_COUNT];
        logits[0] = 100.0;
        let (r, c) = puzzle.empty_cells()[1];
        logits[Action::new(r, c, 5).index()] = 1.0;
        let best = greedy_action(&logits, &p.empty_mask).unwrap();
        if puzzle.get(0, 0) != 0 {
            assert_eq!(best, Action::new(r, c, 5));
        }
        let probs = action_probabilities(&logits, &p.empty_mask);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = sample_action(&probs, &mut rng);
            assert!(p.empty_mask[a.r][a.c]);
        }
        assert!(greedy_action(&logits, &[[false; 9]; 9]).is_none());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let model = NlmModel::init(NlmConfig::new(3, 6), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = NlmModel::load(&path).unwrap();
        assert_eq!(loaded, model);

        let mut ck = model.to_checkpoint();
        ck.layers[1][2].weight.shape = vec![10, 6];
        assert!(matches!(
            NlmModel::from_checkpoint(ck),
            Err(NlmError::Checkpoint(_))
        ));

        let mut ck = model.to_checkpoint();
        ck.layers.pop();
        assert!(NlmModel::from_checkpoint(ck).is_err());

        let mut ck = model.to_checkpoint();
        ck.format_version = 99;
        assert!(NlmModel::from_checkpoint(ck).is_err());
    }
}
