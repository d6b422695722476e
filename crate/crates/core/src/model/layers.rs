//! Parameterized building blocks. Layers hold [`ParamId`]s into a shared
//! [`ParamStore`]; forward passes look the bound graph variables up by id.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};

type Res<T> = Result<T, AutodiffError>;

/// Glorot-uniform matrix, `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Res<Var> {
        let xw = g.matmul(x, vars[self.weight.0])?;
        g.add_row_bias(xw, vars[self.bias.0])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// One tanh hidden layer followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            hidden: Linear::init(store, rng, &format!("{name}.hidden"), fan_in, hidden),
            output: Linear::init(store, rng, &format!("{name}.output"), hidden, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Res<Var> {
        let h = self.hidden.forward(g, vars, x)?;
        let h = g.tanh(h)?;
        self.output.forward(g, vars, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.param_ids();
        ids.extend(self.output.param_ids());
        ids
    }
}

/// LSTM cell with gate blocks ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub recurrent_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let input_weight = store.add(format!("{name}.input_weight"), glorot(rng, input, 4 * hidden));
        let recurrent_weight =
            store.add(format!("{name}.recurrent_weight"), glorot(rng, hidden, 4 * hidden));
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            input_weight,
            recurrent_weight,
            bias,
            hidden,
        }
    }

    /// Runs the cell over `inputs` (each `[B × in]`) in the given order and
    /// returns the final hidden state `[B × H]`.
    pub fn run<'a>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        inputs: impl Iterator<Item = &'a Var>,
        batch: usize,
    ) -> Res<Var> {
        let h_size = self.hidden;
        let mut h = g.constant(Tensor::zeros(&[batch, h_size]));
        let mut c = g.constant(Tensor::zeros(&[batch, h_size]));
        for &x in inputs {
            let xw = g.matmul(x, vars[self.input_weight.0])?;
            let hw = g.matmul(h, vars[self.recurrent_weight.0])?;
            let pre = g.add(xw, hw)?;
            let pre = g.add_row_bias(pre, vars[self.bias.0])?;
            let i = g.slice_cols(pre, 0, h_size)?;
            let f = g.slice_cols(pre, h_size, 2 * h_size)?;
            let cand = g.slice_cols(pre, 2 * h_size, 3 * h_size)?;
            let o = g.slice_cols(pre, 3 * h_size, 4 * h_size)?;
            let i = g.sigmoid(i)?;
            let f = g.sigmoid(f)?;
            let cand = g.tanh(cand)?;
            let o = g.sigmoid(o)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c)?;
            h = g.mul(o, squashed)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.input_weight, self.recurrent_weight, self.bias]
    }
}

/// Sequence encoder: per-timestep MLP projection, bi-directional LSTM, and a
/// linear projection of the concatenated final states into the shared space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEncoder {
    pub input_projection: Mlp,
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub output_projection: Linear,
}

impl SequenceEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_width: usize,
        dims: &super::ModelDims,
    ) -> Self {
        Self {
            input_projection: Mlp::init(
                store,
                rng,
                &format!("{name}.input_projection"),
                input_width,
                dims.input_hidden,
                dims.input_projection,
            ),
            forward_cell: LstmCell::init(
                store,
                rng,
                &format!("{name}.lstm_forward"),
                dims.input_projection,
                dims.lstm_hidden,
            ),
            backward_cell: LstmCell::init(
                store,
                rng,
                &format!("{name}.lstm_backward"),
                dims.input_projection,
                dims.lstm_hidden,
            ),
            output_projection: Linear::init(
                store,
                rng,
                &format!("{name}.output_projection"),
                2 * dims.lstm_hidden,
                dims.embed,
            ),
        }
    }

    /// Encodes a batch of equally shaped windows `[L × w]` into `[B × embed]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], windows: &[&Tensor]) -> Res<Var> {
        let batch = windows.len();
        if batch == 0 {
            return Err(AutodiffError::Shape("encoder: empty batch".into()));
        }
        let (steps, width) = windows[0].dims2()?;
        for w in windows {
            if w.dims2()? != (steps, width) {
                return Err(AutodiffError::Shape(format!(
                    "encoder: window {:?} differs from [{steps}x{width}]",
                    w.shape()
                )));
            }
        }
        // Time-major stacking: row t*B + b holds timestep t of window b.
        let mut stacked = Vec::with_capacity(steps * batch * width);
        for t in 0..steps {
            for w in windows {
                stacked.extend_from_slice(w.row(t));
            }
        }
        let x = g.constant(Tensor::new(vec![steps * batch, width], stacked)?);
        let projected = self.input_projection.forward(g, vars, x)?;
        let per_step = (0..steps)
            .map(|t| g.slice_rows(projected, t * batch, (t + 1) * batch))
            .collect::<Res<Vec<_>>>()?;
        let h_fwd = self.forward_cell.run(g, vars, per_step.iter(), batch)?;
        let h_bwd = self.backward_cell.run(g, vars, per_step.iter().rev(), batch)?;
        let both = g.concat_cols(&[h_fwd, h_bwd])?;
        self.output_projection.forward(g, vars, both)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.input_projection.param_ids();
        ids.extend(self.forward_cell.param_ids());
        ids.extend(self.backward_cell.param_ids());
        ids.extend(self.output_projection.param_ids());
        ids
    }
}
