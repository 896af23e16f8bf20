use chn_tensor::{Graph, ParamStore, Scalar, Var};

use crate::error::Result;

/// Bound weights of one LSTM direction (`<prefix>.W_ih`, `.W_hh`, `.b`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmWeights {
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
}

impl LstmWeights {
    pub(crate) fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let w_ih = g.param(store, &format!("{prefix}.W_ih"))?;
        let w_hh = g.param(store, &format!("{prefix}.W_hh"))?;
        let b = g.param(store, &format!("{prefix}.b"))?;
        let hidden = g.shape(w_hh)[1];
        Ok(LstmWeights { w_ih, w_hh, b, hidden })
    }

    pub(crate) fn step<T: Scalar>(&self, g: &mut Graph<T>, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        Ok(g.lstm(x, state.0, state.1, self.w_ih, self.w_hh, self.b)?)
    }

    pub(crate) fn zero_state<T: Scalar>(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.zeros(self.hidden, 1), g.zeros(self.hidden, 1))
    }

    /// Runs over `inputs` (reversed when `reverse`), returning the hidden
    /// state at each input position and the final `(h, c)`.
    pub(crate) fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &[Var],
        init: (Var, Var),
        reverse: bool,
    ) -> Result<(Vec<Var>, (Var, Var))> {
        let mut outputs = vec![init.0; inputs.len()];
        let mut state = init;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..inputs.len()).rev())
        } else {
            Box::new(0..inputs.len())
        };
        for t in order {
            state = self.step(g, inputs[t], state)?;
            outputs[t] = state.0;
        }
        Ok((outputs, state))
    }
}

/// One bidirectional layer: `[forward_t; backward_t]` at every position.
pub(crate) fn bidirectional_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    let fwd = LstmWeights::bind(g, store, &format!("{prefix}.fwd"))?;
    let bwd = LstmWeights::bind(g, store, &format!("{prefix}.bwd"))?;
    let init = fwd.zero_state(g);
    let (f_out, _) = fwd.run(g, inputs, init, false)?;
    let init = bwd.zero_state(g);
    let (b_out, _) = bwd.run(g, inputs, init, true)?;
    f_out
        .into_iter()
        .zip(b_out)
        .map(|(f, b)| Ok(g.concat(&[f, b], 0)?))
        .collect()
}
