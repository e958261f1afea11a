use crate::engine::{EngineError, Fill, Graph, NodeId, ParamId, ParamSet, SeededRng, Tensor};

/// Parameter ids of one LSTM layer. Gates are packed along the last axis in
/// the order input, forget, cell candidate, output:
///
/// | tensor | shape |
/// |--------|-------|
/// | `wx`   | `[input, 4H]` |
/// | `wh`   | `[H, 4H]` |
/// | `b`    | `[4H]` |
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

/// Graph handles for a layer's parameters inside one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn build(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, EngineError> {
        let wx = params.add(
            format!("{prefix}.wx"),
            Tensor::new(&[input, 4 * hidden], Fill::GlorotUniform, rng)?,
        );
        let wh = params.add(
            format!("{prefix}.wh"),
            Tensor::new(&[hidden, 4 * hidden], Fill::GlorotUniform, rng)?,
        );
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden])?);
        Ok(Self {
            input,
            hidden,
            wx,
            wh,
            b,
        })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }

    pub fn nodes(&self, g: &Graph) -> LstmNodes {
        LstmNodes {
            wx: g.param(self.wx),
            wh: g.param(self.wh),
            b: g.param(self.b),
            hidden: self.hidden,
        }
    }

    /// Unroll over `steps` (each `[B, input]`). Returns every hidden output and
    /// the final `(h, c)`.
    pub fn unroll(
        &self,
        g: &mut Graph,
        steps: &[NodeId],
        init: Option<(NodeId, NodeId)>,
    ) -> Result<(Vec<NodeId>, (NodeId, NodeId)), EngineError> {
        let batch = g.shape(steps[0])[0];
        let nodes = self.nodes(g);
        let (mut h, mut c) = match init {
            Some(state) => state,
            None => {
                let zeros = g.input(Tensor::zeros(&[batch, self.hidden])?);
                (zeros, zeros)
            }
        };
        let mut outputs = Vec::with_capacity(steps.len());
        let mut cached_proj: Option<(NodeId, NodeId)> = None;
        for &x in steps {
            // Repeated inputs (decoder repeat-vector) share one projection.
            let proj = match cached_proj {
                Some((src, p)) if src == x => p,
                _ => {
                    let p = g.matmul(x, nodes.wx)?;
                    cached_proj = Some((x, p));
                    p
                }
            };
            (h, c) = cell_from_projection(g, proj, h, c, &nodes)?;
            outputs.push(h);
        }
        Ok((outputs, (h, c)))
    }
}

/// One LSTM update:
///
/// ```text
/// i = sigmoid(x Wx_i + h Wh_i + b_i)    f = sigmoid(..f)    o = sigmoid(..o)
/// g = tanh(x Wx_g + h Wh_g + b_g)
/// c' = f * c + i * g
/// h' = o * tanh(c')
/// ```
pub fn lstm_cell_step(
    g: &mut Graph,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    params: &LstmNodes,
) -> Result<(NodeId, NodeId), EngineError> {
    let hidden = params.hidden;
    let h_shape = g.shape(h_prev).to_vec();
    if h_shape.len() != 2 || h_shape[1] != hidden || g.shape(c_prev) != h_shape.as_slice() {
        return Err(EngineError::Shape {
            op: "lstm-cell",
            lhs: h_shape,
            rhs: g.shape(c_prev).to_vec(),
        });
    }
    let proj = g.matmul(x_t, params.wx)?;
    cell_from_projection(g, proj, h_prev, c_prev, params)
}

fn cell_from_projection(
    g: &mut Graph,
    x_proj: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    params: &LstmNodes,
) -> Result<(NodeId, NodeId), EngineError> {
    let hidden = params.hidden;
    let rec = g.matmul(h_prev, params.wh)?;
    let pre = g.add(x_proj, rec)?;
    let pre = g.add(pre, params.b)?;
    let i = g.slice(pre, 1, 0, hidden)?;
    let f = g.slice(pre, 1, hidden, hidden)?;
    let cand = g.slice(pre, 1, 2 * hidden, hidden)?;
    let o = g.slice(pre, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cand = g.tanh(cand)?;
    let o = g.sigmoid(o)?;
    let keep = g.hadamard(f, c_prev)?;
    let write = g.hadamard(i, cand)?;
    let c = g.add(keep, write)?;
    let squashed = g.tanh(c)?;
    let h = g.hadamard(o, squashed)?;
    Ok((h, c))
}
