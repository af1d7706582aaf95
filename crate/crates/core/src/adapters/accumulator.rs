use super::{AdapterMethod, HeadKind};
use crate::backbone::{block_forward, linear, ClsTrace};
use crate::numerics::{Element, NumericError, ParamSource, Tape, Var};

/// Runs the Accumulator blocks over `[z_client, z_cls^0 + p'_0, ..., z_cls^l + p'_l]`
/// and returns `h^l` with shape `[B, l + 2, d]`.
pub fn accumulate<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &(impl ParamSource<T> + ?Sized),
    method: &AdapterMethod,
    heads: usize,
    trace: &ClsTrace<'t, T>,
) -> Result<Var<'t, T>, NumericError> {
    let pos = tape.param(params, "acc.layer_pos")?;
    let rows = pos.shape()[0];
    if trace.len() > rows {
        return Err(NumericError::Index {
            op: "accumulate",
            index: trace.len() - 1,
            len: rows,
        });
    }
    let b = trace.last().shape()[0];
    let mut seq = Vec::with_capacity(trace.len() + 1);
    seq.push(tape.param(params, "acc.client_token")?.expand(b)?);
    for (i, z) in trace.tokens().iter().enumerate() {
        seq.push(z.add(&pos.row(i)?)?);
    }
    let mut h = Var::stack_tokens(&seq)?;
    for k in 0..method.depth {
        h = block_forward(tape, params, &format!("acc.blocks.{k}"), heads, &h, None)?;
    }
    Ok(h)
}

/// The last element of `h^l`, which takes the CLS slot before block `l + 1`.
pub fn replacement_token<'t, T: Element>(h: &Var<'t, T>) -> Result<Var<'t, T>, NumericError> {
    let last = h.shape()[1] - 1;
    h.select_token(last)
}

/// Shared-head logits at an exit: `head(h^l_0 + z_cls^l)`, or `head(h^l_0)`
/// when the residual is disabled. `z_cls` is the token emitted by the block.
pub fn predict_at_exit<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &(impl ParamSource<T> + ?Sized),
    method: &AdapterMethod,
    z_cls: &Var<'t, T>,
    h: &Var<'t, T>,
) -> Result<Var<'t, T>, NumericError> {
    let mut x = h.select_token(0)?;
    if method.residual {
        x = x.add(z_cls)?;
    }
    match method.head_kind {
        HeadKind::Linear => linear(tape, params, "head.fc", &x),
        HeadKind::Mlp => {
            let hidden = linear(tape, params, "head.fc1", &x)?.gelu()?;
            linear(tape, params, "head.fc2", &hidden)
        }
    }
}
