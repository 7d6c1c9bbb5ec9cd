use std::fmt::Write as _;
use std::path::Path;

use super::{sequences_to_tensor, Mode, StgcnModel};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::landmarks::{normalize_sequence, select_inference_window, LandmarkSequence};
use crate::tensor::{Scalar, Tensor};

/// Per node and remaining time step, the L2 norm over channels of the final
/// unit's output, for one input `x[N, S, C_in]`. Returns `[N, S']`.
pub fn node_activations<T: Scalar>(model: &StgcnModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("expected [N, S, C], got {:?}", x.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.clone().reshape(&shape)?;
    model.check_input(&batch)?;
    let mut tape = Tape::new();
    let xv = tape.input(batch)?;
    let out = model.forward_on_tape(&mut tape, xv, Mode::Eval)?;
    let map = tape.value(out.final_map);
    let (n, s, c) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    let data = map
        .data()
        .chunks(c)
        .map(|row| {
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            sq.sqrt()
        })
        .collect();
    Tensor::new(vec![n, s], data)
}

/// Inference window of length `s`, normalized, then [`node_activations`].
pub fn node_activations_for_sequence<T: Scalar>(
    model: &StgcnModel<T>,
    seq: &LandmarkSequence,
    s: usize,
) -> Result<Tensor<T>> {
    let prepared = normalize_sequence(&select_inference_window(seq, s)?);
    let x = sequences_to_tensor::<T>(&[&prepared])?;
    let shape = x.shape()[1..].to_vec();
    node_activations(model, &x.reshape(&shape)?)
}

/// Writes `node,time,activation` rows.
pub fn write_activations_csv<T: Scalar>(path: impl AsRef<Path>, activations: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    if activations.rank() != 2 {
        return Err(Error::Shape(format!(
            "activations must be [N, S], got {:?}",
            activations.shape()
        )));
    }
    let s = activations.shape()[1];
    let mut out = String::from("node,time,activation\n");
    for (i, v) in activations.data().iter().enumerate() {
        writeln!(out, "{},{},{}", i / s, i % s, v).expect("writing to a String");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
