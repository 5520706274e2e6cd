//! Adaptive query aggregation: truncation-aware gating of 2D queries, mean
//! fusion back onto their 3D owners, residual, then self-attention over the
//! 3D queries.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::allocation::{scatter_mean, MappingMatrix};
use crate::error::{Error, Result};
use crate::groupattn::{AttentionMask, MultiHeadAttention};
use crate::nn::{sigmoid, Mlp, ParamInit};

/// `(C + 1) -> hidden -> C` perceptron whose output is squashed into (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mlp: Mlp,
}

impl GateParams {
    pub fn new(channels: usize, hidden: usize, init: &mut ParamInit) -> Self {
        Self {
            mlp: init.mlp(channels + 1, hidden, channels),
        }
    }

    /// Gate fixed at `sigmoid(bias)` regardless of input.
    pub fn constant(channels: usize, hidden: usize, bias: f64) -> Self {
        let mut mlp = Mlp::zeros(channels + 1, hidden, channels);
        mlp.out.bias.fill(bias);
        Self { mlp }
    }

    pub fn channels(&self) -> usize {
        self.mlp.out.out_features()
    }

    pub fn gate_row(&self, row: &[f64], center_in_view: bool) -> Vec<f64> {
        let mut input = Vec::with_capacity(row.len() + 1);
        input.extend_from_slice(row);
        input.push(if center_in_view { 1.0 } else { 0.0 });
        self.mlp.forward_row(&input).into_iter().map(sigmoid).collect()
    }
}

/// Multiplies each row by its gate. `center_in_view[j]` is false for
/// truncated columns.
pub fn gate_truncation(q2d: ArrayView2<'_, f64>, center_in_view: &[bool], params: &GateParams) -> Result<Array2<f64>> {
    if q2d.nrows() != center_in_view.len() || q2d.ncols() != params.channels() {
        return Err(Error::Shape(format!(
            "gate over {}x{} queries with {} truncation flags and width {}",
            q2d.nrows(),
            q2d.ncols(),
            center_in_view.len(),
            params.channels()
        )));
    }
    let mut out = q2d.to_owned();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let g = params.gate_row(&q2d.row(j).to_vec(), center_in_view[j]);
        for (v, gv) in row.iter_mut().zip(g) {
            *v *= gv;
        }
    }
    Ok(out)
}

/// `q3d + scatter_mean(q2d_gated)`: the input of the aggregation attention.
pub fn fuse_residual(
    q3d: ArrayView2<'_, f64>,
    q2d_gated: ArrayView2<'_, f64>,
    mapping: &MappingMatrix,
) -> Result<Array2<f64>> {
    if q3d.nrows() != mapping.n_3d() || q3d.ncols() != q2d_gated.ncols() {
        return Err(Error::Shape(format!(
            "{}x{} 3D queries for a mapping over {} rows and width {}",
            q3d.nrows(),
            q3d.ncols(),
            mapping.n_3d(),
            q2d_gated.ncols()
        )));
    }
    Ok(&q3d + &scatter_mean(mapping, q2d_gated)?)
}

/// `SelfAttn(q3d + fused)`. `mask` restricts the attention when denoise
/// queries are stacked under the match part; `None` is unmasked.
pub fn aggregate(
    q3d: ArrayView2<'_, f64>,
    q2d_gated: ArrayView2<'_, f64>,
    mapping: &MappingMatrix,
    attn: &MultiHeadAttention,
    mask: Option<&AttentionMask>,
) -> Result<Array2<f64>> {
    let x = fuse_residual(q3d, q2d_gated, mapping)?;
    attn.forward(x.view(), x.view(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn saturated_and_half_gates() {
        let q = array![[1.0, -2.0], [3.0, 4.0]];
        let one = GateParams::constant(2, 3, 800.0);
        assert_eq!(gate_truncation(q.view(), &[true, false], &one).unwrap(), q);
        let half = GateParams::constant(2, 3, 0.0);
        assert_eq!(gate_truncation(q.view(), &[true, false], &half).unwrap(), &q / 2.0);
    }

    #[test]
    fn truncation_flag_changes_gate() {
        let mut init = ParamInit::new(3);
        let params = GateParams::new(4, 8, &mut init);
        let row = [0.3, -0.1, 0.7, 0.2];
        let q = array![[0.3, -0.1, 0.7, 0.2], [0.3, -0.1, 0.7, 0.2]];
        let out = gate_truncation(q.view(), &[true, false], &params).unwrap();
        assert_ne!(out.row(0), out.row(1));

        // hand-rolled reference for the truncated row
        let input = [row[0], row[1], row[2], row[3], 0.0];
        let hidden: Vec<f64> = (0..8)
            .map(|h| {
                let s: f64 = (0..5).map(|i| params.mlp.hidden.weight[[h, i]] * input[i]).sum::<f64>()
                    + params.mlp.hidden.bias[h];
                s.max(0.0)
            })
            .collect();
        for c in 0..4 {
            let z: f64 =
                (0..8).map(|h| params.mlp.out.weight[[c, h]] * hidden[h]).sum::<f64>() + params.mlp.out.bias[c];
            let expect = row[c] / (1.0 + (-z).exp());
            assert!((out[[1, c]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_columns_is_plain_self_attention() {
        let mut init = ParamInit::new(0);
        let attn = MultiHeadAttention::new(4, 2, &mut init).unwrap();
        let q3d = array![[0.1, 0.2, 0.3, 0.4], [-0.5, 0.0, 0.5, 1.0]];
        let empty = Array2::zeros((0, 4));
        let out = aggregate(q3d.view(), empty.view(), &MappingMatrix::empty(2), &attn, None).unwrap();
        assert_eq!(out, attn.forward(q3d.view(), q3d.view(), None).unwrap());
    }

    #[test]
    fn identity_path_doubles_query() {
        let q3d = array![[1.5, -2.0, 0.25]];
        let mapping = MappingMatrix::new(1, vec![0], vec![0]).unwrap();
        let gated = gate_truncation(q3d.view(), &[true], &GateParams::constant(3, 2, 800.0)).unwrap();
        assert_eq!(fuse_residual(q3d.view(), gated.view(), &mapping).unwrap(), &q3d * 2.0);
    }

    #[test]
    fn shape_mismatch() {
        let mapping = MappingMatrix::new(2, vec![0], vec![0]).unwrap();
        let q3d = Array2::zeros((3, 2));
        let q2d = Array2::zeros((1, 2));
        assert!(fuse_residual(q3d.view(), q2d.view(), &mapping).is_err());
    }
}
