//! Node attention unit: squeeze-and-excitation style recalibration over
//! graph nodes.
//!
//! Each node is pooled to a scalar by its channel mean, the pooled vector is
//! passed through a two-layer bottleneck (no biases), and the resulting
//! per-node sigmoid gate rescales that node's feature vector:
//!
//! ```text
//! z = channel_mean(nodes)            z in R^N
//! s = sigmoid(Wb^T relu(Wa^T z))     s in (0,1)^N
//! out_i = s_i * nodes_i
//! ```
//!
//! The gate weights every node by how informative it is relative to the
//! others, so the unit is deliberately *not* equivariant to node
//! permutations, while a permutation of channels leaves the gates unchanged.

use crate::tensor::{
    channel_mean, channel_mean_vjp, matmul, matmul_vjp, relu, relu_vjp, sigmoid, sigmoid_vjp,
    ShapeError, Tensor,
};

/// Bottleneck width `ceil(n / reduction)`.
pub fn bottleneck_dim(n: usize, reduction: usize) -> usize {
    assert!(reduction > 0, "reduction ratio must be positive");
    n.div_ceil(reduction)
}

/// Gate weights: `wa` is N x K, `wb` is K x N, K = ceil(N / reduction).
/// Neither layer carries a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NauParams {
    pub wa: Tensor,
    pub wb: Tensor,
}

impl NauParams {
    pub fn zeros(n: usize, reduction: usize) -> NauParams {
        let k = bottleneck_dim(n, reduction);
        NauParams {
            wa: Tensor::zeros(vec![n, k]),
            wb: Tensor::zeros(vec![k, n]),
        }
    }

    pub fn init(n: usize, reduction: usize, rng: &mut crate::rng::Rng) -> NauParams {
        let k = bottleneck_dim(n, reduction);
        NauParams {
            wa: Tensor::normal(vec![n, k], rng, 1.0 / (n as f64).sqrt()),
            wb: Tensor::normal(vec![k, n], rng, 1.0 / (k as f64).sqrt()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.wa.dims()[0]
    }

    fn check(&self, nodes: &Tensor) -> Result<(), ShapeError> {
        let n = self.wa.dims()[0];
        let k = self.wa.dims()[1];
        if nodes.rank() != 2 || nodes.dims()[0] != n {
            return Err(ShapeError::Mismatch {
                op: "nau_forward",
                left: vec![n],
                right: nodes.dims().to_vec(),
            });
        }
        if self.wb.dims() != [k, n] {
            return Err(ShapeError::Mismatch {
                op: "nau_forward",
                left: vec![k, n],
                right: self.wb.dims().to_vec(),
            });
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`NauParams`].
#[derive(Debug, Clone)]
pub struct NauGrads {
    pub wa: Tensor,
    pub wb: Tensor,
}

/// Saved intermediates of one forward pass, consumed by [`nau_backward`].
#[derive(Debug, Clone)]
pub struct NauTrace {
    input: Tensor,      // N x C nodes entering the unit
    hidden_pre: Tensor, // 1 x K, Wa^T z before the ReLU
    hidden: Tensor,     // 1 x K
    scales: Tensor,     // N per-node gates
}

impl NauTrace {
    /// Per-node gate values s in (0,1)^N.
    pub fn scales(&self) -> &Tensor {
        &self.scales
    }
}

/// Applies the gate; returns the rescaled nodes and the trace.
pub fn nau_forward(nodes: &Tensor, params: &NauParams) -> Result<(Tensor, NauTrace), ShapeError> {
    params.check(nodes)?;
    let n = nodes.rows();
    let c = nodes.cols();

    let z = channel_mean(nodes)?.reshape(vec![1, n])?;
    let hidden_pre = matmul(&z, &params.wa)?; // 1 x K
    let hidden = relu(&hidden_pre);
    let gate_pre = matmul(&hidden, &params.wb)?; // 1 x N
    let scales = sigmoid(&gate_pre).reshape(vec![n])?;

    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let s = scales.data()[i];
        let row = nodes.row(i);
        for j in 0..c {
            out[i * c + j] = s * row[j];
        }
    }
    let out = Tensor::matrix(n, c, out)?;
    Ok((
        out,
        NauTrace {
            input: nodes.clone(),
            hidden_pre,
            hidden,
            scales,
        },
    ))
}

/// Pullback of [`nau_forward`]: returns the cotangent of the input nodes and
/// the parameter gradients.
///
/// The input receives two contributions: the direct rescaling path
/// (s_i * d_out) and the pooled path through the gate, which re-broadcasts
/// d(z)/C over each row.
pub fn nau_backward(
    params: &NauParams,
    trace: &NauTrace,
    d_out: &Tensor,
) -> Result<(Tensor, NauGrads), ShapeError> {
    let n = trace.input.rows();
    let c = trace.input.cols();
    if d_out.dims() != [n, c] {
        return Err(ShapeError::Mismatch {
            op: "nau_backward",
            left: vec![n, c],
            right: d_out.dims().to_vec(),
        });
    }

    // ds_i = sum_c d_out[i,c] * input[i,c]; direct input path is s_i * d_out.
    let mut d_scales = vec![0.0; n];
    let mut d_input = vec![0.0; n * c];
    for i in 0..n {
        let s = trace.scales.data()[i];
        let in_row = trace.input.row(i);
        let d_row = d_out.row(i);
        let mut acc = 0.0;
        for j in 0..c {
            acc += d_row[j] * in_row[j];
            d_input[i * c + j] = s * d_row[j];
        }
        d_scales[i] = acc;
    }

    // back through sigmoid, the Wb matmul, the ReLU, and the Wa matmul
    let scales_row = trace.scales.reshape(vec![1, n])?;
    let d_gate_pre = sigmoid_vjp(&scales_row, &Tensor::matrix(1, n, d_scales)?)?;
    let (d_hidden, d_wb) = matmul_vjp(&trace.hidden, &params.wb, &d_gate_pre)?;
    let d_hidden_pre = relu_vjp(&trace.hidden_pre, &d_hidden)?;
    let z = channel_mean(&trace.input)?.reshape(vec![1, n])?;
    let (d_z, d_wa) = matmul_vjp(&z, &params.wa, &d_hidden_pre)?;

    // pooled path: each row of the input picks up dz_i / C
    let pooled_back = channel_mean_vjp(n, c, &d_z.reshape(vec![n])?)?;
    for (slot, extra) in d_input.iter_mut().zip(pooled_back.data()) {
        *slot += extra;
    }

    Ok((
        Tensor::matrix(n, c, d_input)?,
        NauGrads {
            wa: d_wa,
            wb: d_wb,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_relative_error, FD_STEP, GRAD_TOL};
    use crate::rng::Rng;
    use crate::tensor::max_abs_diff;

    fn rand_nodes(n: usize, c: usize, seed: u64) -> Tensor {
        Tensor::normal(vec![n, c], &mut Rng::new(seed), 1.0)
    }

    #[test]
    fn bottleneck_rounds_up() {
        assert_eq!(bottleneck_dim(16, 2), 8);
        assert_eq!(bottleneck_dim(5, 2), 3);
        assert_eq!(bottleneck_dim(1, 2), 1);
    }

    #[test]
    fn zero_weights_gate_everything_at_half() {
        let nodes = rand_nodes(6, 4, 1);
        let params = NauParams::zeros(6, 2);
        let (out, trace) = nau_forward(&nodes, &params).unwrap();
        for &s in trace.scales().data() {
            assert_eq!(s, 0.5);
        }
        for (o, i) in out.data().iter().zip(nodes.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn single_node_gate_is_a_scalar_in_unit_interval() {
        let nodes = rand_nodes(1, 5, 2);
        let params = NauParams::init(1, 2, &mut Rng::new(3));
        let (out, trace) = nau_forward(&nodes, &params).unwrap();
        let s = trace.scales().data()[0];
        assert!(s > 0.0 && s < 1.0);
        for (o, i) in out.data().iter().zip(nodes.data()) {
            assert!((o - s * i).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        for seed in 0..20 {
            let nodes = rand_nodes(8, 6, seed);
            let params = NauParams::init(8, 2, &mut Rng::new(seed + 100));
            let (_, trace) = nau_forward(&nodes, &params).unwrap();
            assert!(trace.scales().data().iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn matches_independent_loop_oracle() {
        let n = 6;
        let c = 5;
        let nodes = rand_nodes(n, c, 7);
        let params = NauParams::init(n, 2, &mut Rng::new(8));
        let k = bottleneck_dim(n, 2);

        // oracle: scalar loops straight from the defining formulas
        let z: Vec<f64> = (0..n)
            .map(|i| nodes.row(i).iter().sum::<f64>() / c as f64)
            .collect();
        let mut hidden = vec![0.0; k];
        for kk in 0..k {
            let mut acc = 0.0;
            for i in 0..n {
                acc += params.wa.at2(i, kk) * z[i];
            }
            hidden[kk] = acc.max(0.0);
        }
        let mut scales = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += params.wb.at2(kk, i) * hidden[kk];
            }
            scales[i] = 1.0 / (1.0 + (-acc).exp());
        }

        let (out, trace) = nau_forward(&nodes, &params).unwrap();
        for i in 0..n {
            assert!((trace.scales().data()[i] - scales[i]).abs() <= 1e-12);
            for j in 0..c {
                assert!((out.at2(i, j) - scales[i] * nodes.at2(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let nodes = rand_nodes(5, 3, 11);
        let params = NauParams::init(5, 2, &mut Rng::new(12));
        let (_, trace) = nau_forward(&nodes, &params).unwrap();
        let (d_in, grads) = nau_backward(&params, &trace, &Tensor::zeros(vec![5, 3])).unwrap();
        assert!(d_in.data().iter().all(|&v| v == 0.0));
        assert!(grads.wa.data().iter().all(|&v| v == 0.0));
        assert!(grads.wb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_gate_backward_halves_the_cotangent() {
        // With Wa = Wb = 0 the ReLU sits exactly at zero, whose subgradient
        // is zero, so the gate path contributes nothing and the input
        // cotangent is exactly 0.5 * d_out.
        let nodes = rand_nodes(6, 4, 13);
        let params = NauParams::zeros(6, 2);
        let (_, trace) = nau_forward(&nodes, &params).unwrap();
        let d_out = rand_nodes(6, 4, 14);
        let (d_in, grads) = nau_backward(&params, &trace, &d_out).unwrap();
        for (got, want) in d_in.data().iter().zip(d_out.data()) {
            assert_eq!(*got, 0.5 * want);
        }
        assert!(grads.wa.data().iter().all(|&v| v == 0.0));
        assert!(grads.wb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 5;
        let c = 4;
        let nodes = rand_nodes(n, c, 21);
        let params = NauParams::init(n, 2, &mut Rng::new(22));
        let w = rand_nodes(n, c, 23); // random linear functional of the output

        let score_with = |nodes: &Tensor, params: &NauParams| -> f64 {
            let (out, _) = nau_forward(nodes, params).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };

        let (_, trace) = nau_forward(&nodes, &params).unwrap();
        let (d_in, grads) = nau_backward(&params, &trace, &w).unwrap();

        let num_in = central_diff(
            |v| score_with(&Tensor::matrix(n, c, v.to_vec()).unwrap(), &params),
            nodes.data(),
            FD_STEP,
        );
        assert!(max_relative_error(d_in.data(), &num_in) < GRAD_TOL);

        let k = bottleneck_dim(n, 2);
        let num_wa = central_diff(
            |v| {
                let p = NauParams {
                    wa: Tensor::matrix(n, k, v.to_vec()).unwrap(),
                    wb: params.wb.clone(),
                };
                score_with(&nodes, &p)
            },
            params.wa.data(),
            FD_STEP,
        );
        assert!(max_relative_error(grads.wa.data(), &num_wa) < GRAD_TOL);

        let num_wb = central_diff(
            |v| {
                let p = NauParams {
                    wa: params.wa.clone(),
                    wb: Tensor::matrix(k, n, v.to_vec()).unwrap(),
                };
                score_with(&nodes, &p)
            },
            params.wb.data(),
            FD_STEP,
        );
        assert!(max_relative_error(grads.wb.data(), &num_wb) < GRAD_TOL);
    }

    #[test]
    fn channel_permutation_leaves_gates_unchanged() {
        let n = 6;
        let c = 5;
        let nodes = rand_nodes(n, c, 31);
        let params = NauParams::init(n, 2, &mut Rng::new(32));
        let perm = [3usize, 0, 4, 1, 2];

        let permuted = {
            let mut data = vec![0.0; n * c];
            for i in 0..n {
                for (jnew, jold) in perm.iter().enumerate() {
                    data[i * c + jnew] = nodes.at2(i, *jold);
                }
            }
            Tensor::matrix(n, c, data).unwrap()
        };

        let (out, trace) = nau_forward(&nodes, &params).unwrap();
        let (out_p, trace_p) = nau_forward(&permuted, &params).unwrap();
        assert!(max_abs_diff(trace.scales(), trace_p.scales()) <= 1e-15);
        for i in 0..n {
            for (jnew, jold) in perm.iter().enumerate() {
                assert!((out_p.at2(i, jnew) - out.at2(i, *jold)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn node_permutation_is_not_equivariant() {
        // Swapping two rows of the input does not just swap the two gates:
        // the bottleneck weights are position-specific.
        let n = 6;
        let c = 4;
        let nodes = rand_nodes(n, c, 41);
        let params = NauParams::init(n, 2, &mut Rng::new(42));

        let mut swapped_data = nodes.data().to_vec();
        for j in 0..c {
            swapped_data.swap(j, c + j); // rows 0 and 1
        }
        let swapped = Tensor::matrix(n, c, swapped_data).unwrap();

        let (_, trace) = nau_forward(&nodes, &params).unwrap();
        let (_, trace_s) = nau_forward(&swapped, &params).unwrap();
        let mut expected = trace.scales().data().to_vec();
        expected.swap(0, 1);
        let got = trace_s.scales().data();
        let max_diff = expected
            .iter()
            .zip(got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff > 1e-6,
            "gates unexpectedly equivariant (diff {max_diff})"
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let nodes = rand_nodes(4, 3, 51);
        let params = NauParams::zeros(6, 2);
        assert!(nau_forward(&nodes, &params).is_err());
        let good = NauParams::zeros(4, 2);
        let (_, trace) = nau_forward(&nodes, &good).unwrap();
        assert!(nau_backward(&good, &trace, &Tensor::zeros(vec![4, 9])).is_err());
    }
}
