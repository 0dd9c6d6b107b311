//! Reverse pass: topological sort from the loss, then one gradient rule per
//! op. Gradients accumulate (sum) into every tensor that requires them, so a
//! tensor used twice receives both contributions.

use std::collections::HashSet;

use crate::error::{Error, Result};

use super::kernels;
use super::ops::{permute_data, Op};
use super::tensor::{Scalar, Tensor};

/// Backpropagate from a scalar loss. Interior gradients and the backward
/// graph are freed as soon as each node is processed, which bounds memory
/// across a training loop; leaf tensors keep their gradients.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    run(loss, false)
}

/// As [`backward`] but keeps the graph alive so the same forward pass can be
/// differentiated again.
pub fn backward_retain<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    run(loss, true)
}

fn run<T: Scalar>(loss: &Tensor<T>, retain: bool) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::shape(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topo_order(loss);
    loss.set_grad(vec![T::one()]);
    for t in order.iter().rev() {
        let Some(grad) = t.inner.grad.borrow_mut().take() else {
            // no gradient flowed to this node
            if !retain {
                t.take_op();
            }
            continue;
        };
        if !t.has_op() {
            // leaf: keep the accumulated gradient in place
            t.set_grad(grad);
            continue;
        }
        {
            let op_ref = t.inner.op.borrow();
            let op = op_ref.as_ref().expect("op checked above");
            apply(op, t, &grad)?;
        }
        if !retain {
            t.take_op();
        }
    }
    Ok(())
}

/// Post-order DFS over the op graph: every tensor appears after all tensors
/// it feeds into have been pushed... i.e. parents (inputs) come first, the
/// loss last. Iterative so graph depth never hits the call stack.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = t.inner.op.borrow().as_ref() {
            for p in op.parents() {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
    }
    order
}

fn accumulate_if_needed<T: Scalar>(t: &Tensor<T>, grad: Vec<T>) {
    if t.requires_grad() {
        let mut slot = t.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&grad) {
                    *e = *e + *c;
                }
            }
            None => *slot = Some(grad),
        }
    }
}

fn apply<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &[T]) -> Result<()> {
    match op {
        Op::Add(a, b) => {
            accumulate_if_needed(a, g.to_vec());
            accumulate_if_needed(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate_if_needed(a, g.to_vec());
            accumulate_if_needed(b, g.iter().map(|v| -*v).collect());
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data();
                accumulate_if_needed(a, g.iter().zip(bd.iter()).map(|(g, b)| *g * *b).collect());
            }
            if b.requires_grad() {
                let ad = a.data();
                accumulate_if_needed(b, g.iter().zip(ad.iter()).map(|(g, a)| *g * *a).collect());
            }
        }
        Op::Div(a, b) => {
            let bd = b.data();
            if a.requires_grad() {
                accumulate_if_needed(a, g.iter().zip(bd.iter()).map(|(g, b)| *g / *b).collect());
            }
            if b.requires_grad() {
                let ad = a.data();
                let gb = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(g, (a, b))| -(*g) * *a / (*b * *b))
                    .collect();
                drop(ad);
                accumulate_if_needed(b, gb);
            }
        }
        Op::AddScalar(a) => accumulate_if_needed(a, g.to_vec()),
        Op::MulScalar(a, k) => {
            accumulate_if_needed(a, g.iter().map(|v| *v * *k).collect());
        }
        Op::RsubScalar(a) => {
            accumulate_if_needed(a, g.iter().map(|v| -*v).collect());
        }
        Op::Relu(a) => {
            if a.requires_grad() {
                let ad = a.data();
                let ga = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                drop(ad);
                accumulate_if_needed(a, ga);
            }
        }
        Op::Sigmoid(a) => {
            if a.requires_grad() {
                let y = out.data();
                let ga = g
                    .iter()
                    .zip(y.iter())
                    .map(|(g, y)| *g * *y * (T::one() - *y))
                    .collect();
                drop(y);
                accumulate_if_needed(a, ga);
            }
        }
        Op::SumAll(a) => {
            accumulate_if_needed(a, vec![g[0]; a.len()]);
        }
        Op::MeanAll(a) => {
            let k = g[0] / T::from_f64(a.len() as f64);
            accumulate_if_needed(a, vec![k; a.len()]);
        }
        Op::SumPerSample(a) => {
            if a.requires_grad() {
                let n = a.shape()[0];
                let per = a.len() / n;
                let mut ga = vec![T::zero(); a.len()];
                for i in 0..n {
                    for v in &mut ga[i * per..][..per] {
                        *v = g[i];
                    }
                }
                accumulate_if_needed(a, ga);
            }
        }
        Op::Reshape(a) => accumulate_if_needed(a, g.to_vec()),
        Op::Permute { input, perm } => {
            if input.requires_grad() {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, ga) = permute_data(g, out.shape(), &inverse);
                accumulate_if_needed(input, ga);
            }
        }
        Op::ConcatChannels(parts) => {
            let (n, c_total, h, w) = out.dims4()?;
            let hw = h * w;
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape()[1];
                if p.requires_grad() {
                    let mut gp = vec![T::zero(); p.len()];
                    for b in 0..n {
                        gp[b * pc * hw..][..pc * hw]
                            .copy_from_slice(&g[(b * c_total + c_off) * hw..][..pc * hw]);
                    }
                    accumulate_if_needed(p, gp);
                }
                c_off += pc;
            }
        }
        Op::Matmul(a, b) => {
            let (bsz, m, k) = a.dims3()?;
            let n = b.shape()[2];
            if a.requires_grad() {
                let mut ga = vec![T::zero(); a.len()];
                kernels::matmul_bwd_a(g, &b.data(), bsz, m, k, n, &mut ga);
                accumulate_if_needed(a, ga);
            }
            if b.requires_grad() {
                let mut gb = vec![T::zero(); b.len()];
                kernels::matmul_bwd_b(g, &a.data(), bsz, m, k, n, &mut gb);
                accumulate_if_needed(b, gb);
            }
        }
        Op::Softmax(a) => {
            if a.requires_grad() {
                let dim = *out.shape().last().unwrap();
                let rows = out.len() / dim;
                let mut ga = vec![T::zero(); a.len()];
                kernels::softmax_bwd(&out.data(), rows, dim, g, &mut ga);
                accumulate_if_needed(a, ga);
            }
        }
        Op::Linear { input, weight, bias } => {
            let in_dim = *input.shape().last().unwrap();
            let out_dim = weight.shape()[0];
            let rows = input.len() / in_dim;
            let mut gin = vec![T::zero(); input.len()];
            let mut gw = vec![T::zero(); weight.len()];
            let mut gb = bias.as_ref().map(|b| vec![T::zero(); b.len()]);
            kernels::linear_bwd(
                &input.data(),
                &weight.data(),
                g,
                rows,
                in_dim,
                out_dim,
                &mut gin,
                &mut gw,
                gb.as_deref_mut(),
            );
            accumulate_if_needed(input, gin);
            accumulate_if_needed(weight, gw);
            if let (Some(b), Some(gb)) = (bias, gb) {
                accumulate_if_needed(b, gb);
            }
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            mean,
            invstd,
        } => {
            let dim = *input.shape().last().unwrap();
            let rows = input.len() / dim;
            let mut gin = vec![T::zero(); input.len()];
            let mut ggamma = vec![T::zero(); dim];
            let mut gbeta = vec![T::zero(); dim];
            kernels::layer_norm_bwd(
                &input.data(),
                rows,
                dim,
                mean,
                invstd,
                &gamma.data(),
                g,
                &mut gin,
                &mut ggamma,
                &mut gbeta,
            );
            accumulate_if_needed(input, gin);
            accumulate_if_needed(gamma, ggamma);
            accumulate_if_needed(beta, gbeta);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            invstd,
            batch_stats,
        } => {
            let (n, c, h, w) = input.dims4()?;
            let mut gin = vec![T::zero(); input.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            kernels::bn_bwd(
                &input.data(),
                n,
                c,
                h * w,
                mean,
                invstd,
                &gamma.data(),
                g,
                *batch_stats,
                &mut gin,
                &mut ggamma,
                &mut gbeta,
            );
            accumulate_if_needed(input, gin);
            accumulate_if_needed(gamma, ggamma);
            accumulate_if_needed(beta, gbeta);
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            dims,
        } => {
            if input.requires_grad() {
                let mut gin = vec![T::zero(); input.len()];
                kernels::conv2d_bwd_input(dims, g, &weight.data(), &mut gin);
                accumulate_if_needed(input, gin);
            }
            if weight.requires_grad() {
                let mut gw = vec![T::zero(); weight.len()];
                kernels::conv2d_bwd_weight(dims, g, &input.data(), &mut gw);
                accumulate_if_needed(weight, gw);
            }
            if let Some(b) = bias {
                if b.requires_grad() {
                    let mut gb = vec![T::zero(); b.len()];
                    kernels::conv_bwd_bias(dims.n, dims.cout, dims.out_h * dims.out_w, g, &mut gb);
                    accumulate_if_needed(b, gb);
                }
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            dims,
        } => {
            if input.requires_grad() {
                let mut gin = vec![T::zero(); input.len()];
                kernels::convt2d_bwd_input(dims, g, &weight.data(), &mut gin);
                accumulate_if_needed(input, gin);
            }
            if weight.requires_grad() {
                let mut gw = vec![T::zero(); weight.len()];
                kernels::convt2d_bwd_weight(dims, g, &input.data(), &mut gw);
                accumulate_if_needed(weight, gw);
            }
            if let Some(b) = bias {
                if b.requires_grad() {
                    let mut gb = vec![T::zero(); b.len()];
                    kernels::conv_bwd_bias(dims.n, dims.cout, dims.out_h * dims.out_w, g, &mut gb);
                    accumulate_if_needed(b, gb);
                }
            }
        }
        Op::WindowPartition { input, window, shift } => {
            if input.requires_grad() {
                let (n, c, h, w) = input.dims4()?;
                let mut gin = vec![T::zero(); input.len()];
                kernels::window_partition_map(g, &mut gin, n, c, h, w, *window, *shift, false);
                accumulate_if_needed(input, gin);
            }
        }
        Op::WindowReverse { input, window, shift } => {
            if input.requires_grad() {
                let (n, c, h, w) = out.dims4()?;
                let mut gin = vec![T::zero(); input.len()];
                kernels::window_partition_map(g, &mut gin, n, c, h, w, *window, *shift, true);
                accumulate_if_needed(input, gin);
            }
        }
    }
    Ok(())
}
