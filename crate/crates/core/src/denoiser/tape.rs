//! A small reverse-mode autodiff tape over row-major matrices.

use std::rc::Rc;

use crate::attention::{apply_rotary, attend, head_columns};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + row`, the `1 x d` row broadcast over every row of `a`.
    AddRow(Var, Var),
    Silu(Var),
    Rope {
        x: Var,
        positions: Rc<Vec<Option<[f64; 2]>>>,
        heads: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Tensor>,
        heads: usize,
        head_dim: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    /// Mean squared difference to a constant target.
    Mse {
        x: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if x.rank() != 2 || r.shape() != [1, x.shape()[1]] {
            return Err(TensorError::Shape {
                op: "add_row",
                left: x.shape().to_vec(),
                right: r.shape().to_vec(),
            });
        }
        let mut value = x.clone();
        for out in value.rows_mut() {
            for (o, b) in out.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        self.push(value, Op::Silu(a))
    }

    pub fn rope(
        &mut self,
        x: Var,
        positions: Rc<Vec<Option<[f64; 2]>>>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let mut value = self.value(x).clone();
        apply_rotary(&mut value, &positions, heads, head_dim, false)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions,
                heads,
                head_dim,
            },
        ))
    }

    /// Multi-head attention with an additive bias; the weights of every head
    /// are kept for the backward pass and for inspection.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: &Tensor,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let (out, probs) = attend(
            self.value(q),
            self.value(k),
            self.value(v),
            bias,
            heads,
            head_dim,
        )?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                heads,
                head_dim,
            },
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let diff = self.value(x).sub(target)?;
        let value =
            Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64);
        Ok(self.push(
            value,
            Op::Mse {
                x,
                target: target.clone(),
            },
        ))
    }

    /// Gradients of the scalar `output` with respect to every recorded value.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::AddRow(a, row) => {
                    let d = g.shape()[1];
                    let mut gr = vec![0.0; d];
                    for r in g.rows() {
                        for (acc, x) in gr.iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *row, Tensor::new(vec![1, d], gr)?)?;
                }
                Op::Silu(a) => {
                    let ga = self.value(*a).zip_with(&g, |x, gx| silu_grad(x) * gx)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Rope {
                    x,
                    positions,
                    heads,
                    head_dim,
                } => {
                    let mut gx = g.clone();
                    apply_rotary(&mut gx, positions, *heads, *head_dim, true)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    probs,
                    heads,
                    head_dim,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        *heads,
                        *head_dim,
                    )?;
                    accumulate(&mut grads, *q, gq)?;
                    accumulate(&mut grads, *k, gk)?;
                    accumulate(&mut grads, *v, gv)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).shape()[0];
                        accumulate(&mut grads, p, g.slice_rows(start, len)?)?;
                        start += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let slot =
                        grads[x.0].get_or_insert_with(|| Tensor::zeros(self.value(*x).shape()));
                    let w = slot.shape()[1];
                    for (acc, v) in slot.data_mut()[start * w..start * w + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *acc += v;
                    }
                }
                Op::Mse { x, target } => {
                    let n = target.len() as f64;
                    let scale = 2.0 * g.data()[0] / n;
                    let gx = self.value(*x).zip_with(target, |a, b| scale * (a - b))?;
                    accumulate(&mut grads, *x, gx)?;
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => *existing = existing.add(&g)?,
        slot => *slot = Some(g),
    }
    Ok(())
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[Tensor],
    g: &Tensor,
    heads: usize,
    head_dim: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    for (h, p) in probs.iter().enumerate().take(heads) {
        let go_t = head_columns(g, h, head_dim).transpose()?;
        let v_t = head_columns(v, h, head_dim).transpose()?;
        // dP = dO V^T; dS = P (dP - rowsum(P dP)) / sqrt(d)
        let mut ds = head_columns(g, h, head_dim).matmul(&v_t)?;
        for (drow, prow) in ds.rows_mut().zip(p.rows()) {
            let inner: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (d, &w) in drow.iter_mut().zip(prow) {
                *d = w * (*d - inner) * scale;
            }
        }
        // Transposed products keep the long token dimension innermost.
        let gv_t = go_t.matmul(p)?;
        let gq_t = head_columns(k, h, head_dim)
            .transpose()?
            .matmul(&ds.transpose()?)?;
        let gk_t = head_columns(q, h, head_dim).transpose()?.matmul(&ds)?;
        for (dst, src) in [(&mut gq, &gq_t), (&mut gk, &gk_t), (&mut gv, &gv_t)] {
            for d in 0..head_dim {
                for (i, &x) in src.row(d).iter().enumerate() {
                    dst.row_mut(i)[h * head_dim + d] = x;
                }
            }
        }
    }
    Ok((gq, gk, gv))
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn numeric_check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data()[0]
        };
        let h = 1e-6;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[idx], input);
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                    "input {idx} elem {e}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = Rng::new(1);
        let inputs = vec![
            Tensor::randn(&[3, 4], &mut rng),
            Tensor::randn(&[4, 2], &mut rng),
            Tensor::randn(&[1, 2], &mut rng),
        ];
        let target = Tensor::randn(&[3, 2], &mut rng);
        numeric_check(
            |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let b = t.add_row(m, v[2]).unwrap();
                let s = t.silu(b);
                let both = t.add(s, m).unwrap();
                t.mse(both, &target).unwrap()
            },
            &inputs,
        );
    }

    #[test]
    fn attention_rope_and_row_ops_gradients() {
        let mut rng = Rng::new(2);
        let (heads, hd) = (2, 4);
        let inputs = vec![
            Tensor::randn(&[3, 8], &mut rng),
            Tensor::randn(&[2, 8], &mut rng),
            Tensor::randn(&[5, 8], &mut rng),
        ];
        let mut bias = Tensor::zeros(&[5, 5]);
        bias.set(&[0, 4], crate::tensor::BLOCKED);
        bias.set(&[3, 1], 0.7);
        let positions = Rc::new(vec![
            Some([0.0, 1.0]),
            Some([2.0, 3.0]),
            None,
            Some([1.0, 0.0]),
            None,
        ]);
        let target = Tensor::randn(&[2, 8], &mut rng);
        numeric_check(
            |t, v| {
                let x = t.concat_rows(&[v[0], v[1]]).unwrap();
                let q = t.rope(x, positions.clone(), heads, hd).unwrap();
                let k = t.rope(v[2], positions.clone(), heads, hd).unwrap();
                let a = t.attention(q, k, v[2], &bias, heads, hd).unwrap();
                let s = t.slice_rows(a, 2, 2).unwrap();
                t.mse(s, &target).unwrap()
            },
            &inputs,
        );
    }
}
