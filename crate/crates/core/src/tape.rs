//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every loss in this crate is built as a graph of tape ops so that one
//! `backward` call yields exact gradients w.r.t. the detector parameters.
//! Nodes are appended in topological order; backward walks the tape in
//! reverse. Teacher-side quantities enter as captured constants (the `_const`
//! ops), so no gradient is ever propagated into a frozen teacher.

use crate::tensor::Tensor;
use std::cell::RefCell;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar root w.r.t. every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Huber-style smooth L1: quadratic inside |d| < 1, linear outside.
fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (parameters, inputs under study).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let mut out = va;
        out.add_assign(&vb);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    /// Sum of same-shaped vars.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut out = self.value(vars[0]);
        for v in &vars[1..] {
            out.add_assign(&self.value(*v));
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.0).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                for &id in &ids {
                    sink(id, g.clone());
                }
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let out = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(vb.data.iter())
                .map(|(x, y)| x * y)
                .collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(vb.data.iter())
                        .map(|(gi, y)| gi * y)
                        .collect(),
                };
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(gi, x)| gi * x)
                        .collect(),
                };
                sink(a.0, da);
                sink(b.0, db);
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.map(|v| v * c));
            })),
        )
    }

    /// `a - t` for a captured constant `t`.
    pub fn sub_const(&self, a: Var, t: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, t.shape, "sub_const shape mismatch");
        let out = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(t.data.iter())
                .map(|(x, y)| x - y)
                .collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
            })),
        )
    }

    /// Elementwise product with a captured constant.
    pub fn mul_const(&self, a: Var, t: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, t.shape, "mul_const shape mismatch");
        let tc = t.clone();
        let out = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(t.data.iter())
                .map(|(x, y)| x * y)
                .collect(),
        };
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(tc.data.iter())
                        .map(|(gi, y)| gi * y)
                        .collect(),
                };
                sink(a.0, da);
            })),
        )
    }

    pub fn sq(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|v| v * v);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(gi, x)| 2.0 * x * gi)
                        .collect(),
                };
                sink(a.0, da);
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let oc = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(oc.data.iter())
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect(),
                };
                sink(a.0, da);
            })),
        )
    }

    /// SiLU activation `x * sigmoid(x)`; smooth everywhere, which keeps the
    /// finite-difference gradient contract free of activation kinks.
    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * sigmoid(x));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(gi, &x)| {
                            let s = sigmoid(x);
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                };
                sink(a.0, da);
            })),
        )
    }

    /// `ln(max(x, eps))`: the probability floor used inside KL terms.
    pub fn ln_floor(&self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(eps).ln());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(gi, &x)| if x > eps { gi / x } else { 0.0 })
                        .collect(),
                };
                sink(a.0, da);
            })),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape.clone();
        let out = Tensor::scalar(va.data.iter().sum());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                sink(
                    a.0,
                    Tensor {
                        shape: shape.clone(),
                        data: vec![gi; shape.iter().product()],
                    },
                );
            })),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Dot product with a captured constant, yielding a scalar.
    pub fn dot_const(&self, a: Var, t: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, t.shape, "dot_const shape mismatch");
        let tc = t.clone();
        let out = Tensor::scalar(
            va.data
                .iter()
                .zip(t.data.iter())
                .map(|(x, y)| x * y)
                .sum(),
        );
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                sink(a.0, tc.map(|y| y * gi));
            })),
        )
    }

    /// Σ smooth_l1(a_i - t_i) over all elements.
    pub fn smooth_l1_sum(&self, a: Var, target: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, target.shape, "smooth_l1 shape mismatch");
        let diffs: Vec<f64> = va
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::scalar(diffs.iter().map(|&d| smooth_l1(d)).collect::<Vec<_>>().iter().sum());
        let shape = va.shape.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                sink(
                    a.0,
                    Tensor {
                        shape: shape.clone(),
                        data: diffs.iter().map(|&d| gi * smooth_l1_grad(d)).collect(),
                    },
                );
            })),
        )
    }

    /// Mean of (a_i - t_i)^2 over all elements.
    pub fn mse_mean(&self, a: Var, target: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, target.shape, "mse shape mismatch");
        let n = va.numel() as f64;
        let diffs: Vec<f64> = va
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::scalar(diffs.iter().map(|&d| d * d).sum::<f64>() / n);
        let shape = va.shape.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                sink(
                    a.0,
                    Tensor {
                        shape: shape.clone(),
                        data: diffs.iter().map(|&d| 2.0 * d * gi / n).collect(),
                    },
                );
            })),
        )
    }

    // ---- structural ------------------------------------------------------

    /// Pick flat-index elements into a vector.
    pub fn gather(&self, a: Var, idxs: &[usize]) -> Var {
        let va = self.value(a);
        let idxs = idxs.to_vec();
        let out = Tensor::from_vec(&[idxs.len()], idxs.iter().map(|&i| va.data[i]).collect());
        let shape = va.shape.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&shape);
                for (k, &i) in idxs.iter().enumerate() {
                    da.data[i] += g.data[k];
                }
                sink(a.0, da);
            })),
        )
    }

    /// Stack flattened vars into a matrix, one row each.
    pub fn stack_rows(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "stack_rows of nothing");
        let row_len = self.value(vars[0]).numel();
        let mut data = Vec::with_capacity(vars.len() * row_len);
        for v in vars {
            let t = self.value(*v);
            assert_eq!(t.numel(), row_len, "stack_rows ragged input");
            data.extend_from_slice(&t.data);
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let shapes: Vec<Vec<usize>> = vars.iter().map(|v| self.shape(*v)).collect();
        let out = Tensor::from_vec(&[vars.len(), row_len], data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                for (r, &id) in ids.iter().enumerate() {
                    let slice = g.data[r * row_len..(r + 1) * row_len].to_vec();
                    sink(id, Tensor::from_vec(&shapes[r], slice));
                }
            })),
        )
    }

    /// `M · x` for a captured constant matrix `M` of shape `[rows, cols]`.
    pub fn linear_map_const(&self, m: &Tensor, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(m.shape.len(), 2, "linear_map_const wants a matrix");
        let (rows, cols) = (m.shape[0], m.shape[1]);
        assert_eq!(vx.numel(), cols, "linear_map_const dim mismatch");
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += m.data[r * cols + c] * vx.data[c];
            }
            out[r] = acc;
        }
        let mc = m.clone();
        let xshape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&[rows], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.data[r];
                    for c in 0..cols {
                        dx[c] += mc.data[r * cols + c] * gr;
                    }
                }
                sink(x.0, Tensor::from_vec(&xshape, dx));
            })),
        )
    }

    /// Row-wise softmax of a `[R, C]` matrix.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape.len(), 2, "softmax_rows wants a matrix");
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &va.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                out[i * c + j] = exps[j] / s;
            }
        }
        let out = Tensor::from_vec(&[r, c], out);
        let oc = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let y = &oc.data[i * c..(i + 1) * c];
                    let gy = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy.iter()).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..c {
                        da[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                sink(a.0, Tensor::from_vec(&[r, c], da));
            })),
        )
    }

    /// Mean cross-entropy of `[R, C]` logits against integer targets.
    pub fn cross_entropy_mean(&self, logits: Var, targets: &[usize]) -> Var {
        let va = self.value(logits);
        assert_eq!(va.shape.len(), 2, "cross_entropy wants a matrix");
        let (r, c) = (va.shape[0], va.shape[1]);
        assert_eq!(targets.len(), r, "one target per row");
        let targets = targets.to_vec();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &va.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for j in 0..c {
                probs[i * c + j] = exps[j] / s;
            }
            loss -= (row[targets[i]] - m - s.ln()) / r as f64;
        }
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        da[i * c + j] = gi * (probs[i * c + j] - indicator) / r as f64;
                    }
                }
                sink(logits.0, Tensor::from_vec(&[r, c], da));
            })),
        )
    }

    /// Mean binary cross-entropy of logits against 0/1 targets (numerically
    /// stable formulation).
    pub fn bce_logits_mean(&self, logits: Var, targets: &[f64]) -> Var {
        let va = self.value(logits);
        assert_eq!(va.numel(), targets.len(), "bce target length mismatch");
        let n = targets.len() as f64;
        let targets = targets.to_vec();
        let mut loss = 0.0;
        for (&z, &y) in va.data.iter().zip(targets.iter()) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= n;
        let shape = va.shape.clone();
        let zs = va.data.clone();
        self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, sink| {
                let gi = g.item();
                let da: Vec<f64> = zs
                    .iter()
                    .zip(targets.iter())
                    .map(|(&z, &y)| gi * (sigmoid(z) - y) / n)
                    .collect();
                sink(logits.0, Tensor::from_vec(&shape, da));
            })),
        )
    }

    // ---- spatial ----------------------------------------------------------

    /// 2-D convolution: input `[Cin, H, W]`, weight `[Cout, Cin, k, k]`,
    /// bias `[Cout]`, square stride and zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        assert_eq!(vx.shape.len(), 3, "conv input must be CxHxW");
        assert_eq!(vw.shape.len(), 4, "conv weight must be OxIxKxK");
        let (cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (cout, cin_w, k, k2) = (vw.shape[0], vw.shape[1], vw.shape[2], vw.shape[3]);
        assert_eq!(cin, cin_w, "conv channel mismatch");
        assert_eq!(k, k2, "conv kernel must be square");
        assert_eq!(vb.numel(), cout, "conv bias mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;

        let mut out = vec![0.0; cout * ho * wo];
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = vb.data[oc];
                    for ic in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += vx.data[ic * h * wd + iy as usize * wd + ix as usize]
                                    * vw.data[((oc * cin + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[oc * ho * wo + oy * wo + ox] = acc;
                }
            }
        }

        let xc = vx.clone();
        let wc = vw.clone();
        self.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; cin * h * wd];
                let mut dw = vec![0.0; cout * cin * k * k];
                let mut db = vec![0.0; cout];
                for oc in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g.data[oc * ho * wo + oy * wo + ox];
                            if go == 0.0 {
                                continue;
                            }
                            db[oc] += go;
                            for ic in 0..cin {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ic * h * wd + iy as usize * wd + ix as usize;
                                        let wi = ((oc * cin + ic) * k + ky) * k + kx;
                                        dx[xi] += go * wc.data[wi];
                                        dw[wi] += go * xc.data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(x.0, Tensor::from_vec(&[cin, h, wd], dx));
                sink(w.0, Tensor::from_vec(&[cout, cin, k, k], dw));
                sink(b.0, Tensor::from_vec(&[cout], db));
            })),
        )
    }

    /// Fully connected layer: `x [R, I] · w [O, I]ᵀ + b [O]` → `[R, O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        assert_eq!(vx.shape.len(), 2, "linear input must be a matrix");
        let (r, i) = (vx.shape[0], vx.shape[1]);
        let (o, i_w) = (vw.shape[0], vw.shape[1]);
        assert_eq!(i, i_w, "linear dim mismatch");
        assert_eq!(vb.numel(), o, "linear bias mismatch");
        let mut out = vec![0.0; r * o];
        for rr in 0..r {
            for oo in 0..o {
                let mut acc = vb.data[oo];
                for ii in 0..i {
                    acc += vx.data[rr * i + ii] * vw.data[oo * i + ii];
                }
                out[rr * o + oo] = acc;
            }
        }
        let xc = vx.clone();
        let wc = vw.clone();
        self.push(
            Tensor::from_vec(&[r, o], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![0.0; r * i];
                let mut dw = vec![0.0; o * i];
                let mut db = vec![0.0; o];
                for rr in 0..r {
                    for oo in 0..o {
                        let go = g.data[rr * o + oo];
                        if go == 0.0 {
                            continue;
                        }
                        db[oo] += go;
                        for ii in 0..i {
                            dx[rr * i + ii] += go * wc.data[oo * i + ii];
                            dw[oo * i + ii] += go * xc.data[rr * i + ii];
                        }
                    }
                }
                sink(x.0, Tensor::from_vec(&[r, i], dx));
                sink(w.0, Tensor::from_vec(&[o, i], dw));
                sink(b.0, Tensor::from_vec(&[o], db));
            })),
        )
    }

    /// Linear pooling of `[C, H, W]` spatial cells into `[C, P, P]` with
    /// precomputed per-output-cell weights `(spatial_index, weight)`.
    pub fn weighted_pool(&self, x: Var, weights: &[Vec<(usize, f64)>], p: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape.len(), 3, "pool input must be CxHxW");
        assert_eq!(weights.len(), p * p, "one weight list per output cell");
        let c = vx.shape[0];
        let hw = vx.shape[1] * vx.shape[2];
        let weights = weights.to_vec();
        let mut out = vec![0.0; c * p * p];
        for ch in 0..c {
            for (cell, wlist) in weights.iter().enumerate() {
                let mut acc = 0.0;
                for &(si, wt) in wlist {
                    acc += vx.data[ch * hw + si] * wt;
                }
                out[ch * p * p + cell] = acc;
            }
        }
        let shape = vx.shape.clone();
        self.push(
            Tensor::from_vec(&[c, p, p], out),
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(&shape);
                for ch in 0..c {
                    for (cell, wlist) in weights.iter().enumerate() {
                        let go = g.data[ch * p * p + cell];
                        if go == 0.0 {
                            continue;
                        }
                        for &(si, wt) in wlist {
                            dx.data[ch * hw + si] += go * wt;
                        }
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Mean over the channel axis of `[C, P, P]` → `[P, P]`.
    pub fn channel_mean(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape.len(), 3, "channel_mean wants CxPxP");
        let (c, p1, p2) = (va.shape[0], va.shape[1], va.shape[2]);
        let n = p1 * p2;
        let mut out = vec![0.0; n];
        for ch in 0..c {
            for i in 0..n {
                out[i] += va.data[ch * n + i];
            }
        }
        for v in out.iter_mut() {
            *v /= c as f64;
        }
        self.push(
            Tensor::from_vec(&[p1, p2], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; c * n];
                for ch in 0..c {
                    for i in 0..n {
                        da[ch * n + i] = g.data[i] / c as f64;
                    }
                }
                sink(a.0, Tensor::from_vec(&[c, p1, p2], da));
            })),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = nodes[i].backward.as_ref() {
                back(&g, &mut |parent, contrib| {
                    match grads[parent].as_mut() {
                        Some(acc) => acc.add_assign(&contrib),
                        None => grads[parent] = Some(contrib),
                    }
                });
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of `f`'s gradient w.r.t. one leaf.
    fn check_grad(
        build: impl Fn(&Tape, Var) -> Var,
        x0: Tensor,
        step: f64,
        tol: f64,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y);
        let gx = grads.get(x).expect("leaf gradient").clone();

        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data[i] += step;
            let mut minus = x0.clone();
            minus.data[i] -= step;
            let tp = Tape::new();
            let fp = build(&tp, tp.leaf(plus));
            let tm = Tape::new();
            let fm = build(&tm, tm.leaf(minus));
            let fd = (tp.value(fp).item() - tm.value(fm).item()) / (2.0 * step);
            let ad = gx.data[i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                rel < tol,
                "grad mismatch at {i}: fd={fd:.10e} ad={ad:.10e} rel={rel:.3e}"
            );
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&[6], &mut rng);
        check_grad(
            |t, x| {
                let s = t.silu(x);
                let q = t.sq(s);
                let g = t.sigmoid(q);
                t.mean(g)
            },
            x0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn grad_mul_and_consts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_tensor(&[5], &mut rng);
        let c = rand_tensor(&[5], &mut rng);
        check_grad(
            move |t, x| {
                let a = t.sub_const(x, &c);
                let b = t.mul_const(a, &c);
                let d = t.mul(b, a);
                t.sum(d)
            },
            x0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_and_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&[3, 4], &mut rng);
        check_grad(
            |t, x| t.cross_entropy_mean(x, &[1, 3, 0]),
            x0.clone(),
            1e-4,
            1e-6,
        );
        let probs_target = Tensor::from_vec(&[3, 4], vec![0.1; 12]);
        check_grad(
            move |t, x| {
                let s = t.softmax_rows(x);
                let l = t.ln_floor(s, 1e-12);
                t.dot_const(l, &probs_target)
            },
            x0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn grad_bce_smooth_l1_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_tensor(&[7], &mut rng);
        check_grad(
            |t, x| t.bce_logits_mean(x, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]),
            x0.clone(),
            1e-4,
            1e-6,
        );
        // keep diffs away from the |d| = 1 kink
        let target = x0.map(|v| v + 0.4);
        check_grad(
            move |t, x| t.smooth_l1_sum(x, &target),
            x0.clone(),
            1e-4,
            1e-6,
        );
        let target2 = x0.map(|v| v * 0.5);
        check_grad(move |t, x| t.mse_mean(x, &target2), x0, 1e-4, 1e-6);
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&[2, 5, 5], &mut rng);
        let w0 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b0 = rand_tensor(&[3], &mut rng);
        // check input gradient
        let (wc, bc) = (w0.clone(), b0.clone());
        check_grad(
            move |t, x| {
                let w = t.leaf(wc.clone());
                let b = t.leaf(bc.clone());
                let y = t.conv2d(x, w, b, 2, 1);
                let s = t.silu(y);
                t.sum(s)
            },
            x0.clone(),
            1e-4,
            1e-6,
        );
        // check weight gradient
        let xc = x0;
        let bc2 = b0;
        check_grad(
            move |t, w| {
                let x = t.leaf(xc.clone());
                let b = t.leaf(bc2.clone());
                let y = t.conv2d(x, w, b, 1, 1);
                t.mean(y)
            },
            w0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn grad_linear_stack_gather_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&[2, 4, 4], &mut rng);
        let w0 = rand_tensor(&[3, 8], &mut rng);
        let b0 = rand_tensor(&[3], &mut rng);
        let weights: Vec<Vec<(usize, f64)>> = (0..4)
            .map(|i| vec![(i, 0.5), (i + 4, 0.25), (i + 8, 0.25)])
            .collect();
        check_grad(
            move |t, x| {
                let pooled = t.weighted_pool(x, &weights, 2); // [2,2,2]
                let cm = t.channel_mean(pooled); // [2,2]
                let row = t.stack_rows(&[cm, cm]); // [2,4]
                let g = t.gather(row, &[0, 3, 5]);
                let s = t.sum(g);
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                let flat = t.stack_rows(&[pooled]); // [1,8]
                let lin = t.linear(flat, w, b); // [1,3]
                let m = t.mean(lin);
                t.add(s, m)
            },
            x0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn grad_linear_map_const() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&[4], &mut rng);
        let m = rand_tensor(&[3, 4], &mut rng);
        check_grad(
            move |t, x| {
                let y = t.linear_map_const(&m, x);
                let q = t.sq(y);
                t.sum(q)
            },
            x0,
            1e-4,
            1e-6,
        );
    }

    #[test]
    fn backward_accumulates_shared_subgraph() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.5, -0.5]));
        let a = tape.scale(x, 2.0);
        let b = tape.mul(a, a); // (2x)^2 -> d/dx = 8x
        let s = tape.sum(b);
        let g = tape.backward(s);
        let gx = g.get(x).unwrap();
        assert!((gx.data[0] - 12.0).abs() < 1e-12);
        assert!((gx.data[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn random_op_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..5 {
            let x0 = rand_tensor(&[3, 3], &mut rng);
            let c = rand_tensor(&[3, 3], &mut rng);
            let seed_targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
            let tgt = seed_targets.clone();
            let cc = c.clone();
            check_grad(
                move |t, x| {
                    let sm = t.softmax_rows(x);
                    let l1 = t.dot_const(sm, &cc);
                    let ce = t.cross_entropy_mean(x, &tgt);
                    let sig = t.sigmoid(x);
                    let m = t.mean(sig);
                    let parts = [l1, ce, m];
                    t.add_n(&parts)
                },
                x0,
                1e-4,
                1e-5,
            );
            let _ = trial;
        }
    }
}
