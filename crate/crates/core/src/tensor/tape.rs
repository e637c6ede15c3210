use std::cell::RefCell;

use super::gemm::{matmul_into, Transpose};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    AddTiled {
        x: Var,
        t: Var,
    },
    ChannelBias {
        x: Var,
        bias: Var,
        channels: usize,
        plane: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    AvgPool2 {
        x: Var,
        dims: [usize; 4],
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    Reshape {
        x: Var,
    },
    StackTokens {
        parts: Vec<Var>,
        rows: usize,
        d: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    Sum {
        x: Var,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Record of primitive operations, appended in execution order.
///
/// Nodes only ever reference earlier nodes, so the record is topologically
/// sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `param` if it is trainable.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        if !param.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => param.accumulate_grad(g),
            None => param.accumulate_grad(&vec![0.0; param.numel()]),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf. Trainable tensors receive gradients.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.shape_of(v)
    }

    pub fn value(&self, v: Var) -> Vec<f32> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Whether each ReLU input recorded so far is positive, in tape order.
    /// Two evaluations with equal patterns lie in the same linear region of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&nodes[x.0].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|x| *x > 0.0))
            .collect()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(&nodes[v.0].shape, nodes[v.0].value.clone()).expect("node holds a valid tensor")
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            matmul_into(
                &nodes[a.0].value,
                Transpose::No,
                &nodes[b.0].value,
                Transpose::No,
                &mut out,
                m,
                k,
                n,
                false,
            );
        }
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("add", a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.iter().zip(&nodes[b.0].value).map(|(x, y)| x + y).collect()
        };
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("hadamard", a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.iter().zip(&nodes[b.0].value).map(|(x, y)| x * y).collect()
        };
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Hadamard { a, b }))
    }

    pub fn scale(&self, x: Var, c: f32) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|v| v * c).collect())
        };
        let rg = self.grad_flag(&[x]);
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    pub fn relu(&self, x: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|v| v.max(0.0)).collect())
        };
        let rg = self.grad_flag(&[x]);
        self.push(shape, out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|&v| sigmoid(v)).collect())
        };
        let rg = self.grad_flag(&[x]);
        self.push(shape, out, rg, Op::Sigmoid { x })
    }

    /// `x + t` where `t` is repeated cyclically over the flat layout of `x`
    /// (a bias `[d]` over `[n, d]`, a table `[L, d]` over `[B·L, d]`).
    pub fn add_tiled(&self, x: Var, t: Var) -> Result<Var> {
        let (sx, st) = (self.shape_of(x), self.shape_of(t));
        let (nx, nt) = (sx.iter().product::<usize>(), st.iter().product::<usize>());
        if nt == 0 || nx % nt != 0 || st.len() > sx.len() || st.last() != sx.last() {
            return Err(TensorError::ShapeMismatch {
                op: "add_tiled",
                lhs: sx,
                rhs: st,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[t.0].value;
            nodes[x.0]
                .value
                .chunks_exact(nt)
                .flat_map(|row| row.iter().zip(tv).map(|(a, b)| a + b))
                .collect()
        };
        let rg = self.grad_flag(&[x, t]);
        Ok(self.push(sx, out, rg, Op::AddTiled { x, t }))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape_of(x), self.shape_of(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (channels, plane) = (sx[1], sx[2] * sx[3]);
        let out = {
            let nodes = self.nodes.borrow();
            let bv = &nodes[bias.0].value;
            let mut out = nodes[x.0].value.clone();
            for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let b = bv[i % channels];
                chunk.iter_mut().for_each(|v| *v += b);
            }
            out
        };
        let rg = self.grad_flag(&[x, bias]);
        Ok(self.push(sx, out, rg, Op::ChannelBias { x, bias, channels, plane }))
    }

    /// Cross-correlation of `x [b,c,h,w]` with `kernel [o,c,kh,kw]`.
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape_of(x), self.shape_of(kernel));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (hp, wp) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
        if sk[2] > hp || sk[3] > wp {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("kernel {}x{} exceeds padded input {hp}x{wp}", sk[2], sk[3]),
            });
        }
        if (hp - sk[2]) % stride != 0 || (wp - sk[3]) % stride != 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("stride {stride} does not tile padded input {hp}x{wp}"),
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
            out_h: (hp - sk[2]) / stride + 1,
            out_w: (wp - sk[3]) / stride + 1,
        };
        let keep_cols = self.grad_flag(&[kernel]);
        let (patch, plane) = (geom.patch_len(), geom.out_plane());
        let mut out = vec![0.0; geom.batch * geom.out_ch * plane];
        let mut saved = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let kv = &nodes[kernel.0].value;
            let mut cols = vec![0.0; patch * plane];
            let in_img = geom.in_ch * geom.height * geom.width;
            for b in 0..geom.batch {
                im2col(&xv[b * in_img..(b + 1) * in_img], &geom, &mut cols);
                let ob = &mut out[b * geom.out_ch * plane..(b + 1) * geom.out_ch * plane];
                matmul_into(kv, Transpose::No, &cols, Transpose::No, ob, geom.out_ch, patch, plane, false);
                if keep_cols {
                    saved.extend_from_slice(&cols);
                }
            }
        }
        let rg = self.grad_flag(&[x, kernel]);
        Ok(self.push(
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                x,
                k: kernel,
                geom,
                cols: saved,
            },
        ))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || !sx[2].is_multiple_of(2) || !sx[3].is_multiple_of(2) {
            return Err(TensorError::Dimension {
                op: "avg_pool2",
                msg: format!("needs NCHW with even spatial dims, got {sx:?}"),
            });
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * oh * ow];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            for p in 0..planes {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * y * w + 2 * xx;
                        dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                    }
                }
            }
        }
        let rg = self.grad_flag(&[x]);
        Ok(self.push(
            vec![sx[0], sx[1], oh, ow],
            out,
            rg,
            Op::AvgPool2 {
                x,
                dims: [sx[0], sx[1], h, w],
            },
        ))
    }

    /// Mean over the spatial axes: `[b,c,h,w] -> [b,c]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.len() != 4 {
            return Err(TensorError::Dimension {
                op: "global_avg_pool",
                msg: format!("needs NCHW, got {sx:?}"),
            });
        }
        let plane = sx[2] * sx[3];
        let out = {
            let nodes = self.nodes.borrow();
            nodes[x.0]
                .value
                .chunks_exact(plane)
                .map(|c| c.iter().sum::<f32>() / plane as f32)
                .collect()
        };
        let rg = self.grad_flag(&[x]);
        Ok(self.push(vec![sx[0], sx[1]], out, rg, Op::GlobalAvgPool { x, plane }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape_of(x);
        if sx.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { x }))
    }

    /// Interleaves `K` tensors of shape `[B, d]` into a token matrix
    /// `[B·K, d]` whose row `b·K + j` is row `b` of `parts[j]`.
    pub fn stack_tokens(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Dimension {
                op: "stack_tokens",
                msg: "no parts".into(),
            });
        };
        let s0 = self.shape_of(first);
        if s0.len() != 2 {
            return Err(TensorError::Dimension {
                op: "stack_tokens",
                msg: format!("parts must be [B, d], got {s0:?}"),
            });
        }
        for &p in &parts[1..] {
            let sp = self.shape_of(p);
            if sp != s0 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_tokens",
                    lhs: s0,
                    rhs: sp,
                });
            }
        }
        let (rows, d, k) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; rows * k * d];
        {
            let nodes = self.nodes.borrow();
            for (j, p) in parts.iter().enumerate() {
                for (b, row) in nodes[p.0].value.chunks_exact(d).enumerate() {
                    out[(b * k + j) * d..(b * k + j + 1) * d].copy_from_slice(row);
                }
            }
        }
        let rg = self.grad_flag(parts);
        Ok(self.push(
            vec![rows * k, d],
            out,
            rg,
            Op::StackTokens {
                parts: parts.to_vec(),
                rows,
                d,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let sx = self.shape_of(x);
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            let sp = self.shape_of(p);
            if sp != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: sp,
                });
            }
        }
        let n = sx.iter().product::<usize>();
        let mut xhat = vec![0.0; n];
        let mut rstd = vec![0.0; n / d];
        let mut out = vec![0.0; n];
        {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            for (r, row) in xv.chunks_exact(d).enumerate() {
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out[r * d + c] = g[c] * h + b[c];
                }
            }
        }
        let rg = self.grad_flag(&[x, gamma, beta]);
        if !rg {
            xhat.clear();
            rstd.clear();
        }
        Ok(self.push(
            sx,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` for a single
    /// sequence `[L, d]`.
    pub fn softmax_attention(&self, q: Var, k: Var, v: Var) -> Result<Var> {
        let sq = self.shape_of(q);
        if sq.len() != 2 {
            return Err(TensorError::Dimension {
                op: "softmax_attention",
                msg: format!("expects [L, d], got {sq:?}"),
            });
        }
        self.attention(q, k, v, sq[0], 1)
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[B·seq_len, d]`; head `h` uses feature columns
    /// `h·d/heads .. (h+1)·d/heads` and outputs are written back to the same
    /// columns.
    pub fn attention(&self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let sq = self.shape_of(q);
        for other in [k, v] {
            let so = self.shape_of(other);
            if so != sq {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: sq,
                    rhs: so,
                });
            }
        }
        if sq.len() != 2 || seq_len == 0 || heads == 0 || !sq[0].is_multiple_of(seq_len) || !sq[1].is_multiple_of(heads) {
            return Err(TensorError::Dimension {
                op: "attention",
                msg: format!("shape {sq:?} incompatible with seq_len {seq_len}, heads {heads}"),
            });
        }
        let (rows, d) = (sq[0], sq[1]);
        let (batch, dh, l) = (rows / seq_len, d / heads, seq_len);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; batch * heads * l * l];
        let mut out = vec![0.0; rows * d];
        {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            for s in 0..batch {
                for h in 0..heads {
                    let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                    let col = h * dh;
                    for i in 0..l {
                        let qi = &qv[(s * l + i) * d + col..(s * l + i) * d + col + dh];
                        let row = &mut p[i * l..(i + 1) * l];
                        for (j, slot) in row.iter_mut().enumerate() {
                            let kj = &kv[(s * l + j) * d + col..(s * l + j) * d + col + dh];
                            *slot = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>();
                        }
                        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let mut z = 0.0;
                        for slot in row.iter_mut() {
                            *slot = (*slot - mx).exp();
                            z += *slot;
                        }
                        row.iter_mut().for_each(|slot| *slot /= z);
                        let oi = &mut out[(s * l + i) * d + col..(s * l + i) * d + col + dh];
                        for (j, &pij) in row.iter().enumerate() {
                            let vj = &vv[(s * l + j) * d + col..(s * l + j) * d + col + dh];
                            oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                        }
                    }
                }
            }
        }
        let rg = self.grad_flag(&[q, k, v]);
        Ok(self.push(
            sq,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.iter().sum::<f32>();
        let rg = self.grad_flag(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Weighted binary cross-entropy on logits:
    /// `(1/n) Σ wᵢ·[softplus(zᵢ) − tᵢ·zᵢ]`, i.e. `−(1/n) Σ wᵢ[tᵢ log σ(zᵢ) + (1−tᵢ) log(1−σ(zᵢ))]`.
    /// Targets may be soft (any value in `[0, 1]`).
    pub fn bce_with_logits(&self, z: Var, targets: &[f32], weights: Option<&[f32]>) -> Result<Var> {
        let sz = self.shape_of(z);
        let n: usize = sz.iter().product();
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: sz,
                rhs: vec![targets.len()],
            });
        }
        let weights = weights.map_or_else(|| vec![1.0; n], <[f32]>::to_vec);
        let loss = {
            let nodes = self.nodes.borrow();
            let zv = &nodes[z.0].value;
            let mut acc = 0.0f32;
            for i in 0..n {
                acc += weights[i] * (softplus(zv[i]) - targets[i] * zv[i]);
            }
            acc / n as f32
        };
        let rg = self.grad_flag(&[z]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
                weights,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.0].shape;
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        // Only leaves are of interest to callers.
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if wants(nodes, *a) {
                let mut da = vec![0.0; m * k];
                matmul_into(g, Transpose::No, &nodes[b.0].value, Transpose::Yes, &mut da, m, n, k, false);
                accumulate(nodes, grads, *a, da);
            }
            if wants(nodes, *b) {
                let mut db = vec![0.0; k * n];
                matmul_into(&nodes[a.0].value, Transpose::Yes, g, Transpose::No, &mut db, k, m, n, false);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Hadamard { a, b } => {
            if wants(nodes, *a) {
                let da = g.iter().zip(&nodes[b.0].value).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, da);
            }
            if wants(nodes, *b) {
                let db = g.iter().zip(&nodes[a.0].value).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect());
        }
        Op::Relu { x } => {
            let dx = g
                .iter()
                .zip(&nodes[x.0].value)
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sigmoid { x } => {
            let dx = g.iter().zip(&node.value).map(|(gv, s)| gv * s * (1.0 - s)).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::AddTiled { x, t } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if wants(nodes, *t) {
                let nt = nodes[t.0].value.len();
                let mut dt = vec![0.0; nt];
                for chunk in g.chunks_exact(nt) {
                    dt.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, grads, *t, dt);
            }
        }
        Op::ChannelBias { x, bias, channels, plane } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if wants(nodes, *bias) {
                let mut db = vec![0.0; *channels];
                for (i, chunk) in g.chunks_exact(*plane).enumerate() {
                    db[i % channels] += chunk.iter().sum::<f32>();
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Conv2d { x, k, geom, cols } => {
            let (patch, plane) = (geom.patch_len(), geom.out_plane());
            let out_img = geom.out_ch * plane;
            if wants(nodes, *k) {
                let mut dk = vec![0.0; geom.out_ch * patch];
                for b in 0..geom.batch {
                    matmul_into(
                        &g[b * out_img..(b + 1) * out_img],
                        Transpose::No,
                        &cols[b * patch * plane..(b + 1) * patch * plane],
                        Transpose::Yes,
                        &mut dk,
                        geom.out_ch,
                        plane,
                        patch,
                        true,
                    );
                }
                accumulate(nodes, grads, *k, dk);
            }
            if wants(nodes, *x) {
                let in_img = geom.in_ch * geom.height * geom.width;
                let mut dx = vec![0.0; geom.batch * in_img];
                let mut dcols = vec![0.0; patch * plane];
                let kv = &nodes[k.0].value;
                for b in 0..geom.batch {
                    matmul_into(
                        kv,
                        Transpose::Yes,
                        &g[b * out_img..(b + 1) * out_img],
                        Transpose::No,
                        &mut dcols,
                        patch,
                        geom.out_ch,
                        plane,
                        false,
                    );
                    col2im_add(&dcols, geom, &mut dx[b * in_img..(b + 1) * in_img]);
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::AvgPool2 { x, dims } => {
            let [n, c, h, w] = *dims;
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let gv = 0.25 * src[y * ow + xx];
                        let i = 2 * y * w + 2 * xx;
                        dst[i] += gv;
                        dst[i + 1] += gv;
                        dst[i + w] += gv;
                        dst[i + w + 1] += gv;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GlobalAvgPool { x, plane } => {
            let inv = 1.0 / *plane as f32;
            let dx = g.iter().flat_map(|gv| std::iter::repeat_n(gv * inv, *plane)).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::StackTokens { parts, rows, d } => {
            let k = parts.len();
            for (j, p) in parts.iter().enumerate() {
                if wants(nodes, *p) {
                    let mut dp = vec![0.0; rows * d];
                    for b in 0..*rows {
                        dp[b * d..(b + 1) * d].copy_from_slice(&g[(b * k + j) * d..(b * k + j + 1) * d]);
                    }
                    accumulate(nodes, grads, *p, dp);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[gamma.0].value.len();
            let gam = &nodes[gamma.0].value;
            if wants(nodes, *beta) {
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                accumulate(nodes, grads, *beta, db);
            }
            if wants(nodes, *gamma) {
                let mut dg = vec![0.0; d];
                for (row, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        dg[c] += row[c] * hrow[c];
                    }
                }
                accumulate(nodes, grads, *gamma, dg);
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; g.len()];
                for (r, (row, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = row[c] * gam[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[c];
                    }
                    mean_dh /= d as f32;
                    mean_dh_h /= d as f32;
                    for c in 0..d {
                        let dh = row[c] * gam[c];
                        dx[r * d + c] = rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        } => {
            let (l, heads) = (*seq_len, *heads);
            let d = node.shape[1];
            let rows = node.shape[0];
            let (batch, dh) = (rows / l, d / heads);
            let scale = 1.0 / (dh as f32).sqrt();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; l * l];
            for s in 0..batch {
                for h in 0..heads {
                    let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                    let col = h * dh;
                    let at = |i: usize| (s * l + i) * d + col;
                    for i in 0..l {
                        let gi = &g[at(i)..at(i) + dh];
                        for j in 0..l {
                            let pij = p[i * l + j];
                            let vj = &vv[at(j)..at(j) + dh];
                            dp[i * l + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let dvj = &mut dv[at(j)..at(j) + dh];
                            dvj.iter_mut().zip(gi).for_each(|(o, x)| *o += pij * x);
                        }
                    }
                    for i in 0..l {
                        let row_p = &p[i * l..(i + 1) * l];
                        let dot: f32 = row_p.iter().zip(&dp[i * l..(i + 1) * l]).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            let ds = row_p[j] * (dp[i * l + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[at(i) + c] += ds * kv[at(j) + c];
                                dk[at(j) + c] += ds * qv[at(i) + c];
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
        Op::Sum { x } => {
            let n = nodes[x.0].value.len();
            accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::BceWithLogits { z, targets, weights } => {
            let zv = &nodes[z.0].value;
            let n = zv.len() as f32;
            let dz = zv
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((zi, ti), wi)| g[0] * wi * (sigmoid(*zi) - ti) / n)
                .collect();
            accumulate(nodes, grads, *z, dz);
        }
    }
}

fn im2col(img: &[f32], geom: &ConvGeom, cols: &mut [f32]) {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let plane = geom.out_plane();
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..geom.in_ch {
        let src = &img[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..geom.out_h {
                    let iy = oy as isize * stride + ki as isize - pad;
                    for ox in 0..geom.out_w {
                        let ix = ox as isize * stride + kj as isize - pad;
                        dst[oy * geom.out_w + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            src[(iy * w + ix) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], geom: &ConvGeom, img: &mut [f32]) {
    let (h, w) = (geom.height as isize, geom.width as isize);
    let plane = geom.out_plane();
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..geom.in_ch {
        let dst = &mut img[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..geom.out_h {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..geom.out_w {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[(iy * w + ix) as usize] += src[oy * geom.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
