use rand::Rng;

use super::kernels::{axpy, dot, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{Tensor, TensorError};

/// Index of a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Act {
        input: NodeId,
        kind: Activation,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
        rows: usize,
    },
    Gru {
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        cache: GruCache,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Row {
        input: NodeId,
        index: usize,
    },
    Stack {
        rows: Vec<NodeId>,
    },
    Sum {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation record. Node ids are issued in insertion order, so
/// every input precedes its consumer and reverse insertion order is a valid
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient of a seeded output with respect to every node that influenced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
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

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}


impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), TensorError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf node: an input or a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Cross-correlation (no kernel flip) over `[H,W,Cin]` or `[N,H,W,Cin]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "conv2d";
        self.check(input)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let x = self.value(input);
        let kt = self.value(kernel);
        let (batch, h, w, cin, batched) = match *x.shape() {
            [h, w, c] => (1, h, w, c, false),
            [n, h, w, c] => (n, h, w, c, true),
            _ => return Err(dim_err(OP, format!("input must be rank 3 or 4, got {:?}", x.shape()))),
        };
        let (k, cout) = match *kt.shape() {
            [k1, k2, ci, co] if k1 == k2 => {
                if ci != cin {
                    return Err(dim_err(
                        OP,
                        format!("input has {cin} channels but kernel {:?} expects {ci}", kt.shape()),
                    ));
                }
                (k1, co)
            }
            _ => return Err(dim_err(OP, format!("kernel must be [k,k,Cin,Cout], got {:?}", kt.shape()))),
        };
        if k % 2 == 0 && padding == Padding::Same {
            return Err(dim_err(OP, format!("same padding needs an odd kernel extent, got {k}")));
        }
        if stride == 0 {
            return Err(dim_err(OP, "stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(dim_err(
                    OP,
                    format!("bias shape {:?} does not match {cout} output channels", self.value(b).shape()),
                ));
            }
        }
        let pad = padding.amount(k);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::Window {
                op: OP,
                window: k,
                extent: h.min(w),
            });
        }
        let geom = ConvGeom {
            batch,
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };

        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(x.data(), &geom)
        };
        let mut out = vec![0.0; geom.rows() * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let a = if geom.is_pointwise() { x.data() } else { &cols };
        gemm_acc(a, kt.data(), &mut out, geom.rows(), geom.patch(), cout);

        let shape = if batched {
            vec![batch, geom.ho, geom.wo, cout]
        } else {
            vec![geom.ho, geom.wo, cout]
        };
        let value = Tensor { shape, data: out };
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            value,
        ))
    }

    /// Max pooling without padding over `[H,W,C]` or `[N,H,W,C]`.
    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId, TensorError> {
        const OP: &str = "maxpool2d";
        self.check(input)?;
        let x = self.value(input);
        let (batch, h, w, c, batched) = match *x.shape() {
            [h, w, c] => (1, h, w, c, false),
            [n, h, w, c] => (n, h, w, c, true),
            _ => return Err(dim_err(OP, format!("input must be rank 3 or 4, got {:?}", x.shape()))),
        };
        if k == 0 || stride == 0 {
            return Err(dim_err(OP, "window and stride must be positive".into()));
        }
        if h < k || w < k {
            return Err(TensorError::Window {
                op: OP,
                window: k,
                extent: h.min(w),
            });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = x.data();
        let mut out = Vec::with_capacity(batch * ho * wo * c);
        let mut argmax = Vec::with_capacity(batch * ho * wo * c);
        for n in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = usize::MAX;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                let at = ((n * h + iy) * w + ix) * c + ch;
                                // strict comparison keeps the first maximum on ties;
                                // a NaN wins and stays
                                if best_at == usize::MAX || (!best.is_nan() && (xd[at] > best || xd[at].is_nan())) {
                                    best = xd[at];
                                    best_at = at;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_at);
                    }
                }
            }
        }
        let shape = if batched { vec![batch, ho, wo, c] } else { vec![ho, wo, c] };
        Ok(self.push(Op::MaxPool { input, argmax }, Tensor { shape, data: out }))
    }

    /// Affine map `x·W + b` over `[n]` or `[N,n]` inputs.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        const OP: &str = "dense";
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let x = self.value(input);
        let wt = self.value(weight);
        let bt = self.value(bias);
        let (rows, n_in, batched) = match *x.shape() {
            [n] => (1, n, false),
            [r, n] => (r, n, true),
            _ => return Err(dim_err(OP, format!("input must be rank 1 or 2, got {:?}", x.shape()))),
        };
        let n_out = match *wt.shape() {
            [a, m] if a == n_in => m,
            _ => {
                return Err(dim_err(
                    OP,
                    format!("input width {n_in} incompatible with weights {:?}", wt.shape()),
                ))
            }
        };
        if bt.shape() != [n_out] {
            return Err(dim_err(OP, format!("bias shape {:?} != [{n_out}]", bt.shape())));
        }
        let mut out = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            out.extend_from_slice(bt.data());
        }
        gemm_acc(x.data(), wt.data(), &mut out, rows, n_in, n_out);
        let shape = if batched { vec![rows, n_out] } else { vec![n_out] };
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            },
            Tensor { shape, data: out },
        ))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => if v > 0.0 || v.is_nan() { v } else { 0.0 },
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => sigmoid(v),
            })
            .collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Act { input, kind }, value))
    }

    /// Inverted dropout. In eval mode, or with `drop_prob == 0`, the input
    /// node is returned unchanged and nothing is recorded.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        drop_prob: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        self.check(input)?;
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(TensorError::DropProbability(drop_prob));
        }
        if mode == Mode::Eval || drop_prob == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - drop_prob);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < drop_prob { 0.0 } else { keep_scale })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Dropout { input, mask }, value))
    }

    /// Order-preserving concatenation along the last axis. Parts are either
    /// all rank 1, or all rank 2 with a common leading extent.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        const OP: &str = "concat";
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() || first.len() > 2 {
            return Err(dim_err(OP, format!("parts must be rank 1 or 2, got {first:?}")));
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(dim_err(OP, format!("part shape {s:?} incompatible with {first:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            Tensor { shape, data },
        ))
    }

    /// One GRU update.
    ///
    /// `w: [n, 3m]`, `u: [m, 3m]`, `b: [3m]`, with gate blocks ordered
    /// (update z, reset r, candidate). The reset gate multiplies `h_prev`
    /// before the candidate's recurrent product, and
    /// `h = (1 - z) ⊙ h_prev + z ⊙ cand`.
    pub fn gru_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TensorError> {
        const OP: &str = "gru_step";
        for id in [x, h, w, u, b] {
            self.check(id)?;
        }
        let (xv, hv, wv, uv, bv) = (
            self.value(x),
            self.value(h),
            self.value(w),
            self.value(u),
            self.value(b),
        );
        let n = match *xv.shape() {
            [n] => n,
            _ => return Err(dim_err(OP, format!("x must be rank 1, got {:?}", xv.shape()))),
        };
        let m = match *hv.shape() {
            [m] => m,
            _ => return Err(dim_err(OP, format!("h must be rank 1, got {:?}", hv.shape()))),
        };
        if wv.shape() != [n, 3 * m] || uv.shape() != [m, 3 * m] || bv.shape() != [3 * m] {
            return Err(dim_err(
                OP,
                format!(
                    "x[{n}], h[{m}] need w[{n},{}], u[{m},{}], b[{}]; got w{:?}, u{:?}, b{:?}",
                    3 * m,
                    3 * m,
                    3 * m,
                    wv.shape(),
                    uv.shape(),
                    bv.shape()
                ),
            ));
        }
        let hd = hv.data();
        let ud = uv.data();
        let mut pre = bv.data().to_vec();
        gemm_acc(xv.data(), wv.data(), &mut pre, 1, n, 3 * m);
        // recurrent contribution for z and r
        for (i, &hi) in hd.iter().enumerate() {
            axpy(hi, &ud[i * 3 * m..i * 3 * m + 2 * m], &mut pre[..2 * m]);
        }
        let z: Vec<f64> = pre[..m].iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = pre[m..2 * m].iter().map(|&v| sigmoid(v)).collect();
        let rh: Vec<f64> = r.iter().zip(hd).map(|(a, b)| a * b).collect();
        for (i, &v) in rh.iter().enumerate() {
            axpy(v, &ud[i * 3 * m + 2 * m..(i + 1) * 3 * m], &mut pre[2 * m..]);
        }
        let cand: Vec<f64> = pre[2 * m..].iter().map(|v| v.tanh()).collect();
        let out: Vec<f64> = (0..m).map(|j| (1.0 - z[j]) * hd[j] + z[j] * cand[j]).collect();
        Ok(self.push(
            Op::Gru {
                x,
                h,
                w,
                u,
                b,
                cache: GruCache { z, r, cand, rh },
            },
            Tensor {
                shape: vec![m],
                data: out,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { input }, value))
    }

    /// Slab `index` along the leading axis.
    pub fn row(&mut self, input: NodeId, index: usize) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let x = self.value(input);
        if x.rank() < 2 || index >= x.shape()[0] {
            return Err(dim_err("row", format!("index {index} outside shape {:?}", x.shape())));
        }
        let value = Tensor {
            shape: x.shape()[1..].to_vec(),
            data: x.slab(index).to_vec(),
        };
        Ok(self.push(Op::Row { input, index }, value))
    }

    /// Stack equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        for &r in rows {
            self.check(r)?;
        }
        let inner = self.value(rows[0]).shape().to_vec();
        let mut data = Vec::with_capacity(rows.len() * self.value(rows[0]).len());
        for &r in rows {
            let v = self.value(r);
            if v.shape() != inner.as_slice() {
                return Err(dim_err("stack", format!("{:?} vs {:?}", v.shape(), inner)));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows.len()];
        shape.extend(inner);
        Ok(self.push(Op::Stack { rows: rows.to_vec() }, Tensor { shape, data }))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        self.check(input)?;
        let s = self.value(input).data().iter().sum();
        Ok(self.push(Op::Sum { input }, Tensor::scalar(s)))
    }

    /// Gradients of a scalar node with respect to every node before it.
    pub fn gradients_of(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        self.check(loss)?;
        let v = self.value(loss);
        if v.len() != 1 || v.rank() > 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        self.backward_seeded(loss, Tensor::full(v.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`) back
    /// through the graph.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor) -> Result<Gradients, TensorError> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(dim_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let count = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..count).map(|_| None).collect();
        grads[output.0] = Some(seed.data);

        for i in (0..count).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, g, lower);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($id:expr) => {
                grad_slot(nodes, lower, $id)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.rows();
                let patch = geom.patch();
                let kv = nodes[kernel.0].value.data();
                let a = if geom.is_pointwise() {
                    nodes[input.0].value.data()
                } else {
                    cols.as_slice()
                };
                gemm_at_b_acc(a, g, slot!(*kernel), rows, patch, geom.cout);
                if let Some(b) = bias {
                    let db = slot!(*b);
                    for row in g.chunks_exact(geom.cout) {
                        axpy(1.0, row, db);
                    }
                }
                if geom.is_pointwise() {
                    gemm_a_bt_acc(g, kv, slot!(*input), rows, geom.cout, patch);
                } else {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm_a_bt_acc(g, kv, &mut dcols, rows, geom.cout, patch);
                    col2im_acc(&dcols, geom, slot!(*input));
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = slot!(*input);
                for (&at, &gv) in argmax.iter().zip(g) {
                    dx[at] += gv;
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            } => {
                let xv = nodes[input.0].value.data();
                let wv = nodes[weight.0].value.data();
                gemm_at_b_acc(xv, g, slot!(*weight), *rows, *n_in, *n_out);
                let db = slot!(*bias);
                for row in g.chunks_exact(*n_out) {
                    axpy(1.0, row, db);
                }
                gemm_a_bt_acc(g, wv, slot!(*input), *rows, *n_out, *n_in);
            }
            Op::Act { input, kind } => {
                let y = node.value.data();
                let dx = slot!(*input);
                for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                    *d += gv
                        * match kind {
                            Activation::Relu => {
                                if yv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Tanh => 1.0 - yv * yv,
                            Activation::Sigmoid => yv * (1.0 - yv),
                        };
                }
            }
            Op::Dropout { input, mask } => {
                let dx = slot!(*input);
                for ((d, &mv), &gv) in dx.iter_mut().zip(mask).zip(g) {
                    *d += gv * mv;
                }
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(widths) {
                    let dp = slot!(p);
                    for r in 0..*rows {
                        let src = &g[r * total + offset..r * total + offset + wd];
                        axpy(1.0, src, &mut dp[r * wd..(r + 1) * wd]);
                    }
                    offset += wd;
                }
            }
            Op::Gru { x, h, w, u, b, cache } => {
                let GruCache { z, r, cand, rh } = cache;
                let m = z.len();
                let hv = nodes[h.0].value.data();
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let uv = nodes[u.0].value.data();
                let n = xv.len();

                let mut dpre = vec![0.0; 3 * m];
                let mut dh = vec![0.0; m];
                for j in 0..m {
                    let dz = g[j] * (cand[j] - hv[j]);
                    let dc = g[j] * z[j];
                    dh[j] = g[j] * (1.0 - z[j]);
                    dpre[j] = dz * z[j] * (1.0 - z[j]);
                    dpre[2 * m + j] = dc * (1.0 - cand[j] * cand[j]);
                }
                // d(r ⊙ h) = dcand_pre · U_candᵀ
                let mut drh = vec![0.0; m];
                for (i, d) in drh.iter_mut().enumerate() {
                    *d = dot(&uv[i * 3 * m + 2 * m..(i + 1) * 3 * m], &dpre[2 * m..]);
                }
                for j in 0..m {
                    let dr = drh[j] * hv[j];
                    dh[j] += drh[j] * r[j];
                    dpre[m + j] = dr * r[j] * (1.0 - r[j]);
                }
                for (i, d) in dh.iter_mut().enumerate() {
                    *d += dot(&uv[i * 3 * m..i * 3 * m + 2 * m], &dpre[..2 * m]);
                }

                axpy(1.0, &dpre, slot!(*b));
                {
                    let du = slot!(*u);
                    for i in 0..m {
                        let row = &mut du[i * 3 * m..(i + 1) * 3 * m];
                        axpy(hv[i], &dpre[..2 * m], &mut row[..2 * m]);
                        axpy(rh[i], &dpre[2 * m..], &mut row[2 * m..]);
                    }
                }
                gemm_at_b_acc(xv, &dpre, slot!(*w), 1, n, 3 * m);
                gemm_a_bt_acc(&dpre, wv, slot!(*x), 1, 3 * m, n);
                axpy(1.0, &dh, slot!(*h));
            }
            Op::Add { a, b } => {
                axpy(1.0, g, slot!(*a));
                axpy(1.0, g, slot!(*b));
            }
            Op::Reshape { input } => axpy(1.0, g, slot!(*input)),
            Op::Row { input, index } => {
                let wd = g.len();
                axpy(1.0, g, &mut slot!(*input)[index * wd..(index + 1) * wd]);
            }
            Op::Stack { rows } => {
                let wd = g.len() / rows.len();
                for (t, &r) in rows.iter().enumerate() {
                    axpy(1.0, &g[t * wd..(t + 1) * wd], slot!(r));
                }
            }
            Op::Sum { input } => {
                let gv = g[0];
                for d in slot!(*input).iter_mut() {
                    *d += gv;
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], lower: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
    let len = nodes[id.0].value.len();
    lower[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        h,
        w,
        cin,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let patch = geom.patch();
    let mut cols = vec![0.0; geom.rows() * patch];
    for n in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (n * ho + oy) * wo + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let off = (ky * k + kx) * cin;
                        dst[off..off + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        batch,
        h,
        w,
        cin,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let patch = geom.patch();
    for n in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (n * ho + oy) * wo + ox;
                let src = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let off = (ky * k + kx) * cin;
                        axpy(1.0, &src[off..off + cin], &mut dx[dst..dst + cin]);
                    }
                }
            }
        }
    }
}
