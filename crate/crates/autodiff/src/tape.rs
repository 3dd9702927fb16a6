//! Define-by-run tape. Every op evaluates eagerly and records how to
//! propagate adjoints back to its inputs.

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::{mismatch, AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Clamp01(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    AddChannel(Var, Var),
    Upsample2(Var),
    Sum(Var),
    MaskedMse { pred: Var, target: Var, omega: Vec<bool>, count: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the adjoint of `v` into `t.grad`, accumulating if one exists.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        let Some(g) = self.get(v) else { return };
        match &mut t.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => t.grad = Some(g.to_vec()),
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_scalar_into(dst: &mut Option<Vec<f64>>, len: usize, v: f64) {
    let d = dst.get_or_insert_with(|| vec![0.0; len]);
    d[0] += v;
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; gradients are tracked when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, AutodiffError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> Result<f64, AutodiffError> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(AutodiffError::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// Shape of a binary elementwise result: equal shapes, or one side scalar.
    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>, AutodiffError> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape == nb.shape || nb.value.len() == 1 {
            Ok(na.shape.clone())
        } else if na.value.len() == 1 {
            Ok(nb.shape.clone())
        } else {
            Err(mismatch(format!("{what}: {:?} vs {:?}", na.shape, nb.shape)))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var, AutodiffError> {
        let shape = self.broadcast(a, b, what)?;
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let n = shape.iter().product::<usize>();
        let value = (0..n)
            .map(|i| f(va[if va.len() == 1 { 0 } else { i }], vb[if vb.len() == 1 { 0 } else { i }]))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.iter().map(|v| v * s).collect());
        let ng = self.ng(&[a]);
        self.push(shape, value, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.iter().map(|&v| silu(v)).collect());
        let ng = self.ng(&[a]);
        self.push(shape, value, Op::Silu(a), ng)
    }

    /// Clamp to `[0, 1]`; the gradient is zero outside the open interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.iter().map(|v| v.clamp(0.0, 1.0)).collect());
        let ng = self.ng(&[a]);
        self.push(shape, value, Op::Clamp01(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(mismatch(format!("reshape {:?} -> {shape:?}", n.shape)));
        }
        let value = n.value.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `x [n, i]`, `w [o, i]`, `b [o]` -> `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch(format!("linear {sx:?} with weight {sw:?}")));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch(format!("linear bias {:?}, want [{o}]", self.shape(b))));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(self.value(b));
            }
        }
        gemm(n, i, o, self.value(x), false, self.value(w), true, 1.0, &mut out);
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(vec![n, o], out, Op::Linear { x, w, b }, ng))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<(usize, usize, ConvGeom), AutodiffError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch(format!("conv2d input {sx:?} with kernel {sw:?}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(mismatch(format!("conv2d stride {stride}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch(format!("conv2d bias {:?}, want [{}]", self.shape(b), sw[0])));
            }
        }
        Ok((
            sx[0],
            sw[0],
            ConvGeom {
                c: sx[1],
                h: sx[2],
                w: sx[3],
                k: sw[2],
                stride,
            },
        ))
    }

    /// Zero-padded ("same") cross-correlation, `x [n, c, h, w]`,
    /// `w [o, c, k, k]`, optional bias `[o]`. Stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, AutodiffError> {
        let (n, o, g) = self.conv_geom(x, w, b, stride)?;
        let (rows, cols) = (g.rows(), g.cols());
        let in_len = g.c * g.h * g.w;
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        for s in 0..n {
            let ys = &mut out[s * o * cols..(s + 1) * o * cols];
            if let Some(b) = b {
                for (row, &bv) in ys.chunks_mut(cols).zip(self.value(b)) {
                    row.fill(bv);
                }
            }
            let xs = &self.value(x)[s * in_len..(s + 1) * in_len];
            if g.k == 1 && stride == 1 {
                gemm(o, rows, cols, self.value(w), false, xs, false, 1.0, ys);
            } else {
                im2col(&g, xs, &mut col);
                gemm(o, rows, cols, self.value(w), false, &col, false, 1.0, ys);
            }
        }
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(vec![n, o, g.out_h(), g.out_w()], out, Op::Conv2d { x, w, b, stride }, ng))
    }

    /// Adds `v [n, c]` to every pixel of channel `c` in `x [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, AutodiffError> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 4 || sv != [sx[0], sx[1]] {
            return Err(mismatch(format!("add_channel {sx:?} with {sv:?}")));
        }
        let plane = sx[2] * sx[3];
        let shape = sx.to_vec();
        let vv = self.value(v);
        let value = self
            .value(x)
            .chunks(plane)
            .zip(vv)
            .flat_map(|(p, &b)| p.iter().map(move |a| a + b))
            .collect();
        let ng = self.ng(&[x, v]);
        Ok(self.push(shape, value, Op::AddChannel(x, v), ng))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch(format!("upsample2 {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(self.value(x).len() * 4);
        for p in self.value(x).chunks(h * w) {
            for y in 0..2 * h {
                let row = &p[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2(x), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `(1/|Ω|) Σ_{p∈Ω} (pred_p - target_p)²`. Elements outside `omega` are
    /// never read, so they cannot influence the loss or any gradient.
    pub fn masked_mse(&mut self, pred: Var, target: Var, omega: &[bool]) -> Result<Var, AutodiffError> {
        if self.shape(pred) != self.shape(target) || omega.len() != self.value(pred).len() {
            return Err(mismatch(format!(
                "masked_mse {:?} vs {:?} with {} mask entries",
                self.shape(pred),
                self.shape(target),
                omega.len()
            )));
        }
        let count = omega.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(AutodiffError::EmptyOmega);
        }
        let (p, t) = (self.value(pred), self.value(target));
        let mut s = 0.0;
        for i in 0..omega.len() {
            if omega[i] {
                let d = p[i] - t[i];
                s += d * d;
            }
        }
        let ng = self.ng(&[pred, target]);
        let op = Op::MaskedMse {
            pred,
            target,
            omega: omega.to_vec(),
            count,
        };
        Ok(self.push(vec![], vec![s / count as f64], op, ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, AutodiffError> {
        if out.0 >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        let root = self.node(out);
        if root.value.len() != 1 {
            return Err(AutodiffError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adjoint of a broadcast binary operand: reduce to a scalar if needed.
    fn reduce_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if !self.wants(v) {
            return;
        }
        let len = self.node(v).value.len();
        let gv: Vec<f64> = g.collect();
        if len == 1 && gv.len() != 1 {
            add_scalar_into(&mut grads[v.0], 1, gv.iter().sum());
        } else {
            add_into(&mut grads[v.0], &gv);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let at = |v: &[f64], i: usize| v[if v.len() == 1 { 0 } else { i }];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(grads, *a, g.iter().copied());
                self.reduce_into(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.reduce_into(grads, *a, g.iter().copied());
                self.reduce_into(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.reduce_into(grads, *a, g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)));
                self.reduce_into(grads, *b, g.iter().enumerate().map(|(i, gi)| gi * at(va, i)));
            }
            Op::Scale(a, s) => self.reduce_into(grads, *a, g.iter().map(|v| v * s)),
            Op::Silu(a) => {
                let va = self.value(*a);
                self.reduce_into(grads, *a, g.iter().zip(va).map(|(gi, &x)| gi * silu_grad(x)));
            }
            Op::Clamp01(a) => {
                let va = self.value(*a);
                let gate = |x: f64| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 };
                self.reduce_into(grads, *a, g.iter().zip(va).map(|(gi, &x)| gi * gate(x)));
            }
            Op::Reshape(a) => self.reduce_into(grads, *a, g.iter().copied()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, 0.0, &mut da);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, 0.0, &mut db);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, g, false, self.value(*w), false, 0.0, &mut dx);
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, g, true, self.value(*x), false, 0.0, &mut dw);
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Conv2d { x, w, b, stride } => self.conv_backward(*x, *w, *b, *stride, g, grads),
            Op::AddChannel(x, v) => {
                self.reduce_into(grads, *x, g.iter().copied());
                if self.wants(*v) {
                    let s = self.shape(*x);
                    let dv: Vec<f64> = g.chunks(s[2] * s[3]).map(|p| p.iter().sum()).collect();
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::Upsample2(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (p, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                p[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.reduce_into(grads, *a, std::iter::repeat_n(g[0], len));
            }
            Op::MaskedMse {
                pred,
                target,
                omega,
                count,
            } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = 2.0 * g[0] / *count as f64;
                let d: Vec<f64> = (0..omega.len())
                    .map(|i| if omega[i] { k * (p[i] - t[i]) } else { 0.0 })
                    .collect();
                self.reduce_into(grads, *pred, d.iter().copied());
                self.reduce_into(grads, *target, d.iter().map(|v| -v));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, stride: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, o, geom) = self.conv_geom(x, w, b, stride).expect("validated in forward");
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_len = geom.c * geom.h * geom.w;
        let pointwise = geom.k == 1 && stride == 1;
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut dw = vec![0.0; o * rows];
        let mut dx = vec![0.0; if want_x { n * in_len } else { 0 }];
        let mut col = vec![0.0; rows * cols];
        for s in 0..n {
            let gs = &g[s * o * cols..(s + 1) * o * cols];
            if want_w {
                let xs = &self.value(x)[s * in_len..(s + 1) * in_len];
                let cols_src: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(&geom, xs, &mut col);
                    &col
                };
                gemm(o, cols, rows, gs, false, cols_src, true, 1.0, &mut dw);
            }
            if want_x {
                let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                if pointwise {
                    gemm(rows, o, cols, self.value(w), true, gs, false, 0.0, dxs);
                } else {
                    gemm(rows, o, cols, self.value(w), true, gs, false, 0.0, &mut col);
                    col2im(&geom, &col, dxs);
                }
            }
        }
        if want_x {
            add_into(&mut grads[x.0], &dx);
        }
        if want_w {
            add_into(&mut grads[w.0], &dw);
        }
        if let Some(b) = b.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; o];
            for s in 0..n {
                for (d, row) in db.iter_mut().zip(g[s * o * cols..(s + 1) * o * cols].chunks(cols)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            add_into(&mut grads[b.0], &db);
        }
    }
}
