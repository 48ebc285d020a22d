use super::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Concat(Var, Var),
    ConcatRows(Vec<Var>),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Scalar produced outside the tape whose gradient with respect to
    /// `input` was computed alongside it (loss functions).
    External {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// False for constants and for nodes computed only from constants.
    differentiable: bool,
}

/// Linear record of executed operations; replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Geometry of a 2-D convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample (`C×H×W`) into a `(C·Kh·Kw) × (Ho·Wo)` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h || lo >= hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if self.stride == 1 {
                            let ix0 = lo + kx - self.pad;
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                                *o = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column `ox·stride + kx − pad` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters column gradients back onto the input.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let g = &src[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let ix0 = lo + kx - self.pad;
                            for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(&g[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, &v) in g.iter().enumerate().take(hi).skip(lo) {
                                dst[ox * self.stride + kx - self.pad] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    adj[var.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let differentiable = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Conv2d { input, kernel, bias, .. } => self.diff(*input) || self.diff(*kernel) || self.diff(*bias),
            Op::Relu(x) | Op::AvgPool2(x) | Op::GlobalAvgPool(x) | Op::Sum(x) | Op::Scale(x, _) => self.diff(*x),
            Op::Concat(a, b) | Op::Mul(a, b) => self.diff(*a) || self.diff(*b),
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.diff(p)),
            Op::Dense { x, w, b } => self.diff(*x) || self.diff(*w) || self.diff(*b),
            Op::External { input, .. } => self.diff(*input),
        };
        #[cfg(test)]
        assert!(value.all_finite(), "non-finite forward value from {op:?}");
        self.nodes.push(Node { value, op, differentiable });
        Var(self.nodes.len() - 1)
    }

    fn diff(&self, var: Var) -> bool {
        self.nodes[var.0].differentiable
    }

    /// Records a parameter or any input that should receive a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records an input that never needs a gradient; backward skips every
    /// adjoint that would only flow into constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    /// Which ReLU inputs are strictly positive, over every ReLU in recording
    /// order. Two evaluations with equal patterns lie on the same linear piece,
    /// so a finite difference between them crosses no kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn conv_geom(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d (rank)", xs, ks));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::shape("conv2d (channels)", xs, ks));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape("conv2d (kernel extent)", xs, ks));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// `N×C×H×W` input, `O×C×Kh×Kw` kernel, `O` bias; zero padding, unit dilation.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let g = self.conv_geom(input, kernel, stride, padding)?;
        if self.shape(bias) != [g.o] {
            return Err(Error::shape("conv2d (bias)", self.shape(bias), &[g.o]));
        }
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let (patch, area) = (g.patch(), g.out_area());
        let mut out = vec![0.0; g.n * g.o * area];
        let mut cols = vec![0.0; patch * area];
        for ni in 0..g.n {
            g.im2col(&x[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w], &mut cols);
            let dst = &mut out[ni * g.o * area..(ni + 1) * g.o * area];
            for (oi, bv) in b.iter().enumerate() {
                dst[oi * area..(oi + 1) * area].fill(*bv);
            }
            gemm::matmul_acc(g.o, patch, area, k, &cols, dst);
        }
        let value = Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    /// 2×2 average pooling with stride 2 over the last two axes; odd trailing
    /// rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("avg_pool2", &shape, &[2, 2]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("avg_pool2", &shape, &[2, 2]));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, xx) = (2 * oy, 2 * ox);
                    let s = plane[y * w + xx]
                        + plane[y * w + xx + 1]
                        + plane[(y + 1) * w + xx]
                        + plane[(y + 1) * w + xx + 1];
                    out[(p * ho + oy) * wo + ox] = 0.25 * s;
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::AvgPool2(x)))
    }

    /// Spatial mean per channel: `C×H×W → C` or `N×C×H×W → N×C`.
    pub fn global_average_pool(&mut self, f: Var) -> Result<Var> {
        let shape = self.shape(f).to_vec();
        if !(shape.len() == 3 || shape.len() == 4) {
            return Err(Error::shape("global_average_pool (rank)", &shape, &[0, 0, 0]));
        }
        let r = shape.len();
        let area = shape[r - 2] * shape[r - 1];
        if area == 0 {
            return Err(Error::invalid(format!(
                "global_average_pool: empty spatial extent in {shape:?}"
            )));
        }
        let src = self.value(f).data();
        let out: Vec<f64> = src
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let out_shape = shape[..r - 2].to_vec();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::GlobalAvgPool(f)))
    }

    /// Joins two feature vectors along the channel axis (`m ++ n`), also for
    /// batched `B×m`, `B×n` inputs.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = match (sa.as_slice(), sb.as_slice()) {
            ([m], [n]) => vec![m + n],
            ([ba, m], [bb, n]) if ba == bb => vec![*ba, m + n],
            _ => return Err(Error::shape("concat_channels", &sa, &sb)),
        };
        let rows = if sa.len() == 2 { sa[0] } else { 1 };
        let (m, n) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            out.extend_from_slice(&da[r * m..(r + 1) * m]);
            out.extend_from_slice(&db[r * n..(r + 1) * n]);
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Concat(a, b)))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows needs at least one input"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(parts.to_vec())))
    }

    /// Affine map `W·x + b` for `x` of shape `m` or `B×m`, `W` of shape `k×m`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sw.len() != 2 {
            return Err(Error::shape("dense (weight rank)", &sw, &[0, 0]));
        }
        let (k, m) = (sw[0], sw[1]);
        let (rows, out_shape) = match sx.as_slice() {
            [mm] if *mm == m => (1, vec![k]),
            [bsz, mm] if *mm == m => (*bsz, vec![*bsz, k]),
            _ => return Err(Error::shape("dense (input)", &sx, &sw)),
        };
        if sb != [k] {
            return Err(Error::shape("dense (bias)", &sb, &[k]));
        }
        let (dx, dw, db) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            out.extend_from_slice(db);
        }
        gemm::matmul_bt_acc(rows, m, k, dx, dw, &mut out);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Dense { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor))
    }

    /// Records a scalar computed outside the tape from `input`, together with
    /// its gradient with respect to `input`.
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape("external_scalar", self.shape(input), &[grad.len()]));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("external scalar {value}")));
        }
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Every non-constant node
    /// reachable from `loss` gets its gradient buffer overwritten; others are
    /// untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Like [`Tape::backward`] but seeded with an arbitrary adjoint for `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("backward seed", self.shape(root), &[seed.len()]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].differentiable {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        for (i, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom = self.conv_geom(*input, *kernel, *stride, *padding)?;
                let (patch, area) = (geom.patch(), geom.out_area());
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let in_len = geom.c * geom.h * geom.w;
                let mut cols = vec![0.0; patch * area];
                let mut dcols = vec![0.0; if self.diff(*input) { patch * area } else { 0 }];
                // Kernel gradient is accumulated transposed (patch × O) so the
                // large column matrix is consumed row-major.
                let mut dk_t = vec![0.0; k.len()];
                let mut db = vec![0.0; geom.o];
                let want_dx = self.diff(*input);
                let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
                for ni in 0..geom.n {
                    let gy = &g[ni * geom.o * area..(ni + 1) * geom.o * area];
                    for (oi, dbv) in db.iter_mut().enumerate() {
                        *dbv += gy[oi * area..(oi + 1) * area].iter().sum::<f64>();
                    }
                    geom.im2col(&x[ni * in_len..(ni + 1) * in_len], &mut cols);
                    gemm::matmul_bt_acc(patch, area, geom.o, &cols, gy, &mut dk_t);
                    if want_dx {
                        dcols.fill(0.0);
                        gemm::matmul_at_acc(patch, geom.o, area, k, gy, &mut dcols);
                        geom.col2im(&dcols, &mut dx[ni * in_len..(ni + 1) * in_len]);
                    }
                }
                let dk = accumulate(adj, *kernel, dk_t.len());
                for oi in 0..geom.o {
                    for q in 0..patch {
                        dk[oi * patch + q] += dk_t[q * geom.o + oi];
                    }
                }
                add_into(accumulate(adj, *bias, db.len()), &db);
                if want_dx {
                    add_into(accumulate(adj, *input, dx.len()), &dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dst = accumulate(adj, *x, xv.len());
                for ((d, &v), &gv) in dst.iter_mut().zip(xv).zip(g) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::AvgPool2(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (ho, wo) = (h / 2, w / 2);
                let planes: usize = shape[..r - 2].iter().product();
                let dst = accumulate(adj, *x, planes * h * w);
                for p in 0..planes {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = 0.25 * g[(p * ho + oy) * wo + ox];
                            let base = p * h * w;
                            let (y, xx) = (2 * oy, 2 * ox);
                            dst[base + y * w + xx] += gv;
                            dst[base + y * w + xx + 1] += gv;
                            dst[base + (y + 1) * w + xx] += gv;
                            dst[base + (y + 1) * w + xx + 1] += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(f) => {
                let shape = self.shape(*f);
                let r = shape.len();
                let area = shape[r - 2] * shape[r - 1];
                let n = self.value(*f).numel();
                let dst = accumulate(adj, *f, n);
                for (plane, &gv) in dst.chunks_mut(area).zip(g) {
                    let share = gv / area as f64;
                    for d in plane {
                        *d += share;
                    }
                }
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, n) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let rows = if sa.len() == 2 { sa[0] } else { 1 };
                {
                    let da = accumulate(adj, *a, rows * m);
                    for r in 0..rows {
                        add_into(
                            &mut da[r * m..(r + 1) * m],
                            &g[r * (m + n)..r * (m + n) + m],
                        );
                    }
                }
                let db = accumulate(adj, *b, rows * n);
                for r in 0..rows {
                    add_into(
                        &mut db[r * n..(r + 1) * n],
                        &g[r * (m + n) + m..(r + 1) * (m + n)],
                    );
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    add_into(accumulate(adj, p, len), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Dense { x, w, b } => {
                let sw = self.shape(*w);
                let (k, m) = (sw[0], sw[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let rows = xv.len() / m;
                {
                    let db = accumulate(adj, *b, k);
                    for r in 0..rows {
                        add_into(db, &g[r * k..(r + 1) * k]);
                    }
                }
                // dW[k×m] += gᵀ[k×rows] · x[rows×m]
                gemm::matmul_at_acc(k, rows, m, g, xv, accumulate(adj, *w, k * m));
                // dx[rows×m] += g[rows×k] · W[k×m]
                gemm::matmul_acc(rows, k, m, g, wv, accumulate(adj, *x, rows * m));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dst = accumulate(adj, *x, n);
                for d in dst {
                    *d += g[0];
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let da = accumulate(adj, *a, av.len());
                    for ((d, &y), &gv) in da.iter_mut().zip(bv).zip(g) {
                        *d += gv * y;
                    }
                }
                let db = accumulate(adj, *b, bv.len());
                for ((d, &x), &gv) in db.iter_mut().zip(av).zip(g) {
                    *d += gv * x;
                }
            }
            Op::Scale(x, factor) => {
                let n = self.value(*x).numel();
                let dst = accumulate(adj, *x, n);
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::External { input, grad } => {
                let dst = accumulate(adj, *input, grad.len());
                for (d, &gv) in dst.iter_mut().zip(grad) {
                    *d += g[0] * gv;
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
