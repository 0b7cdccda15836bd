//! Dense tensors and a minimal reverse-mode automatic differentiation engine.
//!
//! The graph is rebuilt every step (define-by-run): a [`Tape`] records ops as
//! values are produced, and [`Tape::backward`] replays them in reverse to
//! accumulate gradients into the `requires_grad` leaves. Supported ops are the
//! small fixed set needed to train the toy denoiser; broadcast is limited to
//! trailing-axis bias addition.

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values. 1-D and 2-D shapes are used throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row count for 2-D tensors, 1 for 1-D.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 { self.shape[0] } else { 1 }
    }

    /// Column count for 2-D tensors, length for 1-D.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// Elementwise product; either operand may be a scalar (broadcast).
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Tanh(TensorId),
    Gelu(TensorId),
    Mean(TensorId),
    Sum(TensorId),
    /// Contiguous range of the flattened row-major data; output is 1-D.
    Slice(TensorId, usize, usize),
    /// Flat concatenation; output is 1-D.
    Concat(TensorId, TensorId),
    /// Matrix [m,n] plus trailing-axis vector [n].
    BroadcastAdd(TensorId, TensorId),
}

struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph. Nodes are appended in topological order,
/// so backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new() }
    }

    /// Number of recorded non-leaf nodes (used to assert side-effect-free paths).
    pub fn node_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_leaf).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.entries.push(Entry { value, op: Op::Leaf, requires_grad, is_leaf: true, grad: None });
        TensorId(self.entries.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward has run.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        // Record the node only when some input requires gradients; otherwise the
        // value joins the tape as a constant leaf.
        let (op, is_leaf) = if requires_grad { (op, false) } else { (Op::Leaf, true) };
        self.entries.push(Entry { value, op, requires_grad, is_leaf, grad: None });
        TensorId(self.entries.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.entries[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        let out = match (va.shape.as_slice(), vb.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let mut data = vec![0.0; m * n];
                matmul_raw(&va.data, &vb.data, &mut data, m, k, n);
                Tensor { shape: vec![m, n], data }
            }
            ([m, k], [k2]) if k == k2 => {
                let (m, k) = (*m, *k);
                let mut data = vec![0.0; m];
                matmul_raw(&va.data, &vb.data, &mut data, m, k, 1);
                Tensor { shape: vec![m], data }
            }
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", va.shape, vb.shape),
                ))
            }
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        if va.shape != vb.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        let out = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
            Tensor { shape: va.shape.clone(), data }
        } else if va.is_scalar() {
            let s = va.data[0];
            Tensor { shape: vb.shape.clone(), data: vb.data.iter().map(|y| s * y).collect() }
        } else if vb.is_scalar() {
            let s = vb.data[0];
            Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x * s).collect() }
        } else {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", va.shape, vb.shape)));
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let va = &self.entries[a.0].value;
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x * factor).collect(),
        };
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// a - b, via add and scale.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let va = &self.entries[a.0].value;
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x.tanh()).collect() };
        let rg = self.needs(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let va = &self.entries[a.0].value;
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| gelu(*x)).collect() };
        let rg = self.needs(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let va = &self.entries[a.0].value;
        let m = va.data.iter().sum::<f64>() / va.numel() as f64;
        let rg = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let va = &self.entries[a.0].value;
        let s = va.data.iter().sum::<f64>();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Contiguous range of the flattened row-major data. Output is 1-D.
    pub fn slice(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let va = &self.entries[a.0].value;
        if start > end || end > va.numel() {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} out of {} elements", start, end, va.numel()),
            ));
        }
        let out = Tensor::vector(va.data[start..end].to_vec());
        let rg = self.needs(a);
        Ok(self.push(out, Op::Slice(a, start, end), rg))
    }

    /// Flat concatenation of two tensors. Output is 1-D.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::vector(data), Op::Concat(a, b), rg))
    }

    /// Matrix [m,n] plus bias vector [n], broadcast over rows.
    pub fn broadcast_add(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[bias.0].value);
        let n = *vb.shape.last().unwrap_or(&0);
        if vb.shape.len() != 1 || va.shape.last() != Some(&n) {
            return Err(Error::shape(
                "broadcast_add",
                format!("{:?} + {:?} (trailing-axis broadcast only)", va.shape, vb.shape),
            ));
        }
        let mut data = va.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data[i % n];
        }
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::BroadcastAdd(a, bias), rg))
    }

    /// Reverse sweep from a scalar root. Gradients of `requires_grad` leaves
    /// accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if root.0 >= self.entries.len() {
            return Err(Error::Contract("backward: root not on this tape".into()));
        }
        if !self.entries[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.entries[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if self.entries[idx].is_leaf {
                if self.entries[idx].requires_grad {
                    let shape = self.entries[idx].value.shape.clone();
                    let acc = self.entries[idx]
                        .grad
                        .get_or_insert_with(|| Tensor::zeros(&shape));
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                continue;
            }
            let op = self.entries[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => self.back_matmul(&mut grads, &g, a, b),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                Op::Mul(a, b) => self.back_mul(&mut grads, &g, a, b),
                Op::Scale(a, f) => {
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|x| x * f).collect(),
                    };
                    accumulate(&mut grads, a, &ga);
                }
                Op::Tanh(a) => {
                    let y = &self.entries[idx].value;
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(gi, yi)| gi * (1.0 - yi * yi))
                            .collect(),
                    };
                    accumulate(&mut grads, a, &ga);
                }
                Op::Gelu(a) => {
                    let x = &self.entries[a.0].value;
                    let ga = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(gi, xi)| gi * gelu_deriv(*xi))
                            .collect(),
                    };
                    accumulate(&mut grads, a, &ga);
                }
                Op::Mean(a) => {
                    let n = self.entries[a.0].value.numel() as f64;
                    let v = g.data[0] / n;
                    let ga = Tensor {
                        shape: self.entries[a.0].value.shape.clone(),
                        data: vec![v; self.entries[a.0].value.numel()],
                    };
                    accumulate(&mut grads, a, &ga);
                }
                Op::Sum(a) => {
                    let v = g.data[0];
                    let ga = Tensor {
                        shape: self.entries[a.0].value.shape.clone(),
                        data: vec![v; self.entries[a.0].value.numel()],
                    };
                    accumulate(&mut grads, a, &ga);
                }
                Op::Slice(a, start, _end) => {
                    let mut ga = Tensor::zeros(&self.entries[a.0].value.shape);
                    for (i, gi) in g.data.iter().enumerate() {
                        ga.data[start + i] = *gi;
                    }
                    accumulate(&mut grads, a, &ga);
                }
                Op::Concat(a, b) => {
                    let na = self.entries[a.0].value.numel();
                    let ga = Tensor {
                        shape: self.entries[a.0].value.shape.clone(),
                        data: g.data[..na].to_vec(),
                    };
                    let gb = Tensor {
                        shape: self.entries[b.0].value.shape.clone(),
                        data: g.data[na..].to_vec(),
                    };
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::BroadcastAdd(a, bias) => {
                    accumulate(&mut grads, a, &g);
                    let n = self.entries[bias.0].value.numel();
                    let mut gb = Tensor::zeros(&self.entries[bias.0].value.shape);
                    for (i, gi) in g.data.iter().enumerate() {
                        gb.data[i % n] += gi;
                    }
                    accumulate(&mut grads, bias, &gb);
                }
            }
        }
        Ok(())
    }

    fn back_matmul(&self, grads: &mut [Option<Tensor>], g: &Tensor, a: TensorId, b: TensorId) {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        match (va.shape.as_slice(), vb.shape.as_slice()) {
            ([m, k], [_, n]) => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(a) {
                    // gA = gC . B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data[i * n + j];
                            if gij != 0.0 {
                                for l in 0..k {
                                    ga[i * k + l] += gij * vb.data[l * n + j];
                                }
                            }
                        }
                    }
                    accumulate(grads, a, &Tensor { shape: vec![m, k], data: ga });
                }
                if self.needs(b) {
                    // gB = A^T . gC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = va.data[i * k + l];
                            if ail != 0.0 {
                                for j in 0..n {
                                    gb[l * n + j] += ail * g.data[i * n + j];
                                }
                            }
                        }
                    }
                    accumulate(grads, b, &Tensor { shape: vec![k, n], data: gb });
                }
            }
            ([m, k], [_]) => {
                let (m, k) = (*m, *k);
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            ga[i * k + l] = g.data[i] * vb.data[l];
                        }
                    }
                    accumulate(grads, a, &Tensor { shape: vec![m, k], data: ga });
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k];
                    for i in 0..m {
                        let gi = g.data[i];
                        for l in 0..k {
                            gb[l] += va.data[i * k + l] * gi;
                        }
                    }
                    accumulate(grads, b, &Tensor { shape: vec![k], data: gb });
                }
            }
            _ => unreachable!("matmul forward validated shapes"),
        }
    }

    fn back_mul(&self, grads: &mut [Option<Tensor>], g: &Tensor, a: TensorId, b: TensorId) {
        let (va, vb) = (&self.entries[a.0].value, &self.entries[b.0].value);
        if va.shape == vb.shape {
            if self.needs(a) {
                let ga = Tensor {
                    shape: va.shape.clone(),
                    data: g.data.iter().zip(&vb.data).map(|(gi, bi)| gi * bi).collect(),
                };
                accumulate(grads, a, &ga);
            }
            if self.needs(b) {
                let gb = Tensor {
                    shape: vb.shape.clone(),
                    data: g.data.iter().zip(&va.data).map(|(gi, ai)| gi * ai).collect(),
                };
                accumulate(grads, b, &gb);
            }
        } else {
            // One side is a scalar.
            let (s_id, t_id, sv, tv) =
                if va.is_scalar() { (a, b, va, vb) } else { (b, a, vb, va) };
            if self.needs(t_id) {
                let s = sv.data[0];
                let gt = Tensor {
                    shape: tv.shape.clone(),
                    data: g.data.iter().map(|gi| gi * s).collect(),
                };
                accumulate(grads, t_id, &gt);
            }
            if self.needs(s_id) {
                let gs: f64 = g.data.iter().zip(&tv.data).map(|(gi, ti)| gi * ti).sum();
                accumulate(grads, s_id, &Tensor::scalar(gs));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: TensorId, g: &Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => grads[id.0] = Some(g.clone()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &blj) in orow.iter_mut().zip(brow) {
                    *o += ail * blj;
                }
            }
        }
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` constructs a scalar loss from the given parameter leaves; it must be
/// deterministic. Returns the max over all parameter entries of
/// `|autodiff - central difference| / max(1, |central difference|)`.
pub fn grad_check<F>(build: &F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-7, 1e-3]", eps)));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = build(&mut tape, &ids)?;
    if !tape.value(root).is_finite() {
        return Err(Error::NonFinite("grad_check: loss at base point".into()));
    }
    tape.backward(root)?;
    let ad_grads: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| tape.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(&p.shape)))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = probe.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let root = build(&mut t, &ids)?;
        Ok(t.value(root).data[0])
    };

    let mut max_rel = 0.0_f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            probe[pi].data[j] = p.data[j] + eps;
            let up = eval(&probe)?;
            probe[pi].data[j] = p.data[j] - eps;
            let down = eval(&probe)?;
            probe[pi].data[j] = p.data[j];
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: loss while probing parameter {} entry {}",
                    pi, j
                )));
            }
            let fd = (up - down) / (2.0 * eps);
            let rel = (ad_grads[pi].data[j] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
