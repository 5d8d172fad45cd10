//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are stored row-major. Gradients are computed by recording a
//! backward closure per operation on a [`Tape`] and replaying the tape in
//! reverse. All reductions run in a fixed sequential order so results are
//! bit-reproducible for a given seed.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Leaves are user-created tensors; op outputs are non-leaves.
    /// Gradients flow through non-leaves unconditionally but accumulate
    /// on leaves only when `requires_grad` is set.
    leaf: bool,
}

/// Shared-handle dense tensor. Cloning is cheap (reference count bump);
/// clones alias the same storage and gradient buffer.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            requires_grad: false,
            grad: None,
            leaf: true,
        })))
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let t = Tensor::new(shape, data);
        t.0.borrow_mut().leaf = false;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v])
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    /// Dimensions of a 2-D tensor; 1-D tensors are viewed as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        let inner = self.0.borrow();
        match inner.shape.len() {
            1 => (1, inner.shape[0]),
            2 => (inner.shape[0], inner.shape[1]),
            _ => panic!("expected 1-D or 2-D tensor, got shape {:?}", inner.shape),
        }
    }

    pub fn data(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn data_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    /// Value of a scalar (single-element) tensor.
    pub fn value(&self) -> f64 {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar shape {:?}", inner.shape);
        inner.data[0]
    }

    pub fn item(&self, idx: usize) -> f64 {
        self.0.borrow().data[idx]
    }

    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// In-place update of the value buffer (optimizer steps).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.borrow_mut().data);
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) -> &Tensor {
        self.0.borrow_mut().requires_grad = v;
        self
    }

    /// True when gradients must be propagated to this tensor.
    pub fn tracks_grad(&self) -> bool {
        let inner = self.0.borrow();
        inner.requires_grad || !inner.leaf
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), g.len(), "gradient length mismatch");
        match &mut inner.grad {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// A leaf copy of the current values with no gradient participation.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape(), self.data())
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of the value buffers.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        let a = self.0.borrow();
        let b = other.0.borrow();
        a.shape == b.shape
            && a.data.len() == b.data.len()
            && a.data
                .iter()
                .zip(b.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

type BackwardFn = Box<dyn Fn()>;

/// Records operations during a forward pass and replays them in reverse to
/// accumulate gradients. A tape built with [`Tape::no_grad`] skips all
/// recording; its outputs behave as detached leaves.
pub struct Tape {
    ops: RefCell<Vec<BackwardFn>>,
    recording: bool,
}

pub const COSINE_EPS: f64 = 1e-8;

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { ops: RefCell::new(Vec::new()), recording: true }
    }

    pub fn no_grad() -> Tape {
        Tape { ops: RefCell::new(Vec::new()), recording: false }
    }

    fn record(&self, f: BackwardFn) {
        self.ops.borrow_mut().push(f);
    }

    fn tracks(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.tracks_grad())
    }

    /// Seed the scalar `loss` with gradient `seed` and run the tape in
    /// reverse recording order.
    pub fn backward_seeded(&self, loss: &Tensor, seed: f64) {
        assert_eq!(loss.numel(), 1, "backward requires a scalar loss");
        loss.accum_grad(&[seed]);
        for op in self.ops.borrow().iter().rev() {
            op();
        }
    }

    pub fn backward(&self, loss: &Tensor) {
        self.backward_seeded(loss, 1.0);
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product A[m×k] · B[k×n].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(
            k, k2,
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            Tensor::from_op(vec![m, n], mat_mul(&ad, &bd, m, k, n))
        };
        if self.tracks(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    let bd = b.data();
                    a.accum_grad(&mat_mul_nt(&g, &bd, m, n, k));
                }
                if b.tracks_grad() {
                    let ad = a.data();
                    b.accum_grad(&mat_mul_tn(&ad, &g, m, k, n));
                }
            }));
        }
        out
    }

    /// A[m×k] · Bᵀ where B is [n×k].
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2();
        let (n, k2) = b.dims2();
        assert_eq!(
            k, k2,
            "matmul_nt shape mismatch: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        );
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            Tensor::from_op(vec![m, n], mat_mul_nt(&ad, &bd, m, k, n))
        };
        if self.tracks(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    let bd = b.data();
                    a.accum_grad(&mat_mul(&g, &bd, m, n, k));
                }
                if b.tracks_grad() {
                    let ad = a.data();
                    b.accum_grad(&mat_mul_tn(&g, &ad, m, n, k));
                }
            }));
        }
        out
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            Tensor::from_op(a.shape(), ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect())
        };
        if self.tracks(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    a.accum_grad(&g);
                }
                if b.tracks_grad() {
                    b.accum_grad(&g);
                }
            }));
        }
        out
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let neg = self.scale(b, -1.0);
        self.add(a, &neg)
    }

    /// Broadcast row vector `b`[n] over every row of `a`[m×n].
    pub fn add_row(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, n) = a.dims2();
        assert_eq!(b.numel(), n, "add_row: row length {} vs {} columns", b.numel(), n);
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(ad[i * n + j] + bd[j]);
                }
            }
            Tensor::from_op(a.shape(), data)
        };
        if self.tracks(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    a.accum_grad(&g);
                }
                if b.tracks_grad() {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                    b.accum_grad(&gb);
                }
            }));
        }
        out
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            Tensor::from_op(a.shape(), ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect())
        };
        if self.tracks(&[a, b]) {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    let bd = b.data();
                    let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
                    a.accum_grad(&ga);
                }
                if b.tracks_grad() {
                    let ad = a.data();
                    let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect();
                    b.accum_grad(&gb);
                }
            }));
        }
        out
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out = Tensor::from_op(a.shape(), a.data_ref().iter().map(|x| c * x).collect());
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        let ga: Vec<f64> = g.iter().map(|x| c * x).collect();
                        a.accum_grad(&ga);
                    }
                }
            }));
        }
        out
    }

    /// Scale matrix `m` by the scalar tensor `s` (gradients reach both).
    pub fn scale_by(&self, s: &Tensor, m: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "scale_by needs a scalar, got shape {:?}", s.shape());
        let sv = s.value();
        let out = Tensor::from_op(m.shape(), m.data_ref().iter().map(|x| sv * x).collect());
        if self.tracks(&[s, m]) {
            let (s, m, o) = (s.clone(), m.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if s.tracks_grad() {
                    let md = m.data_ref();
                    let ds: f64 = g.iter().zip(md.iter()).map(|(x, y)| x * y).sum();
                    s.accum_grad(&[ds]);
                }
                if m.tracks_grad() {
                    let gm: Vec<f64> = g.iter().map(|x| sv * x).collect();
                    m.accum_grad(&gm);
                }
            }));
        }
        out
    }

    pub fn gelu(&self, a: &Tensor) -> Tensor {
        let out = Tensor::from_op(a.shape(), a.data_ref().iter().map(|&x| gelu_fwd(x)).collect());
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        let ad = a.data_ref();
                        let ga: Vec<f64> =
                            g.iter().zip(ad.iter()).map(|(gy, &x)| gy * gelu_bwd(x)).collect();
                        drop(ad);
                        a.accum_grad(&ga);
                    }
                }
            }));
        }
        out
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            a.numel(),
            "reshape {:?} -> {:?} changes element count",
            a.shape(),
            shape
        );
        let out = Tensor::from_op(shape, a.data());
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        a.accum_grad(&g);
                    }
                }
            }));
        }
        out
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows on empty list");
        let n = parts[0].dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (m, pn) = p.dims2();
            assert_eq!(pn, n, "concat_rows column mismatch: {} vs {}", pn, n);
            data.extend_from_slice(&p.data_ref());
            rows += m;
        }
        let out = Tensor::from_op(vec![rows, n], data);
        if self.recording && parts.iter().any(|t| t.tracks_grad()) {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let o = out.clone();
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                let mut off = 0;
                for p in &parts {
                    let len = p.numel();
                    if p.tracks_grad() {
                        p.accum_grad(&g[off..off + len]);
                    }
                    off += len;
                }
            }));
        }
        out
    }

    /// Rows [start, end) of a 2-D tensor.
    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Tensor {
        let (m, n) = a.dims2();
        assert!(start <= end && end <= m, "slice_rows [{start},{end}) out of bounds for {m} rows");
        let out = Tensor::from_op(vec![end - start, n], a.data_ref()[start * n..end * n].to_vec());
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        let mut ga = vec![0.0; m * n];
                        ga[start * n..end * n].copy_from_slice(&g);
                        a.accum_grad(&ga);
                    }
                }
            }));
        }
        out
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&self, a: &Tensor, start: usize, end: usize) -> Tensor {
        let (m, n) = a.dims2();
        assert!(start <= end && end <= n, "slice_cols [{start},{end}) out of bounds for {n} cols");
        let w = end - start;
        let out = {
            let ad = a.data_ref();
            let mut data = Vec::with_capacity(m * w);
            for i in 0..m {
                data.extend_from_slice(&ad[i * n + start..i * n + end]);
            }
            Tensor::from_op(vec![m, w], data)
        };
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        let mut ga = vec![0.0; m * n];
                        for i in 0..m {
                            ga[i * n + start..i * n + end]
                                .copy_from_slice(&g[i * w..(i + 1) * w]);
                        }
                        a.accum_grad(&ga);
                    }
                }
            }));
        }
        out
    }

    pub fn concat_cols(&self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols on empty list");
        let m = parts[0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = p.dims2();
                assert_eq!(pm, m, "concat_cols row mismatch: {} vs {}", pm, m);
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data_ref();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_op(vec![m, n], data);
        if self.recording && parts.iter().any(|t| t.tracks_grad()) {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let widths = widths.clone();
            let o = out.clone();
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                let mut col = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if p.tracks_grad() {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + col..i * n + col + w]);
                        }
                        p.accum_grad(&gp);
                    }
                    col += w;
                }
            }));
        }
        out
    }

    // ── Reductions and normalization ────────────────────────────────

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data_ref().iter().sum();
        let out = Tensor::from_op(vec![1], vec![s]);
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            let n = a.numel();
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() {
                        a.accum_grad(&vec![g[0]; n]);
                    }
                }
            }));
        }
        out
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let n = a.numel() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    /// √(Σ x²) over all elements.
    pub fn frobenius_norm(&self, a: &Tensor) -> Tensor {
        let f = {
            let ad = a.data_ref();
            let mut s = 0.0;
            for x in ad.iter() {
                s += x * x;
            }
            s.sqrt()
        };
        let out = Tensor::from_op(vec![1], vec![f]);
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.tracks_grad() && f > 0.0 {
                        let ad = a.data_ref();
                        let ga: Vec<f64> = ad.iter().map(|x| g[0] * x / f).collect();
                        drop(ad);
                        a.accum_grad(&ga);
                    }
                }
            }));
        }
        out
    }

    /// Row-wise softmax with max-subtraction. `-inf` entries get
    /// probability exactly 0; a row of all `-inf` panics.
    pub fn softmax_rows(&self, a: &Tensor) -> Tensor {
        let (m, n) = a.dims2();
        assert!(n >= 1, "softmax over empty axis");
        let out = {
            let ad = a.data_ref();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                data.extend_from_slice(&softmax_row(row));
            }
            Tensor::from_op(a.shape(), data)
        };
        if self.tracks(&[a]) {
            let (a, o) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if a.tracks_grad() {
                    let p = o.data_ref();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * p[i * n + j];
                        }
                        for j in 0..n {
                            ga[i * n + j] = p[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    drop(p);
                    a.accum_grad(&ga);
                }
            }));
        }
        out
    }

    /// Per-row layer normalization over the last axis with affine
    /// parameters `gamma`, `beta` of length n.
    pub fn layernorm_rows(&self, a: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        const EPS: f64 = 1e-6;
        let (m, n) = a.dims2();
        assert_eq!(gamma.numel(), n, "layernorm gamma length {} vs {} cols", gamma.numel(), n);
        assert_eq!(beta.numel(), n, "layernorm beta length {} vs {} cols", beta.numel(), n);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let out = {
            let ad = a.data_ref();
            let gd = gamma.data_ref();
            let bd = beta.data_ref();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[i] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[i * n + j] = xh;
                    data[i * n + j] = gd[j] * xh + bd[j];
                }
            }
            Tensor::from_op(a.shape(), data)
        };
        if self.tracks(&[a, gamma, beta]) {
            let (a, gamma, beta, o) = (a.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                if gamma.tracks_grad() {
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    gamma.accum_grad(&gg);
                }
                if beta.tracks_grad() {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                    beta.accum_grad(&gb);
                }
                if a.tracks_grad() {
                    let gd = gamma.data_ref();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * n + j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gd[j];
                            ga[i * n + j] = inv_std[i]
                                * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
                        }
                    }
                    drop(gd);
                    a.accum_grad(&ga);
                }
            }));
        }
        out
    }

    // ── Similarity and losses ───────────────────────────────────────

    /// Cosine similarity u·v / (max(‖u‖,eps)·max(‖v‖,eps)).
    pub fn cosine_sim(&self, u: &Tensor, v: &Tensor, eps: f64) -> Tensor {
        assert_eq!(
            u.numel(),
            v.numel(),
            "cosine_sim length mismatch: {:?} vs {:?}",
            u.shape(),
            v.shape()
        );
        assert!(eps > 0.0, "cosine_sim eps must be positive");
        let (dot, nu_raw, nv_raw) = {
            let ud = u.data_ref();
            let vd = v.data_ref();
            let mut dot = 0.0;
            let mut su = 0.0;
            let mut sv = 0.0;
            for (x, y) in ud.iter().zip(vd.iter()) {
                dot += x * y;
                su += x * x;
                sv += y * y;
            }
            (dot, su.sqrt(), sv.sqrt())
        };
        let nu = nu_raw.max(eps);
        let nv = nv_raw.max(eps);
        let c = dot / (nu * nv);
        let out = Tensor::from_op(vec![1], vec![c]);
        if self.tracks(&[u, v]) {
            let (u, v, o) = (u.clone(), v.clone(), out.clone());
            self.record(Box::new(move || {
                let g = match o.grad() {
                    Some(g) => g,
                    None => return,
                };
                let dc = g[0];
                if u.tracks_grad() {
                    let ud = u.data();
                    let vd = v.data();
                    let ga: Vec<f64> = if nu_raw > eps {
                        ud.iter()
                            .zip(vd.iter())
                            .map(|(x, y)| dc * (y / (nu * nv) - c * x / (nu * nu)))
                            .collect()
                    } else {
                        vd.iter().map(|y| dc * y / (nu * nv)).collect()
                    };
                    drop(ud);
                    drop(vd);
                    u.accum_grad(&ga);
                }
                if v.tracks_grad() {
                    let ud = u.data();
                    let vd = v.data();
                    let gb: Vec<f64> = if nv_raw > eps {
                        ud.iter()
                            .zip(vd.iter())
                            .map(|(x, y)| dc * (x / (nu * nv) - c * y / (nv * nv)))
                            .collect()
                    } else {
                        ud.iter().map(|x| dc * x / (nu * nv)).collect()
                    };
                    drop(ud);
                    drop(vd);
                    v.accum_grad(&gb);
                }
            }));
        }
        out
    }

    /// Set logits outside [lo, hi) to −inf row-wise. Masked positions pass
    /// no gradient.
    pub fn mask_outside(&self, logits: &Tensor, lo: usize, hi: usize) -> Tensor {
        let (m, n) = logits.dims2();
        assert!(lo < hi && hi <= n, "mask range [{lo},{hi}) invalid for {n} logits");
        let out = {
            let ld = logits.data_ref();
            let mut data = vec![f64::NEG_INFINITY; m * n];
            for i in 0..m {
                for j in lo..hi {
                    data[i * n + j] = ld[i * n + j];
                }
            }
            Tensor::from_op(logits.shape(), data)
        };
        if self.tracks(&[logits]) {
            let (l, o) = (logits.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if l.tracks_grad() {
                        let mut gl = vec![0.0; m * n];
                        for i in 0..m {
                            for j in lo..hi {
                                gl[i * n + j] = g[i * n + j];
                            }
                        }
                        l.accum_grad(&gl);
                    }
                }
            }));
        }
        out
    }

    /// Softmax cross-entropy of a single logit row against `target`.
    /// −inf logits receive probability 0 and gradient 0.
    pub fn cross_entropy(&self, logits: &Tensor, target: usize) -> Tensor {
        let (m, n) = logits.dims2();
        assert_eq!(m, 1, "cross_entropy expects a single row, got {:?}", logits.shape());
        assert!(target < n, "target {} out of range for {} classes", target, n);
        let probs;
        let loss;
        {
            let ld = logits.data_ref();
            assert!(
                ld[target].is_finite(),
                "cross_entropy target logit is masked (−inf)"
            );
            let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "cross_entropy: all logits are −inf");
            let exps: Vec<f64> = ld.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            probs = exps.iter().map(|e| e / sum).collect::<Vec<f64>>();
            loss = sum.ln() - (ld[target] - max);
        }
        let out = Tensor::from_op(vec![1], vec![loss]);
        if self.tracks(&[logits]) {
            let (l, o) = (logits.clone(), out.clone());
            self.record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if l.tracks_grad() {
                        let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                        gl[target] -= g[0];
                        l.accum_grad(&gl);
                    }
                }
            }));
        }
        out
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "softmax over a slice of all −inf");
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // √(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// A[m×k] · Bᵀ where B is [n×k].
fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Aᵀ · B where A is [m×k], B is [m×n]; result [k×n].
fn mat_mul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            let or = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}
