//! Layer primitives with hand-written backward passes.
//!
//! Activations are stored channel-major: a tensor with `c` channels over a
//! batch of `n` images of `h × w` pixels is a `c × (n·h·w)` row-major matrix.
//! Convolutions lower to a single GEMM through `im2col`.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

/// Floating-point type the network runs in.
pub trait Real: Float + Default + Send + Sync + core::fmt::Debug + 'static {
    /// `C ← α·A·B + β·C` on strided row-major views.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }

    fn to_f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Whether a GEMM operand is read transposed.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// `C (m×n) ← α·op(A)·op(B) + β·C` with contiguous row-major storage.
/// `A` is stored `m×k` (or `k×m` when transposed), `B` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserted lengths cover every index addressed by these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Spatial shape of a batch: `n` images of `h × w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Columns of a channel-major activation.
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// 3×3, stride 1, zero padding 1. `cols` has `c·9` rows of `shape.cols()`.
pub(crate) fn im2col3<T: Real>(x: &[T], c: usize, shape: Shape, cols: &mut [T]) {
    let (h, w, m) = (shape.h, shape.w, shape.cols());
    let plane = shape.plane();
    for ch in 0..c {
        let src = &x[ch * m..(ch + 1) * m];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * m..][..m];
                for img in 0..shape.n {
                    let s = &src[img * plane..(img + 1) * plane];
                    let d = &mut row[img * plane..(img + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let drow = &mut d[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &s[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                drow[0] = T::zero();
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`], accumulating into `dx`.
pub(crate) fn col2im3<T: Real>(cols: &[T], c: usize, shape: Shape, dx: &mut [T]) {
    let (h, w, m) = (shape.h, shape.w, shape.cols());
    let plane = shape.plane();
    for ch in 0..c {
        let dst = &mut dx[ch * m..(ch + 1) * m];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * m..][..m];
                for img in 0..shape.n {
                    let s = &row[img * plane..(img + 1) * plane];
                    let d = &mut dst[img * plane..(img + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &s[y * w..(y + 1) * w];
                        let drow = &mut d[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                for (a, b) in drow[..w - 1].iter_mut().zip(&srow[1..]) {
                                    *a = *a + *b;
                                }
                            }
                            1 => {
                                for (a, b) in drow.iter_mut().zip(srow) {
                                    *a = *a + *b;
                                }
                            }
                            _ => {
                                for (a, b) in drow[1..].iter_mut().zip(&srow[..w - 1]) {
                                    *a = *a + *b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Location of a layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive spans while a model is being laid out.
#[derive(Default)]
pub(crate) struct Allocator {
    pub next: usize,
}

impl Allocator {
    pub fn take(&mut self, len: usize) -> Span {
        let s = Span {
            offset: self.next,
            len,
        };
        self.next += len;
        s
    }
}

/// Convolution with kernel 1 or 3, stride 1, "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Span,
    pub bias: Option<Span>,
}

impl Conv {
    pub fn new(alloc: &mut Allocator, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        debug_assert!(k == 1 || k == 3);
        let weight = alloc.take(cout * cin * k * k);
        let bias = bias.then(|| alloc.take(cout));
        Conv {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn lowered<'a, T: Real>(&self, x: &'a [T], shape: Shape, scratch: &'a mut Vec<T>) -> &'a [T] {
        if self.k == 1 {
            x
        } else {
            scratch.clear();
            scratch.resize(self.fan_in() * shape.cols(), T::zero());
            im2col3(x, self.cin, shape, scratch);
            scratch
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], shape: Shape, scratch: &mut Vec<T>) -> Vec<T> {
        let m = shape.cols();
        let mut out = vec![T::zero(); self.cout * m];
        if let Some(b) = self.bias {
            for (row, &bv) in out.chunks_exact_mut(m).zip(b.of(params)) {
                row.fill(bv);
            }
        }
        let beta = if self.bias.is_some() { T::one() } else { T::zero() };
        let cols = self.lowered(x, shape, scratch);
        gemm(
            self.cout,
            self.fan_in(),
            m,
            T::one(),
            self.weight.of(params),
            Op::N,
            cols,
            Op::N,
            beta,
            &mut out,
        );
        out
    }

    /// Accumulates parameter gradients; returns `∂L/∂x` when `need_dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        dy: &[T],
        shape: Shape,
        need_dx: bool,
        scratch: &mut Vec<T>,
    ) -> Option<Vec<T>> {
        let m = shape.cols();
        let fan_in = self.fan_in();
        if let Some(b) = self.bias {
            for (g, row) in b.of_mut(grads).iter_mut().zip(dy.chunks_exact(m)) {
                *g = *g + row.iter().fold(T::zero(), |a, v| a + *v);
            }
        }
        {
            let cols = self.lowered(x, shape, scratch);
            gemm(
                self.cout,
                m,
                fan_in,
                T::one(),
                dy,
                Op::N,
                cols,
                Op::T,
                T::one(),
                self.weight.of_mut(grads),
            );
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); fan_in * m];
        gemm(
            fan_in,
            self.cout,
            m,
            T::one(),
            self.weight.of(params),
            Op::T,
            dy,
            Op::N,
            T::zero(),
            &mut dcols,
        );
        if self.k == 1 {
            Some(dcols)
        } else {
            let mut dx = vec![T::zero(); self.cin * m];
            col2im3(&dcols, self.cin, shape, &mut dx);
            Some(dx)
        }
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BatchNorm {
    pub c: usize,
    pub gamma: Span,
    pub beta: Span,
    /// Running mean then running variance, in the model's statistics vector.
    pub stats: Span,
}

pub(crate) struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

impl BatchNorm {
    pub fn new(alloc: &mut Allocator, stats: &mut Allocator, c: usize) -> Self {
        BatchNorm {
            c,
            gamma: alloc.take(c),
            beta: alloc.take(c),
            stats: stats.take(2 * c),
        }
    }

    /// Training-mode forward over batch statistics; updates the running
    /// estimates with `momentum`.
    pub fn forward_train<T: Real>(
        &self,
        params: &[T],
        running: &mut [T],
        x: &[T],
        m: usize,
        momentum: T,
        eps: T,
    ) -> (Vec<T>, BnCache<T>) {
        let mut y = vec![T::zero(); x.len()];
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); self.c];
        let (gamma, beta) = (self.gamma.of(params), self.beta.of(params));
        let inv_m = T::one() / T::from_f64(m as f64);
        let (rm, rv) = self.stats.of_mut(running).split_at_mut(self.c);
        for ch in 0..self.c {
            let xs = &x[ch * m..(ch + 1) * m];
            let mean = xs.iter().fold(T::zero(), |a, v| a + *v) * inv_m;
            let var = xs.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let xh = &mut x_hat[ch * m..(ch + 1) * m];
            let ys = &mut y[ch * m..(ch + 1) * m];
            for ((h, o), v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
                *h = (*v - mean) * is;
                *o = gamma[ch] * *h + beta[ch];
            }
            let unbiased = if m > 1 {
                var * T::from_f64(m as f64 / (m - 1) as f64)
            } else {
                var
            };
            rm[ch] = (T::one() - momentum) * rm[ch] + momentum * mean;
            rv[ch] = (T::one() - momentum) * rv[ch] + momentum * unbiased;
        }
        (y, BnCache { x_hat, inv_std })
    }

    /// Inference-mode forward with running statistics, in place.
    pub fn forward_eval<T: Real>(&self, params: &[T], running: &[T], x: &mut [T], m: usize, eps: T) {
        let (gamma, beta) = (self.gamma.of(params), self.beta.of(params));
        let (rm, rv) = self.stats.of(running).split_at(self.c);
        for ch in 0..self.c {
            let scale = gamma[ch] / (rv[ch] + eps).sqrt();
            let shift = beta[ch] - rm[ch] * scale;
            for v in &mut x[ch * m..(ch + 1) * m] {
                *v = *v * scale + shift;
            }
        }
    }

    pub fn backward<T: Real>(&self, params: &[T], grads: &mut [T], cache: &BnCache<T>, dy: &[T], m: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); dy.len()];
        let gamma = self.gamma.of(params);
        let inv_m = T::one() / T::from_f64(m as f64);
        for ch in 0..self.c {
            let d = &dy[ch * m..(ch + 1) * m];
            let xh = &cache.x_hat[ch * m..(ch + 1) * m];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for (g, h) in d.iter().zip(xh) {
                dg = dg + *g * *h;
                db = db + *g;
            }
            grads[self.gamma.offset + ch] = grads[self.gamma.offset + ch] + dg;
            grads[self.beta.offset + ch] = grads[self.beta.offset + ch] + db;
            let k = gamma[ch] * cache.inv_std[ch];
            for ((o, g), h) in dx[ch * m..(ch + 1) * m].iter_mut().zip(d).zip(xh) {
                *o = k * (*g - (db + *h * dg) * inv_m);
            }
        }
        dx
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` where the rectified output was not positive.
pub(crate) fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let step = T::from_f64(lr * libm::sqrt(c2) / c1);
        let eps = T::from_f64(self.eps * libm::sqrt(c2));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            *p = *p - step * *m / (v.sqrt() + eps);
        }
    }
}
