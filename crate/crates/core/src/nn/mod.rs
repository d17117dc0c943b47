//! Layers with explicit forward and backward passes over a flat parameter
//! vector.
//!
//! Every layer owns offsets into the flat parameter (and gradient) vector
//! rather than its own storage, so a whole network is a single `&[f64]`.
//! Temporal activations are channel-major, `[channel][batch][time]`, which
//! makes a 1-D convolution one GEMM over `batch * time` columns.

pub(crate) mod embed;
pub(crate) mod mlp;
pub(crate) mod unet;

use rand::Rng;

/// Temporal activations, indexed `(c * batch + b) * len + t`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub b: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, b: usize, l: usize) -> Self {
        Self {
            c,
            b,
            l,
            data: vec![0.0; c * b * l],
        }
    }

    pub fn like(&self) -> Self {
        Self::zeros(self.c, self.b, self.l)
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation; cheap because channels are outermost.
    pub fn cat(&self, other: &Act) -> Act {
        debug_assert_eq!((self.b, self.l), (other.b, other.l));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Act {
            c: self.c + other.c,
            b: self.b,
            l: self.l,
            data,
        }
    }

    /// Inverse of [`Act::cat`] for gradients.
    pub fn split(mut self, first: usize) -> (Act, Act) {
        let tail = self.data.split_off(first * self.b * self.l);
        let second = Act {
            c: self.c - first,
            b: self.b,
            l: self.l,
            data: tail,
        };
        self.c = first;
        (self, second)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, Copy)]
struct InitSpec {
    offset: usize,
    len: usize,
    init: Init,
}

/// Hands out parameter offsets and records how each block is initialized.
#[derive(Debug, Default, Clone)]
pub(crate) struct ParamBuilder {
    len: usize,
    specs: Vec<InitSpec>,
}

impl ParamBuilder {
    fn take(&mut self, len: usize, init: Init) -> usize {
        let offset = self.len;
        self.specs.push(InitSpec { offset, len, init });
        self.len += len;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Fan-in scaled uniform weights and biases, unit norm gains.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for s in &self.specs {
            let block = &mut p[s.offset..s.offset + s.len];
            match s.init {
                Init::Uniform(bound) => {
                    for v in block {
                        *v = rng.random_range(-bound..=bound);
                    }
                }
                Init::Const(c) => block.fill(c),
            }
        }
        p
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`. A transposed operand is
/// stored row-major in its transposed shape.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
        );
    }
}

/// `x * tanh(softplus(x))`, with one exponential.
#[inline]
pub(crate) fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

#[inline]
pub(crate) fn mish_grad(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let t = n / (n + 2.0);
    let sig = e / (1.0 + e);
    t + x * (1.0 - t * t) * sig
}

pub(crate) fn mish_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| mish(*v)).collect()
}

/// `dy * mish'(x)` elementwise.
pub(crate) fn mish_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(x, d)| d * mish_grad(*x)).collect()
}

/// 1-D convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    w: usize,
    bias: usize,
}

pub(crate) struct ConvCache {
    cin: usize,
    b: usize,
    l: usize,
    cols: Vec<f64>,
}

impl Conv1d {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = pb.take(cout * cin * kernel, Init::Uniform(bound));
        let bias = pb.take(cout, Init::Uniform(bound));
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            w,
            bias,
        }
    }

    fn out_len(&self, l: usize) -> usize {
        (l + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Act, lo: usize) -> Vec<f64> {
        if self.kernel == 1 && self.stride == 1 {
            return x.data.clone();
        }
        let n = x.b * lo;
        let mut cols = vec![0.0; self.cin * self.kernel * n];
        for ci in 0..self.cin {
            for j in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + j) * n..][..n];
                for b in 0..x.b {
                    let src = &x.data[(ci * x.b + b) * x.l..][..x.l];
                    let dst = &mut row[b * lo..][..lo];
                    for (to, d) in dst.iter_mut().enumerate() {
                        let t = (to * self.stride + j) as isize - self.pad as isize;
                        if t >= 0 && (t as usize) < x.l {
                            *d = src[t as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, p: &[f64], x: &Act) -> (Act, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let lo = self.out_len(x.l);
        let n = x.b * lo;
        let cols = self.im2col(x, lo);
        let mut y = Act::zeros(self.cout, x.b, lo);
        for (co, row) in y.data.chunks_mut(n).enumerate() {
            row.fill(p[self.bias + co]);
        }
        gemm(
            self.cout,
            self.cin * self.kernel,
            n,
            &p[self.w..],
            false,
            &cols,
            false,
            1.0,
            &mut y.data,
        );
        let cache = ConvCache {
            cin: x.c,
            b: x.b,
            l: x.l,
            cols,
        };
        (y, cache)
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `need_dx`.
    pub fn backward(&self, p: &[f64], cache: &ConvCache, dy: &Act, g: &mut [f64], need_dx: bool) -> Option<Act> {
        let n = dy.b * dy.l;
        let ck = self.cin * self.kernel;
        gemm(self.cout, n, ck, &dy.data, false, &cache.cols, true, 1.0, &mut g[self.w..]);
        for (co, row) in dy.data.chunks(n).enumerate() {
            g[self.bias + co] += row.iter().sum::<f64>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; ck * n];
        gemm(ck, self.cout, n, &p[self.w..], true, &dy.data, false, 0.0, &mut dcols);
        if self.kernel == 1 && self.stride == 1 {
            return Some(Act {
                c: cache.cin,
                b: cache.b,
                l: cache.l,
                data: dcols,
            });
        }
        let mut dx = Act::zeros(cache.cin, cache.b, cache.l);
        let lo = dy.l;
        for ci in 0..self.cin {
            for j in 0..self.kernel {
                let row = &dcols[(ci * self.kernel + j) * n..][..n];
                for b in 0..cache.b {
                    let dst = &mut dx.data[(ci * cache.b + b) * cache.l..][..cache.l];
                    let src = &row[b * lo..][..lo];
                    for (to, s) in src.iter().enumerate() {
                        let t = (to * self.stride + j) as isize - self.pad as isize;
                        if t >= 0 && (t as usize) < cache.l {
                            dst[t as usize] += s;
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Group normalization over `(channels in group) x time`, per example.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    c: usize,
    groups: usize,
    gamma: usize,
    beta: usize,
}

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, c: usize, groups: usize) -> Self {
        let groups = gcd(groups.max(1), c);
        let gamma = pb.take(c, Init::Const(1.0));
        let beta = pb.take(c, Init::Const(0.0));
        Self {
            c,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Act) -> (Act, NormCache) {
        let cpg = self.c / self.groups;
        let m = (cpg * x.l) as f64;
        let mut y = x.like();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.b * self.groups];
        for b in 0..x.b {
            for g in 0..self.groups {
                let chans = g * cpg..(g + 1) * cpg;
                let idx = |c: usize| (c * x.b + b) * x.l;
                let mut sum = 0.0;
                for c in chans.clone() {
                    sum += x.data[idx(c)..idx(c) + x.l].iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut var = 0.0;
                for c in chans.clone() {
                    var += x.data[idx(c)..idx(c) + x.l].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                let is = 1.0 / (var / m + GN_EPS).sqrt();
                inv_std[b * self.groups + g] = is;
                for c in chans {
                    let (gm, bt) = (p[self.gamma + c], p[self.beta + c]);
                    for i in idx(c)..idx(c) + x.l {
                        let h = (x.data[i] - mean) * is;
                        xhat[i] = h;
                        y.data[i] = gm * h + bt;
                    }
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, dy: &Act, g: &mut [f64]) -> Act {
        let cpg = self.c / self.groups;
        let m = (cpg * dy.l) as f64;
        let mut dx = dy.like();
        for b in 0..dy.b {
            for grp in 0..self.groups {
                let chans = grp * cpg..(grp + 1) * cpg;
                let idx = |c: usize| (c * dy.b + b) * dy.l;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for c in chans.clone() {
                    let gm = p[self.gamma + c];
                    let (mut dg, mut db) = (0.0, 0.0);
                    for i in idx(c)..idx(c) + dy.l {
                        let d = dy.data[i];
                        dg += d * cache.xhat[i];
                        db += d;
                        let dh = d * gm;
                        sum_d += dh;
                        sum_dx += dh * cache.xhat[i];
                    }
                    g[self.gamma + c] += dg;
                    g[self.beta + c] += db;
                }
                let is = cache.inv_std[b * self.groups + grp];
                for c in chans {
                    let gm = p[self.gamma + c];
                    for i in idx(c)..idx(c) + dy.l {
                        let dh = dy.data[i] * gm;
                        dx.data[i] = is / m * (m * dh - sum_d - cache.xhat[i] * sum_dx);
                    }
                }
            }
        }
        dx
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Fully connected layer over row-major `[batch][features]` inputs.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub din: usize,
    pub dout: usize,
    w: usize,
    bias: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = pb.take(dout * din, Init::Uniform(bound));
        let bias = pb.take(dout, Init::Uniform(bound));
        Self { din, dout, w, bias }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(batch * self.dout);
        for _ in 0..batch {
            y.extend_from_slice(&p[self.bias..self.bias + self.dout]);
        }
        gemm(batch, self.din, self.dout, x, false, &p[self.w..], true, 1.0, &mut y);
        y
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], batch: usize, g: &mut [f64]) -> Vec<f64> {
        // dW (dout x din) = dy^T (dout x batch) * x (batch x din)
        gemm(self.dout, batch, self.din, dy, true, x, false, 1.0, &mut g[self.w..]);
        for row in dy.chunks(self.dout) {
            for (o, d) in row.iter().enumerate() {
                g[self.bias + o] += d;
            }
        }
        let mut dx = vec![0.0; batch * self.din];
        gemm(batch, self.dout, self.din, dy, false, &p[self.w..], false, 0.0, &mut dx);
        dx
    }
}

/// Adds a per-example channel vector `e` (`[batch][c]`) at every time step.
pub(crate) fn add_channel_bias(h: &mut Act, e: &[f64]) {
    for c in 0..h.c {
        for b in 0..h.b {
            let v = e[b * h.c + c];
            for x in &mut h.data[(c * h.b + b) * h.l..][..h.l] {
                *x += v;
            }
        }
    }
}

pub(crate) fn channel_bias_backward(dh: &Act) -> Vec<f64> {
    let mut de = vec![0.0; dh.b * dh.c];
    for c in 0..dh.c {
        for b in 0..dh.b {
            de[b * dh.c + c] = dh.data[(c * dh.b + b) * dh.l..][..dh.l].iter().sum();
        }
    }
    de
}

/// Nearest-neighbour upsampling by two along time.
pub(crate) fn upsample2(x: &Act) -> Act {
    let mut y = Act::zeros(x.c, x.b, x.l * 2);
    for (src, dst) in x.data.chunks(x.l).zip(y.data.chunks_mut(x.l * 2)) {
        for (t, v) in src.iter().enumerate() {
            dst[2 * t] = *v;
            dst[2 * t + 1] = *v;
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &Act) -> Act {
    let mut dx = Act::zeros(dy.c, dy.b, dy.l / 2);
    for (src, dst) in dy.data.chunks(dy.l).zip(dx.data.chunks_mut(dy.l / 2)) {
        for (t, d) in dst.iter_mut().enumerate() {
            *d = src[2 * t] + src[2 * t + 1];
        }
    }
    dx
}

/// Sinusoidal features of the diffusion step, `[sin(k f_i).., cos(k f_i)..]`.
pub(crate) fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scale = if half > 1 {
        (10_000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    let mut out = vec![0.0; steps.len() * dim];
    for (row, &k) in out.chunks_mut(dim).zip(steps) {
        for i in 0..half {
            let arg = k as f64 * (-scale * i as f64).exp();
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Reference convolution written as explicit loops.
    fn conv_naive(conv: &Conv1d, p: &[f64], x: &Act) -> Act {
        let lo = conv.out_len(x.l);
        let mut y = Act::zeros(conv.cout, x.b, lo);
        for co in 0..conv.cout {
            for b in 0..x.b {
                for to in 0..lo {
                    let mut acc = p[conv.bias + co];
                    for ci in 0..conv.cin {
                        for j in 0..conv.kernel {
                            let t = (to * conv.stride + j) as isize - conv.pad as isize;
                            if t >= 0 && (t as usize) < x.l {
                                let w = p[conv.w + (co * conv.cin + ci) * conv.kernel + j];
                                acc += w * x.data[(ci * x.b + b) * x.l + t as usize];
                            }
                        }
                    }
                    y.data[(co * x.b + b) * lo + to] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s) in [(5, 1), (3, 2), (1, 1), (3, 1)] {
            let mut pb = ParamBuilder::default();
            let conv = Conv1d::new(&mut pb, 3, 4, k, s);
            let p = rand_vec(&mut rng, pb.len());
            let x = Act {
                c: 3,
                b: 2,
                l: 8,
                data: rand_vec(&mut rng, 48),
            };
            let (y, _) = conv.forward(&p, &x);
            let want = conv_naive(&conv, &p, &x);
            assert_eq!((y.c, y.b, y.l), (want.c, want.b, want.l));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks a scalar function's analytic input/parameter gradients with
    /// central differences.
    fn check_grad(f: impl Fn(&[f64], &[f64]) -> f64, analytic: (Vec<f64>, Vec<f64>), p: &[f64], x: &[f64]) {
        let h = 1e-6;
        let (gp, gx) = analytic;
        for i in 0..p.len() {
            let mut pp = p.to_vec();
            let mut pm = p.to_vec();
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(&pp, x) - f(&pm, x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(p, &xp) - f(p, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", gx[i]);
        }
    }

    #[test]
    fn conv_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pb = ParamBuilder::default();
        let conv = Conv1d::new(&mut pb, 2, 4, 3, 2);
        let gn = GroupNorm::new(&mut pb, 4, 2);
        let mut p = pb.init(&mut rng);
        for v in &mut p {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = rand_vec(&mut rng, 2 * 3 * 6);
        let weights = rand_vec(&mut rng, 4 * 3 * 3);
        let act = |x: &[f64]| Act {
            c: 2,
            b: 3,
            l: 6,
            data: x.to_vec(),
        };
        let f = |p: &[f64], x: &[f64]| {
            let (y, _) = conv.forward(p, &act(x));
            let (z, _) = gn.forward(p, &y);
            z.data.iter().zip(&weights).map(|(a, w)| mish(*a) * w).sum::<f64>()
        };
        let (y, cc) = conv.forward(&p, &act(&x));
        let (z, nc) = gn.forward(&p, &y);
        let dz = Act {
            data: mish_backward(&z.data, &weights),
            ..z.like()
        };
        let mut g = vec![0.0; p.len()];
        let dy = gn.backward(&p, &nc, &dz, &mut g);
        let dx = conv.backward(&p, &cc, &dy, &mut g, true).unwrap();
        check_grad(f, (g, dx.data), &p, &x);
    }

    #[test]
    fn linear_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pb = ParamBuilder::default();
        let lin = Linear::new(&mut pb, 3, 5);
        let p = pb.init(&mut rng);
        let x = rand_vec(&mut rng, 2 * 3);
        let weights = rand_vec(&mut rng, 2 * 5);
        let f = |p: &[f64], x: &[f64]| lin.forward(p, x, 2).iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>();
        let mut g = vec![0.0; p.len()];
        let dx = lin.backward(&p, &x, &weights, 2, &mut g);
        check_grad(f, (g, dx), &p, &x);

        let a = Act {
            c: 2,
            b: 1,
            l: 3,
            data: rand_vec(&mut rng, 6),
        };
        let up = upsample2(&a);
        assert_eq!(up.l, 6);
        assert_eq!(up.data[0], up.data[1]);
        let back = upsample2_backward(&Act {
            data: vec![1.0; 12],
            ..up.like()
        });
        assert!(back.data.iter().all(|v| *v == 2.0));
    }

    #[test]
    fn mish_derivative() {
        for x in [-8.0, -1.3, -0.2, 0.0, 0.4, 2.5, 19.0, 25.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_grad(x)).abs() < 1e-7, "{x}");
            let reference = x * ((1.0 + f64::exp(x)).ln()).tanh();
            assert!((mish(x) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn cat_split_round_trip() {
        let a = Act {
            c: 1,
            b: 2,
            l: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let b = Act {
            c: 2,
            b: 2,
            l: 2,
            data: (5..13).map(f64::from).collect(),
        };
        let (x, y) = a.cat(&b).split(1);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }
}
