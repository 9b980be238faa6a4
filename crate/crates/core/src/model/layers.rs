//! Minimal NCHW layers with hand-written backward passes. Convolutions lower
//! to im2col + sgemm per image and group.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Activation batch in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Act {
        Act { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn per_image(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.per_image();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn zeros_like(&self) -> Act {
        Act::zeros(self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub group: Group,
    /// Excluded from decoupled weight decay (biases).
    pub no_decay: bool,
}

impl Param {
    pub(crate) fn new(name: String, shape: Vec<usize>, value: Vec<f32>, group: Group, no_decay: bool) -> Param {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param { name, shape, value, grad: vec![0.0; n], group, no_decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// `c = alpha * a @ b + beta * c` on row-major slices with explicit strides,
/// so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// `[out_c, in_c / groups, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init_scale: f32,
        group: Group,
        rng: &mut R,
    ) -> Conv2d {
        assert!(in_c % groups == 0 && out_c % groups == 0, "{name}: channels not divisible by groups");
        let fan_in = (in_c / groups) * kernel * kernel;
        let std = init_scale * (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let n = out_c * fan_in;
        let w = (0..n).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            groups,
            weight: Param::new(format!("{name}.weight"), vec![out_c, in_c / groups, kernel, kernel], w, group, false),
            bias: Param::new(format!("{name}.bias"), vec![out_c], vec![0.0; out_c], group, true),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds one image into `[in_c * k * k, oh * ow]`.
    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = oh * ow;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src = &plane[iy * w..(iy + 1) * w];
                        let first = lo * s + kx - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let n = oh * ow;
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= h {
                            continue;
                        }
                        let src = &row[oy * ow + lo..oy * ow + hi];
                        let first = lo * s + kx - p;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            dst[first..first + src.len()].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        } else {
                            dst[first..].iter_mut().step_by(s).zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Act) -> Act {
        assert_eq!(x.c, self.in_c, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let mut y = Act::zeros(x.n, self.out_c, oh, ow);
        let (cin_g, cout_g) = (self.in_c / self.groups, self.out_c / self.groups);
        let kg = cin_g * self.kernel * self.kernel;
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; self.in_c * self.kernel * self.kernel * p] };
        for i in 0..x.n {
            let xi = x.image(i);
            let src: &[f32] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, x.h, x.w, &mut cols);
                &cols
            };
            let yi = &mut y.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            for (o, b) in self.bias.value.iter().enumerate() {
                yi[o * p..(o + 1) * p].fill(*b);
            }
            for g in 0..self.groups {
                gemm(
                    cout_g,
                    kg,
                    p,
                    1.0,
                    &self.weight.value[g * cout_g * kg..],
                    (kg, 1),
                    &src[g * kg * p..],
                    (p, 1),
                    1.0,
                    &mut yi[g * cout_g * p..],
                    (p, 1),
                );
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_dx`.
    pub fn backward(&mut self, x: &Act, dy: &Act, need_dx: bool) -> Option<Act> {
        let (oh, ow) = (dy.h, dy.w);
        let p = oh * ow;
        let (cin_g, cout_g) = (self.in_c / self.groups, self.out_c / self.groups);
        let kg = cin_g * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; self.in_c * self.kernel * self.kernel * p] };
        let mut dcols = vec![0.0; self.in_c * self.kernel * self.kernel * p];
        let mut dx = need_dx.then(|| x.zeros_like());
        for i in 0..x.n {
            let dyi = dy.image(i);
            for (o, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dyi[o * p..(o + 1) * p].iter().sum::<f32>();
            }
            let xi = x.image(i);
            let src: &[f32] = if pointwise {
                xi
            } else {
                self.im2col(xi, x.h, x.w, &mut cols);
                &cols
            };
            for g in 0..self.groups {
                // dW_g += dY_g @ cols_g^T
                gemm(
                    cout_g,
                    p,
                    kg,
                    1.0,
                    &dyi[g * cout_g * p..],
                    (p, 1),
                    &src[g * kg * p..],
                    (1, p),
                    1.0,
                    &mut self.weight.grad[g * cout_g * kg..],
                    (kg, 1),
                );
                if need_dx {
                    // dcols_g = W_g^T @ dY_g
                    gemm(
                        kg,
                        cout_g,
                        p,
                        1.0,
                        &self.weight.value[g * cout_g * kg..],
                        (1, kg),
                        &dyi[g * cout_g * p..],
                        (p, 1),
                        0.0,
                        &mut dcols[g * kg * p..],
                        (p, 1),
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                let per = dx.per_image();
                let dxi = &mut dx.data[i * per..(i + 1) * per];
                if pointwise {
                    dxi.copy_from_slice(&dcols[..per]);
                } else {
                    self.col2im(&dcols, x.h, x.w, dxi);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    /// Multiply-adds per output image.
    pub fn flops(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.out_size(h, w);
        2 * oh * ow * self.out_c * (self.in_c / self.groups) * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// `[out_f, in_f]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_f: usize, out_f: usize, group: Group, rng: &mut R) -> Linear {
        let bound = 1.0 / (in_f as f32).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let w = (0..in_f * out_f).map(|_| u.sample(rng)).collect();
        Linear {
            in_f,
            out_f,
            weight: Param::new(format!("{name}.weight"), vec![out_f, in_f], w, group, false),
            bias: Param::new(format!("{name}.bias"), vec![out_f], vec![0.0; out_f], group, true),
        }
    }

    /// `x` is `[n, in_f]`; returns `[n, out_f]`.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y: Vec<f32> = (0..n).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(n, self.in_f, self.out_f, 1.0, x, (self.in_f, 1), &self.weight.value, (1, self.in_f), 1.0, &mut y, (self.out_f, 1));
        y
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32], n: usize) -> Vec<f32> {
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(&dy[i * self.out_f..(i + 1) * self.out_f]) {
                *g += d;
            }
        }
        gemm(self.out_f, n, self.in_f, 1.0, dy, (1, self.out_f), x, (self.in_f, 1), 1.0, &mut self.weight.grad, (self.in_f, 1));
        let mut dx = vec![0.0; n * self.in_f];
        gemm(n, self.out_f, self.in_f, 1.0, dy, (self.out_f, 1), &self.weight.value, (self.in_f, 1), 0.0, &mut dx, (self.in_f, 1));
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_inplace(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward(out: &Act, dy: &mut Act) {
    dy.data.iter_mut().zip(&out.data).for_each(|(d, &o)| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 3x3, stride 2, padding 1 max pooling; returns the argmax index per output.
pub fn maxpool_forward(x: &Act) -> (Act, Vec<u32>) {
    let (oh, ow) = ((x.h + 2 - 3) / 2 + 1, (x.w + 2 - 3) / 2 + 1);
    let mut y = Act::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f32::NEG_INFINITY, 0u32);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                            let idx = iy as usize * x.w + ix as usize;
                            if src[idx] > best.0 {
                                best = (src[idx], idx as u32);
                            }
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y.data[o] = best.0;
                arg[o] = best.1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(x: &Act, dy: &Act, arg: &[u32]) -> Act {
    let mut dx = x.zeros_like();
    let (hw, ohw) = (x.h * x.w, dy.h * dy.w);
    for plane in 0..x.n * x.c {
        for o in 0..ohw {
            let idx = plane * ohw + o;
            dx.data[plane * hw + arg[idx] as usize] += dy.data[idx];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Act) -> Act {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let mut y = Act::zeros(x.n, conv.out_c, oh, ow);
        let (cin_g, cout_g, k) = (conv.in_c / conv.groups, conv.out_c / conv.groups, conv.kernel);
        for n in 0..x.n {
            for o in 0..conv.out_c {
                let g = o / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..cin_g {
                            let c = g * cin_g + ci;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        let xv = x.data[((n * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                        let wv = conv.weight.value[((o * cin_g + ci) * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y.data[((n * conv.out_c + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_act(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Act {
        let mut a = Act::zeros(n, c, h, w);
        a.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        a
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(cin, cout, k, s, g) in &[(3, 4, 3, 1, 1), (4, 6, 3, 2, 2), (8, 8, 1, 1, 4), (6, 3, 1, 2, 1), (2, 2, 7, 2, 1)] {
            let mut conv = Conv2d::new("c", cin, cout, k, s, g, 1.0, Group::Backbone, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let x = random_act(&mut rng, 2, cin, 9, 7);
            let (a, b) = (conv.forward(&x), naive_conv(&conv, &x));
            assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }

    /// Loss = sum(y * r) for a fixed random r; compares analytic gradients
    /// against central differences in f64-ish tolerance.
    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, s, g) in &[(4, 6, 3, 2, 2), (4, 4, 1, 1, 1), (3, 2, 3, 1, 1)] {
            let mut conv = Conv2d::new("c", cin, cout, k, s, g, 1.0, Group::Backbone, &mut rng);
            let x = random_act(&mut rng, 2, cin, 6, 5);
            let y = conv.forward(&x);
            let r = random_act(&mut rng, y.n, y.c, y.h, y.w);
            let dx = conv.backward(&x, &r, true).unwrap();
            let loss = |conv: &Conv2d, x: &Act| -> f64 {
                conv.forward(x).data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let h = 1e-2;
            for idx in [0, 5, conv.weight.len() - 1] {
                let mut p = conv.clone();
                p.weight.value[idx] += h;
                let mut m = conv.clone();
                m.weight.value[idx] -= h;
                let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
                assert!((num - conv.weight.grad[idx] as f64).abs() < 1e-2, "{num} vs {}", conv.weight.grad[idx]);
            }
            for idx in [0, 7, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let mut xm = x.clone();
                xm.data[idx] -= h;
                let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
                assert!((num - dx.data[idx] as f64).abs() < 1e-2, "{num} vs {}", dx.data[idx]);
            }
            let bias_num: f64 = r.data.chunks(y.h * y.w).enumerate().filter(|(i, _)| i % cout == 0).flat_map(|(_, c)| c).map(|&v| v as f64).sum();
            assert!((bias_num - conv.bias.grad[0] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new("l", 5, 3, Group::Head, &mut rng);
        let x: Vec<f32> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dx = lin.backward(&x, &r, 2);
        let loss = |lin: &Linear, x: &[f32]| -> f64 { lin.forward(x, 2).iter().zip(&r).map(|(a, b)| (*a * *b) as f64).sum() };
        let h = 1e-2;
        for idx in 0..15 {
            let mut p = lin.clone();
            p.weight.value[idx] += h;
            let mut m = lin.clone();
            m.weight.value[idx] -= h;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h as f64);
            assert!((num - lin.weight.grad[idx] as f64).abs() < 1e-3);
        }
        for idx in 0..10 {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h as f64);
            assert!((num - dx[idx] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut x = Act::zeros(1, 1, 4, 4);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let (y, arg) = maxpool_forward(&x);
        assert_eq!((y.h, y.w), (2, 2));
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let mut dy = y.zeros_like();
        dy.data.fill(1.0);
        let dx = maxpool_backward(&x, &dy, &arg);
        assert_eq!(dx.data.iter().sum::<f32>(), 4.0);
        assert_eq!(dx.data[15], 1.0);
    }
}
