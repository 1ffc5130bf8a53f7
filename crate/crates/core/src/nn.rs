//! Minimal layers with explicit backward passes, on `[N, C, H, W]` tensors.
//!
//! Convolutions go through im2col + GEMM in row chunks so the column buffer
//! stays small even for full-resolution spectrograms.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMut2, ArrayViewMut3, ArrayViewMutD, Axis, Zip};
use rand::Rng;

/// Target number of output positions per im2col chunk.
const CHUNK_POSITIONS: usize = 8192;

/// Named traversal over every trainable tensor, in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name));
        names
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, mut t| t.fill(value));
    }

    fn squared_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, t| acc += t.iter().map(|v| v * v).sum::<f64>());
        acc
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, mut t| t.mapv_inplace(|v| v * factor));
    }

    /// `self += other`, tensor by tensor (same structure required).
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let mut flat = Vec::new();
        other.visit("", &mut |_, t| flat.push(t.to_owned()));
        let mut i = 0;
        self.visit_mut("", &mut |_, mut t| {
            t += &flat[i];
            i += 1;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geom {
    /// Size-preserving (stride 1) or halving (stride 2) geometry for an odd kernel.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// 2-D convolution. Weight layout `[out, in, k, k]`; when `transposed` the
/// layer is the adjoint of a convolution and the weight is `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub geom: Geom,
    pub transposed: bool,
}

impl Params for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join(prefix, "weight"), self.weight.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

fn uniform_array4(rng: &mut impl Rng, shape: (usize, usize, usize, usize), bound: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

impl Conv2d {
    /// He-uniform initialisation (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, geom: Geom) -> Self {
        let fan_in = c_in * geom.kernel * geom.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform_array4(rng, (c_out, c_in, geom.kernel, geom.kernel), bound),
            bias: Array1::zeros(c_out),
            geom,
            transposed: false,
        }
    }

    pub fn new_transposed(rng: &mut impl Rng, c_in: usize, c_out: usize, geom: Geom) -> Self {
        // each output pixel sees about c_in * k^2 / stride^2 inputs
        let fan_in = (c_in * geom.kernel * geom.kernel / (geom.stride * geom.stride)).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform_array4(rng, (c_in, c_out, geom.kernel, geom.kernel), bound),
            bias: Array1::zeros(c_out),
            geom,
            transposed: true,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            geom: self.geom,
            transposed: self.transposed,
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.transposed {
            self.weight.dim().1
        } else {
            self.weight.dim().0
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.transposed {
            self.weight.dim().0
        } else {
            self.weight.dim().1
        }
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transposed {
            (h * self.geom.stride, w * self.geom.stride)
        } else {
            (self.geom.out_len(h), self.geom.out_len(w))
        }
    }

    fn weight_2d(&self) -> ArrayView2<'_, f64> {
        let (a, b, k1, k2) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((a, b * k1 * k2))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let c_out = self.out_channels();
        let mut y = Array4::zeros((n, c_out, ho, wo));
        let w2 = self.weight_2d();
        for (xn, mut yn) in x.outer_iter().zip(y.outer_iter_mut()) {
            if self.transposed {
                tconv_sample(xn, w2, self.geom, yn.view_mut());
            } else {
                conv_sample(xn, w2, self.geom, yn.view_mut());
            }
            for (mut plane, &b) in yn.outer_iter_mut().zip(self.bias.iter()) {
                plane += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_dx`.
    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, grad: &mut Conv2d, need_dx: bool) -> Option<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        let mut dx = need_dx.then(|| Array4::zeros((n, c, h, w)));
        let w2 = self.weight_2d();
        let (a, b, k1, k2) = grad.weight.dim();
        let mut dw2 = grad
            .weight
            .view_mut()
            .into_shape_with_order((a, b * k1 * k2))
            .expect("contiguous weight");
        for i in 0..n {
            let xn = x.index_axis(Axis(0), i);
            let dyn_ = dy.index_axis(Axis(0), i);
            let dxn = dx.as_mut().map(|d| d.index_axis_mut(Axis(0), i));
            if self.transposed {
                tconv_backward_sample(xn, dyn_, w2, self.geom, &mut dw2, dxn);
            } else {
                conv_backward_sample(xn, dyn_, w2, self.geom, &mut dw2, dxn);
            }
        }
        let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        grad.bias += &db;
        dx
    }
}

fn rows_per_chunk(width: usize) -> usize {
    (CHUNK_POSITIONS / width.max(1)).max(1)
}

/// Fills `cols[(c, ki, kj), (r - r0) * wo + wi]` with the input patch value
/// seen by output position `(r, wi)`.
fn im2col(img: ArrayView3<'_, f64>, g: Geom, r0: usize, r1: usize, wo: usize, cols: &mut Array2<f64>) {
    let (c, h, w) = img.dim();
    let k = g.kernel;
    let p = (r1 - r0) * wo;
    let img = img.as_standard_layout();
    let src = img.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * p;
                for r in r0..r1 {
                    let ih = (r * g.stride + ki) as isize - g.pad as isize;
                    let base = row + (r - r0) * wo;
                    let out = &mut dst[base..base + wo];
                    if ih < 0 || ih >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let plane = &src[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (wi, o) in out.iter_mut().enumerate() {
                        let iw = (wi * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw >= 0 && (iw as usize) < w { plane[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
fn col2im(cols: &Array2<f64>, g: Geom, r0: usize, r1: usize, wo: usize, img: &mut ArrayViewMut3<'_, f64>) {
    let (c, h, w) = img.dim();
    let k = g.kernel;
    let p = (r1 - r0) * wo;
    let src = cols.as_slice().expect("standard layout");
    let dst = img.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * p;
                for r in r0..r1 {
                    let ih = (r * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = row + (r - r0) * wo;
                    let plane = &mut dst[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (wi, &v) in src[base..base + wo].iter().enumerate() {
                        let iw = (wi * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < w {
                            plane[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn as_2d_mut<'a>(t: ArrayViewMut3<'a, f64>) -> ArrayViewMut2<'a, f64> {
    let (c, h, w) = t.dim();
    t.into_shape_with_order((c, h * w)).expect("contiguous sample")
}

fn as_2d<'a>(t: ArrayView3<'a, f64>) -> ArrayView2<'a, f64> {
    let (c, h, w) = t.dim();
    t.into_shape_with_order((c, h * w)).expect("contiguous sample")
}

fn conv_sample(x: ArrayView3<'_, f64>, w2: ArrayView2<'_, f64>, g: Geom, y: ArrayViewMut3<'_, f64>) {
    let (_, ho, wo) = y.dim();
    let kk = w2.ncols();
    let mut y2 = as_2d_mut(y);
    let step = rows_per_chunk(wo);
    let mut cols = Array2::zeros((kk, step * wo));
    for r0 in (0..ho).step_by(step) {
        let r1 = (r0 + step).min(ho);
        let p = (r1 - r0) * wo;
        if cols.ncols() != p {
            cols = Array2::zeros((kk, p));
        }
        im2col(x, g, r0, r1, wo, &mut cols);
        let mut out = y2.slice_mut(s![.., r0 * wo..r1 * wo]);
        general_mat_mul(1.0, &w2, &cols, 0.0, &mut out);
    }
}

fn conv_backward_sample(
    x: ArrayView3<'_, f64>,
    dy: ArrayView3<'_, f64>,
    w2: ArrayView2<'_, f64>,
    g: Geom,
    dw2: &mut ArrayViewMut2<'_, f64>,
    mut dx: Option<ArrayViewMut3<'_, f64>>,
) {
    let (_, ho, wo) = dy.dim();
    let kk = w2.ncols();
    let dy2 = as_2d(dy);
    let step = rows_per_chunk(wo);
    for r0 in (0..ho).step_by(step) {
        let r1 = (r0 + step).min(ho);
        let p = (r1 - r0) * wo;
        let mut cols = Array2::zeros((kk, p));
        im2col(x, g, r0, r1, wo, &mut cols);
        let dyc = dy2.slice(s![.., r0 * wo..r1 * wo]);
        general_mat_mul(1.0, &dyc, &cols.t(), 1.0, dw2);
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(1.0, &w2.t(), &dyc, 0.0, &mut cols);
            col2im(&cols, g, r0, r1, wo, dx);
        }
    }
}

fn tconv_sample(x: ArrayView3<'_, f64>, w2: ArrayView2<'_, f64>, g: Geom, mut y: ArrayViewMut3<'_, f64>) {
    let (_, h, w) = x.dim();
    let kk = w2.ncols();
    let x2 = as_2d(x);
    let step = rows_per_chunk(w);
    for r0 in (0..h).step_by(step) {
        let r1 = (r0 + step).min(h);
        let p = (r1 - r0) * w;
        let mut cols = Array2::zeros((kk, p));
        let xc = x2.slice(s![.., r0 * w..r1 * w]);
        general_mat_mul(1.0, &w2.t(), &xc, 0.0, &mut cols);
        col2im(&cols, g, r0, r1, w, &mut y);
    }
}

fn tconv_backward_sample(
    x: ArrayView3<'_, f64>,
    dy: ArrayView3<'_, f64>,
    w2: ArrayView2<'_, f64>,
    g: Geom,
    dw2: &mut ArrayViewMut2<'_, f64>,
    dx: Option<ArrayViewMut3<'_, f64>>,
) {
    let (_, h, w) = x.dim();
    let kk = w2.ncols();
    let x2 = as_2d(x);
    let mut dx2 = dx.map(as_2d_mut);
    let step = rows_per_chunk(w);
    for r0 in (0..h).step_by(step) {
        let r1 = (r0 + step).min(h);
        let p = (r1 - r0) * w;
        let mut cols = Array2::zeros((kk, p));
        im2col(dy, g, r0, r1, w, &mut cols);
        let xc = x2.slice(s![.., r0 * w..r1 * w]);
        general_mat_mul(1.0, &xc, &cols.t(), 1.0, dw2);
        if let Some(dx2) = dx2.as_mut() {
            let mut out = dx2.slice_mut(s![.., r0 * w..r1 * w]);
            general_mat_mul(1.0, &w2, &cols, 0.0, &mut out);
        }
    }
}

pub fn relu(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `dy` by `y > 0` where `y` is the post-activation output.
pub fn relu_backward(y: &Array4<f64>, dy: &mut Array4<f64>) {
    Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Initial excitation bias: gates start near `sigmoid(3) ~ 0.95`, so a deep
/// stack of blocks does not attenuate the signal by `0.5^depth` at init.
pub const SE_GATE_BIAS_INIT: f64 = 3.0;

/// Squeeze-and-excitation: channel gates from globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    /// `[hidden, channels]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[channels, hidden]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    pub gates: Array2<f64>,
}

impl Params for SqueezeExcite {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        f(join(prefix, "w1"), self.w1.view().into_dyn());
        f(join(prefix, "b1"), self.b1.view().into_dyn());
        f(join(prefix, "w2"), self.w2.view().into_dyn());
        f(join(prefix, "b2"), self.b2.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        f(join(prefix, "w1"), self.w1.view_mut().into_dyn());
        f(join(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(join(prefix, "w2"), self.w2.view_mut().into_dyn());
        f(join(prefix, "b2"), self.b2.view_mut().into_dyn());
    }
}

impl SqueezeExcite {
    pub fn new(rng: &mut impl Rng, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        let b1 = (6.0 / channels as f64).sqrt();
        let b2 = (6.0 / hidden as f64).sqrt();
        Self {
            w1: Array2::from_shape_simple_fn((hidden, channels), || rng.gen_range(-b1..b1)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((channels, hidden), || rng.gen_range(-b2..b2)),
            b2: Array1::from_elem(channels, SE_GATE_BIAS_INIT),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, SeCache) {
        let pooled = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        let mut hidden = pooled.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let gates = (hidden.dot(&self.w2.t()) + &self.b2).mapv(sigmoid);
        let mut y = x.clone();
        for (mut yn, gn) in y.outer_iter_mut().zip(gates.outer_iter()) {
            for (mut plane, &g) in yn.outer_iter_mut().zip(gn.iter()) {
                plane *= g;
            }
        }
        (y, SeCache { pooled, hidden, gates })
    }

    pub fn backward(&self, x: &Array4<f64>, cache: &SeCache, dy: &Array4<f64>, grad: &mut SqueezeExcite) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f64;
        let mut dx = dy.clone();
        let mut dgate = Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let g = cache.gates[[i, ch]];
                let xs = x.slice(s![i, ch, .., ..]);
                let ds = dy.slice(s![i, ch, .., ..]);
                dgate[[i, ch]] = Zip::from(&xs).and(&ds).fold(0.0, |acc, &a, &b| acc + a * b);
                dx.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v * g);
            }
        }
        let dpre2 = &dgate * &cache.gates.mapv(|s| s * (1.0 - s));
        grad.w2 += &dpre2.t().dot(&cache.hidden);
        grad.b2 += &dpre2.sum_axis(Axis(0));
        let mut dhidden = dpre2.dot(&self.w2);
        Zip::from(&mut dhidden).and(&cache.hidden).for_each(|d, &hv| {
            if hv <= 0.0 {
                *d = 0.0;
            }
        });
        grad.w1 += &dhidden.t().dot(&cache.pooled);
        grad.b1 += &dhidden.sum_axis(Axis(0));
        let dpooled = dhidden.dot(&self.w1) / area;
        for i in 0..n {
            for ch in 0..c {
                let d = dpooled[[i, ch]];
                dx.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v + d);
            }
        }
        dx
    }
}

/// Non-overlapping max pooling with window `floor(H/oh) x floor(W/ow)`;
/// trailing rows/columns that do not fill a window are dropped.
pub fn max_pool_to(x: &Array4<f64>, oh: usize, ow: usize) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (ph, pw) = (h / oh, w / ow);
    assert!(ph >= 1 && pw >= 1, "feature map {h}x{w} smaller than pool target {oh}x{ow}");
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            for a in 0..oh {
                for b in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for u in a * ph..(a + 1) * ph {
                        for v in b * pw..(b + 1) * pw {
                            let val = x[[i, ch, u, v]];
                            if val > best {
                                best = val;
                                at = u * w + v;
                            }
                        }
                    }
                    y[[i, ch, a, b]] = best;
                    arg.push(at);
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(input_dim: (usize, usize, usize, usize), arg: &[usize], dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, _, w) = input_dim;
    let mut dx = Array4::zeros(input_dim);
    let (_, _, oh, ow) = dy.dim();
    let mut k = 0;
    for i in 0..n {
        for ch in 0..c {
            for a in 0..oh {
                for b in 0..ow {
                    let at = arg[k];
                    dx[[i, ch, at / w, at % w]] += dy[[i, ch, a, b]];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Channel concatenation of `[N, Ca, H, W]` and `[N, Cb, H, W]`.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits `[N, C, H, W]` at channel `at`.
pub fn split_channels(x: &Array4<f64>, at: usize) -> (Array4<f64>, Array4<f64>) {
    (x.slice(s![.., ..at, .., ..]).to_owned(), x.slice(s![.., at.., .., ..]).to_owned())
}
