//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Feature maps are stored channel-major across the batch, `[c][b][y][x]`,
//! so every convolution is a single gemm over `b·h·w` columns.

mod prox;

pub use prox::{ProxCache, ProxNet, ProxNetSpec};

use rand::Rng;

use crate::scalar::Real;

/// Dense feature map, layout `[channels][batch][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Feature {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    /// Columns per channel.
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.batch == other.batch && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }
}

/// Kernel geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 3x3, stride 1, zero padding 1.
    Same3,
    /// 2x2, stride 2.
    Down2,
    /// Transposed 2x2, stride 2.
    Up2,
}

/// A convolution whose weights live at `offset` in a flat parameter vector:
/// `weight` as a row-major `rows x cols` matrix followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
}

/// What a convolution keeps from its forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col matrix for `Same3`/`Down2`, the raw input for `Up2`.
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
}

impl Conv {
    pub fn new(kind: ConvKind, cin: usize, cout: usize, offset: usize) -> Self {
        Conv { kind, cin, cout, offset }
    }

    fn taps(&self) -> usize {
        match self.kind {
            ConvKind::Same3 => 9,
            ConvKind::Down2 | ConvKind::Up2 => 4,
        }
    }

    /// Shape of the weight matrix.
    fn weight_dims(&self) -> (usize, usize) {
        match self.kind {
            ConvKind::Same3 | ConvKind::Down2 => (self.cout, self.cin * self.taps()),
            ConvKind::Up2 => (self.cout * 4, self.cin),
        }
    }

    pub fn weight_count(&self) -> usize {
        let (r, c) = self.weight_dims();
        r * c
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.cout
    }

    /// Multiply-accumulates for one `height x width` input map.
    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let taps = self.taps() as u64;
        let (cin, cout) = (self.cin as u64, self.cout as u64);
        let hw = (height * width) as u64;
        match self.kind {
            ConvKind::Same3 => cin * cout * taps * hw,
            ConvKind::Down2 => cin * cout * taps * hw / 4,
            ConvKind::Up2 => cin * cout * taps * hw,
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Same3 => (height, width),
            ConvKind::Down2 => (height / 2, width / 2),
            ConvKind::Up2 => (height * 2, width * 2),
        }
    }

    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R) {
        let fan_in = (self.cin * self.taps()) as f64;
        let bound = 1.0 / fan_in.sqrt();
        for p in &mut params[self.offset..self.offset + self.param_count()] {
            *p = T::lit(rng.random_range(-bound..bound));
        }
    }

    pub fn zero<T: Real>(&self, params: &mut [T]) {
        params[self.offset..self.offset + self.param_count()].fill(T::zero());
    }

    fn split<'a, T>(&self, params: &'a [T]) -> (&'a [T], &'a [T]) {
        let w = self.weight_count();
        let all = &params[self.offset..self.offset + w + self.cout];
        all.split_at(w)
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Feature<T>) -> (Feature<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let (w, b) = self.split(params);
        let (oh, ow) = self.output_dims(x.height, x.width);
        let mut y = Feature::zeros(self.cout, x.batch, oh, ow);
        let in_shape = (x.batch, x.height, x.width);
        match self.kind {
            ConvKind::Same3 | ConvKind::Down2 => {
                let cols = if self.kind == ConvKind::Same3 { im2col3(x) } else { im2col_down(x) };
                let k = self.cin * self.taps();
                let p = y.plane();
                T::gemm(self.cout, k, p, T::one(), w, k as isize, 1, &cols, p as isize, 1, T::zero(), &mut y.data, p as isize, 1);
                add_bias(&mut y, b);
                (y, ConvCache { cols, in_shape })
            }
            ConvKind::Up2 => {
                let p = x.plane();
                let mut z = vec![T::zero(); self.cout * 4 * p];
                T::gemm(self.cout * 4, self.cin, p, T::one(), w, self.cin as isize, 1, &x.data, p as isize, 1, T::zero(), &mut z, p as isize, 1);
                scatter_up(&z, &mut y, x.height, x.width);
                add_bias(&mut y, b);
                (y, ConvCache { cols: x.data.clone(), in_shape })
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward<T: Real>(&self, params: &[T], cache: &ConvCache<T>, dy: &Feature<T>, grad: &mut [T]) -> Feature<T> {
        let (w, _) = self.split(params);
        let wc = self.weight_count();
        let (gw, gb) = grad[self.offset..self.offset + wc + self.cout].split_at_mut(wc);
        let py = dy.plane();
        for (c, g) in gb.iter_mut().enumerate() {
            *g += dy.data[c * py..(c + 1) * py].iter().copied().sum::<T>();
        }
        let (batch, h, wd) = cache.in_shape;
        let mut dx = Feature::zeros(self.cin, batch, h, wd);
        match self.kind {
            ConvKind::Same3 | ConvKind::Down2 => {
                let k = self.cin * self.taps();
                T::gemm(self.cout, py, k, T::one(), &dy.data, py as isize, 1, &cache.cols, 1, py as isize, T::one(), gw, k as isize, 1);
                let mut dcols = vec![T::zero(); k * py];
                T::gemm(k, self.cout, py, T::one(), w, 1, k as isize, &dy.data, py as isize, 1, T::zero(), &mut dcols, py as isize, 1);
                if self.kind == ConvKind::Same3 {
                    col2im3(&dcols, &mut dx);
                } else {
                    col2im_down(&dcols, &mut dx);
                }
            }
            ConvKind::Up2 => {
                let px = dx.plane();
                let dz = gather_up(dy, h, wd);
                let rows = self.cout * 4;
                T::gemm(rows, px, self.cin, T::one(), &dz, px as isize, 1, &cache.cols, 1, px as isize, T::one(), gw, self.cin as isize, 1);
                T::gemm(self.cin, rows, px, T::one(), w, 1, self.cin as isize, &dz, px as isize, 1, T::zero(), &mut dx.data, px as isize, 1);
            }
        }
        dx
    }
}

fn add_bias<T: Real>(y: &mut Feature<T>, b: &[T]) {
    let p = y.plane();
    for (c, &bc) in b.iter().enumerate() {
        y.data[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
    }
}

fn im2col3<T: Real>(x: &Feature<T>) -> Vec<T> {
    let (h, w, p) = (x.height, x.width, x.plane());
    let mut cols = vec![T::zero(); x.channels * 9 * p];
    for c in 0..x.channels {
        let src = &x.data[c * p..(c + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * p..][..p];
                for b in 0..x.batch {
                    for oy in 0..h {
                        let Some(sy) = (oy + ky).checked_sub(1).filter(|&s| s < h) else { continue };
                        let dst = &mut row[(b * h + oy) * w..][..w];
                        let srow = &src[(b * h + sy) * w..][..w];
                        // output column ox reads input column ox + kx - 1
                        let (lo, hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for ox in lo..hi {
                            dst[ox] = srow[ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Real>(cols: &[T], dx: &mut Feature<T>) {
    let (h, w, p) = (dx.height, dx.width, dx.plane());
    for c in 0..dx.channels {
        let dst = &mut dx.data[c * p..(c + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * p..][..p];
                for b in 0..dx.batch {
                    for oy in 0..h {
                        let Some(sy) = (oy + ky).checked_sub(1).filter(|&s| s < h) else { continue };
                        let src = &row[(b * h + oy) * w..][..w];
                        let drow = &mut dst[(b * h + sy) * w..][..w];
                        let (lo, hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for ox in lo..hi {
                            drow[ox + kx - 1] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_down<T: Real>(x: &Feature<T>) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (h / 2, w / 2);
    let (p, op) = (x.plane(), x.batch * oh * ow);
    let mut cols = vec![T::zero(); x.channels * 4 * op];
    for c in 0..x.channels {
        let src = &x.data[c * p..(c + 1) * p];
        for ky in 0..2 {
            for kx in 0..2 {
                let row = &mut cols[(c * 4 + ky * 2 + kx) * op..][..op];
                for b in 0..x.batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            row[(b * oh + oy) * ow + ox] = src[(b * h + 2 * oy + ky) * w + 2 * ox + kx];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_down<T: Real>(cols: &[T], dx: &mut Feature<T>) {
    let (h, w, p) = (dx.height, dx.width, dx.plane());
    let (oh, ow) = (h / 2, w / 2);
    let op = dx.batch * oh * ow;
    for c in 0..dx.channels {
        let dst = &mut dx.data[c * p..(c + 1) * p];
        for ky in 0..2 {
            for kx in 0..2 {
                let row = &cols[(c * 4 + ky * 2 + kx) * op..][..op];
                for b in 0..dx.batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[(b * h + 2 * oy + ky) * w + 2 * ox + kx] += row[(b * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `z` rows are `(co, a, b)`; columns index the low-resolution input pixels.
fn scatter_up<T: Real>(z: &[T], y: &mut Feature<T>, h: usize, w: usize) {
    let (oh, ow, p, op) = (2 * h, 2 * w, y.batch * h * w, y.plane());
    for co in 0..y.channels {
        let dst = &mut y.data[co * op..(co + 1) * op];
        for a in 0..2 {
            for bb in 0..2 {
                let row = &z[(co * 4 + a * 2 + bb) * p..][..p];
                for n in 0..y.batch {
                    for i in 0..h {
                        for j in 0..w {
                            dst[(n * oh + 2 * i + a) * ow + 2 * j + bb] = row[(n * h + i) * w + j];
                        }
                    }
                }
            }
        }
    }
}

fn gather_up<T: Real>(dy: &Feature<T>, h: usize, w: usize) -> Vec<T> {
    let (oh, ow, p, op) = (2 * h, 2 * w, dy.batch * h * w, dy.plane());
    let mut z = vec![T::zero(); dy.channels * 4 * p];
    for co in 0..dy.channels {
        let src = &dy.data[co * op..(co + 1) * op];
        for a in 0..2 {
            for bb in 0..2 {
                let row = &mut z[(co * 4 + a * 2 + bb) * p..][..p];
                for n in 0..dy.batch {
                    for i in 0..h {
                        for j in 0..w {
                            row[(n * h + i) * w + j] = src[(n * oh + 2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
            }
        }
    }
    z
}

pub fn relu<T: Real>(x: &mut Feature<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes `dy` wherever the forward output `y` was clipped.
pub fn relu_backward<T: Real>(y: &Feature<T>, dy: &mut Feature<T>) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &v)| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
}
