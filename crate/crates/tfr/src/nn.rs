//! Minimal CPU building blocks for the surrogate: single-sample CHW tensors,
//! 3x3 and 1x1 convolutions (im2col + GEMM), 2x2 average pooling, 2x2
//! stride-2 transposed convolution, SiLU and spatial transposes, each with a
//! hand-written backward pass.
//!
//! Parameters live in one flat buffer; layers only remember their offsets.

use num_traits::Float;

/// Scalar type the network can run in.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access.
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// One sample's activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    /// Stacks channels of `a` then `b`.
    pub fn concat(a: &Self, b: &Self) -> Self {
        assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `c_first` channels, then the rest.
    pub fn split(self, c_first: usize) -> (Self, Self) {
        let hw = self.hw();
        let mut data = self.data;
        let rest = data.split_off(c_first * hw);
        (
            Self {
                c: c_first,
                h: self.h,
                w: self.w,
                data,
            },
            Self {
                c: self.c - c_first,
                h: self.h,
                w: self.w,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Offsets of one layer's weight and bias in the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn get<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

/// Named tensor in the flat buffer, with its logical shape and fan-in.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    /// Inputs feeding each output unit; zero for biases.
    pub fan_in: usize,
    /// Variance gain of the random init (2 ahead of a rectifier-like unit).
    pub gain: f64,
}

/// Builder/registry for the flat parameter buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize, gain: f64) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.entries.push(ParamEntry {
            name,
            shape,
            slot,
            fan_in,
            gain,
        });
        slot
    }
}

/// 3x3 convolution, zero padding 1, stride 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv3x3 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9, 2.0);
        let bias = layout.add(format!("{name}.bias"), vec![cout], 0, 0.0);
        Self {
            cin,
            cout,
            weight,
            bias,
        }
    }

    fn im2col<T: Real>(x: &Tensor<T>) -> Vec<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut col = vec![T::zero(); x.c * 9 * hw];
        for ci in 0..x.c {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = &src[sy as usize * w..][..w];
                        let d = &mut row[y * w..][..w];
                        match kx {
                            0 => d[1..].copy_from_slice(&s[..w - 1]),
                            1 => d.copy_from_slice(s),
                            _ => d[..w - 1].copy_from_slice(&s[1..]),
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
        let hw = h * w;
        let mut out = Tensor::zeros(c, h, w);
        for ci in 0..c {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let d = &mut dst[sy as usize * w..][..w];
                        let s = &row[y * w..][..w];
                        let (dd, ss) = match kx {
                            0 => (&mut d[..w - 1], &s[1..]),
                            1 => (&mut d[..], &s[..]),
                            _ => (&mut d[1..], &s[..w - 1]),
                        };
                        for (a, &b) in dd.iter_mut().zip(ss) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        self.forward_col(p, x).0
    }

    /// Forward pass that also returns the im2col buffer for [`Conv3x3::backward_col`].
    pub fn forward_col<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.hw();
        let col = Self::im2col(x);
        let mut y = Tensor::zeros(self.cout, x.h, x.w);
        let b = self.bias.get(p);
        for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.fill(b[co]);
        }
        let k = self.cin * 9;
        T::gemm(
            self.cout,
            k,
            hw,
            T::one(),
            self.weight.get(p),
            k as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            &mut y.data,
            hw as isize,
            1,
        );
        (y, col)
    }

    /// Accumulates parameter gradients into `g`, returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        self.backward_col(p, g, &Self::im2col(x), dy, need_dx)
    }

    /// [`Conv3x3::backward`] from the im2col buffer of the forward input.
    pub fn backward_col<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        col: &[T],
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let hw = dy.hw();
        let k = self.cin * 9;
        debug_assert_eq!(col.len(), k * hw);
        T::gemm(
            self.cout,
            hw,
            k,
            T::one(),
            &dy.data,
            hw as isize,
            1,
            col,
            1,
            hw as isize,
            T::one(),
            self.weight.get_mut(g),
            k as isize,
            1,
        );
        let gb = self.bias.get_mut(g);
        for (co, chunk) in dy.data.chunks(hw).enumerate() {
            gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![T::zero(); k * hw];
        T::gemm(
            k,
            self.cout,
            hw,
            T::one(),
            self.weight.get(p),
            1,
            k as isize,
            &dy.data,
            hw as isize,
            1,
            T::zero(),
            &mut dcol,
            hw as isize,
            1,
        );
        Some(Self::col2im(&dcol, self.cin, dy.h, dy.w))
    }
}

/// Pointwise (1x1) convolution.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv1x1 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(format!("{name}.weight"), vec![cout, cin, 1, 1], cin, 1.0);
        let bias = layout.add(format!("{name}.bias"), vec![cout], 0, 0.0);
        Self {
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        let hw = x.hw();
        let mut y = Tensor::zeros(self.cout, x.h, x.w);
        let b = self.bias.get(p);
        for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.fill(b[co]);
        }
        T::gemm(
            self.cout,
            self.cin,
            hw,
            T::one(),
            self.weight.get(p),
            self.cin as isize,
            1,
            &x.data,
            hw as isize,
            1,
            T::one(),
            &mut y.data,
            hw as isize,
            1,
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let hw = x.hw();
        T::gemm(
            self.cout,
            hw,
            self.cin,
            T::one(),
            &dy.data,
            hw as isize,
            1,
            &x.data,
            1,
            hw as isize,
            T::one(),
            self.weight.get_mut(g),
            self.cin as isize,
            1,
        );
        let gb = self.bias.get_mut(g);
        for (co, chunk) in dy.data.chunks(hw).enumerate() {
            gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
        }
        let mut dx = Tensor::zeros(self.cin, x.h, x.w);
        T::gemm(
            self.cin,
            self.cout,
            hw,
            T::one(),
            self.weight.get(p),
            1,
            self.cin as isize,
            &dy.data,
            hw as isize,
            1,
            T::zero(),
            &mut dx.data,
            hw as isize,
            1,
        );
        dx
    }
}

/// 2x2 transposed convolution with stride 2 (doubles the spatial size).
#[derive(Debug, Clone)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    /// Stored as `[cout * 4][cin]`.
    pub weight: Slot,
    pub bias: Slot,
}

impl UpConv {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(format!("{name}.weight"), vec![cout, 2, 2, cin], cin, 1.0);
        let bias = layout.add(format!("{name}.bias"), vec![cout], 0, 0.0);
        Self {
            cin,
            cout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut z = vec![T::zero(); self.cout * 4 * hw];
        T::gemm(
            self.cout * 4,
            self.cin,
            hw,
            T::one(),
            self.weight.get(p),
            self.cin as isize,
            1,
            &x.data,
            hw as isize,
            1,
            T::zero(),
            &mut z,
            hw as isize,
            1,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = Tensor::zeros(self.cout, oh, ow);
        let b = self.bias.get(p);
        for co in 0..self.cout {
            let out = &mut y.data[co * oh * ow..(co + 1) * oh * ow];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &z[((co * 4) + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let orow = &mut out[(2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            orow[2 * j + bb] = src[i * w + j] + b[co];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dz = vec![T::zero(); self.cout * 4 * hw];
        let gb = self.bias.get_mut(g);
        for co in 0..self.cout {
            let dout = &dy.data[co * oh * ow..(co + 1) * oh * ow];
            gb[co] = gb[co] + dout.iter().copied().sum::<T>();
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dz[((co * 4) + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let orow = &dout[(2 * i + a) * ow..][..ow];
                        for j in 0..w {
                            dst[i * w + j] = orow[2 * j + bb];
                        }
                    }
                }
            }
        }
        T::gemm(
            self.cout * 4,
            hw,
            self.cin,
            T::one(),
            &dz,
            hw as isize,
            1,
            &x.data,
            1,
            hw as isize,
            T::one(),
            self.weight.get_mut(g),
            self.cin as isize,
            1,
        );
        let mut dx = Tensor::zeros(self.cin, h, w);
        T::gemm(
            self.cin,
            self.cout * 4,
            hw,
            T::one(),
            self.weight.get(p),
            1,
            self.cin as isize,
            &dz,
            hw as isize,
            1,
            T::zero(),
            &mut dx.data,
            hw as isize,
            1,
        );
        dx
    }
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * oh * ow..(c + 1) * oh * ow];
        for i in 0..oh {
            let r0 = &src[2 * i * x.w..][..x.w];
            let r1 = &src[(2 * i + 1) * x.w..][..x.w];
            for j in 0..ow {
                dst[i * ow + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * dy.w + j / 2] * quarter;
            }
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// x * sigmoid(x), elementwise.
pub fn silu<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: z.c,
        h: z.h,
        w: z.w,
        data: z.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// Gradient through SiLU given the pre-activation `z`.
pub fn silu_backward<T: Real>(z: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: z.c,
        h: z.h,
        w: z.w,
        data: z
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| {
                let s = sigmoid(v);
                d * s * (T::one() + v * (T::one() - s))
            })
            .collect(),
    }
}

/// Spatial transpose about the main diagonal: `out[c][i][j] = in[c][j][i]`.
pub fn transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.c, x.w, x.h);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        for i in 0..x.w {
            for j in 0..x.h {
                dst[i * x.h + j] = src[j * x.w + i];
            }
        }
    }
    y
}

/// Spatial transpose about the anti-diagonal:
/// `out[c][i][j] = in[c][w-1-j][h-1-i]`.
pub fn anti_transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h, x.w);
    let mut y = Tensor::zeros(x.c, w, h);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * h * w..(c + 1) * h * w];
        for i in 0..w {
            for j in 0..h {
                dst[i * h + j] = src[(h - 1 - j) * w + (w - 1 - i)];
            }
        }
    }
    y
}
