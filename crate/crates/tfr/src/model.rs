//! The quantile surrogate: U-net-1 maps the (sensor image, quantile image)
//! pair to a feature map, the feature map is transposed across a diagonal,
//! and U-net-2 maps it to one output channel that decodes to kelvin.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tfr_core::images::Normalization;
use tfr_core::rng::{stream_rng, Stream};
use tfr_core::{FieldGrid, Mask, MpImage, QuantileImage, QuantileSurrogate};

use crate::error::{Error, Result};
use crate::nn::{
    anti_transpose, avg_pool2, avg_pool2_backward, silu, silu_backward, transpose, Conv1x1,
    Conv3x3, ParamLayout, Real, Tensor, UpConv,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// `out[c][i][j] = in[c][j][i]`.
    #[default]
    MainDiagonal,
    /// `out[c][i][j] = in[c][w-1-j][h-1-i]`.
    AntiDiagonal,
    /// No flip between the two sub-networks.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_in")]
    pub in_channels: usize,
    #[serde(default = "ModelConfig::default_out")]
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub flip_axis: FlipAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 1,
            base_width: 16,
            depth: 3,
            flip_axis: FlipAxis::MainDiagonal,
        }
    }
}

impl ModelConfig {
    fn default_in() -> usize {
        2
    }

    fn default_out() -> usize {
        1
    }

    /// Checks the configuration against a grid of `rows x cols`.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.in_channels != 2 {
            return Err(Error::config(
                "model.in_channels",
                format!("must be 2 (sensor image + quantile image), got {}", self.in_channels),
            ));
        }
        if self.out_channels != 1 {
            return Err(Error::config(
                "model.out_channels",
                format!("must be 1, got {}", self.out_channels),
            ));
        }
        if self.base_width == 0 {
            return Err(Error::config("model.base_width", "must be at least 1"));
        }
        if self.depth > 8 {
            return Err(Error::config("model.depth", "at most 8 levels are supported"));
        }
        let step = 1usize << self.depth;
        if rows == 0 || cols == 0 || rows % step != 0 || cols % step != 0 {
            return Err(Error::config(
                "model.depth",
                format!("grid {rows}x{cols} is not divisible by 2^{} = {step}", self.depth),
            ));
        }
        if self.flip_axis != FlipAxis::None && rows != cols {
            return Err(Error::config(
                "model.flip_axis",
                format!("a diagonal flip needs a square grid, got {rows}x{cols}"),
            ));
        }
        Ok(())
    }
}

/// Two 3x3 conv + SiLU layers.
#[derive(Debug, Clone)]
struct Block {
    c1: Conv3x3,
    c2: Conv3x3,
}

struct BlockTape<T> {
    col1: Vec<T>,
    z1: Tensor<T>,
    col2: Vec<T>,
    z2: Tensor<T>,
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            c1: Conv3x3::new(layout, &format!("{name}.conv1"), cin, cout),
            c2: Conv3x3::new(layout, &format!("{name}.conv2"), cout, cout),
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, BlockTape<T>) {
        let (z1, col1) = self.c1.forward_col(p, x);
        let (z2, col2) = self.c2.forward_col(p, &silu(&z1));
        let a2 = silu(&z2);
        (a2, BlockTape { col1, z1, col2, z2 })
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        t: &BlockTape<T>,
        da2: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dz2 = silu_backward(&t.z2, da2);
        let da1 = self.c2.backward_col(p, g, &t.col2, &dz2, true).expect("dx requested");
        let dz1 = silu_backward(&t.z1, &da1);
        self.c1.backward_col(p, g, &t.col1, &dz1, need_dx)
    }
}

/// Encoder-decoder with skip connections; level `l` has `base * 2^l` channels.
#[derive(Debug, Clone)]
struct UNet {
    enc: Vec<Block>,
    up: Vec<UpConv>,
    dec: Vec<Block>,
    head: Conv1x1,
    widths: Vec<usize>,
}

struct UNetTape<T> {
    enc: Vec<BlockTape<T>>,
    up_in: Vec<Tensor<T>>,
    dec: Vec<BlockTape<T>>,
    head_in: Tensor<T>,
}

impl UNet {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, base: usize, depth: usize, cout: usize) -> Self {
        let widths: Vec<usize> = (0..=depth).map(|l| base << l).collect();
        let enc = (0..=depth)
            .map(|l| {
                let from = if l == 0 { cin } else { widths[l - 1] };
                Block::new(layout, &format!("{name}.enc{l}"), from, widths[l])
            })
            .collect();
        let mut up = Vec::with_capacity(depth);
        let mut dec = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            up.push(UpConv::new(layout, &format!("{name}.up{l}"), widths[l + 1], widths[l]));
            dec.push(Block::new(layout, &format!("{name}.dec{l}"), 2 * widths[l], widths[l]));
        }
        // stored deepest first; index by level through `rev`
        up.reverse();
        dec.reverse();
        let head = Conv1x1::new(layout, &format!("{name}.head"), base, cout);
        Self {
            enc,
            up,
            dec,
            head,
            widths,
        }
    }

    fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    fn forward<T: Real>(&self, p: &[T], x: Tensor<T>) -> (Tensor<T>, UNetTape<T>) {
        let depth = self.depth();
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth + 1);
        let mut enc = Vec::with_capacity(depth + 1);
        let mut h = x;
        for l in 0..=depth {
            if l > 0 {
                h = avg_pool2(&skips[l - 1]);
            }
            let (a, t) = self.enc[l].forward(p, &h);
            enc.push(t);
            skips.push(a.clone());
            h = a;
        }
        let mut up_in: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        let mut dec: Vec<Option<BlockTape<T>>> = (0..depth).map(|_| None).collect();
        for l in (0..depth).rev() {
            let u = self.up[l].forward(p, &h);
            up_in[l] = Some(h);
            let cat = Tensor::concat(&skips[l], &u);
            let (a, t) = self.dec[l].forward(p, &cat);
            dec[l] = Some(t);
            h = a;
        }
        let y = self.head.forward(p, &h);
        (
            y,
            UNetTape {
                enc,
                up_in: up_in.into_iter().map(Option::unwrap).collect(),
                dec: dec.into_iter().map(Option::unwrap).collect(),
                head_in: h,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        t: &UNetTape<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let depth = self.depth();
        let mut dh = self.head.backward(p, g, &t.head_in, dy);
        let mut dskip: Vec<Option<Tensor<T>>> = (0..=depth).map(|_| None).collect();
        for l in 0..depth {
            let dcat = self.dec[l]
                .backward(p, g, &t.dec[l], &dh, true)
                .expect("dx requested");
            let (ds, du) = dcat.split(self.widths[l]);
            accumulate(&mut dskip[l], ds);
            dh = self.up[l].backward(p, g, &t.up_in[l], &du);
        }
        accumulate(&mut dskip[depth], dh);
        let mut dx = None;
        for l in (0..=depth).rev() {
            let da = dskip[l].take().expect("every level receives a gradient");
            let want = l > 0 || need_dx;
            let d = self.enc[l].backward(p, g, &t.enc[l], &da, want);
            if l > 0 {
                accumulate(&mut dskip[l - 1], avg_pool2_backward(&d.expect("dx requested")));
            } else {
                dx = d;
            }
        }
        dx
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

/// Network structure; parameters are held separately as a flat buffer.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    rows: usize,
    cols: usize,
    layout: ParamLayout,
    u1: UNet,
    u2: UNet,
}

/// Intermediate values kept by [`Model::forward_train`] for the backward pass.
pub struct Tape<T> {
    t1: UNetTape<T>,
    t2: UNetTape<T>,
}

impl Model {
    pub fn new(config: ModelConfig, rows: usize, cols: usize) -> Result<Self> {
        config.validate(rows, cols)?;
        let mut layout = ParamLayout::default();
        let b = config.base_width;
        let u1 = UNet::new(&mut layout, "unet1", config.in_channels, b, config.depth, b);
        let u2 = UNet::new(&mut layout, "unet2", b, b, config.depth, config.out_channels);
        Ok(Self {
            config,
            rows,
            cols,
            layout,
            u1,
            u2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut p = vec![T::zero(); self.layout.total];
        for e in &self.layout.entries {
            if e.fan_in == 0 {
                continue;
            }
            let std = (e.gain / e.fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in e.slot.get_mut(&mut p) {
                *v = T::from_f64(dist.sample(&mut rng));
            }
        }
        p
    }

    fn flip<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.config.flip_axis {
            FlipAxis::MainDiagonal => transpose(x),
            FlipAxis::AntiDiagonal => anti_transpose(x),
            FlipAxis::None => x.clone(),
        }
    }

    fn check_input<T: Real>(&self, p: &[T], x: &Tensor<T>) {
        assert_eq!(p.len(), self.layout.total, "parameter buffer size");
        assert_eq!(
            (x.c, x.h, x.w),
            (self.config.in_channels, self.rows, self.cols),
            "input tensor shape"
        );
    }

    /// Raw network output (one channel, network units).
    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        self.forward_train(p, x).0
    }

    pub fn forward_train<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Tape<T>) {
        self.check_input(p, x);
        let (f, t1) = self.u1.forward(p, x.clone());
        let (y, t2) = self.u2.forward(p, self.flip(&f));
        (y, Tape { t1, t2 })
    }

    /// Accumulates `d(loss)/d(params)` into `grads` given `dy = d(loss)/d(output)`.
    /// Returns the input gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        tape: &Tape<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer size");
        let df = self
            .u2
            .backward(p, grads, &tape.t2, dy, true)
            .expect("dx requested");
        // both flips are involutions, so they are their own adjoint
        let df = self.flip(&df);
        self.u1.backward(p, grads, &tape.t1, &df, need_dx)
    }

    /// Stacks the two input channels.
    pub fn encode_input<T: Real>(
        &self,
        mp: &MpImage,
        q: &QuantileImage,
        mp_mask: &Mask,
        norm: &Normalization,
    ) -> Tensor<T> {
        let ch0 = norm.encode_mp(mp, mp_mask);
        let mut data = Vec::with_capacity(2 * self.rows * self.cols);
        data.extend(ch0.as_slice().iter().map(|&v| T::from_f64(v)));
        data.extend(q.grid().as_slice().iter().map(|&v| T::from_f64(v)));
        Tensor::from_vec(2, self.rows, self.cols, data)
    }

    pub fn decode_output<T: Real>(&self, y: &Tensor<T>, norm: &Normalization) -> FieldGrid {
        FieldGrid::from_vec(
            self.rows,
            self.cols,
            y.data.iter().map(|&v| norm.decode(v.to_f64())).collect(),
        )
        .expect("output shape matches the model grid")
    }
}

/// A model bound to its parameters and input encoding, usable for
/// Monte Carlo prediction.
pub struct Surrogate<'a, T> {
    pub model: &'a Model,
    pub params: &'a [T],
    pub mp_mask: &'a Mask,
    pub norm: Normalization,
}

impl<T: Real> Surrogate<'_, T> {
    pub fn predict_field(&self, mp: &MpImage, q: &QuantileImage) -> FieldGrid {
        let x = self.model.encode_input(mp, q, self.mp_mask, &self.norm);
        let y = self.model.forward(self.params, &x);
        self.model.decode_output(&y, &self.norm)
    }
}

impl<T: Real> QuantileSurrogate for Surrogate<'_, T> {
    fn predict(&self, mp: &MpImage, q: &QuantileImage) -> tfr_core::Result<FieldGrid> {
        let (r, c) = self.model.shape();
        mp.grid().ensure_shape(r, c)?;
        q.grid().ensure_shape(r, c)?;
        Ok(self.predict_field(mp, q))
    }
}

/// Deterministic pseudo-random f64 values in [-1, 1) for tests and probes.
pub fn probe_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = rand::distr::Uniform::new(-1.0, 1.0).expect("valid range");
    (0..n).map(|_| d.sample(&mut rng)).collect()
}
