use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{init_uniform, Conv2d, Gru, Linear};
use super::ModelConfig;
use crate::real::Real;

/// Decoder weights: temporal pre-filter, Mel-axis un-pooling offsets, the
/// mirrored convolution stack and the linear post-filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub pre: Conv2d<T>,
    /// `[bands, channels]`, added when the pooled feature is tiled back over bands.
    pub band: Array2<T>,
    pub convs: Vec<Conv2d<T>>,
    pub post: Conv2d<T>,
}

/// All trainable tensors of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub enc: Vec<Conv2d<T>>,
    pub gru: Gru<T>,
    pub dense: Linear<T>,
    pub vp: Linear<T>,
    pub dec: Option<Decoder<T>>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    /// Whether the L2 penalty applies.
    pub decay: bool,
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
    pub decay: bool,
}

macro_rules! visit_tensors {
    ($self:ident, $iter:ident, $opt:ident, $as_slice:ident, $ctor:ident) => {{
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr, $decay:expr) => {{
                let shape = $arr.shape().to_vec();
                out.push($ctor {
                    name: $name,
                    shape,
                    data: $arr.$as_slice().expect("standard layout"),
                    decay: $decay,
                });
            }};
        }
        for (i, c) in $self.enc.$iter().enumerate() {
            push!(format!("enc.conv{}.w", i + 1), c.w, true);
            push!(format!("enc.conv{}.b", i + 1), c.b, false);
        }
        push!("gru.wx".to_string(), $self.gru.wx, false);
        push!("gru.wh".to_string(), $self.gru.wh, false);
        push!("gru.b".to_string(), $self.gru.b, false);
        push!("dense.w".to_string(), $self.dense.w, true);
        push!("dense.b".to_string(), $self.dense.b, false);
        push!("vp.w".to_string(), $self.vp.w, false);
        push!("vp.b".to_string(), $self.vp.b, false);
        if let Some(d) = $self.dec.$opt() {
            push!("dec.pre.w".to_string(), d.pre.w, true);
            push!("dec.pre.b".to_string(), d.pre.b, false);
            push!("dec.band".to_string(), d.band, false);
            for (i, c) in d.convs.$iter().enumerate() {
                push!(format!("dec.conv{}.w", i + 1), c.w, true);
                push!(format!("dec.conv{}.b", i + 1), c.b, false);
            }
            push!("dec.post.w".to_string(), d.post.w, true);
            push!("dec.post.b".to_string(), d.post.b, false);
        }
        out
    }};
}

impl<T: Real> Params<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kt, kf) = cfg.conv_kernel;
        let c = cfg.conv_channels;
        let enc = (0..cfg.n_conv_layers)
            .map(|i| Conv2d::new(&mut rng, kt, kf, if i == 0 { 1 } else { c }, c))
            .collect();
        let gru = Gru::new(&mut rng, c, cfg.recurrent_units);
        let dense = Linear::new(&mut rng, cfg.recurrent_units, cfg.dense_units);
        let vp = Linear::new(&mut rng, cfg.dense_units, cfg.d_visual);
        let dec = cfg.variant.has_decoder().then(|| Decoder {
            pre: Conv2d::new(&mut rng, kt, 1, cfg.dense_units, c),
            band: init_uniform(&mut rng, (cfg.input_bands, c), c),
            convs: (0..cfg.n_conv_layers).map(|_| Conv2d::new(&mut rng, kt, kf, c, c)).collect(),
            post: Conv2d::new(&mut rng, kt, kf, c, 1),
        });
        Params { enc, gru, dense, vp, dec }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            enc: self.enc.iter().map(Conv2d::zeros_like).collect(),
            gru: self.gru.zeros_like(),
            dense: self.dense.zeros_like(),
            vp: self.vp.zeros_like(),
            dec: self.dec.as_ref().map(|d| Decoder {
                pre: d.pre.zeros_like(),
                band: Array2::zeros(d.band.raw_dim()),
                convs: d.convs.iter().map(Conv2d::zeros_like).collect(),
                post: d.post.zeros_like(),
            }),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        visit_tensors!(self, iter, as_ref, as_slice, TensorRef)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        visit_tensors!(self, iter_mut, as_mut, as_slice_mut, TensorMut)
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += scale * *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `lambda * sum(w^2)` over decayed weights.
    pub fn l2_penalty(&self, lambda: T) -> T {
        let s: T = self
            .tensors()
            .iter()
            .filter(|t| t.decay)
            .map(|t| t.data.iter().map(|&w| w * w).sum::<T>())
            .sum();
        lambda * s
    }

    /// Adds `2 * lambda * w` to `grad` for decayed weights.
    pub fn add_l2_grad(&self, lambda: T, grad: &mut Params<T>) {
        let two = T::of(2.0);
        for (w, g) in self.tensors().into_iter().zip(grad.tensors_mut()) {
            if w.decay {
                for (gv, wv) in g.data.iter_mut().zip(w.data) {
                    *gv += two * lambda * *wv;
                }
            }
        }
    }

    /// Element-wise conversion to another float type.
    pub fn cast<U: Real>(&self) -> Params<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            w: c.w.mapv(|v| U::of(v.as_f64())),
            b: c.b.mapv(|v| U::of(v.as_f64())),
            kt: c.kt,
            kf: c.kf,
            cin: c.cin,
            cout: c.cout,
        };
        let a2 = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        let a1 = |a: &Array1<T>| a.mapv(|v| U::of(v.as_f64()));
        Params {
            enc: self.enc.iter().map(conv).collect(),
            gru: Gru { wx: a2(&self.gru.wx), wh: a2(&self.gru.wh), b: a1(&self.gru.b) },
            dense: Linear { w: a2(&self.dense.w), b: a1(&self.dense.b) },
            vp: Linear { w: a2(&self.vp.w), b: a1(&self.vp.b) },
            dec: self.dec.as_ref().map(|d| Decoder {
                pre: conv(&d.pre),
                band: a2(&d.band),
                convs: d.convs.iter().map(conv).collect(),
                post: conv(&d.post),
            }),
        }
    }
}
