//! Single-utterance forward pass with a retained trace, and its backward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{elu, elu_grad, max_over_freq, max_over_time, softmax_rows, softmax_rows_backward, GruCache};
use super::params::Params;
use super::ModelConfig;
use crate::real::Real;

/// Which heads to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Heads {
    pub vp: bool,
    pub ae: bool,
}

pub(crate) struct DecoderTrace<T> {
    pre_z: Array3<T>,
    pub pre_out: Array3<T>,
    conv_in: Vec<Array3<T>>,
    conv_z: Vec<Array3<T>>,
    pub conv_out: Vec<Array3<T>>,
    /// `[frames, bands]`
    pub recon: Array2<T>,
}

pub(crate) struct Trace<T> {
    pub n_valid: usize,
    pub n_valid_bn: usize,
    enc_in: Vec<Array3<T>>,
    enc_z: Vec<Array3<T>>,
    enc_drop: Vec<Option<Array3<T>>>,
    pub enc_out: Vec<Array3<T>>,
    pub mel: Array2<T>,
    mel_arg: Array2<usize>,
    gru_cache: GruCache<T>,
    pub gru_out: Array2<T>,
    gru_drop: Option<Array2<T>>,
    pub bn: Array2<T>,
    bn_arg: Option<Array2<usize>>,
    dense_z: Array2<T>,
    dense_drop: Option<Array2<T>>,
    pub dense_out: Array2<T>,
    pub probs: Option<Array2<T>>,
    pub utt: Option<Array1<T>>,
    utt_arg: Vec<usize>,
    pub dec: Option<DecoderTrace<T>>,
}

fn keep_mask<T: Real, D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
    rate: f64,
) -> ndarray::Array<T, D> {
    let scale = T::of(1.0 / (1.0 - rate));
    ndarray::Array::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { T::zero() } else { scale })
}

fn zero_rows_from<T: Real>(a: &mut Array3<T>, from: usize) {
    if from < a.dim().0 {
        a.slice_mut(s![from.., .., ..]).fill(T::zero());
    }
}

/// Runs the network on one `[frames, bands]` input whose first `n_valid` rows
/// are real. With `dropout_seed`, dropout masks are drawn from that seed.
pub(crate) fn forward<T: Real>(
    p: &Params<T>,
    cfg: &ModelConfig,
    x: ArrayView2<T>,
    n_valid: usize,
    dropout_seed: Option<u64>,
    heads: Heads,
) -> Trace<T> {
    let (nt, nf) = x.dim();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let rate = cfg.dropout_rate;
    let use_drop = rng.is_some() && rate > 0.0;

    let mut h = x.to_owned().into_shape_with_order((nt, nf, 1)).expect("input reshape");
    zero_rows_from(&mut h, n_valid);
    let mut enc_in = Vec::with_capacity(p.enc.len());
    let mut enc_z = Vec::with_capacity(p.enc.len());
    let mut enc_drop = Vec::with_capacity(p.enc.len());
    let mut enc_out = Vec::with_capacity(p.enc.len());
    for conv in &p.enc {
        let z = conv.forward(h.view());
        let mut a = z.mapv(elu);
        let m = if use_drop {
            let m: Array3<T> = keep_mask(rng.as_mut().unwrap(), a.raw_dim(), rate);
            a *= &m;
            Some(m)
        } else {
            None
        };
        zero_rows_from(&mut a, n_valid);
        enc_in.push(h);
        enc_z.push(z);
        enc_drop.push(m);
        enc_out.push(a.clone());
        h = a;
    }

    let (mel, mel_arg) = max_over_freq(&h);
    let (gru_out, gru_cache) = p.gru.forward(mel.view());
    let (gru_act, gru_drop) = if use_drop {
        let m: Array2<T> = keep_mask(rng.as_mut().unwrap(), gru_out.raw_dim(), rate);
        (&gru_out * &m, Some(m))
    } else {
        (gru_out.clone(), None)
    };

    let stride = cfg.temporal_stride();
    let (bn, bn_arg) = if cfg.variant.has_bottleneck() {
        let (b, a) = max_over_time(&gru_act, cfg.bottleneck_window, stride);
        (b, Some(a))
    } else {
        (gru_act, None)
    };
    let n_valid_bn = n_valid.div_ceil(stride);

    let dense_z = p.dense.forward(bn.view());
    let mut dense_out = dense_z.mapv(|v| v.max(T::zero()));
    let dense_drop = if use_drop {
        let m: Array2<T> = keep_mask(rng.as_mut().unwrap(), dense_out.raw_dim(), rate);
        dense_out *= &m;
        Some(m)
    } else {
        None
    };

    let (probs, utt, utt_arg) = if heads.vp {
        let probs = softmax_rows(&p.vp.forward(dense_out.view()));
        let v = probs.ncols();
        let mut utt = Array1::from_elem(v, T::neg_infinity());
        let mut arg = vec![0usize; v];
        for i in 0..n_valid_bn.min(probs.nrows()) {
            for c in 0..v {
                if probs[[i, c]] > utt[c] {
                    utt[c] = probs[[i, c]];
                    arg[c] = i;
                }
            }
        }
        (Some(probs), Some(utt), arg)
    } else {
        (None, None, Vec::new())
    };

    let dec = match (&p.dec, heads.ae) {
        (Some(d), true) => {
            let n_bn = dense_out.nrows();
            let pre_in = dense_out.view().into_shape_with_order((n_bn, 1, dense_out.ncols())).expect("pre-filter input");
            let pre_z = d.pre.forward(pre_in);
            let pre_out = pre_z.mapv(elu);
            let c = d.pre.cout;
            let mut v = Array3::<T>::zeros((nt, nf, c));
            for t in 0..nt {
                let src = pre_out.slice(s![(t / stride).min(n_bn - 1), 0, ..]);
                for f in 0..nf {
                    let mut dst = v.slice_mut(s![t, f, ..]);
                    Zip::from(&mut dst).and(&src).and(&d.band.row(f)).for_each(|o, &a, &b| *o = a + b);
                }
            }
            let mut conv_in = Vec::with_capacity(d.convs.len());
            let mut conv_z = Vec::with_capacity(d.convs.len());
            let mut conv_out = Vec::with_capacity(d.convs.len());
            for conv in &d.convs {
                let z = conv.forward(v.view());
                let a = z.mapv(elu);
                conv_in.push(v);
                conv_z.push(z);
                conv_out.push(a.clone());
                v = a;
            }
            let recon = d.post.forward(v.view()).into_shape_with_order((nt, nf)).expect("post-filter output");
            Some(DecoderTrace { pre_z, pre_out, conv_in, conv_z, conv_out, recon })
        }
        _ => None,
    };

    Trace {
        n_valid,
        n_valid_bn,
        enc_in,
        enc_z,
        enc_drop,
        enc_out,
        mel,
        mel_arg,
        gru_cache,
        gru_out,
        gru_drop,
        bn,
        bn_arg,
        dense_z,
        dense_drop,
        dense_out,
        probs,
        utt,
        utt_arg,
        dec,
    }
}

/// Gradients of a loss whose partials w.r.t. the utterance posterior
/// (`d_utt`) and the reconstruction (`d_recon`) are given.
pub(crate) fn backward<T: Real>(
    p: &Params<T>,
    cfg: &ModelConfig,
    x: ArrayView2<T>,
    tr: &Trace<T>,
    d_utt: Option<&Array1<T>>,
    d_recon: Option<&Array2<T>>,
) -> Params<T> {
    let mut g = p.zeros_like();
    let (nt, nf) = x.dim();
    let stride = cfg.temporal_stride();
    let mut d_dense_out = Array2::<T>::zeros(tr.dense_out.raw_dim());

    if let (Some(du), Some(probs)) = (d_utt, &tr.probs) {
        let mut dp = Array2::<T>::zeros(probs.raw_dim());
        for (c, &i) in tr.utt_arg.iter().enumerate() {
            dp[[i, c]] += du[c];
        }
        let dlogits = softmax_rows_backward(probs, &dp);
        d_dense_out += &p.vp.backward(tr.dense_out.view(), dlogits.view(), &mut g.vp);
    }

    if let (Some(dr), Some(d), Some(dt), Some(gd)) = (d_recon, &p.dec, &tr.dec, g.dec.as_mut()) {
        let dr3 = dr.view().into_shape_with_order((nt, nf, 1)).expect("recon grad");
        let post_in = dt.conv_out.last().expect("decoder has at least one conv layer");
        let mut dv = d.post.backward(post_in.view(), dr3, &mut gd.post, true).unwrap();
        for l in (0..d.convs.len()).rev() {
            Zip::from(&mut dv).and(&dt.conv_z[l]).for_each(|dv, &z| *dv *= elu_grad(z));
            dv = d.convs[l].backward(dt.conv_in[l].view(), dv.view(), &mut gd.convs[l], true).unwrap();
        }
        // un-pooling over bands and nearest-neighbour upsampling
        gd.band += &dv.sum_axis(Axis(0));
        let dup = dv.sum_axis(Axis(1));
        let n_bn = tr.dense_out.nrows();
        let c = d.pre.cout;
        let mut dpre = Array3::<T>::zeros((n_bn, 1, c));
        for t in 0..nt {
            let i = (t / stride).min(n_bn - 1);
            let mut dst = dpre.slice_mut(s![i, 0, ..]);
            dst += &dup.row(t);
        }
        Zip::from(&mut dpre).and(&dt.pre_z).for_each(|d, &z| *d *= elu_grad(z));
        let pre_in = tr
            .dense_out
            .view()
            .into_shape_with_order((n_bn, 1, tr.dense_out.ncols()))
            .expect("pre-filter input");
        let dx = d.pre.backward(pre_in, dpre.view(), &mut gd.pre, true).unwrap();
        d_dense_out += &dx.into_shape_with_order((n_bn, tr.dense_out.ncols())).expect("pre grad");
    }

    let mut d_dense = d_dense_out;
    if let Some(m) = &tr.dense_drop {
        d_dense *= m;
    }
    Zip::from(&mut d_dense).and(&tr.dense_z).for_each(|d, &z| {
        if z <= T::zero() {
            *d = T::zero();
        }
    });
    let d_bn = p.dense.backward(tr.bn.view(), d_dense.view(), &mut g.dense);

    let mut d_gru = match &tr.bn_arg {
        Some(arg) => {
            let mut d = Array2::<T>::zeros(tr.gru_out.raw_dim());
            for ((i, c), &t) in arg.indexed_iter() {
                d[[t, c]] += d_bn[[i, c]];
            }
            d
        }
        None => d_bn,
    };
    if let Some(m) = &tr.gru_drop {
        d_gru *= m;
    }
    let d_mel = p.gru.backward(tr.mel.view(), &tr.gru_cache, d_gru.view(), &mut g.gru);

    let n_layers = p.enc.len();
    let c = tr.mel.ncols();
    let mut dh = Array3::<T>::zeros((nt, nf, c));
    for ((t, ch), &f) in tr.mel_arg.indexed_iter() {
        dh[[t, f, ch]] = d_mel[[t, ch]];
    }
    for l in (0..n_layers).rev() {
        zero_rows_from(&mut dh, tr.n_valid);
        if let Some(m) = &tr.enc_drop[l] {
            dh *= m;
        }
        Zip::from(&mut dh).and(&tr.enc_z[l]).for_each(|d, &z| *d *= elu_grad(z));
        match p.enc[l].backward(tr.enc_in[l].view(), dh.view(), &mut g.enc[l], l > 0) {
            Some(dx) => dh = dx,
            None => break,
        }
    }
    g
}
