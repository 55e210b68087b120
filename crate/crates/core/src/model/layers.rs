//! Layer primitives with explicit forward and backward passes.
//!
//! Sequences are laid out time-major and channel-last: `[time, freq, channels]`
//! for 2-D feature maps, `[time, units]` otherwise.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::real::Real;

/// Fan-in scaled uniform initialization, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
pub(crate) fn init_uniform<T: Real, R: Rng>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<T> {
    let limit = (3.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::of(rng.random_range(-limit..limit)))
}

/// Stride-1 2-D convolution with "same" zero padding on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[kt * kf * cin, cout]`, rows ordered (dt, df, cin).
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub kt: usize,
    pub kf: usize,
    pub cin: usize,
    pub cout: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(rng: &mut R, kt: usize, kf: usize, cin: usize, cout: usize) -> Self {
        let k = kt * kf * cin;
        Conv2d { w: init_uniform(rng, (k, cout), k), b: Array1::zeros(cout), kt, kf, cin, cout }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            ..*self
        }
    }

    fn im2col(&self, x: ArrayView3<T>) -> Array2<T> {
        let (nt, nf, cin) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let (pt, pf) = (self.kt / 2, self.kf / 2);
        let k = self.kt * self.kf * cin;
        let mut cols = Array2::<T>::zeros((nt * nf, k));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for t in 0..nt {
            for dt in 0..self.kt {
                let st = t + dt;
                if st < pt || st - pt >= nt {
                    continue;
                }
                let st = st - pt;
                for f in 0..nf {
                    let row = (t * nf + f) * k;
                    for df in 0..self.kf {
                        let sf = f + df;
                        if sf < pf || sf - pf >= nf {
                            continue;
                        }
                        let sf = sf - pf;
                        let dst = row + (dt * self.kf + df) * cin;
                        let src = (st * nf + sf) * cin;
                        cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, nt: usize, nf: usize) -> Array3<T> {
        let cin = self.cin;
        let (pt, pf) = (self.kt / 2, self.kf / 2);
        let k = self.kt * self.kf * cin;
        let mut dx = Array3::<T>::zeros((nt, nf, cin));
        let dcols = dcols.as_standard_layout();
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("standard layout");
        for t in 0..nt {
            for dt in 0..self.kt {
                let st = t + dt;
                if st < pt || st - pt >= nt {
                    continue;
                }
                let st = st - pt;
                for f in 0..nf {
                    let row = (t * nf + f) * k;
                    for df in 0..self.kf {
                        let sf = f + df;
                        if sf < pf || sf - pf >= nf {
                            continue;
                        }
                        let sf = sf - pf;
                        let src = row + (dt * self.kf + df) * cin;
                        let dst = (st * nf + sf) * cin;
                        for c in 0..cin {
                            xs[dst + c] += ds[src + c];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: ArrayView3<T>) -> Array3<T> {
        let (nt, nf, _) = x.dim();
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.w);
        y += &self.b;
        y.into_shape_with_order((nt, nf, self.cout)).expect("conv output shape")
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient if asked.
    pub fn backward(&self, x: ArrayView3<T>, dy: ArrayView3<T>, grad: &mut Conv2d<T>, need_dx: bool) -> Option<Array3<T>> {
        let (nt, nf, _) = x.dim();
        let cols = self.im2col(x);
        let dy2 = dy.as_standard_layout();
        let dy2 = dy2.view().into_shape_with_order((nt * nf, self.cout)).expect("conv grad shape");
        general_mat_mul(T::one(), &cols.t(), &dy2, T::one(), &mut grad.w);
        grad.b += &dy2.sum_axis(Axis(0));
        need_dx.then(|| {
            let dcols = dy2.dot(&self.w.t());
            self.col2im(&dcols, nt, nf)
        })
    }
}

/// Dense layer applied independently at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, n_in: usize, n_out: usize) -> Self {
        Linear { w: init_uniform(rng, (n_in, n_out), n_in), b: Array1::zeros(n_out) }
    }

    pub fn zeros_like(&self) -> Self {
        Linear { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Gated recurrent unit, forward in time, zero initial state.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r ⊙ h) Un + bn)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    /// `[in, 3H]`, gate blocks ordered z, r, n.
    pub wx: Array2<T>,
    /// `[H, 3H]`
    pub wh: Array2<T>,
    /// `[3H]`
    pub b: Array1<T>,
}

pub struct GruCache<T> {
    z: Array2<T>,
    r: Array2<T>,
    n: Array2<T>,
    h_prev: Array2<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng>(rng: &mut R, n_in: usize, units: usize) -> Self {
        Gru {
            wx: init_uniform(rng, (n_in, 3 * units), n_in),
            wh: init_uniform(rng, (units, 3 * units), units),
            b: Array1::zeros(3 * units),
        }
    }

    pub fn units(&self) -> usize {
        self.wh.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Gru {
            wx: Array2::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, GruCache<T>) {
        let h_units = self.units();
        let steps = x.nrows();
        let mut ax = x.dot(&self.wx);
        ax += &self.b;
        let wh_zr = self.wh.slice(s![.., ..2 * h_units]);
        let wh_n = self.wh.slice(s![.., 2 * h_units..]);
        let mut out = Array2::<T>::zeros((steps, h_units));
        let mut cache = GruCache {
            z: Array2::zeros((steps, h_units)),
            r: Array2::zeros((steps, h_units)),
            n: Array2::zeros((steps, h_units)),
            h_prev: Array2::zeros((steps, h_units)),
        };
        let mut h = Array1::<T>::zeros(h_units);
        for t in 0..steps {
            let a = ax.row(t);
            let zr = h.dot(&wh_zr);
            let mut rh = Array1::<T>::zeros(h_units);
            for j in 0..h_units {
                let z = sigmoid(a[j] + zr[j]);
                let r = sigmoid(a[h_units + j] + zr[h_units + j]);
                cache.z[[t, j]] = z;
                cache.r[[t, j]] = r;
                rh[j] = r * h[j];
            }
            let hn = rh.dot(&wh_n);
            cache.h_prev.row_mut(t).assign(&h);
            for j in 0..h_units {
                let n = (a[2 * h_units + j] + hn[j]).tanh();
                cache.n[[t, j]] = n;
                let z = cache.z[[t, j]];
                h[j] = (T::one() - z) * n + z * h[j];
            }
            out.row_mut(t).assign(&h);
        }
        (out, cache)
    }

    pub fn backward(&self, x: ArrayView2<T>, cache: &GruCache<T>, dout: ArrayView2<T>, grad: &mut Gru<T>) -> Array2<T> {
        let h_units = self.units();
        let steps = x.nrows();
        let wh_zr = self.wh.slice(s![.., ..2 * h_units]);
        let wh_n = self.wh.slice(s![.., 2 * h_units..]);
        let mut dax = Array2::<T>::zeros((steps, 3 * h_units));
        let mut dh_next = Array1::<T>::zeros(h_units);
        let mut dzr = Array1::<T>::zeros(2 * h_units);
        let mut dan = Array1::<T>::zeros(h_units);
        for t in (0..steps).rev() {
            let h_prev = cache.h_prev.row(t);
            let mut dh_prev = Array1::<T>::zeros(h_units);
            for j in 0..h_units {
                let dh = dout[[t, j]] + dh_next[j];
                let (z, n) = (cache.z[[t, j]], cache.n[[t, j]]);
                dan[j] = dh * (T::one() - z) * (T::one() - n * n);
                dzr[j] = dh * (h_prev[j] - n) * z * (T::one() - z);
                dh_prev[j] = dh * z;
            }
            // n-gate recurrent path: (r ⊙ h) Un
            let rh: Array1<T> = &cache.r.row(t) * &h_prev;
            {
                let mut g = grad.wh.slice_mut(s![.., 2 * h_units..]);
                for i in 0..h_units {
                    let ri = rh[i];
                    if ri != T::zero() {
                        g.row_mut(i).scaled_add(ri, &dan);
                    }
                }
            }
            let drh = wh_n.dot(&dan);
            for j in 0..h_units {
                let r = cache.r[[t, j]];
                dzr[h_units + j] = drh[j] * h_prev[j] * r * (T::one() - r);
                dh_prev[j] += drh[j] * r;
            }
            {
                let mut g = grad.wh.slice_mut(s![.., ..2 * h_units]);
                for i in 0..h_units {
                    let hi = h_prev[i];
                    if hi != T::zero() {
                        g.row_mut(i).scaled_add(hi, &dzr);
                    }
                }
            }
            dh_prev += &wh_zr.dot(&dzr);
            let mut row = dax.row_mut(t);
            row.slice_mut(s![..2 * h_units]).assign(&dzr);
            row.slice_mut(s![2 * h_units..]).assign(&dan);
            dh_next = dh_prev;
        }
        general_mat_mul(T::one(), &x.t(), &dax, T::one(), &mut grad.wx);
        grad.b += &dax.sum_axis(Axis(0));
        dax.dot(&self.wx.t())
    }
}

pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

pub fn elu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s: T = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Backward of row-wise softmax given the probabilities.
pub fn softmax_rows_backward<T: Real>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(p.raw_dim());
    Zip::from(out.rows_mut()).and(p.rows()).and(dp.rows()).for_each(|mut o, pr, dr| {
        let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
        Zip::from(&mut o).and(&pr).and(&dr).for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    });
    out
}

/// Max over the frequency axis: `[T, F, C] -> [T, C]` plus the argmax band.
pub fn max_over_freq<T: Real>(x: &Array3<T>) -> (Array2<T>, Array2<usize>) {
    let (nt, nf, nc) = x.dim();
    let mut out = Array2::from_elem((nt, nc), T::neg_infinity());
    let mut arg = Array2::zeros((nt, nc));
    for t in 0..nt {
        for f in 0..nf {
            for c in 0..nc {
                let v = x[[t, f, c]];
                if v > out[[t, c]] {
                    out[[t, c]] = v;
                    arg[[t, c]] = f;
                }
            }
        }
    }
    (out, arg)
}

/// Temporal max pooling with the given window and stride; windows are clipped
/// at the sequence end. Output has `steps / stride` rows.
pub fn max_over_time<T: Real>(x: &Array2<T>, window: usize, stride: usize) -> (Array2<T>, Array2<usize>) {
    let (nt, nc) = x.dim();
    let n_out = nt / stride;
    let mut out = Array2::from_elem((n_out, nc), T::neg_infinity());
    let mut arg = Array2::zeros((n_out, nc));
    for i in 0..n_out {
        let lo = i * stride;
        let hi = (lo + window).min(nt);
        for t in lo..hi {
            for c in 0..nc {
                let v = x[[t, c]];
                if v > out[[i, c]] {
                    out[[i, c]] = v;
                    arg[[i, c]] = t;
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_ref(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (nt, nf, _) = x.dim();
        let mut y = Array3::zeros((nt, nf, conv.cout));
        for t in 0..nt as isize {
            for f in 0..nf as isize {
                for o in 0..conv.cout {
                    let mut acc = conv.b[o];
                    for dt in 0..conv.kt as isize {
                        for df in 0..conv.kf as isize {
                            let (st, sf) = (t + dt - conv.kt as isize / 2, f + df - conv.kf as isize / 2);
                            if st < 0 || sf < 0 || st >= nt as isize || sf >= nf as isize {
                                continue;
                            }
                            for c in 0..conv.cin {
                                let row = ((dt as usize) * conv.kf + df as usize) * conv.cin + c;
                                acc += conv.w[[row, o]] * x[[st as usize, sf as usize, c]];
                            }
                        }
                    }
                    y[[t as usize, f as usize, o]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (kt, kf) in [(3, 3), (5, 5), (3, 1), (1, 1)] {
            let mut conv = Conv2d::<f64>::new(&mut rng, kt, kf, 3, 4);
            conv.b = Array1::from_shape_fn(4, |i| i as f64 * 0.1);
            let x = Array3::from_shape_fn((7, 5, 3), |_| rng.random_range(-1.0..1.0));
            let y = conv.forward(x.view());
            let r = conv_ref(&conv, &x);
            assert!(y.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x) - b> == <conv^T(dy), x>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::<f64>::new(&mut rng, 5, 3, 2, 3);
        conv.b = Array1::from_vec(vec![0.3, -0.2, 0.5]);
        let x = Array3::from_shape_fn((6, 4, 2), |_| rng.random_range(-1.0..1.0));
        let dy = Array3::from_shape_fn((6, 4, 3), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(x.view());
        let mut g = conv.zeros_like();
        let dx = conv.backward(x.view(), dy.view(), &mut g, true).unwrap();
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let bias: f64 = dy.sum_axis(Axis(0)).sum_axis(Axis(0)).dot(&conv.b);
        let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + bias;
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_shapes() {
        let x = Array2::from_shape_fn((16, 2), |(t, c)| (t as f64) * if c == 0 { 1.0 } else { -1.0 });
        let (p, arg) = max_over_time(&x, 8, 4);
        assert_eq!(p.dim(), (4, 2));
        assert_eq!(p[[0, 0]], 7.0);
        assert_eq!(p[[3, 0]], 15.0);
        assert_eq!(p[[3, 1]], -12.0);
        assert_eq!(arg[[2, 1]], 8);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Array2::from_shape_fn((4, 7), |(i, j)| (i * j) as f64 - 10.0);
        let p = softmax_rows(&l);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
