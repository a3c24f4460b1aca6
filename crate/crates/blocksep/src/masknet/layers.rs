//! Dense and LSTM building blocks with manual backpropagation.
//!
//! Everything runs in f64 so analytic gradients can be validated against
//! central finite differences at tight tolerances. Input-to-hidden products
//! are batched over time as single matrix products; only the recurrence
//! itself runs frame by frame.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
}

/// Fully connected layer, `out = act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize, act: Activation) -> Self {
        Dense {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
            act,
        }
    }

    pub fn glorot(out_dim: usize, in_dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let lim = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-lim..lim)),
            b: Array1::zeros(out_dim),
            act,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Batched forward over rows of `x` (T×in → T×out).
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        if self.act == Activation::Sigmoid {
            y.mapv_inplace(sigmoid);
        }
        y
    }

    /// Single-vector forward.
    pub fn forward_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.w.dot(x);
        y += &self.b;
        if self.act == Activation::Sigmoid {
            y.mapv_inplace(sigmoid);
        }
        y
    }

    /// Backward for the batched forward. `y` is the cached output, `d_y` the
    /// upstream gradient; returns the gradient w.r.t. `x` and accumulates
    /// parameter gradients into `g`.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        y: &Array2<f64>,
        d_y: &Array2<f64>,
        g: &mut Dense,
    ) -> Array2<f64> {
        let d_pre = match self.act {
            Activation::Linear => d_y.clone(),
            Activation::Sigmoid => {
                let mut d = d_y.clone();
                d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                d
            }
        };
        g.w += &d_pre.t().dot(x);
        g.b += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w)
    }

    /// Backward for the single-vector forward.
    pub fn backward_vec(
        &self,
        x: &ArrayView1<f64>,
        y: &Array1<f64>,
        d_y: &Array1<f64>,
        g: &mut Dense,
    ) -> Array1<f64> {
        let d_pre = match self.act {
            Activation::Linear => d_y.clone(),
            Activation::Sigmoid => {
                let mut d = d_y.clone();
                d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                d
            }
        };
        for (mut row, &dp) in g.w.rows_mut().into_iter().zip(d_pre.iter()) {
            row.scaled_add(dp, x);
        }
        g.b += &d_pre;
        self.w.t().dot(&d_pre)
    }
}

/// One LSTM direction. Gate order in the stacked dimension is [i, f, g, o].
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Array2<f64>, // 4H × in
    pub w_hh: Array2<f64>, // 4H × H
    pub b: Array1<f64>,    // 4H
}

pub struct LstmCache {
    /// Post-activation gates, T×4H.
    pub gates: Array2<f64>,
    /// Cell states, T×H.
    pub c: Array2<f64>,
    /// tanh of the cell states, T×H.
    pub tanh_c: Array2<f64>,
    /// Hidden states, T×H.
    pub h: Array2<f64>,
}

impl Lstm {
    pub fn zeros(hidden: usize, in_dim: usize) -> Self {
        Lstm {
            w_ih: Array2::zeros((4 * hidden, in_dim)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn init(hidden: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let lim = (6.0 / (in_dim + hidden) as f64).sqrt();
        let w_ih = Array2::from_shape_fn((4 * hidden, in_dim), |_| rng.gen_range(-lim..lim));
        let mut w_hh = Array2::zeros((4 * hidden, hidden));
        for gate in 0..4 {
            let q = random_orthogonal(hidden, rng);
            w_hh
                .slice_mut(s![gate * hidden..(gate + 1) * hidden, ..])
                .assign(&q);
        }
        Lstm {
            w_ih,
            w_hh,
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    /// Runs the recurrence over the rows of `x` (T×in), in row order.
    pub fn forward(&self, x: &ArrayView2<f64>) -> LstmCache {
        let t_len = x.nrows();
        let hd = self.hidden();
        // Input contribution for all frames at once.
        let mut pre_all = x.dot(&self.w_ih.t());
        pre_all += &self.b;

        let mut gates = Array2::zeros((t_len, 4 * hd));
        let mut c = Array2::zeros((t_len, hd));
        let mut tanh_c = Array2::zeros((t_len, hd));
        let mut h = Array2::zeros((t_len, hd));
        let mut h_prev = Array1::zeros(hd);
        let mut c_prev = Array1::<f64>::zeros(hd);

        for t in 0..t_len {
            let mut pre = pre_all.row(t).to_owned();
            pre += &self.w_hh.dot(&h_prev);
            let mut g_row = gates.row_mut(t);
            for k in 0..hd {
                let i = sigmoid(pre[k]);
                let f = sigmoid(pre[hd + k]);
                let gg = pre[2 * hd + k].tanh();
                let o = sigmoid(pre[3 * hd + k]);
                g_row[k] = i;
                g_row[hd + k] = f;
                g_row[2 * hd + k] = gg;
                g_row[3 * hd + k] = o;
                let cc = f * c_prev[k] + i * gg;
                let tc = cc.tanh();
                c[[t, k]] = cc;
                tanh_c[[t, k]] = tc;
                h[[t, k]] = o * tc;
            }
            h_prev.assign(&h.row(t));
            c_prev.assign(&c.row(t));
        }

        LstmCache {
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Backpropagation through time. `d_h` is the upstream gradient on every
    /// hidden state; returns the gradient w.r.t. `x` and accumulates
    /// parameter gradients into `g`.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &LstmCache,
        d_h: &Array2<f64>,
        g: &mut Lstm,
    ) -> Array2<f64> {
        let t_len = x.nrows();
        let hd = self.hidden();
        let mut d_pre = Array2::zeros((t_len, 4 * hd));
        let mut dh_carry = Array1::zeros(hd);
        let mut dc_carry = Array1::<f64>::zeros(hd);

        for t in (0..t_len).rev() {
            let gates = cache.gates.row(t);
            for k in 0..hd {
                let dh = d_h[[t, k]] + dh_carry[k];
                let i = gates[k];
                let f = gates[hd + k];
                let gg = gates[2 * hd + k];
                let o = gates[3 * hd + k];
                let tc = cache.tanh_c[[t, k]];
                let dc = dc_carry[k] + dh * o * (1.0 - tc * tc);
                let c_prev = if t == 0 { 0.0 } else { cache.c[[t - 1, k]] };
                d_pre[[t, k]] = dc * gg * i * (1.0 - i);
                d_pre[[t, hd + k]] = dc * c_prev * f * (1.0 - f);
                d_pre[[t, 2 * hd + k]] = dc * i * (1.0 - gg * gg);
                d_pre[[t, 3 * hd + k]] = dh * tc * o * (1.0 - o);
                dc_carry[k] = dc * f;
            }
            dh_carry = self.w_hh.t().dot(&d_pre.row(t));
        }

        g.w_ih += &d_pre.t().dot(x);
        g.b += &d_pre.sum_axis(Axis(0));
        // Hidden-to-hidden gradient uses h shifted by one frame (h_{-1} = 0).
        if t_len > 1 {
            let d_pre_tail = d_pre.slice(s![1.., ..]);
            let h_head = cache.h.slice(s![..t_len - 1, ..]);
            g.w_hh += &d_pre_tail.t().dot(&h_head);
        }
        d_pre.dot(&self.w_ih)
    }
}

/// Bidirectional LSTM layer: forward and time-reversed directions whose
/// hidden states are concatenated per frame (T×2H).
#[derive(Debug, Clone, PartialEq)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

pub struct BlstmCache {
    pub fwd: LstmCache,
    pub bwd: LstmCache,
    /// Input in reversed frame order (kept for the backward pass).
    pub x_rev: Array2<f64>,
}

impl Blstm {
    pub fn zeros(hidden: usize, in_dim: usize) -> Self {
        Blstm {
            fwd: Lstm::zeros(hidden, in_dim),
            bwd: Lstm::zeros(hidden, in_dim),
        }
    }

    pub fn init(hidden: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Blstm {
            fwd: Lstm::init(hidden, in_dim, rng),
            bwd: Lstm::init(hidden, in_dim, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, BlstmCache) {
        let t_len = x.nrows();
        let hd = self.hidden();
        let x_rev = reverse_rows(x);
        let fwd = self.fwd.forward(x);
        let bwd = self.bwd.forward(&x_rev.view());

        let mut out = Array2::zeros((t_len, 2 * hd));
        out.slice_mut(s![.., ..hd]).assign(&fwd.h);
        for t in 0..t_len {
            out.slice_mut(s![t, hd..]).assign(&bwd.h.row(t_len - 1 - t));
        }
        (out, BlstmCache { fwd, bwd, x_rev })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &BlstmCache,
        d_out: &Array2<f64>,
        g: &mut Blstm,
    ) -> Array2<f64> {
        let t_len = x.nrows();
        let hd = self.hidden();
        let d_h_fwd = d_out.slice(s![.., ..hd]).to_owned();
        let mut d_h_bwd = Array2::zeros((t_len, hd));
        for t in 0..t_len {
            d_h_bwd
                .row_mut(t)
                .assign(&d_out.slice(s![t_len - 1 - t, hd..]));
        }
        let d_x_fwd = self.fwd.backward(x, &cache.fwd, &d_h_fwd, &mut g.fwd);
        let d_x_bwd_rev = self
            .bwd
            .backward(&cache.x_rev.view(), &cache.bwd, &d_h_bwd, &mut g.bwd);
        let mut d_x = d_x_fwd;
        for t in 0..t_len {
            let mut row = d_x.row_mut(t);
            row += &d_x_bwd_rev.row(t_len - 1 - t);
        }
        d_x
    }
}

fn reverse_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let t_len = x.nrows();
    let mut rev = Array2::zeros((t_len, x.ncols()));
    for t in 0..t_len {
        rev.row_mut(t).assign(&x.row(t_len - 1 - t));
    }
    rev
}

/// Random orthogonal matrix via modified Gram-Schmidt on a Gaussian sample.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    use rand_distr::StandardNormal;
    let mut a = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
    for j in 0..n {
        for k in 0..j {
            let proj = a.column(j).dot(&a.column(k));
            let col_k = a.column(k).to_owned();
            a.column_mut(j).scaled_add(-proj, &col_k);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        if norm > 1e-12 {
            a.column_mut(j).mapv_inplace(|v| v / norm);
        } else {
            // Degenerate draw; fall back to a unit vector.
            let mut col = a.column_mut(j);
            col.fill(0.0);
            col[j % n] = 1.0;
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_orthogonal(16, &mut rng);
        let qtq = q.t().dot(&q);
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(qtq[[i, j]], expect, epsilon = 1e-10);
            }
        }
    }

    /// Finite-difference check of the LSTM backward pass on a tiny instance.
    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t_len, in_dim, hd) = (4, 3, 2);
        let lstm = Lstm::init(hd, in_dim, &mut rng);
        let x = Array2::from_shape_fn((t_len, in_dim), |_| rng.gen_range(-1.0..1.0));
        // Loss: sum of squared hidden states.
        let loss = |l: &Lstm, x: &Array2<f64>| -> f64 {
            let c = l.forward(&x.view());
            c.h.iter().map(|v| v * v).sum()
        };
        let cache = lstm.forward(&x.view());
        let d_h = cache.h.mapv(|v| 2.0 * v);
        let mut g = Lstm::zeros(hd, in_dim);
        let d_x = lstm.backward(&x.view(), &cache, &d_h, &mut g);

        let eps = 1e-6;
        // Input gradient.
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&lstm, &xp) - loss(&lstm, &xm)) / (2.0 * eps);
            assert_abs_diff_eq!(d_x.as_slice().unwrap()[idx], fd, epsilon = 1e-7);
        }
        // Recurrent weight gradient.
        for idx in 0..lstm.w_hh.len() {
            let mut lp = lstm.clone();
            let mut lm = lstm.clone();
            lp.w_hh.as_slice_mut().unwrap()[idx] += eps;
            lm.w_hh.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert_abs_diff_eq!(g.w_hh.as_slice().unwrap()[idx], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn blstm_output_concatenates_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blstm = Blstm::init(3, 2, &mut rng);
        let x = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let (out, _) = blstm.forward(&x.view());
        assert_eq!(out.dim(), (5, 6));
    }
}
