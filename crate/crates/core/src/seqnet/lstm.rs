//! LSTM and linear layers over row-major batches.
//!
//! Weights are stored input-major (`in x out`) so a batch `X (B x in)`
//! projects as `X . W`. Gate columns are ordered `[input | forget | cell | output]`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Forward activations of one time step, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub c_prev: Array2<f64>,
    /// Post-activation gates, `B x 4H`.
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
}

pub(crate) struct LayerGrads {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: Array2::zeros((input, 4 * hidden)),
            w_hh: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn uniform<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut layer = Self::zeros(input, hidden);
        for v in layer
            .w_ih
            .iter_mut()
            .chain(layer.w_hh.iter_mut())
            .chain(layer.bias.iter_mut())
        {
            *v = rng.gen_range(-bound..=bound);
        }
        layer
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.nrows()
    }

    /// Applies gate nonlinearities in place to pre-activations and returns `(c, tanh_c, h)`.
    pub(crate) fn activate(
        &self,
        gates: &mut Array2<f64>,
        c_prev: Option<ArrayView2<f64>>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h = self.hidden_size();
        let b = gates.nrows();
        let mut c = Array2::zeros((b, h));
        let mut tanh_c = Array2::zeros((b, h));
        let mut out = Array2::zeros((b, h));
        for r in 0..b {
            let mut row = gates.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            for j in 0..h {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[h + j]);
                let g = row[2 * h + j].tanh();
                let o = sigmoid(row[3 * h + j]);
                row[j] = i;
                row[h + j] = f;
                row[2 * h + j] = g;
                row[3 * h + j] = o;
                let cp = c_prev.as_ref().map_or(0.0, |cp| cp[[r, j]]);
                let cv = f * cp + i * g;
                let tc = cv.tanh();
                c[[r, j]] = cv;
                tanh_c[[r, j]] = tc;
                out[[r, j]] = o * tc;
            }
        }
        (c, tanh_c, out)
    }

    /// One step with caching. `proj` is the already computed `x . W_ih`.
    pub(crate) fn step(
        &self,
        x: Array2<f64>,
        proj: Array2<f64>,
        h_prev: Option<&Array2<f64>>,
        c_prev: Option<&Array2<f64>>,
    ) -> StepCache {
        let b = x.nrows();
        let hs = self.hidden_size();
        let mut gates = proj;
        if let Some(hp) = h_prev {
            gates += &hp.dot(&self.w_hh);
        }
        gates += &self.bias;
        let (c, tanh_c, h) = self.activate(&mut gates, c_prev.map(|c| c.view()));
        StepCache {
            x,
            h_prev: h_prev.cloned().unwrap_or_else(|| Array2::zeros((b, hs))),
            c_prev: c_prev.cloned().unwrap_or_else(|| Array2::zeros((b, hs))),
            gates,
            c,
            tanh_c,
            h,
        }
    }

    /// Backprop through the cached steps of one sequence.
    ///
    /// `dh[t]` is the gradient arriving at `h_t` from above. Returns parameter
    /// gradients and, if requested, the gradients with respect to each step's input.
    pub(crate) fn backward(
        &self,
        caches: &[StepCache],
        dh: &[Array2<f64>],
        need_dx: bool,
    ) -> (LayerGrads, Option<Vec<Array2<f64>>>) {
        let hs = self.hidden_size();
        let b = caches[0].h.nrows();
        let mut grads = LayerGrads {
            w_ih: Array2::zeros(self.w_ih.raw_dim()),
            w_hh: Array2::zeros(self.w_hh.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        };
        let mut dx = need_dx.then(|| vec![Array2::zeros((0, 0)); caches.len()]);
        let mut dh_next = Array2::<f64>::zeros((b, hs));
        let mut dc_next = Array2::<f64>::zeros((b, hs));
        for t in (0..caches.len()).rev() {
            let cache = &caches[t];
            let mut da = Array2::<f64>::zeros((b, 4 * hs));
            for r in 0..b {
                let g = cache.gates.row(r);
                for j in 0..hs {
                    let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                    let dhv = dh[t][[r, j]] + dh_next[[r, j]];
                    let tc = cache.tanh_c[[r, j]];
                    let d_o = dhv * tc;
                    let dc = dhv * o * (1.0 - tc * tc) + dc_next[[r, j]];
                    let d_i = dc * gg;
                    let d_g = dc * i;
                    let d_f = dc * cache.c_prev[[r, j]];
                    dc_next[[r, j]] = dc * f;
                    da[[r, j]] = d_i * i * (1.0 - i);
                    da[[r, hs + j]] = d_f * f * (1.0 - f);
                    da[[r, 2 * hs + j]] = d_g * (1.0 - gg * gg);
                    da[[r, 3 * hs + j]] = d_o * o * (1.0 - o);
                }
            }
            grads.w_ih += &cache.x.t().dot(&da);
            grads.w_hh += &cache.h_prev.t().dot(&da);
            grads.bias += &da.sum_axis(Axis(0));
            if let Some(dx) = dx.as_mut() {
                dx[t] = da.dot(&self.w_ih.t());
            }
            dh_next = da.dot(&self.w_hh.t());
        }
        (grads, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn uniform<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..=bound));
        let bias = Array1::from_shape_fn(output, |_| rng.gen_range(-bound..=bound));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

/// Inverted-dropout mask (`0` or `1 / (1 - rate)`).
pub(crate) fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

/// Gathers and sums `rows` of `w` into each output row: the projection of a
/// one-hot input without materializing it.
pub(crate) fn gather_rows_sum(w: &Array2<f64>, rows: &[[usize; 4]]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), w.ncols()));
    Zip::from(out.rows_mut())
        .and(&Array1::from_iter(0..rows.len()))
        .for_each(|mut o, &r| {
            for &idx in &rows[r] {
                o += &w.row(idx);
            }
        });
    out
}

pub(crate) fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}
