//! The three interchangeable nonlinear sub-layers: position-wise
//! feed-forward, gated convolution, bidirectional LSTM. Each maps
//! `[n, d] -> [n, d]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::rngs::StdRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SublayerKind {
    #[default]
    Ffn,
    CnnGlu,
    RnnBilstm,
    /// Skip the nonlinear sub-layer entirely.
    None,
}

impl SublayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SublayerKind::Ffn => "ffn",
            SublayerKind::CnnGlu => "cnn",
            SublayerKind::RnnBilstm => "rnn",
            SublayerKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ffn" => Ok(SublayerKind::Ffn),
            "cnn" => Ok(SublayerKind::CnnGlu),
            "rnn" => Ok(SublayerKind::RnnBilstm),
            "none" => Ok(SublayerKind::None),
            other => Err(Error::Config(format!("unknown sublayer kind '{other}'"))),
        }
    }
}

/// ReLU(X W1 + b1) W2 + b2, applied independently per position.
/// `relu_keep < 1` applies dropout to the hidden activations in train mode.
#[allow(clippy::too_many_arguments)]
pub fn ffn_sublayer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    relu_keep: T,
    train: bool,
    rng: &mut StdRng,
) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let h = g.dropout(h, relu_keep, train, rng)?;
    let y = g.matmul(h, w2)?;
    g.add_bias(y, b2)
}

/// (X * W + bw) ⊙ σ(X * V + bv) with centered SAME convolutions of width k.
pub fn glu_conv_sublayer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bw: Var,
    v: Var,
    bv: Var,
    k: usize,
) -> Result<Var> {
    let lin = g.conv1d_same(x, w, k)?;
    let lin = g.add_bias(lin, bw)?;
    let gate = g.conv1d_same(x, v, k)?;
    let gate = g.add_bias(gate, bv)?;
    let gate = g.sigmoid(gate);
    g.mul(lin, gate)
}

/// Parameters of one LSTM direction: stacked gate weights for input and
/// recurrent paths plus a bias, gate order `[i, f, g, o]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirection {
    /// `[d, 4d]`
    pub wx: Var,
    /// `[d, 4d]`
    pub wh: Var,
    /// `[4d]`
    pub b: Var,
}

/// One standard LSTM step on a `[1, d]` input row. Returns (h, c).
fn lstm_step<T: Real>(
    g: &mut Graph<T>,
    x_row: Var,
    h_prev: Var,
    c_prev: Var,
    dir: &LstmDirection,
    d: usize,
) -> Result<(Var, Var)> {
    let gx = g.matmul(x_row, dir.wx)?;
    let gh = g.matmul(h_prev, dir.wh)?;
    let gates = g.add(gx, gh)?;
    let gates = g.add_bias(gates, dir.b)?;
    let i_g = g.slice_cols(gates, 0, d)?;
    let f_g = g.slice_cols(gates, d, d)?;
    let g_g = g.slice_cols(gates, 2 * d, d)?;
    let o_g = g.slice_cols(gates, 3 * d, d)?;
    let i_g = g.sigmoid(i_g);
    let f_g = g.sigmoid(f_g);
    let g_g = g.tanh(g_g);
    let o_g = g.sigmoid(o_g);
    let fc = g.mul(f_g, c_prev)?;
    let ig = g.mul(i_g, g_g)?;
    let c = g.add(fc, ig)?;
    let ct = g.tanh(c);
    let h = g.mul(o_g, ct)?;
    Ok((h, c))
}

/// Bidirectional LSTM; outputs the position-wise sum of the two directions.
pub fn bilstm_sublayer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    fwd: &LstmDirection,
    bwd: &LstmDirection,
) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    let run = |g: &mut Graph<T>, dir: &LstmDirection, order: Vec<usize>| -> Result<Vec<Var>> {
        let mut h = g.constant(Tensor::zeros(vec![1, d]));
        let mut c = g.constant(Tensor::zeros(vec![1, d]));
        let mut out = vec![None; n];
        for t in order {
            let x_row = g.row(x, t)?;
            let (nh, nc) = lstm_step(g, x_row, h, c, dir, d)?;
            h = nh;
            c = nc;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|v| v.unwrap()).collect())
    };
    let f_out = run(g, fwd, (0..n).collect())?;
    let b_out = run(g, bwd, (0..n).rev().collect())?;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        rows.push(g.add(f_out[t], b_out[t])?);
    }
    g.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(0)
    }

    #[test]
    fn ffn_dead_relu_region_gives_biases_only() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(vec![2, 2], 1.0), false);
        let w1 = g.leaf(Tensor::filled(vec![2, 3], -1.0), false);
        let b1 = g.leaf(Tensor::zeros(vec![3]), false);
        let w2 = g.leaf(Tensor::filled(vec![3, 2], 1.0), false);
        let b2 = g.leaf(Tensor::zeros(vec![2]), false);
        let y = ffn_sublayer(&mut g, x, w1, b1, w2, b2, 1.0, false, &mut rng()).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_identity_composition() {
        let mut g = Graph::<f64>::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = g.leaf(Tensor::from_rows(&[vec![0.5, 2.0]]).unwrap(), false);
        let w1 = g.leaf(eye.clone(), false);
        let w2 = g.leaf(eye, false);
        let b1 = g.leaf(Tensor::zeros(vec![2]), false);
        let b2 = g.leaf(Tensor::zeros(vec![2]), false);
        let y = ffn_sublayer(&mut g, x, w1, b1, w2, b2, 1.0, false, &mut rng()).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 2.0]);
    }

    #[test]
    fn ffn_matches_reference_loop() {
        let mut r = rng();
        let x = Tensor::randn(vec![2, 3], 1.0, &mut r);
        let w1 = Tensor::randn(vec![3, 5], 1.0, &mut r);
        let w2 = Tensor::randn(vec![5, 3], 1.0, &mut r);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), false);
        let w1v = g.leaf(w1.clone(), false);
        let w2v = g.leaf(w2.clone(), false);
        let b1 = g.leaf(Tensor::zeros(vec![5]), false);
        let b2 = g.leaf(Tensor::zeros(vec![3]), false);
        let y = ffn_sublayer(&mut g, xv, w1v, b1, w2v, b2, 1.0, false, &mut rng()).unwrap();
        // hand-rolled reference
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = 0.0;
                for h in 0..5 {
                    let mut pre = 0.0;
                    for c in 0..3 {
                        pre += x.at2(i, c) * w1.at2(c, h);
                    }
                    acc += pre.max(0.0) * w2.at2(h, j);
                }
                assert!((g.value(y).at2(i, j) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ffn_is_position_wise() {
        let mut r = rng();
        let mut g = Graph::<f64>::new();
        let x = Tensor::randn(vec![3, 2], 1.0, &mut r);
        let mut x2 = x.clone();
        x2.data_mut()[2] += 1.0; // perturb position 1
        let w1 = g.leaf(Tensor::randn(vec![2, 4], 1.0, &mut r), false);
        let b1 = g.leaf(Tensor::zeros(vec![4]), false);
        let w2 = g.leaf(Tensor::randn(vec![4, 2], 1.0, &mut r), false);
        let b2 = g.leaf(Tensor::zeros(vec![2]), false);
        let xv = g.leaf(x, false);
        let x2v = g.leaf(x2, false);
        let y = ffn_sublayer(&mut g, xv, w1, b1, w2, b2, 1.0, false, &mut rng()).unwrap();
        let y2 = ffn_sublayer(&mut g, x2v, w1, b1, w2, b2, 1.0, false, &mut rng()).unwrap();
        for t in [0usize, 2] {
            for j in 0..2 {
                assert_eq!(g.value(y).at2(t, j), g.value(y2).at2(t, j));
            }
        }
        let moved: f64 = (0..2)
            .map(|j| (g.value(y).at2(1, j) - g.value(y2).at2(1, j)).abs())
            .sum();
        assert!(moved > 0.0);
    }

    fn conv_filters(
        g: &mut Graph<f64>,
        k: usize,
        d: usize,
        r: &mut StdRng,
    ) -> (Var, Var, Var, Var) {
        let w = g.leaf(Tensor::randn(vec![k * d, d], 0.7, r), false);
        let bw = g.leaf(Tensor::zeros(vec![d]), false);
        let v = g.leaf(Tensor::randn(vec![k * d, d], 0.7, r), false);
        let bv = g.leaf(Tensor::zeros(vec![d]), false);
        (w, bw, v, bv)
    }

    #[test]
    fn glu_gate_closed_and_half_open() {
        let mut r = rng();
        let mut g = Graph::<f64>::new();
        let d = 2;
        let x = g.leaf(Tensor::randn(vec![3, d], 1.0, &mut r), false);
        let w = g.leaf(Tensor::randn(vec![3 * d, d], 0.7, &mut r), false);
        let bw = g.leaf(Tensor::zeros(vec![d]), false);
        // gate path forced far negative: output ~ 0
        let v0 = g.leaf(Tensor::zeros(vec![3 * d, d]), false);
        let bneg = g.leaf(Tensor::filled(vec![d], -50.0), false);
        let y = glu_conv_sublayer(&mut g, x, w, bw, v0, bneg, 3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-10));
        // gate preactivation zero: output = 0.5 * (X * W)
        let bz = g.leaf(Tensor::zeros(vec![d]), false);
        let y = glu_conv_sublayer(&mut g, x, w, bw, v0, bz, 3).unwrap();
        let lin = g.conv1d_same(x, w, 3).unwrap();
        for (a, l) in g.value(y).data().iter().zip(g.value(lin).data()) {
            assert!((a - 0.5 * l).abs() < 1e-12);
        }
    }

    #[test]
    fn glu_matches_sliding_window_oracle() {
        let mut r = rng();
        let (n, d, k) = (4usize, 2usize, 3usize);
        let x = Tensor::randn(vec![n, d], 1.0, &mut r);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), false);
        let (w, bw, v, bv) = conv_filters(&mut g, k, d, &mut r);
        let y = glu_conv_sublayer(&mut g, xv, w, bw, v, bv, k).unwrap();
        let wt = g.value(w).clone();
        let vt = g.value(v).clone();
        // explicit sliding-window oracle
        let conv_at = |f: &Tensor<f64>, t: usize, j: usize| {
            let mut s = 0.0;
            for o in 0..k {
                let src = t as isize + o as isize - 1;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for c in 0..d {
                    s += x.at2(src as usize, c) * f.at2(o * d + c, j);
                }
            }
            s
        };
        for t in 0..n {
            for j in 0..d {
                let lin = conv_at(&wt, t, j);
                let gate = 1.0 / (1.0 + (-conv_at(&vt, t, j)).exp());
                assert!((g.value(y).at2(t, j) - lin * gate).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn glu_receptive_field_is_k() {
        // with k=3, output position 0 must not depend on input position 2
        let mut r = rng();
        let mut g = Graph::<f64>::new();
        let d = 2;
        let x = Tensor::randn(vec![4, d], 1.0, &mut r);
        let mut x2 = x.clone();
        x2.data_mut()[2 * d] += 1.0;
        let (w, bw, v, bv) = conv_filters(&mut g, 3, d, &mut r);
        let xv = g.leaf(x, false);
        let x2v = g.leaf(x2, false);
        let y = glu_conv_sublayer(&mut g, xv, w, bw, v, bv, 3).unwrap();
        let y2 = glu_conv_sublayer(&mut g, x2v, w, bw, v, bv, 3).unwrap();
        for j in 0..d {
            assert_eq!(g.value(y).at2(0, j), g.value(y2).at2(0, j));
            assert!(g.value(y).at2(1, j) != g.value(y2).at2(1, j));
        }
    }

    fn lstm_params(g: &mut Graph<f64>, d: usize, r: &mut StdRng) -> LstmDirection {
        LstmDirection {
            wx: g.leaf(Tensor::randn(vec![d, 4 * d], 0.6, r), false),
            wh: g.leaf(Tensor::randn(vec![d, 4 * d], 0.6, r), false),
            b: g.leaf(Tensor::zeros(vec![4 * d]), false),
        }
    }

    #[test]
    fn bilstm_zero_weights_output_zero() {
        let mut g = Graph::<f64>::new();
        let d = 2;
        let x = g.leaf(Tensor::filled(vec![3, d], 1.0), false);
        let zero = LstmDirection {
            wx: g.leaf(Tensor::zeros(vec![d, 4 * d]), false),
            wh: g.leaf(Tensor::zeros(vec![d, 4 * d]), false),
            b: g.leaf(Tensor::zeros(vec![4 * d]), false),
        };
        let y = bilstm_sublayer(&mut g, x, &zero, &zero).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let mut r = rng();
        let d = 2;
        let x = Tensor::randn(vec![3, d], 1.0, &mut r);
        let rev_rows: Vec<Vec<f64>> = (0..3)
            .rev()
            .map(|t| x.data()[t * d..(t + 1) * d].to_vec())
            .collect();
        let xrev = Tensor::from_rows(&rev_rows).unwrap();

        let mut g = Graph::<f64>::new();
        let p = lstm_params(&mut g, d, &mut r);
        let zero = LstmDirection {
            wx: g.leaf(Tensor::zeros(vec![d, 4 * d]), false),
            wh: g.leaf(Tensor::zeros(vec![d, 4 * d]), false),
            b: g.leaf(Tensor::zeros(vec![4 * d]), false),
        };
        let xv = g.leaf(x, false);
        let xrv = g.leaf(xrev, false);
        // backward-only pass over x vs forward-only pass over reversed x
        let yb = bilstm_sublayer(&mut g, xv, &zero, &p).unwrap();
        let yf = bilstm_sublayer(&mut g, xrv, &p, &zero).unwrap();
        for t in 0..3 {
            for j in 0..d {
                let a = g.value(yb).at2(t, j);
                let b = g.value(yf).at2(2 - t, j);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilstm_matches_hand_stepped_recurrence() {
        let mut r = rng();
        let d = 2;
        let x = Tensor::randn(vec![2, d], 1.0, &mut r);
        let mut g = Graph::<f64>::new();
        let fwd = lstm_params(&mut g, d, &mut r);
        let bwd = lstm_params(&mut g, d, &mut r);
        let xv = g.leaf(x.clone(), false);
        let y = bilstm_sublayer(&mut g, xv, &fwd, &bwd).unwrap();

        // scripted single-step recurrence oracle
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |x_row: &[f64],
                    h: &[f64],
                    c: &[f64],
                    wx: &Tensor<f64>,
                    wh: &Tensor<f64>| {
            let mut gates = vec![0.0; 4 * d];
            for j in 0..4 * d {
                for q in 0..d {
                    gates[j] += x_row[q] * wx.at2(q, j) + h[q] * wh.at2(q, j);
                }
            }
            let mut nh = vec![0.0; d];
            let mut nc = vec![0.0; d];
            for q in 0..d {
                let i = sig(gates[q]);
                let f = sig(gates[d + q]);
                let gg = gates[2 * d + q].tanh();
                let o = sig(gates[3 * d + q]);
                nc[q] = f * c[q] + i * gg;
                nh[q] = o * nc[q].tanh();
            }
            (nh, nc)
        };
        let wxf = g.value(fwd.wx).clone();
        let whf = g.value(fwd.wh).clone();
        let wxb = g.value(bwd.wx).clone();
        let whb = g.value(bwd.wh).clone();
        let x0 = &x.data()[0..d];
        let x1 = &x.data()[d..2 * d];
        let (hf0, cf0) = step(x0, &[0.0; 2], &[0.0; 2], &wxf, &whf);
        let (hf1, _) = step(x1, &hf0, &cf0, &wxf, &whf);
        let (hb1, cb1) = step(x1, &[0.0; 2], &[0.0; 2], &wxb, &whb);
        let (hb0, _) = step(x0, &hb1, &cb1, &wxb, &whb);
        for j in 0..d {
            assert!((g.value(y).at2(0, j) - (hf0[j] + hb0[j])).abs() < 1e-6);
            assert!((g.value(y).at2(1, j) - (hf1[j] + hb1[j])).abs() < 1e-6);
        }
    }

    #[test]
    fn bilstm_output_depends_on_whole_sequence() {
        let mut r = rng();
        let d = 2;
        let x = Tensor::randn(vec![4, d], 1.0, &mut r);
        let mut x2 = x.clone();
        x2.data_mut()[3 * d] += 1.0; // perturb last position
        let mut g = Graph::<f64>::new();
        let fwd = lstm_params(&mut g, d, &mut r);
        let bwd = lstm_params(&mut g, d, &mut r);
        let xv = g.leaf(x, false);
        let x2v = g.leaf(x2, false);
        let y = bilstm_sublayer(&mut g, xv, &fwd, &bwd).unwrap();
        let y2 = bilstm_sublayer(&mut g, x2v, &fwd, &bwd).unwrap();
        // even position 0 must move (through the backward direction)
        let moved: f64 = (0..d)
            .map(|j| (g.value(y).at2(0, j) - g.value(y2).at2(0, j)).abs())
            .sum();
        assert!(moved > 1e-9);
    }
}
