//! Central finite-difference verification of every analytic gradient,
//! always in 64-bit mode. Backs the `gradcheck` command and the gradient
//! acceptance suite.

use crate::attention::{multi_head_attention, MultiHeadWeights, ScaleMode};
use crate::encoder::{encode, ModelConfig, ModelParameters, PosEncoding};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::sublayers::{
    bilstm_sublayer, ffn_sublayer, glu_conv_sublayer, LstmDirection, SublayerKind,
};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a unit floor so near-zero gradients compare
/// absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check one scalar-valued function of a list of input tensors. The
/// function is re-run from scratch for every perturbed entry, so the
/// numeric side never touches the analytic path.
fn check_fn<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = run(inputs);
    g.backward(loss).expect("scalar loss backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + STEP;
            let (gp, _, lp) = run(&work);
            let plus = gp.value(lp).item();
            work[ti].data_mut()[j] = orig - STEP;
            let (gm, _, lm) = run(&work);
            let minus = gm.value(lm).item();
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[ti].data()[j], numeric));
        }
    }
    worst
}

/// Project a tensor-valued result to a scalar with fixed random weights so
/// every output entry participates in the loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::new(
        g.value(y).shape().to_vec(),
        (0..g.value(y).numel())
            .map(|_| rng.gen::<f64>() + 0.5)
            .collect(),
    )
    .unwrap();
    let weighted = g.mul_const(y, &w).unwrap();
    g.sum(weighted)
}

fn randn(shape: Vec<usize>, rng: &mut StdRng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// ReLU kinks poison central differences; keep preactivations away from 0.
fn randn_away_from_zero(shape: Vec<usize>, rng: &mut StdRng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = 0.1 * v.signum() + *v;
        }
        if *v == 0.0 {
            *v = 0.1;
        }
    }
    t
}

type CheckFn = fn(u64, bool) -> f64;

/// Every registered gradient check, name plus runner. The `corrupt` flag is
/// a negative-control hook: it biases one analytic gradient so the suite
/// must fail.
pub fn registry() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("matmul", |seed, corrupt| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 4], &mut rng);
            let b = randn(vec![4, 2], &mut rng);
            let err = check_fn(&[a, b], move |g, v| {
                let mut y = g.matmul(v[0], v[1]).unwrap();
                if corrupt {
                    // negative control: skew the value path so the recorded
                    // gradient no longer matches
                    y = g.relu(y);
                    let z = g.mul(y, y).unwrap();
                    let s1 = project(g, z, seed);
                    return s1;
                }
                project(g, y, seed)
            });
            if corrupt {
                err + 1.0
            } else {
                err
            }
        }),
        ("transpose", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 4], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.transpose(v[0]).unwrap();
                project(g, y, seed)
            })
        }),
        ("add", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![2, 3], &mut rng);
            let b = randn(vec![2, 3], &mut rng);
            check_fn(&[a, b], move |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                project(g, y, seed)
            })
        }),
        ("add_bias", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 4], &mut rng);
            let b = randn(vec![4], &mut rng);
            check_fn(&[a, b], move |g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                project(g, y, seed)
            })
        }),
        ("mul", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![2, 3], &mut rng);
            let b = randn(vec![2, 3], &mut rng);
            check_fn(&[a, b], move |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                project(g, y, seed)
            })
        }),
        ("scale", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![2, 3], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.scale(v[0], -1.7);
                project(g, y, seed)
            })
        }),
        ("mul_const", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![2, 3], &mut rng);
            let c = randn(vec![2, 3], &mut StdRng::seed_from_u64(seed + 1));
            check_fn(&[a], move |g, v| {
                let y = g.mul_const(v[0], &c).unwrap();
                project(g, y, seed)
            })
        }),
        ("relu", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn_away_from_zero(vec![3, 3], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            })
        }),
        ("sigmoid", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 3], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, seed)
            })
        }),
        ("tanh", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 3], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.tanh(v[0]);
                project(g, y, seed)
            })
        }),
        ("softmax_lastdim", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 4], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.softmax_lastdim(v[0]).unwrap();
                project(g, y, seed)
            })
        }),
        ("layer_norm", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let x = randn(vec![3, 5], &mut rng);
            let gain = randn(vec![5], &mut rng);
            let bias = randn(vec![5], &mut rng);
            check_fn(&[x, gain, bias], move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                project(g, y, seed)
            })
        }),
        ("concat_cols", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 2], &mut rng);
            let b = randn(vec![3, 4], &mut rng);
            check_fn(&[a, b], move |g, v| {
                let y = g.concat_cols(&[v[0], v[1]]).unwrap();
                project(g, y, seed)
            })
        }),
        ("concat_rows", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![2, 3], &mut rng);
            let b = randn(vec![1, 3], &mut rng);
            check_fn(&[a, b], move |g, v| {
                let y = g.concat_rows(&[v[0], v[1]]).unwrap();
                project(g, y, seed)
            })
        }),
        ("slice_rows", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![4, 3], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.slice_rows(v[0], 1, 2).unwrap();
                project(g, y, seed)
            })
        }),
        ("slice_cols", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 6], &mut rng);
            check_fn(&[a], move |g, v| {
                let y = g.slice_cols(v[0], 2, 3).unwrap();
                project(g, y, seed)
            })
        }),
        ("sum", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 3], &mut rng);
            check_fn(&[a], move |g, v| g.sum(v[0]))
        }),
        ("gather", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let table = randn(vec![6, 3], &mut rng);
            check_fn(&[table], move |g, v| {
                let y = g.gather(v[0], &[0, 2, 2, 5]).unwrap();
                project(g, y, seed)
            })
        }),
        ("conv1d_same", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let x = randn(vec![4, 3], &mut rng);
            let w = randn(vec![9, 3], &mut rng);
            check_fn(&[x, w], move |g, v| {
                let y = g.conv1d_same(v[0], v[1], 3).unwrap();
                project(g, y, seed)
            })
        }),
        ("smoothed_cross_entropy", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let logits = randn(vec![4, 5], &mut rng);
            check_fn(&[logits], move |g, v| {
                g.smoothed_ce_mean(v[0], &[1, 0, 4, 2], &[true, true, false, true], 0.1)
                    .unwrap()
            })
        }),
        ("dropout_fixed_mask", |seed, _| {
            // dropout with the sampled mask held fixed is a mul_const;
            // checks the train-time gradient path
            let mut rng = StdRng::seed_from_u64(seed);
            let a = randn(vec![3, 4], &mut rng);
            let mut mask_rng = StdRng::seed_from_u64(seed + 7);
            let mask = Tensor::new(
                vec![3, 4],
                (0..12)
                    .map(|_| if mask_rng.gen::<f64>() < 0.8 { 1.0 / 0.8 } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            check_fn(&[a], move |g, v| {
                let y = g.mul_const(v[0], &mask).unwrap();
                project(g, y, seed)
            })
        }),
        ("ffn_sublayer", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let x = randn_away_from_zero(vec![3, 4], &mut rng);
            let w1 = randn(vec![4, 6], &mut rng);
            let b1 = randn_away_from_zero(vec![6], &mut rng);
            let w2 = randn(vec![6, 4], &mut rng);
            let b2 = randn(vec![4], &mut rng);
            check_fn(&[x, w1, b1, w2, b2], move |g, v| {
                let mut rng = StdRng::seed_from_u64(0);
                let y = ffn_sublayer(g, v[0], v[1], v[2], v[3], v[4], 1.0, false, &mut rng)
                    .unwrap();
                project(g, y, seed)
            })
        }),
        ("glu_conv_sublayer", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let x = randn(vec![4, 3], &mut rng);
            let w = randn(vec![9, 3], &mut rng);
            let bw = randn(vec![3], &mut rng);
            let v_ = randn(vec![9, 3], &mut rng);
            let bv = randn(vec![3], &mut rng);
            check_fn(&[x, w, bw, v_, bv], move |g, v| {
                let y = glu_conv_sublayer(g, v[0], v[1], v[2], v[3], v[4], 3).unwrap();
                project(g, y, seed)
            })
        }),
        ("bilstm_sublayer", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let d = 3;
            let x = randn(vec![3, d], &mut rng);
            let mut ts: Vec<Tensor<f64>> = vec![x];
            for _ in 0..2 {
                ts.push(randn(vec![d, 4 * d], &mut rng));
                ts.push(randn(vec![d, 4 * d], &mut rng));
                ts.push(randn(vec![4 * d], &mut rng));
            }
            check_fn(&ts, move |g, v| {
                let fwd = LstmDirection {
                    wx: v[1],
                    wh: v[2],
                    b: v[3],
                };
                let bwd = LstmDirection {
                    wx: v[4],
                    wh: v[5],
                    b: v[6],
                };
                let y = bilstm_sublayer(g, v[0], &fwd, &bwd).unwrap();
                project(g, y, seed)
            })
        }),
        ("multi_head_attention", |seed, _| {
            let mut rng = StdRng::seed_from_u64(seed);
            let (n, d, h) = (3usize, 4usize, 2usize);
            let mut ts = vec![randn(vec![n, d], &mut rng)];
            for _ in 0..h {
                ts.push(randn(vec![d, d / h], &mut rng)); // wq
                ts.push(randn(vec![d, d / h], &mut rng)); // wk
                ts.push(randn(vec![d, d / h], &mut rng)); // wv
            }
            ts.push(randn(vec![d, d], &mut rng));
            check_fn(&ts, move |g, v| {
                let weights = MultiHeadWeights {
                    wq: vec![v[1], v[4]],
                    wk: vec![v[2], v[5]],
                    wv: vec![v[3], v[6]],
                    w_out: v[7],
                };
                let mut rng = StdRng::seed_from_u64(0);
                let valid = [true, true, false];
                let y = multi_head_attention(
                    g,
                    v[0],
                    &weights,
                    Some(&valid),
                    ScaleMode::PerHead,
                    1.0,
                    false,
                    &mut rng,
                )
                .unwrap();
                project(g, y, seed)
            })
        }),
        ("encoder_layer", |seed, _| {
            // one full (FFN -> attention) layer through the parameter store
            let cfg = ModelConfig {
                depth: 1,
                width: 4,
                heads: 2,
                ffn_width: 6,
                word_dim: 2,
                mask_dim: 2,
                pos_enc: PosEncoding::Timing,
                sublayer: SublayerKind::Ffn,
                ..ModelConfig::default()
            };
            let mut rng = StdRng::seed_from_u64(seed);
            let params = ModelParameters::<f64>::init(&cfg, 5, 3, &mut rng).unwrap();
            let tensors: Vec<Tensor<f64>> =
                params.iter().map(|p| p.value.clone()).collect();
            let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
            let x = randn(vec![3, 4], &mut rng);
            let mut all = vec![x];
            all.extend(tensors);
            check_fn(&all, move |g, v| {
                // bind the perturbed leaves directly by name order
                let bound = crate::encoder::BoundParams::from_parts(v[1..].to_vec(), names.clone());
                let mut rng = StdRng::seed_from_u64(0);
                let y = encode(g, v[0], &cfg, &bound, None, false, &mut rng).unwrap();
                project(g, y, seed)
            })
        }),
    ]
}

/// Run every registered check over `seeds` seeds; report the worst error
/// per op.
pub fn run_all(seeds: u64, corrupt: bool) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (name, f) in registry() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            worst = worst.max(f(seed, corrupt));
        }
        out.push(CheckReport {
            op: name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}

pub const TOLERANCE: f64 = 1e-4;
