//! Finite-difference gradient checks.
//!
//! Analytic gradients from [`Graph::backward`] are compared with central
//! differences `(f(x+h) − f(x−h)) / 2h` at `h = 1e-5`, in `f64`. Non-scalar
//! outputs are reduced with fixed random weights, `Σ R ⊙ y`, so every
//! output element carries a distinct upstream gradient.
//!
//! Per element the error is `|a − n| / max(|a|, |n|, 1e-3 · max|n|)`, where
//! `max|n|` runs over every probed element of every input of the check. The
//! floor keeps entries whose true gradient is tiny relative to the rest, or
//! exactly zero by symmetry, from turning cancellation noise into large
//! relative errors.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Var};
use crate::dataset::gather_clip;
use crate::encoder::TransformerBlock;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::total_loss_on_graph;
use crate::ops::ConvSpec;
use crate::params::{Bound, ParamStore};
use crate::synth::{generate, SyntheticSpec};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Relative floor of the error denominator, as a fraction of `max|n|`.
pub const FLOOR_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Elements compared.
    pub checked: usize,
    /// Probes dropped because they straddle a kink.
    pub skipped: usize,
}

/// Builds a scalar or tensor output from leaves recorded for the inputs.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Maximum of the floored relative error between two gradient arrays.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = FLOOR_FRACTION * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let d = (a - n).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(n.abs()).max(floor)
            }
        })
        .fold(0.0, f64::max)
}

/// Compare analytic and numeric gradients of `build` for every input.
///
/// With `sample = Some(k)`, at most `k` elements per input are probed,
/// chosen with `seed`.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    check_inner(inputs, build, sample, seed, false)
}

/// Like [`check_gradients`] for piecewise-smooth functions such as ReLU
/// networks. Each probe also takes the central difference at `h/2` and
/// Richardson-corrected one-sided slopes from both sides; on a smooth
/// stretch all of these agree to `O(h²)`, so a disagreement beyond
/// [`KINK_SCREEN`] means a kink lies within `h` of the probe. Such probes are
/// counted in `skipped` and replaced by another element of the same input.
pub fn check_gradients_screened(
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradReport> {
    check_inner(inputs, build, sample, seed, true)
}

/// Relative disagreement between the `h` and `h/2` differences that marks a kink.
pub const KINK_SCREEN: f64 = 1e-6;
/// Absolute screen allowance as a multiple of `|f|`; rounding alone moves a
/// central difference by about `ε·|f|/h ≈ 2e-11·|f|`.
const ROUNDING_ALLOWANCE: f64 = 1e-9;
/// Screened probes tried per requested sample before giving up on an input.
const SCREEN_ATTEMPTS: usize = 4;

fn check_inner(
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    sample: Option<usize>,
    seed: u64,
    screen: bool,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a0d);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut g, &vars)?;
    let out_len = g.value(out).len();
    let weights: Option<Tensor<f64>> = (out_len != 1).then(|| {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..out_len).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(g.shape(out).to_vec(), data).expect("output shape")
    });
    let reduce = |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        match &weights {
            Some(w) => {
                let w = g.constant(w.clone());
                let p = g.mul(out, w)?;
                Ok(g.sum(p))
            }
            None => Ok(out),
        }
    };
    let loss = reduce(&mut g, out)?;
    g.backward(loss, false)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        Ok(g.value(loss).data()[0])
    };

    let f0 = if screen { eval(inputs)? } else { 0.0 };
    let mut work = inputs.to_vec();
    // f(x + h), f(x − h) for element j of input i.
    let mut pair = |i: usize, j: usize, h: f64| -> Result<(f64, f64)> {
        let x0 = inputs[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = x0 - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = x0;
        Ok((fp, fm))
    };
    let allowance = ROUNDING_ALLOWANCE * f0.abs();
    let disagree = |x: f64, y: f64| (x - y).abs() > KINK_SCREEN * x.abs().max(y.abs()) + allowance;
    let (mut a, mut num) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let want = sample.map_or(n, |k| k.min(n));
        // Random order without replacement; screened probes fall through to the next.
        let order = index::sample(&mut rng, n, n).into_vec();
        let mut taken = 0;
        for (tries, &j) in order.iter().enumerate() {
            if taken == want || (screen && tries == SCREEN_ATTEMPTS * want) {
                break;
            }
            let h = FD_STEP;
            let (fp, fm) = pair(i, j, h)?;
            let d = (fp - fm) / (2.0 * h);
            if screen {
                let (fp2, fm2) = pair(i, j, h / 2.0)?;
                let d2 = (fp2 - fm2) / h;
                // One-sided slopes, Richardson-corrected to O(h²).
                let right = (4.0 * (fp2 - f0) - (fp - f0)) / h;
                let left = (4.0 * (f0 - fm2) - (f0 - fm)) / h;
                if disagree(d, d2) || disagree(right, left) {
                    skipped += 1;
                    continue;
                }
            }
            num.push(d);
            a.push(analytic[i][j]);
            taken += 1;
        }
    }
    let (worst, checked) = (relative_error(&a, &num), a.len());
    Ok(GradReport {
        max_rel_error: worst,
        checked,
        skipped,
    })
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..shape.iter().product()).map(|_| n.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let u = Uniform::new(lo, hi).expect("valid range");
    let data = (0..shape.iter().product()).map(|_| u.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Normal entries pushed at least `gap` away from zero, for kinked activations.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let t = normal_tensor(rng, shape);
    let data = t.data().iter().map(|&v| v.signum() * (v.abs() + gap)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// One named finite-difference check, run once per seed.
pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> Result<GradReport>,
}

fn conv_case(seed: u64, x: &[usize], spec: ConvSpec) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        normal_tensor(&mut rng, x),
        normal_tensor(&mut rng, &spec.weight_shape()),
        normal_tensor(&mut rng, &[spec.out_channels]),
    ];
    check_gradients(&inputs, &|g, v| g.conv3d(v[0], v[1], Some(v[2]), &spec), None, seed)
}

fn unary(seed: u64, shape: &[usize], positive: bool, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = if positive {
        uniform_tensor(&mut rng, shape, 0.1, 1.0)
    } else {
        away_from_zero(&mut rng, shape, 0.05)
    };
    check_gradients(&[x], &|g, v| op(g, v[0]), None, seed)
}

fn loss_case(seed: u64, which: fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Result<Var>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = uniform_tensor(&mut rng, &[6, 7], 0.05, 1.0);
    let target = uniform_tensor(&mut rng, &[6, 7], 0.0, 1.0);
    check_gradients(&[s], &|g, v| which(g, v[0], &target), None, seed)
}

fn block_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, &mut rng, "block", 8, 2, 2);
    // Perturb the default LayerNorm affine so its gradients are generic.
    for t in store.tensors_mut() {
        let noise = normal_tensor(&mut rng, t.shape());
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
    let mut inputs = vec![normal_tensor(&mut rng, &[2, 2, 4, 8])];
    inputs.extend(store.tensors().iter().cloned());
    check_gradients(
        &inputs,
        &|g, v| block.forward(g, &Bound::from_vars(v[1..].to_vec()), v[0], [1, 2, 2]),
        Some(12),
        seed,
    )
}

/// Every primitive, the composed losses and one transformer block.
pub fn suites() -> Vec<Suite> {
    macro_rules! suite {
        ($name:expr, $run:expr) => {
            Suite {
                name: $name,
                tolerance: PRIMITIVE_TOLERANCE,
                run: $run,
            }
        };
    }
    vec![
        suite!("conv3d", |s| conv_case(s, &[1, 2, 3, 5, 5], ConvSpec::new(2, 4, [2, 3, 3]))),
        suite!("conv3d_strided_padded", |s| conv_case(
            s,
            &[2, 3, 4, 5, 6],
            ConvSpec::new(3, 2, [2, 3, 3]).stride([2, 1, 2]).padding([0, 1, 1])
        )),
        suite!("conv3d_depthwise", |s| conv_case(
            s,
            &[1, 3, 4, 4, 4],
            ConvSpec::new(3, 3, [2, 3, 3]).stride([2, 1, 1]).padding([0, 1, 1]).groups(3)
        )),
        suite!("upsample_spatial", |s| unary(s, &[1, 2, 2, 3, 2], false, |g, x| g.upsample_spatial(x, 2))),
        suite!("avg_pool_temporal", |s| unary(s, &[1, 2, 4, 2, 3], false, |g, x| g.avg_pool_temporal(x, 2))),
        suite!("linear", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![
                normal_tensor(&mut rng, &[3, 2, 5]),
                normal_tensor(&mut rng, &[4, 5]),
                normal_tensor(&mut rng, &[4]),
            ];
            check_gradients(&inputs, &|g, v| g.linear(v[0], v[1], Some(v[2])), None, s)
        }),
        suite!("bmm", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![normal_tensor(&mut rng, &[2, 3, 4]), normal_tensor(&mut rng, &[2, 4, 5])];
            check_gradients(&inputs, &|g, v| g.bmm(v[0], v[1], false), None, s)
        }),
        suite!("bmm_transposed", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![normal_tensor(&mut rng, &[2, 3, 4]), normal_tensor(&mut rng, &[2, 5, 4])];
            check_gradients(&inputs, &|g, v| g.bmm(v[0], v[1], true), None, s)
        }),
        suite!("softmax_last_axis", |s| unary(s, &[3, 5], false, |g, x| g.softmax(x, 1))),
        suite!("softmax_inner_axis", |s| unary(s, &[2, 4, 3], false, |g, x| g.softmax(x, 1))),
        suite!("layer_norm", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![
                normal_tensor(&mut rng, &[4, 6]),
                normal_tensor(&mut rng, &[6]),
                normal_tensor(&mut rng, &[6]),
            ];
            check_gradients(&inputs, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), None, s)
        }),
        suite!("relu", |s| unary(s, &[4, 5], false, |g, x| Ok(g.relu(x)))),
        suite!("sigmoid", |s| unary(s, &[4, 5], false, |g, x| Ok(g.sigmoid(x)))),
        suite!("gelu", |s| unary(s, &[4, 5], false, |g, x| Ok(g.gelu(x)))),
        suite!("add_mul", |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![normal_tensor(&mut rng, &[3, 4]), normal_tensor(&mut rng, &[3, 4])];
            check_gradients(
                &inputs,
                &|g, v| {
                    let p = g.mul(v[0], v[1])?;
                    let q = g.add(p, v[0])?;
                    Ok(g.scale(q, 1.7))
                },
                None,
                s,
            )
        }),
        suite!("sum", |s| unary(s, &[3, 4], false, |g, x| Ok(g.sum(x)))),
        suite!("reshape_permute", |s| unary(s, &[2, 3, 4], false, |g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            g.reshape(y, &[4, 6])
        })),
        suite!("cc_loss", |s| loss_case(s, |g, x, t| g.cc_loss(x, t, true))),
        suite!("kl_loss", |s| loss_case(s, |g, x, t| g.kl_loss(x, t))),
        suite!("total_loss", |s| loss_case(s, |g, x, t| Ok(total_loss_on_graph(g, x, t, true)?.0))),
        suite!("transformer_block", block_case),
    ]
}

/// Parameters and clip input of the full toy model against the training loss.
pub fn model_check(seed: u64, per_tensor: usize) -> Result<GradReport> {
    let config = ModelConfig::toy();
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    // Zero biases put ReLU inputs fed by all-zero patches exactly on the kink,
    // where the subgradient and a central difference disagree.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let biases: Vec<_> = model
        .params
        .names()
        .iter()
        .filter(|n| n.ends_with(".bias"))
        .map(|n| model.params.find(n).expect("listed name"))
        .collect();
    for id in biases {
        let noise = normal_tensor(&mut rng, model.params.get_mut(id).shape());
        for (b, n) in model.params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *b += 0.1 * n;
        }
    }
    let (data, _) = generate(&SyntheticSpec {
        videos: 1,
        frames: config.clip_len(),
        seed,
        ..SyntheticSpec::toy()
    })?;
    let video = &data.videos[0];
    let t = config.clip_len();
    let clip: Tensor<f64> = gather_clip(&video.frames, &(0..t).collect::<Vec<_>>())?;
    let target = video.target::<f64>(t - 1);
    let mut inputs = vec![clip];
    inputs.extend(model.params.tensors().iter().cloned());
    check_gradients_screened(
        &inputs,
        &|g, v| {
            let fwd = model.forward_bound(g, Bound::from_vars(v[1..].to_vec()), v[0])?;
            Ok(total_loss_on_graph(g, fwd.saliency, &target, false)?.0)
        },
        Some(per_tensor),
        seed,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn run_suite(suite: &Suite, seeds: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome {
        name: suite.name.to_string(),
        seeds: seeds as usize,
        checked: 0,
        max_rel_error: 0.0,
        tolerance: suite.tolerance,
    };
    for seed in 0..seeds {
        let r = (suite.run)(seed).map_err(|e| match e {
            Error::Degenerate { op, detail } => Error::degenerate(op, format!("{} seed {seed}: {detail}", suite.name)),
            other => other,
        })?;
        out.checked += r.checked;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
    }
    Ok(out)
}

/// All primitive suites over `seeds` seeds plus the end-to-end model check.
pub fn run_all(seeds: u64) -> Result<Vec<SuiteOutcome>> {
    let mut results = suites()
        .iter()
        .map(|s| run_suite(s, seeds))
        .collect::<Result<Vec<_>>>()?;
    let r = model_check(0, 2)?;
    results.push(SuiteOutcome {
        name: "toy_model_end_to_end".into(),
        seeds: 1,
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        // 1e-9 discrepancy on an entry far below the tensor scale is floored
        let e = relative_error(&[1.0, 1e-9], &[1.0, 0.0]);
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Scale by 2 but claim the output is just a reshaped input: the
        // analytic path differs from the function evaluated numerically.
        let x = Tensor::from_f64(vec![3], &[0.3, -0.2, 0.5]).unwrap();
        let r = check_gradients(
            &[x],
            &|g, v| {
                if g.value(v[0]).requires_grad {
                    Ok(g.scale(v[0], 1.0))
                } else {
                    Ok(g.scale(v[0], 2.0))
                }
            },
            None,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
