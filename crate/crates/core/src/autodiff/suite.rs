//! Ready-made finite-difference checks: one per operator on random
//! inputs, and one of a full network's deeply supervised loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, gradcheck_sampled, BatchNormState, GradcheckReport, Mode, Parameter, Tape, Tensor, Var};
use crate::error::Result;
use crate::loss::{total_loss, LossSpec};
use crate::model::{FusionMode, Model, ModelConfig};

pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
/// Large step for the operator checks: most are linear or smooth, so
/// roundoff dominates truncation error.
pub const OP_EPS: f64 = 1e-4;
/// Smaller step for the network, whose ReLU and max-pool kinks a large step
/// can straddle.
pub const MODEL_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradcheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in [0.5, 1.5] with random sign, so no coordinate's gradient
/// is scaled towards zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn p(name: &str, t: Tensor) -> Parameter {
    Parameter::new(name, t)
}

/// Projects an output onto fixed random weights so every element of the
/// op's output contributes to the checked scalar.
fn projected(
    rng: &mut ChaCha8Rng,
    out_len: usize,
    mut op: impl FnMut(&mut Tape, &[Var]) -> Result<Var>,
) -> impl FnMut(&mut Tape, &[Var]) -> Result<Var> {
    let w = away_from_zero(rng, &[out_len]).data().to_vec();
    move |t, v| {
        let y = op(t, v)?;
        t.dot(y, w.clone())
    }
}

/// Checks every differentiable operator on random inputs no larger than
/// 16×16 at tolerance [`OP_TOL`].
pub fn op_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, mut params: Vec<Parameter>, f: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let report = gradcheck(|t, v| f(t, v), &mut params, OP_EPS, OP_TOL)?;
        out.push(NamedReport {
            name: name.to_string(),
            report,
        });
        Ok(())
    };

    let params = vec![
        p("x", uniform(&mut rng, &[2, 3, 7, 6])),
        p("w", uniform(&mut rng, &[4, 3, 3, 3])),
        p("b", uniform(&mut rng, &[4])),
    ];
    let mut f = projected(&mut rng, 2 * 4 * 4 * 3, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    run("conv2d", params, &mut f)?;

    let params = vec![p("x", uniform(&mut rng, &[2, 2, 16, 16]))];
    let mut f = projected(&mut rng, 2 * 2 * 8 * 8, |t, v| t.maxpool2d(v[0], 2, 2));
    run("maxpool2d", params, &mut f)?;

    let bn_params = || {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xb4);
        vec![
            p("x", uniform(&mut r, &[3, 2, 5, 5])),
            p("gamma", away_from_zero(&mut r, &[2])),
            p("beta", uniform(&mut r, &[2])),
        ]
    };
    let mut state = BatchNormState::new(2);
    let mut f = projected(&mut rng, 150, move |t, v| t.batchnorm2d(v[0], v[1], v[2], &mut state, Mode::Train));
    run("batchnorm2d_train", bn_params(), &mut f)?;
    let mut eval = BatchNormState::new(2);
    eval.running_mean = vec![0.2, -0.1];
    eval.running_var = vec![0.7, 1.3];
    eval.tracked = 1;
    let mut f = projected(&mut rng, 150, move |t, v| t.batchnorm2d(v[0], v[1], v[2], &mut eval, Mode::Eval));
    run("batchnorm2d_eval", bn_params(), &mut f)?;

    let params = vec![p("x", uniform(&mut rng, &[2, 2, 4, 3]))];
    let mut f = projected(&mut rng, 2 * 2 * 16 * 11, |t, v| t.upsample_bilinear(v[0], 16, 11));
    run("upsample_bilinear", params, &mut f)?;

    let params = vec![p("x", Tensor::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-6.0..6.0)))];
    let mut f = projected(&mut rng, 72, |t, v| Ok(t.sigmoid(v[0])));
    run("sigmoid", params, &mut f)?;

    let params = vec![p("x", uniform(&mut rng, &[1, 2, 6, 6]))];
    let mut f = projected(&mut rng, 72, |t, v| Ok(t.relu(v[0])));
    run("relu", params, &mut f)?;

    let params = vec![p("a", uniform(&mut rng, &[2, 1, 5, 5])), p("b", uniform(&mut rng, &[2, 1, 5, 5]))];
    let mut f = projected(&mut rng, 50, |t, v| t.add(v[0], v[1]));
    run("add", params, &mut f)?;

    let params = vec![p("x", uniform(&mut rng, &[3, 4]))];
    let mut f = projected(&mut rng, 12, |t, v| Ok(t.scale(v[0], -1.7)));
    run("scale", params, &mut f)?;

    let params = vec![p("x", uniform(&mut rng, &[3, 4]))];
    run("sum", params, &mut |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])))?;

    let params = vec![p("x", uniform(&mut rng, &[3, 4]))];
    run("mean", params, &mut |t: &mut Tape, v: &[Var]| Ok(t.mean(v[0])))?;

    let params = vec![p("x", uniform(&mut rng, &[10]))];
    let mut f = projected(&mut rng, 10, |_, v| Ok(v[0]));
    run("dot", params, &mut f)?;

    let params = vec![
        p("a", uniform(&mut rng, &[2, 1, 4, 4])),
        p("b", uniform(&mut rng, &[2, 1, 4, 4])),
        p("c", uniform(&mut rng, &[2, 1, 4, 4])),
        p("h", uniform(&mut rng, &[3])),
        p("bias", uniform(&mut rng, &[1])),
    ];
    let mut f = projected(&mut rng, 32, |t, v| t.weighted_sum(&v[..3], v[3], v[4]));
    run("weighted_sum", params, &mut f)?;

    let label = Tensor::from_fn(&[2, 1, 4, 4], |_| f64::from(u8::from(rng.random_bool(0.4))));
    let beta = rng.random_range(0.1..0.9);
    let params = vec![p("prob", Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.1..0.9)))];
    run("balanced_bce", params, &mut |t: &mut Tape, v: &[Var]| t.balanced_bce(v[0], &label, beta))?;

    Ok(out)
}

/// Finite-difference check of the summed side-output loss of a network
/// built from `cfg` on a random `2 × 3 × hw × hw` batch, sampling at most
/// `max_per_param` coordinates per parameter.
pub fn model_loss_check(cfg: &ModelConfig, hw: usize, max_per_param: usize, seed: u64) -> Result<NamedReport> {
    let model = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(&[2, 3, hw, hw], |_| rng.random_range(0.0..1.0));
    let label = Tensor::from_fn(&[2, 1, hw, hw], |_| f64::from(u8::from(rng.random_bool(0.35))));
    let spec = LossSpec {
        beta: 0.65,
        include_fused: cfg.fusion_mode == FusionMode::Hnn,
    };
    let mut params = model.params().to_vec();
    let mut bn = model.bn_states().to_vec();
    let report = gradcheck_sampled(
        |t, vars| {
            let x = t.constant(input.clone());
            let out = model.forward_with(t, vars, x, Mode::Train, &mut bn)?;
            Ok(total_loss(t, &out, &label, &spec)?.total)
        },
        &mut params,
        MODEL_EPS,
        MODEL_TOL,
        max_per_param,
    )?;
    Ok(NamedReport {
        name: format!("{}_total_loss_m{}", cfg.fusion_mode, cfg.num_stages),
        report,
    })
}
