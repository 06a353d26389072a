//! Central finite-difference checks of tape gradients, in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Per-op tolerance on the maximum relative error.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Finite-difference step for per-op checks.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Which input coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// `count` coordinates drawn without replacement across all inputs.
    Sample { count: usize, seed: u64 },
}

/// One line of the `gradcheck` report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckRow {
    pub fn new(op: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            op: op.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.3e},{}",
            self.op,
            self.max_rel_err,
            if self.passed { "pass" } else { "fail" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between backward-pass gradients of the scalar built
/// by `build` and central differences with step `step`.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], build: F, step: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let flat: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match coords {
        Coords::All => flat,
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = sample(&mut rng, flat.len(), count.min(flat.len())).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| flat[k]).collect()
        }
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, j) in chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values whose channel-wise maxima are separated by much more than the step.
fn distinct_channels(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let mut data = vec![0.0; n * c * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let mut levels: Vec<f64> = (0..c).map(|k| k as f64 * 0.25).collect();
            for k in (1..c).rev() {
                levels.swap(k, rng.random_range(0..=k));
            }
            for k in 0..c {
                data[(b * c + k) * h * w + p] = levels[k] + rng.random_range(0.0..0.05);
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts a non-scalar output with a fixed random weight tensor so every
/// output entry contributes to the checked scalar.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(uniform(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks every differentiable tape op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let err = max_relative_error(
            &inputs,
            |t, v| {
                let out = build(t, v)?;
                if t.value(out).numel() == 1 {
                    Ok(out)
                } else {
                    weighted_sum(t, out, 17)
                }
            },
            FD_STEP,
            Coords::All,
        )?;
        rows.push(GradcheckRow::new(name, err, OP_TOLERANCE));
        Ok(())
    };

    run(
        "add",
        vec![uniform(&mut rng, &[1, 3, 4, 4]), uniform(&mut rng, &[1, 3, 1, 1])],
        &|t, v| t.add(v[0], v[1]),
    )?;
    run(
        "mul",
        vec![uniform(&mut rng, &[1, 3, 4, 4]), uniform(&mut rng, &[1, 1, 4, 4])],
        &|t, v| t.mul(v[0], v[1]),
    )?;
    run("scale", vec![uniform(&mut rng, &[2, 5])], &|t, v| Ok(t.scale(v[0], 0.7)))?;
    run(
        "leaky_relu",
        vec![away_from_zero(&mut rng, &[1, 2, 4, 4])],
        &|t, v| Ok(t.leaky_relu(v[0], 0.1)),
    )?;
    run("relu", vec![away_from_zero(&mut rng, &[3, 4])], &|t, v| Ok(t.relu(v[0])))?;
    run("sigmoid", vec![uniform(&mut rng, &[1, 2, 3, 3])], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("sum", vec![uniform(&mut rng, &[4, 3])], &|t, v| Ok(t.sum(v[0])))?;
    run(
        "mse",
        vec![uniform(&mut rng, &[1, 2, 3, 3]), uniform(&mut rng, &[1, 2, 3, 3])],
        &|t, v| t.mse(v[0], v[1]),
    )?;
    run(
        "conv2d",
        vec![
            uniform(&mut rng, &[1, 2, 5, 5]),
            uniform(&mut rng, &[3, 2, 3, 3]),
            uniform(&mut rng, &[3]),
        ],
        &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
    )?;
    run(
        "conv2d_stride2",
        vec![
            uniform(&mut rng, &[1, 2, 5, 5]),
            uniform(&mut rng, &[2, 2, 3, 3]),
            uniform(&mut rng, &[2]),
        ],
        &|t, v| t.conv2d(v[0], v[1], v[2], 2, 0),
    )?;
    run(
        "reflect_pad",
        vec![uniform(&mut rng, &[1, 2, 4, 5])],
        &|t, v| t.reflect_pad(v[0], [1, 2, 3, 1]),
    )?;
    run("global_avg_pool", vec![uniform(&mut rng, &[1, 3, 4, 4])], &|t, v| {
        t.global_avg_pool(v[0])
    })?;
    run("channel_mean", vec![uniform(&mut rng, &[1, 3, 4, 4])], &|t, v| t.channel_mean(v[0]))?;
    run(
        "channel_max",
        vec![distinct_channels(&mut rng, &[1, 4, 3, 3])],
        &|t, v| t.channel_max(v[0]),
    )?;
    run("bilinear_upsample", vec![uniform(&mut rng, &[1, 2, 3, 4])], &|t, v| t.upsample2(v[0]))?;
    run(
        "batch_norm",
        vec![
            uniform(&mut rng, &[1, 3, 4, 4]),
            uniform(&mut rng, &[3]),
            uniform(&mut rng, &[3]),
        ],
        &|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5),
    )?;
    run(
        "linear",
        vec![
            uniform(&mut rng, &[2, 5]),
            uniform(&mut rng, &[3, 5]),
            uniform(&mut rng, &[3]),
        ],
        &|t, v| t.linear(v[0], v[1], v[2]),
    )?;
    run(
        "concat_channels",
        vec![uniform(&mut rng, &[1, 2, 3, 3]), uniform(&mut rng, &[1, 1, 3, 3])],
        &|t, v| t.concat_channels(v[0], v[1]),
    )?;
    run("reshape", vec![uniform(&mut rng, &[1, 3, 1, 1])], &|t, v| t.reshape(v[0], &[1, 3]))?;
    run("roll", vec![uniform(&mut rng, &[1, 2, 3, 4])], &|t, v| t.roll(v[0], 3, -2))?;
    run(
        "composite_chain",
        vec![
            uniform(&mut rng, &[1, 2, 6, 6]),
            uniform(&mut rng, &[2, 2, 3, 3]),
            uniform(&mut rng, &[2]),
        ],
        &|t, v| {
            let p = t.reflect_pad(v[0], [1, 1, 1, 1])?;
            let c = t.conv2d(p, v[1], v[2], 1, 0)?;
            let s = t.sigmoid(c);
            let u = t.upsample2(s)?;
            let m = t.channel_mean(u)?;
            let g = t.mul(u, m)?;
            let target = t.constant(Tensor::filled(&[1, 2, 12, 12], 0.3));
            t.mse(g, target)
        },
    )?;
    Ok(rows)
}
