//! Self-supervised training: measurement consistency plus an equivariance
//! term under one sampled cyclic shift per iteration, optimized with Adam.
//!
//! For a measurement `y = M x`:
//!
//! ```text
//! x1 = f(y)            mc = mse(M x1, y)
//! x2 = T_g x1          ei = mse(x3, x2)
//! x3 = f(M x2)         total = mc + alpha * ei
//! ```

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{max_relative_error, Coords, GradcheckRow};
use crate::diffcore::{adam_step, AdamState, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hsio::{HsiCube, SpatialMask};
use crate::metrics;
use crate::model::{build_model, forward, forward_on_tape, BoundParams, ModelConfig, ModelParams};
use crate::operators::{check_mask_dims, sample_group, GroupAction, GroupConfig};

/// Relative tolerance of the loss finite-difference check.
pub const LOSS_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the equivariance term; 0 gives measurement-consistency-only fitting.
    pub alpha: f64,
    pub group: GroupConfig,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Overwrite observed pixels of the output with the measurement.
    pub data_consistency_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            group: GroupConfig::default(),
            lr: 0.01,
            iterations: 2000,
            seed: 0,
            log_every: 1,
            data_consistency_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be a finite value >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.group.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    pub mc_loss: f64,
    pub ei_loss: f64,
    pub total_loss: f64,
    /// Full-frame MPSNR of this iteration's output against the reference.
    pub mpsnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iteration,mc_loss,ei_loss,total_loss,mpsnr";

    /// Losses with 9 significant digits; `mpsnr` is empty without a reference.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = write!(
                out,
                "{},{:.8e},{:.8e},{:.8e},",
                r.iteration, r.mc_loss, r.ei_loss, r.total_loss
            );
            if let Some(p) = r.mpsnr {
                let _ = write!(out, "{p:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    pub fn at(&self, iteration: usize) -> Option<&HistoryRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }
}

/// Scalars and intermediate cubes of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mc: Var,
    pub ei: Var,
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
}

pub(crate) fn mask_tensor<T: Real>(mask: &SpatialMask) -> Tensor<T> {
    Tensor::new(
        vec![1, 1, mask.height(), mask.width()],
        mask.bits().iter().map(|&b| T::from_u8(b).unwrap()).collect(),
    )
    .expect("mask dims are positive")
}

/// Records both loss terms on `tape`. `y` is `[1,C,H,W]`, `mask` is `[1,1,H,W]`.
/// The equivariance path is skipped (`ei = 0`) when `with_ei` is false.
pub fn loss_terms<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    y: Var,
    mask: Var,
    g: GroupAction,
    with_ei: bool,
) -> Result<LossTerms> {
    let x1 = forward_on_tape(tape, params, config, y)?;
    let mx1 = tape.mul(x1, mask)?;
    let mc = tape.mse(mx1, y)?;
    if !with_ei {
        let ei = tape.constant(Tensor::scalar(T::zero()));
        return Ok(LossTerms { mc, ei, x1, x2: x1, x3: x1 });
    }
    let x2 = tape.roll(x1, g.dx, g.dy)?;
    let mx2 = tape.mul(x2, mask)?;
    let x3 = forward_on_tape(tape, params, config, mx2)?;
    let ei = tape.mse(x3, x2)?;
    Ok(LossTerms { mc, ei, x1, x2, x3 })
}

fn to_cube(t: &Tensor<f32>, like: &HsiCube) -> Result<HsiCube> {
    HsiCube::new(like.height(), like.width(), like.bands(), t.data().to_vec())
}

fn overwrite_observed(x: &mut [f32], y: &HsiCube, mask: &SpatialMask) {
    let n = y.pixels();
    for (xb, yb) in x.chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
        for ((xv, &yv), &m) in xb.iter_mut().zip(yb).zip(mask.bits()) {
            if m == 1 {
                *xv = yv;
            }
        }
    }
}

/// `f(y)`, with observed pixels replaced by `y` when `data_consistency` is set.
pub fn inpaint(params: &ModelParams, y: &HsiCube, mask: &SpatialMask, data_consistency: bool) -> Result<HsiCube> {
    check_mask_dims(y, mask)?;
    let out = forward(params, &crate::model::cube_tensor(y))?;
    let mut data = out.into_data();
    if data_consistency {
        overwrite_observed(&mut data, y, mask);
    }
    HsiCube::new(y.height(), y.width(), y.bands(), data)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub x_hat: HsiCube,
}

/// Fits a fresh model (initialized from `model_config.seed`) to the
/// measurement `y`. Group actions are drawn from a generator seeded with
/// `train_config.seed`.
pub fn train(
    y: &HsiCube,
    mask: &SpatialMask,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    reference: Option<&HsiCube>,
) -> Result<TrainOutcome> {
    train_with_progress(y, mask, model_config, train_config, reference, |_| {})
}

/// [`train`] with a callback invoked on every logged record.
pub fn train_with_progress(
    y: &HsiCube,
    mask: &SpatialMask,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    reference: Option<&HsiCube>,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome> {
    train_config.validate()?;
    check_mask_dims(y, mask)?;
    if y.bands() != model_config.in_bands {
        return Err(Error::Shape(format!(
            "model expects {} bands, measurement has {}",
            model_config.in_bands,
            y.bands()
        )));
    }
    model_config.check_input(y.height(), y.width())?;
    if let Some(r) = reference {
        if !r.same_dims(y) {
            return Err(Error::Shape("reference and measurement dimensions differ".into()));
        }
    }

    let mut params = build_model(model_config)?;
    let mut adam = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let y_t = crate::model::cube_tensor::<f32>(y);
    let mask_t = mask_tensor::<f32>(mask);
    let alpha = train_config.alpha as f32;
    let with_ei = train_config.alpha > 0.0;
    let lr = train_config.lr as f32;
    let mut history = TrainHistory::default();

    for it in 1..=train_config.iterations {
        let g = sample_group(&mut rng, &train_config.group);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, true);
        let yv = tape.constant(y_t.clone());
        let mv = tape.constant(mask_t.clone());
        let terms = loss_terms(&mut tape, &bound, model_config, yv, mv, g, with_ei)?;
        let weighted = tape.scale(terms.ei, alpha);
        let total = tape.add(terms.mc, weighted)?;
        let mc = tape.value(terms.mc).data()[0] as f64;
        let ei = tape.value(terms.ei).data()[0] as f64;
        let total_v = tape.value(total).data()[0] as f64;
        if !total_v.is_finite() || !mc.is_finite() || !ei.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: total_v,
            });
        }
        if it % train_config.log_every == 0 || it == 1 || it == train_config.iterations {
            let mpsnr = match reference {
                Some(r) => {
                    let mut x = tape.value(terms.x1).data().to_vec();
                    if train_config.data_consistency_output {
                        overwrite_observed(&mut x, y, mask);
                    }
                    let cube = HsiCube::new(y.height(), y.width(), y.bands(), x)?;
                    Some(metrics::mpsnr(&cube, r, None)?)
                }
                None => None,
            };
            let rec = HistoryRecord {
                iteration: it,
                mc_loss: mc,
                ei_loss: ei,
                total_loss: total_v,
                mpsnr,
            };
            on_record(&rec);
            history.records.push(rec);
        }
        tape.backward(total)?;
        let grads = bound.grads(&tape)?;
        drop(tape);
        adam_step(params.tensors_mut(), &grads, &mut adam, lr)?;
        if params.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }
    }

    let out = forward(&params, &y_t)?;
    let mut x_hat = to_cube(&out, y)?;
    if train_config.data_consistency_output {
        overwrite_observed(x_hat.data_mut(), y, mask);
    }
    Ok(TrainOutcome {
        params,
        history,
        x_hat,
    })
}

/// Finite-difference check of `mc + alpha·ei` with respect to 50 sampled
/// parameters of a small model on an 8×8×4 measurement.
pub fn loss_gradcheck(seed: u64, alpha: f64) -> Result<GradcheckRow> {
    use rand::Rng;
    let config = ModelConfig {
        in_bands: 4,
        base_channels: 4,
        depth: 1,
        attention_rank: 2,
        attention_mode: crate::model::AttentionMode::Both,
        seed,
    };
    let params = build_model(&config)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x105);
    let mask = crate::hsio::make_mask(&crate::hsio::MaskKind::Stripe { columns: vec![3..5] }, 8, 8, 0)?;
    let mask_t = mask_tensor::<f64>(&mask);
    let mut y: Vec<f64> = (0..4 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    for (k, v) in y.iter_mut().enumerate() {
        *v *= mask.bits()[k % 64] as f64;
    }
    let y = Tensor::new(vec![1, 4, 8, 8], y)?;
    let g = GroupAction::new(2, 5);
    let names = params.names().to_vec();
    let specs = params.clone();
    let err = max_relative_error(
        params.tensors(),
        |tape, vars| {
            let bound = BoundParams::from_vars(&names, vars);
            let yv = tape.constant(y.clone());
            let mv = tape.constant(mask_t.clone());
            let t = loss_terms(tape, &bound, specs.config(), yv, mv, g, true)?;
            let w = tape.scale(t.ei, alpha);
            tape.add(t.mc, w)
        },
        crate::model::MODEL_FD_STEP,
        Coords::Sample { count: 50, seed },
    )?;
    Ok(GradcheckRow::new("train_loss", err, LOSS_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsio::{make_mask, synth_cube, CubeSpec, MaskKind};
    use crate::model::AttentionMode;
    use crate::operators::apply_mask;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            in_bands: 4,
            base_channels: 4,
            depth: 1,
            attention_rank: 2,
            attention_mode: AttentionMode::Both,
            seed: 3,
        }
    }

    fn fixture() -> (HsiCube, SpatialMask, HsiCube) {
        let x = synth_cube(&CubeSpec::new(16, 16, 4, 2, 1)).unwrap();
        let mask = make_mask(&MaskKind::Stripe { columns: vec![6..8] }, 16, 16, 0).unwrap();
        let y = apply_mask(&x, &mask).unwrap();
        (x, mask, y)
    }

    #[test]
    fn training_is_deterministic_and_consistent() {
        let (x, mask, y) = fixture();
        let cfg = TrainConfig {
            iterations: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let a = train(&y, &mask, &tiny_model(), &cfg, Some(&x)).unwrap();
        let b = train(&y, &mask, &tiny_model(), &cfg, Some(&x)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.x_hat, b.x_hat);
        assert_eq!(a.history.records.len(), 5);
        assert!(a.history.records.iter().all(|r| r.mpsnr.is_some()));
        for band in 0..4 {
            for p in 0..256 {
                if mask.bits()[p] == 1 {
                    assert_eq!(a.x_hat.band(band)[p], y.band(band)[p]);
                }
            }
        }
        let csv = a.history.to_csv();
        assert!(csv.starts_with(TrainHistory::CSV_HEADER));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (_, mask, y) = fixture();
        let cfg = TrainConfig {
            iterations: 50,
            lr: 1e30,
            ..TrainConfig::default()
        };
        let err = train(&y, &mask, &tiny_model(), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn mc_ignores_output_on_masked_sites() {
        let (_, mask, y) = fixture();
        let mut tape = Tape::<f64>::new();
        let yt = crate::model::cube_tensor::<f64>(&y);
        let yv = tape.constant(yt.clone());
        let mv = tape.constant(mask_tensor(&mask));
        let mut x1 = yt.clone();
        let a = tape.constant(x1.clone());
        for (k, v) in x1.data_mut().iter_mut().enumerate() {
            if mask.bits()[k % 256] == 0 {
                *v += 0.37 + k as f64 * 1e-3;
            }
        }
        let b = tape.constant(x1);
        let ma = tape.mul(a, mv).unwrap();
        let mb = tape.mul(b, mv).unwrap();
        let la = tape.mse(ma, yv).unwrap();
        let lb = tape.mse(mb, yv).unwrap();
        assert_eq!(tape.value(la).data()[0], tape.value(lb).data()[0]);
    }

    #[test]
    fn inpaint_respects_data_consistency_flag() {
        let (_, mask, y) = fixture();
        let params = build_model(&tiny_model()).unwrap();
        let raw = inpaint(&params, &y, &mask, false).unwrap();
        assert!(raw.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let dc = inpaint(&params, &y, &mask, true).unwrap();
        for (k, (&d, &yv)) in dc.data().iter().zip(y.data()).enumerate() {
            if mask.bits()[k % 256] == 1 {
                assert_eq!(d, yv);
            } else {
                assert_eq!(d, raw.data()[k]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (_, mask, y) = fixture();
        for cfg in [
            TrainConfig { alpha: -1.0, ..TrainConfig::default() },
            TrainConfig { iterations: 0, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { group: GroupConfig::shift(1), ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&y, &mask, &tiny_model(), &cfg, None), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let row = loss_gradcheck(4, 1.0).unwrap();
        assert!(row.passed, "{row:?}");
    }
}
