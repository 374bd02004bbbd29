//! Central finite-difference checks of tape gradients.
//!
//! A check wraps a function from input tensors to an output tensor. The output
//! is projected onto a fixed random direction to get a scalar, whose analytic
//! gradient is compared against `(f(θ+h) − f(θ−h)) / 2h` at randomly chosen
//! coordinates of every input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::data::{Sample, Vocabulary};
use crate::decoder::CellKind;
use crate::kernels::ConvGeom;
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input tensor.
    pub coords: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords: 10,
            floor: 1e-5,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} coords={:<4} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn projected<F>(f: &F, inputs: &[Tensor], direction: Option<&Tensor>) -> Result<(f64, Tensor)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.value(f(&tape, &vars)?);
    let dir = match direction {
        Some(d) => d.clone(),
        None => Tensor::ones(out.shape()),
    };
    let v = out.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
    Ok((v, (*out).clone()))
}

/// Checks `f`'s gradient with respect to every input.
pub fn check<F>(name: &str, inputs: Vec<Tensor>, f: F, cfg: &GradCheckConfig) -> Result<CheckOutcome>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fxhash(name));

    // Analytic pass.
    let (_, out) = projected(&f, &inputs, None)?;
    let direction = Tensor::uniform(out.shape(), 1.0, &mut rng);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let d = tape.constant(direction.clone());
    let loss = tape.sum(tape.mul(y, d)?);
    let grads = tape.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        let picks: Vec<usize> = if input.numel() <= cfg.coords {
            (0..input.numel()).collect()
        } else {
            (0..cfg.coords).map(|_| rng.random_range(0..input.numel())).collect()
        };
        for i in picks {
            let mut probe = inputs.clone();
            probe[k].data_mut()[i] += cfg.step;
            let (plus, _) = projected(&f, &probe, Some(&direction))?;
            probe[k].data_mut()[i] -= 2.0 * cfg.step;
            let (minus, _) = projected(&f, &probe, Some(&direction))?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[i], numeric, cfg.floor);
            max_err = max_err.max(if err.is_nan() { f64::INFINITY } else { err });
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        checked,
        max_rel_error: max_err,
        passed: max_err < cfg.tolerance,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform entries in `[-1, 1)` kept at least `margin` away from zero, for
/// ops with a kink at the origin.
pub fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0, rng).map(|x| if x.abs() < margin { x.signum() * margin + x } else { x })
}

/// Finite-difference checks for every differentiable tape operation.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &mut rng;
    let u = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, r);
    let mut out = Vec::new();

    out.push(check("add", vec![u(&[3, 4], r), u(&[3, 4], r)], |t, v| t.add(v[0], v[1]), cfg)?);
    out.push(check(
        "add_broadcast",
        vec![u(&[2, 3, 2, 2], r), u(&[2, 1, 2, 2], r)],
        |t, v| t.add(v[0], v[1]),
        cfg,
    )?);
    out.push(check(
        "mul_broadcast",
        vec![u(&[2, 3, 2, 2], r), u(&[2, 3, 1, 1], r)],
        |t, v| t.mul(v[0], v[1]),
        cfg,
    )?);
    out.push(check("affine", vec![u(&[5], r)], |t, v| Ok(t.affine(v[0], -1.5, 0.25)), cfg)?);
    out.push(check("matmul", vec![u(&[2, 3], r), u(&[3, 4], r)], |t, v| t.matmul(v[0], v[1]), cfg)?);
    out.push(check("matvec", vec![u(&[4, 3], r), u(&[3], r)], |t, v| t.matvec(v[0], v[1]), cfg)?);
    out.push(check("transpose", vec![u(&[2, 5], r)], |t, v| t.transpose(v[0]), cfg)?);
    out.push(check("reshape", vec![u(&[2, 6], r)], |t, v| t.reshape(v[0], &[3, 4]), cfg)?);
    out.push(check("narrow", vec![u(&[2, 5, 3], r)], |t, v| t.narrow(v[0], 1, 1, 3), cfg)?);
    out.push(check(
        "concat_channels",
        vec![u(&[2, 2, 2, 2], r), u(&[2, 3, 2, 2], r)],
        |t, v| t.concat_channels(&[v[0], v[1]]),
        cfg,
    )?);
    out.push(check("relu", vec![away_from_zero(&[12], 0.05, r)], |t, v| Ok(t.relu(v[0])), cfg)?);
    out.push(check("sigmoid", vec![u(&[8], r)], |t, v| Ok(t.sigmoid(v[0])), cfg)?);
    out.push(check("tanh", vec![u(&[8], r)], |t, v| Ok(t.tanh(v[0])), cfg)?);
    out.push(check("softmax_rows", vec![u(&[3, 5], r)], |t, v| t.softmax(v[0]), cfg)?);
    out.push(check("sum", vec![u(&[7], r)], |t, v| Ok(t.sum(v[0])), cfg)?);
    let probs = Tensor::uniform(&[6], 0.4, r).map(|x| x + 0.5);
    out.push(check("nll", vec![probs], |t, v| t.nll(v[0], 2, 1e-12), cfg)?);
    out.push(check("gather_row", vec![u(&[5, 3], r)], |t, v| t.gather_row(v[0], 3), cfg)?);
    for (name, geom, k) in [
        ("conv2d_3x3_pad1", ConvGeom::new(1, 1, 1), 3),
        ("conv2d_1x1", ConvGeom::UNIT, 1),
        ("conv2d_stride2", ConvGeom::new(2, 3, 1), 7),
        ("conv2d_dilated", ConvGeom::new(1, 2, 2), 3),
    ] {
        out.push(check(
            name,
            vec![u(&[2, 3, 7, 8], r), u(&[4, 3, k, k], r), u(&[4], r)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom),
            cfg,
        )?);
    }
    out.push(check("avg_pool2d", vec![u(&[2, 2, 5, 6], r)], |t, v| t.avg_pool2d(v[0], 2, 2), cfg)?);
    out.push(check("max_pool2d", vec![u(&[1, 2, 6, 6], r)], |t, v| t.max_pool2d(v[0], 3, 2, 1), cfg)?);
    out.push(check("global_avg_pool", vec![u(&[2, 3, 3, 4], r)], |t, v| t.global_avg_pool(v[0]), cfg)?);
    out.push(check(
        "batch_norm_train",
        vec![u(&[3, 2, 2, 3], r), u(&[2], r), u(&[2], r)],
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        cfg,
    )?);
    out.push(check(
        "batch_norm_eval",
        vec![u(&[2, 2, 2, 2], r), u(&[2], r), u(&[2], r)],
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5),
        cfg,
    )?);
    Ok(out)
}

/// Finite-difference check of the teacher-forced sequence loss with respect to
/// every trainable tensor of `model`, in training mode.
pub fn model_suite(model: &mut Model, samples: &[&Sample], cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    let loss_of = |m: &Model| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store, Mode::Train);
        let (nll, _) = m.batch_nll(&ctx, samples)?;
        Ok(tape.value(nll).item())
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, Mode::Train);
    let (nll, _) = model.batch_nll(&ctx, samples)?;
    let grads = tape.backward(nll)?;
    let mut analytic = ParamStore::clone(&model.store);
    analytic.zero_grad();
    analytic.accumulate(&grads, 1.0);
    drop(ctx);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let p = analytic.get(id);
        if !p.kind.trainable() {
            continue;
        }
        let zero = Tensor::zeros(p.value().shape());
        let g = p.grad.clone().unwrap_or(zero);
        let n = g.numel();
        let picks: Vec<usize> = if n <= cfg.coords {
            (0..n).collect()
        } else {
            (0..cfg.coords).map(|_| rng.random_range(0..n)).collect()
        };
        let mut max_err: f64 = 0.0;
        for &i in &picks {
            let orig = model.store.value(id).clone();
            let mut probe = orig.clone();
            probe.data_mut()[i] += cfg.step;
            model.store.set_value(id, probe.clone())?;
            let plus = loss_of(model)?;
            probe.data_mut()[i] -= 2.0 * cfg.step;
            model.store.set_value(id, probe)?;
            let minus = loss_of(model)?;
            model.store.set_value(id, orig)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(g.data()[i], numeric, cfg.floor);
            max_err = max_err.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        out.push(CheckOutcome {
            name: p.name.clone(),
            checked: picks.len(),
            max_rel_error: max_err,
            passed: max_err < cfg.tolerance,
        });
    }
    Ok(out)
}

/// Settings for whole-model checks. The summed sequence loss is O(10), so
/// steps below 1e-4 drown the smaller attention gradients in rounding error.
pub fn model_check_config() -> GradCheckConfig {
    GradCheckConfig {
        coords: 4,
        step: 1e-4,
        ..GradCheckConfig::default()
    }
}

/// Model checks for both decoder cells on tiny models with two random images.
/// Biases and auxiliary weights are randomized so ReLUs stay off their kink
/// and the auxiliary-state path carries gradient.
pub fn model_suites() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for cell in [CellKind::Gru, CellKind::GiGru] {
        let mut m = Model::new(&ModelConfig::tiny(cell), Vocabulary::synthetic(), 6)?;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let p = m.store.get(id);
            if p.kind == ParamKind::Bias || p.name.ends_with("w_yv") {
                let w = Tensor::uniform(p.value().shape(), 0.5, &mut rng);
                m.store.set_value(id, w)?;
            }
        }
        let image = Tensor::uniform(&[1, 32, 32], 1.0, &mut rng).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
        let a = Sample::new(image.clone(), "x ^ { 2 }", &m.vocab)?;
        let b = Sample::new(image.map(|v| 1.0 - v), r"1 + \alpha", &m.vocab)?;
        for mut outcome in model_suite(&mut m, &[&a, &b], &model_check_config())? {
            outcome.name = format!("{}/{}", cell.name(), outcome.name);
            out.push(outcome);
        }
    }
    Ok(out)
}
