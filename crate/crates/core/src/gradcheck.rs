//! Central finite-difference verification of tape gradients in `f64`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ArchId, DropoutStreams, LayerKind, Model};
use crate::ops::{self, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A scalar function of several tensors, recorded on a tape.
pub trait TapeFn: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var> {}
impl<F> TapeFn for F where F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var> {}

fn evaluate_at(f: &impl TapeFn, points: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::InvalidArgument("gradcheck function must be scalar-valued".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::non_finite("gradcheck perturbed evaluation"));
    }
    Ok(v)
}

/// Compares tape gradients of `f` at `points` with central differences
/// over every coordinate of every input.
pub fn gradcheck(f: impl TapeFn, points: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    let grads = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let mut g = tape.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>()
    };
    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..points[i].len() {
            let x = points[i].data()[j];
            work[i].data_mut()[j] = x + epsilon;
            let up = evaluate_at(&f, &work)?;
            work[i].data_mut()[j] = x - epsilon;
            let down = evaluate_at(&f, &work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values bounded away from zero: `sign * (0.2 + |normal|)`.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = 0.2 + rng.normal().abs();
        if rng.bernoulli(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values spaced 0.05 apart in random order, so every pooling
/// window has a unique maximum well separated from the runner-up.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.05 - 1.0)
}

/// Weighted sum with fixed random weights, giving every output coordinate
/// a distinct upstream gradient.
fn weighted_sum<'t>(tape: &mut Tape<'t, f64>, x: Var, seed: &str) -> Result<Var> {
    let mut rng = Rng::stream(7, seed);
    let w = random(tape.value(x).shape(), &mut rng);
    let w = tape.leaf(w, false);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn kink_free(pre: &Tensor<f64>, margin: f64) -> bool {
    pre.data().iter().all(|v| v.abs() > margin)
}

fn pools_well_separated(x: &Tensor<f64>, margin: f64) -> bool {
    let (n, c, h, w) = match x.dims4("pool check") {
        Ok(d) => d,
        Err(_) => return false,
    };
    let d = x.data();
    for plane in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let base = plane * h * w + 2 * oy * w + 2 * ox;
                let mut vals = [d[base], d[base + 1], d[base + w], d[base + w + 1]].map(|v| v.max(0.0));
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] > 0.0 && vals[0] - vals[1] < margin {
                    return false;
                }
            }
        }
    }
    true
}

/// Inputs for the conv -> relu -> maxpool -> dense -> cross-entropy
/// pipeline on a `1x1x4x4` image, chosen so that no ReLU pre-activation
/// and no pooling window is within reach of the finite-difference step.
fn pipeline_inputs() -> Vec<Tensor<f64>> {
    for attempt in 0u64.. {
        let mut rng = Rng::stream(attempt, "gradcheck:pipeline");
        let x = random(&[1, 1, 4, 4], &mut rng);
        let w = random(&[2, 1, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let pre = ops::conv2d(&x, &w, &b).expect("valid shapes");
        if kink_free(&pre, 1e-2) && pools_well_separated(&pre, 1e-2) {
            // Small head weights keep the softmax away from saturation, where
            // gradients shrink toward the finite-difference noise floor.
            let dw = random(&[8, 3], &mut rng).map(|v| 0.1 * v);
            let db = random(&[3], &mut rng);
            return vec![x, w, b, dw, db];
        }
    }
    unreachable!()
}

/// Finite-difference check of every operator plus a small end-to-end
/// pipeline, each with its own well-conditioned inputs.
pub fn operator_suite() -> Result<Vec<GradcheckResult>> {
    let eps = DEFAULT_EPSILON;
    let mut rng = Rng::stream(2024, "gradcheck:suite");
    let mut results = Vec::new();
    let mut run = |name: &str, f: &dyn Fn(&[Tensor<f64>]) -> Result<f64>, points: Vec<Tensor<f64>>| -> Result<()> {
        let coordinates = points.iter().map(Tensor::len).sum();
        results.push(GradcheckResult {
            name: name.to_string(),
            max_rel_error: f(&points)?,
            coordinates,
        });
        Ok(())
    };

    run(
        "sum_of_squares",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let s = t.mul(v[0], v[0])?; Ok(t.sum(s)) }, p, eps),
        vec![random(&[3, 4], &mut rng)],
    )?;
    run(
        "conv2d",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let y = t.conv2d(v[0], v[1], v[2])?; weighted_sum(t, y, "conv") }, p, eps),
        vec![random(&[2, 2, 4, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
    )?;
    run(
        "maxpool2d",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let y = t.maxpool2d(v[0])?; weighted_sum(t, y, "pool") }, p, eps),
        vec![distinct(&[2, 2, 5, 4], &mut rng)],
    )?;
    run(
        "relu",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let y = t.relu(v[0]); weighted_sum(t, y, "relu") }, p, eps),
        vec![away_from_zero(&[3, 7], &mut rng)],
    )?;
    run(
        "dense",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let y = t.dense(v[0], v[1], v[2])?; weighted_sum(t, y, "dense") }, p, eps),
        vec![random(&[3, 5], &mut rng), random(&[5, 4], &mut rng), random(&[4], &mut rng)],
    )?;
    run(
        "dropout",
        &|p| {
            gradcheck(
                |t: &mut Tape<'_, f64>, v: &[Var]| {
                    let y = t.dropout(v[0], 0.25, &mut Rng::stream(3, "gradcheck:dropout"))?;
                    weighted_sum(t, y, "dropout")
                },
                p,
                eps,
            )
        },
        vec![random(&[4, 6], &mut rng)],
    )?;
    run(
        "flatten",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| { let y = t.flatten(v[0])?; weighted_sum(t, y, "flatten") }, p, eps),
        vec![random(&[2, 3, 2, 2], &mut rng)],
    )?;
    run(
        "softmax_cross_entropy",
        &|p| gradcheck(|t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.softmax_cross_entropy(v[0], &[0, 6, 3])?.0), p, eps),
        vec![random(&[3, 7], &mut rng)],
    )?;
    run(
        "pipeline",
        &|p| {
            gradcheck(
                |t: &mut Tape<'_, f64>, v: &[Var]| {
                    let c = t.conv2d(v[0], v[1], v[2])?;
                    let r = t.relu(c);
                    let m = t.maxpool2d(r)?;
                    let f = t.flatten(m)?;
                    let d = t.dense(f, v[3], v[4])?;
                    Ok(t.softmax_cross_entropy(d, &[2])?.0)
                },
                p,
                eps,
            )
        },
        pipeline_inputs(),
    )?;
    Ok(results)
}

/// ReLU signs and max-pool winners of one train-mode forward pass. Two
/// parameter settings with equal patterns lie in the same smooth piece of
/// the loss.
#[derive(PartialEq)]
struct Pattern {
    relu: Vec<bool>,
    pool: Vec<usize>,
}

/// Train-mode loss with the dropout masks the tape would draw, plus the
/// activation pattern it passed through.
fn loss_and_pattern(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    streams: &DropoutStreams,
) -> Result<(f64, Pattern)> {
    let mut pattern = Pattern {
        relu: Vec::new(),
        pool: Vec::new(),
    };
    let mut x = images.clone();
    let mut params = model.params.iter();
    for layer in &model.spec.layers {
        x = match &layer.kind {
            LayerKind::Conv3x3 { .. } | LayerKind::Dense { .. } => {
                let (w, b) = (params.next().expect("weight"), params.next().expect("bias"));
                if matches!(layer.kind, LayerKind::Conv3x3 { .. }) {
                    ops::conv2d(&x, &w.tensor, &b.tensor)?
                } else {
                    ops::dense(&x, &w.tensor, &b.tensor)?
                }
            }
            LayerKind::Relu => {
                pattern.relu.extend(x.data().iter().map(|&v| v > 0.0));
                ops::relu(&x)
            }
            LayerKind::MaxPool2x2 => {
                let (y, winners) = ops::maxpool2d(&x)?;
                pattern.pool.extend(winners);
                y
            }
            LayerKind::Flatten => {
                let (n, len) = (x.shape()[0], x.len());
                x.reshape(&[n, len / n])?
            }
            LayerKind::Dropout { rate } => ops::dropout(&x, *rate, Mode::Train, &mut streams.for_layer(&layer.name))?,
            LayerKind::Softmax => break,
        };
    }
    let (loss, _) = ops::softmax_cross_entropy(&x, labels)?;
    Ok((loss, pattern))
}

/// Number of largest-gradient coordinates tried per parameter tensor.
const CANDIDATES: usize = 32;

/// Spot check of a full model's parameter gradients.
///
/// The loss is train-mode cross-entropy on `images` with fixed dropout
/// streams. Each parameter tensor is probed at one coordinate: the one
/// with the largest gradient magnitude among those whose `+-epsilon`
/// perturbations leave every ReLU sign and pooling winner unchanged.
/// Small gradients would compare rounding noise against the 1e-8 floor of
/// the relative error, and a perturbation crossing a kink differentiates a
/// different function. When none of the leading candidates is kink-free
/// the largest one is reported as is.
pub fn model_gradcheck(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Vec<GradcheckResult>> {
    let streams = DropoutStreams::new(0, "gradcheck");
    let grads: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let fwd = model.forward_train(&mut tape, x, &streams)?;
        let (loss, _) = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let mut g = tape.backward(loss)?;
        fwd.params
            .iter()
            .zip(&model.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
            .collect()
    };
    let (_, base) = loss_and_pattern(model, images, labels, &streams)?;
    let mut probe = model.clone();
    let mut results = Vec::with_capacity(grads.len());
    for (i, grad) in grads.iter().enumerate() {
        if !grad.all_finite() {
            return Err(Error::non_finite(format!("gradient of {}", model.params[i].name)));
        }
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
        let mut first = None;
        let mut chosen = None;
        for &j in order.iter().take(CANDIDATES) {
            let x = probe.params[i].tensor.data()[j];
            probe.params[i].tensor.data_mut()[j] = x + epsilon;
            let (up, up_pattern) = loss_and_pattern(&probe, images, labels, &streams)?;
            probe.params[i].tensor.data_mut()[j] = x - epsilon;
            let (down, down_pattern) = loss_and_pattern(&probe, images, labels, &streams)?;
            probe.params[i].tensor.data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = relative_error(grad.data()[j], numeric);
            first.get_or_insert(err);
            if up_pattern == base && down_pattern == base {
                chosen = Some(err);
                break;
            }
        }
        results.push(GradcheckResult {
            name: model.params[i].name.clone(),
            max_rel_error: chosen.or(first).expect("at least one candidate"),
            coordinates: 1,
        });
    }
    Ok(results)
}

/// End-to-end check of an architecture on a 2-sample batch of synthetic
/// images.
pub fn architecture_gradcheck(arch: ArchId, seed: u64) -> Result<Vec<GradcheckResult>> {
    let model = Model::<f64>::build(arch, 7, seed)?;
    let mut rng = Rng::stream(seed, "gradcheck:images");
    let images = Tensor::from_fn(&[2, 1, 48, 48], |_| rng.uniform());
    model_gradcheck(&model, &images, &[1, 5], DEFAULT_EPSILON)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let err = gradcheck(
            |t: &mut Tape<'_, f64>, v: &[Var]| {
                let s = t.mul(v[0], v[0])?;
                Ok(t.sum(s))
            },
            &[x],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at a kink: tape gives 0, the symmetric difference gives 0.5.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = gradcheck(
            |t: &mut Tape<'_, f64>, v: &[Var]| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn pattern_forward_matches_the_tape() {
        let model = Model::<f64>::build(ArchId::ModifiedVgg16, 7, 5).unwrap();
        let images = Tensor::from_fn(&[2, 1, 48, 48], |i| (i % 97) as f64 / 97.0);
        let streams = DropoutStreams::new(1, "t");
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let fwd = model.forward_train(&mut tape, x, &streams).unwrap();
        let (loss, _) = tape.softmax_cross_entropy(fwd.logits, &[0, 3]).unwrap();
        let (direct, pattern) = loss_and_pattern(&model, &images, &[0, 3], &streams).unwrap();
        assert_eq!(tape.value(loss).data()[0].to_bits(), direct.to_bits());
        assert_eq!(pattern.pool.len(), 2 * (64 * 24 * 24 + 128 * 12 * 12 + 256 * 6 * 6 + 512 * 3 * 3 + 512));
    }

    #[test]
    fn operators_pass() {
        for r in operator_suite().unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }
}
