use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(parameter, entry)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose `±h` probes straddle a rectifier or clamp switch, where
    /// central differences do not estimate the derivative.
    pub skipped: usize,
}

fn loss_of<F>(loss_fn: &F, params: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss_fn(&mut tape, &ids)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NotScalar(value.shape().to_vec()));
    }
    let v = value.values()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    Ok((v, tape.switch_pattern()))
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(w + h) - f(w - h)) / 2h` for every parameter entry.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss_fn(&mut tape, &ids)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    let base_pattern = tape.switch_pattern();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every parameter has a gradient");
        for e in 0..params[pi].len() {
            let w = params[pi].values()[e];
            probe[pi].values_mut()[e] = w + h;
            let (plus, plus_pattern) = loss_of(&loss_fn, &probe)?;
            probe[pi].values_mut()[e] = w - h;
            let (minus, minus_pattern) = loss_of(&loss_fn, &probe)?;
            probe[pi].values_mut()[e] = w;

            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.values()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::matrix(3, 1, vec![0.5, -1.25, 2.0]).unwrap();
        let report = grad_check(
            |tape, p| {
                let xs = tape.leaf(x.clone());
                tape.matmul(p[0], xs)
            },
            &[Tensor::matrix(1, 3, vec![0.3, 0.7, -1.1]).unwrap()],
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn masked_bce_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = Tensor::vector((0..8).map(|_| rng.random_range(0.05..0.95)).collect());
        let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let mask = [true, true, false, true, true, true, false, true];
        let report = grad_check(|t, p| t.masked_bce(p[0], &targets, &mask), &[probs], 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.skipped, 0);
    }

    // Every primitive on random inputs in [-2, 2].
    #[test]
    fn every_primitive_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, vec![4, 3]);
        let b = random_tensor(&mut rng, vec![3, 2]);
        let row = random_tensor(&mut rng, vec![3]);
        let same = random_tensor(&mut rng, vec![4, 3]);
        let w = random_tensor(&mut rng, vec![2]);
        let bias = random_tensor(&mut rng, vec![3]);
        let params = [a, b, row, same, w, bias];
        let report = grad_check(
            |t, p| {
                let prod = t.matmul(p[0], p[1])?; // 4x2
                let shifted = t.add(p[0], p[2])?;
                let diff = t.sub(shifted, p[3])?;
                let diff_row = t.sub(diff, p[2])?;
                let conv = t.pair_conv(diff_row, p[2], p[4], p[5])?;
                let rect = t.relu(conv)?;
                let sq = t.mul(rect, p[3])?;
                let s = t.sigmoid(sq)?; // 4x3
                let w = t.sigmoid(prod)?;
                let col = t.leaf(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
                let wv = t.matmul(w, col)?;
                let wv = t.sigmoid(wv)?;
                let mean = t.weighted_mean(s, wv, 1e-12)?; // [3]
                let flat = t.leaf(Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap());
                let mean_row = t.sub(s, mean)?;
                let z = t.matmul(mean_row, flat)?;
                let p = t.sigmoid(z)?;
                let total = t.masked_bce(p, &[1.0, 0.0, 1.0, 0.0], &[true; 4])?;
                let extra = t.masked_bce(wv, &[0.0, 1.0, 1.0, 0.0], &[true, false, true, true])?;
                t.add(total, extra)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked + report.skipped, 38);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn duplicated_subgraph_equals_fan_out() {
        // f(x) = s(x) + s(x) built once with shared node vs twice separately.
        let x = Tensor::vector(vec![0.4, -1.3, 1.9]);
        let mask = [true; 3];
        let targets = [1.0, 0.0, 1.0];
        let shared = |t: &mut Tape, p: &[NodeId]| {
            let s = t.sigmoid(p[0])?;
            let a = t.masked_bce(s, &targets, &mask)?;
            let b = t.masked_bce(s, &targets, &mask)?;
            t.add(a, b)
        };
        let dup = |t: &mut Tape, p: &[NodeId]| {
            let s1 = t.sigmoid(p[0])?;
            let s2 = t.sigmoid(p[0])?;
            let a = t.masked_bce(s1, &targets, &mask)?;
            let b = t.masked_bce(s2, &targets, &mask)?;
            t.add(a, b)
        };
        let grads = |f: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>| {
            let mut tape = Tape::new();
            let id = tape.param(x.clone());
            let out = f(&mut tape, &[id]).unwrap();
            tape.backward(out).unwrap().get(id).unwrap().clone()
        };
        let g_shared = grads(&shared);
        let g_dup = grads(&dup);
        for (a, b) in g_shared.values().iter().zip(g_dup.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        let p = [Tensor::scalar(1.0)];
        assert!(grad_check(|t, p| t.sigmoid(p[0]), &p, 0.0).is_err());
        let err = grad_check(
            |t, p| {
                let inf = t.leaf(Tensor::scalar(f64::INFINITY));
                t.mul(p[0], inf)
            },
            &p,
            1e-4,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
