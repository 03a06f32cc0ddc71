use super::Tensor;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Anything exposing a flat, stably ordered list of parameter tensors.
pub trait Parameterized {
    fn num_params(&self) -> usize;
    fn param_name(&self, i: usize) -> String;
    fn param(&self, i: usize) -> &Tensor;
    fn param_mut(&mut self, i: usize) -> &mut Tensor;
}

impl Parameterized for Vec<Tensor> {
    fn num_params(&self) -> usize {
        self.len()
    }
    fn param_name(&self, i: usize) -> String {
        format!("p{i}")
    }
    fn param(&self, i: usize) -> &Tensor {
        &self[i]
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self[i]
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_param: String,
    pub worst_coord: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `loss(model, with_grad)` evaluates the scalar objective; when `with_grad`
/// is true it must also populate `grad` on every parameter (one reverse-mode
/// pass). The check then perturbs up to `coords_per_param` sampled
/// coordinates per parameter by `±eps` and reports the maximum of
/// `|analytic − fd| / max(1, |analytic|)`.
///
/// The finite-difference side never touches the reverse-mode machinery, so
/// the two paths stay independent.
pub fn grad_check<M, F>(
    model: &mut M,
    mut loss: F,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    for i in 0..model.num_params() {
        model.param_mut(i).zero_grad();
    }
    loss(model, true)?;
    let analytic: Vec<Vec<f64>> =
        (0..model.num_params()).map(|i| model.param(i).grad_or_zeros()).collect();

    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
        worst_coord: 0,
    };
    for i in 0..model.num_params() {
        let numel = model.param(i).numel();
        let coords = sample_coords(numel, coords_per_param, &mut rng);
        for j in coords {
            let orig = model.param(i).data()[j];
            model.param_mut(i).data_mut()[j] = orig + eps;
            let f_plus = loss(model, false)?;
            model.param_mut(i).data_mut()[j] = orig - eps;
            let f_minus = loss(model, false)?;
            model.param_mut(i).data_mut()[j] = orig;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = model.param_name(i);
                report.worst_coord = j;
            }
        }
    }
    Ok(report)
}

fn sample_coords(numel: usize, limit: usize, rng: &mut StdRng) -> Vec<usize> {
    if numel <= limit {
        return (0..numel).collect();
    }
    // Partial Fisher-Yates: first `limit` entries of a shuffled index list.
    let mut idx: Vec<usize> = (0..numel).collect();
    for i in 0..limit {
        let j = rng.random_range(i..numel);
        idx.swap(i, j);
    }
    idx.truncate(limit);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn run(
        params: &mut Vec<Tensor>,
        build: impl Fn(&mut Tape, &[crate::tensor::NodeId]) -> crate::tensor::NodeId,
        with_grad: bool,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<_> = params.iter().map(|p| tape.input(p)).collect();
        let loss = build(&mut tape, &ids);
        let value = tape.value_scalar(loss);
        if with_grad {
            tape.backward(loss)?;
            for (p, id) in params.iter_mut().zip(&ids) {
                let g = tape.grad_or_zeros(*id);
                p.accumulate_grad(&g);
            }
        }
        Ok(value)
    }

    #[test]
    fn quadratic_form_is_exact_for_central_differences() {
        let mut params =
            vec![Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap().with_grad()];
        let report = grad_check(
            &mut params,
            |p, wg| {
                run(p, |tape, ids| {
                    let sq = tape.mul(ids[0], ids[0]).unwrap();
                    tape.sum(sq)
                }, wg)
            },
            1e-5,
            16,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn tanh_chain_depth_three() {
        let mut params = vec![Tensor::matrix(3, 3, vec![
            0.2, -0.1, 0.5, 0.7, -0.3, 0.9, -0.8, 0.4, 0.1,
        ])
        .unwrap()
        .with_grad()];
        let report = grad_check(
            &mut params,
            |p, wg| {
                run(p, |tape, ids| {
                    let a = tape.tanh(ids[0]);
                    let b = tape.tanh(a);
                    let c = tape.tanh(b);
                    tape.sum(c)
                }, wg)
            },
            1e-5,
            16,
            11,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn eps_outside_domain_rejected() {
        let mut params = vec![Tensor::scalar(1.0).with_grad()];
        let err = grad_check(&mut params, |p, wg| run(p, |t, ids| t.sum(ids[0]), wg), 1e-2, 4, 0);
        assert!(err.is_err());
    }
}
