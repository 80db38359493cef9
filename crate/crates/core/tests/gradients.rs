//! Finite-difference oracles for the spatial gradient of the trial field and
//! for the parameter gradient of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpinn::network::{init_params, loss_gradient, LossEvaluator, NeuralField};
use vpinn::problems::{advection_reaction, poisson_tanh, ProblemSpec};
use vpinn::testspace::assemble_residuals;
use vpinn::{build_structured_unit_square, reference_rule, Execution, TrialField};

fn central_loss_difference(field: &NeuralField, problem: &ProblemSpec, n: usize, k: usize, step: f64) -> f64 {
    let mesh = build_structured_unit_square(n).unwrap();
    let rule = reference_rule(3).unwrap();
    let mut plus = field.clone();
    plus.params.values_mut()[k] += step;
    let mut minus = field.clone();
    minus.params.values_mut()[k] -= step;
    let lp = assemble_residuals(&mesh, &plus, problem, &rule).unwrap().loss();
    let lm = assemble_residuals(&mesh, &minus, problem, &rule).unwrap().loss();
    (lp - lm) / (2.0 * step)
}

fn check_loss_gradient(problem: &ProblemSpec, widths: &[usize], seed: u64) {
    let mesh = build_structured_unit_square(4).unwrap();
    let rule = reference_rule(3).unwrap();
    let field = NeuralField::for_problem(init_params(widths, seed).unwrap(), problem);
    let (_, grad) = loss_gradient(&field, &mesh, problem, &rule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for _ in 0..20 {
        let k = rng.gen_range(0..grad.len());
        let fd = central_loss_difference(&field, problem, 4, k, 1e-4);
        let err = (fd - grad[k]).abs();
        // relative, with a floor for components that are zero to roundoff
        assert!(
            err <= 1e-4 * grad[k].abs().max(1e-6 * scale),
            "component {k}: analytic {} vs fd {fd}",
            grad[k]
        );
    }
}

#[test]
fn loss_gradient_matches_finite_differences_poisson() {
    check_loss_gradient(&poisson_tanh(), &[2, 50, 50, 50, 1], 17);
}

#[test]
fn loss_gradient_matches_finite_differences_with_advection_and_reaction() {
    check_loss_gradient(&advection_reaction(), &[2, 12, 9, 1], 5);
}

#[test]
fn shallow_network_gradient() {
    check_loss_gradient(&poisson_tanh(), &[2, 1], 2);
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let problem = poisson_tanh();
    let field = NeuralField::for_problem(init_params(&[2, 50, 50, 50, 1], 23).unwrap(), &problem);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for _ in 0..50 {
        let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let s = field.eval_with_gradient(x);
        for d in 0..2 {
            let mut xp = x;
            xp[d] += h;
            let mut xm = x;
            xm[d] -= h;
            let fd = (field.sample(xp).value - field.sample(xm).value) / (2.0 * h);
            assert!(
                (fd - s.gradient[d]).abs() <= 1e-6 * s.gradient[d].abs().max(1e-3),
                "{x:?} d{d}: {fd} vs {}",
                s.gradient[d]
            );
        }
    }
}

#[test]
fn boundary_values_match_dirichlet_data() {
    let problem = poisson_tanh();
    let field = NeuralField::for_problem(init_params(&[2, 20, 20, 1], 8).unwrap(), &problem);
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        for x in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
            assert!((field.sample(x).value - (problem.g)(x)).abs() <= 1e-12);
        }
    }
}

#[test]
fn residual_is_affine_in_the_forcing() {
    // r(2f) - r(f) is the F-part r(f) - r(0)
    let base = poisson_tanh();
    let mut doubled = base.clone();
    let f = base.f.clone();
    doubled.f = std::sync::Arc::new(move |p| 2.0 * f(p));
    let mut zero = base.clone();
    zero.f = std::sync::Arc::new(|_| 0.0);
    let mesh = build_structured_unit_square(4).unwrap();
    let rule = reference_rule(3).unwrap();
    let field = NeuralField::for_problem(init_params(&[2, 8, 1], 3).unwrap(), &base);
    let r1 = assemble_residuals(&mesh, &field, &base, &rule).unwrap();
    let r2 = assemble_residuals(&mesh, &field, &doubled, &rule).unwrap();
    let r0 = assemble_residuals(&mesh, &field, &zero, &rule).unwrap();
    for i in 0..r1.len() {
        let f_part = r1.values[i] - r0.values[i];
        assert!((r2.values[i] - r1.values[i] - f_part).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_independent_of_execution_policy() {
    let problem = poisson_tanh();
    let mesh = build_structured_unit_square(8).unwrap();
    let rule = reference_rule(3).unwrap();
    let params = init_params(&[2, 10, 10, 1], 1).unwrap();
    let multiplier = vpinn::network::unit_square_multiplier();
    let seq = LossEvaluator::new(&mesh, &problem, &rule, &multiplier)
        .unwrap()
        .with_execution(Execution::Sequential)
        .evaluate(&params)
        .unwrap();
    let par = LossEvaluator::new(&mesh, &problem, &rule, &multiplier)
        .unwrap()
        .with_execution(Execution::Parallel)
        .evaluate(&params)
        .unwrap();
    assert_eq!(seq.loss, par.loss);
    assert_eq!(seq.gradient, par.gradient);
}
