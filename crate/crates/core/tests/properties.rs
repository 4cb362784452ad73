use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;

use aniso_core::coefficients::{CoefficientField, ReactionSpec, SourceField};
use aniso_core::elliptic::{DiscreteProblem, Epsilon};
use aniso_core::export::fmt_f64;
use aniso_core::linsolve::{conjugate_gradient, dense_solve, Preconditioner};
use aniso_core::semigroup::{evolve, DiscreteGenerator, EvolutionConfig, Resolvent, Stepper};
use aniso_core::{build_space, BasisKind, CsrMatrix, TensorDomain};

fn pi_space(kind: BasisKind, m1: usize, m2: usize) -> aniso_core::GalerkinSpace {
    build_space(TensorDomain::unit_pi_square(), kind, m1, kind, m2).unwrap()
}

fn const_problem(b: f64, lambda: f64) -> DiscreteProblem {
    let a = CoefficientField::constant_symmetric(1.0, b, 1.0, lambda).unwrap();
    DiscreteProblem::new(Arc::new(pi_space(BasisKind::Q1, 5, 5)), a, SourceField::zero(), ReactionSpec::Zero).unwrap()
}

fn coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn csv_floats_round_trip(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn q1_refinement_reproduces_coarse_fields(m1 in 2usize..6, m2 in 2usize..6, c in coeffs(25), pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 8)) {
        let coarse = pi_space(BasisKind::Q1, m1, m2);
        let fine = pi_space(BasisKind::Q1, 2 * m1, 2 * m2);
        let c = &c[..coarse.dim()];
        let fc = coarse.prolongation_to(&fine).unwrap().mul_vec(c);
        for (s, t) in pts {
            let (x1, x2) = (PI * s, PI * t);
            prop_assert!((coarse.eval_field(c, x1, x2) - fine.eval_field(&fc, x1, x2)).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_mass_is_identity(m1 in 1usize..7, m2 in 1usize..7) {
        let p = DiscreteProblem::new(
            Arc::new(pi_space(BasisKind::Sine, m1, m2)),
            CoefficientField::identity(),
            SourceField::zero(),
            ReactionSpec::Zero,
        )
        .unwrap();
        prop_assert!(p.norms().mass.max_abs_diff(&CsrMatrix::identity(m1 * m2)) < 1e-12);
    }

    #[test]
    fn stiffness_symmetric_and_semidefinite(b in -0.5f64..0.5, eps in 0.01f64..1.0, v in coeffs(16)) {
        let p = const_problem(b, 0.4);
        let k = p.stiffness(Epsilon::Value(eps));
        prop_assert!(k.is_symmetric(1e-12));
        prop_assert!(k.quad_form(&v) >= -1e-12);
        prop_assert!(p.stiffness(Epsilon::Limit).is_symmetric(1e-12));
    }

    #[test]
    fn cg_energy_error_nonincreasing(entries in coeffs(100), rhs in coeffs(10)) {
        let b = nalgebra::DMatrix::from_row_slice(10, 10, &entries);
        let a = &b * b.transpose() + nalgebra::DMatrix::identity(10, 10);
        let k = CsrMatrix::from_dense(&a);
        let exact = dense_solve(&k, &rhs).unwrap().x;
        let mut energy = Vec::new();
        conjugate_gradient(&k, &rhs, None, Preconditioner::Jacobi, 1e-12, 200, |_, x, _| {
            let e: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
            energy.push(k.quad_form(&e).max(0.0).sqrt());
        })
        .unwrap();
        for w in energy.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn galerkin_orthogonality(eps in 0.01f64..1.0, a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let d = TensorDomain::unit_pi_square();
        let f = SourceField::parse(&format!("{a}*x1*x2 + {c}*cos(x1 - 2*x2)"), &d).unwrap();
        let coef = CoefficientField::constant_symmetric(1.0, 0.3, 1.0, 0.7).unwrap();
        let p = DiscreteProblem::new(Arc::new(pi_space(BasisKind::Q1, 6, 6)), coef, f, ReactionSpec::Zero).unwrap();
        for kind in [Epsilon::Value(eps), Epsilon::Limit] {
            let u = p.solve_linear(kind).unwrap();
            let ku = p.stiffness(kind).mul_vec(&u.coeffs);
            let fnorm = aniso_core::sparse::norm2(p.load());
            for (x, y) in ku.iter().zip(p.load()) {
                prop_assert!((x - y).abs() <= 1e-9 * fnorm.max(1e-300));
            }
        }
    }

    #[test]
    fn resolvent_contracts(b in -0.5f64..0.5, eps in 0.01f64..1.0, mu in 0.05f64..20.0, f in coeffs(16)) {
        let p = const_problem(b, 0.4);
        for kind in [Epsilon::Value(eps), Epsilon::Limit] {
            let gen = DiscreteGenerator::new(&p, kind);
            let u = Resolvent::new(&gen, mu).unwrap().apply_unchecked(&f).unwrap();
            prop_assert!(gen.norm(&u) * mu <= gen.norm(&f) * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn evolution_contracts(b in -0.5f64..0.5, eps in 0.01f64..1.0, g in coeffs(16), m in 1usize..30) {
        let p = const_problem(b, 0.4);
        let gen = DiscreteGenerator::new(&p, Epsilon::Value(eps));
        for st in [
            Stepper::BackwardEuler { m },
            Stepper::CrankNicolson { m },
            Stepper::YosidaRk4 { mu: 3.0, m: m.max(Stepper::min_yosida_steps(1.0, 3.0)) },
        ] {
            let tr = evolve(&gen, &g, &EvolutionConfig::new(1.0, st)).unwrap();
            let g0 = gen.norm(&g);
            prop_assert!(tr.norms.iter().all(|&n| n <= g0 * (1.0 + 1e-10) + 1e-15), "{:?}", st);
        }
    }
}
