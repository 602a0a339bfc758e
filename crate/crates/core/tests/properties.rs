use jumplab_core::conductivity::{double_cone, ConductivityField, isotropic_stable, scale_conductivity, stable_constant};
use jumplab_core::convergence::extend_to_continuum;
use jumplab_core::exec::Execution;
use jumplab_core::forms::{discrete_bilinear, discrete_form, random_grid_function};
use jumplab_core::heatkernel::{generator_matrix, propagate, Boundary, GeneratorOptions};
use jumplab_core::lattice::{GridPoint, ScaledLattice, Window};
use proptest::prelude::*;
use std::sync::LazyLock;

const EXEC: Execution = Execution::Sequential;

// Shared so the truncated total rate is summed once across cases.
static CONE: LazyLock<ConductivityField> = LazyLock::new(|| double_cone(1.0, 1.0, 1.0, 1.0, None).unwrap());

fn point(d: usize) -> impl Strategy<Value = GridPoint> {
    prop::collection::vec(-40i64..=40, d).prop_map(|c| GridPoint::new(&c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fields_are_exactly_symmetric(x in point(2), y in point(2), gamma in 0.3f64..3.0) {
        let iso = isotropic_stable(ScaledLattice::integer(2), 1.3, 0.7).unwrap();
        let cone = double_cone(gamma, 0.8, 1.0, 1.0, None).unwrap();
        for c in [&iso, &cone] {
            prop_assert_eq!(c.evaluate(&x, &y).unwrap(), c.evaluate(&y, &x).unwrap());
        }
    }

    #[test]
    fn cone_respects_upper_bound(x in point(2), y in point(2)) {
        prop_assume!(x != y);
        let cone = double_cone(1.0, 1.0, 0.5, 2.0, None).unwrap();
        let bound = cone.meta().kappa1.unwrap() * cone.lattice().distance(&x, &y).powf(-3.0);
        prop_assert!(cone.evaluate(&x, &y).unwrap() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn isotropic_scaling_matches_homogeneity(x in point(1), y in point(1), k in 0u32..4) {
        prop_assume!(x != y);
        let rho = 2f64.powi(k as i32);
        let base = isotropic_stable(ScaledLattice::integer(1), 1.0, stable_constant(1, 1.0)).unwrap();
        let scaled = scale_conductivity(&base, rho).unwrap();
        let direct = isotropic_stable(ScaledLattice::new(1, rho).unwrap(), 1.0, stable_constant(1, 1.0)).unwrap();
        let a = scaled.evaluate(&x, &y).unwrap();
        let b = direct.evaluate(&x, &y).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs());
    }

    #[test]
    fn forms_are_nonnegative_and_polarise(seed in 0u64..1000, lambda in prop::option::of(1.0f64..6.0)) {
        let c = &*CONE;
        let lat = *c.lattice();
        let f = random_grid_function(lat, 2, seed, 0);
        let g = random_grid_function(lat, 2, seed, 1);
        let ef = discrete_form(c, &f, lambda, EXEC).unwrap().value;
        let eg = discrete_form(c, &g, lambda, EXEC).unwrap().value;
        prop_assert!(ef >= 0.0 && eg >= 0.0);
        let efg = discrete_bilinear(c, &f, &g, lambda, EXEC).unwrap().value;
        let sum = discrete_form(c, &f.add(&g), lambda, EXEC).unwrap().value;
        let diff = discrete_form(c, &f.add(&g.scaled(-1.0)), lambda, EXEC).unwrap().value;
        prop_assert!((sum - diff - 4.0 * efg).abs() <= 1e-9 * (sum + diff));
    }

    #[test]
    fn extension_interpolates_and_stays_in_range(seed in 0u64..1000, u in prop::collection::vec(-1.5f64..1.5, 2)) {
        let lat = ScaledLattice::new(2, 2.0).unwrap();
        let f = random_grid_function(lat, 4, seed, 0);
        let e = extend_to_continuum(&f);
        for (p, v) in f.values.iter().take(5) {
            prop_assert!((e.eval(&lat.real_vec(p)).unwrap() - v).abs() < 1e-14);
        }
        let (lo, hi) = e.cube_range(&u).unwrap();
        let v = e.eval(&u).unwrap();
        prop_assert!(lo - 1e-14 <= v && v <= hi + 1e-14);
    }

    #[test]
    fn semigroup_property(t in 0.05f64..1.0, s in 0.05f64..1.0) {
        let c = isotropic_stable(ScaledLattice::integer(1), 1.0, stable_constant(1, 1.0)).unwrap();
        let w = Window::centered(*c.lattice(), 6.0).unwrap();
        let g = generator_matrix(&c, &w, Boundary::FullRateKilled, GeneratorOptions::default(), EXEC).unwrap();
        let mut v = vec![0.0; g.len()];
        v[g.index_of(&GridPoint::origin(1)).unwrap()] = 1.0;
        let (a, _) = propagate(&g, t + s, &v, EXEC).unwrap();
        let (mid, _) = propagate(&g, s, &v, EXEC).unwrap();
        let (b, _) = propagate(&g, t, &mid, EXEC).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-11);
            prop_assert!(*x >= -1e-15);
        }
        prop_assert!(a.iter().sum::<f64>() <= 1.0 + 1e-12);
    }
}
