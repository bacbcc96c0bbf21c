//! Analytic gradients against central finite differences in f64.

mod common;

use adverdecom::nets::{self, LossTarget, ParamGroup};
use common::*;

#[test]
fn l1_matches_finite_differences() {
    for alpha in [0.0, 0.1, 1.0] {
        for seed in FD_SEEDS {
            let e = fd_max_rel_error(seed, alpha, LossTarget::L1);
            assert!(e < FD_TOL, "alpha {alpha} seed {seed}: rel err {e:e}");
        }
    }
}

#[test]
fn l2_matches_finite_differences() {
    for seed in FD_SEEDS {
        let e = fd_max_rel_error(seed, 0.0, LossTarget::L2);
        assert!(e < FD_TOL, "seed {seed}: rel err {e:e}");
    }
}

#[test]
fn vanilla_target_matches_finite_differences() {
    let e = fd_max_rel_error(FD_SEEDS[0], 0.0, LossTarget::C1);
    assert!(e < FD_TOL, "rel err {e:e}");
}

#[test]
fn l1_at_zero_alpha_equals_plain_classification() {
    let p = random_point(9);
    let a = nets::gradients(&p.params, &p.batch, &p.y, &p.z, 0.0, LossTarget::L1).unwrap();
    let b = nets::gradients(&p.params, &p.batch, &p.y, &p.z, 0.0, LossTarget::C1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn l1_never_touches_the_discriminator() {
    let p = random_point(5);
    let g = nets::gradients(&p.params, &p.batch, &p.y, &p.z, 1.0, LossTarget::L1).unwrap();
    assert_eq!(g.max_abs_in(&p.params, ParamGroup::Discriminator), 0.0);
    assert!(g.max_abs_in(&p.params, ParamGroup::Head2) > 0.0);
    let g = nets::gradients(&p.params, &p.batch, &p.y, &p.z, 1.0, LossTarget::L2).unwrap();
    for group in [ParamGroup::Backbone, ParamGroup::Head1, ParamGroup::Head2, ParamGroup::Classifier] {
        assert_eq!(g.max_abs_in(&p.params, group), 0.0);
    }
}
