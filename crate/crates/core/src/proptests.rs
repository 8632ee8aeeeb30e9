//! Randomized invariants across modules.

use std::sync::Arc;

use crate::diagnostics::{holder_norm, volume};
use crate::flow::{FlowConfig, FlowSolver, FlowState};
use crate::io::{parse_config_str, SnapshotRecord};
use crate::{RadialField, SphereGrid, Topology};
use proptest::prelude::*;

fn hemi(n: usize) -> Arc<SphereGrid> {
    Arc::new(SphereGrid::build(1, n, Topology::Hemisphere).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapshot_round_trip_is_bit_exact(values in prop::collection::vec(1e-3f64..1e3, 33), t in 0.0f64..10.0) {
        let rho = RadialField::new(hemi(33), values).unwrap();
        let state = FlowState::new(t, rho, 1.0);
        let rec = SnapshotRecord::from_state(&state);
        let back = SnapshotRecord::from_line(&rec.to_line(), 1).unwrap();
        prop_assert_eq!(back.t.to_bits(), rec.t.to_bits());
        for (a, b) in back.values.iter().zip(&rec.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn holder_seminorm_ignores_constants(values in prop::collection::vec(-1.0f64..1.0, 33), c in -5.0f64..5.0, alpha in 0.05f64..0.95) {
        let g = hemi(33);
        let a = holder_norm(&g, &values, alpha, 0).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let b = holder_norm(&g, &shifted, alpha, 0).unwrap();
        prop_assert!(a.seminorm >= 0.0);
        prop_assert!((a.seminorm - b.seminorm).abs() <= 1e-9 * (1.0 + a.seminorm));
        let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert_eq!(a.sup, sup);
    }

    #[test]
    fn implicit_heat_step_is_sup_norm_contractive(values in prop::collection::vec(-1.0f64..1.0, 33), k in 0u32..6) {
        let config = FlowConfig { resolution: 33, ..FlowConfig::default() };
        let mut solver = FlowSolver::new(config).unwrap();
        let dt = solver.dt() * 2f64.powi(k as i32);
        let u1 = solver.linear_step(&values, &[0.0; 33], dt).unwrap();
        let m0 = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m1 = u1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(m1 <= m0 + 1e-12);
    }

    #[test]
    fn volume_scales_with_power(c in 0.1f64..3.0, full in any::<bool>()) {
        let topo = if full { Topology::FullSphere } else { Topology::Hemisphere };
        let g = Arc::new(SphereGrid::build(1, 64 + usize::from(!full), topo).unwrap());
        let one = volume(&RadialField::constant(g.clone(), 1.0).unwrap());
        let v = volume(&RadialField::constant(g, c).unwrap());
        prop_assert!((v - c * c * one).abs() <= 1e-12 * v);
    }

    #[test]
    fn config_accepts_exactly_the_open_unit_interval(s in -1.0f64..2.0) {
        let text = format!("s={s}\ntheta=1\ndt=1e-3\nresolution=33\ntopology=hemisphere\n");
        let res = parse_config_str(&text);
        if s > 0.0 && s < 1.0 {
            prop_assert!(res.is_ok());
        } else {
            prop_assert_eq!(res.unwrap_err().to_string(), "config error: s must lie in (0,1)");
        }
    }
}
