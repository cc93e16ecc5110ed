use dipolerg::bounds::*;
use dipolerg::polymers::Adjacency;
use dipolerg::rgflow::{run_flow, stable_sigma, FlowConfig};
use dipolerg::gas::ExternalFieldSpec;

/// d = 3 king animal counts by size.
const COUNTS: [f64; 8] = [1.0, 13.0, 237.0, 4995.0, 114219.0, 2753781.0, 68911295.0, 1772774772.0];

#[test]
fn ledger_matches_hand_arithmetic_at_l65() {
    let n1: f64 = COUNTS.iter().sum();
    let n2: f64 = COUNTS.iter().enumerate().map(|(i, c)| (i + 1) as f64 * c).sum();
    assert_eq!((n1, n2), (1844559313.0, 14681691740.0));
    let r = contraction_ledger(&LedgerInput { l: 65, ..Default::default() }).unwrap();
    let l = 65f64;
    let s = l.sqrt() * l;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-13 * b.abs();
    assert!(close(r.l2_bulk, 24.0 * 4.0 * 256.0 * n2 / s));
    assert!(close(r.l2_field, 4.0 * 2.0 * 256.0 * n2 / s));
    assert!(close(r.l3_prime, 72.0 * 9.0 * 64.0 * n1 / (l * l)));
    assert!(close(r.l4, 4.0 * 216.0 * n2 / l));
    assert!(close(r.delta, 4.0 * 7776.0 * 8.0 * n2 / l));
    assert!(close(r.total, r.l2_bulk + r.l2_field + r.l3_prime + r.l4 + r.delta));
    // pinned
    assert!(close(r.l2_bulk, 688521117050.0195));
    assert!(close(r.delta, 56204226446887.38));
    assert!(close(r.total, 57163383820010.42));
    assert!(!r.contracts);
    for (j, v) in &r.l4_per_scale {
        assert!(close(*v, 4.0 * 216.0 * n2 * l.powi(-(*j as i32 + 1))));
    }
}

#[test]
fn every_bound_decreases_in_l() {
    let at = |l| contraction_ledger(&LedgerInput { l, ..Default::default() }).unwrap();
    let rs: Vec<LedgerReport> = [5u64, 25, 125].into_iter().map(at).collect();
    for w in rs.windows(2) {
        assert!(w[1].l2_bulk < w[0].l2_bulk);
        assert!(w[1].l2_field < w[0].l2_field);
        assert!(w[1].l3_prime < w[0].l3_prime);
        assert!(w[1].l4 < w[0].l4);
        assert!(w[1].delta < w[0].delta);
        assert!(w[1].total < w[0].total);
    }
}

#[test]
fn large_set_estimate_falls_with_a() {
    let v: Vec<f64> = [16.0, 256.0, 4096.0].iter().map(|&a| large_set_estimate(3, 65, a, Adjacency::King).value).collect();
    // below A = 2e(Δ−1) the bound does not converge
    assert!(v[0].is_infinite());
    assert!(v[1].is_finite() && v[2] <= 0.5 * v[1]);
    assert!(!large_set_estimate(3, 65, 4096.0, Adjacency::King).certified);
}

#[test]
fn min_l_is_minimal_and_monotone() {
    let inp = LedgerInput::default();
    let q = min_scale_for_contraction(&inp, 0.25).unwrap();
    assert!(q.total <= 0.25 && q.total_below > 0.25);
    assert_eq!(q.l % 2, 1);
    assert_eq!(q.l, 14663838815755923);
    let h = min_scale_for_contraction(&inp, 0.5).unwrap();
    assert!(h.l <= q.l);
}

#[test]
fn min_a_is_minimal_and_monotone() {
    let a = min_a_for_correlation(3, Adjacency::King, 1.5, 0.1, 0.1).unwrap();
    assert!(a.lhs <= 1.0 && a.lhs_half > 1.0);
    assert!((a.a - 1089738.1448087692).abs() < 1e-6 * a.a);
    let b = min_a_for_correlation(3, Adjacency::King, 1.5, 0.1, 0.2).unwrap();
    assert!(b.a > a.a);
}

#[test]
fn tail_scale_pinned() {
    assert_eq!(tail_scale(1.0, 16.0, 1.0, 0.1, 1e-6).unwrap(), 20);
    let n = 20;
    assert!(tail_bound(1.0, 16.0, 1.0, 0.1, n) <= 1e-6 && tail_bound(1.0, 16.0, 1.0, 0.1, n - 1) > 1e-6);
}

/// Measured contraction against the ledger: the truncated flow's ratio stays
/// below the explicit total (slack 0).
#[test]
fn flow_ratio_below_ledger() {
    let c = FlowConfig::default();
    let none = ExternalFieldSpec::none();
    let s = stable_sigma(&c, 0.01, &none, 3, 1e-14, 0.5).unwrap();
    let t = run_flow(&c, 0.01, s.sigma, &none, 3).unwrap();
    let ledger = contraction_ledger(&LedgerInput { l: c.l, a: c.norm_a, ..Default::default() }).unwrap();
    assert!(t.states.iter().all(|st| st.ratio <= ledger.total));
}
