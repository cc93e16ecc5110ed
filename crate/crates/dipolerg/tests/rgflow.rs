use dipolerg::frd::{gamma_symbol, trace_term};
use dipolerg::gas::{gradient_covariance, sphere_cos_moment, ExternalFieldSpec, SpectralSampler, Torus};
use dipolerg::kernels::{coulomb, Kernel};
use dipolerg::lattice::{torus_gradients, Direction};
use dipolerg::polymers::{min_covering_scale, Adjacency};
use dipolerg::rgflow::*;
use dipolerg::Error;

fn cfg() -> FlowConfig {
    FlowConfig::default()
}

/// Single-block activity `(e^{W_0} − 1) e^{−σ V_0}` on the linear field `g·x`.
fn k0(z: f64, sigma: f64, g: &[f64]) -> f64 {
    let u: Vec<f64> = g.iter().map(|c| c * (1.0 + sigma).sqrt()).collect();
    let v0 = 0.5 * g.iter().map(|c| c * c).sum::<f64>();
    (z * sphere_cos_moment(g.len(), &u)).exp_m1() * (-sigma * v0).exp()
}

/// Mixed second derivative at 0 by central differences, Richardson
/// extrapolated from steps `h` and `h/2`.
fn second_derivative(f: impl Fn(&[f64]) -> f64, d: usize, a: usize, b: usize) -> f64 {
    let at = |h: f64| {
        let p = |sa: f64, sb: f64| {
            let mut g = vec![0.0; d];
            g[a] += sa * h;
            g[b] += sb * h;
            f(&g)
        };
        (p(1.0, 1.0) - p(1.0, -1.0) - p(-1.0, 1.0) + p(-1.0, -1.0)) / (4.0 * h * h)
    };
    let (c, f2) = (at(1e-2), at(5e-3));
    (4.0 * f2 - c) / 3.0
}

#[test]
fn mayer_values_and_quadratic_match_finite_differences() {
    let c = cfg();
    for (z, sigma) in [(0.01, 0.0), (0.2, -0.1), (-0.3, 0.25)] {
        let k = init_mayer(&c, z, sigma, &ExternalFieldSpec::none()).unwrap();
        assert!((k.bulk[0].v - z.exp_m1()).abs() < 1e-15);
        for class in &k.bulk {
            let s = class.size as i32;
            let f = |g: &[f64]| k0(z, sigma, g).powi(s);
            assert!((class.v - f(&[0.0; 3])).abs() < 1e-14 * class.v.abs().max(1e-300));
            for a in 0..3 {
                for b in 0..3 {
                    let fd = second_derivative(f, 3, a, b);
                    let scale = class.q[0].abs().max(1e-300);
                    assert!((class.q[a * 3 + b] - fd).abs() < 1e-8 * scale.max(1.0), "s={s} z={z} a={a} b={b}: {} vs {fd}", class.q[a * 3 + b]);
                }
            }
        }
    }
}

#[test]
fn zero_start_is_zero() {
    let k = init_mayer(&cfg(), 0.0, 0.0, &ExternalFieldSpec::none()).unwrap();
    assert!(k.is_bulk_zero());
}

#[test]
fn zero_covariance_is_identity() {
    let k = init_mayer(&cfg(), 0.1, 0.05, &ExternalFieldSpec::none()).unwrap();
    let zero = Kernel::from_fn(3, 2, |_| 0.0);
    assert_eq!(fluctuation_sharp(&k, &zero).unwrap(), k);
}

#[test]
fn no_quadratic_part_leaves_values() {
    let mut k = init_mayer(&cfg(), 0.1, 0.05, &ExternalFieldSpec::none()).unwrap();
    for c in k.bulk.iter_mut() {
        c.q.iter_mut().for_each(|q| *q = 0.0);
    }
    let g = Kernel::from_fn(3, 2, |x| 1.0 / (1.0 + x.iter().map(|c| c * c).sum::<i64>() as f64));
    assert_eq!(fluctuation_sharp(&k, &g).unwrap(), k);
}

/// `Γ_1` sampled on a torus wider than twice its range; a single block with
/// `Q = I` and with an anisotropic `Q` is averaged over samples and sites.
#[test]
fn fluctuation_matches_monte_carlo_convolution() {
    let c = cfg();
    let rd = decomposition(&c, 1).unwrap();
    let torus = Torus::new(3, 8).unwrap();
    let symbol: Vec<f64> = (0..torus.volume()).map(|i| gamma_symbol(3, &rd.factors, 1, &torus.momentum(i))).collect();

    // the table agrees with the torus mode sum, since the range is below side/2
    let pos = Direction::positive(3);
    for a in 0..3 {
        for b in 0..3 {
            let table = rd.gamma(1).grad_grad(&[0, 0, 0], pos[a], pos[b]).unwrap();
            let modes = gradient_covariance(torus, &symbol, &[0, 0, 0], a, b);
            assert!((table - modes).abs() < 1e-7, "{a}{b}: {table} vs {modes}");
        }
    }

    let mut k = TaylorActivity::zero(3, c.l, Adjacency::King, 0).unwrap();
    k.bulk[0].v = 0.3;
    k.bulk[0].q = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    k.bulk[1].v = -0.2;
    k.bulk[1].q = vec![0.7, 0.2, -0.1, 0.2, -0.4, 0.3, -0.1, 0.3, 1.1];
    let sharp = fluctuation_sharp(&k, &ScaleCovariance { rd: &rd, j: 1 }).unwrap();

    let chains = 20;
    let per = 5000 / chains;
    let mut batch = vec![vec![0.0; chains]; 2];
    for ch in 0..chains {
        let mut s = SpectralSampler::new(torus, &symbol, 7, ch as u64).unwrap();
        for _ in 0..per {
            let grads = torus_gradients(&s.sample());
            for x in 0..torus.volume() {
                let g = &grads[3 * x..3 * x + 3];
                for (cls, acc) in k.bulk[..2].iter().zip(batch.iter_mut()) {
                    acc[ch] += cls.eval_linear(g);
                }
            }
        }
        for acc in batch.iter_mut() {
            acc[ch] /= (per * torus.volume()) as f64;
        }
    }
    for (cls, means) in sharp.bulk[..2].iter().zip(&batch) {
        let m = means.iter().sum::<f64>() / chains as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (chains - 1) as f64;
        let se = (var / chains as f64).sqrt();
        assert!((m - cls.v).abs() < 3.0 * se + 1e-12, "{} vs {m} ± {se}", cls.v);
    }
    let trace: f64 = pos.iter().map(|&a| rd.gamma(1).grad_grad(&[0, 0, 0], a, a).unwrap()).sum();
    assert!((sharp.bulk[0].v - 0.3 - 0.5 * trace).abs() < 1e-14);
}

#[test]
fn beta_sums_over_small_sets() {
    let mut k = TaylorActivity::zero(3, 5, Adjacency::King, 0).unwrap();
    assert_eq!(extract_beta(&k).bulk, 0.0);
    k.bulk[0].v = 0.125;
    assert_eq!(extract_beta(&k).bulk, -0.125);

    // d = 1: {B}, {B, B+1}, {B−1, B}
    let mut k1 = TaylorActivity::zero(1, 3, Adjacency::King, 0).unwrap();
    assert_eq!(k1.bulk.iter().map(|c| c.sets).collect::<Vec<_>>(), vec![1.0, 2.0]);
    let w = 0.37;
    k1.bulk.iter_mut().for_each(|c| c.v = w);
    assert!((extract_beta(&k1).bulk + 2.0 * w).abs() < 1e-15);
}

#[test]
fn alpha_from_single_block_quadratic() {
    let mut k = TaylorActivity::zero(3, 5, Adjacency::King, 0).unwrap();
    assert_eq!(extract_alpha(&k, 1e-12).unwrap().alpha, 0.0);
    let c = 0.6;
    k.bulk[0].q = vec![c, 0.0, 0.0, 0.0, c, 0.0, 0.0, 0.0, c];
    let a = extract_alpha(&k, 1e-12).unwrap();
    // direct sum: only X = B, |X| = 1, |B| = 1
    let dirs = Direction::all(3);
    for (i, &mu) in dirs.iter().enumerate() {
        for (t, &nu) in dirs.iter().enumerate() {
            let expect = -0.5 * k.bulk[0].q_signed(3, mu, nu);
            assert_eq!(a.table[i * 6 + t], expect);
            let back = dirs.iter().position(|&x| x == mu.neg()).unwrap();
            assert_eq!(a.table[back * 6 + t], -a.table[i * 6 + t]);
        }
    }
    assert!((a.alpha + c).abs() < 1e-15);
    assert_eq!(a.alpha_prime[4], a.alpha);

    // at scale j the block volume divides
    k.j = 1;
    let a1 = extract_alpha(&k, 1e-12).unwrap();
    assert!((a1.alpha + c / 125.0).abs() < 1e-15);
}

#[test]
fn pure_shear_is_inert() {
    let c = cfg();
    let rd = decomposition(&c, 3).unwrap();
    let s = 0.2;
    let t = run_flow_with(&c, &rd, 0.0, s, &ExternalFieldSpec::none(), 3).unwrap();
    for (j, st) in t.states.iter().enumerate() {
        assert_eq!(st.sigma, s);
        assert!(st.activity.is_bulk_zero());
        if j > 0 {
            let expect = 125.0 * trace_term(rd.gamma(j), c.l, j - 1, s).unwrap();
            assert_eq!(st.e_bulk, expect);
        }
    }
    let zero = run_flow_with(&c, &rd, 0.0, 0.0, &ExternalFieldSpec::none(), 3).unwrap();
    assert!(zero.states.iter().all(|s| s.sigma == 0.0 && s.e_bulk == 0.0 && s.norm_k == 0.0));
}

#[test]
fn step_is_its_components() {
    let c = cfg();
    let rd = decomposition(&c, 2).unwrap();
    let s0 = initial_state(&c, 0.01, 0.0, &ExternalFieldSpec::none()).unwrap();
    let s1 = step(&s0, &rd, &c).unwrap();
    let sharp = fluctuation_sharp_with(&s0.activity, &ScaleCovariance { rd: &rd, j: 1 }, c.sphere_order).unwrap();
    let alpha = extract_alpha(&sharp, c.symmetry_tol).unwrap();
    assert!((s1.sigma - s0.sigma - alpha.alpha).abs() < 1e-12);
    let beta = extract_beta(&sharp);
    assert_eq!(s1.e_bulk, 125.0 * (trace_term(rd.gamma(1), c.l, 0, 0.0).unwrap() + beta.bulk));
    assert_eq!(s1.activity, reblock(&sharp).unwrap());
    assert_eq!(step(&s0, &rd, &c).unwrap(), s1);
}

#[test]
fn stable_sigma_at_zero_and_analytic_root() {
    let c = cfg();
    let none = ExternalFieldSpec::none();
    let s0 = stable_sigma(&c, 0.0, &none, 3, 1e-14, 0.5).unwrap();
    assert_eq!(s0.sigma, 0.0);

    let n = dipolerg::polymers::n_constants(3, Adjacency::King).unwrap();
    for z in [0.01, 0.005, -0.01] {
        let v1 = f64::exp_m1(z);
        let p: f64 = (1..=8).map(|s| n.sets_of_size(s) as f64 * v1.powi(s as i32 - 1)).sum();
        let a = z * z.exp() / 3.0 * p;
        let expect = -a / (1.0 + v1 * p + a);
        let got = stable_sigma(&c, z, &none, 3, 1e-14, 0.5).unwrap();
        assert!((got.sigma - expect).abs() < 1e-12, "z={z}: {} vs {expect}", got.sigma);
        assert!(got.residual <= 1e-14);
    }
    let (s1, s2) = (stable_sigma(&c, 0.01, &none, 3, 1e-14, 0.5).unwrap(), stable_sigma(&c, 0.005, &none, 3, 1e-14, 0.5).unwrap());
    assert!(s1.sigma < s2.sigma && s2.sigma < 0.0);
    assert!((s1.sigma - s2.sigma).abs() < 0.01);
}

#[test]
fn bracket_failure_is_reported() {
    let c = cfg();
    let none = ExternalFieldSpec::none();
    // the root near −0.0045 lies outside [−1e−4, 1e−4]
    assert!(matches!(stable_sigma(&c, 0.01, &none, 2, 1e-14, 1e-4), Err(Error::BracketFailure { .. })));
    let sweep = sigma_sweep(&c, 0.01, &none, 2, &[-1e-4, 0.0, 1e-4]).unwrap();
    assert!(sweep.iter().all(|(_, s)| *s > 0.0));
}

#[test]
fn stable_flow_contracts() {
    let c = cfg();
    let none = ExternalFieldSpec::none();
    let s = stable_sigma(&c, 0.01, &none, 3, 1e-14, 0.5).unwrap();
    let t = run_flow(&c, 0.01, s.sigma, &none, 3).unwrap();
    assert_eq!(t.status, FlowStatus::Completed);
    let bound = t.states.iter().enumerate().map(|(j, s)| s.norm_k * 2f64.powi(j as i32)).fold(0.0, f64::max);
    assert!(bound < 1.0);
    assert!(t.geometric_decay);
}

#[test]
fn divergence_is_recorded() {
    let c = FlowConfig { norm_bound: 1e-3, ..cfg() };
    let rd = decomposition(&c, 2).unwrap();
    let f = ExternalFieldSpec::gradient(vec![vec![0, 0, 0], vec![2, 0, 0]], vec![1, 1]);
    let t = run_flow_with(&c, &rd, 0.3, 0.0, &f, 2).unwrap();
    assert!(matches!(t.status, FlowStatus::Diverged { .. }));
}

#[test]
fn two_point_series_matches_wick() {
    let c = cfg();
    let j_max = 3;
    let rd = decomposition(&c, j_max).unwrap();
    let mu = Direction::new(1, 3).unwrap();
    for (x2, dir2) in [(vec![1, 0, 0], 1), (vec![0, 1, 0], 1), (vec![2, 1, 0], 2)] {
        let f = ExternalFieldSpec::gradient(vec![vec![0, 0, 0], x2.clone()], vec![1, dir2]);
        let t = run_flow_with(&c, &rd, 0.0, 0.0, &f, j_max).unwrap();
        let report = accumulate_ff(&t).unwrap();
        assert!(report.support_ok);

        let nu = Direction::new(dir2, 3).unwrap();
        let r: Vec<i64> = x2.iter().map(|v| -v).collect();
        let cc = |v: &[i64]| coulomb(3, v, 1e-10).unwrap();
        let shift = |v: &[i64], d: Direction, s: i64| {
            let mut w = v.to_vec();
            w[d.axis()] += s * d.sign();
            w
        };
        let wick = cc(&shift(&shift(&r, mu, 1), nu, -1)) - cc(&shift(&r, mu, 1)) - cc(&shift(&r, nu, -1)) + cc(&r);
        let budget = rd.tail.grad_grad(&r, mu, nu).unwrap().abs();
        let err = (report.correlation.re - wick).abs();
        assert!(report.correlation.im.abs() < 1e-15);
        assert!(err <= budget + 1e-7, "{x2:?}: flow {} wick {wick} budget {budget}", report.correlation.re);
    }
}

#[test]
fn far_points_contribute_nothing_below_covering_scale() {
    let c = cfg();
    let rd = decomposition(&c, 3).unwrap();
    let pts = vec![vec![0, 0, 0], vec![30, 0, 0]];
    let cover = min_covering_scale(&pts, c.l, Adjacency::King).unwrap();
    assert!(cover.j0 >= 1);
    let f = ExternalFieldSpec::gradient(pts, vec![1, 1]);
    let t = run_flow_with(&c, &rd, 0.01, -0.0045, &f, 3).unwrap();
    let report = accumulate_ff(&t).unwrap();
    assert!(report.support_ok);
    for p in &report.partials {
        if (p.j as u32) < cover.j0 {
            assert_eq!(p.increment.norm(), 0.0, "scale {}", p.j);
        }
    }
    for s in &t.states {
        assert_eq!(field_support_violations(&s.activity), 0);
    }
}

#[test]
fn exponential_and_density_channels_run() {
    let c = cfg();
    let rd = decomposition(&c, 2).unwrap();
    let pts = vec![vec![0, 0, 0], vec![1, 0, 0]];
    let e = run_flow_with(&c, &rd, 0.0, 0.0, &ExternalFieldSpec::exponential(pts.clone(), vec![1, 1]), 2).unwrap();
    let re = accumulate_ff(&e).unwrap();
    // κ(e^{iA}, e^{iB}) = e^{−(G_AA+G_BB)/2}(e^{−G_AB} − 1) under Γ_1 + Γ_2
    let k = rd.gamma(1).add(rd.gamma(2));
    let d1 = Direction::new(1, 3).unwrap();
    let gaa = k.grad_grad(&[0, 0, 0], d1, d1).unwrap();
    let gab = k.grad_grad(&[-1, 0, 0], d1, d1).unwrap();
    let kappa = (-gaa).exp() * ((-gab).exp() - 1.0);
    assert!((re.correlation.re - kappa).abs() < 1e-12, "{} vs {kappa}", re.correlation.re);

    let dens = run_flow_with(&c, &rd, 0.0, 0.0, &ExternalFieldSpec::dipole_density(pts), 2).unwrap();
    let rd_ = accumulate_ff(&dens).unwrap();
    assert!(rd_.support_ok && rd_.correlation.re.is_finite());
}
