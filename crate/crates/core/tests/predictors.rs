use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spb_core::data::{BBox, Location, SpatialDataset, TrendSpec};
use spb_core::estimation::{sar_matrix, FrkParams, LtkParams, SpdOperator, SpdParams, TskParams};
use spb_core::kernels::{build_basis_matrix, Basis, BisquareBasis, PiecewiseLinearBasis, RegularGrid, WendlandBasis};
use spb_core::predictors::{edw_predict, FitConfig, FittedPredictor, Method, MethodParams};

fn random_locs(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<Location> {
    (0..n).map(|_| Location { lon: rng.random_range(0.0..side), lat: rng.random_range(0.0..side) }).collect()
}

fn random_data(seed: u64, n: usize, side: f64) -> SpatialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs = random_locs(&mut rng, n, side);
    let z: Vec<f64> = locs.iter().map(|u| 380.0 + 0.1 * u.lat + (u.lon / 2.0).sin() * 2.0 + rng.random_range(-1.0..1.0)).collect();
    SpatialDataset::from_parts(&locs, &z).unwrap()
}

fn config(eps: f64) -> FitConfig {
    FitConfig { sigma_eps_sq: eps, ..FitConfig::default() }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Dense kriging oracle for `Y(u) = x'beta + S(u)'eta (+ xi)` with
/// `cov(Z) = S K S' + diag(d)` and `cov(Z, Y(u)) = S K S(u) + nugget I(u = s_i)`.
struct DenseLowRank {
    s: DMatrix<f64>,
    k: DMatrix<f64>,
    d: Vec<f64>,
    nugget: f64,
    resid: DVector<f64>,
}

impl DenseLowRank {
    fn predict(&self, su: &DVector<f64>, hit: Option<usize>, trend: f64) -> (f64, f64) {
        let mut sigma = &self.s * &self.k * self.s.transpose();
        for (i, d) in self.d.iter().enumerate() {
            sigma[(i, i)] += d;
        }
        let sinv = sigma.try_inverse().unwrap();
        let mut c = &self.s * &self.k * su;
        if let Some(i) = hit {
            c[i] += self.nugget;
        }
        let mean = trend + (c.transpose() * &sinv * &self.resid)[0];
        let var = (su.transpose() * &self.k * su)[0] + self.nugget - (c.transpose() * &sinv * &c)[0];
        (mean, var)
    }
}

#[test]
fn tsk_noiseless_reproduces_training_data() {
    for seed in 0..20 {
        let d = random_data(seed, 40, 10.0);
        let p = TskParams { beta: vec![380.0, 0.1], theta: 3.0, sigma0_sq: 4.0, sigma_xi_sq: 0.0 };
        let f = FittedPredictor::from_params(MethodParams::Tsk { params: p }, &d, &config(0.0)).unwrap();
        let out = f.predict(&d.locations()).unwrap();
        for (m, z) in out.mean.iter().zip(d.values().iter()) {
            assert!((m - z).abs() < 1e-6, "seed {seed}: {m} vs {z}");
        }
    }
}

#[test]
fn tsk_far_field_reverts_to_trend() {
    let d = random_data(1, 30, 5.0);
    let p = TskParams { beta: vec![380.0, 0.1], theta: 1.0, sigma0_sq: 4.0, sigma_xi_sq: 0.5 };
    let f = FittedPredictor::from_params(MethodParams::Tsk { params: p }, &d, &config(1.0)).unwrap();
    let u = Location { lon: 60.0, lat: 60.0 };
    let out = f.predict(&[u]).unwrap();
    assert!((out.mean[0] - (380.0 + 6.0)).abs() < 1e-3 * 2.0);
    assert!((out.variance.unwrap()[0] - 4.5).abs() < 1e-9);
}

/// Three points on a line, kriging weights from an explicit 3x3 solve.
#[test]
fn tsk_three_points_by_hand() {
    let locs = [Location { lon: 0.0, lat: 0.0 }, Location { lon: 1.0, lat: 0.0 }, Location { lon: 3.0, lat: 0.0 }];
    let z = [1.0, 3.0, 2.0];
    let d = SpatialDataset::from_parts(&locs, &z).unwrap();
    let (s0, th, nug, eps) = (2.0, 1.5, 0.3, 0.2);
    let cfg = FitConfig { trend: TrendSpec::Constant, ..config(eps) };
    let p = TskParams { beta: vec![1.5], theta: th, sigma0_sq: s0, sigma_xi_sq: nug };
    let f = FittedPredictor::from_params(MethodParams::Tsk { params: p }, &d, &cfg).unwrap();
    let c = |h: f64| s0 * (-h / th).exp();
    let sigma = DMatrix::from_fn(3, 3, |i, j| c((locs[i].lon - locs[j].lon).abs()) + if i == j { nug + eps } else { 0.0 });
    let u = Location { lon: 2.0, lat: 0.0 };
    let cv = DVector::from_vec(vec![c(2.0), c(1.0), c(1.0)]);
    let w = sigma.clone().lu().solve(&cv).unwrap();
    let want_mean = 1.5 + w.dot(&DVector::from_vec(vec![-0.5, 1.5, 0.5]));
    let want_var = s0 + nug - w.dot(&cv);
    let out = f.predict(&[u]).unwrap();
    assert!((out.mean[0] - want_mean).abs() < 1e-10);
    assert!((out.variance.unwrap()[0] - want_var).abs() < 1e-10);
}

#[test]
fn ssp_huge_penalty_gives_ols_surface() {
    let d = random_data(2, 30, 10.0);
    let f = FittedPredictor::from_params(
        MethodParams::Ssp { theta: 1e8, grid: vec![1e8], scores: vec![None] },
        &d,
        &config(1.0),
    )
    .unwrap();
    let locs = d.locations();
    let x = TrendSpec::Latitude.design(&locs);
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * d.values();
    let u = [Location { lon: 3.0, lat: 4.0 }, Location { lon: 9.0, lat: 1.0 }];
    let out = f.predict(&u).unwrap();
    assert!(out.variance.is_none());
    for (m, u) in out.mean.iter().zip(&u) {
        assert!((m - TrendSpec::Latitude.mean(u, &beta)).abs() < 1e-4);
    }
}

#[test]
fn ssp_matches_dense_formula() {
    let d = random_data(3, 10, 5.0);
    let theta = 0.7;
    let f = FittedPredictor::from_params(MethodParams::Ssp { theta, grid: vec![theta], scores: vec![None] }, &d, &config(1.0))
        .unwrap();
    let locs = d.locations();
    let tps = |a: &Location, b: &Location| {
        let r = a.dist(b);
        if r == 0.0 { 0.0 } else { r * r * r.ln() }
    };
    let w = DMatrix::from_fn(10, 10, |i, j| tps(&locs[i], &locs[j]));
    let a_inv = (w + DMatrix::identity(10, 10) * theta).try_inverse().unwrap();
    let x = TrendSpec::Latitude.design(&locs);
    let z = d.values();
    let beta = (x.transpose() * &a_inv * &x).try_inverse().unwrap() * x.transpose() * &a_inv * &z;
    let coef = &a_inv * (&z - &x * &beta);
    let u = Location { lon: 2.2, lat: 1.7 };
    let want = TrendSpec::Latitude.mean(&u, &beta) + locs.iter().zip(coef.iter()).map(|(s, c)| tps(&u, s) * c).sum::<f64>();
    let got = f.predict(&[u]).unwrap().mean[0];
    assert!(rel_err(got, want) < 1e-10, "{got} vs {want}");
}

#[test]
fn edw_degenerate_cases() {
    let one = SpatialDataset::from_parts(&[Location { lon: 1.0, lat: 1.0 }], &[42.0]).unwrap();
    let f = FittedPredictor::fit(Method::Edw, &one, &FitConfig::default()).unwrap();
    let out = f.predict(&[Location { lon: -50.0, lat: 20.0 }, Location { lon: 1.0, lat: 1.0 }]).unwrap();
    assert_eq!(out.mean, vec![42.0, 42.0]);
    assert!(out.variance.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let locs = random_locs(&mut rng, 12, 3.0);
    let flat = vec![7.25; 12];
    assert_eq!(edw_predict(&locs, &flat, &Location { lon: 1.0, lat: 2.0 }, 1.0), 7.25);
}

fn frk_instance(seed: u64) -> (SpatialDataset, FrkParams, BisquareBasis) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = random_data(seed, 40, 10.0);
    let centers = random_locs(&mut rng, 5, 10.0);
    let basis = BisquareBasis::new(centers, vec![6.0; 5]).unwrap();
    let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let k = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
    let p = FrkParams { beta: vec![379.0, 0.12], k, sigma_xi_sq: rng.random_range(0.1..1.0) };
    (d, p, basis)
}

#[test]
fn frk_smw_matches_dense() {
    for seed in 0..10 {
        let (d, p, basis) = frk_instance(seed);
        let eps = 0.8;
        let f = FittedPredictor::from_params(MethodParams::Frk { params: p.clone(), basis: basis.clone() }, &d, &config(eps))
            .unwrap();
        let locs = d.locations();
        let beta = DVector::from_vec(p.beta.clone());
        let oracle = DenseLowRank {
            s: build_basis_matrix(&basis, &locs).unwrap(),
            k: p.k.clone(),
            d: vec![p.sigma_xi_sq + eps; 40],
            nugget: p.sigma_xi_sq,
            resid: d.values() - TrendSpec::Latitude.design(&locs) * &beta,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut targets = random_locs(&mut rng, 8, 10.0);
        targets.extend_from_slice(&locs[..2]);
        let out = f.predict(&targets).unwrap();
        let var = out.variance.unwrap();
        for (j, u) in targets.iter().enumerate() {
            let hit = locs.iter().position(|s| s == u);
            let (m, v) = oracle.predict(&basis.eval(u).unwrap(), hit, TrendSpec::Latitude.mean(u, &beta));
            assert!(rel_err(out.mean[j], m) < 1e-8, "mean {} vs {m}", out.mean[j]);
            assert!((var[j] - v).abs() < 1e-8 * v.abs().max(1.0), "var {} vs {v}", var[j]);
            let su = basis.eval(u).unwrap();
            let prior = (su.transpose() * &p.k * &su)[0] + p.sigma_xi_sq;
            assert!(var[j] <= prior + 1e-12);
        }
    }
}

#[test]
fn frk_outside_support_is_trend() {
    let (d, mut p, basis) = frk_instance(1);
    p.sigma_xi_sq = 0.0;
    let f = FittedPredictor::from_params(MethodParams::Frk { params: p.clone(), basis }, &d, &config(1.0)).unwrap();
    let u = Location { lon: 100.0, lat: -60.0 };
    let got = f.predict(&[u]).unwrap().mean[0];
    assert_eq!(got, TrendSpec::Latitude.mean(&u, &DVector::from_vec(p.beta)));
}

fn ltk_instance(seed: u64, kappa: f64) -> (SpatialDataset, LtkParams, WendlandBasis) {
    let d = random_data(seed, 30, 6.0);
    let grid = RegularGrid::new(0.0, 0.0, 2.0, 2.0, 4, 4).unwrap();
    let basis = WendlandBasis::new(grid, 5.0).unwrap();
    (d, LtkParams { beta: vec![380.0, 0.1], sigma_eta_sq: 2.0, kappa }, basis)
}

#[test]
fn ltk_matches_dense_sar_oracle() {
    for seed in 0..5 {
        let (d, p, basis) = ltk_instance(seed, 0.6);
        let eps = 0.5;
        let f = FittedPredictor::from_params(MethodParams::Ltk { params: p.clone(), basis: basis.clone() }, &d, &config(eps))
            .unwrap();
        let b = sar_matrix(basis.grid(), p.kappa).to_dense();
        let k = (b.transpose() * &b).try_inverse().unwrap() * p.sigma_eta_sq;
        let locs = d.locations();
        let beta = DVector::from_vec(p.beta.clone());
        let oracle = DenseLowRank {
            s: build_basis_matrix(&basis, &locs).unwrap(),
            k,
            d: vec![eps; 30],
            nugget: 0.0,
            resid: d.values() - TrendSpec::Latitude.design(&locs) * &beta,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = random_locs(&mut rng, 10, 6.0);
        let out = f.predict(&targets).unwrap();
        let var = out.variance.unwrap();
        for (j, u) in targets.iter().enumerate() {
            let (m, v) = oracle.predict(&basis.eval(u).unwrap(), None, TrendSpec::Latitude.mean(u, &beta));
            assert!(rel_err(out.mean[j], m) < 1e-7, "mean {} vs {m}", out.mean[j]);
            assert!((var[j] - v).abs() < 1e-7 * v.abs().max(1e-3), "var {} vs {v}", var[j]);
        }
    }
}

#[test]
fn ltk_stiff_lattice_gives_trend() {
    let (d, p, basis) = ltk_instance(2, 1e4);
    let f = FittedPredictor::from_params(MethodParams::Ltk { params: p.clone(), basis }, &d, &config(0.5)).unwrap();
    let u = Location { lon: 3.1, lat: 2.9 };
    let got = f.predict(&[u]).unwrap().mean[0];
    assert!((got - TrendSpec::Latitude.mean(&u, &DVector::from_vec(p.beta))).abs() < 1e-3);
}

fn spd_instance(seed: u64, eps: f64) -> (SpatialDataset, SpdParams, RegularGrid) {
    let grid = RegularGrid::new(0.0, 0.0, 1.0, 1.0, 5, 5).unwrap();
    let d = random_data(seed, 20, 4.0);
    (d, SpdParams { beta: vec![380.0, 0.1], kappa: 0.8, sigma_nu_sq: 3.0, sigma_eps_sq: eps }, grid)
}

#[test]
fn spd_matches_dense_gaussian_conditioning() {
    for seed in 0..5 {
        let (d, p, grid) = spd_instance(seed, 0.4);
        let f = FittedPredictor::from_params(MethodParams::Spd { params: p.clone(), mesh: grid }, &d, &config(0.4)).unwrap();
        let mesh = PiecewiseLinearBasis::new(grid).unwrap();
        let (q, _) = SpdOperator::new(&mesh).unwrap().precision(p.kappa, p.sigma_nu_sq).unwrap();
        let k = q.to_dense().try_inverse().unwrap();
        let locs = d.locations();
        let beta = DVector::from_vec(p.beta.clone());
        let oracle = DenseLowRank {
            s: build_basis_matrix(&mesh, &locs).unwrap(),
            k: k.clone(),
            d: vec![p.sigma_eps_sq; 20],
            nugget: 0.0,
            resid: d.values() - TrendSpec::Latitude.design(&locs) * &beta,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let targets = random_locs(&mut rng, 10, 4.0);
        let out = f.predict(&targets).unwrap();
        let var = out.variance.unwrap();
        for (j, u) in targets.iter().enumerate() {
            let su = mesh.eval(u).unwrap();
            let (m, v) = oracle.predict(&su, None, TrendSpec::Latitude.mean(u, &beta));
            assert!(rel_err(out.mean[j], m) < 1e-7);
            assert!((var[j] - v).abs() < 1e-7 * v.abs().max(1e-3));
            assert!(var[j] <= (su.transpose() * &k * &su)[0] + 1e-12);
        }
    }
}

#[test]
fn spd_noiseless_node_reproduces_datum() {
    let grid = RegularGrid::new(0.0, 0.0, 1.0, 1.0, 5, 5).unwrap();
    let locs = [Location { lon: 2.0, lat: 2.0 }, Location { lon: 0.5, lat: 3.2 }, Location { lon: 3.7, lat: 0.4 }];
    let d = SpatialDataset::from_parts(&locs, &[391.0, 383.0, 379.5]).unwrap();
    let p = SpdParams { beta: vec![380.0, 0.1], kappa: 0.8, sigma_nu_sq: 3.0, sigma_eps_sq: 1e-9 };
    let f = FittedPredictor::from_params(MethodParams::Spd { params: p, mesh: grid }, &d, &config(1.0)).unwrap();
    assert!((f.predict(&[locs[0]]).unwrap().mean[0] - 391.0).abs() < 1e-4);
    assert!(f.predict(&[Location { lon: 40.0, lat: 2.0 }]).is_err());
}

#[test]
fn model_file_round_trip() {
    let d = random_data(9, 60, 10.0);
    let cfg = FitConfig { sigma_eps_sq: 0.5, ..FitConfig::default() };
    let targets = [Location { lon: 1.5, lat: 2.5 }, Location { lon: 8.0, lat: 9.0 }];
    for m in [Method::Tsk, Method::Ssp, Method::Edw, Method::Frk, Method::Ltk, Method::Spd] {
        let f = FittedPredictor::fit(m, &d, &cfg).unwrap();
        let json = f.to_json().unwrap();
        assert!(json.contains(&format!("\"method\": \"{}\"", m.tag())));
        let g = FittedPredictor::from_json(&json).unwrap();
        assert_eq!(g.method(), m);
        assert_eq!(f.predict(&targets).unwrap(), g.predict(&targets).unwrap(), "{m}");
        assert_eq!(g.to_json().unwrap(), json);
    }
    let bad = FittedPredictor::fit(Method::Edw, &d, &cfg).unwrap().to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    assert!(FittedPredictor::from_json(&bad).is_err());
}

#[test]
fn empty_batch_gives_empty_result() {
    let d = random_data(5, 40, 5.0);
    let f = FittedPredictor::fit(Method::Frk, &d, &config(0.5)).unwrap();
    let out = f.predict(&[]).unwrap();
    assert!(out.is_empty());
    assert_eq!(out.variance, Some(vec![]));
}

fn with_values(d: &SpatialDataset, z: &[f64]) -> SpatialDataset {
    SpatialDataset::from_parts(&d.locations(), z).unwrap()
}

fn fixed_params(m: Method) -> (MethodParams, FitConfig) {
    let cfg = config(0.6);
    let params = match m {
        Method::Tsk => MethodParams::Tsk { params: TskParams { beta: vec![2.0, 0.3], theta: 2.0, sigma0_sq: 3.0, sigma_xi_sq: 0.2 } },
        Method::Ssp => MethodParams::Ssp { theta: 0.5, grid: vec![0.5], scores: vec![None] },
        Method::Frk => {
            let basis = BisquareBasis::multiresolution(&BBox { lon_min: 0.0, lon_max: 6.0, lat_min: 0.0, lat_max: 6.0 }, &[9]).unwrap();
            MethodParams::Frk { params: FrkParams { beta: vec![2.0, 0.3], k: DMatrix::identity(9, 9) * 1.5, sigma_xi_sq: 0.1 }, basis }
        }
        Method::Ltk => {
            let basis = WendlandBasis::new(RegularGrid::new(-1.0, -1.0, 2.0, 2.0, 5, 5).unwrap(), 5.0).unwrap();
            MethodParams::Ltk { params: LtkParams { beta: vec![2.0, 0.3], sigma_eta_sq: 1.0, kappa: 0.5 }, basis }
        }
        Method::Spd => MethodParams::Spd {
            params: SpdParams { beta: vec![2.0, 0.3], kappa: 0.7, sigma_nu_sq: 2.0, sigma_eps_sq: 0.6 },
            mesh: RegularGrid::new(-0.5, -0.5, 0.5, 0.5, 15, 15).unwrap(),
        },
        _ => unreachable!(),
    };
    (params, cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn linear_predictors_are_affine_in_data(seed in 0u64..1000, m in 0usize..5) {
        let method = [Method::Tsk, Method::Ssp, Method::Frk, Method::Ltk, Method::Spd][m];
        let base = random_data(seed, 25, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z2: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z12: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let targets = random_locs(&mut rng, 6, 6.0);
        let (params, cfg) = fixed_params(method);
        let run = |z: &[f64]| {
            FittedPredictor::from_params(params.clone(), &with_values(&base, z), &cfg).unwrap().predict(&targets).unwrap().mean
        };
        let (a, b, ab, zero) = (run(&z1), run(&z2), run(&z12), run(&[0.0; 25]));
        for j in 0..targets.len() {
            let lhs = ab[j];
            let rhs = a[j] + b[j] - zero[j];
            prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + lhs.abs()), "{method}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn edw_stays_within_data_range(seed in 0u64..1000, lon in -20.0f64..20.0, lat in -20.0f64..20.0) {
        let d = random_data(seed, 15, 8.0);
        let z: Vec<f64> = d.values().iter().copied().collect();
        let v = edw_predict(&d.locations(), &z, &Location { lon, lat }, 1.0);
        let (lo, hi) = z.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_predictions() {
    let d = random_data(12, 120, 10.0);
    let mut cfg = config(0.5);
    cfg.mpp.samples = 300;
    cfg.mpp.burn_in = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets = random_locs(&mut rng, 700, 10.0);
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    for m in [Method::Tsk, Method::Frk, Method::Mpp, Method::Ltk] {
        let run = |n| pool(n).install(|| FittedPredictor::fit(m, &d, &cfg).unwrap().predict(&targets).unwrap());
        assert_eq!(run(1), run(4), "{m}");
    }
}
