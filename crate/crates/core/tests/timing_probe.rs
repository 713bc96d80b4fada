//! Temporary timing probe (removed before finalizing).
use rand::Rng;
use std::time::Instant;
use threshold_cox::domain::{Cohort, Subject};
use threshold_cox::errormodel::ErrorModelParams;
use threshold_cox::estimators::{self, BootstrapConfig, MppleConfig, MppleCov};

fn cohort(n: usize, lam0: f64, rho: f64, seed: u64) -> Cohort {
    let em = ErrorModelParams::from_rho(rho).unwrap();
    let mut rng = threshold_cox::stats::rng::stream(seed, &[1]);
    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let x: f64 = threshold_cox::stats::normal::inv_cdf(rng.gen::<f64>());
            let w = x + em.sigma_u2.sqrt() * threshold_cox::stats::normal::inv_cdf(rng.gen::<f64>());
            let rate = lam0 * (0.405f64 * x + 0.693 * x.max(0.0)).exp();
            let t: f64 = -rng.gen::<f64>().ln() / rate;
            Subject::time_fixed(format!("{i}"), t.min(10.0), t <= 10.0, w, &[])
        })
        .collect();
    Cohort::new(subjects, 10.0, 0).unwrap()
}

#[test]
fn probe() {
    let em = ErrorModelParams::from_rho(0.6).unwrap();
    let c3000 = cohort(3000, 0.0518, 0.6, 5);
    println!("n=3000 events={}", c3000.n_events());

    let t = Instant::now();
    let naive = estimators::fit_naive(&c3000, 0.0).unwrap();
    println!("naive fit: {:?} iters={}", t.elapsed(), naive.iterations);

    let t = Instant::now();
    let rr1 = estimators::fit_rr1(&c3000, &em, 0.0).unwrap();
    println!("rr1 fit (chained): {:?}", t.elapsed());

    let t = Instant::now();
    let cfg = MppleConfig { cov: MppleCov::ModelBased, ..Default::default() };
    let mp = estimators::fit_mpple_from(&c3000, &em, 0.0, &rr1.theta_hat, &cfg).unwrap();
    println!("mpple fit (model cov): {:?} outers={} conv={}", t.elapsed(), mp.iterations, mp.converged);

    let t = Instant::now();
    let cfg = MppleConfig { cov: MppleCov::Bootstrap { b: 40 }, ..Default::default() };
    let _mp = estimators::fit_mpple_from(&c3000, &em, 0.0, &rr1.theta_hat, &cfg).unwrap();
    println!("mpple fit (bootstrap 40): {:?}", t.elapsed());

    let t = Instant::now();
    let bc = BootstrapConfig { b: 50, truncation: 5.0, rng_seed: 7 };
    let _rr2 = estimators::fit_rr2_from(&c3000, &em, 0.0, &rr1, &bc).unwrap();
    println!("rr2 (B=50): {:?}", t.elapsed());

    // rare-disease scale
    let em8 = ErrorModelParams::from_rho(0.8).unwrap();
    let c20k = cohort(20000, 0.0031, 0.8, 6);
    println!("n=20000 events={}", c20k.n_events());
    let t = Instant::now();
    let rr1b = estimators::fit_rr1(&c20k, &em8, 0.0).unwrap();
    println!("rr1 n=20k: {:?}", t.elapsed());
    let t = Instant::now();
    let cfg = MppleConfig { cov: MppleCov::ModelBased, ..Default::default() };
    let mp = estimators::fit_mpple_from(&c20k, &em8, 0.0, &rr1b.theta_hat, &cfg).unwrap();
    println!("mpple n=20k (model cov): {:?} outers={}", t.elapsed(), mp.iterations);
}
