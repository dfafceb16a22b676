//! Acceptance criteria, one test per criterion. Each prints a PASS/FAIL line.

use ffl_core::dp::calibrate_noise;
use ffl_core::verify::{self, calibration_tuples, CriterionOutcome, SuiteSize};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

fn report(o: &CriterionOutcome) {
    println!(
        "{} criterion {}: {} | measured: {} | bound: {} | {:.1}s",
        o.verdict(),
        o.id,
        o.claim,
        o.measured,
        o.bound,
        o.seconds
    );
    assert!(o.pass, "criterion {} failed: {}", o.id, o.measured);
}

fn timed(f: impl FnOnce() -> CriterionOutcome) -> CriterionOutcome {
    let start = std::time::Instant::now();
    let mut o = f();
    o.seconds = start.elapsed().as_secs_f64();
    o
}

#[test]
fn c01_budget_balance() {
    report(&timed(|| verify::criterion_1(SuiteSize::full())));
}

#[test]
fn c02_payment_accuracy() {
    report(&timed(|| verify::criterion_2(SuiteSize::full())));
}

#[test]
fn c03_planned_ffl_end_to_end() {
    report(&timed(verify::criterion_3));
}

#[test]
fn c04_scalable_vcg_error() {
    report(&timed(|| verify::criterion_4(SuiteSize::full())));
}

#[test]
fn c05_empirical_faithfulness() {
    report(&timed(|| verify::criterion_5(SuiteSize::full())));
}

#[test]
fn c06_bound_limits() {
    report(&timed(verify::criterion_6));
}

#[test]
fn c07_bound_validity() {
    report(&timed(|| verify::criterion_7(SuiteSize::full())));
}

fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn int(x: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

/// `2 atanh(z) = 2 sum z^(2i+1) / (2i+1)`, truncated once terms drop below 2^-200.
fn two_atanh(z: &BigRational) -> BigRational {
    let tiny = BigRational::new(BigInt::one(), BigInt::one() << 200);
    let z2 = z * z;
    let mut power = z.clone();
    let mut sum = BigRational::zero();
    let mut i = 0usize;
    loop {
        let term = &power / int(2 * i + 1);
        if term.abs() < tiny {
            break;
        }
        sum += term;
        power = &power * &z2;
        i += 1;
    }
    sum * int(2)
}

/// Natural log of a positive rational by halving into [1, 2) and the atanh series.
fn ln_rat(x: &BigRational) -> BigRational {
    let two = int(2);
    let mut y = x.clone();
    let mut m: i64 = 0;
    while y >= two {
        y /= &two;
        m += 1;
    }
    while y < BigRational::one() {
        y *= &two;
        m -= 1;
    }
    let ln2 = two_atanh(&BigRational::new(BigInt::one(), BigInt::from(3)));
    let one = BigRational::one();
    let r = two_atanh(&((&y - &one) / (&y + &one)));
    r + ln2 * BigRational::from_integer(BigInt::from(m))
}

fn rel_gap(value: f64, exact: &BigRational) -> f64 {
    let e = exact.to_f64().expect("representable");
    ((value - e) / e).abs()
}

#[test]
fn c08_noise_calibration() {
    let start = std::time::Instant::now();
    let mut worst_formula: f64 = 0.0;
    let mut worst_budget: f64 = 0.0;
    let tuples = calibration_tuples(20);
    let mut worked = 0.0;
    for (i, &(l_f, k, n, t1, t2, alpha, beta)) in tuples.iter().enumerate() {
        let cal = calibrate_noise(l_f, k, n, t1, t2, alpha, beta).unwrap();
        if i == 0 {
            worked = cal.sigma_sq;
        }
        let lb = ln_rat(&(BigRational::one() / rat(beta)));
        let (lf, a) = (rat(l_f), rat(alpha));
        let releases = int(t1) + int(k) * int(t2);
        let kn2 = int(k) * int(k) * int(n) * int(n);
        let sigma_sq = int(16) * &lf * &lf * &releases * &lb / (&kn2 * &a * &a);
        let sigma_p_sq = int(16) * int(k) * &lb / (int(n) * int(n) * &a * &a);
        worst_formula = worst_formula
            .max(rel_gap(cal.sigma_sq, &sigma_sq))
            .max(rel_gap(cal.sigma_p_sq, &sigma_p_sq));
        // Composition of the per-release budgets with the exact variances.
        let rho_step = int(2) * &lf * &lf / (&kn2 * &sigma_sq);
        let rho_pay = int(2) / (int(n) * int(n) * &sigma_p_sq);
        let total = releases * rho_step + int(k) * rho_pay;
        let target = &a * &a / (int(4) * &lb);
        let t = target.to_f64().unwrap();
        worst_budget = worst_budget
            .max(((total - &target).to_f64().unwrap() / t).abs())
            .max(rel_gap(cal.rho, &target));
    }
    let pass = (worked - 2.0631).abs() < 5e-5 && worst_formula <= 1e-12 && worst_budget <= 1e-9;
    let mut o = verify::criterion_8(SuiteSize::full());
    o.measured = format!(
        "{}; arbitrary precision: max rel gap {worst_formula:.2e}, budget {worst_budget:.2e}",
        o.measured
    );
    o.pass &= pass;
    o.seconds = start.elapsed().as_secs_f64();
    report(&o);
}

#[test]
fn c09a_dp_payment_monte_carlo() {
    report(&timed(|| verify::criterion_9_monte_carlo(SuiteSize::full())));
}

#[test]
fn c09b_dp_bound_grows_as_alpha_shrinks() {
    report(&timed(verify::criterion_9_bound_direction));
}

#[test]
fn c09c_dp_iterations_shrink_as_alpha_grows() {
    report(&timed(verify::criterion_9_iteration_direction));
}

#[test]
fn c10_scheme_ordering_and_crossover() {
    report(&timed(verify::criterion_10));
}

#[test]
fn c11_noise_free_dp_matches_leave_one_out() {
    report(&timed(verify::criterion_11));
}

#[test]
fn suite_detects_tampered_payments() {
    report(&timed(|| verify::mutation_check(SuiteSize::full())));
}

#[test]
fn planner_outputs_are_reported() {
    let lines = verify::planner_report();
    for l in &lines {
        println!("plan: {l}");
    }
    assert!(lines.iter().any(|l| l.starts_with("theorem 1") && l.contains("T2=")));
    assert!(lines.iter().any(|l| l.starts_with("theorem 3") && l.contains("L=")));
}
