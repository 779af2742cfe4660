//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code, clippy::excessive_precision)]

use dppeft::dataio::{generate_dataset, Dataset, DatasetManifest};
use dppeft::harness::TrainConfig;

// 15-point Kronrod nodes/weights with the embedded 7-point Gauss weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive Gauss–Kronrod integral of `f` over `[a, b]`: the
/// interval with the largest error estimate is bisected until the summed
/// estimate drops below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    let (v, e) = gk15(&f, a, b);
    let mut parts = vec![(a, b, v, e)];
    for _ in 0..5000 {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let worst = (0..parts.len())
            .max_by(|&i, &j| parts[i].3.total_cmp(&parts[j].3))
            .expect("nonempty");
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (lv, le) = gk15(&f, lo, mid);
        let (rv, re) = gk15(&f, mid, hi);
        parts.push((lo, mid, lv, le));
        parts.push((mid, hi, rv, re));
    }
    // sum small contributions first
    let mut values: Vec<f64> = parts.iter().map(|p| p.2).collect();
    values.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    values.iter().sum()
}

/// Integral over consecutive segments between sorted `breaks`.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, breaks: &[f64], abs_tol: f64, rel_tol: f64) -> f64 {
    breaks
        .windows(2)
        .map(|w| integrate(&f, w[0], w[1], abs_tol, rel_tol))
        .sum()
}

/// `(1 + x)^α − 1 − αx` without cancellation for small `x`.
fn pow_excess(x: f64, alpha: f64) -> f64 {
    if x.abs() < 1e-3 {
        let mut term = alpha * x;
        let mut sum = 0.0;
        for j in 1..12 {
            term *= (alpha - j as f64) * x / (j as f64 + 1.0);
            sum += term;
        }
        sum
    } else {
        (alpha * x.ln_1p()).exp_m1() - alpha * x
    }
}

/// RDP of the Poisson-subsampled Gaussian at order `alpha` by direct
/// integration of `E_{z~N(0,σ²)}[(1 − q + q·e^{(2z−1)/2σ²})^α]`.
pub fn rdp_quadrature(alpha: f64, sigma: f64, q: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_mu0 = |z: f64| -z * z / (2.0 * s2) - (2.0 * std::f64::consts::PI * s2).sqrt().ln();
    let t = |z: f64| ((2.0 * z - 1.0) / (2.0 * s2)).exp_m1();
    let lo = -40.0 * sigma;
    let hi = alpha + 40.0 * sigma;
    let mut breaks = vec![lo, 0.0, 0.5, alpha, hi];
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    // A − 1, integrated directly so that small values keep their precision.
    let excess = integrate_pieces(
        |z| {
            let lm = log_mu0(z);
            if lm < -745.0 {
                return 0.0;
            }
            lm.exp() * pow_excess(q * t(z), alpha)
        },
        &breaks,
        0.0,
        1e-13,
    );
    if excess.is_finite() && excess < 1e3 {
        return excess.ln_1p() / (alpha - 1.0);
    }

    // Large moments: integrate in log space around the peak.
    let log_f = |z: f64| log_mu0(z) + alpha * (q * t(z)).ln_1p();
    let peak = (0..=20_000)
        .map(|i| lo + (hi - lo) * i as f64 / 20_000.0)
        .map(log_f)
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled = integrate_pieces(|z| (log_f(z) - peak).exp(), &breaks, 0.0, 1e-13);
    (peak + scaled.ln()) / (alpha - 1.0)
}

/// `KL(N(0, v + w) ‖ N(0, v))` by integrating `p ln(p/q)` over the line.
pub fn gaussian_kl_quadrature(v: f64, w: f64) -> f64 {
    let vp = v + w;
    let sp = vp.sqrt();
    let log_ratio = |x: f64| -0.5 * (vp / v).ln() - x * x / (2.0 * vp) + x * x / (2.0 * v);
    let p = |x: f64| (-x * x / (2.0 * vp)).exp() / (2.0 * std::f64::consts::PI * vp).sqrt();
    // substitute x = sp·y to make the width scale-free
    let f = |y: f64| {
        let x = sp * y;
        sp * p(x) * log_ratio(x)
    };
    integrate_pieces(f, &[-40.0, -5.0, 0.0, 5.0, 40.0], 1e-13, 1e-14)
}

/// Norm-wise relative error of `a` against the reference `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Three 4-class tasks in 16 dimensions with tight clusters.
pub fn separable_manifest(seed: u64) -> DatasetManifest {
    DatasetManifest::uniform(3, 16, 4, 300, 120, 0.3, 2.0, seed)
}

/// Two 4-class tasks whose clusters overlap.
pub fn overlapping_manifest(seed: u64) -> DatasetManifest {
    DatasetManifest::uniform(2, 16, 4, 600, 200, 1.5, 1.0, seed)
}

pub fn dataset(m: &DatasetManifest) -> Dataset {
    generate_dataset(m).expect("valid manifest")
}

pub fn base_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        batch_size: 32,
        steps: 300,
        clip_c: 1.0,
        sigma: 1.0,
        alpha: vec![1.0],
        lambda1: 1e-3,
        lambda2: 0.0,
        eval_every: 50,
        seed: 1,
        ..TrainConfig::default()
    }
}
