//! Sampling-based checks of the structural assumptions a coefficient set
//! must satisfy before the solver and comparison results apply.
//!
//! Every check is a Monte Carlo falsification tool, not a proof: random
//! points (t, x, direction, values, marks) are drawn inside a bounded
//! window, worst-case margins are recorded, and a check fails only when a
//! sampled margin goes negative beyond rounding slack. Values r and
//! gradient components are drawn from [-2, 2]; coefficient sets intended
//! for solutions that leave this window need their own audit.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::coeffs::CoefficientSet;
use crate::field::{Grid, Point, MAX_DIM};

/// Half-width of the sampling window for solution values and gradients.
pub const VALUE_WINDOW: f64 = 2.0;

const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Most adverse sampled slack; negative means violated.
    pub margin: f64,
    /// Headline constant estimated for the check (meaning depends on check).
    pub estimate: f64,
    /// Sample point realizing the worst margin.
    pub worst: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub samples: usize,
    /// Sampled ellipticity constant: min eigenvalue of a - (1/2) phi phi^T.
    pub kappa: f64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub note: String,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Running worst-case tracker.
struct Worst {
    margin: f64,
    estimate: f64,
    at: String,
}

impl Worst {
    fn vacuous(estimate: f64) -> Worst {
        Worst {
            margin: f64::MAX,
            estimate,
            at: "vacuous (no sample applied)".into(),
        }
    }

    fn observe(&mut self, margin: f64, estimate: f64, at: impl Fn() -> String) {
        if estimate.abs() > self.estimate.abs() || self.estimate == 0.0 {
            self.estimate = estimate;
        }
        if margin < self.margin {
            self.margin = margin;
            self.at = at();
        }
    }

    fn into_check(self, name: &str, fallback_margin: f64) -> CheckResult {
        let margin = if self.margin == f64::MAX {
            fallback_margin
        } else {
            self.margin
        };
        CheckResult {
            name: name.into(),
            passed: margin >= -SLACK * (1.0 + self.estimate.abs()),
            margin,
            estimate: self.estimate,
            worst: self.at,
        }
    }
}

fn min_eigenvalue(m: [[f64; 2]; 2], d: usize) -> f64 {
    if d == 1 {
        return m[0][0];
    }
    let off = 0.5 * (m[0][1] + m[1][0]);
    let half_tr = 0.5 * (m[0][0] + m[1][1]);
    let disc = (0.25 * (m[0][0] - m[1][1]).powi(2) + off * off).sqrt();
    half_tr - disc
}

fn fmt_point(t: f64, x: Point, d: usize) -> String {
    if d == 1 {
        format!("t={t:.6}, x={:.6}", x[0])
    } else {
        format!("t={t:.6}, x=({:.6}, {:.6})", x[0], x[1])
    }
}

/// Run every structural check against `co` with `samples` random probes.
/// Deterministic given (seed, samples).
pub fn validate(
    co: &CoefficientSet,
    grid: &Arc<Grid>,
    t_end: f64,
    samples: usize,
    seed: u64,
) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = co.dim;
    let k = co.bound_k;

    let mut ellipticity = Worst::vacuous(0.0);
    let mut bounded = Worst::vacuous(0.0);
    let mut growth = Worst::vacuous(0.0);
    let mut sigma_lip = Worst::vacuous(0.0);
    let mut drift_mono = Worst::vacuous(0.0);
    let mut jump_mono = Worst::vacuous(1.0);

    // Per-mark aggregates for the nonlocal coefficient checks.
    let mut c0_hat = vec![0.0f64; co.pi1.len()];
    let mut c_smooth = Worst::vacuous(0.0);
    let mut m_check = Worst::vacuous(0.0);
    let mut b0_hat = vec![0.0f64; co.pi2.len()];
    let mut lam_gap = vec![0.0f64; co.pi2.len()];
    let mut lam_check = Worst::vacuous(0.0);

    let sample_x = |rng: &mut ChaCha8Rng| -> Point {
        let mut x = [0.0; MAX_DIM];
        for ax in 0..d {
            x[ax] = grid.lo(ax) + rng.gen::<f64>() * (grid.hi(ax) - grid.lo(ax));
        }
        x
    };

    for _ in 0..samples {
        let t = rng.gen::<f64>() * t_end;
        let x = sample_x(&mut rng);
        let y = sample_x(&mut rng);
        let r1 = VALUE_WINDOW * (2.0 * rng.gen::<f64>() - 1.0);
        let r2 = VALUE_WINDOW * (2.0 * rng.gen::<f64>() - 1.0);
        let mut p1 = [0.0; MAX_DIM];
        let mut p2 = [0.0; MAX_DIM];
        let mut xi = [0.0; MAX_DIM];
        let mut xi_norm = 0.0;
        for ax in 0..d {
            p1[ax] = VALUE_WINDOW * (2.0 * rng.gen::<f64>() - 1.0);
            p2[ax] = VALUE_WINDOW * (2.0 * rng.gen::<f64>() - 1.0);
            let z: f64 = rng.sample(StandardNormal);
            xi[ax] = z;
            xi_norm += z * z;
        }
        if xi_norm < 1e-12 {
            xi[0] = 1.0;
            xi_norm = 1.0;
        }
        let xi_norm = xi_norm.sqrt();
        for v in xi.iter_mut() {
            *v /= xi_norm;
        }

        // Ellipticity and boundedness of a and phi.
        let am = (co.a)(t, x);
        let mut mm = [[0.0; 2]; 2];
        let mut phi_sq = 0.0;
        let mut max_a: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                mm[i][j] = am[i][j];
                max_a = max_a.max(am[i][j].abs());
            }
        }
        for mode in 0..co.modes {
            let ph = (co.phi)(t, x, mode);
            for i in 0..d {
                phi_sq += ph[i] * ph[i];
                for j in 0..d {
                    mm[i][j] -= 0.5 * ph[i] * ph[j];
                }
            }
        }
        let eig = min_eigenvalue(mm, d);
        ellipticity.observe(eig, eig, || fmt_point(t, x, d));
        let bmargin = (k - max_a).min(k - phi_sq);
        bounded.observe(bmargin, max_a.max(phi_sq), || fmt_point(t, x, d));

        // Growth envelope for f, sigma, g.
        let fv = (co.f)(t, x, r1, p1);
        let mut lhs = fv * fv;
        for mode in 0..co.modes {
            let s = (co.sigma)(t, x, r1, mode);
            lhs += s * s;
        }
        for z in 0..co.nu.len() {
            let gv = (co.g)(t, x, z, r1);
            lhs += co.nu.weight(z) * gv * gv;
        }
        let mut p_sq = 0.0;
        for v in p1.iter().take(d) {
            p_sq += v * v;
        }
        let hv = (co.growth_h)(t, x);
        let rhs = k * r1 * r1 + k * p_sq + hv * hv;
        growth.observe(rhs - lhs, lhs, || {
            format!("{}, r={r1:.6}", fmt_point(t, x, d))
        });

        let dr = r1 - r2;
        if dr.abs() > 1e-8 {
            // Lipschitz bound on sigma in r.
            let mut dsig = 0.0;
            for mode in 0..co.modes {
                let s = (co.sigma)(t, x, r1, mode) - (co.sigma)(t, x, r2, mode);
                dsig += s * s;
            }
            let ratio = dsig / (dr * dr);
            sigma_lip.observe(k - ratio, ratio, || fmt_point(t, x, d));

            // One-sided monotonicity of the drift with the jump correction.
            let mut lhs = 2.0 * dr * ((co.f)(t, x, r1, p1) - (co.f)(t, x, r2, p1));
            for z in 0..co.nu.len() {
                let dg = (co.g)(t, x, z, r1) - (co.g)(t, x, z, r2);
                lhs += co.nu.weight(z) * dg * dg;
            }
            let ratio = lhs / (dr * dr);
            drift_mono.observe(k - ratio, ratio, || {
                format!("{}, r1={r1:.6}, r2={r2:.6}", fmt_point(t, x, d))
            });

            // Monotonicity of r + g in r.
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            for z in 0..co.nu.len() {
                let slope = (hi + (co.g)(t, x, z, hi) - lo - (co.g)(t, x, z, lo)) / (hi - lo);
                jump_mono.observe(slope, slope, || {
                    format!("{}, mark {z}, r in [{lo:.6}, {hi:.6}]", fmt_point(t, x, d))
                });
            }
        }

        // Lipschitz dependence of f on the gradient argument.
        let mut dp = 0.0;
        for ax in 0..d {
            let e = p1[ax] - p2[ax];
            dp += e * e;
        }
        let dp = dp.sqrt();
        if dp > 1e-8 {
            let df = ((co.f)(t, x, r1, p1) - (co.f)(t, x, r1, p2)).abs();
            let ratio = df / dp;
            drift_mono.observe(k - ratio, ratio, || {
                format!("{} (gradient argument)", fmt_point(t, x, d))
            });
        }

        // Shift c: bound, x-Lipschitz, finite-difference Jacobian bounds.
        for z in 0..co.pi1.len() {
            let cx = (co.c)(t, x, z);
            let cy = (co.c)(t, y, z);
            let mut cnorm = 0.0;
            let mut dc = 0.0;
            let mut dxy = 0.0;
            for ax in 0..d {
                cnorm += cx[ax] * cx[ax];
                let e = cx[ax] - cy[ax];
                dc += e * e;
                let exy = x[ax] - y[ax];
                dxy += exy * exy;
            }
            c0_hat[z] = c0_hat[z].max(cnorm.sqrt());
            if dxy > 1e-12 {
                c0_hat[z] = c0_hat[z].max((dc / dxy).sqrt());
            }

            // Jacobian of the shift and det(I + theta grad c).
            let step = 1e-5;
            let mut jac = [[0.0; 2]; 2];
            let mut max_dc: f64 = 0.0;
            for j in 0..d {
                let mut xp = x;
                let mut xm = x;
                xp[j] += step;
                xm[j] -= step;
                let cp = (co.c)(t, xp, z);
                let cm = (co.c)(t, xm, z);
                for l in 0..d {
                    jac[l][j] = (cp[l] - cm[l]) / (2.0 * step);
                    max_dc = max_dc.max(jac[l][j].abs());
                }
            }
            let theta = rng.gen::<f64>();
            let det = if d == 1 {
                1.0 + theta * jac[0][0]
            } else {
                (1.0 + theta * jac[0][0]) * (1.0 + theta * jac[1][1])
                    - theta * jac[0][1] * theta * jac[1][0]
            };
            let margin = (k - max_dc).min(det.abs() - 1.0 / k).min(k - det.abs());
            c_smooth.observe(margin, max_dc, || {
                format!("{}, mark {z}, theta={theta:.6}", fmt_point(t, x, d))
            });

            // Density m: range and x-Lipschitz bound.
            let mx = (co.m)(t, x, z);
            let my = (co.m)(t, y, z);
            let mut margin = mx.min(k - mx);
            if dxy > 1e-12 {
                margin = margin.min(k - (mx - my).abs() / dxy.sqrt());
            }
            m_check.observe(margin, mx, || format!("{}, mark {z}", fmt_point(t, x, d)));
        }

        // Second family: b bound and lambda structure.
        for z in 0..co.pi2.len() {
            let bv = (co.b)(t, z);
            let mut bnorm = 0.0;
            for v in bv.iter().take(d) {
                bnorm += v * v;
            }
            b0_hat[z] = b0_hat[z].max(bnorm.sqrt());

            let lam = (co.lambda)(t, x, z);
            let step = 1e-5;
            let mut grad_norm = 0.0;
            for ax in 0..d {
                let mut xp = x;
                let mut xm = x;
                xp[ax] += step;
                xm[ax] -= step;
                let dl = ((co.lambda)(t, xp, z) - (co.lambda)(t, xm, z)) / (2.0 * step);
                grad_norm += dl * dl;
            }
            let grad_norm = grad_norm.sqrt();
            lam_gap[z] = lam_gap[z].max((1.0 - lam).abs());
            let margin = lam.min(k - lam.abs() - grad_norm);
            lam_check.observe(margin, lam, || format!("{}, mark {z}", fmt_point(t, x, d)));
        }
    }

    // Aggregate the per-mark statistics into integrability margins.
    let mut c_bound = Worst::vacuous(0.0);
    if !co.pi1.is_empty() {
        let total: f64 = (0..co.pi1.len())
            .map(|z| co.pi1.weight(z) * c0_hat[z] * c0_hat[z])
            .collect::<Vec<_>>()
            .iter()
            .sum();
        c_bound.observe(k - total, total, || "integral of c0^2 over marks".into());
    }
    let mut b_bound = Worst::vacuous(0.0);
    if !co.pi2.is_empty() {
        let total: f64 = (0..co.pi2.len())
            .map(|z| co.pi2.weight(z) * b0_hat[z].max(b0_hat[z] * b0_hat[z]))
            .sum();
        b_bound.observe(k - total, total, || "integral of b0 v b0^2 over marks".into());
        for z in 0..co.pi2.len() {
            b_bound.observe(b0_hat[z] - lam_gap[z], lam_gap[z], || {
                format!("mark {z}: |1 - lambda| vs b0")
            });
        }
    }

    let kappa = if ellipticity.margin == f64::MAX {
        0.0
    } else {
        ellipticity.margin
    };
    let mut checks = vec![
        {
            let mut c = ellipticity.into_check("ellipticity", 0.0);
            // Strictly positive kappa required, not merely non-negative.
            c.passed = c.margin > 0.0;
            c
        },
        bounded.into_check("bounded-coefficients", k),
        growth.into_check("growth-envelope", k),
        sigma_lip.into_check("sigma-lipschitz", k),
        drift_mono.into_check("drift-monotonicity", k),
        jump_mono.into_check("jump-monotonicity", 1.0),
        c_bound.into_check("shift-c-integrability", k),
        c_smooth.into_check("shift-c-smoothness", k),
        m_check.into_check("density-m", k),
        b_bound.into_check("shift-b-lambda", k),
        lam_check.into_check("lambda-bounds", k),
    ];
    // Samples = 0 means nothing was exercised; report as failed ellipticity.
    if samples == 0 {
        checks[0].passed = false;
    }
    let passed = checks.iter().all(|c| c.passed);
    ValidationReport {
        seed,
        samples,
        kappa,
        checks,
        passed,
        note: format!(
            "sampling-based falsification over {} probes; values drawn from \
             [-{VALUE_WINDOW}, {VALUE_WINDOW}]; a pass is evidence, not proof",
            samples
        ),
    }
}
