//! Path-wise ledger for the positive-part energy identity.
//!
//! A [`SemimartingaleDriver`] holds a time tabulation of the four driving
//! objects: the initial state psi, the dual drift v*, the Wiener integrands
//! h^k, and the jump amplitudes K(z). [`build_path`] turns one driver plus
//! one noise realization into a discrete cadlag path, and [`ito_residual`]
//! re-reads that path and books both sides of
//!
//! ```text
//! |u_t+|^2 = |psi+|^2 + 2 int <v*_s, u_s+> ds
//!          + 2 int (h_s^k, u_s+) dw_s^k
//!          + 2 int int (K_s(z), u_{s-}+) Ntilde(dz, ds)
//!          + int sum_k |1_{u_s > 0} h_s^k|^2 ds
//!          + int int [ |(u_{s-} + K_s(z))+|^2 - |u_{s-}+|^2
//!                      - 2 (K_s(z), u_{s-}+) ] N(dz, ds)
//! ```
//!
//! term by term, reporting the running gap between the two sides.
//!
//! Discrete conventions, applied identically on both sides:
//!
//! - The path is pure-jump: nothing moves between breakpoints. Each grid
//!   step contributes one accrual transition at its right endpoint, carrying
//!   v* dt + sum_k h^k dw^k minus the jump compensator, and each jump event
//!   contributes its own transition at the exact jump time. A jump landing
//!   exactly on a grid time is applied after that accrual.
//! - ds integrals use left-point quadrature: every booking is evaluated at
//!   the left limit of its own transition.
//! - The quadratic Wiener column books the realized square
//!   (sum_k h^k dw^k)^2 on {u > 0} rather than sum_k |h^k|^2 dt. The
//!   quadratic variation of a pure-jump path is exactly the sum of its
//!   squared increments, so sign-stable martingale transitions cancel to
//!   rounding and the residual isolates the ds-quadrature error, which is
//!   first order in dt. In particular, when v* equals the compensator
//!   density sum_z nu(z) K(z) pointwise, every accrual increment is a pure
//!   martingale increment and the residual sits at rounding scale for any
//!   step size.
//! - The indicator in that column is the strict one, 1_{u > 0}; an exact
//!   zero at a node is a measure-zero tie under nondegenerate noise.
//!
//! Jump transitions are booked from realized increments (recorded left limit
//! and recorded post-jump value), so they contribute no residual at any
//! step size; what remains measures the accrual bookkeeping alone.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;
use crate::field::{Field, Grid, Point};
use crate::noise::{NoiseRealization, TimeGrid};
use crate::ops::check_same_grid;
use crate::regfun::RegParams;
use crate::solver::{JumpLogEntry, NormRow, PathRecord, RowLabel, TrajEntry};

/// Time tabulation of (psi, v*, h^k, K(z)) on a step grid, all sampled at
/// left endpoints. Shapes: `vstar[step]`, `h[step][mode]`, `big_k[step][mark]`.
#[derive(Debug, Clone)]
pub struct SemimartingaleDriver {
    psi: Field,
    vstar: Vec<Field>,
    h: Vec<Vec<Field>>,
    big_k: Vec<Vec<Field>>,
}

impl SemimartingaleDriver {
    /// Validates shapes (one tabulation entry per step, rectangular mode and
    /// mark lists), grid agreement, and finiteness of the discrete
    /// square-integrability sum.
    pub fn new(
        psi: Field,
        vstar: Vec<Field>,
        h: Vec<Vec<Field>>,
        big_k: Vec<Vec<Field>>,
    ) -> Result<SemimartingaleDriver> {
        let steps = vstar.len();
        if steps == 0 {
            return Err(Error::config("driver tabulation must cover at least one step"));
        }
        if h.len() != steps || big_k.len() != steps {
            return Err(Error::config(format!(
                "driver tabulations disagree: {} drift, {} Wiener, {} jump entries",
                steps,
                h.len(),
                big_k.len()
            )));
        }
        let modes = h[0].len();
        let marks = big_k[0].len();
        for k in 0..steps {
            if h[k].len() != modes || big_k[k].len() != marks {
                return Err(Error::config(format!(
                    "ragged driver tabulation at step {k}"
                )));
            }
            check_same_grid(&psi, &vstar[k])?;
            for f in &h[k] {
                check_same_grid(&psi, f)?;
            }
            for f in &big_k[k] {
                check_same_grid(&psi, f)?;
            }
        }
        let driver = SemimartingaleDriver { psi, vstar, h, big_k };
        if !driver.square_mass().is_finite() {
            return Err(Error::domain("driver square-integrability sum overflows"));
        }
        Ok(driver)
    }

    /// Tabulates closures `(t, x)` or `(t, x, index)` at the left endpoint of
    /// every step of `time`.
    pub fn tabulate(
        psi: Field,
        time: &TimeGrid,
        modes: usize,
        marks: usize,
        vstar: impl Fn(f64, Point) -> f64,
        h: impl Fn(f64, Point, usize) -> f64,
        big_k: impl Fn(f64, Point, usize) -> f64,
    ) -> Result<SemimartingaleDriver> {
        let grid = psi.grid().clone();
        let steps = time.steps();
        let mut vs = Vec::with_capacity(steps);
        let mut hs = Vec::with_capacity(steps);
        let mut ks = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = time.t(k);
            vs.push(Field::from_fn(&grid, |x| vstar(t, x))?);
            hs.push(
                (0..modes)
                    .map(|m| Field::from_fn(&grid, |x| h(t, x, m)))
                    .collect::<Result<Vec<_>>>()?,
            );
            ks.push(
                (0..marks)
                    .map(|z| Field::from_fn(&grid, |x| big_k(t, x, z)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        SemimartingaleDriver::new(psi, vs, hs, ks)
    }

    pub fn psi(&self) -> &Field {
        &self.psi
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.psi.grid()
    }

    pub fn steps(&self) -> usize {
        self.vstar.len()
    }

    pub fn modes(&self) -> usize {
        self.h[0].len()
    }

    pub fn marks(&self) -> usize {
        self.big_k[0].len()
    }

    pub fn vstar(&self, step: usize) -> &Field {
        &self.vstar[step]
    }

    pub fn h(&self, step: usize) -> &[Field] {
        &self.h[step]
    }

    pub fn big_k(&self, step: usize) -> &[Field] {
        &self.big_k[step]
    }

    /// Discrete analogue of the square-integrability condition on the
    /// drivers: the unweighted sum of squared L2 norms over the tabulation.
    pub fn square_mass(&self) -> f64 {
        let sq = |f: &Field| {
            let n = f.l2();
            n * n
        };
        let mut acc = sq(&self.psi);
        for k in 0..self.steps() {
            acc += sq(&self.vstar[k]);
            acc += self.h[k].iter().map(&sq).sum::<f64>();
            acc += self.big_k[k].iter().map(&sq).sum::<f64>();
        }
        acc
    }

    fn check_noise(&self, noise: &NoiseRealization) -> Result<()> {
        if noise.time.steps() != self.steps() {
            return Err(Error::Resolution(format!(
                "driver tabulated on {} steps, noise on {}",
                self.steps(),
                noise.time.steps()
            )));
        }
        if noise.wiener.modes() < self.modes() {
            return Err(Error::config(format!(
                "driver wants {} Wiener modes, realization has {}",
                self.modes(),
                noise.wiener.modes()
            )));
        }
        if self.marks() > 0 {
            match noise.mark_spaces.first() {
                None => {
                    return Err(Error::config(
                        "driver has jump amplitudes but the realization has no jump stream",
                    ))
                }
                Some(space) if space.len() != self.marks() => {
                    return Err(Error::config(format!(
                        "driver tabulates {} marks, mark space has {}",
                        self.marks(),
                        space.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn norm_row(time: f64, label: RowLabel, u: &Field) -> NormRow {
    let norms = u.norms();
    NormRow {
        time,
        label,
        l2: norms.l2,
        h1: norms.h1,
        pos_l2: u.positive_part().l2(),
    }
}

/// Assembles the discrete path
///
/// ```text
/// u_t = psi + int v*_s ds + sum_k int h_s^k dw_s^k + int int K_s(z) Ntilde(dz, ds)
/// ```
///
/// against jump stream 0 of the realization: left-point quadrature for the
/// ds and compensator integrals, exact summation of h^k dw^k per step, exact
/// jump amplitudes at the recorded jump times. The returned trajectory keeps
/// every breakpoint field, initial state included.
pub fn build_path(
    driver: &SemimartingaleDriver,
    noise: &NoiseRealization,
) -> Result<PathRecord> {
    driver.check_noise(noise)?;
    let time = &noise.time;
    let dt = time.dt();
    let weights: &[f64] = if driver.marks() > 0 {
        noise.mark_spaces[0].weights()
    } else {
        &[]
    };

    let mut u = driver.psi().clone();
    let mut trajectory = vec![TrajEntry {
        time: 0.0,
        label: RowLabel::Initial,
        mark: None,
        value: u.clone(),
    }];
    let mut rows = vec![norm_row(0.0, RowLabel::Initial, &u)];
    let mut jumps = Vec::new();

    let apply_jump = |u: &mut Field,
                          trajectory: &mut Vec<TrajEntry>,
                          rows: &mut Vec<NormRow>,
                          jumps: &mut Vec<JumpLogEntry>,
                          step: usize,
                          time_j: f64,
                          mark: usize| {
        let pre_l2 = u.l2();
        u.axpy(1.0, &driver.big_k[step][mark]);
        jumps.push(JumpLogEntry {
            time: time_j,
            stream: 0,
            mark,
            pre_l2,
            post_l2: u.l2(),
        });
        trajectory.push(TrajEntry {
            time: time_j,
            label: RowLabel::Jump,
            mark: Some(mark),
            value: u.clone(),
        });
        rows.push(norm_row(time_j, RowLabel::Jump, u));
    };

    for k in 0..time.steps() {
        let (t0, t1) = (time.t(k), time.t(k + 1));
        let events = if driver.marks() > 0 {
            noise.stream(0).events_in(t0, t1)
        } else {
            &[]
        };
        let boundary = events.partition_point(|ev| ev.time < t1);
        for ev in &events[..boundary] {
            apply_jump(&mut u, &mut trajectory, &mut rows, &mut jumps, k, ev.time, ev.mark);
        }

        u.axpy(dt, &driver.vstar[k]);
        for (m, hf) in driver.h[k].iter().enumerate() {
            u.axpy(noise.wiener.dw(k, m), hf);
        }
        for (z, kf) in driver.big_k[k].iter().enumerate() {
            u.axpy(-dt * weights[z], kf);
        }
        trajectory.push(TrajEntry {
            time: t1,
            label: RowLabel::Accrual,
            mark: None,
            value: u.clone(),
        });
        rows.push(norm_row(t1, RowLabel::Accrual, &u));

        for ev in &events[boundary..] {
            apply_jump(&mut u, &mut trajectory, &mut rows, &mut jumps, k, ev.time, ev.mark);
        }
    }

    Ok(PathRecord {
        rows,
        jumps,
        snapshots: Vec::new(),
        trajectory,
        final_field: u,
    })
}

/// One breakpoint of the ledger: the left side, the five cumulative right
/// side columns (the sixth term, |psi+|^2, is the row 0 left side), and the
/// running residual LHS - RHS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRow {
    pub time: f64,
    pub lhs: f64,
    pub t_drift: f64,
    pub t_wiener: f64,
    pub t_jump_mart: f64,
    pub t_wiener_quad: f64,
    pub t_jump_corr: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct LedgerReport {
    /// |psi+|^2, the constant first term of the right side.
    pub initial: f64,
    /// One row per breakpoint, aligned with the trajectory of the path.
    pub rows: Vec<LedgerRow>,
    pub max_abs_residual: f64,
}

impl LedgerReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "time,lhs,t_drift,t_wiener,t_jump_mart,t_wiener_quad,t_jump_corr,residual"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.time,
                r.lhs,
                r.t_drift,
                r.t_wiener,
                r.t_jump_mart,
                r.t_wiener_quad,
                r.t_jump_corr,
                r.residual
            )?;
        }
        Ok(())
    }
}

/// Which limit the jump martingale pairing is evaluated at. The identity
/// demands the left limit (the integrand is predictable); the right-limit
/// variant exists only as a negative control and must break the exact case.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) enum JumpPairing {
    LeftLimit,
    RightLimit,
}

/// Books every term of the identity along a path produced by [`build_path`]
/// from the same driver and noise. Rows align one-to-one with the path
/// trajectory; all integrands are evaluated at left limits.
pub fn ito_residual(
    path: &PathRecord,
    driver: &SemimartingaleDriver,
    noise: &NoiseRealization,
) -> Result<LedgerReport> {
    ito_residual_impl(path, driver, noise, JumpPairing::LeftLimit, None)
}

/// Regularized variant of [`ito_residual`]: the sharp objects (u+)^2, u+,
/// and 1_{u > 0} are replaced by 2 gamma_delta(u), beta_delta(u), and
/// alpha_delta(u), with the jump correction column booking the full second
/// difference of 2 gamma_delta. As delta -> 0 each column converges to its
/// sharp counterpart; on paths whose node values stay outside (0, delta]
/// the quadratic pieces line up and the report is exact in the same sense
/// as the sharp one.
pub fn ito_residual_delta(
    path: &PathRecord,
    driver: &SemimartingaleDriver,
    noise: &NoiseRealization,
    reg: RegParams,
) -> Result<LedgerReport> {
    ito_residual_impl(path, driver, noise, JumpPairing::LeftLimit, Some(reg))
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn ito_residual_with_pairing(
    path: &PathRecord,
    driver: &SemimartingaleDriver,
    noise: &NoiseRealization,
    pairing: JumpPairing,
) -> Result<LedgerReport> {
    ito_residual_impl(path, driver, noise, pairing, None)
}

fn ito_residual_impl(
    path: &PathRecord,
    driver: &SemimartingaleDriver,
    noise: &NoiseRealization,
    pairing: JumpPairing,
    reg: Option<RegParams>,
) -> Result<LedgerReport> {
    driver.check_noise(noise)?;
    let mismatch = |msg: &str| Error::domain(format!("driver/path mismatch: {msg}"));

    let first = path
        .trajectory
        .first()
        .ok_or_else(|| mismatch("empty trajectory (was the path built with fields kept?)"))?;
    if first.label != RowLabel::Initial {
        return Err(mismatch("trajectory does not start at the initial state"));
    }
    check_same_grid(&first.value, driver.psi())?;
    if first.value.values() != driver.psi().values() {
        return Err(mismatch("initial state differs from the driver's psi"));
    }

    let cell = driver.grid().cell();
    let time = &noise.time;
    let dt = time.dt();
    let weights: &[f64] = if driver.marks() > 0 {
        noise.mark_spaces[0].weights()
    } else {
        &[]
    };

    // Sharp objects and their regularized stand-ins. `energy` is the left
    // side, `weight` the pairing weight playing u+, `mass` the node factor
    // in the quadratic Wiener column.
    let energy = |u: &Field| -> Result<f64> {
        match reg {
            None => {
                let p = u.positive_part();
                p.inner(&p)
            }
            Some(rp) => {
                let mut acc = 0.0;
                for &v in u.values() {
                    acc += 2.0 * rp.gamma(v)?;
                }
                Ok(acc * cell)
            }
        }
    };
    let weight = |u: &Field| -> Result<Field> {
        match reg {
            None => Ok(u.positive_part()),
            Some(rp) => {
                let vals = u
                    .values()
                    .iter()
                    .map(|&v| rp.beta(v))
                    .collect::<Result<Vec<_>>>()?;
                Field::from_values(u.grid(), vals)
            }
        }
    };
    let mass = |v: f64| -> Result<f64> {
        match reg {
            None => Ok(if v > 0.0 { 1.0 } else { 0.0 }),
            Some(rp) => rp.alpha(v),
        }
    };

    let initial = energy(&first.value)?;
    let mut lhs_prev = initial;
    let mut prev = &first.value;
    let mut step = 0usize;

    let (mut drift, mut wiener, mut jump_mart, mut quad, mut corr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut rows = vec![LedgerRow {
        time: first.time,
        lhs: initial,
        t_drift: 0.0,
        t_wiener: 0.0,
        t_jump_mart: 0.0,
        t_wiener_quad: 0.0,
        t_jump_corr: 0.0,
        residual: 0.0,
    }];
    let mut max_abs = 0.0f64;

    for entry in &path.trajectory[1..] {
        let left = weight(prev)?;
        let lhs = energy(&entry.value)?;
        match entry.label {
            RowLabel::Initial => return Err(mismatch("duplicate initial entry")),
            RowLabel::Accrual => {
                if step >= driver.steps() {
                    return Err(mismatch("more accruals than tabulated steps"));
                }
                let expected = time.t(step + 1);
                if (entry.time - expected).abs() > 1e-12 * time.t_end().max(1.0) {
                    return Err(mismatch("accrual time off the step grid"));
                }
                drift += 2.0 * dt * driver.vstar[step].inner(&left)?;
                let dws: Vec<f64> = (0..driver.modes())
                    .map(|m| noise.wiener.dw(step, m))
                    .collect();
                for (m, hf) in driver.h[step].iter().enumerate() {
                    wiener += 2.0 * dws[m] * hf.inner(&left)?;
                }
                for (z, kf) in driver.big_k[step].iter().enumerate() {
                    jump_mart -= 2.0 * dt * weights[z] * kf.inner(&left)?;
                }
                if driver.modes() > 0 {
                    let mut acc = 0.0;
                    for (x, &v) in prev.values().iter().enumerate() {
                        let mut s = 0.0;
                        for (m, hf) in driver.h[step].iter().enumerate() {
                            s += hf.values()[x] * dws[m];
                        }
                        acc += mass(v)? * s * s;
                    }
                    quad += acc * cell;
                }
                step += 1;
            }
            RowLabel::Jump => {
                if entry.mark.map_or(true, |z| z >= driver.marks()) {
                    return Err(mismatch("jump entry without a valid mark"));
                }
                let delta = entry.value.zip_with(prev, |a, b| a - b);
                let pair = match pairing {
                    JumpPairing::LeftLimit => delta.inner(&left)?,
                    JumpPairing::RightLimit => delta.inner(&weight(&entry.value)?)?,
                };
                jump_mart += 2.0 * pair;
                // The correction keeps the displayed left-limit form even
                // under the negative control, so the control shifts the sum
                // of the two jump columns instead of reshuffling it.
                corr += lhs - lhs_prev - 2.0 * delta.inner(&left)?;
            }
        }
        let residual = lhs - (initial + drift + wiener + jump_mart + quad + corr);
        max_abs = max_abs.max(residual.abs());
        rows.push(LedgerRow {
            time: entry.time,
            lhs,
            t_drift: drift,
            t_wiener: wiener,
            t_jump_mart: jump_mart,
            t_wiener_quad: quad,
            t_jump_corr: corr,
            residual,
        });
        lhs_prev = lhs;
        prev = &entry.value;
    }

    if step != driver.steps() {
        return Err(mismatch("trajectory ends before the tabulation does"));
    }

    Ok(LedgerReport {
        initial,
        rows,
        max_abs_residual: max_abs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// Realized step size, t_end / steps.
    pub dt: f64,
    pub seed: u64,
    pub max_residual: f64,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of log mean-max-residual against log dt. Only
    /// meaningful while the residuals sit above the rounding floor.
    pub slope: f64,
}

/// Runs the ledger over a dt ladder and a seed list. `setup` builds the
/// driver and the matching noise realization for one (seed, time grid)
/// pair; each requested dt is realized as t_end / round(t_end / dt).
/// Rows come back in (dt, seed) order regardless of worker count.
pub fn refinement_sweep<F>(
    setup: F,
    seeds: &[u64],
    dts: &[f64],
    t_end: f64,
) -> Result<SweepTable>
where
    F: Fn(u64, &TimeGrid) -> Result<(SemimartingaleDriver, NoiseRealization)> + Send + Sync,
{
    if dts.len() < 2 {
        return Err(Error::config("refinement sweep needs at least two dt values"));
    }
    if seeds.is_empty() {
        return Err(Error::config("refinement sweep needs at least one seed"));
    }
    for &dt in dts {
        if !dt.is_finite() || dt <= 0.0 || dt > t_end {
            return Err(Error::config(format!("bad sweep step size {dt}")));
        }
    }

    let jobs = dts.len() * seeds.len();
    let rows = exec::map_indexed(jobs, |j| -> Result<SweepRow> {
        let (di, si) = (j / seeds.len(), j % seeds.len());
        let steps = ((t_end / dts[di]).round() as usize).max(1);
        let time = TimeGrid::new(t_end, steps)?;
        let (driver, noise) = setup(seeds[si], &time)?;
        let path = build_path(&driver, &noise)?;
        let report = ito_residual(&path, &driver, &noise)?;
        Ok(SweepRow {
            dt: time.dt(),
            seed: seeds[si],
            max_residual: report.max_abs_residual,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // Mean of max residuals per dt, floored away from log(0).
    let mut xs = Vec::with_capacity(dts.len());
    let mut ys = Vec::with_capacity(dts.len());
    for (di, chunk) in rows.chunks(seeds.len()).enumerate() {
        let mean = chunk.iter().map(|r| r.max_residual).sum::<f64>() / seeds.len() as f64;
        xs.push(rows[di * seeds.len()].dt.ln());
        ys.push(mean.max(1e-300).ln());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;

    Ok(SweepTable { rows, slope })
}
