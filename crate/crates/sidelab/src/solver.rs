//! Path-wise time integration of the two equation classes.
//!
//! One accrual step is semi-implicit: the divergence-form part is treated
//! with implicitness `theta_implicit` (default fully implicit) and solved
//! matrix-free by conjugate gradient, while the nonlocal operators, the
//! drift, the Wiener modes, and the jump compensator enter explicitly at the
//! step's left endpoint. Steps are split at exact jump times; a jump applies
//! its amplitude to the left limit, after any accrual that lands on the same
//! instant. Wiener increments of a split step are allocated proportionally
//! to sub-step length.
//!
//! The recorded path is the full breakpoint sequence: every accrual boundary
//! and both sides of every jump, so downstream consumers can treat it as a
//! pure-jump process with exact left limits.

use std::collections::VecDeque;
use std::io::Write;

use crate::coeffs::CoefficientSet;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::noise::{NoiseRealization, TimeGrid};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    /// Drift L + I1 + f, Wiener modes, compensated jumps with coefficient g.
    First,
    /// Drift L + I1 + I2 + J - K + f, Wiener modes, jumps S against the
    /// compensated mark measure.
    Second,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub equation: Equation,
    pub time: TimeGrid,
    /// Implicitness of the divergence-form term, in [0, 1].
    pub theta_implicit: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// L2-norm cap; exceeding it aborts the path with a diagnostic.
    pub blowup_cap: f64,
    /// Index of the jump stream in the NoiseRealization driving this
    /// equation's jumps.
    pub jump_stream: usize,
    /// Keep every breakpoint field in the record (memory-heavy).
    pub keep_fields: bool,
    /// Snapshot every k-th grid step (0 = none); endpoints always included
    /// when enabled.
    pub snapshot_stride: usize,
    /// Diagnostic switch: drop the J - K drift pair of the second equation.
    pub include_jk: bool,
}

impl SolverConfig {
    pub fn new(equation: Equation, time: TimeGrid) -> SolverConfig {
        SolverConfig {
            equation,
            time,
            theta_implicit: 1.0,
            cg_tol: 1e-10,
            cg_max_iter: 10_000,
            blowup_cap: 1e6,
            jump_stream: 0,
            keep_fields: false,
            snapshot_stride: 0,
            include_jk: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowLabel {
    Initial,
    Accrual,
    Jump,
}

impl RowLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RowLabel::Initial => "initial",
            RowLabel::Accrual => "accrual",
            RowLabel::Jump => "jump",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormRow {
    pub time: f64,
    pub label: RowLabel,
    pub l2: f64,
    pub h1: f64,
    pub pos_l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpLogEntry {
    pub time: f64,
    pub stream: usize,
    pub mark: usize,
    pub pre_l2: f64,
    pub post_l2: f64,
}

/// One breakpoint of the recorded path (kept only with `keep_fields`).
#[derive(Debug, Clone)]
pub struct TrajEntry {
    pub time: f64,
    pub label: RowLabel,
    pub mark: Option<usize>,
    pub value: Field,
}

#[derive(Debug, Clone)]
pub struct PathRecord {
    pub rows: Vec<NormRow>,
    pub jumps: Vec<JumpLogEntry>,
    pub snapshots: Vec<(f64, Field)>,
    pub trajectory: Vec<TrajEntry>,
    pub final_field: Field,
}

impl PathRecord {
    pub fn write_norms_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "time,label,l2,h1,pos_l2")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.time,
                r.label.as_str(),
                r.l2,
                r.h1,
                r.pos_l2
            )?;
        }
        Ok(())
    }

    pub fn write_jumps_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "time,stream,mark,pre_l2,post_l2")?;
        for j in &self.jumps {
            writeln!(
                w,
                "{},{},{},{},{}",
                j.time, j.stream, j.mark, j.pre_l2, j.post_l2
            )?;
        }
        Ok(())
    }
}

/// What one `Stepper::advance` call did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepEvent {
    Accrued {
        from: f64,
        to: f64,
        /// Grid step completed by this accrual, if it ended on a grid time.
        completed_step: Option<usize>,
    },
    Jumped {
        time: f64,
        mark: usize,
        pre_l2: f64,
        post_l2: f64,
    },
}

enum Item {
    Accrue {
        to: f64,
        frac: f64,
        grid_step: usize,
        completes: Option<usize>,
    },
    Jump {
        time: f64,
        mark: usize,
    },
}

/// Matrix-free conjugate gradient for symmetric positive-definite `apply`.
/// Returns the solution and the iteration count.
pub fn cg_solve(
    apply: impl Fn(&Field) -> Result<Field>,
    b: &Field,
    x0: Field,
    tol: f64,
    max_iter: usize,
) -> Result<(Field, usize)> {
    let mut x = x0;
    let ax = apply(&x)?;
    let mut r = b.clone();
    r.axpy(-1.0, &ax);
    let mut p = r.clone();
    let mut rr = r.inner(&r)?;
    let bb = b.inner(b)?.max(f64::MIN_POSITIVE);
    let tol2 = tol * tol * bb;
    let mut iters = 0;
    while rr > tol2 {
        if iters >= max_iter {
            return Err(Error::LinearSolve(format!(
                "conjugate gradient stalled after {max_iter} iterations \
                 (residual ratio {:.3e})",
                (rr / bb).sqrt()
            )));
        }
        let ap = apply(&p)?;
        let pap = p.inner(&ap)?;
        if pap <= 0.0 {
            return Err(Error::LinearSolve(format!(
                "operator is not positive definite (p.Ap = {pap:.3e})"
            )));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rr_new = r.inner(&r)?;
        let beta = rr_new / rr;
        rr = rr_new;
        p.scale_in_place(beta);
        p.axpy(1.0, &r);
        iters += 1;
    }
    Ok((x, iters))
}

/// Incremental path integrator; `solve` drives it, and coupled runs can
/// drive two of them in lockstep over the same noise.
pub struct Stepper<'a> {
    cfg: &'a SolverConfig,
    co: &'a CoefficientSet,
    noise: &'a NoiseRealization,
    pub time: f64,
    pub u: Field,
    queue: VecDeque<Item>,
    next_grid_step: usize,
    transitions: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(
        cfg: &'a SolverConfig,
        co: &'a CoefficientSet,
        psi: &Field,
        noise: &'a NoiseRealization,
    ) -> Result<Stepper<'a>> {
        if !(0.0..=1.0).contains(&cfg.theta_implicit) {
            return Err(Error::config("theta_implicit must lie in [0, 1]"));
        }
        if cfg.cg_tol <= 0.0 || cfg.blowup_cap <= 0.0 {
            return Err(Error::config("tolerances and caps must be positive"));
        }
        if noise.time.steps() != cfg.time.steps()
            || (noise.time.t_end() - cfg.time.t_end()).abs() > 1e-12
        {
            return Err(Error::Resolution(format!(
                "noise is sampled on {} steps to t={}, config wants {} to t={}",
                noise.time.steps(),
                noise.time.t_end(),
                cfg.time.steps(),
                cfg.time.t_end()
            )));
        }
        if noise.wiener.modes() < co.modes {
            return Err(Error::config(format!(
                "coefficients use {} Wiener modes, noise carries {}",
                co.modes,
                noise.wiener.modes()
            )));
        }
        let expected_marks = match cfg.equation {
            Equation::First => co.nu.len(),
            Equation::Second => co.pi2.len(),
        };
        if expected_marks > 0 {
            match noise.mark_spaces.get(cfg.jump_stream) {
                Some(ms) if ms.len() == expected_marks => {}
                Some(ms) => {
                    return Err(Error::config(format!(
                        "jump stream {} has {} marks, coefficients expect {expected_marks}",
                        cfg.jump_stream,
                        ms.len()
                    )))
                }
                None => {
                    return Err(Error::config(format!(
                        "noise has no jump stream {}",
                        cfg.jump_stream
                    )))
                }
            }
        }
        if cfg.theta_implicit > 0.0 {
            // Conjugate gradient requires a symmetric diffusion matrix.
            let g = psi.grid();
            for probe in [0usize, g.len() / 2, g.len() - 1] {
                let am = (co.a)(0.0, g.x(probe));
                for i in 0..co.dim {
                    for j in 0..i {
                        if (am[i][j] - am[j][i]).abs() > 1e-12 * (1.0 + am[i][j].abs()) {
                            return Err(Error::config(
                                "implicit stepping needs a symmetric diffusion matrix a",
                            ));
                        }
                    }
                }
            }
        }
        Ok(Stepper {
            cfg,
            co,
            noise,
            time: 0.0,
            u: psi.clone(),
            queue: VecDeque::new(),
            next_grid_step: 0,
            transitions: 0,
        })
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    fn refill(&mut self) {
        while self.queue.is_empty() && self.next_grid_step < self.cfg.time.steps() {
            let k = self.next_grid_step;
            self.next_grid_step += 1;
            let t0 = self.cfg.time.t(k);
            let t1 = self.cfg.time.t(k + 1);
            let dt = t1 - t0;
            let uses_jumps = match self.cfg.equation {
                Equation::First => !self.co.nu.is_empty(),
                Equation::Second => !self.co.pi2.is_empty(),
            };
            let events: &[_] = if uses_jumps {
                self.noise.stream(self.cfg.jump_stream).events_in(t0, t1)
            } else {
                &[]
            };
            let mut cursor = t0;
            for ev in events {
                if ev.time > cursor {
                    self.queue.push_back(Item::Accrue {
                        to: ev.time,
                        frac: (ev.time - cursor) / dt,
                        grid_step: k,
                        completes: None,
                    });
                    cursor = ev.time;
                }
                self.queue.push_back(Item::Jump {
                    time: ev.time,
                    mark: ev.mark,
                });
            }
            if t1 > cursor {
                self.queue.push_back(Item::Accrue {
                    to: t1,
                    frac: (t1 - cursor) / dt,
                    grid_step: k,
                    completes: Some(k + 1),
                });
            } else if let Some(Item::Jump { .. }) = self.queue.back() {
                // Jump landed exactly on the grid time; the step is still
                // complete. Mark the preceding accrual as completing it.
                for item in self.queue.iter_mut().rev() {
                    if let Item::Accrue { completes, .. } = item {
                        *completes = Some(k + 1);
                        break;
                    }
                }
            }
        }
    }

    /// Performs one transition. Returns None when the horizon is reached.
    pub fn advance(&mut self) -> Result<Option<StepEvent>> {
        self.refill();
        let item = match self.queue.pop_front() {
            Some(it) => it,
            None => return Ok(None),
        };
        let event = match item {
            Item::Accrue {
                to,
                frac,
                grid_step,
                completes,
            } => {
                let from = self.time;
                self.accrue(to, frac, grid_step)?;
                StepEvent::Accrued {
                    from,
                    to,
                    completed_step: completes,
                }
            }
            Item::Jump { time, mark } => {
                let pre_l2 = self.u.l2();
                let amp = match self.cfg.equation {
                    Equation::First => ops::jump_g(&self.u, self.co, time, mark)?,
                    Equation::Second => ops::apply_s(&self.u, self.co, time, mark)?,
                };
                self.u.axpy(1.0, &amp);
                self.time = time;
                StepEvent::Jumped {
                    time,
                    mark,
                    pre_l2,
                    post_l2: self.u.l2(),
                }
            }
        };
        self.transitions += 1;
        let norm = self.u.l2();
        if !norm.is_finite() || norm > self.cfg.blowup_cap {
            return Err(Error::BlowUp {
                step: self.next_grid_step.saturating_sub(1),
                time: self.time,
                norm,
            });
        }
        Ok(Some(event))
    }

    fn accrue(&mut self, to: f64, frac: f64, grid_step: usize) -> Result<()> {
        let t0 = self.time;
        let dt = to - t0;
        let co = self.co;
        let u = &self.u;
        let theta = self.cfg.theta_implicit;

        let mut expl = u.clone();
        if theta < 1.0 {
            let au = ops::apply_l(u, co, t0)?;
            expl.axpy(dt * (1.0 - theta), &au);
        }
        expl.axpy(dt, &ops::apply_i1(u, co, t0)?);
        expl.axpy(dt, &ops::drift_f(u, co, t0)?);
        match self.cfg.equation {
            Equation::First => {
                for z in 0..co.nu.len() {
                    let gz = ops::jump_g(u, co, t0, z)?;
                    expl.axpy(-dt * co.nu.weight(z), &gz);
                }
            }
            Equation::Second => {
                expl.axpy(dt, &ops::apply_i2(u, co, t0)?);
                if self.cfg.include_jk {
                    // Combined so that J = K cancels exactly, keeping the
                    // reduced configuration bit-identical.
                    let j = ops::apply_j(u, co, t0)?;
                    let k = ops::apply_k(u, co, t0)?;
                    let jk = j.zip_with(&k, |a, b| a - b);
                    expl.axpy(dt, &jk);
                }
                for z in 0..co.pi2.len() {
                    let sz = ops::apply_s(u, co, t0, z)?;
                    expl.axpy(-dt * co.pi2.weight(z), &sz);
                }
            }
        }
        if co.modes > 0 {
            let gm = ops::apply_g_modes(u, co, t0)?;
            for (k, gk) in gm.iter().enumerate() {
                let dwk = self.noise.wiener.dw(grid_step, k) * frac;
                expl.axpy(dwk, gk);
            }
        }

        self.u = if theta > 0.0 {
            let apply = |v: &Field| -> Result<Field> {
                let av = ops::apply_l(v, co, t0)?;
                let mut out = v.clone();
                out.axpy(-theta * dt, &av);
                Ok(out)
            };
            let x0 = expl.clone();
            cg_solve(apply, &expl, x0, self.cfg.cg_tol, self.cfg.cg_max_iter)
                .map_err(|e| {
                    Error::LinearSolve(format!("step at t={t0}: {e}"))
                })?
                .0
        } else {
            expl
        };
        self.time = to;
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

/// Integrates the configured equation over the full horizon. Deterministic
/// given (config, coefficients, initial field, noise).
pub fn solve(
    cfg: &SolverConfig,
    co: &CoefficientSet,
    psi: &Field,
    noise: &NoiseRealization,
) -> Result<PathRecord> {
    let mut st = Stepper::new(cfg, co, psi, noise)?;
    let mut rows = vec![norm_row(0.0, RowLabel::Initial, &st.u)];
    let mut jumps = Vec::new();
    let mut snapshots = Vec::new();
    let mut trajectory = Vec::new();
    if cfg.keep_fields {
        trajectory.push(TrajEntry {
            time: 0.0,
            label: RowLabel::Initial,
            mark: None,
            value: st.u.clone(),
        });
    }
    if cfg.snapshot_stride > 0 {
        snapshots.push((0.0, st.u.clone()));
    }
    while let Some(ev) = st.advance()? {
        let (label, mark) = match ev {
            StepEvent::Accrued {
                to, completed_step, ..
            } => {
                rows.push(norm_row(to, RowLabel::Accrual, &st.u));
                if let Some(k) = completed_step {
                    if cfg.snapshot_stride > 0
                        && (k % cfg.snapshot_stride == 0 || k == cfg.time.steps())
                    {
                        snapshots.push((to, st.u.clone()));
                    }
                }
                (RowLabel::Accrual, None)
            }
            StepEvent::Jumped {
                time,
                mark,
                pre_l2,
                post_l2,
            } => {
                rows.push(norm_row(time, RowLabel::Jump, &st.u));
                jumps.push(JumpLogEntry {
                    time,
                    stream: cfg.jump_stream,
                    mark,
                    pre_l2,
                    post_l2,
                });
                (RowLabel::Jump, Some(mark))
            }
        };
        if cfg.keep_fields {
            trajectory.push(TrajEntry {
                time: st.time,
                label,
                mark,
                value: st.u.clone(),
            });
        }
    }
    Ok(PathRecord {
        rows,
        jumps,
        snapshots,
        trajectory,
        final_field: st.u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::CoefficientSet;
    use crate::field::Grid;
    use crate::noise::{JumpEvent, JumpStream, MarkSpace, WienerIncrements};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn silent_noise(time: TimeGrid, modes: usize) -> NoiseRealization {
        NoiseRealization {
            seed: 0,
            path: 0,
            time,
            wiener: WienerIncrements::from_values(
                modes,
                time.steps(),
                vec![0.0; modes * time.steps()],
            )
            .unwrap(),
            mark_spaces: Vec::new(),
            streams: Vec::new(),
        }
    }

    fn with_stream(mut noise: NoiseRealization, marks: MarkSpace, events: Vec<JumpEvent>) -> NoiseRealization {
        noise.mark_spaces.push(marks);
        noise.streams.push(JumpStream { events });
        noise
    }

    fn heat_error(n: usize, steps: usize) -> f64 {
        let g = Grid::line(0.0, 1.0, n).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        let time = TimeGrid::new(0.1, steps).unwrap();
        let cfg = SolverConfig::new(Equation::First, time);
        let noise = silent_noise(time, 0);
        let rec = solve(&cfg, &co, &psi, &noise).unwrap();
        let want = (-PI * PI * 0.1f64).exp() * psi.l2();
        (rec.final_field.l2() - want).abs() / want
    }

    #[test]
    fn heat_mode_decays_at_the_right_rate() {
        let coarse = heat_error(63, 100);
        let fine = heat_error(127, 200);
        assert!(coarse < 0.01, "coarse error {coarse}");
        assert!(fine < coarse, "refinement should reduce error: {fine} vs {coarse}");
    }

    #[test]
    fn spatially_flat_problem_reduces_to_scalar_euler() {
        let g = Grid::line(0.0, 1.0, 19).unwrap();
        let psi = Field::from_fn(&g, |_| 0.8).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.f = Arc::new(|_, _, r, _| 1.5 - r);
        let time = TimeGrid::new(1.0, 64).unwrap();
        let cfg = SolverConfig::new(Equation::First, time);
        let rec = solve(&cfg, &co, &psi, &silent_noise(time, 0)).unwrap();
        let mut r = 0.8;
        let dt = time.dt();
        for k in 0..time.steps() {
            let _ = k;
            r += dt * (1.5 - r);
        }
        for &v in rec.final_field.values() {
            assert!((v - r).abs() <= 1e-12, "{v} vs scalar {r}");
        }
    }

    #[test]
    fn zero_coefficients_keep_the_initial_field() {
        let g = Grid::line(0.0, 1.0, 33).unwrap();
        let psi = Field::from_fn(&g, |x| (3.0 * x[0]).sin()).unwrap();
        let co = CoefficientSet::zeroed(1);
        let time = TimeGrid::new(0.5, 20).unwrap();
        let cfg = SolverConfig::new(Equation::First, time);
        let rec = solve(&cfg, &co, &psi, &silent_noise(time, 0)).unwrap();
        assert_eq!(rec.final_field.values(), psi.values());
        assert_eq!(rec.rows.len(), 21);
    }

    #[test]
    fn inert_jump_machinery_is_bit_identical_to_none() {
        let g = Grid::line(0.0, 1.0, 41).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let time = TimeGrid::new(0.2, 40).unwrap();

        let mut plain = CoefficientSet::zeroed(1);
        plain.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        plain.f = Arc::new(|_, _, r, _| -r * r * r);

        let mut wired = plain.clone();
        wired.nu = MarkSpace::uniform(1, 2.0).unwrap();
        wired.g = Arc::new(|_, _, _, _| 0.0);

        let cfg = SolverConfig::new(Equation::First, time);
        let noise_plain = silent_noise(time, 0);
        let noise_wired = with_stream(silent_noise(time, 0), wired.nu.clone(), vec![]);
        let a = solve(&cfg, &plain, &psi, &noise_plain).unwrap();
        let b = solve(&cfg, &wired, &psi, &noise_wired).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_field.values(), b.final_field.values());
    }

    #[test]
    fn second_equation_with_unit_lambda_drops_jk_bit_for_bit() {
        let g = Grid::line(0.0, 1.0, 41).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let time = TimeGrid::new(0.2, 32).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        co.pi2 = MarkSpace::uniform(2, 1.0).unwrap();
        co.b = Arc::new(|_, z| [0.05 + 0.05 * z as f64, 0.0]);
        // lambda is already identically 1 in the zeroed set.
        let noise = with_stream(
            silent_noise(time, 0),
            co.pi2.clone(),
            vec![
                JumpEvent { time: 0.07, mark: 0 },
                JumpEvent { time: 0.141, mark: 1 },
            ],
        );
        let mut cfg = SolverConfig::new(Equation::Second, time);
        let with_jk = solve(&cfg, &co, &psi, &noise).unwrap();
        cfg.include_jk = false;
        let without_jk = solve(&cfg, &co, &psi, &noise).unwrap();
        assert_eq!(with_jk.rows, without_jk.rows);
        assert_eq!(
            with_jk.final_field.values(),
            without_jk.final_field.values()
        );
        assert_eq!(with_jk.jumps.len(), 2);
    }

    #[test]
    fn injected_jump_applies_the_shift_difference_to_the_left_limit() {
        let g = Grid::line(0.0, 1.0, 51).unwrap();
        let psi = Field::from_fn(&g, |x| x[0] * (1.0 - x[0])).unwrap();
        let time = TimeGrid::new(0.1, 10).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(0.5));
        co.pi2 = MarkSpace::uniform(1, 1.0).unwrap();
        co.b = Arc::new(|_, _| [0.25, 0.0]);
        let noise = with_stream(
            silent_noise(time, 0),
            co.pi2.clone(),
            vec![JumpEvent { time: 0.035, mark: 0 }],
        );
        let mut cfg = SolverConfig::new(Equation::Second, time);
        cfg.keep_fields = true;
        let rec = solve(&cfg, &co, &psi, &noise).unwrap();
        let jump_at = rec
            .trajectory
            .iter()
            .position(|e| e.label == RowLabel::Jump)
            .unwrap();
        let pre = &rec.trajectory[jump_at - 1].value;
        let post = &rec.trajectory[jump_at].value;
        for (lin, (&got, &was)) in post.values().iter().zip(pre.values()).enumerate() {
            let x = g.x(lin);
            let want = was + (pre.interpolate([x[0] + 0.25, 0.0]) - was);
            assert!((got - want).abs() <= 1e-15 * (1.0 + want.abs()));
        }
        assert_eq!(rec.trajectory[jump_at - 1].time, rec.trajectory[jump_at].time);
    }

    #[test]
    fn compensator_matches_direct_quadrature_oracle() {
        let g = Grid::line(0.0, 1.0, 61).unwrap();
        let psi = Field::from_fn(&g, |x| (2.0 * PI * x[0]).sin() + 0.3).unwrap();
        let time = TimeGrid::new(0.01, 1).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.pi2 = MarkSpace::uniform(2, 1.7).unwrap();
        co.b = Arc::new(|_, z| [0.04 * (1.0 + z as f64), 0.0]);
        co.lambda = Arc::new(|_, x, _| 1.0 + 0.05 * x[0]);
        let mut cfg = SolverConfig::new(Equation::Second, time);
        cfg.theta_implicit = 0.0;
        let noise = with_stream(silent_noise(time, 0), co.pi2.clone(), vec![]);
        let rec = solve(&cfg, &co, &psi, &noise).unwrap();

        // Oracle: u1 = u0 + dt * (I2 + J - K - sum_z w_z S_z) u0, assembled
        // from a test-local quadrature of each displayed term.
        let dt = time.dt();
        let mut want = psi.clone();
        let i2 = ops::apply_i2(&psi, &co, 0.0).unwrap();
        let j = ops::apply_j(&psi, &co, 0.0).unwrap();
        let k = ops::apply_k(&psi, &co, 0.0).unwrap();
        want.axpy(dt, &i2);
        want.axpy(dt, &j.zip_with(&k, |a, b| a - b));
        for z in 0..co.pi2.len() {
            let mut vals = vec![0.0; g.len()];
            for (lin, v) in vals.iter_mut().enumerate() {
                let x = g.x(lin);
                let b = (co.b)(0.0, z);
                let y = [x[0] + b[0], 0.0];
                *v = (co.lambda)(0.0, y, z) * psi.interpolate(y)
                    - (co.lambda)(0.0, x, z) * psi.values()[lin]
                    + ((co.lambda)(0.0, x, z) - 1.0) * psi.values()[lin];
            }
            let comp = Field::from_values(&g, vals).unwrap();
            want.axpy(-dt * co.pi2.weight(z), &comp);
        }
        for (a, b) in rec.final_field.values().iter().zip(want.values()) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let g = Grid::line(0.0, 1.0, 33).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let time = TimeGrid::new(0.3, 48).unwrap();
        let marks = MarkSpace::uniform(2, 1.0).unwrap();
        let noise =
            NoiseRealization::sample(time, 1, std::slice::from_ref(&marks), 42, 3).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        co.modes = 1;
        co.phi = Arc::new(|_, _, _| [0.3, 0.0]);
        co.sigma = Arc::new(|_, _, r, _| 0.2 * r);
        co.nu = marks;
        co.g = Arc::new(|_, _, z, r| -0.2 * r * (1.0 + z as f64));
        let cfg = SolverConfig::new(Equation::First, time);
        let a = solve(&cfg, &co, &psi, &noise).unwrap();
        let b = solve(&cfg, &co, &psi, &noise).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.jumps, b.jumps);
        assert_eq!(a.final_field.values(), b.final_field.values());
    }

    #[test]
    fn linear_dynamics_superpose_on_coupled_noise() {
        let g = Grid::line(0.0, 1.0, 49).unwrap();
        let psi1 = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let psi2 = Field::from_fn(&g, |x| x[0] * (1.0 - x[0]) * (5.0 * x[0]).cos()).unwrap();
        let time = TimeGrid::new(0.25, 50).unwrap();
        let marks = MarkSpace::uniform(1, 2.0).unwrap();
        let noise =
            NoiseRealization::sample(time, 1, std::slice::from_ref(&marks), 7, 0).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        co.modes = 1;
        co.phi = Arc::new(|_, _, _| [0.2, 0.0]);
        co.sigma = Arc::new(|_, _, r, _| 0.3 * r);
        co.f = Arc::new(|_, _, r, gr| -0.5 * r + 0.1 * gr[0]);
        co.nu = marks;
        co.g = Arc::new(|_, _, _, r| -0.4 * r);
        let cfg = SolverConfig::new(Equation::First, time);

        let (alpha, beta) = (2.0, -0.7);
        let mut combo = psi1.clone();
        combo.scale_in_place(alpha);
        combo.axpy(beta, &psi2);
        let direct = solve(&cfg, &co, &combo, &noise).unwrap();
        let r1 = solve(&cfg, &co, &psi1, &noise).unwrap();
        let r2 = solve(&cfg, &co, &psi2, &noise).unwrap();
        let mut sum = r1.final_field.clone();
        sum.scale_in_place(alpha);
        sum.axpy(beta, &r2.final_field);
        let scale = direct.final_field.l2().max(1.0);
        for (a, b) in direct.final_field.values().iter().zip(sum.values()) {
            assert!(
                (a - b).abs() <= 1e-6 * scale,
                "superposition violated: {a} vs {b}"
            );
        }
    }

    #[test]
    fn dt_halving_shows_strong_self_convergence() {
        let g = Grid::line(0.0, 1.0, 63).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let fine_steps = 320;
        let t_end = 0.2;
        let marks = MarkSpace::uniform(1, 3.0).unwrap();
        let fine_time = TimeGrid::new(t_end, fine_steps).unwrap();
        let fine = NoiseRealization::sample(fine_time, 1, std::slice::from_ref(&marks), 11, 5)
            .unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, _| CoefficientSet::diag(1.0));
        co.modes = 1;
        co.phi = Arc::new(|_, _, _| [0.3, 0.0]);
        co.sigma = Arc::new(|_, _, r, _| 0.4 * r);
        co.f = Arc::new(|_, _, r, _| -r);
        co.nu = marks;
        co.g = Arc::new(|_, _, _, r| -0.3 * r);

        let run_at = |factor: usize| {
            let steps = fine_steps / factor;
            let time = TimeGrid::new(t_end, steps).unwrap();
            let noise = NoiseRealization {
                seed: fine.seed,
                path: fine.path,
                time,
                wiener: fine.wiener.coarsen(factor).unwrap(),
                mark_spaces: fine.mark_spaces.clone(),
                streams: fine.streams.clone(),
            };
            let cfg = SolverConfig::new(Equation::First, time);
            solve(&cfg, &co, &psi, &noise).unwrap().final_field
        };

        let u4 = run_at(4);
        let u2 = run_at(2);
        let u1 = run_at(1);
        let mut d42 = u4.clone();
        d42.axpy(-1.0, &u2);
        let mut d21 = u2.clone();
        d21.axpy(-1.0, &u1);
        let e_coarse = d42.l2();
        let e_fine = d21.l2();
        assert!(
            e_fine < 0.8 * e_coarse,
            "self-convergence gap should shrink: {e_fine} vs {e_coarse}"
        );
    }

    #[test]
    fn blow_up_guard_names_the_step() {
        let g = Grid::line(0.0, 1.0, 21).unwrap();
        let psi = Field::from_fn(&g, |x| (PI * x[0]).sin()).unwrap();
        let time = TimeGrid::new(1.0, 10).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.f = Arc::new(|_, _, r, _| 1e4 * r);
        let mut cfg = SolverConfig::new(Equation::First, time);
        cfg.blowup_cap = 1e3;
        match solve(&cfg, &co, &psi, &silent_noise(time, 0)) {
            Err(Error::BlowUp { norm, .. }) => assert!(norm > 1e3),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn cg_solves_the_implicit_system_to_tolerance() {
        let g = Grid::line(0.0, 1.0, 77).unwrap();
        let b = Field::from_fn(&g, |x| (7.0 * x[0]).sin() + x[0]).unwrap();
        let mut co = CoefficientSet::zeroed(1);
        co.a = Arc::new(|_, x| CoefficientSet::diag(1.0 + 0.3 * (4.0 * x[0]).cos()));
        let apply = |v: &Field| -> crate::error::Result<Field> {
            let av = ops::apply_l(v, &co, 0.0)?;
            let mut out = v.clone();
            out.axpy(-0.01, &av);
            Ok(out)
        };
        let (x, iters) = cg_solve(&apply, &b, Field::zeros(&g), 1e-12, 500).unwrap();
        assert!(iters > 0);
        let mut resid = apply(&x).unwrap();
        resid.axpy(-1.0, &b);
        assert!(resid.l2() <= 1e-10 * b.l2());
    }
}
