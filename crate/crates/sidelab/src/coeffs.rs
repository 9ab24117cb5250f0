//! Coefficient sets for the two equation classes, plus named presets.
//!
//! A [`CoefficientSet`] bundles every structural function appearing in the
//! equations: the diffusion matrix `a`, Wiener mode vectors `phi` and scalars
//! `sigma`, the drift `f(t, x, r, grad r)`, the jump coefficient `g` against
//! the compensated stream, the nonlocal data (`c`, `m`) of the first jump
//! operator, and (`b`, `lambda`) of the second family. Mark spaces for the
//! three atomic measures ride along. All callables are total over the box;
//! structural soundness is checked separately by [`crate::validate`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::Point;
use crate::noise::MarkSpace;

/// Dense d x d matrix in a fixed 2 x 2 carrier (unused entries zero).
pub type Mat = [[f64; 2]; 2];

pub type MatFn = Arc<dyn Fn(f64, Point) -> Mat + Send + Sync>;
pub type ModeVecFn = Arc<dyn Fn(f64, Point, usize) -> Point + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, Point, f64, Point) -> f64 + Send + Sync>;
pub type ModeScalarFn = Arc<dyn Fn(f64, Point, f64, usize) -> f64 + Send + Sync>;
pub type JumpFn = Arc<dyn Fn(f64, Point, usize, f64) -> f64 + Send + Sync>;
pub type MarkVecFn = Arc<dyn Fn(f64, Point, usize) -> Point + Send + Sync>;
pub type MarkScalarFn = Arc<dyn Fn(f64, Point, usize) -> f64 + Send + Sync>;
pub type TimeMarkVecFn = Arc<dyn Fn(f64, usize) -> Point + Send + Sync>;
pub type ScalarFieldFn = Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct CoefficientSet {
    pub dim: usize,
    /// Number of Wiener modes.
    pub modes: usize,
    /// Marks of the compensated jump stream driving `g`.
    pub nu: MarkSpace,
    /// Marks of the first nonlocal operator (shift `c`, density `m`).
    pub pi1: MarkSpace,
    /// Marks of the second nonlocal family (shift `b`, weight `lambda`).
    pub pi2: MarkSpace,
    /// Diffusion matrix a(t, x).
    pub a: MatFn,
    /// Gradient-noise vector phi(t, x, mode).
    pub phi: ModeVecFn,
    /// Drift f(t, x, r, grad).
    pub f: DriftFn,
    /// Zero-order noise sigma(t, x, r, mode).
    pub sigma: ModeScalarFn,
    /// Jump coefficient g(t, x, mark, r).
    pub g: JumpFn,
    /// Shift c(t, x, mark) of the first nonlocal operator.
    pub c: MarkVecFn,
    /// Density m(t, x, mark) of the first nonlocal operator.
    pub m: MarkScalarFn,
    /// Shift b(t, mark) of the second nonlocal family (x-independent).
    pub b: TimeMarkVecFn,
    /// Weight lambda(t, x, mark) of the second nonlocal family.
    pub lambda: MarkScalarFn,
    /// Structural constant K used by the assumption checks.
    pub bound_k: f64,
    /// Square-integrable envelope h(t, x) for the growth condition.
    pub growth_h: ScalarFieldFn,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("modes", &self.modes)
            .field("nu_atoms", &self.nu.len())
            .field("pi1_atoms", &self.pi1.len())
            .field("pi2_atoms", &self.pi2.len())
            .field("bound_k", &self.bound_k)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    /// Everything off: a = 0, phi = 0, f = 0, sigma = 0, g = 0, c = 0,
    /// m = 1, b = 0, lambda = 1, empty mark spaces.
    pub fn zeroed(dim: usize) -> CoefficientSet {
        CoefficientSet {
            dim,
            modes: 0,
            nu: MarkSpace::empty(),
            pi1: MarkSpace::empty(),
            pi2: MarkSpace::empty(),
            a: Arc::new(|_, _| [[0.0; 2]; 2]),
            phi: Arc::new(|_, _, _| [0.0; 2]),
            f: Arc::new(|_, _, _, _| 0.0),
            sigma: Arc::new(|_, _, _, _| 0.0),
            g: Arc::new(|_, _, _, _| 0.0),
            c: Arc::new(|_, _, _| [0.0; 2]),
            m: Arc::new(|_, _, _| 1.0),
            b: Arc::new(|_, _| [0.0; 2]),
            lambda: Arc::new(|_, _, _| 1.0),
            bound_k: 10.0,
            growth_h: Arc::new(|_, _| 0.0),
        }
    }

    /// Identity-scaled diffusion helper.
    pub fn diag(scale: f64) -> Mat {
        [[scale, 0.0], [0.0, scale]]
    }
}

/// Free-form preset parameters (missing keys fall back to defaults).
pub type PresetParams = BTreeMap<String, f64>;

fn par(params: &PresetParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

type Builder = Arc<dyn Fn(&PresetParams) -> Result<CoefficientSet> + Send + Sync>;

/// Name -> coefficient-set builder map, preloaded with the built-in presets
/// and open to user extensions.
pub struct PresetRegistry {
    builders: BTreeMap<String, Builder>,
}

impl PresetRegistry {
    pub fn with_builtins() -> PresetRegistry {
        let mut reg = PresetRegistry {
            builders: BTreeMap::new(),
        };
        reg.register("constant", |p| Ok(constant_preset(p)));
        reg.register("affine", |p| Ok(affine_preset(p)));
        reg.register("trigonometric", |p| Ok(trigonometric_preset(p)));
        reg.register("cubic-drift", |p| Ok(cubic_drift_preset(p)));
        reg.register("counterexample-g", |p| Ok(counterexample_preset(p)));
        reg
    }

    pub fn register(
        &mut self,
        name: &str,
        builder: impl Fn(&PresetParams) -> Result<CoefficientSet> + Send + Sync + 'static,
    ) {
        self.builders.insert(name.to_string(), Arc::new(builder));
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(|s| s.as_str()).collect()
    }

    pub fn build(&self, name: &str, params: &PresetParams) -> Result<CoefficientSet> {
        match self.builders.get(name) {
            Some(b) => b(params),
            None => Err(Error::config(format!(
                "unknown preset {name:?}; available: {}",
                self.names().join(", ")
            ))),
        }
    }
}

/// Constant coefficients; one Wiener mode, one atom per measure.
fn constant_preset(p: &PresetParams) -> CoefficientSet {
    let a0 = par(p, "a0", 1.0);
    let phi0 = par(p, "phi0", 0.5);
    let f0 = par(p, "f0", 0.0);
    let s0 = par(p, "sigma0", 0.0);
    let g0 = par(p, "g0", 0.0);
    let c0 = par(p, "c0", 0.1);
    let m0 = par(p, "m0", 1.0);
    let b0 = par(p, "b0", 0.1);
    let l0 = par(p, "lambda0", 1.0);
    let nu_mass = par(p, "nu_mass", 1.0);
    let pi1_mass = par(p, "pi1_mass", 1.0);
    let pi2_mass = par(p, "pi2_mass", 1.0);
    let mut co = CoefficientSet::zeroed(1);
    co.modes = 1;
    co.nu = MarkSpace::uniform(1, nu_mass).expect("mass");
    co.pi1 = MarkSpace::uniform(1, pi1_mass).expect("mass");
    co.pi2 = MarkSpace::uniform(1, pi2_mass).expect("mass");
    co.a = Arc::new(move |_, _| CoefficientSet::diag(a0));
    co.phi = Arc::new(move |_, _, _| [phi0, 0.0]);
    co.f = Arc::new(move |_, _, _, _| f0);
    co.sigma = Arc::new(move |_, _, _, _| s0);
    co.g = Arc::new(move |_, _, _, _| g0);
    co.c = Arc::new(move |_, _, _| [c0, 0.0]);
    co.m = Arc::new(move |_, _, _| m0);
    co.b = Arc::new(move |_, _| [b0, 0.0]);
    co.lambda = Arc::new(move |_, _, _| l0);
    let h0 = 1.0 + 2.0 * (f0.abs() + s0.abs() + nu_mass.sqrt() * g0.abs());
    co.growth_h = Arc::new(move |_, _| h0);
    co.bound_k = par(p, "K", 10.0);
    co
}

/// Coefficients affine in the solution value r.
fn affine_preset(p: &PresetParams) -> CoefficientSet {
    let f0 = par(p, "f0", 0.0);
    let f1 = par(p, "f1", -1.0);
    let s0 = par(p, "sigma0", 0.0);
    let s1 = par(p, "sigma1", 0.2);
    let g0 = par(p, "g0", 0.0);
    let g1 = par(p, "g1", -0.5);
    let mut co = constant_preset(p);
    co.f = Arc::new(move |_, _, r, _| f0 + f1 * r);
    co.sigma = Arc::new(move |_, _, r, _| s0 + s1 * r);
    co.g = Arc::new(move |_, _, _, r| g0 + g1 * r);
    let nu_mass = co.nu.total_mass();
    co.growth_h = Arc::new(move |_, _| {
        1.0 + 2.0 * (f0.abs() + s0.abs() + nu_mass.sqrt() * g0.abs())
    });
    co
}

/// Smoothly varying coefficients in x; exercises every x-dependence path.
fn trigonometric_preset(p: &PresetParams) -> CoefficientSet {
    use std::f64::consts::PI;
    let a0 = par(p, "a0", 1.0);
    let phi0 = par(p, "phi0", 0.5);
    let f0 = par(p, "f0", 1.0);
    let f1 = par(p, "f1", 0.5);
    let s0 = par(p, "sigma0", 0.2);
    let c0 = par(p, "c0", 0.1);
    let b0 = par(p, "b0", 0.1);
    // Comparison structure wants |1 - lambda| dominated by the jump size
    // bound, so the default oscillation stays below b0.
    let l1 = par(p, "lambda1", 0.05);
    let mut co = constant_preset(p);
    co.a = Arc::new(move |_, x| CoefficientSet::diag(a0 * (1.0 + 0.5 * (2.0 * PI * x[0]).sin())));
    co.phi = Arc::new(move |_, x, _| [phi0 * (PI * x[0]).cos(), 0.0]);
    co.f = Arc::new(move |_, x, r, _| f0 * (PI * x[0]).sin() - f1 * r);
    co.sigma = Arc::new(move |_, x, _, _| s0 * (PI * x[0]).cos());
    co.c = Arc::new(move |_, _, _| [c0, 0.0]);
    co.m = Arc::new(move |_, x, _| 1.0 + 0.3 * (PI * x[0]).cos());
    co.b = Arc::new(move |_, _| [b0, 0.0]);
    co.lambda = Arc::new(move |_, x, _| 1.0 + l1 * (PI * x[0]).sin());
    co.growth_h = Arc::new(move |_, _| 1.0 + 2.0 * (f0.abs() + s0.abs()));
    co
}

/// Dissipative cubic drift f = f0 - cubic * r^3.
fn cubic_drift_preset(p: &PresetParams) -> CoefficientSet {
    let f0 = par(p, "f0", 0.0);
    let cubic = par(p, "cubic", 1.0);
    let mut co = constant_preset(p);
    co.f = Arc::new(move |_, _, r, _| f0 - cubic * r * r * r);
    // Envelope covering |f| on the validator's sampling window |r| <= 2.
    co.growth_h = Arc::new(move |_, _| 1.0 + f0.abs() + 8.0 * cubic.abs());
    co
}

/// The flip counterexample: g = -2r, everything else silent; a single jump
/// atom of mass `intensity`.
fn counterexample_preset(p: &PresetParams) -> CoefficientSet {
    let intensity = par(p, "intensity", 1.0);
    let mut co = CoefficientSet::zeroed(1);
    co.nu = MarkSpace::uniform(1, intensity).expect("mass");
    co.g = Arc::new(|_, _, _, r| -2.0 * r);
    co
}
