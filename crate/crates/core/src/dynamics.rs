//! Diagonal admittance control.
//!
//! The controller integrates the compliant motion `x_c` from
//!
//! ```text
//! M (ẍ_c − ẍ_d) + D (ẋ_c − ẋ_d) + K (x_c − x_d) = f
//! ```
//!
//! with diagonal `M`, `K` and `D = 4·sqrt(M K)` (damping ratio 2). The motion
//! controller downstream is treated as ideal, so `x_c` is the executed pose.

use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Largest supported number of generalized coordinates.
pub const MAX_DOF: usize = 6;

/// Controller period in seconds.
pub const CONTROL_DT: f64 = 0.002;

/// Fixed-capacity generalized vector (`1..=MAX_DOF` entries).
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector {
    len: usize,
    data: [f64; MAX_DOF],
}

impl Vector {
    pub fn zeros(dof: usize) -> Self {
        assert!((1..=MAX_DOF).contains(&dof), "dof {dof} out of range");
        Vector { len: dof, data: [0.0; MAX_DOF] }
    }

    pub fn splat(dof: usize, value: f64) -> Self {
        let mut v = Self::zeros(dof);
        v.as_mut_slice().fill(value);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() > MAX_DOF {
            return Err(Error::DimensionMismatch { expected: MAX_DOF, got: values.len() });
        }
        let mut v = Self::zeros(values.len());
        v.as_mut_slice().copy_from_slice(values);
        Ok(v)
    }

    #[inline]
    pub fn dof(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data[..self.len]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data[..self.len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.as_slice().iter()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.iter().map(|x| x * x).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|x| *x = f(*x));
        out
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.len, other.len);
        let mut out = *self;
        for (o, b) in out.as_mut_slice().iter_mut().zip(other.iter()) {
            *o = f(*o, *b);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|a| a * s)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.as_mut_slice()[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::from_slice(&v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.as_slice().to_vec()
    }
}

macro_rules! generalized {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vector);

        impl $name {
            pub fn zeros(dof: usize) -> Self {
                $name(Vector::zeros(dof))
            }

            pub fn from_slice(values: &[f64]) -> Result<Self> {
                Vector::from_slice(values).map($name)
            }

            #[inline]
            pub fn dof(&self) -> usize {
                self.0.dof()
            }

            #[inline]
            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn is_finite(&self) -> bool {
                self.0.is_finite()
            }
        }

        impl Index<usize> for $name {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.0[i]
            }
        }

        impl IndexMut<usize> for $name {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.0[i]
            }
        }
    };
}

generalized!(
    /// Generalized position (m for translations, rad for rotations).
    Pose
);
generalized!(
    /// Generalized velocity (m/s, rad/s).
    Twist
);
generalized!(
    /// Generalized force (N, N·m).
    Wrench
);

/// `d_i = 4·sqrt(m_i·k_i)` for every axis.
pub fn derive_damping(m: &[f64], k: &[f64]) -> Result<Vector> {
    if m.len() != k.len() {
        return Err(Error::DimensionMismatch { expected: m.len(), got: k.len() });
    }
    check_positive(m)?;
    check_positive(k)?;
    let mut d = Vector::zeros(m.len());
    for (i, (mi, ki)) in m.iter().zip(k).enumerate() {
        d[i] = 4.0 * math::sqrt(mi * ki);
    }
    Ok(d)
}

fn check_positive(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        Some(axis) => Err(Error::InvalidGain { axis, value: values[axis] }),
        None => Ok(()),
    }
}

/// Diagonal inertia, stiffness and the damping derived from them.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "GainSpec", into = "GainSpec")]
pub struct GainSet {
    m: Vector,
    k: Vector,
    d: Vector,
}

#[derive(Serialize, Deserialize)]
struct GainSpec {
    m: Vector,
    k: Vector,
}

impl TryFrom<GainSpec> for GainSet {
    type Error = Error;
    fn try_from(s: GainSpec) -> Result<Self> {
        GainSet::new(s.m.as_slice(), s.k.as_slice())
    }
}

impl From<GainSet> for GainSpec {
    fn from(g: GainSet) -> Self {
        GainSpec { m: g.m, k: g.k }
    }
}

impl GainSet {
    pub fn new(m: &[f64], k: &[f64]) -> Result<Self> {
        let d = derive_damping(m, k)?;
        Ok(GainSet { m: Vector::from_slice(m)?, k: Vector::from_slice(k)?, d })
    }

    /// Unit inertia on every axis; only the stiffness is commanded.
    pub fn with_unit_inertia(k: &[f64]) -> Result<Self> {
        let m = Vector::splat(k.len().max(1), 1.0);
        Self::new(m.as_slice(), k)
    }

    pub fn dof(&self) -> usize {
        self.m.dof()
    }

    pub fn inertia(&self) -> &Vector {
        &self.m
    }

    pub fn stiffness(&self) -> &Vector {
        &self.k
    }

    pub fn damping(&self) -> &Vector {
        &self.d
    }
}

/// Compliant pose and velocity being integrated.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct AdmittanceState {
    pub pose: Pose,
    pub twist: Twist,
}

impl AdmittanceState {
    pub fn at_rest(pose: Pose) -> Self {
        AdmittanceState { pose, twist: Twist::zeros(pose.dof()) }
    }
}

/// Reference trajectory sample fed to the controller.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct DesiredMotion {
    pub pose: Pose,
    pub twist: Twist,
    pub accel: Vector,
}

impl DesiredMotion {
    /// A setpoint with zero desired velocity and acceleration.
    pub fn hold(pose: Pose) -> Self {
        let dof = pose.dof();
        DesiredMotion { pose, twist: Twist::zeros(dof), accel: Vector::zeros(dof) }
    }
}

/// Compliant acceleration `ẍ_c` prescribed by the admittance law.
pub fn admittance_accel(
    state: &AdmittanceState,
    desired: &DesiredMotion,
    f: &Wrench,
    gains: &GainSet,
) -> Vector {
    let dof = gains.dof();
    let mut a = Vector::zeros(dof);
    for i in 0..dof {
        let spring = gains.k[i] * (state.pose[i] - desired.pose[i]);
        let damper = gains.d[i] * (state.twist[i] - desired.twist[i]);
        a[i] = desired.accel[i] + (f[i] - damper - spring) / gains.m[i];
    }
    a
}

/// One semi-implicit Euler step of the admittance law: velocity first, then
/// position with the updated velocity.
pub fn admittance_step(
    state: &AdmittanceState,
    desired: &DesiredMotion,
    f: &Wrench,
    gains: &GainSet,
    dt: f64,
) -> Result<AdmittanceState> {
    let dof = gains.dof();
    for got in [
        state.pose.dof(),
        state.twist.dof(),
        desired.pose.dof(),
        desired.twist.dof(),
        desired.accel.dof(),
        f.dof(),
    ] {
        if got != dof {
            return Err(Error::DimensionMismatch { expected: dof, got });
        }
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::usage("dt must be positive"));
    }
    if !(state.pose.is_finite()
        && state.twist.is_finite()
        && desired.pose.is_finite()
        && desired.twist.is_finite()
        && desired.accel.is_finite()
        && f.is_finite())
    {
        return Err(Error::NonFinite("admittance input"));
    }

    let a = admittance_accel(state, desired, f, gains);
    let mut next = *state;
    for i in 0..dof {
        next.twist[i] += a[i] * dt;
        next.pose[i] += next.twist[i] * dt;
    }
    if !(next.pose.is_finite() && next.twist.is_finite()) {
        return Err(Error::NonFinite("admittance state"));
    }
    Ok(next)
}
