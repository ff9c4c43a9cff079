//! The "state, time -> velocity" abstraction shared by the neural field, the
//! closed-form EFM field and the KTS-shaped wrapper.

use crate::error::Result;

pub trait VelocityField {
    /// State dimension.
    fn dim(&self) -> usize;

    /// Writes `v(x, t)` into `out` (`out.len() == self.dim()`).
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// Row-wise velocities for `xs` (`B x dim`) at a common time. Each row
    /// must equal the corresponding single-point [`velocity`](Self::velocity)
    /// bit for bit.
    fn velocity_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.velocity(x, t, o)?;
        }
        Ok(())
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).velocity(x, t, out)
    }

    fn velocity_batch(&self, xs: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).velocity_batch(xs, t, out)
    }
}

/// Adapts a closure `(x, t, out)` into a [`VelocityField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (self.f)(x, t, out);
        Ok(())
    }
}
