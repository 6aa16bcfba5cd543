//! The noise-prediction interface shared by the analytic oracle, the toy
//! network, its quantized counterpart and the synthetic noise injector.

use crate::linalg::Point;

/// A noise predictor `eps(x_t, t)`. Implementations must be pure functions
/// of their inputs so that sampling under a fixed seed is reproducible.
pub trait EpsilonSource: Sync {
    fn epsilon(&self, x: &Point, t: usize) -> Point;

    fn epsilon_batch(&self, xs: &[Point], t: usize) -> Vec<Point> {
        xs.iter().map(|x| self.epsilon(x, t)).collect()
    }
}

impl<S: EpsilonSource + ?Sized> EpsilonSource for &S {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        (**self).epsilon(x, t)
    }
}

impl<S: EpsilonSource + ?Sized> EpsilonSource for Box<S> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        (**self).epsilon(x, t)
    }
}

/// Adds a fixed offset to every prediction of the wrapped source.
#[derive(Debug, Clone)]
pub struct Offset<S> {
    pub inner: S,
    pub shift: Point,
}

impl<S: EpsilonSource> EpsilonSource for Offset<S> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        let e = self.inner.epsilon(x, t);
        [e[0] + self.shift[0], e[1] + self.shift[1]]
    }
}

/// Any `Fn(&Point, usize) -> Point` is a source.
pub struct FnSource<F>(pub F);

impl<F: Fn(&Point, usize) -> Point + Sync> EpsilonSource for FnSource<F> {
    fn epsilon(&self, x: &Point, t: usize) -> Point {
        (self.0)(x, t)
    }
}
