//! Randomness plumbing for the diffusion processes.
//!
//! Every stochastic operation in this crate draws through the [`NoiseSource`]
//! trait instead of an `Rng` directly. That indirection buys two things:
//! seeded reproducibility through a single choke point, and record/replay,
//! which lets a test rerun an entire sampling trajectory with the *same*
//! randomness while transforming it (e.g. rotating every Gaussian draw) to
//! check equivariance claims deterministically.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::StandardNormal;

/// A stream of random draws with just the two primitives diffusion needs.
pub trait NoiseSource {
    /// An array of i.i.d. standard-normal samples with the given shape.
    fn standard_normal(&mut self, shape: &[usize]) -> ArrayD<f64>;

    /// One uniform sample in `[0, 1)`.
    fn uniform(&mut self) -> f64;
}

/// The production source: draws from any `rand` RNG (seeded ChaCha in
/// practice, so runs are reproducible from the seed alone).
pub struct RngNoise<R: Rng> {
    rng: R,
}

impl<R: Rng> RngNoise<R> {
    pub fn new(rng: R) -> Self {
        RngNoise { rng }
    }
}

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn standard_normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let draws: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        ArrayD::from_shape_vec(shape.to_vec(), draws)
            .expect("length matches requested shape by construction")
    }

    fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// One recorded draw, in stream order.
#[derive(Debug, Clone)]
pub enum NoiseDraw {
    Normal(ArrayD<f64>),
    Uniform(f64),
}

/// Wraps another source and remembers every draw it hands out.
pub struct RecordingNoise<'a> {
    inner: &'a mut dyn NoiseSource,
    pub record: Vec<NoiseDraw>,
}

impl<'a> RecordingNoise<'a> {
    pub fn new(inner: &'a mut dyn NoiseSource) -> Self {
        RecordingNoise { inner, record: Vec::new() }
    }
}

impl NoiseSource for RecordingNoise<'_> {
    fn standard_normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let draw = self.inner.standard_normal(shape);
        self.record.push(NoiseDraw::Normal(draw.clone()));
        draw
    }

    fn uniform(&mut self) -> f64 {
        let u = self.inner.uniform();
        self.record.push(NoiseDraw::Uniform(u));
        u
    }
}

/// Replays a recorded stream, optionally mapping each normal draw through a
/// transform (uniform draws are replayed untouched).
///
/// Replay is a debugging/testing tool: consuming draws out of order, with the
/// wrong shape, or past the end of the record is a programming error and
/// panics with a description of the mismatch.
pub struct ReplayNoise {
    draws: std::vec::IntoIter<NoiseDraw>,
    transform: Option<Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>>,
    position: usize,
}

impl ReplayNoise {
    pub fn new(record: Vec<NoiseDraw>) -> Self {
        ReplayNoise { draws: record.into_iter(), transform: None, position: 0 }
    }

    /// Replay with `f` applied to every normal draw.
    pub fn with_transform(
        record: Vec<NoiseDraw>,
        f: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Self {
        ReplayNoise { draws: record.into_iter(), transform: Some(Box::new(f)), position: 0 }
    }

    fn next_draw(&mut self) -> NoiseDraw {
        self.position += 1;
        match self.draws.next() {
            Some(d) => d,
            None => panic!("noise replay exhausted at draw {}", self.position),
        }
    }
}

impl NoiseSource for ReplayNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> ArrayD<f64> {
        match self.next_draw() {
            NoiseDraw::Normal(a) => {
                assert_eq!(
                    a.shape(),
                    shape,
                    "noise replay shape mismatch at draw {}",
                    self.position
                );
                match &self.transform {
                    Some(f) => f(&a),
                    None => a,
                }
            }
            NoiseDraw::Uniform(_) => {
                panic!("noise replay expected a normal draw at {}, found uniform", self.position)
            }
        }
    }

    fn uniform(&mut self) -> f64 {
        match self.next_draw() {
            NoiseDraw::Uniform(u) => u,
            NoiseDraw::Normal(_) => {
                panic!("noise replay expected a uniform draw at {}, found normal", self.position)
            }
        }
    }
}
