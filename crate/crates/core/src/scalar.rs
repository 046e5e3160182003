//! Scalar abstraction: `f32` or `f64`.

use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar the whole crate is generic over.
///
/// The helper constructors keep call sites free of `NumCast` noise and tie
/// random sampling to the scalar type, so samplers stay generic without
/// `where StandardNormal: Distribution<R>` bounds spreading everywhere.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(v: f64) -> Self;

    /// Lossy conversion to `f64` (for reporting and serialization).
    fn as_f64(self) -> f64;

    /// One standard-normal draw.
    fn std_normal<G: Rng + ?Sized>(rng: &mut G) -> Self;

    /// One draw from `[0, 1)`.
    fn unit<G: Rng + ?Sized>(rng: &mut G) -> Self;

    /// One draw from `[lo, hi)`.
    fn uniform<G: Rng + ?Sized>(rng: &mut G, lo: Self, hi: Self) -> Self {
        lo + (hi - lo) * Self::unit(rng)
    }

    /// A zero-filled buffer of `len`, recycled from a thread-local pool.
    /// Large buffers otherwise churn mmap on every forward/backward pass.
    fn take_buf(len: usize) -> Vec<Self>;

    /// Returns a buffer to the pool for reuse.
    fn give_buf(buf: Vec<Self>);
}

fn pool_take<T: Copy + Default>(pool: &mut Vec<Vec<T>>, len: usize) -> Vec<T> {
    // prefer the smallest buffer that already fits
    let mut best: Option<usize> = None;
    for (i, b) in pool.iter().enumerate() {
        if b.capacity() >= len && best.is_none_or(|j| b.capacity() < pool[j].capacity()) {
            best = Some(i);
        }
    }
    let mut buf = match best {
        Some(i) => pool.swap_remove(i),
        None => pool.pop().unwrap_or_default(),
    };
    buf.clear();
    buf.resize(len, T::default());
    buf
}

fn pool_give<T>(pool: &mut Vec<Vec<T>>, buf: Vec<T>) {
    if buf.capacity() > 0 && pool.len() < 32 {
        pool.push(buf);
    }
}

macro_rules! impl_real {
    ($t:ty, $pool:ident) => {
        thread_local! {
            static $pool: std::cell::RefCell<Vec<Vec<$t>>> =
                const { std::cell::RefCell::new(Vec::new()) };
        }

        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn std_normal<G: Rng + ?Sized>(rng: &mut G) -> Self {
                rng.sample::<$t, _>(StandardNormal)
            }

            #[inline]
            fn unit<G: Rng + ?Sized>(rng: &mut G) -> Self {
                rng.gen::<$t>()
            }

            fn take_buf(len: usize) -> Vec<Self> {
                $pool.with(|p| pool_take(&mut p.borrow_mut(), len))
            }

            fn give_buf(buf: Vec<Self>) {
                $pool.with(|p| pool_give(&mut p.borrow_mut(), buf));
            }
        }
    };
}

impl_real!(f32, POOL_F32);
impl_real!(f64, POOL_F64);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.25), 0.25);
        assert_eq!(f32::of(0.25), 0.25f32);
        assert_eq!(0.25f64.as_f64(), 0.25);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = f64::uniform(&mut rng, -2.0, 3.0);
            assert!((-2.0..3.0).contains(&x));
        }
    }
}
