//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-12) over the sampled coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares `backward` against central differences on `coords` coordinates,
/// visiting parameters round-robin so every tensor gets sampled.
///
/// `loss` must build a scalar on the given tape deterministically; it is
/// evaluated twice at the base point to confirm that.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    mut loss: F,
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>, loss: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store)?;
        Ok(tape.value(l).item().as_f64())
    };

    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let base = tape.value(l).item().as_f64();
    let again = eval(store, &mut loss)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }
    let grads = tape.backward(l)?;
    let pg = tape.param_grads(&grads);

    let ids: Vec<ParamId> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for n in 0..coords {
        let id = ids[n % ids.len()];
        let len = store.value(id).len();
        let j = rng.random_range(0..len);
        let analytic = pg.get(id).map_or(0.0, |g| g.data()[j].as_f64());

        let orig = store.value(id).data()[j];
        let h = T::lit(eps);
        store.value_mut(id).data_mut()[j] = orig + h;
        let plus = eval(store, &mut loss)?;
        store.value_mut(id).data_mut()[j] = orig - h;
        let minus = eval(store, &mut loss)?;
        store.value_mut(id).data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(id).to_string(), j));
        }
    }
    Ok(report)
}
