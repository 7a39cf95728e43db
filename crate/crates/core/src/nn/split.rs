use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NnError;

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit<I> {
    pub train: Vec<I>,
    pub val: Vec<I>,
    pub test: Vec<I>,
}

/// Seeded shuffle then `floor(r0 n)` train, `floor(r1 n)` validation and the
/// remainder as test.
pub fn split_dataset<I: Clone>(
    ids: &[I],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit<I>, NnError> {
    if ids.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(NnError::InvalidConfig(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = ids.len();
    // The small bias keeps products like 0.1 * 10 from flooring to 0.
    let n_train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = ((ratios[1] * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}
