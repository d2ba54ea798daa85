use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Draws `n` examples. With `stratified`, every class contributes `⌊n/k⌋`
/// or `⌈n/k⌉` examples (which classes get the extra one is seeded). The
/// result is shuffled and its transform chain records the draw.
pub fn subset(ds: &Dataset, n: usize, stratified: bool, seed: u64) -> Result<Dataset> {
    let total = ds.len();
    if n > total {
        return Err(Error::invalid(format!(
            "subset of {n} requested from {total} examples"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("subset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if n == total {
        (0..total).collect()
    } else if stratified {
        let k = ds.num_classes;
        let mut by_class = vec![Vec::new(); k];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut class_order: Vec<usize> = (0..k).collect();
        class_order.shuffle(&mut rng);
        let mut quota = vec![n / k; k];
        for &c in class_order.iter().take(n % k) {
            quota[c] += 1;
        }
        let mut out = Vec::with_capacity(n);
        for (c, members) in by_class.iter().enumerate() {
            if members.len() < quota[c] {
                return Err(Error::invalid(format!(
                    "class {c} has {} examples, stratified subset needs {}",
                    members.len(),
                    quota[c]
                )));
            }
            let chosen = index::sample(&mut rng, members.len(), quota[c]);
            out.extend(chosen.iter().map(|j| members[j]));
        }
        out
    } else {
        index::sample(&mut rng, total, n).into_vec()
    };
    picked.shuffle(&mut rng);
    let mut out = ds.take(&picked);
    out.meta.transforms.push(format!(
        "subset(n={n},stratified={stratified},seed={seed})"
    ));
    Ok(out)
}
