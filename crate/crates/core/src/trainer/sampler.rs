use rand::seq::SliceRandom;

use crate::emotion::NUM_EMOTIONS;
use crate::rng;

use super::Dataset;

const TAG_SAMPLER: u64 = 0x5A3B;

/// Class-balanced batches for one epoch.
///
/// Each emotion's samples are shuffled, then dealt round-robin across
/// emotions (in a shuffled emotion order) into one stream that is cut into
/// batches. Consecutive positions therefore hold different emotions until a
/// class runs out; a trailing batch that ends up with a single emotion or
/// fewer than `batch_size` samples is dropped.
pub fn epoch_batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stream(&[seed, TAG_SAMPLER, epoch]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_EMOTIONS];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.emotion.index()].push(i);
    }
    for list in &mut by_class {
        list.shuffle(&mut r);
    }
    let mut order: Vec<usize> = (0..NUM_EMOTIONS).collect();
    order.shuffle(&mut r);
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut stream = Vec::with_capacity(data.len());
    for k in 0..longest {
        for &c in &order {
            if let Some(&i) = by_class[c].get(k) {
                stream.push(i);
            }
        }
    }
    stream
        .chunks(batch_size)
        .filter(|b| {
            b.len() == batch_size && {
                let first = data.samples[b[0]].emotion;
                b.iter().any(|&i| data.samples[i].emotion != first)
            }
        })
        .map(<[usize]>::to_vec)
        .collect()
}
