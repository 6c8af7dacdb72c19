//! Triplet layout for the contrastive loss.
//!
//! A mini-batch is an ordered list of same-speaker pairs. Each pair is
//! joined with the first sample of the following pair as its negative; the
//! last pair wraps around to the first.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// `(anchor, positive, negative)` sample indices into one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatchLayout {
    pub triplets: Vec<(usize, usize, usize)>,
}

/// Builds the triplets for `pairs`, where `speaker_of[i]` is the speaker of
/// sample `i`.
pub fn make_triplet_batch<S: PartialEq + std::fmt::Debug>(
    pairs: &[(usize, usize)],
    speaker_of: &[S],
) -> Result<TripletBatchLayout> {
    if pairs.len() < 2 {
        return Err(Error::Layout(format!(
            "need at least two pairs to form negatives, got {}",
            pairs.len()
        )));
    }
    let spk = |i: usize| {
        speaker_of
            .get(i)
            .ok_or_else(|| Error::Layout(format!("sample {i} has no speaker label")))
    };
    for &(a, b) in pairs {
        if spk(a)? != spk(b)? {
            return Err(Error::Layout(format!(
                "pair ({a}, {b}) mixes speakers {:?} and {:?}",
                spk(a)?,
                spk(b)?
            )));
        }
    }
    let mut triplets = Vec::with_capacity(pairs.len());
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let next = pairs[(i + 1) % pairs.len()].0;
        if spk(next)? == spk(a)? {
            return Err(Error::Layout(format!(
                "pairs {i} and {} share speaker {:?}",
                (i + 1) % pairs.len(),
                spk(a)?
            )));
        }
        triplets.push((a, b, next));
    }
    Ok(TripletBatchLayout { triplets })
}

/// Groups `samples` (`(sample, speaker)`) into mini-batches of at most
/// `pairs_per_batch` same-speaker pairs, with all speakers inside a batch
/// distinct. Samples left without a partner, or pairs that cannot join a
/// batch with at least one other speaker, are dropped for this round.
pub fn pair_batches(
    samples: &[(usize, usize)],
    pairs_per_batch: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<(usize, usize)>> {
    assert!(pairs_per_batch >= 2, "a batch needs at least two pairs");
    let mut speakers: Vec<usize> = samples.iter().map(|s| s.1).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let mut queues: Vec<(usize, Vec<(usize, usize)>)> = speakers
        .iter()
        .map(|&s| {
            let mut mine: Vec<usize> = samples.iter().filter(|x| x.1 == s).map(|x| x.0).collect();
            mine.shuffle(rng);
            let pairs = mine.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            (s, pairs)
        })
        .collect();
    queues.shuffle(rng);

    let mut batches = Vec::new();
    loop {
        // speakers with the most remaining pairs go first so that no single
        // speaker is left over at the end
        let mut order: Vec<usize> = (0..queues.len())
            .filter(|&i| !queues[i].1.is_empty())
            .collect();
        if order.len() < 2 {
            break;
        }
        order.sort_by_key(|&i| std::cmp::Reverse(queues[i].1.len()));
        order.truncate(pairs_per_batch);
        order.shuffle(rng);
        let batch = order.iter().map(|&i| queues[i].1.pop().unwrap()).collect();
        batches.push(batch);
    }
    batches
}
