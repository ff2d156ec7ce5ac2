use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_partition(ids: &[u64], rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let k = rng.random_range(1..=ids.len().max(1));
    let mut groups = vec![Vec::new(); k];
    for &id in ids {
        groups[rng.random_range(0..k)].push(id);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn label_of(groups: &[Vec<u64>], id: u64) -> usize {
    groups.iter().position(|g| g.contains(&id)).unwrap()
}

/// `(tp, fp, fn)` by visiting every unordered pair.
pub fn enumerate_pairs(ids: &[u64], pred: &[Vec<u64>], truth: &[Vec<u64>]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let p = label_of(pred, ids[i]) == label_of(pred, ids[j]);
            let t = label_of(truth, ids[i]) == label_of(truth, ids[j]);
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}
