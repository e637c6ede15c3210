use rand::seq::index::sample;

use crate::error::{E3Error, Result};
use crate::rng::stream;
use crate::synthgen::LabeledImage;
use crate::BASELINE_SOURCE;

/// Images kept per generator slot after `k` emerging generators have been
/// absorbed: `⌊M / (2(k+1))⌋`.
pub fn quota(capacity: usize, k: usize) -> usize {
    capacity / (2 * (k + 1))
}

/// Fixed-capacity replay store: `M/2` reals plus equal-sized synthetic slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    reals: Vec<LabeledImage>,
    slots: Vec<(String, Vec<LabeledImage>)>,
    k: usize,
}

impl MemoryBuffer {
    /// `M_0`: `reals` (exactly `M/2`) and one baseline slot of `M/2` images,
    /// drawn uniformly and in equal shares from each baseline generator pool.
    pub fn initial(capacity: usize, reals: Vec<LabeledImage>, baseline_pools: &[&[LabeledImage]], seed: u64) -> Result<Self> {
        if capacity < 4 || !capacity.is_multiple_of(2) {
            return Err(E3Error::config("buffer_capacity", format!("must be even and ≥ 4, got {capacity}")));
        }
        let half = capacity / 2;
        if reals.len() != half {
            return Err(E3Error::Data(format!("buffer needs {half} reals, got {}", reals.len())));
        }
        if baseline_pools.is_empty() {
            return Err(E3Error::Data("no baseline generator pools".into()));
        }
        let n = baseline_pools.len();
        let mut base = Vec::with_capacity(half);
        for (i, pool) in baseline_pools.iter().enumerate() {
            let share = half / n + usize::from(i < half % n);
            base.extend(draw(pool, share, seed, BASELINE_SOURCE, i as u64)?);
        }
        Ok(Self {
            capacity,
            reals,
            slots: vec![(BASELINE_SOURCE.to_string(), base)],
            k: 0,
        })
    }

    /// A buffer holding only reals; used for the degenerate-replay case.
    pub fn reals_only(capacity: usize, reals: Vec<LabeledImage>) -> Result<Self> {
        if capacity < 4 || !capacity.is_multiple_of(2) || reals.len() != capacity / 2 {
            return Err(E3Error::Data("reals_only buffer needs M/2 reals and even M ≥ 4".into()));
        }
        Ok(Self {
            capacity,
            reals,
            slots: Vec::new(),
            k: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn quota(&self) -> usize {
        quota(self.capacity, self.k)
    }

    pub fn reals(&self) -> &[LabeledImage] {
        &self.reals
    }

    pub fn slots(&self) -> &[(String, Vec<LabeledImage>)] {
        &self.slots
    }

    pub fn synthetic_len(&self) -> usize {
        self.slots.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.reals.len() + self.synthetic_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every buffered image: synthetic slots in order, then reals.
    pub fn images(&self) -> Vec<LabeledImage> {
        let mut out: Vec<LabeledImage> = self.slots.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        out.extend(self.reals.iter().cloned());
        out
    }

    /// `M_k` from `M_{k−1}`: every existing slot keeps `P_k` images drawn
    /// uniformly without replacement, and a new slot takes `P_k` images drawn
    /// uniformly from `new_data`. Reals are untouched.
    pub fn update(&self, new_data: &[LabeledImage], slot_id: &str, seed: u64) -> Result<Self> {
        if new_data.is_empty() {
            return Err(E3Error::Data("new generator data is empty".into()));
        }
        if self.slots.iter().any(|(id, _)| id == slot_id) {
            return Err(E3Error::Contract(format!("buffer already holds slot `{slot_id}`")));
        }
        let k = self.k + 1;
        let p = quota(self.capacity, k);
        if new_data.len() < p {
            return Err(E3Error::Data(format!(
                "|D_k| = {} is smaller than the slot quota {p}",
                new_data.len()
            )));
        }
        let mut slots = Vec::with_capacity(self.slots.len() + 1);
        for (i, (id, imgs)) in self.slots.iter().enumerate() {
            slots.push((id.clone(), draw(imgs, p, seed, id, i as u64)?));
        }
        slots.push((slot_id.to_string(), draw(new_data, p, seed, slot_id, k as u64)?));
        Ok(Self {
            capacity: self.capacity,
            reals: self.reals.clone(),
            slots,
            k,
        })
    }
}

fn draw(pool: &[LabeledImage], n: usize, seed: u64, label: &str, idx: u64) -> Result<Vec<LabeledImage>> {
    if pool.len() < n {
        return Err(E3Error::Data(format!("cannot draw {n} images from a pool of {}", pool.len())));
    }
    let mut rng = stream(seed, &format!("buffer/{label}"), idx);
    let mut picks = sample(&mut rng, pool.len(), n).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}
