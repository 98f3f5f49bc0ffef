//! Seeded synthetic interaction logs with genre structure.
//!
//! Items belong to genres, and within a genre they form a chain. Each user
//! holds a few genres of interest and walks them: mostly along the chain of
//! the current genre, sometimes jumping to a popular item of the genre,
//! occasionally switching genre. No user consumes an item twice.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Interaction;
use crate::error::{EbrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Upper bound on genres of interest per user (at least one).
    pub max_interests: usize,
    /// Probability of stepping to the chain successor of the last item.
    pub p_follow: f64,
    /// Probability of moving to another genre of interest.
    pub p_switch: f64,
    /// Zipf exponent of item popularity within a genre.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 600,
            items: 400,
            genres: 8,
            min_len: 15,
            max_len: 40,
            max_interests: 3,
            p_follow: 0.6,
            p_switch: 0.25,
            popularity_skew: 0.8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub interactions: Vec<Interaction>,
    /// Genre of external item id `i` at index `i - 1`.
    pub item_genre: Vec<usize>,
}

impl SynthCorpus {
    pub fn genre_of(&self, external_item: i64) -> usize {
        self.item_genre[(external_item - 1) as usize]
    }

    /// `user::item::rating::timestamp` lines, the MovieLens ratings layout.
    pub fn write_movielens<W: Write>(&self, mut w: W) -> Result<()> {
        for it in &self.interactions {
            let rating = it.weight.unwrap_or(5.0) as i64;
            writeln!(w, "{}::{}::{}::{}", it.user_id, it.item_id, rating, it.timestamp)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.genres == 0 || cfg.items < cfg.genres || cfg.users == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(EbrError::Config("synthetic corpus needs users >= 1, items >= genres >= 1 and 1 <= min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item_genre: Vec<usize> = (0..cfg.items).map(|i| i % cfg.genres).collect();
    let chains: Vec<Vec<usize>> = (0..cfg.genres).map(|g| (g..cfg.items).step_by(cfg.genres).collect()).collect();
    let popularity: Vec<WeightedIndex<f64>> = chains
        .iter()
        .map(|c| WeightedIndex::new((0..c.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))).unwrap())
        .collect();
    // genres themselves are unevenly popular
    let genre_pick = WeightedIndex::new((0..cfg.genres).map(|g| 1.0 / ((g + 1) as f64).sqrt())).unwrap();
    let max_len = cfg.max_len.min(cfg.items);
    let min_len = cfg.min_len.min(max_len);

    let mut interactions = Vec::new();
    for u in 0..cfg.users {
        let n_interests = rng.random_range(1..=cfg.max_interests.clamp(1, cfg.genres));
        let mut interests = Vec::with_capacity(n_interests);
        while interests.len() < n_interests {
            let g = genre_pick.sample(&mut rng);
            if !interests.contains(&g) {
                interests.push(g);
            }
        }
        let capacity: usize = interests.iter().map(|&g| chains[g].len()).sum();
        let len = rng.random_range(min_len..=max_len).min(capacity);
        let mut seen = vec![false; cfg.items];
        let mut genre = interests[0];
        let mut last: Option<usize> = None;
        let mut t = rng.random_range(0..1_000_000i64);
        for _ in 0..len {
            if interests.len() > 1 && rng.random_bool(cfg.p_switch) {
                genre = interests[rng.random_range(0..interests.len())];
                last = None;
            }
            if chains[genre].iter().all(|&i| seen[i]) {
                genre = *interests.iter().find(|&&g| chains[g].iter().any(|&i| !seen[i])).expect("len bounded by capacity");
                last = None;
            }
            let chain = &chains[genre];
            let pos = match last {
                Some(prev) if item_genre[prev] == genre && rng.random_bool(cfg.p_follow) => {
                    (chain.iter().position(|&i| i == prev).unwrap() + 1) % chain.len()
                }
                _ => popularity[genre].sample(&mut rng),
            };
            let mut r = pos;
            while seen[chain[r]] {
                r = (r + 1) % chain.len();
            }
            let item = chain[r];
            seen[item] = true;
            last = Some(item);
            t += rng.random_range(1..600);
            interactions.push(Interaction { user_id: u as i64 + 1, item_id: item as i64 + 1, timestamp: t, weight: Some(rng.random_range(3..=5) as f64) });
        }
    }
    Ok(SynthCorpus { interactions, item_genre })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn respects_shape_and_has_no_repeats() {
        let cfg = SynthConfig { users: 50, items: 60, genres: 4, min_len: 5, max_len: 12, ..Default::default() };
        let c = generate(&cfg).unwrap();
        let mut per_user: std::collections::HashMap<i64, Vec<i64>> = Default::default();
        for it in &c.interactions {
            per_user.entry(it.user_id).or_default().push(it.item_id);
            assert!((1..=60).contains(&it.item_id));
        }
        assert_eq!(per_user.len(), 50);
        for items in per_user.values() {
            assert!((5..=12).contains(&items.len()));
            assert_eq!(items.iter().collect::<HashSet<_>>().len(), items.len());
        }
        assert_eq!(c.genre_of(5), 0);
    }

    #[test]
    fn single_interest_users_stay_in_genre() {
        let cfg = SynthConfig { users: 30, max_interests: 1, ..Default::default() };
        let c = generate(&cfg).unwrap();
        let mut genre_of_user: std::collections::HashMap<i64, usize> = Default::default();
        for it in &c.interactions {
            let g = c.genre_of(it.item_id);
            assert_eq!(*genre_of_user.entry(it.user_id).or_insert(g), g);
        }
    }

    #[test]
    fn seeded_and_writable() {
        let cfg = SynthConfig { users: 5, items: 20, genres: 2, min_len: 3, max_len: 4, ..Default::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let mut buf = Vec::new();
        a.write_movielens(&mut buf).unwrap();
        let parsed = crate::corpus::parse_movielens_reader(&buf[..]).unwrap();
        assert_eq!(parsed.num_interactions(), a.interactions.len());
    }
}
