//! Enumerable token-grid model: per-class nearest-neighbour energy tables over
//! every configuration of `grid` tokens drawn from a `vocab`-sized alphabet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// Largest table the world will materialize.
pub const MAX_CONFIGS: usize = 1 << 20;

/// A partially observed grid; `None` marks a masked (unobserved) position.
pub type PartialGrid = [Option<usize>];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteWorldConfig {
    pub grid: usize,
    pub vocab: usize,
    pub classes: usize,
    pub seed: u64,
    /// Multiplier on the seeded energies, which are drawn from [-1, 1].
    pub strength: f64,
}

impl Default for DiscreteWorldConfig {
    fn default() -> Self {
        DiscreteWorldConfig {
            grid: 4,
            vocab: 3,
            classes: 4,
            seed: 0,
            strength: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteWorld {
    grid: usize,
    vocab: usize,
    classes: usize,
    /// `log_probs[c][idx]`; index `idx` encodes token `i` as digit `i` base `vocab`.
    log_probs: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    uncond: Vec<f64>,
    uncond_log: Vec<f64>,
    cdfs: Vec<Vec<f64>>,
    pow: Vec<usize>,
}

/// Neighbour pairs of a square grid when `grid` is a perfect square, else a chain.
pub fn adjacent_pairs(grid: usize) -> Vec<(usize, usize)> {
    let side = (grid as f64).sqrt().round() as usize;
    let mut pairs = Vec::new();
    if side * side == grid && side > 1 {
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                if c + 1 < side {
                    pairs.push((i, i + 1));
                }
                if r + 1 < side {
                    pairs.push((i, i + side));
                }
            }
        }
    } else {
        pairs.extend((1..grid).map(|i| (i - 1, i)));
    }
    pairs
}

impl DiscreteWorld {
    pub fn build(config: &DiscreteWorldConfig) -> Result<Self> {
        let DiscreteWorldConfig {
            grid,
            vocab,
            classes,
            seed,
            strength,
        } = *config;
        if grid == 0 || vocab < 2 || classes == 0 {
            return Err(Error::config(
                "world",
                format!("need grid >= 1, vocab >= 2, classes >= 1 (got {grid}, {vocab}, {classes})"),
            ));
        }
        let size = configs_for(grid, vocab).ok_or_else(|| {
            Error::config(
                "world",
                format!("vocab^grid = {vocab}^{grid} exceeds the enumeration bound 2^20"),
            )
        })?;
        let pairs = adjacent_pairs(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut energies = Vec::with_capacity(classes);
        for _ in 0..classes {
            let unary: Vec<f64> = (0..grid * vocab)
                .map(|_| strength * rng.random_range(-1.0..=1.0))
                .collect();
            let pairwise: Vec<f64> = (0..pairs.len() * vocab * vocab)
                .map(|_| strength * rng.random_range(-1.0..=1.0))
                .collect();
            energies.push((unary, pairwise));
        }
        Self::from_energies(grid, vocab, size, &pairs, &energies)
    }

    /// World whose every class is uniform over all configurations.
    pub fn uniform(grid: usize, vocab: usize, classes: usize) -> Result<Self> {
        let size = configs_for(grid, vocab)
            .ok_or_else(|| Error::config("world", "vocab^grid exceeds 2^20"))?;
        let pairs = adjacent_pairs(grid);
        let zero = (vec![0.0; grid * vocab], vec![0.0; pairs.len() * vocab * vocab]);
        Self::from_energies(grid, vocab, size, &pairs, &vec![zero; classes])
    }

    fn from_energies(
        grid: usize,
        vocab: usize,
        size: usize,
        pairs: &[(usize, usize)],
        energies: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<Self> {
        let pow: Vec<usize> = (0..grid).map(|i| vocab.pow(i as u32)).collect();
        let mut log_probs = Vec::with_capacity(energies.len());
        for (unary, pairwise) in energies {
            let mut table = vec![0.0; size];
            let mut tokens = vec![0usize; grid];
            for (idx, slot) in table.iter_mut().enumerate() {
                decode_into(idx, vocab, &mut tokens);
                let mut e = 0.0;
                for (i, &v) in tokens.iter().enumerate() {
                    e += unary[i * vocab + v];
                }
                for (p, &(a, b)) in pairs.iter().enumerate() {
                    e += pairwise[(p * vocab + tokens[a]) * vocab + tokens[b]];
                }
                *slot = e;
            }
            let z = log_sum_exp(&table);
            table.iter_mut().for_each(|v| *v -= z);
            log_probs.push(table);
        }
        let classes = log_probs.len();
        let probs: Vec<Vec<f64>> = log_probs
            .iter()
            .map(|t| t.iter().map(|v| v.exp()).collect())
            .collect();
        let uncond: Vec<f64> = (0..size)
            .map(|i| probs.iter().map(|p| p[i]).sum::<f64>() / classes as f64)
            .collect();
        let uncond_log = uncond.iter().map(|p| p.ln()).collect();
        let cdfs = probs
            .iter()
            .map(|p| {
                let mut acc = 0.0;
                p.iter()
                    .map(|v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(DiscreteWorld {
            grid,
            vocab,
            classes,
            log_probs,
            probs,
            uncond,
            uncond_log,
            cdfs,
            pow,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn config_count(&self) -> usize {
        self.uncond.len()
    }

    /// Target probability table for `class` (`None` = uniform class mixture).
    pub fn table(&self, class: Option<usize>) -> &[f64] {
        match class {
            Some(c) => &self.probs[c],
            None => &self.uncond,
        }
    }

    pub fn encode(&self, tokens: &[usize]) -> usize {
        tokens.iter().zip(&self.pow).map(|(t, p)| t * p).sum()
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.grid];
        decode_into(idx, self.vocab, &mut out);
        out
    }

    /// Exact `log p(tokens | class)`; `None` gives the class mixture.
    pub fn log_density(&self, tokens: &[usize], class: Option<usize>) -> f64 {
        let idx = self.encode(tokens);
        match class {
            Some(c) => self.log_probs[c][idx],
            None => self.uncond_log[idx],
        }
    }

    /// Per-position marginals `p(x_i = v | observed, class)` for every position.
    /// Observed positions receive a point mass on their token.
    pub fn marginals(&self, observed: &PartialGrid, class: Option<usize>) -> Vec<Vec<f64>> {
        debug_assert_eq!(observed.len(), self.grid);
        let table = self.table(class);
        let mut base = 0;
        let mut free = Vec::new();
        for (i, o) in observed.iter().enumerate() {
            match o {
                Some(v) => base += v * self.pow[i],
                None => free.push(i),
            }
        }
        let mut out = vec![vec![0.0; self.vocab]; self.grid];
        let combos = self.vocab.pow(free.len() as u32);
        let mut digits = vec![0usize; free.len()];
        let mut total = 0.0;
        for n in 0..combos {
            decode_into(n, self.vocab, &mut digits);
            let idx = base
                + digits
                    .iter()
                    .zip(&free)
                    .map(|(d, &i)| d * self.pow[i])
                    .sum::<usize>();
            let p = table[idx];
            total += p;
            for (d, &i) in digits.iter().zip(&free) {
                out[i][*d] += p;
            }
        }
        for (i, o) in observed.iter().enumerate() {
            match o {
                Some(v) => out[i][*v] = 1.0,
                None => out[i].iter_mut().for_each(|p| *p /= total),
            }
        }
        out
    }

    /// Exact conditional of one unobserved position.
    pub fn token_conditional(
        &self,
        observed: &PartialGrid,
        class: Option<usize>,
        position: usize,
    ) -> Result<Vec<f64>> {
        if observed.len() != self.grid {
            return Err(Error::Dimension {
                context: "partial grid",
                expected: self.grid,
                got: observed.len(),
            });
        }
        if observed.iter().all(Option::is_some) {
            return Err(Error::precondition("grid is fully observed"));
        }
        if position >= self.grid || observed[position].is_some() {
            return Err(Error::precondition(format!(
                "position {position} is not an unobserved position"
            )));
        }
        Ok(self.marginals(observed, class).swap_remove(position))
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<usize> {
        let cdf = &self.cdfs[class];
        let u = rng.random::<f64>() * cdf[cdf.len() - 1];
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        self.decode(idx)
    }
}

fn configs_for(grid: usize, vocab: usize) -> Option<usize> {
    let mut n: usize = 1;
    for _ in 0..grid {
        n = n.checked_mul(vocab)?;
        if n > MAX_CONFIGS {
            return None;
        }
    }
    Some(n)
}

fn decode_into(mut idx: usize, vocab: usize, out: &mut [usize]) {
    for slot in out.iter_mut() {
        *slot = idx % vocab;
        idx /= vocab;
    }
}
