//! Frozen integer frequency tables derived from the continuous prior.

use super::range_coder::TOTAL;
use crate::tensor::kernels::sigmoid;
use crate::tensor::prior_math::{interval_mass, PriorTensors};
use crate::tensor::{Real, Tensor};

pub const SYMBOL_MIN: i32 = -127;
pub const SYMBOL_MAX: i32 = 128;
pub const SYMBOL_COUNT: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

/// Cumulative frequencies of one channel: `cum[k]` is the start of symbol
/// `SYMBOL_MIN + k`; `cum[SYMBOL_COUNT] == TOTAL`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelTable {
    pub cum: Vec<u32>,
}

impl ChannelTable {
    pub fn freq(&self, k: usize) -> u32 {
        self.cum[k + 1] - self.cum[k]
    }

    /// Bits an ideal coder spends on symbol index `k`.
    pub fn cost_bits(&self, k: usize) -> f64 {
        (TOTAL as f64).log2() - (self.freq(k) as f64).log2()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTables {
    pub channels: Vec<ChannelTable>,
}

impl CdfTables {
    /// Evaluates the prior in `f64` at every half-integer boundary. Mass
    /// outside the symbol range is folded into the two edge symbols.
    pub fn build<T: Real>(prior: &PriorTensors<'_, T>) -> Self {
        let owned: Vec<Tensor<f64>> = prior
            .matrices
            .iter()
            .chain(&prior.biases)
            .chain(&prior.factors)
            .map(|t| t.cast())
            .collect();
        let refs: Vec<&Tensor<f64>> = owned.iter().collect();
        let p = PriorTensors::from_slice(&refs);
        let channels = (0..p.channels())
            .map(|c| {
                let cp = p.channel(c);
                let logits: Vec<f64> = (0..=SYMBOL_COUNT)
                    .map(|k| cp.logit(SYMBOL_MIN as f64 - 0.5 + k as f64))
                    .collect();
                let pmf: Vec<f64> = (0..SYMBOL_COUNT)
                    .map(|k| {
                        if k == 0 {
                            sigmoid(logits[1])
                        } else if k == SYMBOL_COUNT - 1 {
                            sigmoid(-logits[k])
                        } else {
                            interval_mass(logits[k + 1], logits[k])
                        }
                    })
                    .collect();
                ChannelTable::from_pmf(&pmf)
            })
            .collect();
        Self { channels }
    }

    /// Tables from explicit probability vectors, one per channel.
    pub fn from_pmfs(pmfs: &[Vec<f64>]) -> Self {
        Self {
            channels: pmfs.iter().map(|p| ChannelTable::from_pmf(p)).collect(),
        }
    }

    /// Ideal code length in bits of `symbols[c]` under channel `c`'s table.
    pub fn cross_entropy(&self, c: usize, symbols: &[i32]) -> f64 {
        let t = &self.channels[c];
        symbols.iter().map(|&s| t.cost_bits((s - SYMBOL_MIN) as usize)).sum()
    }
}

impl ChannelTable {
    /// Largest-remainder quantization of `pmf` to `TOTAL` with at least one
    /// count per symbol. Non-finite or negative masses count as zero; an
    /// all-zero input yields the uniform table.
    pub fn from_pmf(pmf: &[f64]) -> Self {
        let n = pmf.len();
        let clean: Vec<f64> = pmf
            .iter()
            .map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 })
            .collect();
        let total: f64 = clean.iter().sum();
        let budget = TOTAL as usize - n;
        let share: Vec<f64> = if total > 0.0 {
            clean.iter().map(|&p| p / total * budget as f64).collect()
        } else {
            vec![budget as f64 / n as f64; n]
        };
        let mut freq: Vec<u32> = share.iter().map(|&s| s.floor() as u32).collect();
        let assigned: usize = freq.iter().map(|&f| f as usize).sum();
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort: equal remainders resolve by symbol index
        order.sort_by(|&a, &b| {
            let (ra, rb) = (share[a] - share[a].floor(), share[b] - share[b].floor());
            rb.partial_cmp(&ra).expect("finite")
        });
        for &k in order.iter().cycle().take(budget - assigned) {
            freq[k] += 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for f in freq {
            cum.push(cum.last().expect("nonempty") + f + 1);
        }
        debug_assert_eq!(*cum.last().expect("nonempty"), TOTAL);
        Self { cum }
    }
}
