//! Modular addition `(a + b) mod P` with two-hot inputs.
//!
//! Pairs are stored as residues only; the dense `2P`-wide input rows are built
//! when a dataset is materialized for training.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModAddSample {
    pub a: usize,
    pub b: usize,
    pub modulus: usize,
    pub target: usize,
}

impl ModAddSample {
    /// Two-hot row of width `2P`: ones at `a` and `P + b`.
    pub fn input(&self) -> Vec<f64> {
        let mut x = vec![0.0; 2 * self.modulus];
        self.write_input(&mut x);
        x
    }

    /// Writes the two-hot row into `out`, which must be zeroed and `2P` wide.
    pub fn write_input(&self, out: &mut [f64]) {
        out[self.a] = 1.0;
        out[self.modulus + self.b] = 1.0;
    }
}

pub fn encode(a: usize, b: usize, modulus: usize) -> Result<ModAddSample> {
    if a >= modulus || b >= modulus {
        return Err(Error::Domain(format!("residues ({a}, {b}) out of range for P = {modulus}")));
    }
    Ok(ModAddSample { a, b, modulus, target: (a + b) % modulus })
}

/// Train/test partition of all `P²` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModAddSplit {
    pub modulus: usize,
    pub train: Vec<ModAddSample>,
    pub test: Vec<ModAddSample>,
}

/// Number of training pairs: `⌊fraction · P²⌋`, so 0.7 of 113² gives 8938.
pub fn train_size(modulus: usize, fraction: f64) -> usize {
    let n = (modulus * modulus) as f64;
    // absorb representation error so that fraction = k/P² yields exactly k
    (fraction * n + 1e-9 * n).floor() as usize
}

pub fn split(modulus: usize, fraction: f64, seed: u64) -> Result<ModAddSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("train fraction {fraction} outside (0, 1)")));
    }
    if modulus == 0 {
        return Err(Error::Domain("modulus must be positive".into()));
    }
    let n = modulus * modulus;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "modadd", "split", 0));
    let n_train = train_size(modulus, fraction).min(n);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pair = |i: usize| ModAddSample { a: i / modulus, b: i % modulus, modulus, target: (i / modulus + i % modulus) % modulus };
    Ok(ModAddSplit {
        modulus,
        train: train_idx.into_iter().map(pair).collect(),
        test: test_idx.into_iter().map(pair).collect(),
    })
}

/// Plain-text index file: a `modulus P` line, then one `train a b` or
/// `test a b` line per pair.
pub fn write_index<W: Write>(mut w: W, split: &ModAddSplit) -> Result<()> {
    writeln!(w, "modulus {}", split.modulus)?;
    for (tag, set) in [("train", &split.train), ("test", &split.test)] {
        for s in set {
            writeln!(w, "{tag} {} {}", s.a, s.b)?;
        }
    }
    Ok(())
}

pub fn read_index<R: BufRead>(r: R) -> Result<ModAddSplit> {
    let bad = |reason: String| Error::Format { format: "modadd index", reason };
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let modulus: usize = header
        .strip_prefix("modulus ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut out = ModAddSplit { modulus, train: Vec::new(), test: Vec::new() };
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [tag, a, b] = f[..] else {
            return Err(bad(format!("line {}: expected 3 fields", n + 2)));
        };
        let parse = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        let s = encode(parse(a)?, parse(b)?, modulus)?;
        match tag {
            "train" => out.train.push(s),
            "test" => out.test.push(s),
            other => return Err(bad(format!("line {}: unknown set {other:?}", n + 2))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn encode_small_cases() {
        let s = encode(0, 0, 3).unwrap();
        assert_eq!(s.input(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.target, 0);
        let s = encode(1, 2, 3).unwrap();
        assert_eq!(s.input(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.target, 0);
        assert!(matches!(encode(3, 0, 3), Err(Error::Domain(_))));
        assert!(matches!(encode(0, 5, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn exhaustive_table_for_p5() {
        let table = [
            [0, 1, 2, 3, 4],
            [1, 2, 3, 4, 0],
            [2, 3, 4, 0, 1],
            [3, 4, 0, 1, 2],
            [4, 0, 1, 2, 3],
        ];
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(encode(a, b, 5).unwrap().target, table[a][b]);
            }
        }
    }

    #[test]
    fn table_sizes() {
        let s = split(113, 0.7, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8938, 3831));
    }

    #[test]
    fn near_one_fraction_empties_test_set() {
        let s = split(7, 48.0 / 49.0, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (48, 1));
        assert_eq!(train_size(7, 48.0 / 49.0), 48);
        assert!(split(7, 1.0, 3).is_err());
        assert!(split(7, 0.0, 3).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split(23, 0.7, 9).unwrap(), split(23, 0.7, 9).unwrap());
        assert_ne!(split(23, 0.7, 9).unwrap(), split(23, 0.7, 10).unwrap());
    }

    #[test]
    fn index_round_trip() {
        let s = split(11, 0.6, 1).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &s).unwrap();
        assert_eq!(read_index(&buf[..]).unwrap(), s);
        assert!(read_index(&b"modulus 3\ntrain 1\n"[..]).is_err());
        assert!(read_index(&b"modulus 3\nval 1 1\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_all_pairs(p in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let s = split(p, frac, seed).unwrap();
            let train: HashSet<_> = s.train.iter().map(|x| (x.a, x.b)).collect();
            let test: HashSet<_> = s.test.iter().map(|x| (x.a, x.b)).collect();
            prop_assert_eq!(train.len(), s.train.len());
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), p * p);
            prop_assert_eq!(s.train.len(), train_size(p, frac));
        }

        #[test]
        fn inputs_are_two_hot(p in 1usize..60, a in 0usize..60, b in 0usize..60) {
            prop_assume!(a < p && b < p);
            let s = encode(a, b, p).unwrap();
            let x = s.input();
            prop_assert_eq!(x.iter().sum::<f64>(), 2.0);
            prop_assert_eq!(x[a], 1.0);
            prop_assert_eq!(x[p + b], 1.0);
            prop_assert!(s.target < p);
        }
    }
}
