//! Brute-force HDBSCAN reference.
//!
//! It never builds a spanning tree. It walks the hierarchy top down: a
//! point set splits into the connected components of the
//! mutual-reachability graph restricted to edges strictly below the set's
//! own formation distance, found by plain graph search.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tabrule_core::clustering::NOISE;

pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

fn mreach(rows: &[Vec<u8>], ms: usize) -> Vec<Vec<u32>> {
    let n = rows.len();
    let core: Vec<u32> = (0..n)
        .map(|i| {
            let mut d: Vec<u32> = (0..n).filter(|&j| j != i).map(|j| hamming(&rows[i], &rows[j])).collect();
            d.sort();
            d[ms - 1]
        })
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0 } else { hamming(&rows[i], &rows[j]).max(core[i]).max(core[j]) }).collect())
        .collect()
}

/// Components of `set` using edges with weight <= `t`.
fn components(m: &[Vec<u32>], set: &[usize], t: i64) -> Vec<Vec<usize>> {
    let mut left: BTreeSet<usize> = set.iter().copied().collect();
    let mut out = Vec::new();
    while let Some(&start) = left.iter().next() {
        left.remove(&start);
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let p = comp[i];
            let next: Vec<usize> = left.iter().copied().filter(|&q| (m[p][q] as i64) <= t).collect();
            for q in next {
                left.remove(&q);
                comp.push(q);
            }
            i += 1;
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Smallest distance at which `set` is connected.
fn formation(m: &[Vec<u32>], set: &[usize]) -> u32 {
    (0..=u32::MAX).find(|&t| components(m, set, t as i64).len() == 1).unwrap()
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
struct Stab(usize, BigRational);

impl Stab {
    fn add(&self, o: &Stab) -> Stab {
        Stab(self.0 + o.0, &self.1 + &o.1)
    }
}

struct Node {
    members: Vec<usize>,
    stability: Stab,
    children: Vec<Node>,
}

fn grow(m: &[Vec<u32>], members: Vec<usize>, birth: BigRational, mcs: usize) -> Node {
    let mut set = members.clone();
    let mut stab = Stab(0, BigRational::zero());
    let leave = |count: usize, w: u32, stab: &mut Stab| {
        if w == 0 {
            stab.0 += count;
        } else {
            stab.1 += (BigRational::new(BigInt::from(1), BigInt::from(w)) - &birth) * BigInt::from(count);
        }
    };
    loop {
        let w = formation(m, &set);
        let parts = components(m, &set, w as i64 - 1);
        let big: Vec<Vec<usize>> = parts.into_iter().filter(|p| p.len() >= mcs).collect();
        if big.len() == 1 {
            leave(set.len() - big[0].len(), w, &mut stab);
            set = big[0].clone();
            continue;
        }
        leave(set.len(), w, &mut stab);
        let children = if big.len() >= 2 {
            let lam = BigRational::new(BigInt::from(1), BigInt::from(w));
            big.into_iter().map(|c| grow(m, c, lam.clone(), mcs)).collect()
        } else {
            Vec::new()
        };
        return Node {
            members,
            stability: stab,
            children,
        };
    }
}

fn excess_of_mass(node: &Node, is_root: bool) -> (Stab, Vec<Vec<usize>>) {
    if node.children.is_empty() {
        return (node.stability.clone(), vec![node.members.clone()]);
    }
    let mut total = Stab(0, BigRational::zero());
    let mut chosen = Vec::new();
    for c in &node.children {
        let (s, sel) = excess_of_mass(c, false);
        total = total.add(&s);
        chosen.extend(sel);
    }
    if !is_root && node.stability >= total {
        (node.stability.clone(), vec![node.members.clone()])
    } else {
        (total, chosen)
    }
}

/// Reference clustering as a set of member sets.
pub fn reference(rows: &[Vec<u8>], mcs: usize, ms: usize) -> BTreeSet<Vec<usize>> {
    let n = rows.len();
    if n < 2 || n < ms + 1 || n < mcs {
        return BTreeSet::new();
    }
    let m = mreach(rows, ms);
    let root = grow(&m, (0..n).collect(), BigRational::zero(), mcs);
    excess_of_mass(&root, true).1.into_iter().collect()
}

pub fn as_sets(labels: &[i32]) -> BTreeSet<Vec<usize>> {
    let mut by: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l != NOISE {
            by.entry(l).or_default().push(i);
        }
    }
    by.into_values().collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let n = rng.gen_range(2..=16);
    let cols = rng.gen_range(1..=10);
    let prototypes: Vec<Vec<u8>> = (0..rng.gen_range(1..=4)).map(|_| (0..cols).map(|_| rng.gen_range(0..=1)).collect()).collect();
    let flip = rng.gen_range(0.0..0.4);
    (0..n)
        .map(|_| {
            let p = &prototypes[rng.gen_range(0..prototypes.len())];
            p.iter().map(|&b| if rng.gen_bool(flip) { 1 - b } else { b }).collect()
        })
        .collect()
}
