//! Multi-pattern substring search (Aho-Corasick, dense DFA).
//!
//! Every state has a full 256-entry transition row, so scanning is one table
//! lookup per input byte. Signature databases are small enough that the
//! memory cost (1 KiB per state) does not matter.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

const ROOT: u32 = 0;
const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct Matcher {
    trans: Vec<[u32; 256]>,
    /// Pattern indices ending at each state, including those inherited
    /// through failure links.
    outputs: Vec<Vec<u32>>,
    patterns: usize,
}

impl Matcher {
    /// Builds the automaton. Empty patterns never match.
    pub fn new<I, P>(patterns: I) -> Self
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[u8]>,
    {
        let mut trans: Vec<[u32; 256]> = vec![[NONE; 256]];
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new()];
        let mut count = 0;
        for (idx, pat) in patterns.into_iter().enumerate() {
            count = idx + 1;
            let pat = pat.as_ref();
            if pat.is_empty() {
                continue;
            }
            let mut s = ROOT as usize;
            for &b in pat {
                let next = trans[s][usize::from(b)];
                s = if next == NONE {
                    trans.push([NONE; 256]);
                    outputs.push(Vec::new());
                    let n = trans.len() - 1;
                    trans[s][usize::from(b)] = n as u32;
                    n
                } else {
                    next as usize
                };
            }
            outputs[s].push(idx as u32);
        }

        let mut fail = vec![ROOT; trans.len()];
        let mut queue = VecDeque::new();
        for slot in trans[0].iter_mut() {
            let next = *slot;
            if next == NONE {
                *slot = ROOT;
            } else {
                fail[next as usize] = ROOT;
                queue.push_back(next as usize);
            }
        }
        while let Some(s) = queue.pop_front() {
            let f = fail[s] as usize;
            let inherited = outputs[f].clone();
            outputs[s].extend(inherited);
            let fallback = trans[f];
            for (slot, &via_fail) in trans[s].iter_mut().zip(fallback.iter()) {
                let next = *slot;
                if next == NONE {
                    *slot = via_fail;
                } else {
                    fail[next as usize] = via_fail;
                    queue.push_back(next as usize);
                }
            }
        }
        for out in &mut outputs {
            out.sort_unstable();
            out.dedup();
        }
        Matcher { trans, outputs, patterns: count }
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns
    }

    /// Sorted, distinct indices of every pattern occurring in `haystack`.
    pub fn find_all(&self, haystack: &[u8]) -> Vec<usize> {
        let mut seen = vec![false; self.patterns];
        let mut s = ROOT as usize;
        for &b in haystack {
            s = self.trans[s][usize::from(b)] as usize;
            for &p in &self.outputs[s] {
                seen[p as usize] = true;
            }
        }
        seen.iter().enumerate().filter(|(_, &hit)| hit).map(|(i, _)| i).collect()
    }

    pub fn is_match(&self, haystack: &[u8]) -> bool {
        let mut s = ROOT as usize;
        for &b in haystack {
            s = self.trans[s][usize::from(b)] as usize;
            if !self.outputs[s].is_empty() {
                return true;
            }
        }
        false
    }
}
