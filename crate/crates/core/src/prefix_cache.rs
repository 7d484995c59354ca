//! Token trie holding the encodings of previously seen prompt prefixes.
//!
//! Every prompt the baseline encodes starts at position 0 with the same
//! causal mask, so the K/V of a token depend only on the token prefix up to
//! and including it. A trie keyed by token therefore reuses encodings
//! exactly.

use std::collections::HashMap;

use crate::tokenizer::TokenId;

#[derive(Debug, Clone)]
struct Node<T> {
    children: HashMap<TokenId, usize>,
    keys: Vec<T>,
    values: Vec<T>,
    /// Next-token logits computed from this token, if they were ever requested.
    logits: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct PrefixCache<T> {
    // nodes[0] is the root and carries no token.
    nodes: Vec<Node<T>>,
}

/// Longest cached prefix of a prompt.
#[derive(Debug)]
pub struct PrefixHit<'a, T> {
    /// Per matched token: (keys, values), flattened layer-major.
    pub entries: Vec<(&'a [T], &'a [T])>,
    /// Logits stored at the last matched token.
    pub last_logits: Option<&'a [T]>,
}

impl<T> PrefixHit<'_, T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Clone> Default for PrefixCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> PrefixCache<T> {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node {
                children: HashMap::new(),
                keys: Vec::new(),
                values: Vec::new(),
                logits: None,
            }],
        }
    }

    pub fn clear(&mut self) {
        self.nodes.truncate(1);
        self.nodes[0].children.clear();
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn path(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mut path = Vec::new();
        let mut at = 0;
        for t in tokens {
            match self.nodes[at].children.get(t) {
                Some(&n) => {
                    path.push(n);
                    at = n;
                }
                None => break,
            }
        }
        path
    }

    pub fn lookup(&self, tokens: &[TokenId]) -> PrefixHit<'_, T> {
        let path = self.path(tokens);
        PrefixHit {
            last_logits: path.last().and_then(|n| self.nodes[*n].logits.as_deref()),
            entries: path
                .iter()
                .map(|n| (self.nodes[*n].keys.as_slice(), self.nodes[*n].values.as_slice()))
                .collect(),
        }
    }

    /// Record the encoding of `tokens`. Existing nodes keep their K/V (which
    /// are identical by construction) and gain logits they were missing.
    pub fn insert(
        &mut self,
        tokens: &[TokenId],
        keys: &[Vec<T>],
        values: &[Vec<T>],
        logits: &[Option<Vec<T>>],
    ) {
        assert!(keys.len() == tokens.len() && values.len() == tokens.len());
        let mut at = 0;
        for (i, t) in tokens.iter().enumerate() {
            let next = match self.nodes[at].children.get(t) {
                Some(&n) => n,
                None => {
                    self.nodes.push(Node {
                        children: HashMap::new(),
                        keys: keys[i].clone(),
                        values: values[i].clone(),
                        logits: None,
                    });
                    let n = self.nodes.len() - 1;
                    self.nodes[at].children.insert(*t, n);
                    n
                }
            };
            if self.nodes[next].logits.is_none() {
                if let Some(Some(l)) = logits.get(i) {
                    self.nodes[next].logits = Some(l.clone());
                }
            }
            at = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn longest_prefix() {
        let mut c = PrefixCache::new();
        c.insert(&[1, 2, 3], &kv(3), &kv(3), &[None, None, Some(vec![9.0])]);
        assert_eq!(c.lookup(&[1, 2, 3]).len(), 3);
        assert_eq!(c.lookup(&[1, 2, 3]).last_logits, Some(&[9.0][..]));
        assert_eq!(c.lookup(&[1, 2, 4]).len(), 2);
        assert!(c.lookup(&[1, 2, 4]).last_logits.is_none());
        assert_eq!(c.lookup(&[1, 5]).len(), 1);
        assert!(c.lookup(&[7]).is_empty());
        c.insert(&[1, 5], &kv(2), &kv(2), &[]);
        assert_eq!(c.len(), 4);
        c.clear();
        assert!(c.is_empty());
        assert!(c.lookup(&[1]).is_empty());
    }
}
