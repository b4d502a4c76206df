use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CremError;

/// Deepest tree supported by the packed representation.
pub const MAX_DEPTH: usize = 62;

/// A vertex of the binary tree, i.e. the path `v_1 … v_depth` from the root.
///
/// Bits are packed so that `v_1` is the most significant of the `depth` low
/// bits. Within one level, numeric order of `bits` is lexicographic order of
/// paths, and `bits` is the vertex's index in its level.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VertexId {
    bits: u64,
    depth: u8,
}

impl VertexId {
    pub const ROOT: VertexId = VertexId { bits: 0, depth: 0 };

    /// Vertex at `depth` with level index `bits`. Panics if `bits` has set
    /// bits above `depth` or `depth > MAX_DEPTH`.
    pub fn new(depth: usize, bits: u64) -> Self {
        assert!(depth <= MAX_DEPTH, "depth {depth} exceeds {MAX_DEPTH}");
        assert!(depth == 64 || bits >> depth == 0, "bits {bits:#b} do not fit in depth {depth}");
        VertexId { bits, depth: depth as u8 }
    }

    pub fn from_path(path: &[u8]) -> Self {
        let mut v = Self::ROOT;
        for &b in path {
            v = v.child(b);
        }
        v
    }

    #[inline]
    pub fn depth(self) -> usize {
        self.depth as usize
    }

    /// Index within its level (lexicographic rank).
    #[inline]
    pub fn bits(self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn is_root(self) -> bool {
        self.depth == 0
    }

    #[inline]
    pub fn child(self, x: u8) -> Self {
        debug_assert!(x < 2);
        debug_assert!((self.depth as usize) < MAX_DEPTH);
        VertexId { bits: (self.bits << 1) | x as u64, depth: self.depth + 1 }
    }

    /// Parent; the root is its own parent.
    #[inline]
    pub fn parent(self) -> Self {
        if self.depth == 0 {
            return self;
        }
        VertexId { bits: self.bits >> 1, depth: self.depth - 1 }
    }

    /// Last bit of the path (which child of its parent this is).
    #[inline]
    pub fn last_bit(self) -> u8 {
        (self.bits & 1) as u8
    }

    /// `i`-th step of the path, `0 ≤ i < depth`.
    pub fn bit(self, i: usize) -> u8 {
        assert!(i < self.depth());
        ((self.bits >> (self.depth() - 1 - i)) & 1) as u8
    }

    /// Ancestor at depth `d ≤ self.depth()`.
    pub fn prefix(self, d: usize) -> Self {
        assert!(d <= self.depth());
        VertexId { bits: self.bits >> (self.depth() - d), depth: d as u8 }
    }

    /// Concatenation `self · suffix`.
    pub fn join(self, suffix: VertexId) -> Self {
        VertexId::new(self.depth() + suffix.depth(), (self.bits << suffix.depth) | suffix.bits)
    }

    /// `true` when `self` is `other` or one of its ancestors.
    pub fn is_prefix_of(self, other: VertexId) -> bool {
        self.depth <= other.depth && other.prefix(self.depth()) == self
    }

    /// Depth of the deepest common ancestor `v ∧ w`.
    pub fn common_depth(self, other: VertexId) -> usize {
        let d = self.depth.min(other.depth) as usize;
        let (a, b) = (self.prefix(d).bits, other.prefix(d).bits);
        let diff = a ^ b;
        if diff == 0 {
            d
        } else {
            d - (64 - diff.leading_zeros() as usize)
        }
    }

    /// Heap-style key `2^depth + bits`; distinct for every vertex of every depth.
    #[inline]
    pub fn key(self) -> u64 {
        (1u64 << self.depth) | self.bits
    }

    /// Breadth-first index: the root is 0, level `d` occupies
    /// `2^d − 1 .. 2^{d+1} − 1`.
    #[inline]
    pub fn bfs_index(self) -> usize {
        (self.key() - 1) as usize
    }

    pub fn from_bfs_index(index: usize) -> Self {
        let key = index as u64 + 1;
        let depth = 63 - key.leading_zeros() as usize;
        VertexId { bits: key - (1u64 << depth), depth: depth as u8 }
    }

    /// The path as a string of `0`/`1`; empty for the root.
    pub fn to_bit_string(self) -> String {
        (0..self.depth()).map(|i| if self.bit(i) == 1 { '1' } else { '0' }).collect()
    }
}

impl fmt::Debug for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            write!(f, "VertexId(φ)")
        } else {
            write!(f, "VertexId({})", self.to_bit_string())
        }
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

impl FromStr for VertexId {
    type Err = CremError;

    fn from_str(s: &str) -> Result<Self, CremError> {
        let s = s.trim();
        if s == "φ" || s == "root" {
            return Ok(Self::ROOT);
        }
        if s.len() > MAX_DEPTH {
            return Err(CremError::DepthOutOfRange { depth: s.len(), max: MAX_DEPTH });
        }
        let mut v = Self::ROOT;
        for c in s.chars() {
            match c {
                '0' => v = v.child(0),
                '1' => v = v.child(1),
                _ => return Err(CremError::InvalidParameter(format!("vertex {s:?} is not a bit string"))),
            }
        }
        Ok(v)
    }
}

impl Serialize for VertexId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for VertexId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_relations() {
        let v: VertexId = "10011".parse().unwrap();
        let w: VertexId = "10000".parse().unwrap();
        assert_eq!(v.depth(), 5);
        assert_eq!(v.bits(), 0b10011);
        assert_eq!(v.parent().to_bit_string(), "1001");
        assert_eq!(v.common_depth(w), 3);
        assert_eq!(v.prefix(3), "100".parse().unwrap());
        assert!(v.prefix(2).is_prefix_of(v));
        assert!(!w.is_prefix_of(v));
        assert_eq!(VertexId::ROOT.parent(), VertexId::ROOT);
        assert_eq!(VertexId::ROOT.common_depth(v), 0);
        assert_eq!(v.common_depth(v), 5);
        assert_eq!("10".parse::<VertexId>().unwrap().join("011".parse().unwrap()), v);
        assert_eq!((0..5).map(|i| v.bit(i)).collect::<Vec<_>>(), vec![1, 0, 0, 1, 1]);
        assert!("10a".parse::<VertexId>().is_err());
        assert_eq!("".parse::<VertexId>().unwrap(), VertexId::ROOT);
    }

    #[test]
    fn bfs_indexing_is_a_bijection() {
        for idx in 0..(1usize << 8) {
            let v = VertexId::from_bfs_index(idx);
            assert_eq!(v.bfs_index(), idx);
        }
        assert_eq!(VertexId::from_bfs_index(0), VertexId::ROOT);
        assert_eq!(VertexId::from_bfs_index(1), VertexId::new(1, 0));
        assert_eq!(VertexId::from_bfs_index(6), VertexId::new(2, 3));
    }

    #[test]
    fn serde_as_bit_string() {
        let v: VertexId = "0110".parse().unwrap();
        assert_eq!(serde_json::to_string(&v).unwrap(), "\"0110\"");
        assert_eq!(serde_json::from_str::<VertexId>("\"0110\"").unwrap(), v);
    }
}
