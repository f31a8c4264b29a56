//! Explicit per-token-pair visibility for the monolithic forward paths.

/// Boolean visibility matrix. `allowed[i][j]` says token `i` may attend
/// token `j`; construction enforces causality (`j <= i`) and a visible
/// diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    side: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a predicate, asserting the causal invariants.
    pub fn build(side: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; side * side];
        for i in 0..side {
            for j in 0..side {
                let a = f(i, j);
                if a {
                    assert!(j <= i, "mask allows attention to future position {j} from {i}");
                }
                allowed[i * side + j] = a;
            }
            assert!(allowed[i * side + i], "mask row {i} must allow its own diagonal");
        }
        Self { side, allowed }
    }

    /// The standard causal mask: token `i` sees every `j <= i`.
    pub fn lower_triangular(side: usize) -> Self {
        let mut allowed = vec![false; side * side];
        for i in 0..side {
            for j in 0..=i {
                allowed[i * side + j] = true;
            }
        }
        Self { side, allowed }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.side + j]
    }

    /// Set of visible key indices for row `i`, ascending.
    pub fn visible_in_row(&self, i: usize) -> Vec<usize> {
        (0..=i).filter(|&j| self.allowed(i, j)).collect()
    }
}
