//! Quadtree index hierarchy over square token grids.
//!
//! Level `1` is the coarsest grid and level `r` the finest; each token at
//! level `m` owns a 2×2 block of children at level `m+1`, so token counts
//! grow by exactly 4 per level. Every level also carries an odd attention
//! window size; the window of a token is clipped at the grid boundary and
//! always contains the token itself.

use crate::error::{Error, Result};

/// Position of one token: `level` is 1-based (1 = coarsest), `row`/`col` are
/// 0-based within the level's token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenIndex {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

impl TokenIndex {
    pub fn new(level: usize, row: usize, col: usize) -> Self {
        TokenIndex { level, row, col }
    }
}

/// The quadtree over token grids: per-level side lengths and window sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTree {
    levels: usize,
    /// Side length of each level's grid, index 0 ↔ level 1 (coarsest).
    sides: Vec<usize>,
    /// Odd window size per level, same indexing.
    windows: Vec<usize>,
}

impl IndexTree {
    /// Build a tree whose finest grid is `finest_side × finest_side` with
    /// `levels` levels and one odd window size per level (coarsest first).
    ///
    /// `finest_side` must halve exactly `levels − 1` times and the coarsest
    /// side must still be at least 2 when `levels > 1`, so every level is a
    /// genuine 4-ary refinement of the one above it.
    pub fn build(finest_side: usize, levels: usize, windows: &[usize]) -> Result<Self> {
        if levels == 0 {
            return Err(Error::invalid("tree must have at least one level"));
        }
        if finest_side == 0 {
            return Err(Error::invalid("finest side must be positive"));
        }
        if windows.len() != levels {
            return Err(Error::invalid(format!(
                "expected {} window sizes (one per level), got {}",
                levels,
                windows.len()
            )));
        }
        for (idx, &w) in windows.iter().enumerate() {
            if w == 0 || w % 2 == 0 {
                return Err(Error::invalid(format!(
                    "window size at level {} must be odd and positive, got {w}",
                    idx + 1
                )));
            }
        }
        let factor = 1usize << (levels - 1);
        if !finest_side.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "finest side {finest_side} is not divisible by 2^{} = {factor}",
                levels - 1
            )));
        }
        let coarsest = finest_side / factor;
        if levels > 1 && coarsest < 2 {
            return Err(Error::invalid(format!(
                "finest side {finest_side} halves to a {coarsest}x{coarsest} grid over \
                 {levels} levels; the coarsest side must be at least 2"
            )));
        }
        let sides = (0..levels).map(|m| coarsest << m).collect();
        Ok(IndexTree {
            levels,
            sides,
            windows: windows.to_vec(),
        })
    }

    /// Number of levels `r`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Side length of the level-`level` grid (`level` is 1-based).
    pub fn side(&self, level: usize) -> usize {
        assert!(
            level >= 1 && level <= self.levels,
            "level {level} out of range 1..={}",
            self.levels
        );
        self.sides[level - 1]
    }

    /// Window size at `level`.
    pub fn window(&self, level: usize) -> usize {
        assert!(
            level >= 1 && level <= self.levels,
            "level {level} out of range 1..={}",
            self.levels
        );
        self.windows[level - 1]
    }

    /// Token count at `level`.
    pub fn token_count(&self, level: usize) -> usize {
        let s = self.side(level);
        s * s
    }

    fn check_token(&self, i: TokenIndex) -> Result<()> {
        if i.level < 1 || i.level > self.levels {
            return Err(Error::invalid(format!(
                "token level {} out of range 1..={}",
                i.level, self.levels
            )));
        }
        let s = self.sides[i.level - 1];
        if i.row >= s || i.col >= s {
            return Err(Error::invalid(format!(
                "token ({}, {}) outside the {s}x{s} grid at level {}",
                i.row, i.col, i.level
            )));
        }
        Ok(())
    }

    /// The four children of `i` at level `i.level + 1`, in row-major slot
    /// order: slot `s` is the child at row offset `s / 2`, column offset
    /// `s % 2`. Errors if `i` is at the finest level.
    pub fn children(&self, i: TokenIndex) -> Result<[TokenIndex; 4]> {
        self.check_token(i)?;
        if i.level == self.levels {
            return Err(Error::invalid(format!(
                "token at finest level {} has no children",
                i.level
            )));
        }
        let level = i.level + 1;
        Ok([
            TokenIndex::new(level, 2 * i.row, 2 * i.col),
            TokenIndex::new(level, 2 * i.row, 2 * i.col + 1),
            TokenIndex::new(level, 2 * i.row + 1, 2 * i.col),
            TokenIndex::new(level, 2 * i.row + 1, 2 * i.col + 1),
        ])
    }

    /// Parent of `i` at level `i.level − 1`; `None` at the coarsest level.
    pub fn parent(&self, i: TokenIndex) -> Result<Option<TokenIndex>> {
        self.check_token(i)?;
        if i.level == 1 {
            return Ok(None);
        }
        Ok(Some(TokenIndex::new(i.level - 1, i.row / 2, i.col / 2)))
    }

    /// Which child slot (0..4, row-major) `i` occupies under its parent.
    pub fn child_slot(i: TokenIndex) -> usize {
        (i.row % 2) * 2 + (i.col % 2)
    }

    /// Attention neighborhood of `i` at its own level: the `w × w` window
    /// centered on `i`, clipped at the grid boundary, in row-major order.
    /// Always contains `i` itself.
    pub fn neighbors(&self, i: TokenIndex) -> Result<Vec<TokenIndex>> {
        self.check_token(i)?;
        let s = self.sides[i.level - 1];
        let w = self.windows[i.level - 1];
        let half = w / 2;
        let row_lo = i.row.saturating_sub(half);
        let row_hi = (i.row + half).min(s - 1);
        let col_lo = i.col.saturating_sub(half);
        let col_hi = (i.col + half).min(s - 1);
        let mut out = Vec::with_capacity(w * w);
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                out.push(TokenIndex::new(i.level, row, col));
            }
        }
        Ok(out)
    }
}
