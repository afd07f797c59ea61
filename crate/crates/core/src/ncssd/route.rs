//! Token orderings of a 2-D grid.

use std::fmt;
use std::str::FromStr;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Permutation of token positions: position `t` of the routed sequence
/// holds token `perm[t]` of the source sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanRoute {
    perm: Vec<usize>,
}

/// Named routes over an `h × w` raster grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteKind {
    Identity,
    Reverse,
    ColumnMajor,
    /// Raster order of the grid rotated by 90°: columns right to left, each
    /// read top to bottom.
    TransposeRaster,
    Random,
}

impl RouteKind {
    pub const ALL: [RouteKind; 5] = [
        RouteKind::Identity,
        RouteKind::Reverse,
        RouteKind::ColumnMajor,
        RouteKind::TransposeRaster,
        RouteKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouteKind::Identity => "identity",
            RouteKind::Reverse => "reverse",
            RouteKind::ColumnMajor => "column-major",
            RouteKind::TransposeRaster => "transpose-raster",
            RouteKind::Random => "random",
        }
    }
}

impl fmt::Display for RouteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scan route {s:?}")))
    }
}

impl ScanRoute {
    /// Validates that `perm` is a bijection on `0..perm.len()`.
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &i in &perm {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => {
                    return Err(Error::Validation(format!(
                        "scan route visits token {i} twice"
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "scan route index {i} out of range for {} tokens",
                        perm.len()
                    )))
                }
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(l: usize) -> Self {
        Self {
            perm: (0..l).collect(),
        }
    }

    pub fn reverse(l: usize) -> Self {
        Self {
            perm: (0..l).rev().collect(),
        }
    }

    pub fn column_major(h: usize, w: usize) -> Self {
        Self {
            perm: (0..w)
                .flat_map(|c| (0..h).map(move |r| r * w + c))
                .collect(),
        }
    }

    pub fn transpose_raster(h: usize, w: usize) -> Self {
        Self {
            perm: (0..w)
                .rev()
                .flat_map(|c| (0..h).map(move |r| r * w + c))
                .collect(),
        }
    }

    pub fn random(l: usize, rng: &mut Rng) -> Self {
        Self {
            perm: rng.permutation(l),
        }
    }

    pub fn of_kind(kind: RouteKind, h: usize, w: usize, rng: &mut Rng) -> Self {
        match kind {
            RouteKind::Identity => Self::identity(h * w),
            RouteKind::Reverse => Self::reverse(h * w),
            RouteKind::ColumnMajor => Self::column_major(h, w),
            RouteKind::TransposeRaster => Self::transpose_raster(h, w),
            RouteKind::Random => Self::random(h * w, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (t, &i) in self.perm.iter().enumerate() {
            inv[i] = t;
        }
        Self { perm: inv }
    }

    /// Route equal to applying `self` and then `next`.
    pub fn then(&self, next: &ScanRoute) -> Result<Self> {
        if next.len() != self.len() {
            return Err(Error::dim(
                "route composition",
                &[self.len()],
                &[next.len()],
            ));
        }
        Ok(Self {
            perm: next.perm.iter().map(|&i| self.perm[i]).collect(),
        })
    }

    /// Reorders `axis` of `t` along the route.
    pub fn apply<T: Element>(&self, t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        if axis >= t.rank() || t.shape()[axis] != self.len() {
            return Err(Error::dim("apply route", t.shape(), &[self.len()]));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let l = self.len();
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for o in 0..outer {
            for &i in &self.perm {
                out.extend_from_slice(&src[(o * l + i) * inner..][..inner]);
            }
        }
        Tensor::new(t.shape(), out)
    }
}
