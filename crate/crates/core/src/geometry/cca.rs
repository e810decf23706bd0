//! Connected components of binary masks by two-pass union-find labelling.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    /// Keeps the smaller index as root, so a root is its component's first pixel.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Component root (first pixel in raster order) per foreground pixel.
pub fn component_roots(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> Vec<Option<u32>> {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut uf = UnionFind { parent: (0..mask.len() as u32).collect() };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            if x > 0 && mask[i - 1] {
                uf.union(i as u32, (i - 1) as u32);
            }
            if y > 0 {
                let up = i - width;
                if mask[up] {
                    uf.union(i as u32, up as u32);
                }
                if conn == Connectivity::Eight {
                    if x > 0 && mask[up - 1] {
                        uf.union(i as u32, (up - 1) as u32);
                    }
                    if x + 1 < width && mask[up + 1] {
                        uf.union(i as u32, (up + 1) as u32);
                    }
                }
            }
        }
    }
    (0..mask.len()).map(|i| mask[i].then(|| uf.find(i as u32))).collect()
}

/// Retains only the largest component; equal sizes go to the component whose
/// first pixel comes earliest in raster order.
pub fn keep_largest_component(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> Vec<bool> {
    let roots = component_roots(mask, height, width, conn);
    let mut sizes = vec![0u32; mask.len()];
    for r in roots.iter().flatten() {
        sizes[*r as usize] += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    for (root, &n) in sizes.iter().enumerate() {
        if n > 0 && best.is_none_or(|(m, _)| n > m) {
            best = Some((n, root));
        }
    }
    match best {
        None => vec![false; mask.len()],
        Some((_, keep)) => roots.iter().map(|r| *r == Some(keep as u32)).collect(),
    }
}
