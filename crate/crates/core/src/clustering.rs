//! Breadth-first connected components over occupied BEV cells.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::InvalidConfig(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Cluster id per cell (`-1` when unoccupied) and the members of each cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMap {
    pub cluster_id: Array2<i32>,
    pub members: Vec<Vec<(usize, usize)>>,
}

impl ClusterMap {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn occupied(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Labels connected components of `occupancy`.
///
/// Seeds are taken in row-major order and grown with a FIFO queue, so ids
/// depend only on the occupancy pattern.
pub fn bfs_clusters(occupancy: &Array2<bool>, connectivity: Connectivity) -> ClusterMap {
    let (h, w) = occupancy.dim();
    let mut cluster_id = Array2::from_elem((h, w), -1i32);
    let mut members = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !occupancy[(i, j)] || cluster_id[(i, j)] >= 0 {
                continue;
            }
            let id = members.len() as i32;
            let mut cells = Vec::new();
            cluster_id[(i, j)] = id;
            queue.push_back((i, j));
            while let Some((ci, cj)) = queue.pop_front() {
                cells.push((ci, cj));
                for &(di, dj) in connectivity.offsets() {
                    let ni = ci as isize + di;
                    let nj = cj as isize + dj;
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let n = (ni as usize, nj as usize);
                    if occupancy[n] && cluster_id[n] < 0 {
                        cluster_id[n] = id;
                        queue.push_back(n);
                    }
                }
            }
            members.push(cells);
        }
    }
    ClusterMap {
        cluster_id,
        members,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Union-find oracle, written independently of the BFS.
    struct Dsu(Vec<usize>);

    impl Dsu {
        fn find(&mut self, x: usize) -> usize {
            let mut r = x;
            while self.0[r] != r {
                r = self.0[r];
            }
            let mut c = x;
            while self.0[c] != r {
                let n = self.0[c];
                self.0[c] = r;
                c = n;
            }
            r
        }
        fn union(&mut self, a: usize, b: usize) {
            let (ra, rb) = (self.find(a), self.find(b));
            if ra != rb {
                self.0[ra.max(rb)] = ra.min(rb);
            }
        }
    }

    fn union_find_roots(occ: &Array2<bool>, eight: bool) -> Vec<Option<usize>> {
        let (h, w) = occ.dim();
        let mut d = Dsu((0..h * w).collect());
        for i in 0..h {
            for j in 0..w {
                if !occ[(i, j)] {
                    continue;
                }
                if j + 1 < w && occ[(i, j + 1)] {
                    d.union(i * w + j, i * w + j + 1);
                }
                if i + 1 < h && occ[(i + 1, j)] {
                    d.union(i * w + j, (i + 1) * w + j);
                }
                if eight && i + 1 < h {
                    if j + 1 < w && occ[(i + 1, j + 1)] {
                        d.union(i * w + j, (i + 1) * w + j + 1);
                    }
                    if j > 0 && occ[(i + 1, j - 1)] {
                        d.union(i * w + j, (i + 1) * w + j - 1);
                    }
                }
            }
        }
        (0..h * w)
            .map(|k| occ[(k / w, k % w)].then(|| d.find(k)))
            .collect()
    }

    #[test]
    fn empty_map() {
        let m = bfs_clusters(&Array2::from_elem((5, 5), false), Connectivity::Eight);
        assert!(m.is_empty());
        assert!(m.cluster_id.iter().all(|&c| c == -1));
    }

    #[test]
    fn diagonal_neighbours() {
        let mut occ = Array2::from_elem((3, 3), false);
        occ[(0, 0)] = true;
        occ[(1, 1)] = true;
        assert_eq!(bfs_clusters(&occ, Connectivity::Four).len(), 2);
        assert_eq!(bfs_clusters(&occ, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn connectivity_parses() {
        assert_eq!(Connectivity::try_from(4).unwrap(), Connectivity::Four);
        assert!(Connectivity::try_from(6).is_err());
    }

    proptest! {
        #[test]
        fn matches_union_find(bits in prop::collection::vec(prop::bool::weighted(0.45), 32 * 32), eight in any::<bool>()) {
            let occ = Array2::from_shape_vec((32, 32), bits).unwrap();
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let map = bfs_clusters(&occ, conn);
            let roots = union_find_roots(&occ, eight);
            let flat: Vec<i32> = map.cluster_id.iter().copied().collect();
            for a in 0..flat.len() {
                prop_assert_eq!(flat[a] >= 0, roots[a].is_some());
                for b in (a + 1)..flat.len() {
                    if let (Some(ra), Some(rb)) = (roots[a], roots[b]) {
                        prop_assert_eq!(ra == rb, flat[a] == flat[b]);
                    }
                }
            }
            let occupied = occ.iter().filter(|&&o| o).count();
            prop_assert_eq!(map.occupied(), occupied);
            let ids: std::collections::BTreeSet<i32> = flat.iter().copied().filter(|&c| c >= 0).collect();
            prop_assert_eq!(ids.into_iter().collect::<Vec<_>>(), (0..map.len() as i32).collect::<Vec<_>>());
            prop_assert_eq!(bfs_clusters(&occ, conn), map);
        }
    }
}
