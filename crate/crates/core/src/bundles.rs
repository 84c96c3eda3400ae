//! Track resampling, minimum-direct-flip distance and single-pass
//! QuickBundles clustering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CellGrid;

pub const DEFAULT_TRACK_POINTS: usize = 12;

/// A polyline with a fixed number of points, equally spaced in arc length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResampledTrack {
    pub points: Vec<Vec<f64>>,
}

impl ResampledTrack {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reversed(&self) -> ResampledTrack {
        ResampledTrack {
            points: self.points.iter().rev().cloned().collect(),
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Resample `points` to `k` points at equal arc-length spacing, keeping both
/// endpoints. A polyline of zero length collapses to `k` copies of its start.
pub fn resample_track(points: &[Vec<f64>], k: usize) -> Result<ResampledTrack> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 resample points, got {k}")));
    }
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot resample an empty track".into()))?;
    if points.iter().any(|p| p.len() != first.len()) {
        return Err(Error::ShapeMismatch("track points differ in dimension".into()));
    }
    let mut arc = Vec::with_capacity(points.len());
    arc.push(0.0);
    for w in points.windows(2) {
        arc.push(arc.last().unwrap() + distance(&w[0], &w[1]));
    }
    let total = *arc.last().unwrap();
    if total == 0.0 {
        return Ok(ResampledTrack {
            points: vec![first.clone(); k],
        });
    }
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for i in 0..k {
        if i == k - 1 {
            out.push(points.last().unwrap().clone());
            break;
        }
        let s = total * i as f64 / (k - 1) as f64;
        while seg + 2 < arc.len() && arc[seg + 1] < s {
            seg += 1;
        }
        let len = arc[seg + 1] - arc[seg];
        let f = if len > 0.0 { ((s - arc[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (&points[seg], &points[seg + 1]);
        out.push(a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect());
    }
    Ok(ResampledTrack { points: out })
}

fn mean_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| distance(p, q)).sum::<f64>() / a.len() as f64
}

/// Summed in mirrored pairs so that swapping `a` and `b` gives the same bits.
fn mean_distance_flipped(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let k = a.len();
    let d = |i: usize| distance(&a[i], &b[k - 1 - i]);
    let mut sum = 0.0;
    for i in 0..k / 2 {
        sum += d(i) + d(k - 1 - i);
    }
    if k % 2 == 1 {
        sum += d(k / 2);
    }
    sum / k as f64
}

fn check_pair(a: &ResampledTrack, b: &ResampledTrack) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "tracks have {} and {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Minimum over both orientations of the mean pointwise distance.
pub fn mdf_distance(a: &ResampledTrack, b: &ResampledTrack) -> Result<f64> {
    check_pair(a, b)?;
    Ok(mean_distance(&a.points, &b.points).min(mean_distance_flipped(&a.points, &b.points)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: ResampledTrack,
    /// Indices into the clustered track list, in insertion order.
    pub members: Vec<usize>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub threshold: f64,
    pub clusters: Vec<Cluster>,
}

/// Single pass in input order: each track joins the nearest existing
/// centroid (lowest index on ties) if that MDF distance is within
/// `threshold`, otherwise it starts a new cluster. Members are flipped to
/// match the centroid's orientation before being averaged in.
pub fn quickbundles(tracks: &[ResampledTrack], threshold: f64) -> Result<ClusterSet> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be > 0")));
    }
    let Some(first) = tracks.first() else {
        return Ok(ClusterSet {
            threshold,
            clusters: Vec::new(),
        });
    };
    let (k, dim) = (first.len(), first.points.first().map_or(0, Vec::len));
    if k == 0 || tracks.iter().any(|t| t.len() != k || t.points.iter().any(|p| p.len() != dim)) {
        return Err(Error::ShapeMismatch("all tracks must share point count and dimension".into()));
    }

    let mut sums: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for (idx, track) in tracks.iter().enumerate() {
        let mut best: Option<(usize, f64, bool)> = None;
        for (c, cluster) in clusters.iter().enumerate() {
            let direct = mean_distance(&track.points, &cluster.centroid.points);
            let flipped = mean_distance_flipped(&track.points, &cluster.centroid.points);
            let (d, flip) = if flipped < direct { (flipped, true) } else { (direct, false) };
            if best.is_none_or(|(_, bd, _)| d < bd) {
                best = Some((c, d, flip));
            }
        }
        match best {
            Some((c, d, flip)) if d <= threshold => {
                let sum = &mut sums[c];
                for (i, acc) in sum.iter_mut().enumerate() {
                    let p = if flip { &track.points[k - 1 - i] } else { &track.points[i] };
                    for (a, x) in acc.iter_mut().zip(p) {
                        *a += x;
                    }
                }
                let cluster = &mut clusters[c];
                cluster.members.push(idx);
                let n = cluster.members.len() as f64;
                cluster.centroid.points = sum.iter().map(|p| p.iter().map(|x| x / n).collect()).collect();
            }
            _ => {
                sums.push(track.points.clone());
                clusters.push(Cluster {
                    centroid: track.clone(),
                    members: vec![idx],
                });
            }
        }
    }
    Ok(ClusterSet { threshold, clusters })
}

/// Clusters with at least `min_size` members, in their original order.
pub fn significant_clusters(set: &ClusterSet, min_size: usize) -> ClusterSet {
    ClusterSet {
        threshold: set.threshold,
        clusters: set.clusters.iter().filter(|c| c.size() >= min_size).cloned().collect(),
    }
}

/// Paint each cell crossed by a cluster centroid with that cluster's 1-based
/// index; where centroids overlap the larger cluster wins, then the earlier
/// one. Unvisited cells stay 0.
pub fn label_volume(set: &ClusterSet, grid: &CellGrid) -> Vec<u32> {
    let mut labels = vec![0u32; grid.cell_count()];
    let mut owner_size = vec![0usize; grid.cell_count()];
    let step = 0.25 * grid.min_spacing();
    for (ci, cluster) in set.clusters.iter().enumerate() {
        let mut cells: Vec<usize> = Vec::new();
        let pts = &cluster.centroid.points;
        for (i, p) in pts.iter().enumerate() {
            let mut q = p.clone();
            grid.clamp_point(&mut q);
            cells.extend(grid.cell_of(&q));
            if let Some(next) = pts.get(i + 1) {
                let n = (distance(p, next) / step).ceil() as usize;
                for s in 1..n {
                    let f = s as f64 / n as f64;
                    let mut q: Vec<f64> = p.iter().zip(next).map(|(a, b)| a + f * (b - a)).collect();
                    grid.clamp_point(&mut q);
                    cells.extend(grid.cell_of(&q));
                }
            }
        }
        cells.sort_unstable();
        cells.dedup();
        for c in cells {
            if cluster.size() > owner_size[c] {
                owner_size[c] = cluster.size();
                labels[c] = ci as u32 + 1;
            }
        }
    }
    labels
}
