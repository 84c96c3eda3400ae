use grot_core::bundles::{mdf_distance, quickbundles, resample_track, significant_clusters, ResampledTrack};
use grot_core::flowlines::{pathway_density, seed_points, trace_all, trace_streamline};
use grot_core::forward::{TimeGrid, VelocitySeries};
use grot_core::grid::{CellGrid, VectorField};
use grot_core::synth::{gaussian_blob, planted_bundles};
use proptest::prelude::*;

const OMEGA: f64 = 2.0 * std::f64::consts::PI;

fn rotation(n: usize) -> VelocitySeries {
    let g = CellGrid::unit(&[n, n]).unwrap();
    let field = VectorField::from_fn(g, |x| vec![-OMEGA * (x[1] - 0.5), OMEGA * (x[0] - 0.5)]);
    VelocitySeries::steady(field, TimeGrid::unit(1).unwrap())
}

fn endpoint_error(v: &VelocitySeries, step: f64) -> f64 {
    let s = trace_streamline(v, &[0.75, 0.5], step, 1_000_000).unwrap();
    let end = s.points.last().unwrap();
    // one full turn returns to the seed
    ((end[0] - 0.75).powi(2) + (end[1] - 0.5).powi(2)).sqrt()
}

#[test]
fn rotation_keeps_radius() {
    let v = rotation(64);
    let s = trace_streamline(&v, &[0.75, 0.5], 1e-3, 1_000_000).unwrap();
    assert_eq!(s.points.len(), 1001);
    for p in &s.points {
        let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
        assert!((r - 0.25).abs() < 1e-4 * 0.25, "{r}");
    }
}

#[test]
fn rk4_is_fourth_order() {
    let v = rotation(32);
    let (coarse, fine) = (endpoint_error(&v, 0.02), endpoint_error(&v, 0.01));
    let ratio = coarse / fine;
    assert!((ratio - 16.0).abs() < 2.0, "{coarse} {fine} {ratio}");
}

#[test]
fn uniform_flow_gives_straight_lines() {
    let g = CellGrid::new(&[10, 12, 8], &[0.1, 0.1, 0.1]).unwrap();
    let dir = [0.3, -0.2, 0.1];
    let v = VelocitySeries::steady(VectorField::uniform(g, &dir).unwrap(), TimeGrid::unit(4).unwrap());
    let seed = [0.3, 0.8, 0.35];
    let s = trace_streamline(&v, &seed, 0.01, 10_000).unwrap();
    assert_eq!(s.points.len(), 101);
    let norm = (dir.iter().map(|d| d * d).sum::<f64>()).sqrt();
    for p in &s.points {
        let d: Vec<f64> = p.iter().zip(&seed).map(|(a, b)| a - b).collect();
        let cross = [
            d[1] * dir[2] - d[2] * dir[1],
            d[2] * dir[0] - d[0] * dir[2],
            d[0] * dir[1] - d[1] * dir[0],
        ];
        let off = cross.iter().map(|c| c * c).sum::<f64>().sqrt() / norm;
        assert!(off < 1e-9 * g.diameter(), "{off}");
    }
    let end = s.points.last().unwrap();
    for k in 0..3 {
        assert!((end[k] - seed[k] - dir[k]).abs() < 1e-12);
    }
}

#[test]
fn streamlines_stay_inside_and_respect_step() {
    let v = rotation(16);
    let g = v.grid;
    let seeds: Vec<Vec<f64>> = (0..g.cell_count()).step_by(7).map(|c| g.center(c)).collect();
    let vmax = v.max_speed();
    for s in trace_all(&v, &seeds, 0.01, 100_000).unwrap() {
        for w in s.points.windows(2) {
            assert!(g.contains(&w[1]));
            let d: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d <= s.step_size * vmax * (1.0 + 1e-9));
        }
    }
}

#[test]
fn seed_order_does_not_change_results() {
    let v = rotation(16);
    let rho = gaussian_blob(&v.grid, &[0.6, 0.45], 0.1, 1.0).unwrap();
    let seeds = seed_points(&rho, 0.5).unwrap();
    let mut reversed = seeds.clone();
    reversed.reverse();
    let a = trace_all(&v, &seeds, 0.02, 10_000).unwrap();
    let mut b = trace_all(&v, &reversed, 0.02, 10_000).unwrap();
    b.reverse();
    assert_eq!(a, b);
    assert_eq!(pathway_density(&a, &v.grid).unwrap(), pathway_density(&b, &v.grid).unwrap());
}

#[test]
fn zero_flow_pathways_equal_seed_occupancy() {
    let g = CellGrid::unit(&[8, 8]).unwrap();
    let v = VelocitySeries::zeros(g, TimeGrid::unit(4).unwrap());
    let rho = gaussian_blob(&g, &[0.5, 0.5], 0.1, 1.0).unwrap();
    let seeds = seed_points(&rho, 0.7).unwrap();
    let lines = trace_all(&v, &seeds, 0.1, 100).unwrap();
    let map = pathway_density(&lines, &g).unwrap();
    assert_eq!(map.counts.iter().sum::<u32>() as usize, seeds.len());
    for s in &seeds {
        assert_eq!(map.counts[g.cell_of(s).unwrap()], 1);
    }
}

fn planted(per: usize) -> (Vec<ResampledTrack>, Vec<usize>) {
    let (tracks, labels) = planted_bundles(per, 0.02, 7);
    (tracks.iter().map(|t| resample_track(t, 12).unwrap()).collect(), labels)
}

#[test]
fn planted_bundles_are_recovered() {
    let (tracks, labels) = planted(20);
    let set = quickbundles(&tracks, 0.15).unwrap();
    assert_eq!(set.clusters.len(), 2);
    for c in &set.clusters {
        let first = labels[c.members[0]];
        assert!(c.members.iter().all(|&m| labels[m] == first));
        assert_eq!(c.size(), 20);
    }
    assert_eq!(significant_clusters(&set, 5).clusters.len(), 2);
}

#[test]
fn threshold_sweep_is_monotone() {
    let (tracks, _) = planted(20);
    let counts: Vec<usize> = (1..=10)
        .map(|i| quickbundles(&tracks, 0.03 * i as f64).unwrap().clusters.len())
        .collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn members_partition_the_input() {
    let (tracks, _) = planted(15);
    for threshold in [0.01, 0.05, 0.2, 1.0] {
        let set = quickbundles(&tracks, threshold).unwrap();
        let mut all: Vec<usize> = set.clusters.iter().flat_map(|c| c.members.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..tracks.len()).collect::<Vec<_>>());
    }
}

fn track_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..20)
}

proptest! {
    #[test]
    fn mdf_is_symmetric_and_flip_invariant(a in track_strategy(), b in track_strategy()) {
        let (ra, rb) = (resample_track(&a, 12).unwrap(), resample_track(&b, 12).unwrap());
        let d = mdf_distance(&ra, &rb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, mdf_distance(&rb, &ra).unwrap());
        prop_assert!((d - mdf_distance(&ra.reversed(), &rb).unwrap()).abs() < 1e-12);
        prop_assert_eq!(mdf_distance(&ra, &ra).unwrap(), 0.0);
    }

    #[test]
    fn resampling_spaces_points_evenly(a in track_strategy(), k in 2usize..30) {
        let r = resample_track(&a, k).unwrap();
        prop_assert_eq!(r.len(), k);
        prop_assert_eq!(&r.points[0], &a[0]);
        prop_assert_eq!(r.points.last().unwrap(), a.last().unwrap());
        // on a straight polyline, arc-length gaps are chord gaps
        let line: Vec<Vec<f64>> = (0..a.len()).map(|i| vec![i as f64 * i as f64, 0.0]).collect();
        let rl = resample_track(&line, k).unwrap();
        let gaps: Vec<f64> = rl.points.windows(2).map(|w| w[1][0] - w[0][0]).collect();
        for g in &gaps {
            prop_assert!((g - gaps[0]).abs() <= 1e-9 * gaps[0].abs().max(1e-300));
        }
    }
}
