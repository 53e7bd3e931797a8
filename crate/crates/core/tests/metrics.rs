//! Dice, IoU and HD95 against a brute-force evaluator.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmamba::metrics::{argmax_labels, dice, evaluate, hd95, iou, nearest_rank_percentile, LabelVolume, Mask};
use voxmamba::{Error, Tensor};

const N: usize = 16;

fn idx(d: [usize; 3], [h, w, z]: [usize; 3]) -> usize {
    (h * d[1] + w) * d[2] + z
}

fn brute_boundary(m: &Mask) -> Vec<[usize; 3]> {
    let d = m.dims;
    let mut out = Vec::new();
    for h in 0..d[0] {
        for w in 0..d[1] {
            for z in 0..d[2] {
                if !m.data[idx(d, [h, w, z])] {
                    continue;
                }
                let c = [h as isize, w as isize, z as isize];
                let offsets = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                let exposed = offsets.iter().any(|o| {
                    let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                    let inside = (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < d[a]);
                    !inside || !m.data[idx(d, [n[0] as usize, n[1] as usize, n[2] as usize])]
                });
                if exposed {
                    out.push([h, w, z]);
                }
            }
        }
    }
    out
}

/// Directed nearest-rank 95th percentile by exhaustive pairwise search.
fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    d[rank.max(1) - 1]
}

fn brute_hd95(p: &Mask, g: &Mask, s: [f64; 3]) -> f64 {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    brute_directed(&bp, &bg, s).max(brute_directed(&bg, &bp, s))
}

fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let inter = p.data.iter().zip(&g.data).filter(|(a, b)| **a && **b).count();
    2.0 * inter as f64 / (p.count() + g.count()) as f64
}

/// Two overlapping boxes and a ball on a 16³ grid.
fn phantom() -> Vec<u8> {
    let mut l = vec![0u8; N * N * N];
    for h in 0..N {
        for w in 0..N {
            for z in 0..N {
                let r2 = (h as f64 - 10.0).powi(2) + (w as f64 - 9.0).powi(2) + (z as f64 - 8.0).powi(2);
                l[idx([N; 3], [h, w, z])] = if (2..7).contains(&h) && (3..12).contains(&w) && (1..9).contains(&z) {
                    1
                } else if r2 <= 12.0 {
                    2
                } else {
                    0
                };
            }
        }
    }
    l
}

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> Mask {
    let n = dims.iter().product();
    Mask::new(dims, (0..n).map(|_| rng.random_bool(p)).collect()).unwrap()
}

#[test]
fn single_voxel_errors_match_brute_force_exactly() {
    let gt = LabelVolume::new([N; 3], phantom(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..12 {
        let mut pred = phantom();
        for _ in 0..=trial % 4 {
            let i = rng.random_range(0..pred.len());
            pred[i] = rng.random_range(0..3);
        }
        let pv = LabelVolume::new([N; 3], pred, 3).unwrap();
        let report = evaluate(&pv, &gt).unwrap();
        for c in &report.classes {
            let (p, g) = (pv.mask(c.class as u8), gt.mask(c.class as u8));
            assert_eq!(c.dice, brute_dice(&p, &g), "trial {trial} class {}", c.class);
            assert_eq!(c.hd95, brute_hd95(&p, &g, [1.0; 3]), "trial {trial} class {}", c.class);
            assert_eq!(p.boundary(), brute_boundary(&p));
        }
    }
}

#[test]
fn anisotropic_spacing_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = [6.35, 1.52, 1.52];
    for _ in 0..5 {
        let p = random_mask(&mut rng, [10, 12, 9], 0.2);
        let g = random_mask(&mut rng, [10, 12, 9], 0.2);
        let got = hd95(&p, &g, Some(s)).unwrap().value;
        assert!((got - brute_hd95(&p, &g, s)).abs() < 1e-9);
    }
}

#[test]
fn identical_label_volumes() {
    let gt = LabelVolume::new([N; 3], phantom(), 3).unwrap();
    let r = evaluate(&gt, &gt).unwrap();
    assert!(r.classes.iter().all(|c| c.dice == 1.0 && c.hd95 == 0.0 && c.hd95_defined));
    assert_eq!(r.mean_dice, Some(1.0));
    assert_eq!(r.distance_unit, "voxel");
}

#[test]
fn golden_hd95() {
    let p = Mask::from_points([4, 4, 4], &[[0, 0, 0]]).unwrap();
    let g = Mask::from_points([4, 4, 4], &[[0, 0, 3]]).unwrap();
    assert_eq!(hd95(&p, &g, None).unwrap().value, 3.0);
    assert_eq!(nearest_rank_percentile(&mut [2.5], 95.0), Some(2.5));
}

#[test]
fn outliers_within_five_percent_are_ignored() {
    // Two parallel 20×20 sheets one voxel apart: every directed distance is 1.
    let dims = [40, 20, 20];
    let mut pts_p = Vec::new();
    let mut pts_g = Vec::new();
    for w in 0..20 {
        for z in 0..20 {
            pts_p.push([0, w, z]);
            pts_g.push([1, w, z]);
        }
    }
    let base = hd95(&Mask::from_points(dims, &pts_p).unwrap(), &Mask::from_points(dims, &pts_g).unwrap(), None)
        .unwrap()
        .value;
    assert_eq!(base, 1.0);
    // 20 of 420 boundary points (< 5 %) far away.
    for z in 0..20 {
        pts_p.push([39, 0, z]);
    }
    let with_outliers = hd95(&Mask::from_points(dims, &pts_p).unwrap(), &Mask::from_points(dims, &pts_g).unwrap(), None)
        .unwrap()
        .value;
    assert_eq!(with_outliers, 1.0);
}

#[test]
fn dilation_toward_ground_truth_never_lowers_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = random_mask(&mut rng, [8, 8, 8], 0.3);
        let mut p = random_mask(&mut rng, [8, 8, 8], 0.1);
        let mut prev = dice(&p, &g).unwrap();
        // Each step adds ground-truth voxels adjacent to the prediction.
        for _ in 0..4 {
            let grown: Vec<bool> = (0..512)
                .map(|i| {
                    let c = p.coords(i);
                    p.data[i]
                        || (g.data[i]
                            && (0..3).any(|a| {
                                [-1isize, 1].iter().any(|&dlt| {
                                    let n = c[a] as isize + dlt;
                                    (0..8).contains(&n) && {
                                        let mut q = c;
                                        q[a] = n as usize;
                                        p.data[p.index(q)]
                                    }
                                })
                            }))
                })
                .collect();
            p = Mask::new([8, 8, 8], grown).unwrap();
            let d = dice(&p, &g).unwrap();
            assert!(d >= prev);
            prev = d;
        }
    }
}

#[test]
fn argmax_ties_go_to_lowest_class() {
    let logits = Tensor::<f64>::from_f64(&[1, 1, 2, 3], &[0.5, 0.5, 0.1, 0.2, 0.7, 0.7]).unwrap();
    assert_eq!(argmax_labels(&logits).unwrap().labels, vec![0, 1]);
}

#[test]
fn mismatched_inputs() {
    let a = LabelVolume::new([2, 2, 2], vec![0; 8], 3).unwrap();
    let b = LabelVolume::new([2, 2, 2], vec![0; 8], 2).unwrap();
    assert!(matches!(evaluate(&a, &b), Err(Error::Config(_))));
    let c = LabelVolume::new([2, 2, 1], vec![0; 4], 3).unwrap();
    assert!(matches!(evaluate(&a, &c), Err(Error::Dimension { .. })));
    assert!(LabelVolume::new([2, 2, 2], vec![3; 8], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_iou_identity(seed in any::<u64>(), fill in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mask(&mut rng, [5, 6, 7], fill);
        let g = random_mask(&mut rng, [5, 6, 7], fill);
        let (d, j) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hd95_is_symmetric(seed in any::<u64>(), fill in 0.02f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_mask(&mut rng, [7, 6, 5], fill);
        let g = random_mask(&mut rng, [7, 6, 5], fill);
        prop_assert_eq!(hd95(&p, &g, None).unwrap(), hd95(&g, &p, None).unwrap());
        prop_assert!(hd95(&p, &g, None).unwrap().value >= 0.0);
    }
}
