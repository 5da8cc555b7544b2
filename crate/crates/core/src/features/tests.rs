use proptest::prelude::*;

use super::glcm::{cooccurrence_counts, offset, ANGLES, DISTANCES};
use super::*;
use crate::io::{ThermalFrame, ThermalSequence};
use crate::phantom::{generate_case, PhantomSpec};
use crate::registration::{WarpKind, WarpModel};

/// Brute-force oracle: enumerate every ordered pixel pair and count those
/// displaced by `±offset`, then evaluate the textbook formulas.
fn brute_force(levels: &[Option<u8>], w: usize, h: usize, n_levels: usize, d: usize, angle: u32) -> Option<[f64; 6]> {
    let (dx, dy) = offset(d, angle);
    let mut p = vec![vec![0.0f64; n_levels]; n_levels];
    let mut total = 0.0;
    for a in 0..w * h {
        for b in 0..w * h {
            let (ax, ay) = ((a % w) as isize, (a / w) as isize);
            let (bx, by) = ((b % w) as isize, (b / w) as isize);
            let fwd = bx - ax == dx && by - ay == dy;
            let back = bx - ax == -dx && by - ay == -dy;
            if !(fwd || back) {
                continue;
            }
            if let (Some(la), Some(lb)) = (levels[a], levels[b]) {
                p[la as usize][lb as usize] += 1.0;
                total += 1.0;
            }
        }
    }
    if total < 32.0 {
        return None;
    }
    let mut out = [0.0; 6];
    let mut mu_i = 0.0;
    let mut mu_j = 0.0;
    for i in 0..n_levels {
        for j in 0..n_levels {
            let q = p[i][j] / total;
            let dd = (i as f64 - j as f64).powi(2);
            out[0] += q * dd;
            out[1] += q * (i as f64 - j as f64).abs();
            out[2] += q / (1.0 + dd);
            out[5] += q * q;
            mu_i += q * i as f64;
            mu_j += q * j as f64;
        }
    }
    let (mut si, mut sj, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n_levels {
        for j in 0..n_levels {
            let q = p[i][j] / total;
            si += q * (i as f64 - mu_i).powi(2);
            sj += q * (j as f64 - mu_j).powi(2);
            cov += q * (i as f64 - mu_i) * (j as f64 - mu_j);
        }
    }
    out[3] = out[5].sqrt();
    out[4] = if si > 0.0 && sj > 0.0 { cov / (si.sqrt() * sj.sqrt()) } else { 1.0 };
    Some(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn glcm_matches_pair_enumeration(
        raw in proptest::collection::vec(0u8..64, 64),
        holes in proptest::collection::vec(proptest::bool::weighted(0.1), 64),
    ) {
        let levels: Vec<Option<u8>> = raw.iter().zip(&holes).map(|(&l, &hole)| (!hole).then_some(l)).collect();
        let region = GrayRegion::new(8, 8, levels.clone(), 64);
        for d in DISTANCES {
            for a in ANGLES {
                let got = glcm(&region, d, a);
                match brute_force(&levels, 8, 8, 64, d, a) {
                    // the oracle counts both orientations
                    Some(expect) => {
                        let got = got.unwrap().to_array();
                        for (g, e) in got.iter().zip(&expect) {
                            prop_assert!((g - e).abs() <= 1e-12, "d={d} a={a}: {got:?} vs {expect:?}");
                        }
                    }
                    None => { let refused = matches!(got, Err(FeatureError::TooFewPairs { .. })); prop_assert!(refused) }
                }
            }
        }
    }

    #[test]
    fn pair_count_is_half_the_symmetric_total(raw in proptest::collection::vec(0u8..8, 36), d in 1usize..4) {
        let region = GrayRegion::dense(6, 6, &raw, 8);
        for a in ANGLES {
            let (c, n) = cooccurrence_counts(&region, d, a);
            prop_assert_eq!(c.iter().sum::<u64>() as usize, n);
        }
    }

    #[test]
    fn mean_std_ignores_pixel_order(mut v in proptest::collection::vec(20.0f64..40.0, 1..200), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut w = v.clone();
        w.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(series::mean_std(&mut v), series::mean_std(&mut w));
    }
}

fn phantom_case(spec: &PhantomSpec) -> AlignedCase {
    let c = generate_case(spec, "c1", "p1").unwrap();
    AlignedCase {
        case_id: "c1".into(),
        annotations: c.record.annotations.clone(),
        aligned: AlignedSequence::unwarped(&c.sequence),
        precool_warp: WarpModel::identity(WarpKind::Affine),
        roi: c.mask,
    }
}

fn constant_case(value: f32) -> AlignedCase {
    let (w, h) = (80, 60);
    let pre = ThermalFrame::constant(w, h, -30.0, value).unwrap();
    let frames = (0..=120).map(|t| ThermalFrame::constant(w, h, t as f64, value).unwrap()).collect();
    let seq = ThermalSequence::new(pre, frames, 1.0).unwrap();
    AlignedCase {
        case_id: "k".into(),
        annotations: vec![NoduleAnnotation::point("n1", 40.0, 30.0), NoduleAnnotation::point("n2", 20.0, 20.0)],
        aligned: AlignedSequence::unwarped(&seq),
        precool_warp: WarpModel::identity(WarpKind::Translation),
        roi: RoiMask::from_fn(w, h, |x, y| (x - 40.0).powi(2) + (y - 30.0).powi(2) < 400.0),
    }
}

#[test]
fn phantom_cardinalities_and_names() {
    let case = phantom_case(&PhantomSpec::with_seed(7).without_jitter());
    let recs = extract_all(&case).unwrap();
    assert_eq!(recs.len(), 1);
    let r = &recs[0];
    let lens: Vec<usize> = r.blocks.iter().map(|b| b.values.len()).collect();
    assert_eq!(lens, [42, 576, 576, 1152, 90]);
    assert_eq!(r.values().count(), TOTAL_FEATURES);
    let names: Vec<&str> = r.names().collect();
    let unique: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert_eq!(names[0], "temporal.roi.mean.auc");
    assert_eq!(r.blocks[1].names[0], "roi_textural.precool.d1.a0.contrast");
    assert_eq!(r.blocks[1].names[575], "roi_textural.t105.d5.a135.asm");
    assert_eq!(r.blocks[3].names[576], "relative_textural.ratio.precool.d1.a0.contrast");
    assert_eq!(r.blocks[4].names[89], "first_order.t120_minus_t0.nodule_minus_roi.mode");
    let tbl = FeatureTable::from_records(&recs, None).unwrap();
    for f in Family::ALL {
        let range = tbl.family_range(f).unwrap();
        assert_eq!(range.len(), f.len());
    }
    // viable nodule is hotter than the ROI at the end of recovery
    let fo = r.block(Family::FirstOrder).unwrap();
    let k = fo.names.iter().position(|n| n == "first_order.t120.nodule_minus_roi.mean").unwrap();
    assert!(fo.values[k] > 0.0);
}

#[test]
fn constant_case_values() {
    let recs = extract_all(&constant_case(30.0)).unwrap();
    assert_eq!(recs.len(), 2);
    // shared ROI texture
    assert_eq!(recs[0].blocks[1], recs[1].blocks[1]);
    let r = &recs[0];
    let t = &r.blocks[0];
    for (n, v) in t.names.iter().zip(&t.values) {
        let expect = if n.ends_with(".mean.auc") { 3600.0 } else { 0.0 };
        assert_eq!(*v, expect, "{n}");
    }
    for b in &r.blocks[1..3] {
        for (n, v) in b.names.iter().zip(&b.values) {
            if n.ends_with("contrast") {
                assert_eq!(*v, 0.0);
            }
        }
    }
    let fo = &r.blocks[4];
    for (n, v) in fo.names.iter().zip(&fo.values) {
        let diff = n.contains("minus");
        if n.ends_with(".mean") {
            assert_eq!(*v, if diff { 0.0 } else { 30.0 }, "{n}");
        }
        if n.ends_with(".std") {
            assert_eq!(*v, 0.0, "{n}");
        }
    }
}

#[test]
fn roi_mean_matches_analytic_field() {
    let spec = PhantomSpec::with_seed(11).without_jitter();
    let case = phantom_case(&spec);
    let series = extract_region_series(&case.aligned, &case.roi, (172.0, 112.0)).unwrap();
    let n = case.roi.count() as f64;
    for t in [0usize, 30, 120] {
        let mut sum = 0.0;
        for i in 0..spec.height {
            for j in 0..spec.width {
                if case.roi.get(i, j) {
                    sum += spec.temperature(j as f64 + 0.5, i as f64 + 0.5, t as f64);
                }
            }
        }
        let analytic = sum / n;
        let tol = 2.0 * spec.noise_sigma / n.sqrt();
        assert!((series[0].samples[t] - analytic).abs() <= tol, "t={t}");
    }
}

#[test]
fn windows_clip_at_the_corner() {
    let case = constant_case(31.0);
    let full = RoiMask::full(80, 60);
    let s = extract_region_series(&case.aligned, &full, (0.0, 0.0)).unwrap();
    assert_eq!(s.len(), 6);
    assert_eq!(window_mask(80, 60, (0.0, 0.0), 20.0).count(), 100);
    assert_eq!(window_mask(80, 60, (40.0, 30.0), 20.0).count(), 400);
    assert!(matches!(
        extract_region_series(&case.aligned, &case.roi, (0.0, 0.0)),
        Err(FeatureError::EmptyRegion { .. })
    ));
}

#[test]
fn nodule_block_equals_roi_block_on_same_region() {
    let case = phantom_case(&PhantomSpec::small(96, 72, 3).without_jitter());
    let images = texture_images(&case.aligned).unwrap();
    let frames: Vec<_> = images.iter().map(|(_, f)| *f).collect();
    let q = Quantizer::fit(&frames, &case.roi).unwrap();
    let a = textural_block(Family::RoiTextural, &images, &case.roi, &q).unwrap();
    let b = textural_block(Family::NoduleTextural, &images, &case.roi, &q).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn texture_ignores_an_added_constant() {
    let case = phantom_case(&PhantomSpec::small(96, 72, 5));
    let mut shifted = case.clone();
    shifted.aligned.precool = shifted.aligned.precool.map_temps(|t| t + 2.5);
    for f in &mut shifted.aligned.frames {
        *f = f.map_temps(|t| t + 2.5);
    }
    let a = extract_all(&case).unwrap();
    let b = extract_all(&shifted).unwrap();
    for f in [Family::RoiTextural, Family::NoduleTextural, Family::RelativeTextural] {
        assert_eq!(a[0].block(f).unwrap().values, b[0].block(f).unwrap().values, "{f}");
    }
}

#[test]
fn extraction_is_deterministic_and_csv_round_trips() {
    let case = phantom_case(&PhantomSpec::small(96, 72, 9));
    let a = extract_all(&case).unwrap();
    let b = extract_all(&case).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("features.csv");
    write_feature_csvs(&a, &wide, &dir.path().join("families")).unwrap();
    let back = FeatureTable::read_csv(&wide).unwrap();
    assert_eq!(back, FeatureTable::from_records(&a, None).unwrap());
    let fam = FeatureTable::read_csv(&dir.path().join("families/first_order.csv")).unwrap();
    assert_eq!(fam.names.len(), 90);
}

#[test]
fn polygon_nodule_follows_the_precool_warp() {
    let mut ann = NoduleAnnotation::point("n", 23.0, 14.0);
    ann.polygon = Some(vec![[18.0, 10.0], [28.0, 10.0], [28.0, 18.0], [18.0, 18.0]]);
    let warp = WarpModel::translation(3.0, -2.0);
    let r = locate_nodule(&ann, &warp, 64, 48).unwrap();
    assert_eq!(r.point, (20.0, 16.0));
    let expect = RoiMask::from_fn(64, 48, |x, y| (15.0..25.0).contains(&x) && (12.0..20.0).contains(&y));
    assert_eq!(r.region, expect);
    let window = locate_nodule(&NoduleAnnotation::point("m", 30.0, 20.0), &warp, 64, 48).unwrap();
    assert_eq!(window.region.count(), 400);
}

#[test]
fn missing_frames_are_refused() {
    let pre = ThermalFrame::constant(40, 30, -5.0, 30.0).unwrap();
    let frames = (0..=60).map(|t| ThermalFrame::constant(40, 30, t as f64 * 2.0, 30.0).unwrap()).collect();
    let seq = ThermalSequence::new(pre, frames, 0.5).unwrap();
    let aligned = AlignedSequence::unwarped(&seq);
    assert!(matches!(
        extract_region_series(&aligned, &RoiMask::full(40, 30), (20.0, 15.0)),
        Err(FeatureError::MissingFrame(t)) if t == 1.0
    ));
}
