use proptest::prelude::*;
use thermoviab::io::ThermalFrame;
use thermoviab::phantom::{generate_case, PhantomSpec};
use thermoviab::registration::{ecc_align, stabilize_sequence, EccConfig, StabilizeConfig, WarpKind, WarpModel};

fn phantom_frame(spec: &PhantomSpec, t: f64, shift: (f64, f64)) -> ThermalFrame {
    let temps = (0..spec.height)
        .flat_map(|i| (0..spec.width).map(move |j| (i, j)))
        .map(|(i, j)| spec.temperature(j as f64 + 0.5 - shift.0, i as f64 + 0.5 - shift.1, t) as f32)
        .collect();
    ThermalFrame::new(spec.width, spec.height, t, temps).unwrap()
}

#[test]
fn jittered_sequence_is_recovered() {
    let case = generate_case(&PhantomSpec::with_seed(11), "c", "p").unwrap();
    let st = stabilize_sequence(&case.sequence, &StabilizeConfig::default()).unwrap();
    // frame 0 is unjittered, so each warp should translate by the frame's own jitter
    let warps = std::iter::once(&st.precool).chain(&st.frames);
    let mut sq = 0.0;
    for (w, j) in warps.zip(&case.truth.jitter) {
        let (tx, ty) = w.translation_part();
        sq += (tx - j.dx).powi(2) + (ty - j.dy).powi(2);
    }
    let rms = (sq / case.truth.jitter.len() as f64).sqrt();
    assert!(rms < 0.2, "RMS {rms}");
}

#[test]
fn jitter_free_noise_free_sequence_stays_at_identity() {
    let spec = PhantomSpec::small(128, 96, 8).without_jitter().noise_free();
    let case = generate_case(&spec, "c", "p").unwrap();
    let st = stabilize_sequence(&case.sequence, &StabilizeConfig::default()).unwrap();
    let id = WarpModel::identity(WarpKind::Affine).matrix();
    for w in std::iter::once(&st.precool).chain(&st.frames) {
        let dev = w.matrix().iter().zip(id).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-3, "{:?}", w.params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn point_round_trips_through_inverse(
        m in proptest::array::uniform6(-3.0f64..3.0),
        p in (-500.0f64..500.0, -500.0f64..500.0),
    ) {
        let det = m[0] * m[4] - m[1] * m[3];
        prop_assume!(det.abs() > 1e-3);
        let w = WarpModel::affine(m);
        let back = w.inverse().unwrap().apply(w.apply(p));
        let scale = 1.0 + p.0.abs().max(p.1.abs());
        prop_assert!((back.0 - p.0).abs() < 1e-9 * scale / det.abs().min(1.0));
        prop_assert!((back.1 - p.1).abs() < 1e-9 * scale / det.abs().min(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn alignment_ignores_affine_intensity_change(
        a in prop::sample::select(vec![0.25f64, 0.5, 0.75, 1.25, 1.5]),
        b in (-80i32..80).prop_map(|k| k as f64 / 16.0),
        d in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let spec = PhantomSpec::small(96, 72, 21);
        let reference = phantom_frame(&spec, 15.0, (0.0, 0.0));
        // on a 2^-10 grid, a·v + b is exact in f32, so both runs see the same scene
        let grid = |f: ThermalFrame| {
            let temps = f.temps().iter().map(|&v| (v * 1024.0).round() / 1024.0).collect();
            ThermalFrame::new(f.width(), f.height(), f.timestamp(), temps).unwrap()
        };
        let moving = grid(phantom_frame(&spec, 15.0, d));
        let scaled = ThermalFrame::new(
            moving.width(),
            moving.height(),
            moving.timestamp(),
            moving.temps().iter().map(|&v| (a * v as f64 + b) as f32).collect(),
        )
        .unwrap();
        prop_assert!(scaled.temps().iter().zip(moving.temps()).all(|(&s, &m)| s as f64 == a * m as f64 + b));
        // converge far below the tolerance so the comparison sees the optimum,
        // not where the default stopping rule happened to halt
        let cfg = EccConfig { epsilon: 1e-11, max_iterations: 400, ..EccConfig::default() };
        for kind in [WarpKind::Translation, WarpKind::Euclidean] {
            let w1 = ecc_align(&reference, &moving, kind, &cfg).unwrap();
            let w2 = ecc_align(&reference, &scaled, kind, &cfg).unwrap();
            for (p, q) in w1.params.iter().zip(&w2.params) {
                prop_assert!((p - q).abs() < 1e-6, "{:?} vs {:?}", w1.params, w2.params);
            }
        }
    }
}
