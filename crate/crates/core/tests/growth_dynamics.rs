//! Growth-policy dynamics on stubbed evaluators.

use growstereo_core::growth::{
    growth_score, run_growth_dynamics, GrowthCandidate, GrowthConfig, ScoreForm,
};
use growstereo_core::seeds::rng_for;

const CELL_PARAMS: u64 = 4000;

fn layer(n_old: usize) -> Vec<GrowthCandidate> {
    let mut cands: Vec<GrowthCandidate> = (0..n_old)
        .map(|i| GrowthCandidate { cell: i as u32, owner_task: i + 1, params: CELL_PARAMS })
        .collect();
    cands.push(GrowthCandidate { cell: 99, owner_task: n_old + 1, params: CELL_PARAMS });
    cands
}

/// With identical error for every path, the adaptive score is strictly
/// increasing in reused parameters and the initialization favors old cells;
/// growth must reuse an old cell in every layer. The 2-layer 2-candidate case
/// is also checked by brute-force enumeration of the score ordering.
#[test]
fn equal_error_growth_reuses_old_cells() {
    let phi_total = 12.0 * CELL_PARAMS as f64;
    let phi = phi_total / 2.0;

    // brute force over the four 2-layer paths: score ordering equals the
    // ordering by reused parameter mass, with the all-old path maximal
    let sigma = 0.3;
    let mut scores = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            let reused = [a, b].iter().filter(|&&k| k == 0).count() as f64 * CELL_PARAMS as f64;
            scores.push(((a, b), growth_score(sigma, reused, phi).unwrap()));
        }
    }
    let best = scores.iter().max_by(|x, y| x.1.partial_cmp(&y.1).unwrap()).unwrap();
    assert_eq!(best.0, (0, 0), "all-old path must have the maximal score");
    for (path, s) in &scores {
        let reused = [path.0, path.1].iter().filter(|&&k| k == 0).count();
        if reused < 2 {
            assert!(*s < best.1);
        }
    }

    // the full dynamics at gamma = 2, c0 = 10, Eq.-8 scorer
    let cands = vec![layer(1), layer(1)];
    let cfg = GrowthConfig { trials: 80, score: ScoreForm::Adaptive, ..GrowthConfig::default() };
    for seed in 0..10 {
        let mut rng = rng_for(seed, "equal-sigma");
        let run =
            run_growth_dynamics(&cands, 2, &cfg, phi, phi_total, |_, _| Ok(sigma), &mut rng)
                .unwrap();
        assert!(
            run.chosen.iter().all(|&k| k == 0),
            "seed {seed} chose {:?}",
            run.chosen
        );
    }
}

/// A scripted 4-trial growth trace at t = 2 with one layer: recorded scores
/// follow the adaptive form and the probabilities match an independent
/// hand-computed trace (no indicator fires on this script, so the updates
/// are pure softmax renormalization from the gamma-weighted start).
#[test]
fn scripted_growth_trace_matches_hand_computation() {
    let cands = vec![vec![
        GrowthCandidate { cell: 0, owner_task: 1, params: 4000 },
        GrowthCandidate { cell: 1, owner_task: 2, params: 4000 },
    ]];
    let cfg = GrowthConfig { trials: 4, score: ScoreForm::Adaptive, ..GrowthConfig::default() };
    let script_sel = [0usize, 1, 1, 0];
    let script_sigma = [0.3, 0.2, 0.5, 0.4];
    let expected_delta = [
        1.28971711874519751e-01,
        0.0,
        0.0,
        1.19404603155504649e-01,
    ];
    let expected_p = [
        [5.82570206462314721e-01, 4.17429793537685334e-01],
        [5.41191533338416852e-01, 4.58808466661583148e-01],
        [5.20584125999313696e-01, 4.79415874000686304e-01],
        [5.10290609642192416e-01, 4.89709390357807639e-01],
    ];

    // scripted sigmas regardless of the sampled path; the recorded trace is
    // then replayed against an independent oracle
    let mut rng = rng_for(0, "scripted-growth");
    let run = run_growth_dynamics(&cands, 2, &cfg, 24_000.0, 48_000.0, |t, _| Ok(script_sigma[t]), &mut rng)
        .unwrap();
    assert_eq!(run.trace.len(), 4);
    // the sampled selections are rng-driven; the oracle replays the actual
    // selections with the scripted sigmas through an independent trace
    let mut p: [f64; 2] = [2.0 / 3.0, 1.0 / 3.0];
    let mut c = [10u64, 0];
    let mut d: [f64; 2] = [0.0, 0.0];
    for (t, rec) in run.trace.iter().enumerate() {
        let m = rec.selection[0];
        let phi_m: f64 = if m == 0 { 4000.0 } else { 0.0 };
        let delta = (1.0f64 - script_sigma[t]).sqrt() * (phi_m / 24_000.0 + 1.0).ln();
        d[m] = delta;
        c[m] += 1;
        let mut step = 0.0;
        if c[m] < c[1 - m] && d[m] > d[1 - m] {
            step += 0.01;
        }
        if c[m] > c[1 - m] && d[m] < d[1 - m] {
            step -= 0.01;
        }
        p[m] += step;
        let mx = p[0].max(p[1]);
        let e0 = (p[0] - mx).exp();
        let e1 = (p[1] - mx).exp();
        p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        assert!((rec.probs[0][0] - p[0]).abs() < 1e-12, "trial {t}");
        assert!((rec.probs[0][1] - p[1]).abs() < 1e-12, "trial {t}");
        assert!((rec.delta - delta).abs() < 1e-15);
    }

    // when the rng happens to follow the reference script, the frozen trace
    // values apply verbatim; verify them through the oracle recomputation
    let mut p: [f64; 2] = [2.0 / 3.0, 1.0 / 3.0];
    let mut c = [10u64, 0];
    let mut d: [f64; 2] = [0.0, 0.0];
    for t in 0..4 {
        let m = script_sel[t];
        let phi_m: f64 = if m == 0 { 4000.0 } else { 0.0 };
        let delta = (1.0f64 - script_sigma[t]).sqrt() * (phi_m / 24_000.0 + 1.0).ln();
        assert!((delta - expected_delta[t]).abs() < 1e-15);
        d[m] = delta;
        c[m] += 1;
        let mut step = 0.0;
        if c[m] < c[1 - m] && d[m] > d[1 - m] {
            step += 0.01;
        }
        if c[m] > c[1 - m] && d[m] < d[1 - m] {
            step -= 0.01;
        }
        p[m] += step;
        let mx = p[0].max(p[1]);
        let e0 = (p[0] - mx).exp();
        let e1 = (p[1] - mx).exp();
        p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        assert!((p[0] - expected_p[t][0]).abs() < 1e-12, "script trial {t}");
        assert!((p[1] - expected_p[t][1]).abs() < 1e-12, "script trial {t}");
    }
}

/// When reusing any old cell is catastrophic (error 0.9) while the all-new
/// path excels (error 0.05), growth must adopt the new cell everywhere.
/// The error-rate score form carries that signal directly.
#[test]
fn strong_new_cells_win_everywhere() {
    let layers = 3;
    let phi_total = 12.0 * CELL_PARAMS as f64;
    let phi = phi_total / 2.0;
    let cands: Vec<_> = (0..layers).map(|_| layer(1)).collect();
    let cfg = GrowthConfig { trials: 80, score: ScoreForm::ErrorRate, ..GrowthConfig::default() };

    let mut wins = 0;
    for seed in 0..10 {
        let mut rng = rng_for(seed, "strong-new");
        let run = run_growth_dynamics(
            &cands,
            2,
            &cfg,
            phi,
            phi_total,
            |_, sel| Ok(if sel.iter().all(|&k| k == 1) { 0.05 } else { 0.9 }),
            &mut rng,
        )
        .unwrap();
        if run.chosen.iter().all(|&k| k == 1) {
            wins += 1;
        }
    }
    assert!(wins >= 9, "all-new selected in only {wins}/10 seeds");
}
