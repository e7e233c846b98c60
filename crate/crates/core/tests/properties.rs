use std::collections::BTreeMap;

use embsig_core::corpus::count_bigrams;
use embsig_core::linalg::cosine_matrix;
use embsig_core::metrics::percentile_alignment;
use embsig_core::model::init_params;
use embsig_core::oracle::{compare_vectors, predict_lm, LmTarget};
use embsig_core::task::{eval_task, key_domain};
use embsig_core::*;
use proptest::prelude::*;

fn small_spec(kind: TaskKind, anchors: usize, keys: usize) -> TaskSpec {
    let k = keys as Token;
    TaskSpec {
        kind,
        anchors: (1..=anchors as Token).collect(),
        keys: (20..20 + k).collect(),
        // Same-domain labels must sit above 3·max A so every key is positive.
        labels: (40..40 + k).collect(),
        sample_count: 1,
        seed: 0,
    }
}

/// Joint law of (X as a set, y) by walking every (a1, a2, z) outcome.
fn enumerate(spec: &TaskSpec) -> Vec<(Vec<Token>, Token, f64)> {
    let n = spec.anchors.len() as f64;
    let mut out = Vec::new();
    for &a1 in &spec.anchors {
        for &a2 in &spec.anchors {
            let dom = key_domain(spec.kind, a1, a2, spec).unwrap();
            for &z in &dom {
                let y = eval_task(spec.kind, z, a1, a2, spec).unwrap();
                let mut set = vec![a1, a2, z];
                set.sort_unstable();
                set.dedup();
                out.push((set, y, 1.0 / (n * n * dom.len() as f64)));
            }
        }
    }
    out
}

fn kind_strategy() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Add), Just(TaskKind::AddSameDomain), Just(TaskKind::ModAdd)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_phi_y_is_the_enumerated_conditional(kind in kind_strategy(), a in 2usize..5, k in 3usize..7) {
        let spec = small_spec(kind, a, k);
        let an = AnalyticSignatures::new(&spec).unwrap();
        let joint = enumerate(&spec);
        for &x in an.vocab().raw_tokens() {
            let mut px = 0.0;
            let mut row: BTreeMap<Token, f64> = BTreeMap::new();
            for (set, y, w) in &joint {
                if set.contains(&x) {
                    px += w;
                    *row.entry(*y).or_default() += w;
                }
            }
            let Ok(phi) = an.phi_y(x) else {
                prop_assert_eq!(px, 0.0);
                continue;
            };
            prop_assert!((phi.sum() - 1.0).abs() < 1e-12);
            for (y, w) in row {
                prop_assert!((phi.get(y) - w / px).abs() < 1e-12, "{kind} x={x} y={y}");
            }
            prop_assert!(phi.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bayes_consistency(kind in kind_strategy(), a in 2usize..5, k in 3usize..7) {
        let spec = small_spec(kind, a, k);
        let an = AnalyticSignatures::new(&spec).unwrap();
        for nu in an.labels() {
            let post = an.varphi_x(nu).unwrap();
            for &x in an.vocab().raw_tokens() {
                let Ok(phi) = an.phi_y(x) else { continue };
                let lhs = post.get(x) * an.p_label(nu);
                let rhs = phi.get(nu) * an.p_in(x);
                prop_assert!((lhs - rhs).abs() < 1e-10, "{kind} x={x} ν={nu}");
            }
        }
    }

    #[test]
    fn cosine_report_is_scale_free(
        v in proptest::collection::vec(-5.0f64..5.0, 4..20),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + (i as f64).sin()).collect();
        let base = compare_vectors(&v, &w).unwrap().cosine;
        let vs: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
        prop_assert!((compare_vectors(&vs, &ws).unwrap().cosine - base).abs() < 1e-12);
    }

    #[test]
    fn untied_parts_sum_to_tied_on_a_closed_walk(
        walk in proptest::collection::vec(0u32..5, 20..200),
        seed in 0u64..100,
    ) {
        let mut seq = walk.clone();
        seq.push(walk[0]);
        let stream = TokenStream::new(vec![seq], 5).unwrap();
        let counts = count_bigrams(&stream);
        let mut p = init_params(6, 5, InitScale::Exponent(0.5), Activation::Identity, seed).unwrap();
        p.w_u = p.w_e.transpose();
        for s in 0..5 {
            if counts.outgoing(s) == 0 {
                continue;
            }
            let e = predict_lm(&p, &counts, s, LmTarget::Embedding, false).unwrap().predicted;
            let u = predict_lm(&p, &counts, s, LmTarget::Unembedding, false).unwrap().predicted;
            let t = predict_lm(&p, &counts, s, LmTarget::Tied, false).unwrap().predicted;
            for i in 0..6 {
                prop_assert!((e[i] + u[i] - t[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_alignment_recovers_decile_midpoints(seed in 0u64..200) {
        let p = init_params(12, 30, InitScale::Exponent(0.0), Activation::Identity, seed).unwrap();
        let sim = cosine_matrix(&p.w_e).unwrap();
        let means = percentile_alignment(&sim, &sim).unwrap().means();
        for (k, m) in means.iter().enumerate() {
            prop_assert!((m - (k as f64 + 0.5) / 10.0).abs() < 0.06, "decile {k}: {m}");
        }
    }
}
