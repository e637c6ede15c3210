mod common;

use common::{attention_f64, check, gradient_cases, randn, GRAD_TOL};
use e3lab::tensor::Tape;

#[test]
fn analytic_gradients_match_central_differences() {
    let cases = gradient_cases();
    assert!(cases.len() >= 20);
    let mut failures = Vec::new();
    for c in &cases {
        let r = check(c, 16);
        println!(
            "{:<28} rel err {:.2e} ({} probes, {} crossed a kink)",
            r.name, r.rel_err, r.checked, r.skipped
        );
        assert!(r.checked >= 5, "{}: too few usable probes", r.name);
        if !(r.rel_err <= GRAD_TOL) {
            failures.push(r);
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn multi_head_attention_matches_f64_brute_force() {
    for (i, &(b, l, d, heads)) in [(1, 1, 4, 1), (2, 3, 4, 2), (3, 5, 6, 3), (2, 4, 8, 4), (1, 7, 6, 1)]
        .iter()
        .enumerate()
    {
        let n = [b * l, d];
        let (q, k, v) = (
            randn(&n, 1.5, "bq", i as u64),
            randn(&n, 1.5, "bk", i as u64),
            randn(&n, 1.0, "bv", i as u64),
        );
        let tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let got = tape.value(tape.attention(qv, kv, vv, l, heads).unwrap());
        let want = attention_f64(q.data(), k.data(), v.data(), l, d, heads);
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "B={b} L={l} d={d} heads={heads}: {g} vs {w}");
        }
        if heads == 1 && b == 1 {
            let single = tape.value(tape.softmax_attention(qv, kv, vv).unwrap());
            assert_eq!(single, got);
        }
    }
}
