//! Runs every example at a reduced size so they stay in working order.

#[path = "../examples/guidance_algebra.rs"]
#[allow(dead_code)]
mod guidance_algebra;
#[path = "../examples/oracle_sampling.rs"]
#[allow(dead_code)]
mod oracle_sampling;
#[path = "../examples/classifier_bridge.rs"]
#[allow(dead_code)]
mod classifier_bridge;
#[path = "../examples/train_tiny.rs"]
#[allow(dead_code)]
mod train_tiny;
#[path = "../examples/sag_sampling.rs"]
#[allow(dead_code)]
mod sag_sampling;
#[path = "../examples/attention_masks.rs"]
#[allow(dead_code)]
mod attention_masks;
#[path = "../examples/frequency_analysis.rs"]
#[allow(dead_code)]
mod frequency_analysis;

#[test]
fn guidance_algebra_agrees() {
    assert!(guidance_algebra::run(50, 1) < 1e-10);
}

#[test]
fn oracle_sampling_is_close() {
    let e = oracle_sampling::run(300, 2);
    assert!(e.is_finite() && e < 0.15, "{e}");
}

#[test]
fn classifier_bridge_holds() {
    let (identity, guide) = classifier_bridge::run(10, 0);
    assert!(identity < 1e-5, "{identity}");
    assert!(guide < 1e-9, "{guide}");
}

#[test]
fn train_tiny_runs() {
    let (_, head, tail) = train_tiny::run(20, 0);
    assert!(head.is_finite() && tail.is_finite());
}

#[test]
fn sag_sampling_runs() {
    let (run, fd_guided, fd_plain) = sag_sampling::run(5, 3, 0);
    assert_eq!(run.samples.len(), 3);
    assert!(fd_guided.is_finite() && fd_plain.is_finite());
}

#[test]
fn attention_masks_cover_every_strategy() {
    let rows = attention_masks::run(None, 0);
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|(_, f)| (0.0..=1.0).contains(f)));
}

#[test]
fn frequency_fixture_separates() {
    let (planted, random, iou, base) = frequency_analysis::run(60, 0);
    assert!(planted > 50.0, "{planted}");
    assert!(random.abs() < planted);
    assert!(iou > base);
}
