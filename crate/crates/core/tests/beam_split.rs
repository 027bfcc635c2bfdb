mod common;

use common::fig4;

#[test]
fn peaks_follow_visibility_and_full_path_support_moves() {
    for seed in [1, 2, 3] {
        let traces = fig4(seed);
        for m in 0..2 {
            assert!(traces[0].peak[m] < traces[1].peak[m] && traces[1].peak[m] < traces[2].peak[m], "seed {seed}");
        }
        assert_ne!(traces[2].argmax[0], traces[2].argmax[1], "seed {seed}");
    }
}

#[test]
fn spectra_are_reproducible() {
    assert_eq!(fig4(7), fig4(7));
}
