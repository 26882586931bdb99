use fgr_web::{filter_view, rectify_2d, reliability_view, Pattern};

#[test]
fn filter_view_shapes_and_attenuation() {
    let v = filter_view(Pattern::Checkerboard, 32, 15).unwrap();
    assert_eq!(v.original.len(), 32 * 32 * 4);
    assert_eq!(v.filtered.len(), v.original.len());
    assert_eq!((v.spectrum_before.len(), v.spectrum_after.len()), (64, 64));
    assert!(v.high_after < 0.1 * v.high_before);
}

#[test]
fn rectify_2d_projects_only_conflicts() {
    let [x, y, conflicted, _] = rectify_2d([1.0, 1.0], [0.0, -1.0]).unwrap();
    assert_eq!((x, y, conflicted), (1.0, 0.0, 1.0));
    let [x, y, conflicted, _] = rectify_2d([1.0, 2.0], [1.0, 0.0]).unwrap();
    assert_eq!((x, y, conflicted), (1.0, 2.0, 0.0));
}

#[test]
fn reliability_view_layout() {
    let v = reliability_view(500, 3.0, 1.0, 1).unwrap();
    assert_eq!(v.len(), 3 + 3 * 15);
    let counts: f64 = v[3..].chunks(3).map(|b| b[2]).sum();
    assert_eq!(counts, 500.0);
    assert!((0.0..=1.0).contains(&v[0]));
}
