use rbft_wasm_demo::{metrics, scene_view, schedule_curve};

#[test]
fn masks_cover_equal_area_within_one_patch() {
    let object = scene_view(3, 0, 0, "object", 16).unwrap();
    let random = scene_view(3, 0, 0, "random", 16).unwrap();
    let original = scene_view(3, 0, 0, "original", 16).unwrap();
    assert_eq!(original.masked_pixels, 0);
    assert!(object.masked_pixels > 0);
    assert!(object.masked_pixels.abs_diff(random.masked_pixels) <= 256);
    assert_eq!(original.rgba.len(), (original.width * original.height * 4) as usize);
    assert_ne!(original.rgba, object.rgba);
    assert!(!original.caption.is_empty());
}

#[test]
fn bad_requests_are_errors() {
    assert!(scene_view(0, 0, 0, "blur", 16).is_err());
    assert!(scene_view(0, 0, 99, "original", 16).is_err());
    assert!(metrics(&[1, 2, 3], 2).is_err());
}

#[test]
fn schedule_endpoints() {
    let c = schedule_curve(1e-5, 0.03, 1000, 0.0);
    assert_eq!(c.len(), 1001);
    assert_eq!(c[0], 0.0);
    assert!((c[30] - 1e-5).abs() < 1e-18);
    assert!(c[1000].abs() < 1e-18);
}

#[test]
fn metrics_from_counts() {
    // 8 true normal (6 right), 4 true abnormal (3 right).
    let (acc, f1) = metrics(&[6, 2, 1, 3], 2).unwrap();
    assert!((acc - 0.75).abs() < 1e-12);
    assert!((f1[0] - 12.0 / 15.0).abs() < 1e-12);
    assert!((f1[1] - 6.0 / 9.0).abs() < 1e-12);
}
