use image::{Rgb, RgbImage};
use plasmodium_core::preprocess::{apply_augment, standardize, AugmentParams};
use plasmodium_core::PreprocessProfile;
use plasmodium_nn::Tensor;

#[test]
fn all_white_224_normalizes_to_ones() {
    let img = RgbImage::from_pixel(224, 224, Rgb([255, 255, 255]));
    let t = standardize(&img, &PreprocessProfile::cnn_b()).unwrap();
    assert_eq!(t.shape(), [224, 224, 3]);
    assert!(t.data().iter().all(|&v| v == 1.0));
}

#[test]
fn non_square_input_reaches_target_shape() {
    let img = RgbImage::from_pixel(80, 100, Rgb([10, 20, 30]));
    let t = standardize(&img, &PreprocessProfile::small()).unwrap();
    assert_eq!(t.shape(), [128, 128, 3]);
}

#[test]
fn zero_area_image_is_rejected() {
    assert!(standardize(&RgbImage::new(0, 5), &PreprocessProfile::small()).is_err());
}

#[test]
fn rotation_by_ninety_degrees_matches_hand_rotation() {
    // counter-clockwise on screen: the right column moves to the top row
    let v: Vec<f32> = (1..=9).map(|v| v as f32 / 10.0).collect();
    let img = Tensor::from_vec(&[3, 3, 1], v).unwrap();
    let p = AugmentParams {
        angle: 90.0,
        ..Default::default()
    };
    let out = apply_augment(&img, &p).unwrap();
    let want = [3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0].map(|v: f32| v / 10.0);
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{:?}", out.data());
    }
}
