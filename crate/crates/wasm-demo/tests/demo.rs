use hipnet::densenet::{Network, NetworkSpec};
use hipnet::image;
use hipnet::weights;
use hipnet_wasm::{Demo, DemoError};

#[test]
fn render_masks_and_augment() {
    let mut demo = Demo::default();
    assert!(matches!(demo.try_masks(), Err(DemoError::NoImage)));
    assert!(matches!(demo.try_augment(5.0, 0.1, 0.05, 1), Err(DemoError::NoImage)));
    assert!(matches!(demo.try_render("D", 1, 96), Err(DemoError::Class(_))));
    assert!(matches!(demo.try_render("A", 1, 8), Err(DemoError::Phantom(_))));

    let png = demo.try_render("B", 7, 64).unwrap();
    let img = image::decode_gray_png(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert_eq!(png, Demo::default().try_render("B", 7, 64).unwrap());

    let mask = image::decode_mask_png(&demo.try_masks().unwrap()).unwrap();
    assert!(!mask.is_empty());

    let a = demo.try_augment(10.0, 0.1, 0.05, 3).unwrap();
    assert_eq!(a, demo.try_augment(10.0, 0.1, 0.05, 3).unwrap());
    assert_ne!(a, png);
    let identity = image::decode_gray_png(&demo.try_augment(0.0, 0.0, 0.0, 3).unwrap()).unwrap();
    assert_eq!(identity, img);
    assert!(matches!(demo.try_augment(-1.0, 0.0, 0.0, 3), Err(DemoError::Data(_))));
}

#[test]
fn saliency_overlay_and_localization() {
    let mut demo = Demo::default();
    demo.try_render("C", 2, 96).unwrap();
    assert!(matches!(demo.try_saliency(None), Err(DemoError::NoNetwork)));
    demo.try_random_network(5).unwrap();
    let overlay = demo.try_saliency(Some(2)).unwrap();
    assert!(overlay.starts_with(b"\x89PNG"));
    assert_eq!(demo.class_index(), Some(2));
    let loc = demo.localization().unwrap();
    assert!((0.0..=1.0).contains(&loc));

    demo.try_augment(5.0, 0.0, 0.0, 1).unwrap();
    demo.try_saliency(None).unwrap();
    assert_eq!(demo.localization(), None);
    assert!(matches!(demo.try_saliency(Some(9)), Err(DemoError::Saliency(_))));

    demo.try_render("A", 2, 64).unwrap();
    assert!(matches!(demo.try_saliency(None), Err(DemoError::Size { expected: 96, actual: 64 })));
}

#[test]
fn uploaded_weights_set_the_class_count() {
    let mut net = Network::build(NetworkSpec { num_classes: 5, ..NetworkSpec::default() }).unwrap();
    net.init_gaussian(1).unwrap();
    let bytes = weights::encode(net.state()).unwrap();
    let mut demo = Demo::default();
    assert_eq!(demo.try_load_weights(&bytes).unwrap(), 5);
    demo.try_render("A", 0, 96).unwrap();
    demo.try_saliency(Some(4)).unwrap();
    assert!(matches!(demo.try_load_weights(b"garbage"), Err(DemoError::Weights(_))));
}
