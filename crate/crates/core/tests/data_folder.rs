use std::path::Path;

use vtp_core::data::{load_folder, DatasetManifest, CAPTIONS_FILE};
use vtp_core::Error;

fn write_png(dir: &Path, name: &str, w: u32, h: u32, shade: u8) {
    let img = image::RgbImage::from_fn(w, h, |x, _| image::Rgb([shade, (x * 7) as u8, 255 - shade]));
    img.save(dir.join(name)).unwrap();
}

fn folder_of_ten(dir: &Path) {
    let mut rows = String::new();
    // Written in reverse so directory order and row order both disagree with name order.
    for i in (0..10).rev() {
        let name = format!("img_{i:02}.png");
        write_png(dir, &name, 20 + i, 16 + 2 * i, (i * 20) as u8);
        rows.push_str(&format!("{name}\ta picture number {i}\t{}\n", i % 3));
    }
    std::fs::write(dir.join(CAPTIONS_FILE), rows).unwrap();
}

#[test]
fn ten_files_load_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    folder_of_ten(dir.path());
    let samples = load_folder(dir.path(), 16).unwrap();
    assert_eq!(samples.len(), 10);
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.caption, format!("a picture number {i}"));
        assert_eq!(s.class_id, i % 3);
        assert_eq!((s.image.h, s.image.w), (16, 16));
        let red = s.image.at(0, 8, 8);
        assert!((red - (i as f32 * 40.0 / 255.0 - 1.0)).abs() < 1e-2, "sample {i}: {red}");
    }

    let manifest = DatasetManifest::Folder {
        path: dir.path().to_path_buf(),
        image_size: 16,
        num_classes: 0,
    };
    let ds = manifest.open().unwrap();
    assert_eq!((ds.len(), ds.num_classes(), ds.image_size()), (10, 3, 16));
}

#[test]
fn malformed_row_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    folder_of_ten(dir.path());
    let path = dir.path().join(CAPTIONS_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("img_03.png\n");
    std::fs::write(&path, text).unwrap();
    let err = load_folder(dir.path(), 16).unwrap_err();
    assert!(matches!(err, Error::Dataset(ref m) if m.contains(":11:")), "{err}");
}

#[test]
fn image_without_caption_is_named() {
    let dir = tempfile::tempdir().unwrap();
    folder_of_ten(dir.path());
    write_png(dir.path(), "stray.png", 16, 16, 0);
    let err = load_folder(dir.path(), 16).unwrap_err();
    assert!(matches!(err, Error::Dataset(ref m) if m.contains("stray.png")), "{err}");
}

#[test]
fn empty_directory_yields_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_folder(dir.path(), 16).unwrap().is_empty());
}
