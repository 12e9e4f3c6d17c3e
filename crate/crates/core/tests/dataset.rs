use std::fs;

use gait_core::dataset::{
    background_mask, generate, load_domain, load_folder, render, save_png, stack_pixels, DatasetSpec, Domain,
    ImageRecord, MANIFEST_FILE,
};
use gait_core::gradient_adjustment::sobel_response;
use gait_core::{Error, Tensor};

fn spec(n: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_images: n,
        seed,
        ..DatasetSpec::default()
    }
}

fn mean_abs_sobel(records: &[ImageRecord]) -> f64 {
    let batch = stack_pixels(records).unwrap();
    let r = sobel_response(&batch).unwrap();
    let total: f64 = r.horizontal.data().iter().chain(r.vertical.data()).map(|v| v.abs()).sum();
    total / (2 * batch.numel()) as f64
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec(5, 3), a.path()).unwrap();
    generate(&spec(5, 3), b.path()).unwrap();
    for sub in ["S", "T"] {
        let names: Vec<_> = fs::read_dir(a.path().join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 5);
        for name in names {
            let fa = fs::read(a.path().join(sub).join(&name)).unwrap();
            let fb = fs::read(b.path().join(sub).join(&name)).unwrap();
            assert_eq!(fa, fb, "{sub}/{name:?}");
        }
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn written_images_load_back_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(4, 9);
    generate(&sp, dir.path()).unwrap();
    let (s, _) = render(&sp).unwrap();
    let loaded = load_domain(dir.path(), Domain::S, 32).unwrap();
    assert_eq!(loaded.len(), 4);
    for (orig, back) in s.iter().zip(&loaded) {
        assert_eq!(orig.id, back.id);
        assert_eq!(back.domain, Some(Domain::S));
        assert_eq!(back.geometry, orig.geometry);
        assert!(orig.pixels.max_abs_diff(&back.pixels).unwrap() <= 1.0 / 127.5);
    }
    // loading is repeatable and ordered by filename
    let again = load_folder(&dir.path().join("S"), 32).unwrap();
    let ids: Vec<_> = again.iter().map(|r| r.id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(again.iter().map(|r| &r.pixels).collect::<Vec<_>>(), loaded.iter().map(|r| &r.pixels).collect::<Vec<_>>());
}

#[test]
fn loader_errors_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_folder(dir.path(), 32).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)) && err.to_string().contains("empty"), "{err}");

    save_png(&dir.path().join("a.png"), &Tensor::zeros(vec![1, 1, 16, 16])).unwrap();
    let err = load_folder(dir.path(), 32).unwrap_err().to_string();
    assert!(err.contains("a.png") && err.contains("16x16"), "{err}");

    fs::write(dir.path().join("b.png"), b"not a png").unwrap();
    let err = load_folder(dir.path(), 16).unwrap_err().to_string();
    assert!(err.contains("b.png") && err.contains("decode"), "{err}");
}

#[test]
fn target_domain_has_stronger_edges() {
    // measured T/S ratios 2.24-2.61 over seeds 0-4; frozen at 2.0
    for seed in 0..2 {
        let (s, t) = render(&spec(100, seed)).unwrap();
        let ratio = mean_abs_sobel(&t) / mean_abs_sobel(&s);
        assert!(ratio > 2.0, "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn target_outlines_are_edgier_than_target_background() {
    let (_, t) = render(&spec(20, 4)).unwrap();
    let batch = stack_pixels(&t).unwrap();
    let r = sobel_response(&batch).unwrap();
    let (mut on, mut off) = ((0.0, 0usize), (0.0, 0usize));
    for (k, rec) in t.iter().enumerate() {
        let mask = background_mask(rec).unwrap();
        for (p, &bg) in mask.iter().enumerate() {
            let i = k * mask.len() + p;
            let mag = r.horizontal.data()[i].abs() + r.vertical.data()[i].abs();
            let slot = if bg { &mut off } else { &mut on };
            slot.0 += mag;
            slot.1 += 1;
        }
    }
    assert!(on.0 / on.1 as f64 > 2.0 * off.0 / off.1 as f64);
}

#[test]
fn default_mask_covers_most_of_each_image() {
    // measured per-image minimum 0.447 (mean 0.72) over seeds 0-4
    let (s, _) = render(&spec(100, 0)).unwrap();
    for r in &s {
        let m = background_mask(r).unwrap();
        let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        assert!(frac > 0.4, "{}: {frac}", r.id);
    }
}

#[test]
fn mask_and_dilated_shapes_cover_the_image() {
    let (s, _) = render(&spec(10, 6)).unwrap();
    for r in &s {
        let m = background_mask(r).unwrap();
        let g = r.geometry.as_ref().unwrap();
        let n = 32;
        for (p, &bg) in m.iter().enumerate() {
            if bg {
                continue;
            }
            // a non-background pixel lies within the margin of some ellipse
            let (x, y) = ((p % n) as f64 + 0.5, (p / n) as f64 + 0.5);
            let near = g.ellipses.iter().any(|e| {
                let reach = e.a.max(e.b) + 2.0 * 1.5;
                (x - e.cx).hypot(y - e.cy) <= reach + 1.0
            });
            assert!(near, "{} pixel {p}", r.id);
        }
    }
}
