mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sacnet::data::{generate_synthetic, load_dataset, scan_manifest, split_per_subject, Dataset, SyntheticSpec};
use sacnet::Error;

fn write_png(path: &Path, w: u32, h: u32, seed: u32) {
    let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 31 + y * 17 + seed * 7) % 256) as u8]));
    img.save(path).unwrap();
}

fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

fn tree(root: &Path) {
    for (s, subject) in ["alice", "bob"].iter().enumerate() {
        let dir = root.join(subject);
        fs::create_dir_all(&dir).unwrap();
        for k in 0..3u32 {
            write_png(&dir.join(format!("{k}.png")), 20, 12, s as u32 * 3 + k);
        }
    }
}

#[test]
fn loads_a_two_by_three_tree() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path());
    fs::write(dir.path().join("README"), "loose files are ignored").unwrap();
    let ds = load_dataset(dir.path(), 16).unwrap();
    assert_eq!((ds.len(), ds.n_subjects()), (6, 2));
    assert_eq!(ds.subjects, vec!["alice", "bob"]);
    let names: Vec<(usize, &str)> = ds.samples.iter().map(|s| (s.subject, s.name.as_str())).collect();
    assert_eq!(names, vec![(0, "0"), (0, "1"), (0, "2"), (1, "0"), (1, "1"), (1, "2")]);
    assert!(ds.samples.iter().all(|s| s.pixels.len() == 256 && s.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
    let again = load_dataset(dir.path(), 16).unwrap();
    assert_eq!(again, ds);
    assert_eq!(scan_manifest(dir.path()).unwrap().entries.len(), 2);
}

#[test]
fn non_image_file_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path());
    let bad = dir.path().join("bob").join("notes.png");
    fs::write(&bad, "not an image").unwrap();
    match load_dataset(dir.path(), 16) {
        Err(Error::UnreadableImage { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected UnreadableImage, got {other:?}"),
    }
    let msg = load_dataset(dir.path(), 16).unwrap_err().to_string();
    assert!(msg.contains("notes.png"), "{msg}");
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 8), Err(Error::EmptyDataset(_))));
}

#[test]
fn pgm_files_load_and_scale_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("only");
    fs::create_dir_all(&sub).unwrap();
    let pixels: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
    write_pgm(&sub.join("a.pgm"), 4, 4, &pixels);
    let ds = load_dataset(dir.path(), 4).unwrap();
    let want: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    assert_eq!(ds.samples[0].pixels, want);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn default_set() -> Dataset {
    generate_synthetic(&SyntheticSpec::default()).unwrap()
}

#[test]
fn synthetic_set_is_seeded() {
    let a = default_set();
    assert_eq!((a.n_subjects(), a.len(), a.hw), (10, 200, 64));
    assert_eq!(a, default_set());
    let other = generate_synthetic(&SyntheticSpec {
        seed: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_ne!(a.samples[0].pixels, other.samples[0].pixels);
    assert!(a.samples.iter().flat_map(|s| &s.pixels).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synthetic_identity_lives_in_pixel_correlation() {
    let ds = default_set();
    let by_subject: Vec<Vec<&[f64]>> = (0..10)
        .map(|s| ds.samples.iter().filter(|x| x.subject == s).map(|x| x.pixels.as_slice()).collect())
        .collect();
    let mut between = Vec::new();
    // Jitter is random, so single pairs vary; each subject's mean pair
    // correlation carries the identity signal.
    for (s, imgs) in by_subject.iter().enumerate() {
        let mut within = Vec::new();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                within.push(pearson(imgs[i], imgs[j]));
            }
        }
        let mean = within.iter().sum::<f64>() / within.len() as f64;
        assert!(mean > 0.8, "subject {s}: {mean}");
        for other in &by_subject[s + 1..] {
            between.push(pearson(imgs[0], other[0]));
        }
    }
    let mean = between.iter().sum::<f64>() / between.len() as f64;
    assert!(mean < 0.5, "{mean}");
    let stats = sacnet::data::correlation_stats(&ds);
    assert!(stats.within_min > 0.8 && (stats.between_mean - mean).abs() < 1e-9);
}

#[test]
fn dump_then_load_is_within_one_grey_level() {
    let spec = SyntheticSpec {
        n_subjects: 3,
        samples_per_subject: 4,
        image_hw: 24,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.dump(dir.path()).unwrap();
    let back = load_dataset(dir.path(), 24).unwrap();
    assert_eq!(back.subjects, ds.subjects);
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!((a.subject, &a.name), (b.subject, &b.name));
        let err = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0, "{err}");
    }
}

#[test]
fn split_is_disjoint_and_covers_every_subject_on_both_sides() {
    let ds = default_set();
    for fraction in [0.5, 0.1, 0.9] {
        let split = split_per_subject(&ds, fraction).unwrap();
        let train: BTreeSet<usize> = split.train.iter().copied().collect();
        let eval: BTreeSet<usize> = split.eval.iter().copied().collect();
        assert!(train.is_disjoint(&eval));
        assert_eq!(train.len() + eval.len(), ds.len());
        for s in 0..ds.n_subjects() {
            assert!(split.train.iter().any(|&i| ds.samples[i].subject == s));
            assert!(split.eval.iter().any(|&i| ds.samples[i].subject == s));
        }
    }
}

#[test]
fn spec_text_round_trips_and_rejects_unknown_keys() {
    let spec = SyntheticSpec {
        n_subjects: 4,
        noise_sigma: 0.05,
        ..SyntheticSpec::default()
    };
    assert_eq!(SyntheticSpec::parse(&spec.to_text()).unwrap(), spec);
    match SyntheticSpec::parse("n_subjects=3\nwobble=1\n") {
        Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "wobble"),
        other => panic!("{other:?}"),
    }
}
