//! End-to-end determinism, persistence and split hygiene.

use std::fs;
use std::path::Path;

use dualdomain::kspace::make_gaussian_mask;
use dualdomain::metrics::{evaluate, Method, SsimOptions};
use dualdomain::nets::UNetConfig;
use dualdomain::synthdata::{build_dataset, load_mask, save_mask, Dataset, PhantomSpec};
use dualdomain::training::{load_checkpoint, save_checkpoint, train_hybrid, TrainConfig, TrainedModel};

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

/// Builds data, a mask, a checkpoint and a report under `dir`; returns the
/// report CSV.
fn run(dir: &Path) -> String {
    build_dataset(4, 3, 16, 16, &PhantomSpec::default(), (2, 1, 1), dir).unwrap();
    let mask = make_gaussian_mask(16, 16, 4.0, 0.08, 0).unwrap();
    save_mask(&mask, &dir.join("mask.cks")).unwrap();
    let ds = Dataset::open(dir).unwrap();
    let (ck, _) = train_hybrid(&ds, &UNetConfig::frequency(1, 2), &UNetConfig::image(1, 2, false), &config()).unwrap();
    save_checkpoint(&dir.join("hybrid.cks"), &ck).unwrap();
    let TrainedModel::Hybrid(model) = load_checkpoint(&dir.join("hybrid.cks")).unwrap().model else {
        panic!("expected hybrid")
    };
    let test = ds.load_all(&ds.split().test).unwrap();
    let methods = [
        Method::zero_filled(),
        Method::new("hybrid", |k| Ok(model.forward(k)?.image)),
    ];
    let report = evaluate(&methods, &test, &load_mask(&dir.join("mask.cks")).unwrap(), &SsimOptions::default()).unwrap();
    report.to_csv()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra, rb);
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn training_reads_no_test_subject() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(5, 2, 16, 16, &PhantomSpec::default(), (3, 1, 1), dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    train_hybrid(&ds, &UNetConfig::frequency(1, 2), &UNetConfig::image(1, 2, false), &config()).unwrap();
    let accessed = ds.accessed();
    for id in &ds.split().test {
        assert!(!accessed.contains(id));
    }
    for id in ds.split().train.iter().chain(&ds.split().validation) {
        assert!(accessed.contains(id));
    }
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(4, 2, 16, 16, &PhantomSpec::default(), (2, 1, 1), dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let train = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (ck, _) =
                train_hybrid(&ds, &UNetConfig::frequency(1, 2), &UNetConfig::image(1, 2, false), &config()).unwrap();
            let TrainedModel::Hybrid(m) = ck.model else { panic!() };
            (m.freq_net.params().to_vec(), m.image_net.params().to_vec())
        })
    };
    assert_eq!(train(1), train(3));
}
