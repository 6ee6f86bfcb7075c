use std::fmt::Write as _;
use std::path::Path;

use cxr_core::core_ops::{Disease, NUM_CLASSES};
use cxr_core::data_pipeline::{
    benchmark_counts, load_manifest, make_val_split, preprocess, to_frame, BoxAnnotation, ManifestSources,
    PreprocessConfig, Rect, Split, SplitCounts,
};
use cxr_core::Error;
use image::{DynamicImage, GrayImage, Luma};
use proptest::prelude::*;

// Published split sizes, written out independently of the library table.
const TRAIN: [usize; 14] = [8280, 1707, 8659, 13782, 4034, 4708, 876, 2637, 2852, 1378, 1423, 1251, 2242, 141];
const TEST: [usize; 14] = [3279, 1069, 4658, 6112, 1748, 1623, 555, 2665, 1815, 925, 1093, 435, 1143, 86];
const BOXES: [usize; 8] = [180, 146, 153, 123, 85, 79, 120, 98];

#[test]
fn library_table_matches_published_counts() {
    let [train, test, boxes] = benchmark_counts();
    assert_eq!(train.per_disease, TRAIN);
    assert_eq!(test.per_disease, TEST);
    assert_eq!(&boxes.per_disease[..8], &BOXES);
    assert_eq!((train.multi_label_total, train.finding, train.no_finding, train.total), (53_970, 36_024, 50_500, 86_524));
    assert_eq!((test.multi_label_total, test.finding, test.no_finding, test.total), (27_206, 15_735, 9_861, 25_596));
    assert_eq!(boxes.total, 984);
}

/// Label rows for one split: `finding` images share the disease labels
/// round-robin (no image gets a disease twice), the rest are "No Finding".
fn split_rows(prefix: &str, per_disease: &[usize; 14], finding: usize, no_finding: usize) -> Vec<(String, String)> {
    let mut labels: Vec<Vec<&str>> = vec![Vec::new(); finding];
    let mut k = 0;
    for (d, &n) in Disease::ALL.iter().zip(per_disease) {
        for _ in 0..n {
            labels[k % finding].push(d.token());
            k += 1;
        }
    }
    let mut rows: Vec<(String, String)> =
        labels.into_iter().enumerate().map(|(i, l)| (format!("{prefix}{i:06}_000.png"), l.join("|"))).collect();
    rows.extend((0..no_finding).map(|i| (format!("{prefix}{:06}_000.png", finding + i), "No Finding".to_string())));
    rows
}

struct Written {
    sources: ManifestSources,
}

fn write_benchmark_files(dir: &Path, drop_test_hernia: bool) -> Written {
    let train = split_rows("1", &TRAIN, 36_024, 50_500);
    let mut test = split_rows("2", &TEST, 15_735, 9_861);
    if drop_test_hernia {
        let i = test.iter().position(|(_, l)| l.contains("Hernia")).unwrap();
        test[i].1 = test[i].1.split('|').filter(|t| *t != "Hernia").collect::<Vec<_>>().join("|");
        if test[i].1.is_empty() {
            test[i].1 = "No Finding".into();
        }
    }
    let mut csv = String::from("Image Index,Finding Labels,Follow-up #,Patient ID\n");
    for (id, l) in train.iter().chain(&test) {
        let _ = writeln!(csv, "{id},{l},0,{}", &id[..7]);
    }
    let list = |rows: &[(String, String)]| rows.iter().map(|(id, _)| format!("{id}\n")).collect::<String>();
    let mut boxes = String::from("Image Index,Finding Label,Bbox [x,y,w,h],,,\n");
    for (d, &n) in Disease::BOX_SET.iter().zip(&BOXES) {
        for i in 0..n {
            let _ = writeln!(boxes, "{},{},{},{},50,60", test[i].0, d.token(), 10 + i, 20 + i);
        }
    }
    std::fs::write(dir.join("labels.csv"), csv).unwrap();
    std::fs::write(dir.join("train.txt"), list(&train)).unwrap();
    std::fs::write(dir.join("test.txt"), list(&test)).unwrap();
    std::fs::write(dir.join("boxes.csv"), boxes).unwrap();
    Written {
        sources: ManifestSources {
            labels: Some(dir.join("labels.csv")),
            train_list: Some(dir.join("train.txt")),
            test_list: Some(dir.join("test.txt")),
            boxes: Some(dir.join("boxes.csv")),
            images: None,
        },
    }
}

#[test]
fn strict_loading_accepts_the_exact_split_and_reports_a_diff_otherwise() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_benchmark_files(dir.path(), false);
    let m = load_manifest(&w.sources, true).unwrap();
    assert_eq!(SplitCounts::of(m.split(Split::Train).map(|e| &e.labels)).total, 86_524);
    assert_eq!(m.boxes.len(), 984);

    let bad = tempfile::tempdir().unwrap();
    let w = write_benchmark_files(bad.path(), true);
    match load_manifest(&w.sources, true) {
        Err(Error::CountMismatch(diff)) => {
            assert!(diff.contains("test Hernia: expected 86, found 85"), "{diff}");
            assert!(diff.contains("test Multi-label Totals: expected 27206, found 27205"), "{diff}");
            assert!(!diff.contains("train"), "{diff}");
        }
        other => panic!("expected a count mismatch, got {other:?}"),
    }
    // lenient mode loads the same files
    assert!(load_manifest(&w.sources, false).is_ok());
}

/// Runs against the real label files when `CXR_LABEL_DIR` points at them.
#[test]
fn real_label_files_match_when_available() {
    let Some(dir) = std::env::var_os("CXR_LABEL_DIR") else {
        eprintln!("CXR_LABEL_DIR not set, skipping");
        return;
    };
    let dir = Path::new(&dir);
    let sources = ManifestSources {
        labels: Some(dir.join("Data_Entry_2017.csv")),
        train_list: Some(dir.join("train_val_list.txt")),
        test_list: Some(dir.join("test_list.txt")),
        boxes: Some(dir.join("BBox_List_2017.csv")),
        images: None,
    };
    load_manifest(&sources, true).unwrap();
}

#[test]
fn validation_split_is_stratified_and_patient_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let w = write_benchmark_files(dir.path(), false);
    let m = load_manifest(&w.sources, true).unwrap();
    let (train, val) = make_val_split(&m, 0.1, 3).unwrap();
    assert_eq!(train.len() + val.len(), 86_524);
    let vc = SplitCounts::of(val.iter().map(|e| &e.labels));
    for k in 0..NUM_CLASSES {
        assert!(vc.per_disease[k] >= (TRAIN[k] as f64 * 0.1).round() as usize);
    }
    assert!(vc.no_finding >= 5050);
    let vp: std::collections::HashSet<_> = val.iter().map(|e| &e.patient_id).collect();
    assert!(train.iter().all(|e| !vp.contains(&e.patient_id)));
    assert_eq!(make_val_split(&m, 0.1, 3).unwrap().1, val);
}

fn ramp(w: u32, h: u32) -> DynamicImage {
    DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, _| Luma([(x * 255 / (w - 1)) as u8])))
}

#[test]
fn horizontal_ramp_stays_a_ramp() {
    let cfg = PreprocessConfig::default();
    let t = preprocess(&ramp(512, 400), &cfg).unwrap();
    let (c, n) = (cfg.crop, cfg.crop * cfg.crop);
    let d = t.tensor().data();
    for ch in 0..3 {
        let raw = |y: usize, x: usize| d[ch * n + y * c + x] * cfg.std[ch] as f32 + cfg.mean[ch] as f32;
        for y in [0, c / 2, c - 1] {
            for x in 1..c {
                assert!(raw(y, x) >= raw(y, x - 1) - 1e-6);
                assert!((raw(y, x) - raw(0, x)).abs() < 1e-6, "rows differ");
            }
        }
        // the crop keeps the middle 224/256 of the ramp
        let lo = 16.0 / 256.0;
        assert!((raw(0, 0) - lo as f32).abs() < 0.01, "{}", raw(0, 0));
        assert!((raw(0, c - 1) - (1.0 - lo) as f32).abs() < 0.01, "{}", raw(0, c - 1));
    }
}

#[test]
fn bright_square_lands_where_its_box_maps() {
    let cfg = PreprocessConfig::default();
    let (w, h) = (400u32, 300u32);
    let rect = Rect::new(150.0, 90.0, 60.0, 40.0);
    let img = GrayImage::from_fn(w, h, |x, y| {
        let inside = (x as f64) >= rect.x && (x as f64) < rect.right() && (y as f64) >= rect.y && (y as f64) < rect.bottom();
        Luma([if inside { 255 } else { 0 }])
    });
    let t = preprocess(&DynamicImage::ImageLuma8(img), &cfg).unwrap();
    let ann = BoxAnnotation { image_id: "a".into(), disease: Disease::Mass, rect };
    let fb = to_frame(&ann, w, h, &cfg);
    assert!(!fb.clipped);
    let c = cfg.crop;
    let on = |y: usize, x: usize| t.tensor().data()[y * c + x] * cfg.std[0] as f32 + cfg.mean[0] as f32 >= 0.5;
    let pix: Vec<(usize, usize)> = (0..c * c).map(|i| (i % c, i / c)).filter(|&(x, y)| on(y, x)).collect();
    let x0 = pix.iter().map(|p| p.0).min().unwrap() as f64;
    let x1 = pix.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
    let y0 = pix.iter().map(|p| p.1).min().unwrap() as f64;
    let y1 = pix.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
    for (got, want) in [(x0, fb.rect.x), (x1, fb.rect.right()), (y0, fb.rect.y), (y1, fb.rect.bottom())] {
        assert!((got - want).abs() <= 1.0, "edge {got} vs {want}");
    }
}

proptest! {
    #[test]
    fn interior_boxes_map_back_exactly(
        w in 64u32..2048, h in 64u32..2048,
        fx in 0.2f64..0.5, fy in 0.2f64..0.5, fw in 0.05f64..0.3, fh in 0.05f64..0.3,
    ) {
        let cfg = PreprocessConfig::default();
        let rect = Rect::new(fx * w as f64, fy * h as f64, fw * w as f64, fh * h as f64);
        let fb = to_frame(&BoxAnnotation { image_id: "x".into(), disease: Disease::Nodule, rect }, w, h, &cfg);
        prop_assert!(!fb.clipped);
        let off = cfg.crop_offset() as f64;
        let sx = w as f64 / cfg.resize as f64;
        let sy = h as f64 / cfg.resize as f64;
        let back = Rect::new((fb.rect.x + off) * sx, (fb.rect.y + off) * sy, fb.rect.w * sx, fb.rect.h * sy);
        for (a, b) in [(back.x, rect.x), (back.y, rect.y), (back.w, rect.w), (back.h, rect.h)] {
            prop_assert!((a - b).abs() < 1e-9 * w.max(h) as f64);
        }
    }

    #[test]
    fn mapped_boxes_never_leave_the_frame(
        x in 0.0f64..1500.0, y in 0.0f64..1500.0, bw in 1.0f64..1500.0, bh in 1.0f64..1500.0
    ) {
        let cfg = PreprocessConfig::default();
        let fb = to_frame(
            &BoxAnnotation { image_id: "x".into(), disease: Disease::Nodule, rect: Rect::new(x, y, bw, bh) },
            1024,
            1024,
            &cfg,
        );
        let c = cfg.crop as f64;
        prop_assert!(fb.rect.x >= 0.0 && fb.rect.y >= 0.0 && fb.rect.right() <= c && fb.rect.bottom() <= c);
        prop_assert!(fb.rect.w >= 0.0 && fb.rect.h >= 0.0);
    }
}
