use std::time::Instant;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use tempfile::tempdir;

use super::*;
use crate::eval::AnnotationMap;

fn record(dir: &Path, plate: &str, well: &str, site: &str, treatment: &str) -> IndexRecord {
    IndexRecord {
        plate: plate.into(),
        well: well.into(),
        site: site.into(),
        treatment: treatment.into(),
        role: if treatment == "DMSO" { Role::Control } else { Role::Treated },
        split: Split::Train,
        channel_paths: CHANNELS
            .iter()
            .map(|c| (c.to_string(), dir.join(format!("{plate}_{well}_{site}_{c}.png"))))
            .collect(),
    }
}

fn write_index_text(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("index.csv");
    std::fs::write(&p, text).unwrap();
    p
}

fn save_u8(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

// ── index ────────────────────────────────────────────────────────────────

#[test]
fn index_round_trip() {
    let dir = tempdir().unwrap();
    let recs = vec![
        record(dir.path(), "P1", "A01", "1", "DMSO"),
        record(dir.path(), "P1", "A02", "1", "cmpd_x"),
        record(dir.path(), "P2", "A01", "2", "cmpd_y"),
    ];
    let p = dir.path().join("index.csv");
    write_index(&recs, &p).unwrap();
    assert_eq!(load_index(&p).unwrap(), recs);
}

#[test]
fn pert_name_header_is_accepted() {
    let dir = tempdir().unwrap();
    let body = "P1,A01,1,cmpd,treated,train,a.png,b.png,c.png,d.png,e.png\n";
    let a = load_index(write_index_text(
        dir.path(),
        &format!("Plate,Well,Site,Treatment,Role,Split,DNA,ER,RNA,AGP,Mito\n{body}"),
    ))
    .unwrap();
    let b = load_index(write_index_text(
        dir.path(),
        &format!("Plate,Well,Site,pert_name,Role,Split,DNA,ER,RNA,AGP,Mito\n{body}"),
    ))
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].treatment, "cmpd");
}

#[test]
fn empty_index_is_an_error() {
    let dir = tempdir().unwrap();
    assert!(load_index(write_index_text(dir.path(), "")).is_err());
    let header_only = "Plate,Well,Site,Treatment,Role,Split,DNA,ER,RNA,AGP,Mito\n";
    assert!(load_index(write_index_text(dir.path(), header_only)).is_err());
}

#[test]
fn index_errors() {
    let dir = tempdir().unwrap();
    let missing = "Plate,Well,Site,Role,Split,DNA,ER,RNA,AGP,Mito\nP1,A01,1,treated,train,a,b,c,d,e\n";
    let e = load_index(write_index_text(dir.path(), missing)).unwrap_err();
    assert!(e.to_string().contains("Treatment or pert_name"), "{e}");

    let dup = "Plate,Well,Site,Treatment,Role,Split,DNA,ER,RNA,AGP,Mito\n\
               P1,A01,1,x,treated,train,a,b,c,d,e\nP1,A01,1,y,treated,train,a,b,c,d,e\n";
    let e = load_index(write_index_text(dir.path(), dup)).unwrap_err();
    assert!(e.to_string().contains("duplicate"), "{e}");

    assert!(load_index(dir.path().join("nope.csv")).is_err());
}

#[test]
fn roles_must_match_control_label() {
    let dir = tempdir().unwrap();
    let mut recs = vec![record(dir.path(), "P1", "A01", "1", "DMSO"), record(dir.path(), "P1", "A02", "1", "x")];
    check_roles(&recs, "DMSO").unwrap();
    recs[1].role = Role::Control;
    assert!(check_roles(&recs, "DMSO").is_err());
}

// ── images ───────────────────────────────────────────────────────────────

fn write_stack(rec: &IndexRecord, w: u32, h: u32, value: impl Fn(usize, u32, u32) -> u8) {
    for (c, name) in CHANNELS.iter().enumerate() {
        save_u8(&rec.channel_paths[*name], w, h, |x, y| value(c, x, y));
    }
}

#[test]
fn black_images_load_as_zero() {
    let dir = tempdir().unwrap();
    let rec = record(dir.path(), "P", "A01", "1", "x");
    write_stack(&rec, 8, 8, |_, _, _| 0);
    let t = load_image_stack(&rec, 8).unwrap();
    assert_eq!(t.shape(), &[5, 8, 8]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn max_value_pixels_scale_to_one() {
    let dir = tempdir().unwrap();
    let rec = record(dir.path(), "P", "A01", "1", "x");
    write_stack(&rec, 4, 4, |_, _, _| 255);
    assert!(load_image_stack(&rec, 4).unwrap().data().iter().all(|&v| v == 1.0));

    let p = dir.path().join("sixteen.png");
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(3, 3, |_, _| Luma([65535])).save(&p).unwrap();
    let (_, _, px) = read_gray(&p).unwrap();
    assert!(px.iter().all(|&v| v == 1.0));
}

#[test]
fn checkerboard_halves_to_gray() {
    let dir = tempdir().unwrap();
    let rec = record(dir.path(), "P", "A01", "1", "x");
    write_stack(&rec, 16, 16, |_, x, y| if (x + y) % 2 == 0 { 255 } else { 0 });
    let t = load_image_stack(&rec, 8).unwrap();
    for v in t.data() {
        assert!((v - 0.5).abs() < 1e-6, "{v}");
    }
}

#[test]
fn bilinear_matches_hand_computation() {
    // 2×1 → 4×1: sample positions -0.25, 0.25, 0.75, 1.25 clamp to [0,1].
    let out = resize_bilinear(&[0.0, 1.0], 2, 1, 4, 1);
    assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn color_images_are_rejected() {
    let dir = tempdir().unwrap();
    let rec = record(dir.path(), "P", "A01", "1", "x");
    write_stack(&rec, 4, 4, |_, _, _| 10);
    RgbImage::from_fn(4, 4, |_, _| Rgb([1, 2, 3])).save(&rec.channel_paths["ER"]).unwrap();
    let e = load_image_stack(&rec, 4).unwrap_err();
    assert!(e.to_string().contains("grayscale"), "{e}");
}

#[test]
fn missing_channel_is_an_error() {
    let dir = tempdir().unwrap();
    let mut rec = record(dir.path(), "P", "A01", "1", "x");
    write_stack(&rec, 4, 4, |_, _, _| 10);
    rec.channel_paths.remove("Mito");
    assert!(load_image_stack(&rec, 4).is_err());
}

#[test]
fn stacks_follow_canonical_order_regardless_of_file_layout() {
    let dir = tempdir().unwrap();
    // Files named in reverse order and listed in a shuffled CSV column order.
    for (c, name) in CHANNELS.iter().enumerate() {
        save_u8(&dir.path().join(format!("z{}_{name}.png", 4 - c)), 2, 2, |_, _| (c as u8 + 1) * 40);
    }
    let text = "Mito,Site,AGP,Well,DNA,Plate,RNA,Treatment,ER,Role,Split\n\
                z0_Mito.png,1,z1_AGP.png,A01,z4_DNA.png,P,z2_RNA.png,x,z3_ER.png,treated,train\n";
    let recs = load_index(write_index_text(dir.path(), text)).unwrap();
    let t = load_image_stack(&recs[0], 2).unwrap();
    for c in 0..5 {
        let want = ((c as u8 + 1) * 40) as f32 / 255.0;
        assert!(t.data()[c * 4..(c + 1) * 4].iter().all(|&v| v == want), "channel {c}");
    }
}

// ── labels and targets ───────────────────────────────────────────────────

#[test]
fn label_encoder_is_lexicographic() {
    let enc = LabelEncoder::fit(["b", "a", "c", "a"]);
    assert_eq!(enc.encode("a").unwrap(), 0);
    assert_eq!(enc.encode("b").unwrap(), 1);
    assert_eq!(enc.encode("c").unwrap(), 2);
    for t in ["a", "b", "c"] {
        assert_eq!(enc.decode(enc.encode(t).unwrap()), Some(t));
    }
    assert!(enc.encode("d").is_err());
    assert_eq!(LabelEncoder::fit(["only"]).encode("only").unwrap(), 0);
}

#[test]
fn regression_targets_are_medians() {
    let dir = tempdir().unwrap();
    let recs = vec![
        record(dir.path(), "P", "A01", "1", "odd"),
        record(dir.path(), "P", "A02", "1", "even"),
        record(dir.path(), "P", "A03", "1", "single"),
    ];
    let mut src = BTreeMap::new();
    src.insert("odd".to_string(), vec![vec![1.0], vec![3.0], vec![100.0]]);
    src.insert("even".to_string(), vec![vec![1.0], vec![3.0]]);
    src.insert("single".to_string(), vec![vec![4.0, -2.0]]);
    let t = load_regression_targets(&src, &recs).unwrap();
    assert_eq!(t["odd"], vec![3.0]);
    assert_eq!(t["even"], vec![2.0]);
    assert_eq!(t["single"], vec![4.0, -2.0]);

    src.remove("even");
    let e = load_regression_targets(&src, &recs).unwrap_err();
    assert!(e.to_string().contains("even"), "{e}");
}

// ── synthetic ────────────────────────────────────────────────────────────

fn file_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_default_counts_and_speed() {
    let dir = tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let start = Instant::now();
    let s = gen_synthetic(&spec, dir.path()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(s.treated_images, 160);
    assert_eq!(s.images, 160 + 2 * 4 * 2);
    assert_eq!(s.images, spec.total_images());

    let recs = load_index(&s.index).unwrap();
    assert_eq!(recs.len(), s.images);
    check_roles(&recs, "DMSO").unwrap();
    let data = load_dataset(dir.path(), 32).unwrap();
    assert_eq!(data.encoder.len(), 21);
    assert!(data.training.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synthetic_is_bit_reproducible() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let spec = SyntheticSpec { n_moa_groups: 2, treatments_per_group: 2, ..Default::default() };
    gen_synthetic(&spec, a.path()).unwrap();
    gen_synthetic(&spec, b.path()).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));

    let c = tempdir().unwrap();
    gen_synthetic(&SyntheticSpec { seed: spec.seed + 1, ..spec }, c.path()).unwrap();
    assert_ne!(file_bytes(a.path())[Path::new("latents.csv")], file_bytes(c.path())[Path::new("latents.csv")]);
}

#[test]
fn noise_free_treatment_images_are_identical() {
    let dir = tempdir().unwrap();
    let spec = SyntheticSpec {
        n_moa_groups: 1,
        treatments_per_group: 1,
        noise_sigma: 0.0,
        plate_offset_sigma: 0.0,
        ..Default::default()
    };
    gen_synthetic(&spec, dir.path()).unwrap();
    let recs = load_index(dir.path().join(INDEX_FILE)).unwrap();
    let treated: Vec<_> = recs.iter().filter(|r| r.role == Role::Treated).collect();
    assert_eq!(treated.len(), 8);
    let first = load_image_stack(treated[0], 32).unwrap();
    for r in &treated[1..] {
        assert!(load_image_stack(r, 32).unwrap().bit_eq(&first));
    }
}

#[test]
fn latent_groups_are_separated() {
    let dir = tempdir().unwrap();
    let s = gen_synthetic(&SyntheticSpec::default(), dir.path()).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let ann = AnnotationMap::read_csv(&s.annotations).unwrap();
    let names: Vec<&String> = s.latent.keys().filter(|t| ann.get(t).is_some()).collect();
    let (mut min_in, mut max_cross) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let c = cos(&s.latent[*a], &s.latent[*b]);
            if ann.get(a) == ann.get(b) {
                min_in = min_in.min(c);
            } else {
                max_cross = max_cross.max(c);
            }
        }
    }
    assert!(min_in > max_cross, "in-group min {min_in} vs cross-group max {max_cross}");

    // Every treated treatment has a same-group partner; latents on disk match.
    for t in &names {
        assert!(names.iter().any(|u| u != t && ann.get(u) == ann.get(t)));
    }
    let disk = read_profile_source(&s.latents).unwrap();
    assert_eq!(disk.len(), s.latent.len());
    assert!(disk["DMSO"][0].iter().all(|&v| v == 0.0));
}

#[test]
fn synthetic_spec_validation() {
    let ok = SyntheticSpec::default();
    ok.validate().unwrap();
    assert!(SyntheticSpec { plates: 0, ..ok.clone() }.validate().is_err());
    assert!(SyntheticSpec { noise_sigma: -1.0, ..ok.clone() }.validate().is_err());
    assert!(SyntheticSpec { channels: 3, ..ok.clone() }.validate().is_err());
    assert!(serde_json::from_str::<SyntheticSpec>(r#"{"bogus": 1}"#).is_err());
    let partial: SyntheticSpec = serde_json::from_str(r#"{"plates": 3}"#).unwrap();
    assert_eq!(partial.plates, 3);
}
