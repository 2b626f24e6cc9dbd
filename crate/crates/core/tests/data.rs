use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ron_core::assigner::assign;
use ron_core::data::shapes::{generate, ShapesConfig, CLASS_NAMES};
use ron_core::data::{manifest, ppm, voc, weights, Image};
use ron_core::network::{Model, ModelConfig};
use ron_core::Error;

fn classes() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn ppm_roundtrip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (w, h) in [(1, 1), (17, 5), (64, 64)] {
        let data: Vec<f32> = (0..3 * w * h).map(|_| rng.random::<u8>() as f32 / 255.0).collect();
        let img = Image::new(w, h, data).unwrap();
        let back = ppm::decode(&ppm::encode(&img), "mem").unwrap();
        assert_eq!(back, img);
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn ppm_errors_carry_locations() {
    for bad in [&b"P5\n1 1\n255\n\0\0\0"[..], b"P6\n2 2\n255\n\0\0\0", b"P6\n1 1\n65535\n\0\0\0\0\0\0", b"P6 x"] {
        match ppm::decode(bad, "bad.ppm") {
            Err(Error::Parse { source_name, location, .. }) => {
                assert_eq!(source_name, "bad.ppm");
                assert!(location.starts_with("byte"), "{location}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

#[test]
fn weights_roundtrip_over_ten_models() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10u64 {
        let cfg = ModelConfig {
            num_classes: 1 + seed as usize % 4,
            detect_layers: (seed as usize % 4..4).collect(),
            objectness: seed % 3 != 0,
            init_std: 0.01 * (seed + 1) as f64,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(cfg, seed).unwrap();
        let path = dir.path().join(format!("m{seed}.ronw"));
        weights::save(&path, &model).unwrap();
        let back: Model<f32> = weights::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let missing = weights::load::<f32>(&dir.path().join("nope.ronw")).unwrap_err();
    assert!(matches!(missing, Error::NotFound(_)));
}

const VOC: &str = r#"<annotation>
  <filename>000001.ppm</filename>
  <size><width>128</width><height>96</height><depth>3</depth></size>
  <object>
    <name>square</name>
    <difficult>0</difficult>
    <bndbox><xmin>11</xmin><ymin>21</ymin><xmax>30</xmax><ymax>40</ymax></bndbox>
  </object>
</annotation>"#;

#[test]
fn voc_minimal_file() {
    let a = voc::parse(VOC, "a.xml", &classes()).unwrap();
    assert_eq!(a.filename.as_deref(), Some("000001.ppm"));
    assert_eq!(a.size, Some((128, 96)));
    assert_eq!(a.objects.len(), 1);
    assert_eq!(a.objects[0].class, 2);
    assert_eq!(a.objects[0].bbox.corners(), [10.0, 20.0, 30.0, 40.0]);
    assert!(!a.objects[0].difficult);

    let xml = voc::to_xml("x.ppm", 128, 96, &a.objects, &classes()).unwrap();
    assert_eq!(voc::parse(&xml, "b.xml", &classes()).unwrap().objects, a.objects);
}

#[test]
fn voc_rejects_unknown_classes_and_bad_xml() {
    let e = voc::parse(&VOC.replace("square", "hexagon"), "a.xml", &classes()).unwrap_err();
    assert!(e.to_string().contains("hexagon"), "{e}");
    match voc::parse("<annotation><object>", "broken.xml", &classes()) {
        Err(Error::Parse { location, .. }) => assert!(location.contains("line"), "{location}"),
        other => panic!("{other:?}"),
    }
    // a user class list can map the name
    let custom = vec!["hexagon".to_string()];
    let a = voc::parse(&VOC.replace("square", "hexagon"), "a.xml", &custom).unwrap();
    assert_eq!(a.objects[0].class, 1);
}

#[test]
fn dataset_files_are_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let ds = generate(20, &ShapesConfig::default(), 42).unwrap();
        manifest::write_dataset(dir.path(), &ds).unwrap();
    }
    for rel in ["manifest.json", "images/000007.ppm", "annotations/000019.xml"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }
    let back = manifest::read_dataset(a.path()).unwrap();
    assert_eq!(back, generate(20, &ShapesConfig::default(), 42).unwrap());
}

#[test]
fn generator_contract() {
    let ds = generate(1000, &ShapesConfig::default(), 7).unwrap();
    let mut per_class = [0usize; 3];
    for s in &ds.samples {
        assert!((1..=4).contains(&s.objects.len()));
        for o in &s.objects {
            let [l, t, r, b] = o.bbox.corners();
            assert!(l >= 0.0 && t >= 0.0 && r <= 128.0 && b <= 128.0);
            assert!(o.bbox.area() >= 16.0);
            per_class[o.class - 1] += 1;
        }
    }
    let n: usize = per_class.iter().sum();
    let p = 1.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in per_class {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{per_class:?}");
    }
}

#[test]
fn every_scale_gets_positives_over_1000_images() {
    let ds = generate(1000, &ShapesConfig::default(), 3).unwrap();
    let anchors = ModelConfig::default().anchors::<f32>(128).unwrap();
    let mut hits = [0usize; 4];
    for s in &ds.samples {
        let a = assign(anchors.boxes(), &s.ground_truths()).unwrap();
        for (i, l) in a.labels.iter().enumerate() {
            if l.is_positive() {
                hits[anchors.meta()[i].scale] += 1;
            }
        }
    }
    assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
}
