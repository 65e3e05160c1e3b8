use std::collections::BTreeMap;

use fusenet::cohort::{read_cohort, read_subject, write_cohort, write_subject};
use fusenet::mmimg::{read_image, read_mask, write_image};
use fusenet::model::{decode, encode, load_model, save_model};
use fusenet::pgm::{encode_labelmap, header, read_labelmap, write_labelmap};
use fusenet::Error;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use fusenet_core::data::{Grid, SubjectVolume};
use fusenet_core::eval::{predict_heatmap, Labelmap};
use fusenet_core::fusion::{BaseConfig, FusionScheme, TrainedNetwork};
use fusenet_core::phantom::{generate_cohort, PhantomConfig};

fn small_cfg() -> BaseConfig {
    BaseConfig {
        conv1_filters: 3,
        conv2_filters: 4,
        dense_width: 6,
        ..BaseConfig::default()
    }
}

fn labelmap(h: usize, w: usize, f: impl FnMut(usize, usize) -> u8) -> Labelmap {
    Labelmap {
        subject_id: "s".into(),
        values: Grid::from_fn(h, w, f),
    }
}

#[test]
fn image_files_round_trip_and_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.mmimg");
    let g = Grid::from_fn(135, 145, |r, c| (r * 145 + c) as f64 * 0.001 - 3.0);
    write_image(&p, &g).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"MMIMG 1 145 135\n"));
    assert_eq!(bytes.len(), "MMIMG 1 145 135\n".len() + 8 * 145 * 135);
    assert_eq!(read_image(&p).unwrap(), g);

    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    let e = read_image(&p).unwrap_err();
    assert!(matches!(e, Error::Parse { offset, .. } if offset == bytes.len() - 3), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert!(read_mask(&dir.path().join("missing.mmimg")).unwrap_err().exit_code() == 2);
}

#[test]
fn labelmap_pgm_matches_reference_reader() {
    let dir = tempfile::tempdir().unwrap();
    let map = labelmap(13, 17, |r, c| u8::from((r * 3 + c * 7) % 5 == 0));
    let p = dir.path().join("m.pgm");
    write_labelmap(&p, &map).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, header(17, 13).len() + 13 * 17);
    let img = image::open(&p).unwrap().into_luma8();
    assert_eq!(img.dimensions(), (17, 13));
    for r in 0..13 {
        for c in 0..17 {
            let want = if map.values.get(r, c) == 1 { 255 } else { 0 };
            assert_eq!(img.get_pixel(c as u32, r as u32).0[0], want);
        }
    }
    assert_eq!(read_labelmap(&p, "s").unwrap(), map);
}

#[test]
fn all_negative_labelmap_is_all_zero() {
    let map = labelmap(4, 5, |_, _| 0);
    let bytes = encode_labelmap(&map);
    assert!(bytes[header(5, 4).len()..].iter().all(|&b| b == 0));
}

#[test]
fn reference_written_graymap_is_readable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ref.pgm");
    let img = image::GrayImage::from_fn(6, 4, |x, y| image::Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
    let mut bytes = Vec::new();
    let enc = PnmEncoder::new(&mut bytes).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    img.write_with_encoder(enc).unwrap();
    std::fs::write(&p, bytes).unwrap();
    let map = read_labelmap(&p, "r").unwrap();
    assert_eq!(map.values.dims(), (4, 6));
    assert_eq!(map.values.get(0, 0), 1);
    assert_eq!(map.values.get(0, 1), 0);
}

#[test]
fn cohort_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        subjects: 3,
        ..PhantomConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    write_cohort(dir.path(), &cohort).unwrap();
    assert_eq!(read_cohort(dir.path()).unwrap(), cohort);
}

#[test]
fn manifest_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut mods = BTreeMap::new();
    mods.insert("CT".to_string(), Grid::filled(4, 4, 0.5));
    let v = SubjectVolume::new("X1", mods, Grid::filled(4, 4, 0u8)).unwrap();
    let sub = dir.path().join("X1");
    write_subject(&sub, &v).unwrap();
    assert_eq!(read_subject(&sub).unwrap(), v);

    write_image(&sub.join("CT.mmimg"), &Grid::filled(4, 5, 0.0)).unwrap();
    let e = read_subject(&sub).unwrap_err();
    assert!(e.to_string().contains("modality.CT"), "{e}");

    std::fs::write(sub.join("subject.txt"), "id = X1\nmodality.CT = CT.mmimg\n").unwrap();
    let e = read_subject(&sub).unwrap_err();
    assert!(e.to_string().contains("missing `mask`"), "{e}");
    assert_eq!(e.exit_code(), 2);

    let empty = tempfile::tempdir().unwrap();
    assert!(read_cohort(empty.path()).is_err());
}

fn nets() -> Vec<TrainedNetwork> {
    ["type1:PET,CT,T2", "type2:T2,PET", "type3:CT,PET,T2", "single:T2"]
        .iter()
        .map(|s| TrainedNetwork::initialize(&s.parse::<FusionScheme>().unwrap(), &small_cfg(), 28).unwrap())
        .collect()
}

#[test]
fn model_round_trip_predicts_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        subjects: 1,
        height: 60,
        width: 60,
        semi_axes: (6.0, 9.0),
        ..PhantomConfig::default()
    };
    let v = &generate_cohort(&cfg).unwrap()[0];
    for net in nets() {
        let p = dir.path().join("m.model");
        save_model(&p, &net).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.scheme, net.scheme);
        assert_eq!(back.config, net.config);
        for (a, b) in back.members.iter().zip(&net.members) {
            assert!(a.params.bitwise_eq(&b.params));
        }
        for (a, b) in fusenet_core::eval::member_heatmaps(&back, v)
            .unwrap()
            .iter()
            .zip(fusenet_core::eval::member_heatmaps(&net, v).unwrap())
        {
            let same = a.values.data().iter().zip(b.values.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}", net.scheme);
        }
        if net.members.len() == 1 {
            assert_eq!(predict_heatmap(&back, v).unwrap(), predict_heatmap(&net, v).unwrap());
        }
    }
}

#[test]
fn model_payload_is_eight_bytes_per_parameter() {
    for net in nets() {
        let bytes = encode(&net);
        let text_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let expected = net.scheme.param_count(&net.config).unwrap();
        assert_eq!(bytes.len() - text_end, 8 * expected, "{}", net.scheme);
    }
}

#[test]
fn tampered_models_are_rejected() {
    let net = &nets()[0];
    let bytes = encode(net);
    let text = String::from_utf8_lossy(&bytes).to_string();

    let shape = text.find("2,2,3,3").unwrap();
    let mut bad = bytes.clone();
    bad[shape + 4] = b'4';
    let (offset, msg) = decode(&bad).unwrap_err();
    assert!(msg.contains("does not match"), "{msg}");
    assert!(offset <= shape);

    let mut bad = bytes.clone();
    bad["FUSENET-MODEL ".len()] = b'7';
    assert!(decode(&bad).unwrap_err().1.contains("version"));

    let (_, msg) = decode(&bytes[..bytes.len() - 8]).unwrap_err();
    assert!(msg.contains("payload"), "{msg}");
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(decode(&long).is_err());

    let t3 = encode(&nets()[2]);
    let at = t3.windows(9).position(|w| w == b"member CT").unwrap();
    let mut bad = t3.clone();
    bad[at + 7..at + 9].copy_from_slice(b"MR");
    let (offset, msg) = decode(&bad).unwrap_err();
    assert_eq!(offset, at);
    assert!(msg.contains("MR"), "{msg}");
    assert!(decode(b"GIF89a").is_err());
}
