use sha2::{Digest, Sha256};
use spm_core::io::{decode_spmf, encode_pgm_mask, encode_spmf, load_mask, save_mask, save_spmf, load_spmf};
use spm_core::manifest::{parse_manifest, ManifestError};
use spm_core::sim::{generate_pairs_from_frames, synthetic_surface, DatasetConfig, SurfaceKind};
use spm_core::stats::{paired_from_effect, t_cdf};
use spm_core::{Channel, MaskImage, ScanFrame};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// digests of byte streams assembled independently with Python's struct module
const SPMF_512_SHA256: &str = "6d5f03a485de71fc72b9825906de7c99a8e98caa49903b935d42dddb5ccb8e53";
const PGM_MASK_SHA256: &str = "2cb3296d696c2a94a06a4995028953ed28fdb5fa5d7334102b0ad84c971418c0";

#[test]
fn spmf_matches_reference_digest() {
    let f = ScanFrame::from_fn(512, 512, Channel::Height, |x, y| ((x * 7 + y * 13) % 256) as f32 / 256.0)
        .unwrap()
        .with_metadata(Channel::Height, 5.0, 12.5)
        .unwrap();
    let bytes = encode_spmf(&f);
    assert_eq!(bytes.len(), 1_048_600);
    assert_eq!(hex(&Sha256::digest(&bytes)), SPMF_512_SHA256);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.spmf");
    save_spmf(&f, &p).unwrap();
    let back = load_spmf(&p).unwrap();
    assert_eq!(back, f);
    assert_eq!(decode_spmf(&bytes).unwrap(), f);
}

#[test]
fn mask_pgm_matches_reference_digest() {
    let m = MaskImage::from_fn(16, 8, |x, y| (x + y) % 3 == 0);
    assert_eq!(hex(&Sha256::digest(encode_pgm_mask(&m))), PGM_MASK_SHA256);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    save_mask(&m, &p).unwrap();
    assert_eq!(load_mask(&p).unwrap(), m);
}

#[test]
fn duplicate_manifest_ids_rejected() {
    let line = r#"{"id":"a","clean_path":"c.spmf","artefact_path":"a.spmf","mask_path":"m.pgm","channel":"height","scan_size_um":1.0,"z_scale":1.0,"split":"train","artefact_class":"gain_noise"}"#;
    let text = format!("{line}\n{line}\n");
    assert!(matches!(parse_manifest(&text), Err(ManifestError::DuplicateId { line: 2, .. })));
}

// (t, dof, F(t)) from 40-digit quadrature of the Student t density (mpmath)
const T_CDF_ORACLE: [(f64, f64, f64); 50] = [
    (1.36943, 3.0, 0.86781419625397396589),
    (4.346, 154.925, 0.99998750482724679406),
    (-4.884982, 30.0, 0.000016115636077062745064),
    (1.245056, 53.083, 0.89071018339188852602),
    (-6.464719, 30.0, 1.9167587906937876453e-7),
    (-8.009707, 81.471, 3.4729357752377197198e-12),
    (1.869716, 1000.0, 0.96909234640541417989),
    (6.374127, 188.656, 0.99999999931116089791),
    (3.745979, 120.0, 0.99986122062609686667),
    (1.465742, 206.367, 0.92787971023932830237),
    (-0.669691, 60.0, 0.25281196376471479185),
    (3.944482, 169.454, 0.99994154933575375777),
    (-0.841543, 120.0, 0.20085886143263306061),
    (-9.107819, 118.925, 1.2165777657467286152e-15),
    (-1.904604, 120.0, 0.02961267314512671388),
    (0.623653, 19.052, 0.72987443196077703233),
    (4.92774, 120.0, 0.99999865322485780116),
    (1.343277, 143.005, 0.90934493691983143423),
    (2.513834, 7.0, 0.97991447333798413161),
    (-8.699193, 45.093, 1.6640787552062758082e-11),
    (8.568499, 1000.0, 0.99999999999999998037),
    (1.719409, 162.261, 0.95627659556307655561),
    (6.254681, 1000.0, 0.99999999970527848073),
    (-0.616131, 121.406, 0.26948077786417143342),
    (2.688652, 5.0, 0.97831571428774474564),
    (-8.181649, 258.717, 6.3680517623099077028e-15),
    (3.134394, 5.0, 0.98708545911066386283),
    (-0.210867, 189.001, 0.41660911617323777375),
    (2.529021, 60.0, 0.99295759338062915734),
    (-10.412285, 17.061, 4.1170249196421709858e-9),
    (-0.90492, 2.0, 0.23051047983906118206),
    (8.607194, 165.265, 0.9999999999999971898),
    (5.152254, 10.0, 0.99978498198867663727),
    (1.775665, 207.993, 0.96137483317093461735),
    (-2.209812, 3.0, 0.057060807203478049833),
    (5.040687, 152.654, 0.99999935123292674082),
    (0.698247, 5.0, 0.74192248899259686247),
    (-1.433965, 95.808, 0.077419002822078937274),
    (0.26793, 3.0, 0.59694046507573282036),
    (-0.354636, 247.181, 0.36158233769017637835),
    (-7.009736, 7.0, 0.00010486675812078574228),
    (3.561143, 142.608, 0.99974883440851584591),
    (-0.297109, 1.0, 0.40807134250039399702),
    (-2.537498, 265.713, 0.0058684627813963632934),
    (-11.032932, 10.0, 3.2057670853543081252e-7),
    (1.081588, 271.654, 0.85980258239967517401),
    (4.579521, 5.0, 0.99702496748666816353),
    (-1.957127, 197.088, 0.025872346405540821057),
    (-0.131912, 2.0, 0.45356363484999027199),
    (-2.31907, 279.332, 0.010556406032867871618),
];

#[test]
fn t_cdf_matches_quadrature_oracle() {
    for &(t, dof, want) in &T_CDF_ORACLE {
        let got = t_cdf(t, dof);
        assert!((got - want).abs() < 1e-12, "t={t} dof={dof}: {got} vs {want}");
    }
}

#[test]
fn printed_effect_sizes_give_printed_p_values() {
    let (_, p) = paired_from_effect(0.265, 415);
    assert!(p > 1.13e-7 / 1.15 && p < 1.13e-7 * 1.15, "{p}");
    let (_, p) = paired_from_effect(-0.117, 415);
    assert!((p - 0.018).abs() <= 0.002, "{p}");
}

#[test]
fn ten_frame_dataset_has_expected_layout() {
    let frames: Vec<_> = (0..10)
        .map(|i| (format!("frame{i:03}"), synthetic_surface(32, 32, SurfaceKind::Mixed, 40 + i).unwrap()))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        seed: 5,
        bench_fraction: 0.2,
        ..Default::default()
    };
    let entries = generate_pairs_from_frames(&frames, dir.path(), &cfg).unwrap();
    let manifest = spm_core::manifest::read_manifest(dir.path().join("manifest.jsonl"), true).unwrap();
    assert_eq!(manifest.len(), entries.len());
    let n_clean = std::fs::read_dir(dir.path().join("clean")).unwrap().count();
    let n_art = std::fs::read_dir(dir.path().join("artefact")).unwrap().count();
    let n_mask = std::fs::read_dir(dir.path().join("mask")).unwrap().count();
    assert_eq!((n_clean, n_art, n_mask), (10, entries.len(), entries.len()));
    for e in &manifest {
        assert!(e.id.starts_with(&e.frame_id()));
        let m = load_mask(dir.path().join(&e.mask_path)).unwrap();
        assert!(!m.is_empty());
    }
}
