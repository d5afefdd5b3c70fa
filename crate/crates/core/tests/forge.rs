use rand::RngCore;
use tamperlens_core::forge::{
    build_dataset, gen_base_scene, gen_copy_move, gen_sample, gen_splice, render_coc_text, rng, splitmix64, sub_seed,
    DatasetManifest, ForgeConfig, ForgeError, Label, ManipulationType, Mix,
};
use tamperlens_core::stub::{Vocabulary, FAKE, NOSEG, REAL, SEG, SPLICE};

// Reference xoshiro256++ seeded by consecutive splitmix64 outputs.
struct RefRng {
    s: [u64; 4],
}

impl RefRng {
    fn new(seed: u64) -> Self {
        let mut state = seed;
        let mut s = [0u64; 4];
        for w in &mut s {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            *w = z ^ (z >> 31);
        }
        RefRng { s }
    }

    fn next(&mut self) -> u64 {
        let s = &mut self.s;
        let out = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }
}

#[test]
fn splitmix_known_output() {
    // first output of splitmix64 started at 0
    assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    assert_eq!(sub_seed(7, 3), splitmix64(7 ^ splitmix64(3)));
}

#[test]
fn rng_matches_reference_generator() {
    for seed in [0u64, 1, 7, 0xDEAD_BEEF, u64::MAX] {
        let mut a = rng(seed);
        let mut b = RefRng::new(seed);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next());
        }
    }
}

#[test]
fn scenes_are_deterministic_per_seed() {
    let cfg = ForgeConfig::default();
    let a = gen_base_scene(&cfg, 11);
    let b = gen_base_scene(&cfg, 11);
    assert_eq!(a.image.data(), b.image.data());
    let c = gen_base_scene(&cfg, 12);
    assert_ne!(a.image.data(), c.image.data());
    for m in ManipulationType::ALL {
        let x = gen_sample(&cfg, m, 5).unwrap();
        let y = gen_sample(&cfg, m, 5).unwrap();
        assert_eq!(x, y, "{m}");
    }
}

#[test]
fn shape_count_in_configured_range() {
    let cfg = ForgeConfig::default();
    for seed in 0..50 {
        let s = gen_base_scene(&cfg, seed);
        assert!((cfg.min_shapes..=cfg.max_shapes).contains(&s.shapes.len()));
    }
}

#[test]
fn shape_noise_variance_matches_draw() {
    let cfg = ForgeConfig::default();
    let plane = cfg.image_size * cfg.image_size;
    let mut checked = 0;
    for seed in 0..40 {
        let scene = gen_base_scene(&cfg, seed);
        for (i, rec) in scene.shapes.iter().enumerate() {
            let vis: Vec<usize> = scene.visible(i).iter().enumerate().filter(|(_, &v)| v).map(|(p, _)| p).collect();
            if vis.len() < 300 {
                continue;
            }
            // shapes are flat colour, so the per-channel spread is the noise
            let mut ss = 0.0;
            let mut n = 0usize;
            for c in 0..3 {
                let vals: Vec<f64> = vis.iter().map(|&p| scene.image.data()[c * plane + p] as f64).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                ss += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                n += vals.len() - 1;
            }
            let est = ss / n as f64;
            let rel = (est - rec.noise_var).abs() / rec.noise_var;
            assert!(rel < 0.2, "seed {seed} shape {i}: estimated {est}, drawn {}", rec.noise_var);
            checked += 1;
        }
    }
    assert!(checked > 20, "only {checked} shapes large enough");
}

#[test]
fn label_iff_mask_nonempty_for_every_sample() {
    let cfg = ForgeConfig::default();
    let total = (cfg.image_size * cfg.image_size) as f64;
    for seed in 0..150 {
        for m in ManipulationType::ALL {
            let s = gen_sample(&cfg, m, seed).unwrap();
            let area = s.mask_area();
            assert_eq!(s.label == Label::Fake, area > 0, "{m} seed {seed}");
            assert_eq!(s.label, m.label());
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if s.label == Label::Fake {
                let frac = area as f64 / total;
                assert!(
                    frac >= cfg.area_frac.0 && frac <= cfg.area_frac.1,
                    "{m} seed {seed}: area fraction {frac}"
                );
            }
        }
    }
}

#[test]
fn authentic_has_empty_mask() {
    let cfg = ForgeConfig::default();
    let s = gen_sample(&cfg, ManipulationType::Authentic, 3).unwrap();
    assert_eq!(s.label, Label::Real);
    assert_eq!(s.mask_area(), 0);
}

/// Finds a translation under which every masked pixel equals its source.
fn copy_offset(s: &tamperlens_core::forge::ImageSample, size: usize) -> Option<(isize, isize)> {
    let plane = size * size;
    let img = s.image.data();
    let masked: Vec<(isize, isize)> = (0..plane)
        .filter(|&p| s.mask.data()[p] > 0.5)
        .map(|p| ((p % size) as isize, (p / size) as isize))
        .collect();
    let n = size as isize;
    for oy in -n + 1..n {
        for ox in -n + 1..n {
            if (ox, oy) == (0, 0) {
                continue;
            }
            let ok = masked.iter().all(|&(x, y)| {
                let (sx, sy) = (x - ox, y - oy);
                if sx < 0 || sy < 0 || sx >= n || sy >= n {
                    return false;
                }
                let (d, src) = ((y * n + x) as usize, (sy * n + sx) as usize);
                s.mask.data()[src] == 0.0 && (0..3).all(|c| img[c * plane + d] == img[c * plane + src])
            });
            if ok {
                return Some((ox, oy));
            }
        }
    }
    None
}

#[test]
fn copy_move_duplicates_a_disjoint_region() {
    let cfg = ForgeConfig::default();
    let size = cfg.image_size;
    for seed in 0..25 {
        let s = gen_copy_move(&cfg, seed).unwrap();
        let (ox, oy) = copy_offset(&s, size).unwrap_or_else(|| panic!("seed {seed}: no source region found"));
        // bounding boxes of source and destination do not overlap
        let pts: Vec<(isize, isize)> = (0..size * size)
            .filter(|&p| s.mask.data()[p] > 0.5)
            .map(|p| ((p % size) as isize, (p / size) as isize))
            .collect();
        let (x0, x1) = (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.0).max().unwrap());
        let (y0, y1) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
        let overlap_x = x0 - ox <= x1 && x0 <= x1 - ox;
        let overlap_y = y0 - oy <= y1 && y0 <= y1 - oy;
        assert!(!(overlap_x && overlap_y), "seed {seed}: boxes overlap");
        assert_eq!((ox + oy).rem_euclid(2), 1, "seed {seed}: offset parity");
    }
}

#[test]
fn unreachable_splice_margin_is_rejected_up_front() {
    let cfg = ForgeConfig {
        splice_var_margin: 1.0,
        ..ForgeConfig::default()
    };
    let e = gen_splice(&cfg, 0).unwrap_err();
    assert!(matches!(e, ForgeError::InvalidConfig(_)), "{e}");
    assert!(e.to_string().contains("splice_var_margin"), "{e}");
}

#[test]
fn impossible_area_is_a_placement_error() {
    let cfg = ForgeConfig {
        area_frac: (0.9, 0.95),
        ..ForgeConfig::default()
    };
    for m in [ManipulationType::Splice, ManipulationType::CopyMove, ManipulationType::Remove] {
        let e = gen_sample(&cfg, m, 1).unwrap_err();
        assert!(matches!(e, ForgeError::Placement { manip, .. } if manip == m), "{m}: {e}");
        assert!(e.to_string().contains("area"), "{e}");
    }
}

#[test]
fn answer_text_follows_template() {
    let vocab = Vocabulary::default();
    let splice = render_coc_text(ManipulationType::Splice, &vocab).unwrap();
    assert!(splice.contains(vocab.special(FAKE)));
    assert!(splice.contains(vocab.id(SPLICE).unwrap()));
    assert!(splice.contains(vocab.special(SEG)));
    let real = render_coc_text(ManipulationType::Authentic, &vocab).unwrap();
    assert!(real.contains(vocab.special(REAL)));
    assert!(real.contains(vocab.special(NOSEG)));
    assert!(!real.contains(vocab.special(SEG)));
    for m in ManipulationType::ALL {
        let seq = render_coc_text(m, &vocab).unwrap();
        assert_eq!(seq.len(), 5);
        let text = vocab.decode(&seq).unwrap();
        assert_eq!(vocab.encode(&text).unwrap(), seq);
    }
}

#[test]
fn manipulation_names_roundtrip() {
    for m in ManipulationType::ALL {
        assert_eq!(m.to_string().parse::<ManipulationType>().unwrap(), m);
    }
    assert!("inpaint".parse::<ManipulationType>().is_err());
}

#[test]
fn mix_counts_are_exact() {
    assert_eq!(Mix::default().counts(100).unwrap(), [25, 25, 25, 25]);
    let m: Mix = "0.5,0.3,0.2,0".parse().unwrap();
    assert_eq!(m.counts(10).unwrap(), [5, 3, 2, 0]);
    let m: Mix = "0.34,0.33,0.33,0".parse().unwrap();
    assert_eq!(m.counts(7).unwrap().iter().sum::<usize>(), 7);
}

#[test]
fn mix_not_summing_to_one_is_rejected() {
    let m: Result<Mix, _> = "0.3,0.3,0.2,0.1".parse();
    let e = match m {
        Ok(m) => m.validate().unwrap_err(),
        Err(e) => e,
    };
    assert!(matches!(e, ForgeError::InvalidMix(_)), "{e}");
    let dir = tempfile::tempdir().unwrap();
    let bad = Mix {
        splice: 0.3,
        copy_move: 0.3,
        remove: 0.2,
        authentic: 0.1,
    };
    assert!(build_dataset(&ForgeConfig::default(), 10, &bad, 0, dir.path()).is_err());
}

fn dir_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = root.join(sub);
        let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn dataset_build_is_byte_reproducible() {
    let cfg = ForgeConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&cfg, 24, &Mix::default(), 9, a.path()).unwrap();
    let mb = build_dataset(&cfg, 24, &Mix::default(), 9, b.path()).unwrap();
    assert_eq!(ma.records, mb.records);
    assert_eq!(ma.config_hash, mb.config_hash);
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 2 * 24 + 2);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    build_dataset(&cfg, 24, &Mix::default(), 10, c.path()).unwrap();
    assert_ne!(dir_bytes(c.path()), fa);
}

#[test]
fn dataset_has_requested_mix_and_reloads() {
    let cfg = ForgeConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let built = build_dataset(&cfg, 20, &Mix::default(), 4, dir.path()).unwrap();
    for m in ManipulationType::ALL {
        assert_eq!(built.records.iter().filter(|r| r.manip == m).count(), 5);
    }
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.records, built.records);
    for (i, rec) in loaded.records.iter().enumerate() {
        let (img, mask) = loaded.load_pair(i).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert_eq!(mask.data().iter().any(|&v| v > 0.5), rec.label == Label::Fake);
        // PNG round trip reproduces the generator output to 8 bits
        let s = gen_sample(&cfg, rec.manip, rec.seed).unwrap();
        assert_eq!(mask.data(), s.mask.data());
        for (a, b) in img.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn tampered_config_hash_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&ForgeConfig::default(), 4, &Mix::default(), 0, dir.path()).unwrap();
    let cfg_path = dir.path().join(tamperlens_core::forge::CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    std::fs::write(&cfg_path, text.replace("image_size = 64", "image_size = 32")).unwrap();
    assert!(matches!(DatasetManifest::load(dir.path()), Err(ForgeError::HashMismatch { .. })));
}

#[test]
fn missing_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&ForgeConfig::default(), 4, &Mix::default(), 0, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images/00002.png")).unwrap();
    let e = DatasetManifest::load(dir.path()).unwrap_err();
    assert!(e.to_string().contains("00002.png"), "{e}");
}
