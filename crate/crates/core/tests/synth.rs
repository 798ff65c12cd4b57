mod common;

use common::*;
use cprn::nn::Ctx;
use cprn::synth::{
    coord_features, flip_horizontal, generate, generate_range, resolve, save_dataset, shift_range, token_id, translate,
    GeneratorConfig, PyramidEncoder, Sample, Split, WordEmbedding, COMPLEX_TOKEN_LENGTH, SMALL_MASK_RATIO,
};
use cprn::{ParameterStore, Tensor};
use proptest::prelude::*;

fn corpus() -> Vec<Sample> {
    generate(5, 300, &GeneratorConfig::default()).unwrap()
}

fn referent_matches_mask(s: &Sample) -> bool {
    let (h, w) = (s.scene.height(), s.scene.width());
    s.scene.objects[s.referent].rasterize(h, w) == s.mask
}

#[test]
fn same_seed_writes_byte_identical_datasets() {
    let cfg = GeneratorConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_dataset(&a, &generate(17, 12, &cfg).unwrap()).unwrap();
    save_dataset(&b, &generate(17, 12, &cfg).unwrap()).unwrap();
    let mut names = Vec::new();
    for sub in ["", "images", "masks"] {
        for e in std::fs::read_dir(a.join(sub)).unwrap() {
            let e = e.unwrap();
            if e.file_type().unwrap().is_file() {
                names.push(std::path::Path::new(sub).join(e.file_name()));
            }
        }
    }
    assert_eq!(names.len(), 2 + 2 * 12);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    assert_ne!(generate(18, 12, &cfg).unwrap(), generate(17, 12, &cfg).unwrap());
}

#[test]
fn ranges_agree_with_whole_runs() {
    let cfg = GeneratorConfig::default();
    let whole = generate(3, 20, &cfg).unwrap();
    let tail = generate_range(3, 12..20, &cfg).unwrap();
    assert_eq!(&whole[12..], tail.as_slice());
}

#[test]
fn every_expression_picks_out_its_referent() {
    for s in corpus() {
        assert_eq!(resolve(&s.tokens, &s.scene.objects).unwrap(), vec![s.referent], "sample {}: {}", s.id, s.text());
        assert!(referent_matches_mask(&s));
        assert!(s.scene.disjoint());
    }
}

#[test]
fn mask_ratio_matches_pixel_count() {
    for s in corpus() {
        let px = 1.0 / (s.mask.height * s.mask.width) as f64;
        assert!((s.mask.count() as f64 * px - s.mask_ratio).abs() <= px);
    }
}

#[test]
fn split_filters_follow_the_thresholds() {
    let samples = corpus();
    let small: Vec<_> = samples.iter().filter(|s| Split::SmallScale.contains(s)).collect();
    let complex: Vec<_> = samples.iter().filter(|s| Split::ComplexLanguage.contains(s)).collect();
    assert!(!small.is_empty() && !complex.is_empty());
    for s in &samples {
        assert_eq!(Split::SmallScale.contains(s), s.mask_ratio < SMALL_MASK_RATIO);
        assert_eq!(Split::ComplexLanguage.contains(s), s.tokens.len() > COMPLEX_TOKEN_LENGTH);
        assert!(Split::All.contains(s));
    }
    assert!(complex.iter().all(|s| s.tokens.len() >= 19));
    let rest = samples.iter().filter(|s| !Split::SmallScale.contains(s)).count();
    assert_eq!(small.len() + rest, samples.len());
}

#[test]
fn flipped_samples_keep_their_referent() {
    let samples = corpus();
    let flipped_relation = samples.iter().map(flip_horizontal).filter(|f| {
        assert_eq!(resolve(&f.tokens, &f.scene.objects).unwrap(), vec![f.referent]);
        assert!(referent_matches_mask(f));
        f.tokens.iter().any(|&t| Some(t) == token_id("left") || Some(t) == token_id("right"))
    });
    assert!(flipped_relation.count() > 0);
}

#[test]
fn shifted_samples_keep_their_referent() {
    for s in corpus().iter().take(60) {
        let ((ylo, yhi), (xlo, xhi)) = shift_range(s);
        for (dy, dx) in [(ylo, xlo), (yhi, xhi), (ylo, xhi), (yhi / 2, xlo / 2)] {
            let t = translate(s, dy, dx).unwrap();
            assert_eq!(resolve(&t.tokens, &t.scene.objects).unwrap(), vec![t.referent]);
            assert!(referent_matches_mask(&t));
            assert_eq!(t.mask.count(), s.mask.count());
        }
        assert!(translate(s, yhi + 1, 0).is_err());
        assert!(translate(s, 0, xlo - 1).is_err());
    }
}

#[test]
fn pyramid_stages_of_a_64_canvas() {
    let mut store = ParameterStore::new(0);
    let enc = PyramidEncoder::register(&mut store, "enc", 4, 8).unwrap();
    let mut cx = Ctx::eval(&store);
    let p = enc.encode(&mut cx, &Tensor::full(&[64, 64, 3], 0.3)).unwrap();
    let shapes: Vec<Vec<usize>> = p.fused.iter().map(|&v| cx.tape.shape(v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![16, 16, 8], vec![8, 8, 8], vec![4, 4, 8], vec![2, 2, 8]]);
}

#[test]
fn constant_image_varies_only_through_coordinates() {
    let mut store = ParameterStore::new(1);
    let enc = PyramidEncoder::register(&mut store, "enc", 3, 6).unwrap();
    let mut cx = Ctx::eval(&store);
    let p = enc.encode(&mut cx, &Tensor::full(&[32, 32, 3], 0.8)).unwrap();
    for (i, (&raw, &fused)) in p.raw.iter().zip(&p.fused).enumerate() {
        let r = cx.tape.value(raw);
        let (h, w, c) = (r.shape()[0], r.shape()[1], r.shape()[2]);
        let first = r.data()[..c].to_vec();
        for cell in r.data().chunks(c) {
            assert!(close(cell, &first, 1e-12), "stage {i} is not spatially constant");
        }
        let mut cat = Vec::new();
        for y in 0..h {
            for x in 0..w {
                cat.extend_from_slice(&first);
                cat.extend([
                    -1.0 + 2.0 * x as f64 / w as f64,
                    -1.0 + 2.0 * y as f64 / h as f64,
                    -1.0 + 2.0 * (x + 1) as f64 / w as f64,
                    -1.0 + 2.0 * (y + 1) as f64 / h as f64,
                    -1.0 + (2 * x + 1) as f64 / w as f64,
                    -1.0 + (2 * y + 1) as f64 / h as f64,
                    1.0 / w as f64,
                    1.0 / h as f64,
                ]);
            }
        }
        let expected = param_affine(&store, &format!("enc.fuse{i}"), &cat);
        assert!(close(cx.tape.value(fused).data(), &expected, 1e-12), "stage {i}");
    }
}

#[test]
fn coordinates_match_closed_form() {
    let (h, w) = (4, 6);
    let c = coord_features(h, w);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (-1.0 + 2.0 * x as f64 / w as f64, -1.0 + 2.0 * (x + 1) as f64 / w as f64);
            let (y0, y1) = (-1.0 + 2.0 * y as f64 / h as f64, -1.0 + 2.0 * (y + 1) as f64 / h as f64);
            let expected = [x0, y0, x1, y1, (x0 + x1) / 2.0, (y0 + y1) / 2.0, 1.0 / w as f64, 1.0 / h as f64];
            let cell: Vec<f64> = (0..8).map(|k| c.at(&[y, x, k])).collect();
            assert!(close(&cell, &expected, 1e-15), "({y},{x})");
        }
    }
}

#[test]
fn repeated_ids_share_a_row_and_only_used_rows_get_gradient() {
    let mut store = ParameterStore::new(2);
    let emb = WordEmbedding::register(&mut store, "words", 10, 6, 4).unwrap();
    let mut cx = Ctx::eval(&store);
    let tokens = [3, 7, 3];
    let e = emb.embed(&mut cx, &tokens).unwrap();
    let v = cx.tape.value(e).clone();
    assert_eq!(v.data()[..4], v.data()[8..12]);
    assert!(v.data()[12..].iter().all(|&x| x == 0.0));

    let probe = cx.constant(uniform(&mut rng(3), &[6, 4], 0.5, 1.0));
    let prod = cx.tape.mul(e, probe).unwrap();
    let loss = cx.tape.sum(prod);
    cx.tape.backward(loss).unwrap();
    let grads = cx.tape.param_grads();
    let g = &grads["words.table"];
    for row in 0..10 {
        let touched = g.data()[row * 4..row * 4 + 4].iter().any(|&x| x != 0.0);
        assert_eq!(touched, tokens.contains(&row), "row {row}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic_per_index(seed in 0u64..1_000, id in 0usize..500) {
        let cfg = GeneratorConfig::default();
        let a = generate_range(seed, id..id + 1, &cfg).unwrap();
        let b = generate_range(seed, id..id + 1, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(resolve(&a[0].tokens, &a[0].scene.objects).unwrap(), vec![a[0].referent]);
    }
}
