use std::ffi::{c_char, CStr, CString};
use std::ptr;

use prodmatch::domain::normalize_text;
use prodmatch::encoder::{embed_corpus, write_head, ModalityMask, ProjectionHead};
use prodmatch::retrieval::jaro_winkler;
use prodmatch::synth::{generate, split_path, SynthConfig};
use prodmatch_ffi::*;

fn last_error() -> String {
    let p = pm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: CString,
    head: CString,
    lib_corpus: prodmatch::domain::Corpus,
    lib_head: ProjectionHead,
}

fn fixture() -> Fixture {
    let cfg = SynthConfig {
        n_products: 40,
        ..SynthConfig::default()
    };
    let splits = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    splits.write(dir.path(), &cfg).unwrap();
    let head = ProjectionHead::with_widths(
        cfg.d_img,
        cfg.d_txt,
        ModalityMask::ALL,
        &[16],
        prodmatch::encoder::FeatureStats::fit(&splits.all).unwrap(),
        3,
    )
    .unwrap();
    let head_path = dir.path().join("head.bin");
    write_head(&head_path, &head).unwrap();
    let corpus_path = split_path(dir.path(), "test_index");
    Fixture {
        corpus: CString::new(corpus_path.to_str().unwrap()).unwrap(),
        head: CString::new(head_path.to_str().unwrap()).unwrap(),
        lib_corpus: splits.test_index.clone(),
        lib_head: head,
        _dir: dir,
    }
}

#[test]
fn embed_and_query_match_library() {
    let f = fixture();
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(pm_corpus_load(f.corpus.as_ptr(), &mut corpus), PmStatus::Ok);
        assert_eq!(pm_corpus_len(corpus), f.lib_corpus.len());
        let mut head = ptr::null_mut();
        assert_eq!(pm_head_load(f.head.as_ptr(), &mut head), PmStatus::Ok);
        let d = pm_head_output_dim(head);
        assert_eq!(d, 16);

        let lib = embed_corpus(&f.lib_corpus, &f.lib_head).unwrap();
        let mut v = vec![0.0; d];
        for i in 0..f.lib_corpus.len() {
            assert_eq!(pm_embed_offer(head, corpus, i, v.as_mut_ptr(), d), PmStatus::Ok);
            assert_eq!(v.as_slice(), lib.row(i).as_slice().unwrap());
        }
        assert_eq!(
            pm_embed_offer(head, corpus, 0, v.as_mut_ptr(), d - 1),
            PmStatus::BufferTooSmall
        );
        assert_eq!(
            pm_embed_offer(head, corpus, 10_000, v.as_mut_ptr(), d),
            PmStatus::NotFound
        );

        let mut index = ptr::null_mut();
        assert_eq!(pm_index_build(head, corpus, &mut index), PmStatus::Ok);
        assert_eq!(pm_index_len(index), f.lib_corpus.len());
        let mut out = [PmCandidate { position: 0, distance: 0.0, accepted: 0 }; 3];
        let mut written = 0;
        for (i, o) in f.lib_corpus.offers().iter().enumerate() {
            pm_embed_offer(head, corpus, i, v.as_mut_ptr(), d);
            let brand = CString::new(o.brand_raw.as_str()).unwrap();
            let st = pm_index_query(index, brand.as_ptr(), v.as_ptr(), d, 3, 0.85, 0.2, out.as_mut_ptr(), 3, &mut written);
            assert_eq!(st, PmStatus::Ok);
            assert!(written >= 1);
            assert!(out[0].distance < 1e-12, "{}", out[0].distance);
            assert_eq!(out[0].accepted, 1);
            let id = CStr::from_ptr(pm_index_offer_id(index, out[0].position)).to_str().unwrap();
            assert_eq!(id, o.offer_id);
        }
        assert!(pm_index_offer_id(index, 1 << 30).is_null());
        let st = pm_index_query(index, c"x".as_ptr(), v.as_ptr(), d - 1, 3, 0.85, 0.2, out.as_mut_ptr(), 3, &mut written);
        assert_eq!(st, PmStatus::Dimension);
        let st = pm_index_query(index, c"x".as_ptr(), v.as_ptr(), d, 3, 0.0, 2.0, out.as_mut_ptr(), 2, &mut written);
        assert_eq!(st, PmStatus::BufferTooSmall);

        pm_index_free(index);
        pm_head_free(head);
        pm_corpus_free(corpus);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(pm_corpus_load(ptr::null(), &mut corpus), PmStatus::NullArgument);
        assert!(corpus.is_null());
        assert!(last_error().contains("path"));
        assert_eq!(pm_corpus_load(c"/nonexistent/x.jsonl".as_ptr(), &mut corpus), PmStatus::NotFound);
        assert!(!last_error().is_empty());
        assert_eq!(pm_corpus_load(c"x".as_ptr(), ptr::null_mut()), PmStatus::NullArgument);
        let bad = [0xffu8, 0];
        let mut out = 0.0;
        assert_eq!(
            pm_jaro_winkler(bad.as_ptr() as *const c_char, c"a".as_ptr(), &mut out),
            PmStatus::InvalidUtf8
        );
        // Success clears the message.
        assert_eq!(pm_jaro_winkler(c"a".as_ptr(), c"a".as_ptr(), &mut out), PmStatus::Ok);
        assert!(pm_last_error().is_null());
        pm_corpus_free(ptr::null_mut());
        pm_head_free(ptr::null_mut());
        pm_index_free(ptr::null_mut());
        pm_string_free(ptr::null_mut());
        assert_eq!(pm_corpus_len(ptr::null()), 0);
    }
}

#[test]
fn scalar_functions_match_library() {
    unsafe {
        let (mut lr, mut inf) = (0.0, 0);
        assert_eq!(pm_lr_plus(0.794, 0.018, &mut lr, &mut inf), PmStatus::Ok);
        assert_eq!((lr, inf), (0.794 / 0.018, 0));
        assert_eq!(pm_lr_plus(0.5, 0.0, &mut lr, &mut inf), PmStatus::Ok);
        assert_eq!(inf, 1);
        assert!(lr.is_infinite());
        assert_eq!(pm_lr_plus(0.0, 0.0, &mut lr, &mut inf), PmStatus::Undefined);

        let mut p = 0.0;
        assert_eq!(pm_predict_hitl_precision(0.285, 44.1, 0, &mut p), PmStatus::Ok);
        assert!((0.940..=0.952).contains(&p), "{p}");
        assert_eq!(pm_predict_hitl_precision(0.3, 0.0, 1, &mut p), PmStatus::Ok);
        assert_eq!(p, 1.0);
        assert_eq!(pm_predict_hitl_precision(0.0, 2.0, 0, &mut p), PmStatus::InvalidArgument);

        for (a, b) in [("Adidas", "adidas originals"), ("MARTHA", "MARHTA"), ("", "x")] {
            let (ca, cb) = (CString::new(a).unwrap(), CString::new(b).unwrap());
            let mut s = 0.0;
            assert_eq!(pm_jaro_winkler(ca.as_ptr(), cb.as_ptr(), &mut s), PmStatus::Ok);
            assert_eq!(s, jaro_winkler(a, b));
        }

        let mut text = ptr::null_mut();
        assert_eq!(
            pm_normalize_text(c"  ＡＣＭＥ ".as_ptr(), c"Straße  Dress".as_ptr(), &mut text),
            PmStatus::Ok
        );
        assert_eq!(
            CStr::from_ptr(text).to_str().unwrap(),
            normalize_text("  ＡＣＭＥ ", "Straße  Dress")
        );
        pm_string_free(text);
    }
}
