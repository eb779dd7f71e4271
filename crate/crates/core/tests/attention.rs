use lsrm::attention::{dense_cross_attention, AttentionParams};
use lsrm::blocks::partition;
use lsrm::nsa::{
    nsa_cross_attention, score_topk_blocks, sel_attention, BranchSet, EmptySelection, KvSet, NsaInputs,
    NsaWeights, Selection, SelectionSource, WindowCtx,
};
use lsrm::oracle;
use lsrm::rng::SeedStream;
use lsrm::tensor::Tensor;
use lsrm::tokenizer::{Modality, TokenSet};
use lsrm::LsrmError;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn volume_tokens(n: usize, d: usize, s: &SeedStream) -> TokenSet {
    let res = 16u32;
    let mut cells: Vec<u32> = (0..res.pow(3)).collect();
    cells.shuffle(&mut s.rng());
    let mut coords: Vec<[u32; 3]> = cells[..n].iter().map(|&c| [c / 256, (c / 16) % 16, c % 16]).collect();
    coords.sort_unstable();
    TokenSet {
        modality: Modality::Volume,
        features: s.child("f").uniform(&[n, d], 1.0),
        coords,
        grid_res: [res; 3],
    }
}

fn layouts() -> impl Strategy<Value = AttentionParams> {
    prop_oneof![
        Just(AttentionParams::new(8, 1, 4)),
        Just(AttentionParams::new(4, 2, 8)),
        Just(AttentionParams::new(32, 2, 2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Random per-query selections (own block included) against the branch
    /// by branch reference.
    #[test]
    fn gated_attention_matches_reference(p in layouts(), ny in 2usize..80, seed in 0u64..10_000, budget in 1usize..6) {
        let s = SeedStream::new(seed);
        let y = volume_tokens(ny, p.d, &s);
        let part = partition(&y, 8).unwrap();
        let w = NsaWeights::random(&p, BranchSet::Full, &s.child("w"));
        let kv = KvSet::build(&y.features, &part, &w, &p).unwrap();
        let own: Vec<usize> = (0..ny).map(|t| part.slot_of_token(t)).collect();
        let mut rng = s.child("sel").rng();
        let slots = part.num_occupied();
        let lists = own
            .iter()
            .map(|&o| {
                let mut l: Vec<u32> = (0..slots as u32).filter(|&b| b as usize != o).collect();
                l.shuffle(&mut rng);
                l.truncate(rng.gen_range(0..budget));
                l.insert(rng.gen_range(0..=l.len()), o as u32);
                l
            })
            .collect();
        let sel = Selection { lists };
        let got = nsa_cross_attention(
            &NsaInputs {
                x: &y.features,
                kv: &kv,
                selection: SelectionSource::Given(&sel),
                window: Some(WindowCtx { kv: &kv, own_slot: &own }),
                on_empty: EmptySelection::Error,
            },
            &w,
            &p,
        )
        .unwrap();
        let blocks: Vec<Vec<usize>> = (0..slots).map(|b| part.tokens_of_slot(b).iter().map(|&t| t as usize).collect()).collect();
        let want = oracle::nsa_reference(&y.features, &y.features, &blocks, &sel, Some(&own), &w, &p);
        prop_assert!(got.out.max_abs_diff(&want) <= 1e-4, "err {}", got.out.max_abs_diff(&want));
    }

    #[test]
    fn full_selection_is_dense(p in layouts(), nx in 1usize..40, ny in 1usize..64, seed in 0u64..10_000) {
        let s = SeedStream::new(seed);
        let y = volume_tokens(ny, 1, &s);
        let part = partition(&y, 8).unwrap();
        let q = s.child("q").uniform(&[nx, p.h_q, p.d_h], 2.0);
        let k = s.child("k").uniform(&[ny, p.h_kv, p.d_h], 2.0);
        let v = s.child("v").uniform(&[ny, p.h_kv, p.d_h], 2.0);
        let sel = sel_attention(&q, &k, &v, &part, &Selection::all(nx, part.num_occupied()), &p, None).unwrap();
        let dense = dense_cross_attention(&q, &k, &v, &p, None).unwrap();
        prop_assert!(sel.max_abs_diff(&dense) <= 1e-5);
    }

    #[test]
    fn topk_is_the_best_scoring_prefix(p in layouts(), blocks in 1usize..30, budget in 0usize..40, seed in 0u64..10_000) {
        let s = SeedStream::new(seed);
        let q = s.child("q").uniform(&[5, p.h_q, p.d_h], 1.0);
        let kc = s.child("k").uniform(&[blocks, p.h_kv, p.d_h], 1.0);
        let sel = score_topk_blocks(&q, &kc, budget, &p);
        for (i, l) in sel.lists.iter().enumerate() {
            prop_assert_eq!(l.len(), budget.min(blocks));
            let score = |b: u32| -> f64 {
                (0..p.h_q)
                    .map(|g| {
                        let kh = g / (p.h_q / p.h_kv);
                        (0..p.d_h)
                            .map(|t| q.row(i)[g * p.d_h + t] as f64 * kc.row(b as usize)[kh * p.d_h + t] as f64)
                            .sum::<f64>()
                    })
                    .sum()
            };
            let worst_in = l.iter().map(|&b| score(b)).fold(f64::INFINITY, f64::min);
            let best_out = (0..blocks as u32).filter(|b| !l.contains(b)).map(score).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(worst_in >= best_out - 1e-9);
            prop_assert!(l.windows(2).all(|w| score(w[0]) >= score(w[1]) - 1e-9));
        }
    }
}

#[test]
fn empty_selection_without_fallback_is_an_error() {
    let p = AttentionParams::new(4, 1, 4);
    let s = SeedStream::new(1);
    let y = volume_tokens(20, p.d, &s);
    let part = partition(&y, 8).unwrap();
    let w = NsaWeights::random(&p, BranchSet::CmpSel, &s);
    let kv = KvSet::build(&y.features, &part, &w, &p).unwrap();
    let sel = Selection { lists: vec![Vec::new(); 3] };
    let x = Tensor::zeros(&[3, p.d]);
    let inputs = |on_empty| NsaInputs {
        x: &x,
        kv: &kv,
        selection: SelectionSource::Given(&sel),
        window: None,
        on_empty,
    };
    assert!(matches!(
        nsa_cross_attention(&inputs(EmptySelection::Error), &w, &p),
        Err(LsrmError::EmptyAttentionRow { .. })
    ));
    let out = nsa_cross_attention(&inputs(EmptySelection::Compressed), &w, &p).unwrap();
    assert!(out.out.all_finite());
}

#[test]
fn hardware_faithful_layouts() {
    let hw = |h_q, h_kv| AttentionParams {
        hardware_faithful: true,
        ..AttentionParams::new(h_q, h_kv, 4)
    };
    assert!(hw(32, 2).validate().is_ok());
    assert!(hw(16, 1).validate().is_ok());
    assert!(matches!(hw(8, 1).validate(), Err(LsrmError::Config(_))));
    assert!(hw(32, 4).validate().is_err());
    assert!(AttentionParams::new(8, 1, 4).validate().is_ok());
}
