//! Gated three-branch sparse attention: compressed, selected and windowed
//! branches over a block-partitioned key set, with top-k block selection.

use lsrm::attention::{dense_cross_attention, AttentionParams};
use lsrm::blocks::partition;
use lsrm::nsa::{
    nsa_cross_attention, score_topk_blocks, sel_attention, BranchSet, EmptySelection, KvSet, NsaInputs,
    NsaWeights, Selection, SelectionSource, WindowCtx,
};
use lsrm::rng::SeedStream;
use lsrm::tokenizer::{full_grid_coords, Modality, TokenSet};

fn main() -> lsrm::Result<()> {
    let p = AttentionParams::new(8, 1, 8);
    let s = SeedStream::new(11);
    let coords = full_grid_coords(16);
    let y = TokenSet {
        modality: Modality::Volume,
        features: s.child("y").uniform(&[coords.len(), p.d], 1.0),
        coords,
        grid_res: [16; 3],
    };
    let part = partition(&y, 8)?;
    let w = NsaWeights::random(&p, BranchSet::Full, &s.child("w"));
    let kv = KvSet::build(&y.features, &part, &w, &p)?;
    println!("{} tokens, {} blocks", y.len(), kv.num_slots());

    let q = w.proj.queries(&y.features, &p)?;
    let dense = dense_cross_attention(&q, &kv.k, &kv.v, &p, None)?;
    let all = sel_attention(&q, &kv.k, &kv.v, &part, &Selection::all(y.len(), part.num_occupied()), &p, None)?;
    println!("selecting every block reproduces dense attention: max diff {:.2e}", all.max_abs_diff(&dense));

    let sel = score_topk_blocks(&q, &kv.k_cmp, 2, &p);
    println!("token 0 selects blocks {:?} by compressed-key score", sel.lists[0]);
    let own: Vec<usize> = (0..y.len()).map(|t| part.slot_of_token(t)).collect();
    let out = nsa_cross_attention(
        &NsaInputs {
            x: &y.features,
            kv: &kv,
            selection: SelectionSource::Given(&sel),
            window: Some(WindowCtx { kv: &kv, own_slot: &own }),
            on_empty: EmptySelection::Error,
        },
        &w,
        &p,
    )?;
    println!("gated output {:?}, finite: {}", out.out.shape(), out.out.all_finite());
    Ok(())
}
