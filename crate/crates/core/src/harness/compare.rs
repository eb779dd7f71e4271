//! Per-layer agreement between logit top-k selection and the geometric plan.

use std::path::Path;

use serde::Serialize;

use crate::error::{LsrmError, Result};
use crate::nsa::{score_topk_blocks, Selection};
use crate::pipeline::{sparse_stage_forward_with, LayerState, Routing, SparseBlockWeights, SparseInstance};
use crate::routing::{routing_overlap_report, to_blocks, to_slots, Budgets, RoutingPlan};
use crate::tensor::Tensor;

/// Which selector is compared against the plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// Top-k by logits against compressed keys at the layer's activations.
    Score,
    /// The plan itself; every overlap is 1.
    Plan,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapRow {
    pub layer: usize,
    pub table: &'static str,
    pub queries: usize,
    pub mean_jaccard: f64,
}

#[derive(Clone, Debug)]
pub struct RoutingComparison {
    pub rows: Vec<OverlapRow>,
    /// Reference selections per layer, as block ids.
    pub layers: Vec<RoutingPlan>,
}

/// Plan tables as slot selections in hook order (x-self, x-cross, y-self, y-cross).
fn plan_slots(inst: &SparseInstance) -> Result<[Selection; 4]> {
    if let Routing::Plan { v2v, v2i, i2v, i2i } = &inst.ctx.routing {
        return Ok([v2v.clone(), v2i.clone(), i2i.clone(), i2v.clone()]);
    }
    let (vp, ip) = (inst.vol_part(), inst.img_part());
    Ok([
        to_slots(&inst.plan.v2v, vp)?,
        to_slots(&inst.plan.v2i, ip)?,
        to_slots(&inst.plan.i2i, ip)?,
        to_slots(&inst.plan.i2v, vp)?,
    ])
}

/// Runs the serial sparse stage and, at every layer, compares the reference
/// selector with the plan. Returns the comparison and the stage outputs.
pub fn compare_layers(
    inst: &SparseInstance,
    blocks: &[SparseBlockWeights],
    budgets: Budgets,
    reference: Reference,
) -> Result<(RoutingComparison, (Tensor, Tensor))> {
    let plan = plan_slots(inst)?;
    let b = budgets;
    let budgets = [b.v2v, b.v2i, b.i2i, b.i2v];
    let names = ["v2v", "v2i", "i2i", "i2v"];
    let p = inst.ctx.params;
    let mut rows = Vec::new();
    let mut layers = Vec::new();
    let mut hook = |s: &LayerState<'_>| -> Result<()> {
        let scored: Vec<Selection> = match reference {
            Reference::Plan => plan.to_vec(),
            Reference::Score => {
                let w = &s.weights;
                let sets = [
                    (&w.x.self_nsa, s.xn),
                    (&w.x.cross_nsa, s.xn),
                    (&w.y.self_nsa, s.yn),
                    (&w.y.cross_nsa, s.yn),
                ];
                let mut out = Vec::with_capacity(4);
                for (n, (nsa, x)) in sets.into_iter().enumerate() {
                    let q = nsa.proj.queries(x, &p)?;
                    out.push(score_topk_blocks(&q, &s.kv[n].k_cmp, budgets[n], &p));
                }
                out
            }
        };
        for n in 0..4 {
            let r = routing_overlap_report(&plan[n], &scored[n])?;
            rows.push(OverlapRow {
                layer: s.layer,
                table: names[n],
                queries: plan[n].queries(),
                mean_jaccard: r.mean,
            });
        }
        let (vp, ip) = (inst.vol_part(), inst.img_part());
        layers.push(RoutingPlan {
            v2v: to_blocks(&scored[0], vp),
            v2i: to_blocks(&scored[1], ip),
            i2i: to_blocks(&scored[2], ip),
            i2v: to_blocks(&scored[3], vp),
        });
        Ok(())
    };
    let out = sparse_stage_forward_with(&inst.x_up.features, &inst.y_up.features, blocks, &inst.ctx, &mut hook)?;
    Ok((RoutingComparison { rows, layers }, out))
}

pub fn overlap_csv(rows: &[OverlapRow]) -> String {
    let mut s = String::from("layer,table,queries,mean_jaccard\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.layer, r.table, r.queries, r.mean_jaccard));
    }
    s
}

/// Writes `plan.bin`, `selected_layer{m}.bin` (same format) and `overlap.csv`.
pub fn write_comparison(dir: &Path, inst: &SparseInstance, cmp: &RoutingComparison) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("plan.bin"), inst.plan.encode())?;
    for (m, l) in cmp.layers.iter().enumerate() {
        std::fs::write(dir.join(format!("selected_layer{m}.bin")), l.encode())?;
    }
    std::fs::write(dir.join("overlap.csv"), overlap_csv(&cmp.rows))?;
    Ok(())
}

/// Mean Jaccard per table recomputed from the dumped files, in the row order
/// of `overlap.csv`.
pub fn overlap_from_dumps(dir: &Path, layers: usize) -> Result<Vec<OverlapRow>> {
    let plan = RoutingPlan::decode(&std::fs::read(dir.join("plan.bin"))?)?;
    let mut rows = Vec::new();
    for m in 0..layers {
        let path = dir.join(format!("selected_layer{m}.bin"));
        if !path.exists() {
            return Err(LsrmError::config(format!("missing dump {}", path.display())));
        }
        let sel = RoutingPlan::decode(&std::fs::read(path)?)?;
        for (name, a, b) in [
            ("v2v", &plan.v2v, &sel.v2v),
            ("v2i", &plan.v2i, &sel.v2i),
            ("i2i", &plan.i2i, &sel.i2i),
            ("i2v", &plan.i2v, &sel.i2v),
        ] {
            rows.push(OverlapRow {
                layer: m,
                table: name,
                queries: a.queries(),
                mean_jaccard: routing_overlap_report(a, b)?.mean,
            });
        }
    }
    Ok(rows)
}
