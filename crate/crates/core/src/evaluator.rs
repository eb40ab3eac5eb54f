//! Retrieval metrics: CMC and mAP with same-camera junk removal, and the CASIA-B
//! cross-view rank-1 protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::io::write_json;
use crate::dataset::{Condition, GaitMeta, VIEW_ANGLES};
use crate::error::{invalid, shape_err, Error, Result};

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: u32,
    pub camera: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gait: Option<GaitMeta>,
}

#[derive(Debug, Clone, Default)]
pub struct RetrievalProblem {
    pub query_emb: Vec<Vec<f32>>,
    pub gallery_emb: Vec<Vec<f32>>,
    pub query_meta: Vec<ItemMeta>,
    pub gallery_meta: Vec<ItemMeta>,
}

impl RetrievalProblem {
    pub fn validate(&self) -> Result<usize> {
        if self.query_emb.len() != self.query_meta.len() || self.gallery_emb.len() != self.gallery_meta.len() {
            return Err(shape_err!("metadata count does not match embedding count"));
        }
        let dim = self
            .query_emb
            .first()
            .or(self.gallery_emb.first())
            .map_or(0, Vec::len);
        if self.query_emb.iter().chain(&self.gallery_emb).any(|e| e.len() != dim) {
            return Err(shape_err!("query and gallery embeddings must share one dimension"));
        }
        Ok(dim)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Gallery indices among `candidates` sorted by ascending distance to `query`; ties keep
/// gallery order.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>], candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&g| (sq_dist(query, &gallery[g]), g)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, g)| g).collect()
}

/// Mean of precision@k over the ranks k of relevant items; `None` without relevant items.
pub fn average_precision(sorted_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in sorted_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcMap {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any valid gallery match.
    pub excluded: usize,
}

impl CmcMap {
    pub fn cmc(&self) -> [f64; 4] {
        [self.rank1, self.rank5, self.rank10, self.rank20]
    }
}

pub fn cmc_map(problem: &RetrievalProblem) -> Result<CmcMap> {
    problem.validate()?;
    if problem.query_emb.is_empty() || problem.gallery_emb.is_empty() {
        return Err(invalid!("retrieval needs at least one query and one gallery item"));
    }
    let mut hits = [0usize; 4];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (q, qm) in problem.query_emb.iter().zip(&problem.query_meta) {
        let candidates: Vec<usize> = (0..problem.gallery_emb.len())
            .filter(|&g| {
                let gm = &problem.gallery_meta[g];
                !(gm.identity == qm.identity && gm.camera == qm.camera)
            })
            .collect();
        let ranked = rank_gallery(q, &problem.gallery_emb, &candidates);
        let relevance: Vec<bool> = ranked
            .iter()
            .map(|&g| problem.gallery_meta[g].identity == qm.identity)
            .collect();
        let Some(ap) = average_precision(&relevance) else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).unwrap();
        for (slot, &k) in CMC_RANKS.iter().enumerate() {
            if first < k {
                hits[slot] += 1;
            }
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} quer(ies) without a valid gallery match excluded");
    }
    let frac = |h: usize| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
    Ok(CmcMap {
        rank1: frac(hits[0]),
        rank5: frac(hits[1]),
        rank10: frac(hits[2]),
        rank20: frac(hits[3]),
        map: if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 },
        evaluated,
        excluded,
    })
}

pub type ViewMatrix = [[Option<f64>; 11]; 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasiaCondition {
    /// Rank-1 accuracy, rows = probe view, columns = gallery view; `None` when absent.
    pub matrix: ViewMatrix,
    /// Mean over present cells.
    pub including: f64,
    /// Mean over present off-diagonal cells.
    pub excluding: f64,
    pub absent_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasiaReport {
    pub conditions: BTreeMap<Condition, CasiaCondition>,
}

fn view_index(meta: &ItemMeta) -> Result<(usize, Condition)> {
    let g = meta
        .gait
        .ok_or_else(|| Error::Config("CASIA-B protocol requires view and condition metadata".into()))?;
    let v = crate::dataset::view_slot(g.view).ok_or_else(|| invalid!("view {} is not a CASIA-B angle", g.view))?;
    Ok((v, g.condition))
}

pub fn casia_eval(problem: &RetrievalProblem) -> Result<CasiaReport> {
    problem.validate()?;
    let gallery_views = problem
        .gallery_meta
        .iter()
        .map(view_index)
        .collect::<Result<Vec<_>>>()?;
    let query_views = problem
        .query_meta
        .iter()
        .map(view_index)
        .collect::<Result<Vec<_>>>()?;
    let mut by_view: Vec<Vec<usize>> = vec![Vec::new(); 11];
    for (g, &(v, _)) in gallery_views.iter().enumerate() {
        by_view[v].push(g);
    }
    let mut conditions = BTreeMap::new();
    for condition in Condition::ALL {
        let mut correct = [[0usize; 11]; 11];
        let mut total = [[0usize; 11]; 11];
        for (q, &(pv, c)) in query_views.iter().enumerate() {
            if c != condition {
                continue;
            }
            for gv in 0..11 {
                if by_view[gv].is_empty() {
                    continue;
                }
                let ranked = rank_gallery(&problem.query_emb[q], &problem.gallery_emb, &by_view[gv]);
                total[pv][gv] += 1;
                if problem.gallery_meta[ranked[0]].identity == problem.query_meta[q].identity {
                    correct[pv][gv] += 1;
                }
            }
        }
        let mut matrix: ViewMatrix = [[None; 11]; 11];
        for pv in 0..11 {
            for gv in 0..11 {
                if total[pv][gv] > 0 {
                    matrix[pv][gv] = Some(correct[pv][gv] as f64 / total[pv][gv] as f64);
                }
            }
        }
        let (including, excluding, absent_cells) = view_averages(&matrix);
        if absent_cells > 0 {
            log::warn!("CASIA-B {condition}: {absent_cells} of 121 view pairs absent and omitted");
        }
        conditions.insert(
            condition,
            CasiaCondition {
                matrix,
                including,
                excluding,
                absent_cells,
            },
        );
    }
    Ok(CasiaReport { conditions })
}

/// (mean of all present cells, mean of present off-diagonal cells, absent count).
pub fn view_averages(matrix: &ViewMatrix) -> (f64, f64, usize) {
    let mut all = (0.0, 0usize);
    let mut off = (0.0, 0usize);
    let mut absent = 0;
    for (pv, row) in matrix.iter().enumerate() {
        for (gv, cell) in row.iter().enumerate() {
            match cell {
                Some(v) => {
                    all.0 += v;
                    all.1 += 1;
                    if pv != gv {
                        off.0 += v;
                        off.1 += 1;
                    }
                }
                None => absent += 1,
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(all), mean(off), absent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mars: Option<CmcMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub casia: Option<CasiaReport>,
}

impl EvalReport {
    /// Plain-text table with the usual column layout.
    pub fn table(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.mars {
            let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8}", "Rank1", "Rank5", "Rank10", "Rank20", "mAP");
            let _ = writeln!(
                s,
                "{:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
                m.rank1 * 100.0,
                m.rank5 * 100.0,
                m.rank10 * 100.0,
                m.rank20 * 100.0,
                m.map * 100.0
            );
        }
        if let Some(c) = &self.casia {
            let _ = writeln!(s, "{:>10} {:>10} {:>10}", "condition", "including", "excluding");
            for (cond, r) in &c.conditions {
                let _ = writeln!(s, "{:>10} {:>10.3} {:>10.3}", cond.to_string(), r.including * 100.0, r.excluding * 100.0);
            }
        }
        s
    }

    /// `report.json`, `report.csv`, and for CASIA-B one `casia_<cond>.csv` 11×11 matrix each.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["metric", "value"])?;
        if let Some(m) = &self.mars {
            for (k, v) in [
                ("rank1", m.rank1),
                ("rank5", m.rank5),
                ("rank10", m.rank10),
                ("rank20", m.rank20),
                ("map", m.map),
            ] {
                w.write_record([k.to_string(), v.to_string()])?;
            }
        }
        if let Some(c) = &self.casia {
            for (cond, r) in &c.conditions {
                w.write_record([format!("{}_including", cond.code()), r.including.to_string()])?;
                w.write_record([format!("{}_excluding", cond.code()), r.excluding.to_string()])?;
                let mpath = dir.join(format!("casia_{}.csv", cond.code()));
                let mut mw = csv::Writer::from_path(&mpath)?;
                let mut header = vec!["probe\\gallery".to_string()];
                header.extend(VIEW_ANGLES.iter().map(|v| format!("{v:03}")));
                mw.write_record(&header)?;
                for (pv, row) in r.matrix.iter().enumerate() {
                    let mut rec = vec![format!("{:03}", VIEW_ANGLES[pv])];
                    rec.extend(row.iter().map(|c| c.map_or(String::new(), |v| v.to_string())));
                    mw.write_record(&rec)?;
                }
                mw.flush().map_err(|e| Error::io(&mpath, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
