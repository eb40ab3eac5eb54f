//! Triplet losses, label-smoothed softmax and the weighted composite objective.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::model::{BranchFlags, ModelOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Fusion weight.
    pub lambda1: f64,
    /// Appearance weight.
    pub lambda2: f64,
    /// Gait weight.
    pub lambda3: f64,
    pub margin_hard: f64,
    pub margin_all: f64,
    pub lsr_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            margin_hard: 0.3,
            margin_all: 0.3,
            lsr_eps: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("margin_hard", self.margin_hard),
            ("margin_all", self.margin_all),
            ("lsr_eps", self.lsr_eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err!("loss weight {name} must be finite and ≥ 0, got {v}"));
            }
        }
        if self.lsr_eps >= 1.0 {
            return Err(config_err!("lsr_eps must be < 1, got {}", self.lsr_eps));
        }
        Ok(())
    }
}

/// Per-term scalars and totals of one step. Inactive terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet_hard_global: f64,
    pub softmax_global: f64,
    pub triplet_hard_fg: f64,
    pub softmax_fg: f64,
    pub triplet_all_gait_main: f64,
    pub triplet_all_gait_mgp: f64,
    pub softmax_gait_main: f64,
    pub softmax_gait_mgp: f64,
    pub triplet_hard_fusion: f64,
    pub l_appearance: f64,
    pub l_gait: f64,
    pub l_fusion: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 13] = [
        "triplet_hard_global",
        "softmax_global",
        "triplet_hard_fg",
        "softmax_fg",
        "triplet_all_gait_main",
        "triplet_all_gait_mgp",
        "softmax_gait_main",
        "softmax_gait_mgp",
        "triplet_hard_fusion",
        "l_appearance",
        "l_gait",
        "l_fusion",
        "l_total",
    ];

    pub fn values(&self) -> [f64; 13] {
        [
            self.triplet_hard_global,
            self.softmax_global,
            self.triplet_hard_fg,
            self.softmax_fg,
            self.triplet_all_gait_main,
            self.triplet_all_gait_mgp,
            self.softmax_gait_main,
            self.softmax_gait_mgp,
            self.triplet_hard_fusion,
            self.l_appearance,
            self.l_gait,
            self.l_fusion,
            self.l_total,
        ]
    }
}

/// Euclidean distance matrix with a zero-safe square root (zero gradient at coincident rows).
pub fn pairwise_dist(emb: &Tensor) -> Result<Tensor> {
    let (n, _d) = emb.dims2()?;
    if n < 2 {
        return Err(invalid!("pairwise distances need at least 2 embeddings, got {n}"));
    }
    let diff = emb.unsqueeze(1)?.broadcast_sub(&emb.unsqueeze(0)?)?;
    let sq = diff.sqr()?.sum(D::Minus1)?;
    let zero = sq.eq(0.0)?.to_dtype(sq.dtype())?;
    Ok(((sq + &zero)?.sqrt()? * (1.0 - zero)?)?)
}

struct LabelMasks {
    /// same label, different index
    pos: Vec<f64>,
    /// different label
    neg: Vec<f64>,
    has_pos: Vec<bool>,
    has_neg: Vec<bool>,
}

fn label_masks(labels: &[u32]) -> LabelMasks {
    let n = labels.len();
    let mut pos = vec![0.0; n * n];
    let mut neg = vec![0.0; n * n];
    let mut has_pos = vec![false; n];
    let mut has_neg = vec![false; n];
    for a in 0..n {
        for b in 0..n {
            if a != b && labels[a] == labels[b] {
                pos[a * n + b] = 1.0;
                has_pos[a] = true;
            } else if labels[a] != labels[b] {
                neg[a * n + b] = 1.0;
                has_neg[a] = true;
            }
        }
    }
    LabelMasks {
        pos,
        neg,
        has_pos,
        has_neg,
    }
}

fn check_labels(emb: &Tensor, labels: &[u32]) -> Result<usize> {
    let n = emb.dim(0)?;
    if labels.len() != n {
        return Err(invalid!("{} labels for {n} embeddings", labels.len()));
    }
    Ok(n)
}

fn zero_like(emb: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), emb.dtype(), emb.device())?)
}

/// Mean over valid anchors of max(0, hardest positive − hardest negative + margin).
pub fn batch_hard_triplet(emb: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let n = check_labels(emb, labels)?;
    let masks = label_masks(labels);
    let valid: Vec<f64> = (0..n)
        .map(|a| (masks.has_pos[a] && masks.has_neg[a]) as u8 as f64)
        .collect();
    let count = valid.iter().sum::<f64>();
    if count == 0.0 {
        log::warn!("batch-hard triplet: no anchor has both a positive and a negative; loss is 0");
        return zero_like(emb);
    }
    let skipped = n - count as usize;
    if skipped > 0 {
        log::warn!("batch-hard triplet: {skipped} anchor(s) without positives or negatives skipped");
    }
    let (dt, dev) = (emb.dtype(), emb.device());
    let dist = pairwise_dist(emb)?;
    let pos = Tensor::from_vec(masks.pos, (n, n), dev)?.to_dtype(dt)?;
    let neg = Tensor::from_vec(masks.neg, (n, n), dev)?.to_dtype(dt)?;
    let hardest_pos = (&dist * &pos)?.max(1)?;
    let big = dist.detach().max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? + 1.0;
    let hardest_neg = (&dist + ((1.0 - &neg)? * big)?)?.min(1)?;
    let hinge = ((hardest_pos - hardest_neg)? + margin)?.relu()?;
    let valid = Tensor::from_vec(valid, n, dev)?.to_dtype(dt)?;
    Ok(((hinge * valid)?.sum_all()? / count)?)
}

/// Sum of active hinges over all valid (a, p, n) triplets divided by the number of active ones.
pub fn batch_all_triplet(emb: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let n = check_labels(emb, labels)?;
    let masks = label_masks(labels);
    let mut valid = vec![0.0; n * n * n];
    let mut any = false;
    for a in 0..n {
        for p in 0..n {
            if masks.pos[a * n + p] == 0.0 {
                continue;
            }
            for q in 0..n {
                if masks.neg[a * n + q] == 1.0 {
                    valid[(a * n + p) * n + q] = 1.0;
                    any = true;
                }
            }
        }
    }
    if !any {
        log::warn!("batch-all triplet: no valid triplets in batch; loss is 0");
        return zero_like(emb);
    }
    let (dt, dev) = (emb.dtype(), emb.device());
    let dist = pairwise_dist(emb)?;
    let d_ap = dist.unsqueeze(2)?;
    let d_an = dist.unsqueeze(1)?;
    let valid = Tensor::from_vec(valid, (n, n, n), dev)?.to_dtype(dt)?;
    let hinge = ((d_ap.broadcast_sub(&d_an)? + margin)?.relu()? * valid)?;
    let active = hinge
        .detach()
        .gt(0.0)?
        .to_dtype(DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    if active == 0.0 {
        return zero_like(emb);
    }
    Ok((hinge.sum_all()? / active)?)
}

/// Cross-entropy against label-smoothed targets, averaged over rows.
pub fn lsr_softmax(logits: &Tensor, targets: &[usize], eps: f64) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if c < 2 {
        return Err(invalid!("softmax loss needs ≥ 2 classes, got {c}"));
    }
    if targets.len() != n {
        return Err(invalid!("{} targets for {n} rows", targets.len()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid!("lsr eps must be in [0, 1), got {eps}"));
    }
    let off = eps / c as f64;
    let mut q = vec![off; n * c];
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(invalid!("label {t} out of range for {c} classes"));
        }
        q[i * c + t] = 1.0 - eps + off;
    }
    let q = Tensor::from_vec(q, (n, c), logits.device())?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(((q * logp)?.sum(1)?.neg()?.mean(0))?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// λ1·fusion + λ2·appearance + λ3·gait.
pub fn combine(l_fusion: f64, l_appearance: f64, l_gait: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_fusion + w.lambda2 * l_appearance + w.lambda3 * l_gait
}

/// Accumulates weighted terms; terms with zero weight are reported but kept out of the graph.
struct Accumulator {
    graph: Option<Tensor>,
}

impl Accumulator {
    fn add(&mut self, term: &Tensor, weight: f64) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let t = (term * weight)?;
        self.graph = Some(match self.graph.take() {
            Some(g) => (g + t)?,
            None => t,
        });
        Ok(())
    }
}

fn need<'a>(t: Option<&'a Tensor>, what: &str) -> Result<&'a Tensor> {
    t.ok_or_else(|| config_err!("active configuration requires {what}, which the model did not produce"))
}

/// Composite objective for one training forward. `labels` are identities (triplet mining),
/// `classes` the matching classifier targets.
pub fn total_loss(
    out: &ModelOutput,
    labels: &[u32],
    classes: &[usize],
    flags: BranchFlags,
    w: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let mut b = LossBreakdown::default();
    let mut acc = Accumulator { graph: None };

    if flags.global {
        let app = need(out.appearance.as_ref().map(|a| &a.global_512), "the global feature")?;
        let hard = batch_hard_triplet(app, labels, w.margin_hard)?;
        let soft = lsr_softmax(need(out.logits.global.as_ref(), "global classifier logits")?, classes, w.lsr_eps)?;
        b.triplet_hard_global = scalar(&hard)?;
        b.softmax_global = scalar(&soft)?;
        acc.add(&(hard + soft)?, w.lambda2)?;
    }
    if flags.foreground {
        let fg = need(
            out.appearance.as_ref().and_then(|a| a.foreground_512.as_ref()),
            "the foreground feature",
        )?;
        let hard = batch_hard_triplet(fg, labels, w.margin_hard)?;
        let soft = lsr_softmax(need(out.logits.foreground.as_ref(), "foreground classifier logits")?, classes, w.lsr_eps)?;
        b.triplet_hard_fg = scalar(&hard)?;
        b.softmax_fg = scalar(&soft)?;
        acc.add(&(hard + soft)?, w.lambda2)?;
    }
    b.l_appearance = b.triplet_hard_global + b.softmax_global + b.triplet_hard_fg + b.softmax_fg;

    if flags.gait {
        let g = out
            .gait
            .as_ref()
            .ok_or_else(|| config_err!("active configuration requires gait features, which the model did not produce"))?;
        let main_all = batch_all_triplet(&g.main_256, labels, w.margin_all)?;
        let mgp_all = batch_all_triplet(&g.mgp_256, labels, w.margin_all)?;
        let main_soft = lsr_softmax(need(out.logits.gait_main.as_ref(), "gait main classifier logits")?, classes, w.lsr_eps)?;
        let mgp_soft = lsr_softmax(need(out.logits.gait_mgp.as_ref(), "gait MGP classifier logits")?, classes, w.lsr_eps)?;
        b.triplet_all_gait_main = scalar(&main_all)?;
        b.triplet_all_gait_mgp = scalar(&mgp_all)?;
        b.softmax_gait_main = scalar(&main_soft)?;
        b.softmax_gait_mgp = scalar(&mgp_soft)?;
        acc.add(&(((main_all + mgp_all)? + main_soft)? + mgp_soft)?, w.lambda3)?;
    }
    b.l_gait = b.triplet_all_gait_main + b.triplet_all_gait_mgp + b.softmax_gait_main + b.softmax_gait_mgp;

    let fusion = batch_hard_triplet(&out.fused, labels, w.margin_hard)?;
    b.triplet_hard_fusion = scalar(&fusion)?;
    b.l_fusion = b.triplet_hard_fusion;
    acc.add(&fusion, w.lambda1)?;

    b.l_total = combine(b.l_fusion, b.l_appearance, b.l_gait, w);
    let total = match acc.graph {
        Some(g) => g,
        None => Tensor::zeros((), out.fused.dtype(), &Device::Cpu)?,
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        Tensor::from_vec(rows.concat(), (n, d), &Device::Cpu).unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    pub(crate) fn hard_oracle(x: &[Vec<f64>], labels: &[u32], m: f64) -> f64 {
        let n = x.len();
        let (mut sum, mut count) = (0.0, 0);
        for a in 0..n {
            let pos: Vec<f64> = (0..n).filter(|&p| p != a && labels[p] == labels[a]).map(|p| dist(&x[a], &x[p])).collect();
            let neg: Vec<f64> = (0..n).filter(|&q| labels[q] != labels[a]).map(|q| dist(&x[a], &x[q])).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let hp = pos.iter().cloned().fold(f64::MIN, f64::max);
            let hn = neg.iter().cloned().fold(f64::MAX, f64::min);
            sum += (hp - hn + m).max(0.0);
            count += 1;
        }
        if count == 0 { 0.0 } else { sum / count as f64 }
    }

    pub(crate) fn all_oracle(x: &[Vec<f64>], labels: &[u32], m: f64) -> f64 {
        let n = x.len();
        let (mut sum, mut active) = (0.0, 0);
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let h = (dist(&x[a], &x[p]) - dist(&x[a], &x[q]) + m).max(0.0);
                    if h > 0.0 {
                        sum += h;
                        active += 1;
                    }
                }
            }
        }
        if active == 0 { 0.0 } else { sum / active as f64 }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: u32) -> (Vec<Vec<f64>>, Vec<u32>) {
        let x = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..n).map(|i| i as u32 % classes).collect();
        (x, labels)
    }

    fn s(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_dist(&t2(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]])).unwrap();
        let d: Vec<Vec<f64>> = d.to_vec2().unwrap();
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[0][2], 0.0);
        assert_eq!(d[1][1], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, _) = random_batch(&mut rng, 6, 5, 2);
        let d: Vec<Vec<f64>> = pairwise_dist(&t2(&x)).unwrap().to_vec2().unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((d[i][j] - dist(&x[i], &x[j])).abs() < 1e-6);
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }

    #[test]
    fn coincident_rows_have_finite_gradient() {
        let v = Var::from_tensor(&t2(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]])).unwrap();
        let loss = pairwise_dist(v.as_tensor()).unwrap().sum_all().unwrap();
        let g: Vec<Vec<f64>> = loss.backward().unwrap().get(&v).unwrap().to_vec2().unwrap();
        assert!(g.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn triplet_examples() {
        let same = t2(&vec![vec![0.5, 0.5]; 4]);
        let labels = [0, 0, 1, 1];
        assert!((s(batch_hard_triplet(&same, &labels, 0.3).unwrap()) - 0.3).abs() < 1e-12);
        assert!((s(batch_all_triplet(&same, &labels, 0.3).unwrap()) - 0.3).abs() < 1e-12);
        let sep = t2(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]]);
        assert_eq!(s(batch_hard_triplet(&sep, &labels, 0.3).unwrap()), 0.0);
        assert_eq!(s(batch_all_triplet(&sep, &labels, 0.3).unwrap()), 0.0);
        assert_eq!(s(batch_hard_triplet(&same, &[1, 1, 1, 1], 0.3).unwrap()), 0.0);
    }

    #[test]
    fn triplets_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let n = rng.random_range(4..12);
            let d = rng.random_range(1..8);
            let classes = rng.random_range(2..4);
            let (x, labels) = random_batch(&mut rng, n, d, classes);
            let e = t2(&x);
            assert!((s(batch_hard_triplet(&e, &labels, 0.3).unwrap()) - hard_oracle(&x, &labels, 0.3)).abs() < 1e-6);
            assert!((s(batch_all_triplet(&e, &labels, 0.3).unwrap()) - all_oracle(&x, &labels, 0.3)).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, labels) = random_batch(&mut rng, 8, 4, 2);
        let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().enumerate().map(|(i, v)| v + i as f64 * 3.0).collect()).collect();
        for f in [batch_hard_triplet, batch_all_triplet] {
            let a = s(f(&t2(&x), &labels, 0.3).unwrap());
            let b = s(f(&t2(&shifted), &labels, 0.3).unwrap());
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lsr_examples() {
        let uniform = Tensor::zeros((3, 5), DType::F64, &Device::Cpu).unwrap();
        for eps in [0.0, 0.1, 0.5] {
            let l = s(lsr_softmax(&uniform, &[0, 1, 4], eps).unwrap());
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let targets = [0usize, 3, 4, 1];
        let oracle = |eps: f64| {
            let mut total = 0.0;
            for (row, &t) in logits.iter().zip(&targets) {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                for (j, v) in row.iter().enumerate() {
                    let q = if j == t { 1.0 - eps + eps / 5.0 } else { eps / 5.0 };
                    total -= q * (v.exp() / z).ln();
                }
            }
            total / 4.0
        };
        for eps in [0.0, 0.1] {
            assert!((s(lsr_softmax(&t2(&logits), &targets, eps).unwrap()) - oracle(eps)).abs() < 1e-9);
        }
        let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|v| v + 7.0).collect()).collect();
        let a = s(lsr_softmax(&t2(&logits), &targets, 0.1).unwrap());
        let b = s(lsr_softmax(&t2(&shifted), &targets, 0.1).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(lsr_softmax(&t2(&logits), &[0, 1, 2, 5], 0.1).is_err());
    }

    #[test]
    fn weights_validation_and_combination() {
        assert!(LossWeights { lsr_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(combine(1.0, 1.0, 1.0, &LossWeights::default()), 3.0);
    }

    fn fd_check(f: impl Fn(&Tensor) -> Tensor, x0: &[Vec<f64>]) {
        let base = t2(x0);
        let var = Var::from_tensor(&base).unwrap();
        let grad: Vec<f64> = f(var.as_tensor()).backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..flat.len() {
            let eps = 1e-6;
            let mut p = flat.clone();
            p[i] += eps;
            let mut m = flat.clone();
            m[i] -= eps;
            let fp = s(f(&Tensor::from_vec(p, base.shape(), &Device::Cpu).unwrap()));
            let fm = s(f(&Tensor::from_vec(m, base.shape(), &Device::Cpu).unwrap()));
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = numeric.abs().max(grad[i].abs());
            if denom < 1e-9 {
                continue;
            }
            assert!((numeric - grad[i]).abs() / denom < 1e-3, "{i}: {numeric} vs {}", grad[i]);
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, labels) = random_batch(&mut rng, 6, 3, 2);
        fd_check(|e| batch_hard_triplet(e, &labels, 1.0).unwrap(), &x);
        fd_check(|e| batch_all_triplet(e, &labels, 1.0).unwrap(), &x);
    }
}
