use candle_core::{Tensor, Var, D};

use super::queue::{argmax, RepresentationQueue};
use crate::nn::{device, l2_normalize, ParamStore, Rng};
use crate::{Error, Result};

/// Log-weight that removes a candidate from a log-sum-exp.
const EXCLUDED: f64 = -1e9;

/// `K` prototype vectors `[K, h]`, kept at unit length between steps.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    var: Var,
}

impl PrototypeBank {
    pub fn new(store: &mut ParamStore, k: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 prototypes, got {k}")));
        }
        let bank = Self {
            var: store.normal("prototypes", &[k, dim], 1.0, rng)?,
        };
        bank.renormalize()?;
        Ok(bank)
    }

    pub fn from_var(var: Var) -> Self {
        Self { var }
    }

    pub fn len(&self) -> usize {
        self.var.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> &Tensor {
        self.var.as_tensor()
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn renormalize(&self) -> Result<()> {
        self.var.set(&l2_normalize(self.var.as_tensor())?.detach())?;
        Ok(())
    }

    /// Places the prototypes on the rows of `z` `[N, h]` by spherical
    /// k-means: k-means++ seeding under cosine distance, then `iterations`
    /// Lloyd steps. With fewer distinct rows than prototypes the surplus
    /// stays where it was.
    pub fn seed_from(&self, z: &Tensor, iterations: usize, rng: &mut Rng) -> Result<()> {
        use rand::Rng as _;
        let rows = l2_normalize(z)?.to_vec2::<f64>()?;
        if rows.is_empty() {
            return Ok(());
        }
        let mut centers = self.var.as_tensor().to_vec2::<f64>()?;
        centers[0] = rows[rng.random_range(0..rows.len())].clone();
        let mut dist: Vec<f64> = rows.iter().map(|r| (1.0 - dot(r, &centers[0])).max(0.0)).collect();
        for c in 1..centers.len() {
            let total: f64 = dist.iter().map(|d| d * d).sum();
            if total <= 0.0 {
                break;
            }
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = rows.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                pick -= d * d;
                if pick < 0.0 {
                    chosen = i;
                    break;
                }
            }
            centers[c] = rows[chosen].clone();
            for (d, r) in dist.iter_mut().zip(&rows) {
                *d = d.min((1.0 - dot(r, &centers[c])).max(0.0));
            }
        }
        self.set_centers(lloyd(centers, &rows, iterations))
    }

    /// `iterations` spherical Lloyd steps on the rows of `z`, starting from
    /// the current prototypes so their indices keep their meaning. A
    /// prototype that attracts no row keeps its position.
    pub fn refine(&self, z: &Tensor, iterations: usize) -> Result<()> {
        let rows = l2_normalize(z)?.to_vec2::<f64>()?;
        let centers = self.var.as_tensor().to_vec2::<f64>()?;
        self.set_centers(lloyd(centers, &rows, iterations))
    }

    fn set_centers(&self, centers: Vec<Vec<f64>>) -> Result<()> {
        let flat: Vec<f64> = centers.into_iter().flatten().collect();
        self.var.set(&Tensor::from_vec(flat, self.var.dims(), &device())?)?;
        self.renormalize()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lloyd(mut centers: Vec<Vec<f64>>, rows: &[Vec<f64>], iterations: usize) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return centers;
    }
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; centers[0].len()]; centers.len()];
        for r in rows {
            let best = argmax(&centers.iter().map(|c| dot(r, c)).collect::<Vec<_>>());
            for (s, x) in sums[best].iter_mut().zip(r) {
                *s += x;
            }
        }
        for (c, s) in centers.iter_mut().zip(sums) {
            let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                *c = s.iter().map(|x| x / n).collect();
            }
        }
    }
    centers
}

fn prototype_logits(z: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    Ok((l2_normalize(z)?.matmul(&l2_normalize(prototypes)?.t()?)? / tau)?)
}

/// Soft assignment `[B, K]` of each row of `z` to the prototypes: a softmax
/// over all `K` of the cosine similarities divided by `tau`.
pub fn assign(z: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(&prototype_logits(z, prototypes, tau)?, D::Minus1)?)
}

/// Swapped-prediction consistency `[B]`: each view's log-assignment is
/// scored against the other view's assignment, held fixed as a target.
pub fn consistency_loss(z_n: &Tensor, z_m: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    let (q_n, q_m) = consistency_targets(z_n, z_m, prototypes, tau)?;
    consistency_with_targets(z_n, z_m, prototypes, &q_n, &q_m, tau)
}

/// Detached assignments `(q_n, q_m)` used as targets by [`consistency_loss`].
pub fn consistency_targets(z_n: &Tensor, z_m: &Tensor, prototypes: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    Ok((
        assign(z_n, prototypes, tau)?.detach(),
        assign(z_m, prototypes, tau)?.detach(),
    ))
}

/// [`consistency_loss`] with the targets supplied.
pub fn consistency_with_targets(
    z_n: &Tensor,
    z_m: &Tensor,
    prototypes: &Tensor,
    q_n: &Tensor,
    q_m: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let log_n = candle_nn::ops::log_softmax(&prototype_logits(z_n, prototypes, tau)?, D::Minus1)?;
    let log_m = candle_nn::ops::log_softmax(&prototype_logits(z_m, prototypes, tau)?, D::Minus1)?;
    let l_m = (q_n * &log_m)?.sum(1)?.neg()?;
    let l_n = (q_m * &log_n)?.sum(1)?.neg()?;
    Ok((l_m + l_n)?)
}

/// Gaussian weights over assignment distances, returned as log-weights:
/// `-(d - mean)^2 / (2 std^2)`, or all zeros when the spread is zero.
pub fn gaussian_weights(distances: &[f64]) -> Vec<f64> {
    let n = distances.len() as f64;
    if distances.is_empty() {
        return Vec::new();
    }
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    if var <= 1e-24 {
        return vec![0.0; distances.len()];
    }
    distances.iter().map(|d| -(d - mean).powi(2) / (2.0 * var)).collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-300)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct Reweighted {
    /// `[B]`, zero for anchors with an empty negative set.
    pub per_anchor: Tensor,
    pub skipped: usize,
}

/// The parts of the reweighted contrast computed without gradient.
#[derive(Debug, Clone)]
pub struct ReweightPlan {
    /// `[B, C]` log of `M_n w_nj` for kept negatives, a large negative
    /// number elsewhere. Columns are the rows of `z_m`, then the queue.
    pub log_weights: Tensor,
    /// Normalized queue vectors `[Q, h]`, if any.
    pub queue: Option<Tensor>,
    pub skipped: usize,
}

/// Reweighted contrast `[B]`.
///
/// Anchor `n` is `z_n[n]`, its positive `z_m[n]`. Candidate negatives are
/// the other rows of `z_m` and the queue; only those whose most probable
/// prototype differs from the anchor's are kept. Each kept negative `j` is
/// weighted by a Gaussian of the cosine distance between assignments, and
/// the weighted sum is scaled by `2|S| / Σ w`. Assignments, the negative set
/// and the weights are computed without gradient.
pub fn reweighted_contrast(
    z_n: &Tensor,
    z_m: &Tensor,
    queue: &RepresentationQueue,
    prototypes: &Tensor,
    tau: f64,
) -> Result<Reweighted> {
    let plan = reweight_plan(z_n, z_m, queue, prototypes, tau)?;
    Ok(Reweighted {
        per_anchor: reweighted_with_plan(z_n, z_m, &plan, tau)?,
        skipped: plan.skipped,
    })
}

pub fn reweight_plan(
    z_n: &Tensor,
    z_m: &Tensor,
    queue: &RepresentationQueue,
    prototypes: &Tensor,
    tau: f64,
) -> Result<ReweightPlan> {
    let b = z_n.dims2()?.0;
    let q_n = assign(z_n, prototypes, tau)?.to_vec2::<f64>()?;
    let mut cand_q = assign(z_m, prototypes, tau)?.to_vec2::<f64>()?;
    let mut cand_top: Vec<usize> = cand_q.iter().map(|q| argmax(q)).collect();
    let mut queue_vectors = None;
    if let Some(qz) = queue.vectors()? {
        let qq = queue
            .assignments()?
            .ok_or_else(|| Error::InvalidArgument("spatial queue entries need assignments".into()))?
            .to_vec2::<f64>()?;
        cand_top.extend(queue.tops().into_iter().map(|t| t.unwrap_or(0)));
        cand_q.extend(qq);
        queue_vectors = Some(l2_normalize(&qz)?.detach());
    }
    let c = cand_q.len();

    let mut log_w = vec![EXCLUDED; b * c];
    let mut skipped = 0;
    for n in 0..b {
        let top_n = argmax(&q_n[n]);
        let members: Vec<usize> = (0..c).filter(|&j| j != n && cand_top[j] != top_n).collect();
        if members.is_empty() {
            skipped += 1;
            continue;
        }
        let d: Vec<f64> = members.iter().map(|&j| cosine_distance(&q_n[n], &cand_q[j])).collect();
        let lw = gaussian_weights(&d);
        let log_m = (2.0 * members.len() as f64).ln() - log_sum_exp(&lw);
        for (&j, w) in members.iter().zip(lw) {
            log_w[n * c + j] = log_m + w;
        }
    }
    Ok(ReweightPlan {
        log_weights: Tensor::from_vec(log_w, (b, c), &device())?,
        queue: queue_vectors,
        skipped,
    })
}

/// [`reweighted_contrast`] under a fixed plan.
pub fn reweighted_with_plan(z_n: &Tensor, z_m: &Tensor, plan: &ReweightPlan, tau: f64) -> Result<Tensor> {
    let positives = l2_normalize(z_m)?;
    let candidates = match &plan.queue {
        Some(q) => Tensor::cat(&[&positives, q], 0)?,
        None => positives.clone(),
    };
    let anchors = l2_normalize(z_n)?;
    let pos = ((&anchors * &positives)?.sum_keepdim(1)? / tau)?;
    let neg = ((anchors.matmul(&candidates.t()?)? / tau)? + &plan.log_weights)?;
    let logits = Tensor::cat(&[&pos, &neg], 1)?;
    Ok((logits.log_sum_exp(1)? - pos.squeeze(1)?)?)
}

#[derive(Debug, Clone)]
pub struct SpatialLoss {
    pub consistency: Tensor,
    pub reweighted: Tensor,
    /// Scalar batch mean of `eta_c * consistency + reweighted`.
    pub total: Tensor,
    pub skipped: usize,
}

pub fn spatial_loss(
    z_n: &Tensor,
    z_m: &Tensor,
    queue: &RepresentationQueue,
    prototypes: &super::PrototypeBank,
    tau: f64,
    eta_c: f64,
) -> Result<SpatialLoss> {
    let consistency = consistency_loss(z_n, z_m, prototypes.vectors(), tau)?;
    let r = reweighted_contrast(z_n, z_m, queue, prototypes.vectors(), tau)?;
    let total = ((&consistency * eta_c)? + &r.per_anchor)?.mean_all()?;
    Ok(SpatialLoss {
        consistency,
        reweighted: r.per_anchor,
        total,
        skipped: r.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DTYPE;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let w = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), w), &device()).unwrap()
    }

    #[test]
    fn two_prototype_assignment() {
        let q = assign(&t2(&[&[1.0, 0.0]]), &t2(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert!((q[0][0] - 0.7310585786300049).abs() < 1e-12);
        assert!((q[0][1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn equidistant_assignment_is_uniform() {
        let protos = t2(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let q = assign(&t2(&[&[1.0, 1.0, 1.0]]), &protos, 0.1).unwrap().to_vec2::<f64>().unwrap();
        for v in &q[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_of_identical_views_is_twice_the_entropy() {
        let protos = t2(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]);
        let z = t2(&[&[0.3, 0.9]]);
        let q = assign(&z, &protos, 0.5).unwrap().to_vec2::<f64>().unwrap();
        let h: f64 = -q[0].iter().map(|p| p * p.ln()).sum::<f64>();
        let l = consistency_loss(&z, &z, &protos, 0.5).unwrap().to_vec1::<f64>().unwrap();
        assert!((l[0] - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn empty_negative_set_gives_zero() {
        let protos = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z_n = t2(&[&[1.0, 0.1], &[1.0, 0.2]]);
        let z_m = t2(&[&[1.0, 0.15], &[0.9, 0.2]]);
        let r = reweighted_contrast(&z_n, &z_m, &RepresentationQueue::new(4), &protos, 0.1).unwrap();
        assert_eq!(r.skipped, 2);
        assert_eq!(r.per_anchor.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_weight_peaks_at_the_mean() {
        let lw = gaussian_weights(&[0.1, 0.2, 0.3]);
        assert!(lw[1].abs() < 1e-12);
        assert!(lw[0] < 0.0 && lw[2] < 0.0);
        assert_eq!(gaussian_weights(&[0.4, 0.4]), vec![0.0, 0.0]);
    }

    #[test]
    fn prototypes_are_unit_after_renormalize() {
        let mut store = ParamStore::new();
        let bank = PrototypeBank::new(&mut store, 3, 4, &mut crate::nn::seeded_rng(0)).unwrap();
        bank.var().set(&(bank.vectors() * 3.0).unwrap()).unwrap();
        bank.renormalize().unwrap();
        let n = bank.vectors().sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(n.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let _ = DTYPE;
    }
}
