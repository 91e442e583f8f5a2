//! Domain prototypes: per-task style statistics and SVD noise residuals,
//! clustered with KMeans and kept in a store that only ever grows. Each
//! style prototype carries a running mean of the training MAE observed when
//! it was used, which drives inference simplification.

use crate::augment::sorted_svd;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::nn::tensor::Tensor;
use crate::synth::ClipSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Channel-wise (mean, std) centroid of shallow-feature statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePrototype {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub task_id: usize,
    pub cluster_id: usize,
    /// Running mean of the HR MAE (bpm) recorded for this prototype.
    pub mae_mean: f64,
    pub mae_count: usize,
}

/// Centroid of SVD-tail components of high-level features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePrototype {
    pub n: Tensor,
    pub task_id: usize,
    pub cluster_id: usize,
}

/// All prototypes extracted so far, across completed tasks. Prototypes are
/// immutable after extraction except for their MAE statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    styles: Vec<StylePrototype>,
    noises: Vec<NoisePrototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty() && self.noises.is_empty()
    }

    pub fn styles(&self) -> &[StylePrototype] {
        &self.styles
    }

    pub fn noises(&self) -> &[NoisePrototype] {
        &self.noises
    }

    pub fn push_task(&mut self, styles: Vec<StylePrototype>, noises: Vec<NoisePrototype>) {
        self.styles.extend(styles);
        self.noises.extend(noises);
    }

    /// Record one clip-level HR MAE against a style prototype. Maintains the
    /// exact running mean of all recorded values.
    pub fn record_mae(&mut self, prototype_id: usize, clip_mae: f64) -> Result<()> {
        let p = self
            .styles
            .get_mut(prototype_id)
            .ok_or(Error::UnknownPrototype(prototype_id))?;
        let count = p.mae_count as f64;
        p.mae_mean = (p.mae_mean * count + clip_mae) / (count + 1.0);
        p.mae_count += 1;
        Ok(())
    }
}

/// Channel-wise mean and population standard deviation of a `[C, ...]`
/// feature over all of its temporal-spatial positions.
pub fn style_stats(h: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = h.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch("expected [C, ...]".into()));
    }
    let c = shape[0];
    let p: usize = shape[1..].iter().product();
    if p < 2 {
        return Err(Error::ShapeMismatch(
            "need at least 2 positions per channel".into(),
        ));
    }
    let data = h.data();
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    for ci in 0..c {
        let chunk = &data[ci * p..(ci + 1) * p];
        let mean = chunk.iter().sum::<f64>() / p as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        mu[ci] = mean;
        sigma[ci] = var.sqrt();
    }
    Ok((mu, sigma))
}

/// Extract the noise component of a high-level feature: reconstruct with the
/// first `alpha` singular values zeroed (the SVD tail).
pub fn extract_noise(z: &Tensor, alpha: usize) -> Result<Tensor> {
    let &[rows, cols] = z.shape() else {
        return Err(Error::ShapeMismatch("expected [C2, T2]".into()));
    };
    let r = rows.min(cols);
    if alpha > r {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} exceeds min(C2, T2) = {r}"
        )));
    }
    let (u, s, vt) = sorted_svd(z)?;
    let mut out = Tensor::zeros(&[rows, cols]);
    let od = out.data_mut();
    for i in alpha..r {
        let si = s[i];
        if si == 0.0 {
            continue;
        }
        for rr in 0..rows {
            let urs = u[(rr, i)] * si;
            for cc in 0..cols {
                od[rr * cols + cc] += urs * vt[(i, cc)];
            }
        }
    }
    Ok(out)
}

/// Complement of [`extract_noise`]: keep only the first `alpha` singular
/// components (the signal part).
pub fn keep_signal(z: &Tensor, alpha: usize) -> Result<Tensor> {
    let &[rows, cols] = z.shape() else {
        return Err(Error::ShapeMismatch("expected [C2, T2]".into()));
    };
    let r = rows.min(cols);
    if alpha > r {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} exceeds min(C2, T2) = {r}"
        )));
    }
    let (u, s, vt) = sorted_svd(z)?;
    let mut out = Tensor::zeros(&[rows, cols]);
    let od = out.data_mut();
    for i in 0..alpha {
        let si = s[i];
        for rr in 0..rows {
            let urs = u[(rr, i)] * si;
            for cc in 0..cols {
                od[rr * cols + cc] += urs * vt[(i, cc)];
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded KMeans with kmeans++ initialization, at most 100 Lloyd iterations
/// per restart, 10 restarts keeping the lowest inertia, and empty clusters
/// re-seeded from the farthest point. If there are fewer points than K, K is
/// clipped to the number of points.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no features to cluster".into()));
    }
    let k = k.min(points.len()).max(1);
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("inconsistent feature dims".into()));
    }

    const RESTARTS: usize = 10;
    const MAX_ITERS: usize = 100;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;

    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        // kmeans++ init
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut chosen = vec![false; points.len()];
        let first = rng.gen_range(0..points.len());
        chosen[first] = true;
        centroids.push(points[first].clone());
        while centroids.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| {
                    centroids
                        .iter()
                        .map(|c| sq_dist(p, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            let idx = if total > 0.0 {
                let mut thresh = rng.gen::<f64>() * total;
                let mut pick = points.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if thresh <= d {
                        pick = i;
                        break;
                    }
                    thresh -= d;
                }
                pick
            } else {
                // all remaining distances are zero (duplicate points): pick
                // uniformly among the unchosen indices.
                let remaining: Vec<usize> =
                    (0..points.len()).filter(|&i| !chosen[i]).collect();
                if remaining.is_empty() {
                    rng.gen_range(0..points.len())
                } else {
                    remaining[rng.gen_range(0..remaining.len())]
                }
            };
            chosen[idx] = true;
            centroids.push(points[idx].clone());
        }

        let mut assign = vec![0usize; points.len()];
        for _ in 0..MAX_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bi = 0;
                let mut bd = f64::INFINITY;
                for (ci, c) in centroids.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < bd {
                        bd = d;
                        bi = ci;
                    }
                }
                if assign[i] != bi {
                    assign[i] = bi;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for ci in 0..k {
                if counts[ci] == 0 {
                    // re-seed from the farthest point
                    let far = (0..points.len())
                        .max_by(|&a, &b| {
                            sq_dist(&points[a], &centroids[assign[a]])
                                .partial_cmp(&sq_dist(&points[b], &centroids[assign[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centroids[ci] = points[far].clone();
                    assign[far] = ci;
                    changed = true;
                } else {
                    for (c, s) in centroids[ci].iter_mut().zip(&sums[ci]) {
                        *c = s / counts[ci] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let inertia: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| sq_dist(p, &centroids[assign[i]]))
            .sum();
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, centroids));
        }
    }
    Ok(best.unwrap().1)
}

/// Cluster per-clip style features into K prototypes. Features are clustered
/// as concatenated (mu || sigma) vectors with per-dimension standardization
/// (mu and sigma scales differ), de-standardized afterwards; centroid sigmas
/// are clamped to >= 0.
pub fn cluster_style_features(
    features: &[(Vec<f64>, Vec<f64>)],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no style features".into()));
    }
    let c = features[0].0.len();
    let dim = 2 * c;
    let joined: Vec<Vec<f64>> = features
        .iter()
        .map(|(mu, sigma)| {
            let mut v = Vec::with_capacity(dim);
            v.extend_from_slice(mu);
            v.extend_from_slice(sigma);
            v
        })
        .collect();
    // per-dimension standardization
    let n = joined.len() as f64;
    let mut means = vec![0.0; dim];
    let mut stds = vec![0.0; dim];
    for d in 0..dim {
        let m: f64 = joined.iter().map(|v| v[d]).sum::<f64>() / n;
        let var: f64 = joined.iter().map(|v| (v[d] - m) * (v[d] - m)).sum::<f64>() / n;
        means[d] = m;
        stds[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let standardized: Vec<Vec<f64>> = joined
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(d, x)| (x - means[d]) / stds[d])
                .collect()
        })
        .collect();
    let centroids = kmeans(&standardized, k, seed)?;
    Ok(centroids
        .into_iter()
        .map(|cen| {
            let mut mu = Vec::with_capacity(c);
            let mut sigma = Vec::with_capacity(c);
            for (d, x) in cen.into_iter().enumerate() {
                let v = x * stds[d] + means[d];
                if d < c {
                    mu.push(v);
                } else {
                    sigma.push(v.max(0.0));
                }
            }
            (mu, sigma)
        })
        .collect())
}

/// Cluster per-clip noise features (flattened matrices, plain Euclidean).
pub fn cluster_noise_features(features: &[Tensor], k: usize, seed: u64) -> Result<Vec<Tensor>> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no noise features".into()));
    }
    let shape = features[0].shape().to_vec();
    let flat: Vec<Vec<f64>> = features.iter().map(|t| t.data().to_vec()).collect();
    let centroids = kmeans(&flat, k, seed)?;
    Ok(centroids
        .into_iter()
        .map(|c| Tensor::from_vec(&shape, c))
        .collect())
}

/// Extract per-clip style and noise features from a trained model in
/// evaluation mode, cluster them to (at most) K prototypes each, and append
/// the result to the store tagged with `task_id`.
pub fn extract_task_prototypes(
    model: &mut Model,
    train_set: &[ClipSample],
    k: usize,
    alpha: usize,
    task_id: usize,
    seed: u64,
    store: &mut PrototypeStore,
) -> Result<(Vec<StylePrototype>, Vec<NoisePrototype>)> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot extract prototypes from an empty training set".into(),
        ));
    }
    let mut style_feats = Vec::with_capacity(train_set.len());
    let mut noise_feats = Vec::with_capacity(train_set.len());
    for clip in train_set {
        let out = model.forward(&clip.video, &ForwardOptions::eval())?;
        style_feats.push(style_stats(&out.taps.h)?);
        noise_feats.push(extract_noise(&out.taps.z, alpha)?);
    }
    let style_centroids = cluster_style_features(&style_feats, k, seed)?;
    let noise_centroids = cluster_noise_features(&noise_feats, k, seed.wrapping_add(1))?;
    let styles: Vec<StylePrototype> = style_centroids
        .into_iter()
        .enumerate()
        .map(|(i, (mu, sigma))| StylePrototype {
            mu,
            sigma,
            task_id,
            cluster_id: i,
            mae_mean: 0.0,
            mae_count: 0,
        })
        .collect();
    let noises: Vec<NoisePrototype> = noise_centroids
        .into_iter()
        .enumerate()
        .map(|(i, n)| NoisePrototype {
            n,
            task_id,
            cluster_id: i,
        })
        .collect();
    store.push_task(styles.clone(), noises.clone());
    Ok((styles, noises))
}

/// Squared Euclidean distance between a clip's style feature and a prototype
/// in the concatenated (mu || sigma) space.
pub fn style_distance(mu: &[f64], sigma: &[f64], proto: &StylePrototype) -> f64 {
    sq_dist(mu, &proto.mu) + sq_dist(sigma, &proto.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        num / b.sq_norm().sqrt().max(1e-12)
    }

    #[test]
    fn style_stats_constant_and_two_point() {
        let mut h = Tensor::zeros(&[2, 2, 2, 2]);
        h.data_mut()[..8].iter_mut().for_each(|v| *v = 3.0);
        h.data_mut()[8..].iter_mut().for_each(|v| *v = -1.0);
        let (mu, sigma) = style_stats(&h).unwrap();
        assert_eq!(mu, vec![3.0, -1.0]);
        assert_eq!(sigma, vec![0.0, 0.0]);

        // channel with values {0, 2} equally -> mu 1, sigma 1
        let h = Tensor::from_vec(&[1, 4], vec![0.0, 2.0, 0.0, 2.0]);
        let (mu, sigma) = style_stats(&h).unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-12);
        assert!((sigma[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_stats_matches_flatten_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[4, 2, 3, 3], 1.7, &mut rng);
        let (mu, sigma) = style_stats(&h).unwrap();
        let p = 2 * 3 * 3;
        for c in 0..4 {
            let chunk: Vec<f64> = h.data()[c * p..(c + 1) * p].to_vec();
            let m = chunk.iter().sum::<f64>() / p as f64;
            let v = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p as f64;
            assert!((mu[c] - m).abs() < 1e-6);
            assert!((sigma[c] - v.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn style_stats_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let (mu0, sigma0) = style_stats(&h).unwrap();
        // reverse positions within each channel
        let p = 8;
        let mut data = h.data().to_vec();
        for c in 0..3 {
            data[c * p..(c + 1) * p].reverse();
        }
        let h2 = Tensor::from_vec(&[3, 2, 2, 2], data);
        let (mu1, sigma1) = style_stats(&h2).unwrap();
        for c in 0..3 {
            assert!((mu0[c] - mu1[c]).abs() < 1e-12);
            assert!((sigma0[c] - sigma1[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_noise_identity_and_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let n0 = extract_noise(&z, 0).unwrap();
        assert!(rel_frob(&n0, &z) < 1e-5, "alpha=0 must return z");
        let nfull = extract_noise(&z, 4).unwrap();
        assert!(
            nfull.sq_norm().sqrt() < 1e-8 * z.sq_norm().sqrt(),
            "alpha=min dims must return 0"
        );
    }

    #[test]
    fn extract_noise_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = Tensor::randn(&[5], 1.0, &mut rng);
        let v = Tensor::randn(&[4], 1.0, &mut rng);
        let mut z = Tensor::zeros(&[5, 4]);
        {
            let zd = z.data_mut();
            for r in 0..5 {
                for c in 0..4 {
                    zd[r * 4 + c] = 2.5 * u.data()[r] * v.data()[c];
                }
            }
        }
        let n = extract_noise(&z, 1).unwrap();
        assert!(
            n.sq_norm().sqrt() < 1e-6 * z.sq_norm().sqrt(),
            "rank-1 residual after removing 1 component must vanish"
        );
    }

    #[test]
    fn energy_split_and_monotone_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let z = Tensor::randn(&[8, 6], 1.0, &mut rng);
            let mut prev_norm = f64::INFINITY;
            for alpha in 0..=6 {
                let n = extract_noise(&z, alpha).unwrap();
                let s = keep_signal(&z, alpha).unwrap();
                let mut sum = n.clone();
                sum.add_assign(&s);
                assert!(rel_frob(&sum, &z) < 1e-5, "energy split at alpha={alpha}");
                let norm = n.sq_norm().sqrt();
                assert!(
                    norm <= prev_norm + 1e-9,
                    "noise norm must be non-increasing in alpha"
                );
                prev_norm = norm;
            }
        }
    }

    #[test]
    fn extract_noise_rejects_bad_input() {
        let mut z = Tensor::zeros(&[3, 3]);
        z.data_mut()[0] = f64::NAN;
        assert!(extract_noise(&z, 1).is_err());
        let z = Tensor::zeros(&[3, 3]);
        assert!(extract_noise(&z, 4).is_err());
    }

    #[test]
    fn kmeans_exact_k_returns_points() {
        let points = vec![
            vec![0.0, 0.0],
            vec![1.0, 5.0],
            vec![-3.0, 2.0],
        ];
        let mut centroids = kmeans(&points, 3, 42).unwrap();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let mut want = points.clone();
        want.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (c, w) in centroids.iter().zip(&want) {
            assert!(sq_dist(c, w) < 1e-18);
        }
    }

    #[test]
    fn kmeans_identical_points() {
        let points = vec![vec![2.0, -1.0]; 6];
        let centroids = kmeans(&points, 3, 1).unwrap();
        for c in &centroids {
            assert!(sq_dist(c, &points[0]) < 1e-18);
        }
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.3;
        let n_per = 60;
        let centers = [vec![0.0, 0.0], vec![6.0, 6.0]];
        let mut points = Vec::new();
        for center in &centers {
            for _ in 0..n_per {
                points.push(vec![
                    center[0] + sigma * crate::nn::tensor::normal_draw(&mut rng),
                    center[1] + sigma * crate::nn::tensor::normal_draw(&mut rng),
                ]);
            }
        }
        let mut centroids = kmeans(&points, 2, 9).unwrap();
        centroids.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let tol = 3.0 * sigma / (n_per as f64).sqrt();
        for (c, want) in centroids.iter().zip(&centers) {
            assert!(
                (c[0] - want[0]).abs() < tol && (c[1] - want[1]).abs() < tol,
                "centroid {c:?} vs blob mean {want:?} (tol {tol})"
            );
        }
    }

    #[test]
    fn kmeans_clips_k() {
        let points = vec![vec![1.0], vec![2.0]];
        assert_eq!(kmeans(&points, 8, 3).unwrap().len(), 2);
        assert!(kmeans(&[], 3, 0).is_err());
    }

    #[test]
    fn style_clustering_destandardizes_and_clamps() {
        let features = vec![
            (vec![10.0, -5.0], vec![0.1, 2.0]),
            (vec![10.2, -5.1], vec![0.12, 2.1]),
            (vec![-10.0, 5.0], vec![0.5, 0.01]),
            (vec![-10.1, 5.2], vec![0.52, 0.02]),
        ];
        let centroids = cluster_style_features(&features, 2, 5).unwrap();
        assert_eq!(centroids.len(), 2);
        for (mu, sigma) in &centroids {
            assert_eq!(mu.len(), 2);
            assert!(sigma.iter().all(|&s| s >= 0.0));
        }
        // centroids must live near the two feature groups in mu space
        let mut mus: Vec<f64> = centroids.iter().map(|(mu, _)| mu[0]).collect();
        mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((mus[0] - (-10.05)).abs() < 0.1);
        assert!((mus[1] - 10.1).abs() < 0.1);
    }

    #[test]
    fn record_mae_running_mean() {
        let mut store = PrototypeStore::new();
        store.push_task(
            vec![StylePrototype {
                mu: vec![0.0],
                sigma: vec![1.0],
                task_id: 0,
                cluster_id: 0,
                mae_mean: 0.0,
                mae_count: 0,
            }],
            vec![],
        );
        store.record_mae(0, 2.0).unwrap();
        store.record_mae(0, 4.0).unwrap();
        let p = &store.styles()[0];
        assert_eq!(p.mae_count, 2);
        assert!((p.mae_mean - 3.0).abs() < 1e-12);
        assert!(store.record_mae(5, 1.0).is_err());

        // 1000 records: running mean equals the batch mean within 1e-9
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 10.0).collect();
        let mut store2 = PrototypeStore::new();
        store2.push_task(
            vec![StylePrototype {
                mu: vec![0.0],
                sigma: vec![1.0],
                task_id: 0,
                cluster_id: 0,
                mae_mean: 0.0,
                mae_count: 0,
            }],
            vec![],
        );
        for &v in &values {
            store2.record_mae(0, v).unwrap();
        }
        let batch_mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((store2.styles()[0].mae_mean - batch_mean).abs() < 1e-9);
    }

    #[test]
    fn fresh_prototype_has_no_records() {
        let p = StylePrototype {
            mu: vec![0.0],
            sigma: vec![1.0],
            task_id: 0,
            cluster_id: 0,
            mae_mean: 0.0,
            mae_count: 0,
        };
        assert_eq!(p.mae_count, 0, "no records -> ineligible for simplification");
    }
}
