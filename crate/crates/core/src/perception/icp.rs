//! Point-to-point ICP against a sampled model prior.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::geometry::{ModelPrior, PointCloud, Pose6, Vec3};

use super::PerceptionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IcpInit {
    /// Model centroid placed on the observed centroid.
    Centroid,
    /// Observed centroid pushed back along the viewing ray by half the model's depth.
    /// A single view only sees the near surface, so its centroid sits in front of the object's.
    #[default]
    ViewCentroid,
    /// Model centroid placed on the observed point closest to the centroid.
    MedianPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub max_correspondence_dist: f64,
    pub model_sample_count: usize,
    pub init: IcpInit,
    /// Independent starts spread over a full turn about the model's z axis; the lowest
    /// residual wins. One start is classical ICP. More help with near-symmetric models,
    /// whose spin otherwise stalls in a nearest-neighbour local minimum.
    pub spin_starts: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-6,
            max_correspondence_dist: 0.02,
            model_sample_count: 2000,
            init: IcpInit::ViewCentroid,
            spin_starts: 1,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.max_iterations == 0 || self.model_sample_count == 0 || self.spin_starts == 0 {
            return Err(PerceptionError::Config("ICP iteration, sample and start counts must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0 && self.max_correspondence_dist > 0.0) {
            return Err(PerceptionError::Config("ICP tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Model frame to the observed cloud's frame.
    pub pose: Pose6,
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual at the initial pose, then after every iteration.
    pub residual_history: Vec<f64>,
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<Pose6> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    let r = v * u.transpose();
    Some(Pose6::from_rotation_matrix(&r, cd - r * cs))
}

/// Sum of squared distances after applying `pose` to `src`.
pub fn alignment_error(pose: &Pose6, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| (pose.transform_point(s) - d).norm_squared())
        .sum()
}

pub struct Registration<'a> {
    model: &'a [Vec3],
    tree: ImmutableKdTree<f64, 3>,
}

impl<'a> Registration<'a> {
    pub fn new(model: &'a ModelPrior, sample_count: usize) -> Self {
        let model = &model.vertices[..sample_count.min(model.vertices.len())];
        let pts: Vec<[f64; 3]> = model.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            model,
            tree: ImmutableKdTree::new_from_slice(&pts),
        }
    }

    /// Nearest model index and squared distance for every observed point under `pose`.
    fn correspondences(&self, observed: &[Vec3], pose: &Pose6) -> Vec<(usize, f64)> {
        let inv = pose.inverse();
        observed
            .iter()
            .map(|p| {
                let q = inv.transform_point(p);
                let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
                (nn.item as usize, nn.distance)
            })
            .collect()
    }

    pub fn run(&self, observed: &PointCloud, init: Pose6, cfg: &IcpConfig) -> Result<IcpResult, PerceptionError> {
        let obs = &observed.points;
        let dmax2 = cfg.max_correspondence_dist.powi(2);
        // Truncated RMS: outliers count at the rejection radius, which keeps the residual monotone.
        let residual = |c: &[(usize, f64)]| (c.iter().map(|&(_, d2)| d2.min(dmax2)).sum::<f64>() / c.len() as f64).sqrt();

        let mut pose = init;
        let mut corr = self.correspondences(obs, &pose);
        let mut history = vec![residual(&corr)];
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            let (src, dst): (Vec<Vec3>, Vec<Vec3>) = corr
                .iter()
                .zip(obs)
                .filter(|((_, d2), _)| *d2 <= dmax2)
                .map(|(&(j, _), p)| (self.model[j], *p))
                .unzip();
            if src.len() < 3 {
                return Err(PerceptionError::DegenerateRegistration { inliers: src.len() });
            }
            let next = kabsch(&src, &dst).ok_or(PerceptionError::DegenerateRegistration { inliers: src.len() })?;
            let next_corr = self.correspondences(obs, &next);
            let r = residual(&next_corr);
            iterations += 1;
            let prev = *history.last().expect("history seeded");
            if r > prev {
                // floating-point noise at the optimum; keep the better pose
                history.push(prev);
                converged = true;
                break;
            }
            pose = next;
            corr = next_corr;
            history.push(r);
            if (prev - r).abs() < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
        Ok(IcpResult {
            pose,
            rms_residual: *history.last().expect("history seeded"),
            iterations,
            converged,
            residual_history: history,
        })
    }
}

pub fn initial_pose(observed: &PointCloud, model: &ModelPrior, init: IcpInit) -> Option<Pose6> {
    let c = observed.centroid()?;
    let anchor = match init {
        IcpInit::Centroid => c,
        IcpInit::ViewCentroid => {
            let (lo, hi) = model
                .vertices
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.z), hi.max(v.z)));
            c + c.try_normalize(1e-12).unwrap_or_else(Vec3::z) * ((hi - lo) / 2.0)
        }
        IcpInit::MedianPoint => *observed
            .points
            .iter()
            .min_by(|a, b| (*a - c).norm_squared().total_cmp(&(*b - c).norm_squared()))?,
    };
    Some(Pose6::from_translation(anchor - model.centroid()))
}

pub fn icp_estimate(observed: &PointCloud, model: &ModelPrior, cfg: &IcpConfig) -> Result<IcpResult, PerceptionError> {
    cfg.validate()?;
    let init = initial_pose(observed, model, cfg.init).ok_or(PerceptionError::EmptyCloud)?;
    icp_estimate_from(observed, model, cfg, init)
}

pub fn icp_estimate_from(
    observed: &PointCloud,
    model: &ModelPrior,
    cfg: &IcpConfig,
    init: Pose6,
) -> Result<IcpResult, PerceptionError> {
    cfg.validate()?;
    if observed.is_empty() {
        return Err(PerceptionError::EmptyCloud);
    }
    if !model.is_pose_estimable() {
        return Err(PerceptionError::Config(format!("model `{}` is degenerate", model.model_id)));
    }
    let reg = Registration::new(model, cfg.model_sample_count);
    let c = model.centroid();
    let mut best: Option<IcpResult> = None;
    for k in 0..cfg.spin_starts {
        let angle = std::f64::consts::TAU * k as f64 / cfg.spin_starts as f64;
        let spin = Pose6::from_translation(c)
            .compose(&Pose6::from_axis_angle(Vec3::z(), angle, Vec3::zeros()))
            .compose(&Pose6::from_translation(-c));
        let r = match reg.run(observed, init.compose(&spin), cfg) {
            Ok(r) => r,
            Err(e) if best.is_none() && k + 1 == cfg.spin_starts => return Err(e),
            Err(_) => continue,
        };
        if best.as_ref().is_none_or(|b| r.rms_residual < b.rms_residual) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}
