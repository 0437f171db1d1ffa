//! Orientation decoding from soft classification, position error and the
//! ESA pose score.

use std::io::{Read, Write};
use std::ops::{Mul, Neg};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("quaternion is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("ground-truth translation has zero norm")]
    ZeroTranslation,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid orientation bins: {0}")]
    Bins(String),
    #[error("no samples")]
    Empty,
    #[error("poses csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Rotation quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Quaternion<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    /// Rotation by `angle` radians about `axis` (normalized here).
    pub fn from_axis_angle(axis: [T; 3], angle: T) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let half = angle / T::lit(2.0);
        let s = half.sin() / n;
        Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    pub fn dot(&self, o: &Self) -> T {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Self {
        self.scale(T::one() / self.norm())
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    fn is_finite(&self) -> bool {
        [self.w, self.x, self.y, self.z].iter().all(|v| v.is_finite())
    }

    fn check_unit(&self) -> Result<(), PoseError> {
        if !self.is_finite() {
            return Err(PoseError::NonFinite("quaternion"));
        }
        let n = self.norm();
        if (n - T::one()).abs() > T::lit(1e-6) {
            return Err(PoseError::NotUnit(n.as_f64()));
        }
        Ok(())
    }

    /// Uniformly distributed random rotation.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        Self::new(
            T::lit(a * (tau * u2).sin()),
            T::lit(a * (tau * u2).cos()),
            T::lit(b * (tau * u3).sin()),
            T::lit(b * (tau * u3).cos()),
        )
    }
}

impl<T: Scalar> Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

/// Hamilton product.
impl<T: Scalar> Mul for Quaternion<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Ground truth of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample<T> {
    pub q_gt: Quaternion<T>,
    pub t_gt: [T; 3],
}

impl<T: Scalar> PoseSample<T> {
    pub fn new(q_gt: Quaternion<T>, t_gt: [T; 3]) -> Result<Self, PoseError> {
        q_gt.check_unit()?;
        if t_gt.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::NonFinite("translation"));
        }
        if norm3(&t_gt) == T::zero() {
            return Err(PoseError::ZeroTranslation);
        }
        Ok(Self { q_gt, t_gt })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate<T> {
    pub q: Quaternion<T>,
    pub t: [T; 3],
}

/// Probability distribution over a set of orientation classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationBins<T> {
    pub bins: Vec<Quaternion<T>>,
    pub probs: Vec<T>,
}

impl<T: Scalar> OrientationBins<T> {
    pub fn new(bins: Vec<Quaternion<T>>, probs: Vec<T>) -> Result<Self, PoseError> {
        if bins.is_empty() || bins.len() != probs.len() {
            return Err(PoseError::Bins(format!("{} bins, {} probabilities", bins.len(), probs.len())));
        }
        for q in &bins {
            q.check_unit()?;
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(PoseError::Bins("probabilities must be finite and non-negative".into()));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > T::lit(1e-6) {
            return Err(PoseError::Bins(format!("probabilities sum to {sum}")));
        }
        Ok(Self { bins, probs })
    }

    /// Softmax over logits.
    pub fn from_logits(bins: Vec<Quaternion<T>>, logits: &[T]) -> Result<Self, PoseError> {
        let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        Self::new(bins, e.into_iter().map(|v| v / s).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedOrientation<T> {
    pub q: Quaternion<T>,
    /// The weighted sum degenerated and the most likely bin was returned.
    pub fallback: bool,
}

/// Sign-aligns every bin to the most likely one, takes the
/// probability-weighted sum and renormalizes.
pub fn decode_orientation<T: Scalar>(b: &OrientationBins<T>) -> DecodedOrientation<T> {
    let best = b
        .probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > b.probs[best] { i } else { best });
    let anchor = b.bins[best];
    let mut acc = Quaternion::new(T::zero(), T::zero(), T::zero(), T::zero());
    for (q, &p) in b.bins.iter().zip(&b.probs) {
        let q = if q.dot(&anchor) < T::zero() { -*q } else { *q };
        acc = Quaternion::new(acc.w + q.w * p, acc.x + q.x * p, acc.y + q.y * p, acc.z + q.z * p);
    }
    if acc.norm() < T::lit(1e-9) {
        return DecodedOrientation { q: anchor, fallback: true };
    }
    DecodedOrientation { q: acc.normalized(), fallback: false }
}

/// Angle of the rotation between two unit quaternions, in degrees, in
/// `[0, 180]`. Equals `2*acos(|<q_est, q_gt>|)`; evaluated through `atan2`
/// of the relative rotation, which stays accurate for small angles.
pub fn orientation_error<T: Scalar>(q_est: &Quaternion<T>, q_gt: &Quaternion<T>) -> Result<T, PoseError> {
    q_est.check_unit()?;
    q_gt.check_unit()?;
    let r = q_gt.conj() * *q_est;
    let v = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    Ok((T::lit(2.0) * v.atan2(r.w.abs())).to_degrees())
}

fn norm3<T: Scalar>(v: &[T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `(||t_est - t_gt||, ||t_est - t_gt|| / ||t_gt||)`.
pub fn position_error<T: Scalar>(t_est: &[T; 3], t_gt: &[T; 3]) -> Result<(T, T), PoseError> {
    if t_est.iter().chain(t_gt).any(|v| !v.is_finite()) {
        return Err(PoseError::NonFinite("translation"));
    }
    let n = norm3(t_gt);
    if n == T::zero() {
        return Err(PoseError::ZeroTranslation);
    }
    let d = [t_est[0] - t_gt[0], t_est[1] - t_gt[1], t_est[2] - t_gt[2]];
    let e = norm3(&d);
    Ok((e, e / n))
}

/// Per-sample or mean pose errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics<T> {
    #[serde(rename = "ESA score")]
    pub esa: T,
    #[serde(rename = "e_q (°)")]
    pub e_q_deg: T,
    #[serde(rename = "e_t (m)")]
    pub e_t_m: T,
    #[serde(rename = "e_t (normalized)")]
    pub e_t_norm: T,
}

pub fn pose_metrics<T: Scalar>(gt: &PoseSample<T>, est: &PoseEstimate<T>) -> Result<PoseMetrics<T>, PoseError> {
    let e_q_deg = orientation_error(&est.q, &gt.q_gt)?;
    let (e_t_m, e_t_norm) = position_error(&est.t, &gt.t_gt)?;
    Ok(PoseMetrics { esa: e_q_deg.to_radians() + e_t_norm, e_q_deg, e_t_m, e_t_norm })
}

/// Mean of the per-sample scores `e_q (rad) + e_t / ||t_gt||`, alongside
/// mean `e_q` in degrees and mean `e_t` in meters.
pub fn esa_score<T: Scalar>(samples: &[(PoseSample<T>, PoseEstimate<T>)]) -> Result<PoseMetrics<T>, PoseError> {
    if samples.is_empty() {
        return Err(PoseError::Empty);
    }
    let per: Vec<PoseMetrics<T>> = samples.iter().map(|(g, e)| pose_metrics(g, e)).collect::<Result<_, _>>()?;
    let n = T::from_int(per.len() as i64);
    let mean = |f: fn(&PoseMetrics<T>) -> T| per.iter().map(f).sum::<T>() / n;
    Ok(PoseMetrics {
        esa: mean(|m| m.esa),
        e_q_deg: mean(|m| m.e_q_deg),
        e_t_m: mean(|m| m.e_t_m),
        e_t_norm: mean(|m| m.e_t_norm),
    })
}

/// `n` well-spread unit quaternions (super-Fibonacci spiral), rotated by a
/// random rotation drawn from `seed`; seed 0 leaves the spiral as is.
pub fn super_fibonacci_bins<T: Scalar>(n: usize, seed: u64) -> Vec<Quaternion<T>> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    let tau = std::f64::consts::TAU;
    let rot = if seed == 0 { Quaternion::identity() } else { Quaternion::random(&mut ChaCha8Rng::seed_from_u64(seed)) };
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let (r, big_r) = ((s / n as f64).sqrt(), (1.0 - s / n as f64).sqrt());
            let (a, b) = (tau * s / PHI, tau * s / PSI);
            let q = Quaternion::new(T::lit(r * a.sin()), T::lit(r * a.cos()), T::lit(big_r * b.sin()), T::lit(big_r * b.cos()));
            (rot * q).normalized()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PoseRow<T> {
    qw_gt: T,
    qx_gt: T,
    qy_gt: T,
    qz_gt: T,
    tx_gt: T,
    ty_gt: T,
    tz_gt: T,
    qw_est: T,
    qx_est: T,
    qy_est: T,
    qz_est: T,
    tx_est: T,
    ty_est: T,
    tz_est: T,
}

/// Reads `poses.csv`: ground truth then estimate, quaternions as `w,x,y,z`.
pub fn read_poses<T: Scalar, R: Read>(r: R) -> Result<Vec<(PoseSample<T>, PoseEstimate<T>)>, PoseError> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let r: PoseRow<T> = row?;
        let gt = PoseSample::new(Quaternion::new(r.qw_gt, r.qx_gt, r.qy_gt, r.qz_gt), [r.tx_gt, r.ty_gt, r.tz_gt])?;
        let est = PoseEstimate { q: Quaternion::new(r.qw_est, r.qx_est, r.qy_est, r.qz_est), t: [r.tx_est, r.ty_est, r.tz_est] };
        out.push((gt, est));
    }
    Ok(out)
}

pub fn write_poses<T: Scalar, W: Write>(w: W, samples: &[(PoseSample<T>, PoseEstimate<T>)]) -> Result<(), PoseError> {
    let mut wr = csv::Writer::from_writer(w);
    for (g, e) in samples {
        wr.serialize(PoseRow {
            qw_gt: g.q_gt.w,
            qx_gt: g.q_gt.x,
            qy_gt: g.q_gt.y,
            qz_gt: g.q_gt.z,
            tx_gt: g.t_gt[0],
            ty_gt: g.t_gt[1],
            tz_gt: g.t_gt[2],
            qw_est: e.q.w,
            qx_est: e.q.x,
            qy_est: e.q.y,
            qz_est: e.q.z,
            tx_est: e.t[0],
            ty_est: e.t[1],
            tz_est: e.t[2],
        })?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Random ground truth with estimates perturbed by up to `max_deg` degrees and
/// `max_rel_t` relative translation error.
pub fn synthetic_poses<T: Scalar>(n: usize, max_deg: f64, max_rel_t: f64, seed: u64) -> Vec<(PoseSample<T>, PoseEstimate<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: Quaternion<T> = Quaternion::random(&mut rng);
            let t = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..20.0)];
            let axis = [T::lit(rng.random_range(-1.0..1.0)), T::lit(rng.random_range(-1.0..1.0)), T::lit(1.0)];
            let dq = Quaternion::from_axis_angle(axis, T::lit(rng.random_range(0.0..=max_deg).to_radians()));
            let t_est = t.map(|v: f64| T::lit(v * (1.0 + rng.random_range(-max_rel_t..=max_rel_t))));
            let gt = PoseSample { q_gt: q, t_gt: t.map(T::lit) };
            (gt, PoseEstimate { q: (q * dq).normalized(), t: t_est })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type Q = Quaternion<f64>;

    #[test]
    fn error_examples() {
        let a = Q::identity();
        let b = Q::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(orientation_error(&a, &a).unwrap(), 0.0);
        assert_eq!(orientation_error(&a, &-a).unwrap(), 0.0);
        assert!((orientation_error(&a, &b).unwrap() - 180.0).abs() < 1e-12);
        assert!(matches!(orientation_error(&Q::new(1.0, 0.1, 0.0, 0.0), &a), Err(PoseError::NotUnit(_))));
    }

    #[test]
    fn position_examples() {
        assert_eq!(position_error(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), (0.0, 0.0));
        let (e, n): (f64, f64) = position_error(&[0.0, 0.0, 3.3], &[0.0, 0.0, 3.0]).unwrap();
        assert!((e - 0.3).abs() < 1e-12 && (n - 0.1).abs() < 1e-12);
        let (e, n): (f64, f64) = position_error(&[0.0, 4.0, 3.0], &[0.0, 0.0, 3.0]).unwrap();
        assert!((e - 4.0).abs() < 1e-12 && (n - 4.0 / 3.0).abs() < 1e-12);
        assert!(matches!(position_error(&[1.0, 0.0, 0.0], &[0.0; 3]), Err(PoseError::ZeroTranslation)));
    }

    #[test]
    fn esa_examples() {
        let gt = PoseSample::new(Q::identity(), [0.0, 0.0, 5.0]).unwrap();
        let flip = PoseEstimate { q: Q::new(0.0, 0.0, 1.0, 0.0), t: gt.t_gt };
        let m = esa_score(&[(gt, flip)]).unwrap();
        assert!((m.esa - std::f64::consts::PI).abs() < 1e-12);
        assert!(esa_score::<f64>(&[]).is_err());
        let a = PoseEstimate { q: Q::identity(), t: [0.0, 0.0, 6.0] };
        let b = PoseEstimate { q: Q::identity(), t: [0.0, 0.0, 7.0] };
        assert!((esa_score(&[(gt, a), (gt, b)]).unwrap().esa - 0.3).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let q = Q::from_axis_angle([1.0, 2.0, 3.0], 0.7);
        let d = decode_orientation(&OrientationBins::new(vec![q], vec![1.0]).unwrap());
        assert!((d.q.dot(&q) - 1.0).abs() < 1e-12 && !d.fallback);
        let d = decode_orientation(&OrientationBins::new(vec![q, -q], vec![0.5, 0.5]).unwrap());
        assert!((d.q.dot(&q).abs() - 1.0).abs() < 1e-12);
        let d = decode_orientation(&OrientationBins::new(vec![q, q], vec![0.3, 0.7]).unwrap());
        assert!((d.q.dot(&q) - 1.0).abs() < 1e-12);
        assert!(OrientationBins::new(vec![q], vec![0.5]).is_err());
        assert!(OrientationBins::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn fibonacci_bins_are_unit_and_spread() {
        let b: Vec<Q> = super_fibonacci_bins(64, 3);
        assert_eq!(b.len(), 64);
        assert!(b.iter().all(|q| (q.norm() - 1.0).abs() < 1e-12));
        let min_gap = (0..64)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| orientation_error(&b[i], &b[j]).unwrap())
            .fold(f64::MAX, f64::min);
        assert!(min_gap > 10.0, "{min_gap}");
        assert_eq!(b, super_fibonacci_bins(64, 3));
    }

    #[test]
    fn csv_round_trip() {
        let s = synthetic_poses::<f64>(5, 10.0, 0.1, 1);
        let mut buf = Vec::new();
        write_poses(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("qw_gt,qx_gt,qy_gt,qz_gt,tx_gt,ty_gt,tz_gt,qw_est,"));
        assert_eq!(read_poses::<f64, _>(&buf[..]).unwrap(), s);
    }
}
