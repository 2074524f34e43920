//! Measurements of embedding geometry and training dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::{kernels::dot, Tensor};

/// Singular values below `CONDITION_TOL · σ_max` are treated as zero.
pub const CONDITION_TOL: f64 = 1e-10;
const SVD_RESIDUAL_LIMIT: f64 = 1e-8;
const SPHERE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    /// Population statistics. `values` must be non-empty.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub summary: Summary,
}

impl Histogram {
    /// Uniform bins over `[min, max]`; the last bin is closed. When all values
    /// coincide the range is widened by 0.5 on each side.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("histogram of no values".into()));
        }
        if bins == 0 {
            return Err(Error::Domain("histogram needs at least one bin".into()));
        }
        let summary = Summary::of(values);
        let (lo, hi) = if summary.max > summary.min {
            (summary.min, summary.max)
        } else {
            (summary.min - 0.5, summary.max + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let mut bin_edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        bin_edges.push(hi);
        let mut counts = vec![0u64; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Ok(Self { bin_edges, counts, summary })
    }
}

fn check_batch(op: &str, e: &Tensor, min_rows: usize) -> Result<()> {
    if e.rank() != 2 || e.rows() < min_rows {
        return Err(Error::Domain(format!(
            "{op} needs a [b,d] batch with b >= {min_rows}, got {:?}",
            e.shape()
        )));
    }
    Ok(())
}

/// Histogram of the row l2 norms of pre-normalization embeddings.
pub fn norm_histogram(embeddings: &Tensor, bins: usize) -> Result<Histogram> {
    check_batch("norm_histogram", embeddings, 1)?;
    let norms: Vec<f64> = embeddings.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    Histogram::from_values(&norms, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub class_id: u32,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub overall: Histogram,
    /// Pairs within one class, for classes with at least two members.
    pub per_class: Vec<ClassHistogram>,
}

/// All `b(b-1)/2` pairwise cosine similarities.
pub fn pairwise_cosine_stats(
    embeddings: &Tensor,
    class_ids: Option<&[u32]>,
    bins: usize,
) -> Result<CosineStats> {
    check_batch("pairwise_cosine_stats", embeddings, 2)?;
    let b = embeddings.rows();
    if let Some(ids) = class_ids {
        if ids.len() != b {
            return Err(Error::shape("pairwise_cosine_stats", &[b], &[ids.len()]));
        }
    }
    let mut unit = Vec::with_capacity(b);
    for (i, r) in embeddings.iter_rows().enumerate() {
        let n = dot(r, r).sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        unit.push(r.iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let mut all = Vec::with_capacity(b * (b - 1) / 2);
    let mut by_class: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
    for i in 0..b {
        for j in i + 1..b {
            let c = dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            all.push(c);
            if let Some(ids) = class_ids {
                if ids[i] == ids[j] {
                    by_class.entry(ids[i]).or_default().push(c);
                }
            }
        }
    }
    let per_class = by_class
        .into_iter()
        .map(|(class_id, v)| Ok(ClassHistogram { class_id, histogram: Histogram::from_values(&v, bins)? }))
        .collect::<Result<_>>()?;
    Ok(CosineStats { overall: Histogram::from_values(&all, bins)?, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdSpectrum {
    pub singular_values: Vec<f64>,
    pub mean_sv: f64,
    pub max_sv: f64,
    /// `None` for the zero matrix.
    pub condition_number: Option<f64>,
    pub reconstruction_residual: f64,
}

pub fn weight_svd(w: &Tensor) -> Result<SvdSpectrum> {
    let dec = svd(w)?;
    let residual = dec.relative_residual(w);
    if !(residual < SVD_RESIDUAL_LIMIT) {
        return Err(Error::Numeric {
            message: "SVD reconstruction check failed".into(),
            residual,
        });
    }
    let s = dec.s;
    let max_sv = s.first().copied().unwrap_or(0.0);
    let mean_sv = s.iter().sum::<f64>() / s.len() as f64;
    let condition_number = (max_sv > 0.0).then(|| {
        let smallest = s
            .iter()
            .rev()
            .find(|&&v| v > CONDITION_TOL * max_sv)
            .copied()
            .unwrap_or(max_sv);
        max_sv / smallest
    });
    Ok(SvdSpectrum {
        singular_values: s,
        mean_sv,
        max_sv,
        condition_number,
        reconstruction_residual: residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientConflict {
    pub cosine: f64,
    pub mag1: f64,
    pub mag2: f64,
}

pub fn gradient_conflict(g1: &[f64], g2: &[f64]) -> Result<GradientConflict> {
    if g1.len() != g2.len() {
        return Err(Error::shape("gradient_conflict", &[g1.len()], &[g2.len()]));
    }
    let (mag1, mag2) = (dot(g1, g1).sqrt(), dot(g2, g2).sqrt());
    if mag1 == 0.0 || mag2 == 0.0 {
        return Err(Error::Domain("cosine undefined for a zero gradient".into()));
    }
    let cosine = (dot(g1, g2) / (mag1 * mag2)).clamp(-1.0, 1.0);
    Ok(GradientConflict { cosine, mag1, mag2 })
}

/// `|⟨f, grad⟩| / (‖f‖·‖grad‖)`.
pub fn orthogonality_residual(f: &[f64], grad: &[f64]) -> Result<f64> {
    if f.len() != grad.len() {
        return Err(Error::shape("orthogonality_residual", &[f.len()], &[grad.len()]));
    }
    let (nf, ng) = (dot(f, f).sqrt(), dot(grad, grad).sqrt());
    if nf == 0.0 || ng == 0.0 {
        return Err(Error::Domain("orthogonality residual of a zero vector".into()));
    }
    Ok(dot(f, grad).abs() / (nf * ng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Linear,
    Spherical,
}

impl InterpMode {
    /// Spherical for normalized embeddings, linear otherwise.
    pub fn default_for(hyper_active: bool) -> Self {
        if hyper_active {
            Self::Spherical
        } else {
            Self::Linear
        }
    }
}

/// `steps` points at `t = k/(steps-1)`; the endpoints are copies of the inputs.
pub fn interpolate_embeddings(
    src: &Tensor,
    dst: &Tensor,
    steps: usize,
    mode: InterpMode,
) -> Result<Vec<Tensor>> {
    if src.rank() != 1 || src.shape() != dst.shape() {
        return Err(Error::shape("interpolate_embeddings", src.shape(), dst.shape()));
    }
    if steps < 2 {
        return Err(Error::Domain(format!("interpolation needs >= 2 steps, got {steps}")));
    }
    let (a, b) = (src.data(), dst.data());
    let omega = match mode {
        InterpMode::Linear => 0.0,
        InterpMode::Spherical => {
            for (name, v) in [("source", a), ("target", b)] {
                let n = dot(v, v).sqrt();
                if (n - 1.0).abs() > SPHERE_TOL {
                    return Err(Error::Domain(format!("{name} embedding is off the unit sphere (norm {n})")));
                }
            }
            let c = dot(a, b).clamp(-1.0, 1.0);
            if c <= -1.0 + SPHERE_TOL {
                return Err(Error::Domain("spherical interpolation between antipodal embeddings".into()));
            }
            c.acos()
        }
    };
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        if k == 0 {
            out.push(src.clone());
            continue;
        }
        if k == steps - 1 {
            out.push(dst.clone());
            continue;
        }
        let t = k as f64 / (steps - 1) as f64;
        let (wa, wb) = match mode {
            // Coincident inputs: the slerp weights tend to the linear ones.
            InterpMode::Spherical if omega > 1e-12 => {
                let s = omega.sin();
                (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
            }
            _ => (1.0 - t, t),
        };
        let v = a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect();
        out.push(Tensor::vector(v)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_histogram_examples() {
        let e = Tensor::from_rows(&[[3.0, 4.0], [0.0, 1.0]]).unwrap();
        let h = norm_histogram(&e, 4).unwrap();
        assert_eq!(h.summary.mean, 3.0);
        assert_eq!(h.counts.iter().sum::<u64>(), 2);
        assert_eq!(h.bin_edges.len(), 5);

        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(norm_histogram(&same, 3).unwrap().summary.std, 0.0);
    }

    #[test]
    fn cosine_examples() {
        let e = Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let s = pairwise_cosine_stats(&e, None, 5).unwrap();
        assert_eq!(s.overall.summary.count, 3);
        let expect = (2.0 * std::f64::consts::FRAC_1_SQRT_2) / 3.0;
        assert!((s.overall.summary.mean - expect).abs() < 1e-15);

        let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(pairwise_cosine_stats(&e, None, 2).unwrap().overall.summary.mean, 0.0);

        let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(pairwise_cosine_stats(&e, None, 2).is_err());
    }

    #[test]
    fn per_class_groups() {
        let e = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]]).unwrap();
        let s = pairwise_cosine_stats(&e, Some(&[0, 0, 1, 1]), 4).unwrap();
        assert_eq!(s.per_class.len(), 2);
        assert!(s.per_class.iter().all(|c| c.histogram.summary.count == 1));
    }

    #[test]
    fn svd_spectrum_examples() {
        let s = weight_svd(&Tensor::eye(3)).unwrap();
        assert_eq!(s.condition_number, Some(1.0));
        let s = weight_svd(&Tensor::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(s.condition_number, Some(3.0));
        let s = weight_svd(&Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(s.condition_number, None);
    }

    #[test]
    fn conflict_and_orthogonality_examples() {
        let c = gradient_conflict(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c.cosine - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((gradient_conflict(&[1.0, 2.0], &[-1.0, -2.0]).unwrap().cosine + 1.0).abs() < 1e-15);
        assert!(gradient_conflict(&[0.0, 0.0], &[1.0, 0.0]).is_err());

        assert!(orthogonality_residual(&[3.0, 4.0], &[0.128, -0.096]).unwrap() < 1e-12);
        assert!((orthogonality_residual(&[3.0, 4.0], &[6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(orthogonality_residual(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_examples() {
        let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let path = interpolate_embeddings(&a, &b, 3, InterpMode::Spherical).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(path[1].data().iter().all(|v| (v - h).abs() < 1e-15));
        assert_eq!(path[0], a);
        assert_eq!(path[2], b);

        let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let t = Tensor::vector(vec![2.0, 2.0]).unwrap();
        let path = interpolate_embeddings(&z, &t, 3, InterpMode::Linear).unwrap();
        assert_eq!(path[1].data(), &[1.0, 1.0]);

        let neg = Tensor::vector(vec![-1.0, 0.0]).unwrap();
        assert!(interpolate_embeddings(&a, &neg, 3, InterpMode::Spherical).is_err());
        assert!(interpolate_embeddings(&a, &t, 3, InterpMode::Spherical).is_err());
        assert!(interpolate_embeddings(&a, &b, 1, InterpMode::Linear).is_err());
    }
}
