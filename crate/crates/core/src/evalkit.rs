//! Overlap metrics, disagreement maps, connected-component masking, and
//! paired statistics.
//!
//! All overlap scores are computed from integer voxel counts and divided
//! once at the end, so results do not depend on traversal order. Scores
//! are reported in [0, 1]; display scaling is the caller's business.

use crate::error::{Error, Result};
use crate::volcore::{LabelMap, Volume};

fn check_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "label maps differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-label overlap counts: (|A_l|, |B_l|, |A_l ∩ B_l|) for l < len.
fn overlap_counts(a: &LabelMap, b: &LabelMap, len: usize) -> Vec<(u64, u64, u64)> {
    let mut counts = vec![(0u64, 0u64, 0u64); len];
    for (&va, &vb) in a.labels().iter().zip(b.labels()) {
        if (va as usize) < len {
            counts[va as usize].0 += 1;
        }
        if (vb as usize) < len {
            counts[vb as usize].1 += 1;
        }
        if va == vb && (va as usize) < len {
            counts[va as usize].2 += 1;
        }
    }
    counts
}

/// Dice coefficient 2|A∩B|/(|A|+|B|) of one label's binary masks. Both
/// masks empty counts as perfect agreement; one empty scores zero.
pub fn dsc(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    check_dims(a, b)?;
    let (mut ca, mut cb, mut inter) = (0u64, 0u64, 0u64);
    for (&va, &vb) in a.labels().iter().zip(b.labels()) {
        let (ma, mb) = (va == label, vb == label);
        ca += ma as u64;
        cb += mb as u64;
        inter += (ma && mb) as u64;
    }
    if ca + cb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ca + cb) as f64)
}

/// Generalized Dice over a label subset, unweighted pooled form:
/// 2·Σ|A_l∩B_l| / Σ(|A_l|+|B_l|). Labels listed twice count once. All
/// masks empty on both sides degenerates to perfect agreement.
pub fn gdsc(a: &LabelMap, b: &LabelMap, label_set: &[u32]) -> Result<f64> {
    check_dims(a, b)?;
    if label_set.is_empty() {
        return Err(Error::Config("gdsc needs a nonempty label set".into()));
    }
    let mut set: Vec<u32> = label_set.to_vec();
    set.sort_unstable();
    set.dedup();
    let len = (*set.last().unwrap() as usize) + 1;
    let counts = overlap_counts(a, b, len);
    let (mut num, mut den) = (0u64, 0u64);
    for &l in &set {
        let (ca, cb, inter) = counts[l as usize];
        num += inter;
        den += ca + cb;
    }
    if den == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * num as f64 / den as f64)
}

/// Binary disagreement map: 1 where the two segmentations differ.
pub fn errormap(pred: &LabelMap, reference: &LabelMap) -> Result<Volume> {
    check_dims(pred, reference)?;
    let data = pred
        .labels()
        .iter()
        .zip(reference.labels())
        .map(|(p, r)| (p != r) as u8 as f32)
        .collect();
    Volume::new(1, pred.dims(), [1.0, 1.0, 1.0], data)
}

/// Binary mask of the largest 6-connected foreground component. Ties go
/// to the component discovered first in voxel scan order, i.e. the one
/// containing the smallest flat index. No foreground gives an all-zero
/// mask.
pub fn largest_cc_mask(lm: &LabelMap) -> Volume {
    let (nx, ny, nz) = lm.dims();
    let n = nx * ny * nz;
    let labels = lm.labels();
    let mut comp = vec![u32::MAX; n];
    let mut sizes: Vec<u64> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if labels[start] == 0 || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize] += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if labels[j] != 0 && comp[j] == u32::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
    }
    // first index wins ties because discovery follows scan order
    let best = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(id, &s)| (s, std::cmp::Reverse(id)))
        .map(|(id, _)| id as u32);
    let data = comp
        .iter()
        .map(|&c| (Some(c) == best) as u8 as f32)
        .collect();
    Volume::new(1, lm.dims(), [1.0, 1.0, 1.0], data).expect("mask has valid shape")
}

/// Two-sided paired t-test result. `degenerate` marks a zero-variance
/// nonzero difference, where t is unbounded and p collapses to 0.
#[derive(Clone, Copy, Debug)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub degenerate: bool,
}

/// Paired t-test on differences x−y: t = mean/(sd/√n) with the n−1
/// denominator in sd, p from the Student t distribution with n−1 degrees
/// of freedom.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Data(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Data("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    // two-sided p = I_{df/(df+t^2)}(df/2, 1/2)
    let p = reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest {
        t,
        p,
        degenerate: false,
    })
}

/// Lanczos approximation of ln Γ(x), g = 7, 9 terms.
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π/sin(πx)
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz iteration.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 3e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Everything the evaluation report carries: per-label Dice, pooled Dice
/// over a chosen subset, and per-label volumes of the prediction in mm³.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub dsc: Vec<f64>,
    pub gdsc: f64,
    pub volumes_mm3: Vec<f64>,
}

pub fn evaluate(
    pred: &LabelMap,
    reference: &LabelMap,
    spacing: [f32; 3],
    gdsc_labels: &[u32],
) -> Result<MetricReport> {
    check_dims(pred, reference)?;
    let len = pred.label_count().max(reference.label_count());
    let counts = overlap_counts(pred, reference, len);
    let voxel_mm3 = spacing.iter().map(|&s| s as f64).product::<f64>();
    let mut per_label = Vec::with_capacity(len);
    let mut volumes = Vec::with_capacity(len);
    for &(ca, cb, inter) in &counts {
        per_label.push(if ca + cb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (ca + cb) as f64
        });
        volumes.push(ca as f64 * voxel_mm3);
    }
    Ok(MetricReport {
        dsc: per_label,
        gdsc: gdsc(pred, reference, gdsc_labels)?,
        volumes_mm3: volumes,
    })
}
