use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!(
            "{what}: {a} predictions for {b} labels"
        )));
    }
    if a == 0 {
        return Err(Error::Data(format!("{what}: empty input")));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    same_len(preds.len(), labels.len(), "accuracy")?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `m[true][pred]` counts; row sums are the class counts.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    same_len(preds.len(), labels.len(), "confusion_matrix")?;
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Data(format!(
                "class {} outside [0, {num_classes})",
                p.max(l)
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class recall; `None` for classes absent from the labels.
pub fn per_class_accuracy(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect()
}

/// Mean intersection-over-union over the classes present in either mask.
pub fn miou(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    same_len(pred.len(), truth.len(), "miou")?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Data(format!(
                "class {} outside [0, {num_classes})",
                p.max(t)
            )));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Settings of the logistic domain probe.
pub const PROBE_ITERS: usize = 300;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_TRAIN_SHARE: f64 = 0.8;

fn split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = ((n as f64) * PROBE_TRAIN_SHARE).round() as usize;
    let k = k.clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(k);
    (idx, test)
}

/// Held-out accuracy of a logistic regression separating source rows from
/// target rows. Features are standardised with training statistics; the split is
/// stratified 80/20 and seeded. 0.5 means the domains are indistinguishable to a
/// linear model, 1.0 that they are separable.
pub fn domain_probe(source: &DMatrix<f64>, target: &DMatrix<f64>, seed: u64) -> Result<f64> {
    if source.nrows() < 2 || target.nrows() < 2 {
        return Err(Error::Data(
            "domain probe needs at least two samples per domain".into(),
        ));
    }
    if source.ncols() != target.ncols() {
        return Err(Error::Data(format!(
            "domain probe: {} vs {} feature columns",
            source.ncols(),
            target.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_tr, s_te) = split(source.nrows(), &mut rng);
    let (t_tr, t_te) = split(target.nrows(), &mut rng);
    let rows = |ids_s: &[usize], ids_t: &[usize]| {
        let d = source.ncols();
        let mut x = DMatrix::zeros(ids_s.len() + ids_t.len(), d);
        let mut y = DVector::zeros(ids_s.len() + ids_t.len());
        for (r, &i) in ids_s.iter().enumerate() {
            x.set_row(r, &source.row(i));
            y[r] = 1.0;
        }
        for (r, &i) in ids_t.iter().enumerate() {
            x.set_row(ids_s.len() + r, &target.row(i));
        }
        (x, y)
    };
    let (mut xtr, ytr) = rows(&s_tr, &t_tr);
    let (mut xte, yte) = rows(&s_te, &t_te);
    let n = xtr.nrows() as f64;
    for c in 0..xtr.ncols() {
        let mean = xtr.column(c).sum() / n;
        let var = xtr
            .column(c)
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for m in [&mut xtr, &mut xte] {
            m.column_mut(c).apply(|v| *v = (*v - mean) / sd);
        }
    }
    let mut w = DVector::zeros(xtr.ncols());
    let mut b = 0.0;
    for _ in 0..PROBE_ITERS {
        let logits = &xtr * &w + DVector::repeat(xtr.nrows(), b);
        let resid = logits.map(|z| 1.0 / (1.0 + (-z).exp())) - &ytr;
        let gw = xtr.tr_mul(&resid) / n + &w * PROBE_L2;
        w -= gw * PROBE_LR;
        b -= PROBE_LR * resid.sum() / n;
    }
    let logits = &xte * &w + DVector::repeat(xte.nrows(), b);
    let hits = logits
        .iter()
        .zip(yte.iter())
        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
        .count();
    Ok(hits as f64 / xte.nrows() as f64)
}

#[derive(Debug, Clone)]
pub struct Projection {
    /// `N x dims` coordinates of the centred data.
    pub points: DMatrix<f64>,
    /// `features x dims` unit principal directions (zero columns past the rank).
    pub components: DMatrix<f64>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    /// Set when the data has fewer than `dims` non-degenerate directions.
    pub degenerate: bool,
}

/// Projection onto the top `dims` principal directions. Each direction is
/// signed so its largest-magnitude loading is positive.
pub fn pca_project(data: &DMatrix<f64>, dims: usize) -> Result<Projection> {
    let (n, d) = data.shape();
    if n < dims || n == 0 {
        return Err(Error::Data(format!(
            "PCA to {dims} dims needs at least {dims} points, got {n}"
        )));
    }
    let mean = data.row_mean();
    let mut centred = data.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.tr_mul(&centred) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let tol = top * 1e-12 * d as f64;
    let mut components = DMatrix::zeros(d, dims);
    let mut variances = vec![0.0; dims];
    let mut degenerate = false;
    for k in 0..dims {
        match order.get(k) {
            Some(&i) if eig.eigenvalues[i] > tol && top > 0.0 => {
                let mut v = eig.eigenvectors.column(i).into_owned();
                let lead = v
                    .iter()
                    .copied()
                    .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    v = -v;
                }
                components.set_column(k, &v);
                variances[k] = eig.eigenvalues[i];
            }
            _ => degenerate = true,
        }
    }
    if degenerate {
        log::warn!("PCA: data rank below {dims}; remaining components are zero");
    }
    Ok(Projection {
        points: centred * &components,
        components,
        variances,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn accuracy_small_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_counts() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
        assert_eq!(
            per_class_accuracy(&m),
            vec![Some(1.0), Some(1.0), Some(0.5)]
        );
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn miou_fixtures() {
        assert_eq!(miou(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
        // 4x4 masks: class 1 predicted on the left half, true on the top half.
        let pred: Vec<usize> = (0..16).map(|i| usize::from(i % 4 < 2)).collect();
        let truth: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
        // class 1: |I| = 4, |U| = 12; class 0 likewise.
        assert!((miou(&pred, &truth, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(miou(&[2], &[0], 2).is_err());
    }

    fn cloud(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, d, |_, c| {
            normal.sample(rng) + if c == 0 { shift } else { 0.0 }
        })
    }

    #[test]
    fn probe_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = cloud(300, 4, 0.0, &mut rng);
        let same = domain_probe(&x, &x, 1).unwrap();
        assert!((same - 0.5).abs() <= 0.05, "{same}");
        let mut s = cloud(300, 4, 0.0, &mut rng);
        let mut t = cloud(300, 4, 0.0, &mut rng);
        s.column_mut(0).fill(10.0);
        t.column_mut(0).fill(-10.0);
        assert_eq!(domain_probe(&s, &t, 1).unwrap(), 1.0);
        assert!(domain_probe(&s, &DMatrix::zeros(1, 4), 1).is_err());
    }

    #[test]
    fn probe_falls_as_clouds_meet() {
        let mut last = 1.1;
        for shift in [4.0, 2.0, 1.0, 0.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = cloud(400, 3, shift, &mut rng);
            let t = cloud(400, 3, 0.0, &mut rng);
            let acc = domain_probe(&s, &t, 2).unwrap();
            assert!(acc < last, "shift {shift}: {acc} !< {last}");
            last = acc;
        }
    }

    #[test]
    fn pca_line_and_centering() {
        let dir = [1.0, -2.0, 0.5, 3.0, 1.0];
        let data = DMatrix::from_fn(40, 5, |r, c| r as f64 * 0.37 * dir[c] + 1.0);
        let p = pca_project(&data, 2).unwrap();
        assert!(p.variances[0] > 0.0);
        assert!(p.degenerate);
        assert_eq!(p.variances[1], 0.0);
        for k in 0..2 {
            assert!(p.points.column(k).sum().abs() < 1e-9);
        }
        // Largest loading (3.0 on axis 3) comes out positive.
        assert!(p.components[(3, 0)] > 0.0);
    }

    #[test]
    fn pca_three_points_closed_form() {
        let data = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 2.0, 1.0, 4.0, 5.0]);
        // Covariance of the centred points by hand.
        let (mx, my) = (2.0, 2.0);
        let xs = [0.0 - mx, 2.0 - mx, 4.0 - mx];
        let ys = [0.0 - my, 1.0 - my, 5.0 - my];
        let a = xs.iter().map(|x| x * x).sum::<f64>() / 2.0;
        let c = ys.iter().map(|y| y * y).sum::<f64>() / 2.0;
        let b = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / 2.0;
        let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
        let (l1, l2) = ((a + c) / 2.0 + disc, (a + c) / 2.0 - disc);
        let p = pca_project(&data, 2).unwrap();
        assert!((p.variances[0] - l1).abs() < 1e-10);
        assert!((p.variances[1] - l2).abs() < 1e-10);
        // Eigenvector of [[a, b], [b, c]] for l1 is (b, l1 - a), normalised.
        let norm = (b * b + (l1 - a) * (l1 - a)).sqrt();
        let mut v = [b / norm, (l1 - a) / norm];
        let lead = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
        if lead < 0.0 {
            v = [-v[0], -v[1]];
        }
        assert!((p.components[(0, 0)] - v[0]).abs() < 1e-10);
        assert!((p.components[(1, 0)] - v[1]).abs() < 1e-10);
        for (r, (x, y)) in xs.iter().zip(&ys).enumerate() {
            assert!((p.points[(r, 0)] - (x * v[0] + y * v[1])).abs() < 1e-10);
        }
        assert!(pca_project(&data, 4).is_err());
    }
}
