use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `K×K` pixel counts, rows ground truth and columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion",
                format!("{} counts for {} classes", counts.len(), classes),
            ));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.batch(), pred.height(), pred.width())
            != (truth.batch(), truth.height(), truth.width())
        {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "prediction {}×{}×{} vs ground truth {}×{}×{}",
                    pred.batch(),
                    pred.height(),
                    pred.width(),
                    truth.batch(),
                    truth.height(),
                    truth.width()
                ),
            ));
        }
        let k = self.classes;
        let mut delta = vec![0u64; k * k];
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == ignore {
                continue;
            }
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= k || t >= k {
                return Err(Error::contract(format!(
                    "class {} outside 0..{}",
                    p.max(t),
                    k
                )));
            }
            delta[t * k + p] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", "class counts differ"));
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where neither truth nor prediction has the class.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| self.get(c, j)).sum();
                let fp: u64 = (0..k).filter(|&i| i != c).map(|i| self.get(i, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<MiouReport> {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::contract("no scored pixels"));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl MiouReport {
    /// `name<TAB>iou` per class (`n/a` for unscored classes), then
    /// `mean_iou<TAB>value`.
    pub fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        for (k, iou) in self.per_class.iter().enumerate() {
            let name = names
                .get(k)
                .cloned()
                .unwrap_or_else(|| format!("class{}", k));
            match iou {
                Some(v) => writeln!(out, "{}\t{}", name, v),
                None => writeln!(out, "{}\tn/a", name),
            }
            .expect("string write");
        }
        writeln!(out, "mean_iou\t{}", self.mean).expect("string write");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[u8]) -> LabelMap {
        LabelMap::single(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_matrix() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&row(&[0, 1, 1, 1]), &row(&[0, 0, 1, 1]), 255)
            .unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean - 7.0 / 12.0).abs() <= 1e-12);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&row(&[0, 2, 2]), &row(&[0, 2, 2]), 255)
            .unwrap();
        assert_eq!(
            cm.miou().unwrap().per_class,
            vec![Some(1.0), None, Some(1.0)]
        );
        assert_eq!(cm.miou().unwrap().mean, 1.0);
        let before = cm.clone();
        cm.accumulate(&row(&[1, 1]), &row(&[255, 255]), 255)
            .unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn empty_matrix_has_no_mean() {
        assert!(ConfusionMatrix::new(2)
            .miou()
            .unwrap_err()
            .to_string()
            .contains("no scored pixels"));
    }

    #[test]
    fn out_of_range_class() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&row(&[2]), &row(&[0]), 255),
            Err(Error::Contract(_))
        ));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn report_lines() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        let text = cm.miou().unwrap().render(&["bg".into(), "fg".into()]);
        assert_eq!(
            text,
            "bg\t0.5\nfg\t0.6666666666666666\nmean_iou\t0.5833333333333333\n"
        );
    }
}
