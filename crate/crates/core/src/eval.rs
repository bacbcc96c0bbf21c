//! Confusion matrix, OA / AA / kappa, and classification maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, extract_patch, HsiCube};
use crate::error::{Error, Result};
use crate::nets::{self, cast, NetworkParams, Real};

/// Rows are true classes, columns predicted classes, both `1..=Λ` stored at
/// index `label - 1`.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion_matrix(preds: &[u16], truths: &[u16], class_count: usize) -> Result<Confusion> {
    if preds.len() != truths.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut cm = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in preds.iter().zip(truths) {
        for l in [p, t] {
            if l == 0 || l as usize > class_count {
                return Err(Error::Argument(format!("label {l} outside 1..={class_count}")));
            }
        }
        cm[t as usize - 1][p as usize - 1] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class accuracy; `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// Classes with an empty row, excluded from AA.
    #[serde(default)]
    pub absent_classes: Vec<u16>,
}

/// OA, AA (over classes present in the truth), per-class accuracy and
/// Cohen's kappa.
pub fn metrics(confusion: &Confusion) -> Result<MetricsReport> {
    let k = confusion.len();
    if confusion.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("confusion matrix is not square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let row_sums: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();

    let oa = trace as f64 / n;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|i| (row_sums[i] > 0).then(|| confusion[i][i] as f64 / row_sums[i] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let absent_classes = (0..k)
        .filter(|&i| row_sums[i] == 0)
        .map(|i| i as u16 + 1)
        .collect();

    let chance: f64 = row_sums
        .iter()
        .zip(&col_sums)
        .map(|(&r, &c)| r as f64 * c as f64)
        .sum::<f64>()
        / (n * n);
    // Only one class in play on both sides: agreement is total and chance is 1.
    let kappa = if chance >= 1.0 {
        if trace == total {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - chance) / (1.0 - chance)
    };

    Ok(MetricsReport {
        confusion: confusion.clone(),
        oa,
        aa,
        kappa,
        per_class,
        absent_classes,
    })
}

impl MetricsReport {
    /// `OA xx.xx  AA xx.xx  kappa xx.xx`, in percent.
    pub fn summary_line(&self) -> String {
        format!(
            "OA {:.2}  AA {:.2}  kappa {:.2}",
            self.oa * 100.0,
            self.aa * 100.0,
            self.kappa * 100.0
        )
    }

    /// Recomputes every statistic from the confusion matrix and checks it
    /// matches the stored values exactly.
    pub fn validate(&self) -> Result<()> {
        let fresh = metrics(&self.confusion)?;
        if &fresh != self {
            return Err(Error::Validation(
                "metrics do not match their confusion matrix".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        data::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: MetricsReport = data::read_json(path)?;
        report.validate()?;
        Ok(report)
    }
}

/// Predicted classes at `coords`, evaluated in batches of `batch_size`.
pub fn predict_at<T: Real>(
    params: &NetworkParams<T>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    batch_size: usize,
) -> Result<Vec<u16>> {
    check_compatible(params, cube)?;
    let s = params.config.patch_size;
    let width = s * s * cube.bands;
    let mut preds = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(batch_size.max(1)) {
        let mut flat = Vec::with_capacity(chunk.len() * width);
        for &(r, c) in chunk {
            flat.extend(extract_patch(cube, r, c, s)?.into_iter().map(|v| cast::<T>(v as f64)));
        }
        let batch = ndarray::Array2::from_shape_vec((chunk.len(), width), flat)
            .expect("batch shape");
        preds.extend(nets::forward(params, &batch)?.predicted_classes());
    }
    Ok(preds)
}

fn check_compatible<T: Real>(params: &NetworkParams<T>, cube: &HsiCube) -> Result<()> {
    let cfg = &params.config;
    if cfg.bands != cube.bands || cfg.class_count != cube.class_count as usize {
        return Err(Error::Validation(format!(
            "checkpoint expects {} bands / {} classes, cube has {} / {}",
            cfg.bands, cfg.class_count, cube.bands, cube.class_count
        )));
    }
    Ok(())
}

/// Confusion matrix and metrics of the model on the pixels at `coords`.
pub fn evaluate<T: Real>(
    params: &NetworkParams<T>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    batch_size: usize,
) -> Result<(Vec<u16>, MetricsReport)> {
    let preds = predict_at(params, cube, coords, batch_size)?;
    let truths: Vec<u16> = coords.iter().map(|&(r, c)| cube.label(r, c)).collect();
    let cm = confusion_matrix(&preds, &truths, cube.class_count as usize)?;
    Ok((preds, metrics(&cm)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// Predict labeled pixels only; unlabeled pixels stay 0.
    LabeledOnly,
    FullScene,
}

/// Row-major `H x W` map of predicted labels.
pub fn predict_map<T: Real>(
    params: &NetworkParams<T>,
    cube: &HsiCube,
    mode: MapMode,
    batch_size: usize,
) -> Result<Vec<u16>> {
    let coords: Vec<(usize, usize)> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
        .filter(|&(r, c)| mode == MapMode::FullScene || cube.label(r, c) != 0)
        .collect();
    let preds = predict_at(params, cube, &coords, batch_size)?;
    let mut map = vec![0u16; cube.pixel_count()];
    for (&(r, c), p) in coords.iter().zip(preds) {
        map[r * cube.width + c] = p;
    }
    Ok(map)
}

/// Index 0 (unlabeled) is black; classes 1..=16 follow.
pub const DEFAULT_PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [192, 192, 192],
    [128, 128, 128],
    [128, 0, 0],
    [128, 128, 0],
    [0, 128, 0],
    [128, 0, 128],
    [0, 128, 128],
    [0, 0, 128],
    [255, 165, 0],
    [255, 215, 180],
];

/// Binary PPM (P6), one pixel per label.
pub fn render_map(labels: &[u16], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::Argument(format!(
            "{} labels for a {width}x{height} map",
            labels.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &l in labels {
        let rgb = palette.get(l as usize).ok_or_else(|| {
            Error::Argument(format!("label {l} exceeds palette of {}", palette.len()))
        })?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub label: u16,
    pub name: String,
    pub color: [u8; 3],
}

pub fn legend(class_names: &[String], palette: &[[u8; 3]]) -> Vec<LegendEntry> {
    std::iter::once("unlabeled".to_string())
        .chain(class_names.iter().cloned())
        .enumerate()
        .filter_map(|(i, name)| {
            palette.get(i).map(|&color| LegendEntry {
                label: i as u16,
                name,
                color,
            })
        })
        .collect()
}

/// Writes `<stem>.ppm` and `legend.json` into `dir`.
pub fn write_map(
    dir: &Path,
    stem: &str,
    labels: &[u16],
    cube: &HsiCube,
    palette: &[[u8; 3]],
) -> Result<()> {
    data::create_dir(dir)?;
    let bytes = render_map(labels, cube.width, cube.height, palette)?;
    let path = dir.join(format!("{stem}.ppm"));
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    data::write_json(&dir.join("legend.json"), &legend(&cube.class_names, palette))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[1, 2, 3], &[1, 2, 3], 3).unwrap();
        assert_eq!(cm, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(confusion_matrix(&[], &[], 2).unwrap(), vec![vec![0, 0]; 2]);
        // truths 1 1 1 2 2 2, preds 1 2 1 2 2 1
        let cm = confusion_matrix(&[1, 2, 1, 2, 2, 1], &[1, 1, 1, 2, 2, 2], 2).unwrap();
        assert_eq!(cm, vec![vec![2, 1], vec![1, 2]]);
        assert!(confusion_matrix(&[3], &[1], 2).is_err());
        assert!(confusion_matrix(&[1], &[0], 2).is_err());
        assert!(confusion_matrix(&[1], &[], 2).is_err());
    }

    #[test]
    fn perfect_and_hand_computed_metrics() {
        let m = metrics(&vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));

        let m = metrics(&vec![vec![50, 10], vec![5, 35]]).unwrap();
        assert!((m.oa - 0.85).abs() < 1e-12);
        assert!((m.per_class[0].unwrap() - 50.0 / 60.0).abs() < 1e-12);
        assert!((m.per_class[1].unwrap() - 0.875).abs() < 1e-12);
        assert!((m.aa - 0.8541666666666667).abs() < 1e-12);
        // p_e = (60*55 + 40*45) / 100^2 = 0.51
        assert!((m.kappa - (0.85 - 0.51) / 0.49).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_excluded_from_aa() {
        let m = metrics(&vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.absent_classes, vec![2]);
        assert!((m.aa - (0.75 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kappa_zero_at_chance() {
        // Rows 50/50, columns 50/50, diagonal 25+25: p_o = p_e = 0.5.
        let m = metrics(&vec![vec![25, 25], vec![25, 25]]).unwrap();
        assert!(m.kappa.abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(matches!(metrics(&vec![vec![0, 0], vec![0, 0]]), Err(Error::Argument(_))));
    }

    #[test]
    fn percent_formatting() {
        let report = MetricsReport {
            confusion: vec![vec![1]],
            oa: 0.9107,
            aa: 0.9545,
            kappa: 0.8979,
            per_class: vec![Some(1.0)],
            absent_classes: vec![],
        };
        assert_eq!(report.summary_line(), "OA 91.07  AA 95.45  kappa 89.79");
    }

    #[test]
    fn metrics_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let m = metrics(&vec![vec![50, 10, 0], vec![5, 35, 1], vec![0, 0, 0]]).unwrap();
        m.save(&path).unwrap();
        assert_eq!(MetricsReport::load(&path).unwrap(), m);
        let mut tampered = m.clone();
        tampered.oa = 0.5;
        tampered.save(&path).unwrap();
        assert!(MetricsReport::load(&path).is_err());
    }

    #[test]
    fn ppm_examples() {
        assert_eq!(
            render_map(&[0], 1, 1, &DEFAULT_PALETTE).unwrap(),
            b"P6\n1 1\n255\n\x00\x00\x00".to_vec()
        );
        let palette = [[0, 0, 0], [255, 0, 0], [0, 255, 0]];
        let got = render_map(&[1, 2, 2, 1], 2, 2, &palette).unwrap();
        let mut want = b"P6\n2 2\n255\n".to_vec();
        want.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 255, 0, 255, 0, 0]);
        assert_eq!(got, want);
        assert_eq!(got, render_map(&[1, 2, 2, 1], 2, 2, &palette).unwrap());
        assert!(render_map(&[3], 1, 1, &palette).is_err());
    }

    #[test]
    fn legend_lists_palette_colors() {
        let l = legend(&["a".into(), "b".into()], &DEFAULT_PALETTE);
        assert_eq!(l.len(), 3);
        assert_eq!(l[0].name, "unlabeled");
        assert_eq!(l[2].color, DEFAULT_PALETTE[2]);
    }
}
