//! Datasets, the synthetic benchmark generator, splits and CSV I/O.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column ranges of the instrument, confounder and adjustment blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlocks {
    pub gamma: Range<usize>,
    pub delta: Range<usize>,
    pub upsilon: Range<usize>,
}

impl FeatureBlocks {
    /// Three equal, consecutive thirds of `d` columns.
    pub fn thirds(d: usize) -> Result<Self> {
        if d == 0 || d % 3 != 0 {
            return Err(Error::InvalidParameter(format!(
                "feature count {d} is not a positive multiple of 3"
            )));
        }
        let k = d / 3;
        Ok(Self {
            gamma: 0..k,
            delta: k..2 * k,
            upsilon: 2 * k..d,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub a: Vec<u8>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub y0: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
    pub blocks: Option<FeatureBlocks>,
}

impl Dataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        a: Vec<u8>,
        x: Array2<f64>,
        y: Vec<f64>,
        potential: Option<(Vec<f64>, Vec<f64>)>,
        blocks: Option<FeatureBlocks>,
    ) -> Result<Self> {
        let n = a.len();
        if x.nrows() != n || y.len() != n {
            return Err(Error::Shape(format!(
                "dataset has {n} treatments, {} feature rows and {} outcomes",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::Consistency {
                row: i,
                message: format!("treatment {} is not binary", a[i]),
            });
        }
        if let Some(b) = &blocks {
            let k = x.ncols() / 3;
            if x.ncols() % 3 != 0 || b.gamma != (0..k) || b.delta != (k..2 * k) || b.upsilon != (2 * k..3 * k) {
                return Err(Error::Shape(format!(
                    "block annotation {b:?} does not split {} columns into thirds",
                    x.ncols()
                )));
            }
        }
        let (y0, y1) = match potential {
            Some((y0, y1)) => {
                if y0.len() != n || y1.len() != n {
                    return Err(Error::Shape("potential outcomes have the wrong length".into()));
                }
                for i in 0..n {
                    let expected = if a[i] == 1 { y1[i] } else { y0[i] };
                    if (y[i] - expected).abs() > 1e-9 * expected.abs().max(1.0) {
                        return Err(Error::Consistency {
                            row: i,
                            message: format!(
                                "y = {} but a*y1 + (1-a)*y0 = {expected}",
                                y[i]
                            ),
                        });
                    }
                }
                (Some(y0), Some(y1))
            }
            None => (None, None),
        };
        Ok(Self { a, x, y, y0, y1, blocks })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.a.iter().map(|&v| v as f64).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn has_both_groups(&self) -> bool {
        self.a.contains(&0) && self.a.contains(&1)
    }

    /// True effects `y1 - y0`, when known.
    pub fn true_effects(&self) -> Option<Vec<f64>> {
        match (&self.y0, &self.y1) {
            (Some(y0), Some(y1)) => Some(y1.iter().zip(y0).map(|(a, b)| a - b).collect()),
            _ => None,
        }
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            a: idx.iter().map(|&i| self.a[i]).collect(),
            x: self.x.select(Axis(0), idx),
            y: pick(&self.y),
            y0: self.y0.as_ref().map(pick),
            y1: self.y1.as_ref().map(pick),
            blocks: self.blocks.clone(),
        }
    }
}

/// Synthetic generator settings. Coefficient overrides replace the random
/// draws; they must have length `2d/3`.
#[derive(Debug, Clone, Default)]
pub struct SyntheticConfig {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub coef_a: Option<Vec<f64>>,
    pub coef_y0: Option<Vec<f64>>,
    pub coef_y1: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub data: Dataset,
    pub coef_a: Vec<f64>,
    pub coef_y0: Vec<f64>,
    pub coef_y1: Vec<f64>,
    /// Times the treatment coefficients were redrawn because every unit fell
    /// in one arm.
    pub treatment_redraws: u32,
}

const MAX_TREATMENT_REDRAWS: u32 = 1000;

/// Draws `X ~ N(0, I)`, a logistic treatment on `[X_gamma, X_delta]` and
/// potential outcomes on `[X_delta, X_upsilon]` (linear for `Y0`, quadratic
/// for `Y1`) with independent standard normal noise.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let (d, n) = (cfg.d, cfg.n);
    let blocks = FeatureBlocks::thirds(d)?;
    if n == 0 {
        return Err(Error::InvalidParameter("synthetic sample size must be positive".into()));
    }
    let k = d / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal_vec = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    };
    let check_len = |v: &Option<Vec<f64>>, what: &str| -> Result<()> {
        match v {
            Some(c) if c.len() != 2 * k => Err(Error::InvalidParameter(format!(
                "{what} override has length {}, expected {}",
                c.len(),
                2 * k
            ))),
            _ => Ok(()),
        }
    };
    check_len(&cfg.coef_a, "coef_a")?;
    check_len(&cfg.coef_y0, "coef_y0")?;
    check_len(&cfg.coef_y1, "coef_y1")?;

    let mut coef_a = normal_vec(2 * k, &mut rng);
    let mut coef_y0 = normal_vec(2 * k, &mut rng);
    let mut coef_y1 = normal_vec(2 * k, &mut rng);
    if let Some(c) = &cfg.coef_a {
        coef_a = c.clone();
    }
    if let Some(c) = &cfg.coef_y0 {
        coef_y0 = c.clone();
    }
    if let Some(c) = &cfg.coef_y1 {
        coef_y1 = c.clone();
    }

    let x = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    let scale = 3.0 / (2.0 * d as f64);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for row in x.rows() {
        let phi = row.slice(ndarray::s![k..]);
        let lin: f64 = coef_y0.iter().zip(phi.iter()).map(|(c, v)| c * v).sum();
        let quad: f64 = coef_y1.iter().zip(phi.iter()).map(|(c, v)| c * v * v).sum();
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        y0.push(scale * lin + e0);
        y1.push(scale * quad + e1);
    }

    let mut treatment_redraws = 0;
    let a = loop {
        let a: Vec<u8> = x
            .rows()
            .into_iter()
            .map(|row| {
                let psi = row.slice(ndarray::s![..2 * k]);
                let logit: f64 = coef_a.iter().zip(psi.iter()).map(|(c, v)| c * (v + 1.0)).sum();
                let p = crate::smoothing::sigmoid_gate(logit, 0.0, 1.0);
                (rng.random::<f64>() < p) as u8
            })
            .collect();
        let single_group = n >= 2 && (a.iter().all(|&v| v == 0) || a.iter().all(|&v| v == 1));
        if !single_group {
            break a;
        }
        treatment_redraws += 1;
        if treatment_redraws > MAX_TREATMENT_REDRAWS {
            return Err(Error::InvalidParameter(
                "could not draw a treatment vector with both arms".into(),
            ));
        }
        log::warn!("synthetic treatment fell in a single arm; redrawing coefficients");
        coef_a = normal_vec(2 * k, &mut rng);
    };
    let y = (0..n).map(|i| if a[i] == 1 { y1[i] } else { y0[i] }).collect();
    let data = Dataset::new(a, x, y, Some((y0, y1)), Some(blocks))?;
    Ok(SyntheticDataset {
        data,
        coef_a,
        coef_y0,
        coef_y1,
        treatment_redraws,
    })
}

/// Synthetic dataset with `d` features (a multiple of 3) and `n` rows.
pub fn gen_synthetic(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    generate(&SyntheticConfig {
        d,
        n,
        seed,
        ..Default::default()
    })
    .map(|s| s.data)
}

/// Split sizes by the largest-remainder method.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "split of {n} rows by {ratios:?} leaves an empty part"
        )));
    }
    Ok(sizes)
}

/// Shuffled row indices for the three parts of a split.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sizes = split_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok([idx, val, test])
}

/// Disjoint train / validation / test parts.
pub fn split(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    let [a, b, c] = split_indices(data.len(), ratios, seed)?;
    Ok([data.subset(&a), data.subset(&b), data.subset(&c)])
}

/// Reading options for [`load_csv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvSchema {
    /// Annotate the columns as three equal blocks (requires `d % 3 == 0`).
    pub assume_block_thirds: bool,
}

/// Reads a dataset with columns `a`, `y`, `x1..xd` and optionally `y0`, `y1`.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Parse {
        row: 1,
        column: name.to_string(),
        message: "missing column".into(),
    };
    let col_a = find("a").ok_or_else(|| missing("a"))?;
    let col_y = find("y").ok_or_else(|| missing("y"))?;
    let mut x_cols = Vec::new();
    while let Some(c) = find(&format!("x{}", x_cols.len() + 1)) {
        x_cols.push(c);
    }
    if x_cols.is_empty() {
        return Err(missing("x1"));
    }
    let col_y0 = find("y0");
    let col_y1 = find("y1");
    if col_y0.is_some() != col_y1.is_some() {
        return Err(missing(if col_y0.is_some() { "y1" } else { "y0" }));
    }

    let d = x_cols.len();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    let mut xs = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // File line: header is line 1.
        let line = k + 2;
        let cell = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: line,
                column: headers[c].to_string(),
                message: format!("'{raw}' is not a number"),
            })
        };
        let av = cell(col_a)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::Parse {
                row: line,
                column: "a".into(),
                message: format!("treatment {av} is not 0 or 1"),
            });
        }
        a.push(av as u8);
        y.push(cell(col_y)?);
        for &c in &x_cols {
            xs.push(cell(c)?);
        }
        if let (Some(c0), Some(c1)) = (col_y0, col_y1) {
            y0.push(cell(c0)?);
            y1.push(cell(c1)?);
        }
    }
    let n = a.len();
    let x = Array2::from_shape_vec((n, d), xs).map_err(|e| Error::Shape(e.to_string()))?;
    let blocks = if schema.assume_block_thirds {
        Some(FeatureBlocks::thirds(d)?)
    } else {
        None
    };
    let potential = col_y0.map(|_| (y0, y1));
    Dataset::new(a, x, y, potential, blocks).map_err(|e| match e {
        // Report file lines, not zero-based rows.
        Error::Consistency { row, message } => Error::Consistency { row: row + 2, message },
        other => other,
    })
}

/// Writes `data` in the schema read by [`load_csv`], at full precision.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["a".to_string(), "y".to_string()];
    header.extend((1..=data.dim()).map(|j| format!("x{j}")));
    let potential = data.y0.as_ref().zip(data.y1.as_ref());
    if potential.is_some() {
        header.push("y0".into());
        header.push("y1".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![data.a[i].to_string(), data.y[i].to_string()];
        rec.extend(data.x.row(i).iter().map(|v| v.to_string()));
        if let Some((y0, y1)) = potential {
            rec.push(y0[i].to_string());
            rec.push(y1[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_shapes_and_blocks() {
        let ds = gen_synthetic(18, 100, 1).unwrap();
        assert_eq!(ds.x.dim(), (100, 18));
        let b = ds.blocks.clone().unwrap();
        assert_eq!((b.gamma, b.delta, b.upsilon), (0..6, 6..12, 12..18));
        assert!(matches!(gen_synthetic(17, 10, 1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn synthetic_outcome_identity_holds_exactly() {
        let ds = gen_synthetic(9, 500, 4).unwrap();
        let (y0, y1) = (ds.y0.as_ref().unwrap(), ds.y1.as_ref().unwrap());
        for i in 0..ds.len() {
            let expected = if ds.a[i] == 1 { y1[i] } else { y0[i] };
            assert_eq!(ds.y[i].to_bits(), expected.to_bits());
        }
        assert!(ds.has_both_groups());
    }

    #[test]
    fn synthetic_null_control_outcome_is_pure_noise() {
        let n = 4000;
        let s = generate(&SyntheticConfig {
            d: 12,
            n,
            seed: 8,
            coef_y0: Some(vec![0.0; 8]),
            ..Default::default()
        })
        .unwrap();
        let y0 = s.data.y0.unwrap();
        let mean = y0.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn synthetic_is_reproducible() {
        assert_eq!(gen_synthetic(6, 50, 3).unwrap(), gen_synthetic(6, 50, 3).unwrap());
        assert_ne!(gen_synthetic(6, 50, 3).unwrap(), gen_synthetic(6, 50, 4).unwrap());
    }

    #[test]
    fn split_sizes_and_partition() {
        assert_eq!(split_sizes(100, [0.5, 0.25, 0.25]).unwrap(), [50, 25, 25]);
        assert_eq!(split_sizes(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        let s = split_sizes(7, [0.5, 0.25, 0.25]).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 7);
        assert!(split_sizes(2, [0.5, 0.25, 0.25]).is_err());
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());

        let parts = split_indices(100, [0.5, 0.25, 0.25], 9).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(parts, split_indices(100, [0.5, 0.25, 0.25], 9).unwrap());
    }

    #[test]
    fn split_carries_potential_outcomes_and_blocks() {
        let ds = gen_synthetic(6, 40, 2).unwrap();
        let [tr, va, te] = split(&ds, [0.5, 0.25, 0.25], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (20, 10, 10));
        assert!(te.y0.is_some() && te.blocks.is_some());
    }

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_well_formed() {
        let f = write_file("a,y,x1,x2\n0,1.5,0.1,0.2\n1,2.5,-0.3,0.0\n1,0.0,1,2\n");
        let ds = load_csv(f.path(), CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.a, vec![0, 1, 1]);
    }

    #[test]
    fn csv_bad_treatment_names_row() {
        let f = write_file("a,y,x1\n0,1,0\n2,1,0\n");
        match load_csv(f.path(), CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        let f = write_file("a,y,x1,y0,y1\n1,5,0,1,2\n");
        assert!(matches!(
            load_csv(f.path(), CsvSchema::default()),
            Err(Error::Consistency { row: 2, .. })
        ));
        let f = write_file("a,x1\n1,0\n");
        assert!(matches!(load_csv(f.path(), CsvSchema::default()), Err(Error::Parse { .. })));
        let f = write_file("a,y,x1\n1,abc,0\n");
        assert!(matches!(
            load_csv(f.path(), CsvSchema::default()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_synthetic(6, 30, 5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(
            f.path(),
            CsvSchema {
                assume_block_thirds: true,
            },
        )
        .unwrap();
        assert_eq!(back, ds);
    }
}
