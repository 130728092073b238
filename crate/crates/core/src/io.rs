//! Long-format CSV arrays and JSON exports.
//!
//! A long-format file has header `i1,...,ip,value` and one row per cell with
//! 1-based indices. Cells that are absent (or have an empty value) are
//! missing.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MpcaError, Result};
use crate::inference::InferenceResult;
use crate::scalar::Scalar;
use crate::spiked::SampleSet;
use crate::tensor::{increment, RankOnePC};

/// A dense array read from long format, with a presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LongArray {
    pub dims: Vec<usize>,
    /// Row-major; missing cells hold 0.
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl LongArray {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.present.iter().filter(|&&p| !p).count()
    }

    /// Treats the first mode as the observation index; missing cells are 0.
    pub fn into_sample_set(self) -> Result<SampleSet<f64>> {
        if self.dims.len() < 2 {
            return Err(MpcaError::InvalidInput(
                "need an observation mode plus at least one data mode".into(),
            ));
        }
        let n = self.dims[0];
        SampleSet::from_stacked(self.dims[1..].to_vec(), n, self.values)
    }
}

/// Reads a long-format array. With `dims` given, indices are checked
/// against it; otherwise each dimension is the largest index seen.
pub fn read_long_csv<R: Read>(reader: R, dims: Option<&[usize]>) -> Result<LongArray> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let p = header.len().saturating_sub(1);
    if p == 0 {
        return Err(MpcaError::InvalidInput("header needs index columns and a value column".into()));
    }
    for (j, h) in header.iter().take(p).enumerate() {
        if h != format!("i{}", j + 1) {
            return Err(MpcaError::InvalidInput(format!(
                "header column {} is '{h}', expected 'i{}'",
                j + 1,
                j + 1
            )));
        }
    }
    if &header[p] != "value" {
        return Err(MpcaError::InvalidInput(format!("last header column is '{}', expected 'value'", &header[p])));
    }
    if let Some(d) = dims {
        if d.len() != p {
            return Err(MpcaError::DimensionMismatch(format!(
                "{} dims given for a file with {p} index columns",
                d.len()
            )));
        }
    }
    let mut cells: Vec<(Vec<usize>, Option<f64>)> = Vec::new();
    let mut max_idx = vec![0usize; p];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p + 1 {
            return Err(MpcaError::InvalidInput(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let mut idx = Vec::with_capacity(p);
        for j in 0..p {
            let i: usize = rec[j].parse().map_err(|_| {
                MpcaError::InvalidInput(format!("row {}: index '{}' is not a positive integer", line + 2, &rec[j]))
            })?;
            if i == 0 {
                return Err(MpcaError::InvalidInput(format!("row {}: indices are 1-based", line + 2)));
            }
            max_idx[j] = max_idx[j].max(i);
            idx.push(i - 1);
        }
        let raw = &rec[p];
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| MpcaError::InvalidInput(format!("row {}: value '{raw}' is not a number", line + 2)))?;
            if v.is_finite() {
                Some(v)
            } else {
                None
            }
        };
        cells.push((idx, value));
    }
    let dims: Vec<usize> = match dims {
        Some(d) => {
            for (j, (&m, &dj)) in max_idx.iter().zip(d).enumerate() {
                if m > dj {
                    return Err(MpcaError::DimensionMismatch(format!(
                        "index {m} in column i{} exceeds dimension {dj}",
                        j + 1
                    )));
                }
            }
            d.to_vec()
        }
        None => max_idx,
    };
    if dims.contains(&0) {
        return Err(MpcaError::InvalidInput("empty array".into()));
    }
    let total: usize = dims.iter().product();
    let mut values = vec![0.0; total];
    let mut present = vec![false; total];
    let mut seen = vec![false; total];
    for (idx, v) in cells {
        let off = idx.iter().zip(&dims).fold(0usize, |acc, (&i, &d)| acc * d + i);
        if seen[off] {
            let one: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
            return Err(MpcaError::InvalidInput(format!("duplicate cell ({})", one.join(","))));
        }
        seen[off] = true;
        if let Some(v) = v {
            values[off] = v;
            present[off] = true;
        }
    }
    Ok(LongArray { dims, values, present })
}

pub fn read_long_csv_path(path: &Path, dims: Option<&[usize]>) -> Result<LongArray> {
    read_long_csv(std::fs::File::open(path)?, dims)
}

/// Writes every cell of a row-major array in long format.
pub fn write_long_csv<W: Write, T: Scalar>(writer: W, dims: &[usize], values: &[T]) -> Result<()> {
    let total: usize = dims.iter().product();
    if total != values.len() {
        return Err(MpcaError::DimensionMismatch(format!(
            "{} values for dims {dims:?}",
            values.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=dims.len()).map(|j| format!("i{j}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut idx = vec![0usize; dims.len()];
    let mut row: Vec<String> = Vec::with_capacity(dims.len() + 1);
    for v in values {
        row.clear();
        row.extend(idx.iter().map(|i| (i + 1).to_string()));
        // shortest representation that parses back to the same value
        row.push(v.as_f64().to_string());
        w.write_record(&row)?;
        increment(&mut idx, dims);
    }
    w.flush()?;
    Ok(())
}

/// Exports observations with the observation index as the first column.
pub fn write_samples_csv<T: Scalar>(path: &Path, data: &SampleSet<T>) -> Result<()> {
    let mut dims = vec![data.n()];
    dims.extend_from_slice(data.dims());
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_long_csv(f, &dims, data.stacked_data())
}

/// One fitted component as exported: `{k, value, factors}` with 1-based `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub k: usize,
    pub value: f64,
    pub factors: Vec<Vec<f64>>,
}

impl ComponentRecord {
    pub fn from_pc<T: Scalar>(k: usize, pc: &RankOnePC<T>) -> Self {
        ComponentRecord {
            k: k + 1,
            value: pc.value().as_f64(),
            factors: pc
                .factors()
                .iter()
                .map(|f| f.as_slice().iter().map(|x| x.as_f64()).collect())
                .collect(),
        }
    }
}

pub fn components_json<T: Scalar>(components: &[RankOnePC<T>]) -> Result<String> {
    let recs: Vec<ComponentRecord> = components
        .iter()
        .enumerate()
        .map(|(k, c)| ComponentRecord::from_pc(k, c))
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

/// Reads a JSON configuration file; parse failures are configuration errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MpcaError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Inference rows `k,q,probe,point,se,lo,hi,z,reject,regime` with 1-based
/// `k` and `q`.
pub fn write_inference_csv<W: Write>(writer: W, rows: &[InferenceResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "q", "probe", "point", "se", "lo", "hi", "z", "reject", "regime"])?;
    for r in rows {
        w.write_record([
            (r.k + 1).to_string(),
            (r.q + 1).to_string(),
            r.probe.clone(),
            r.point.to_string(),
            r.se.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
            r.z_stat.map_or_else(String::new, |z| z.to_string()),
            r.reject.to_string(),
            r.regime.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Regime;
    use crate::spiked::{make_components, ComponentsMode, NoiseDistribution, SpikedModel};

    #[test]
    fn reads_with_missing_cells() {
        let text = "i1,i2,value\n1,1,1.5\n2,2,-3\n1,2,\n";
        let a = read_long_csv(text.as_bytes(), None).unwrap();
        assert_eq!(a.dims, vec![2, 2]);
        assert_eq!(a.values, vec![1.5, 0.0, 0.0, -3.0]);
        assert_eq!(a.present, vec![true, false, false, true]);
        assert_eq!(a.missing_count(), 2);
        let a = read_long_csv(text.as_bytes(), Some(&[3, 2])).unwrap();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_long_csv("i1,i2,value\n3,1,1\n".as_bytes(), Some(&[2, 2])).is_err());
        assert!(read_long_csv("i1,i2,value\n1,1,1\n1,1,2\n".as_bytes(), None).is_err());
        assert!(read_long_csv("a,b,value\n1,1,1\n".as_bytes(), None).is_err());
        assert!(read_long_csv("i1,i2,value\n0,1,1\n".as_bytes(), None).is_err());
        assert!(read_long_csv("i1,i2,value\n1,1,x\n".as_bytes(), None).is_err());
        assert!(read_long_csv("i1,value\n1,1\n".as_bytes(), Some(&[1, 1])).is_err());
    }

    #[test]
    fn sample_round_trip_is_exact() {
        let comps = make_components(&[3, 4], 1, ComponentsMode::Random, 1).unwrap();
        let m = SpikedModel::<f64>::new(vec![3, 4], vec![2.0], 1.0, comps).unwrap();
        let s = m.sample(5, NoiseDistribution::StandardNormal, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_samples_csv(&path, &s).unwrap();
        let a = read_long_csv_path(&path, Some(&[5, 3, 4])).unwrap();
        let back = a.into_sample_set().unwrap();
        assert_eq!(back.stacked_data(), s.stacked_data());
        assert_eq!(back.dims(), s.dims());
    }

    #[test]
    fn components_export() {
        let comps = make_components::<f64>(&[2, 3], 2, ComponentsMode::PaperSim, 0).unwrap();
        let j = components_json(&comps).unwrap();
        let recs: Vec<ComponentRecord> = serde_json::from_str(&j).unwrap();
        assert_eq!(recs[1].k, 2);
        assert_eq!(recs[0].factors[1], vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn inference_rows() {
        let r = InferenceResult {
            k: 0,
            q: 1,
            probe: "3".into(),
            point: 0.5,
            se: 0.1,
            lo: 0.3,
            hi: 0.7,
            z_stat: Some(5.0),
            reject: true,
            regime: Regime::B,
            degenerate: false,
        };
        let mut buf = Vec::new();
        write_inference_csv(&mut buf, &[r]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "k,q,probe,point,se,lo,hi,z,reject,regime\n1,2,3,0.5,0.1,0.3,0.7,5,true,B\n");
    }
}
