//! CSV batch files: header `y,a,x1,...,xk`, one subject per row. The
//! intercept is not stored in the file and is prepended on read.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DataBatch, ModelSpec, Observation, OutcomeType};

/// Streaming reader over the rows of a batch file.
pub struct BatchReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    source: String,
    covariates: usize,
    outcome: Option<OutcomeType>,
}

fn header_error(source: &str, message: String) -> Error {
    Error::Parse {
        path: source.to_string(),
        line: 1,
        message,
    }
}

impl<R: Read> BatchReader<R> {
    pub fn new(reader: R, source: &str, outcome: Option<OutcomeType>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| header_error(source, e.to_string()))?
            .clone();
        if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
            return Err(header_error(source, "empty file".into()));
        }
        if header.len() < 2 || &header[0] != "y" || &header[1] != "a" {
            return Err(header_error(
                source,
                format!(
                    "header must start with `y,a`, got `{}`",
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        for (k, name) in header.iter().skip(2).enumerate() {
            if name != format!("x{}", k + 1) {
                return Err(header_error(
                    source,
                    format!("expected column `x{}`, got `{name}`", k + 1),
                ));
            }
        }
        Ok(BatchReader {
            covariates: header.len() - 2,
            records: rdr.into_records(),
            source: source.to_string(),
            outcome,
        })
    }

    /// Model dimension implied by the header (intercept included).
    pub fn p(&self) -> usize {
        self.covariates + 1
    }
}

impl<R: Read> Iterator for BatchReader<R> {
    type Item = Result<Observation>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        Some(record.map_err(Error::from).and_then(|rec| {
            let line = rec.position().map_or(0, |p| p.line());
            let fail = |message: String| Error::Parse {
                path: self.source.clone(),
                line,
                message,
            };
            if rec.len() != self.covariates + 2 {
                return Err(fail(format!(
                    "expected {} fields, got {}",
                    self.covariates + 2,
                    rec.len()
                )));
            }
            let num = |i: usize, name: &str| -> Result<f64> {
                let v: f64 = rec[i]
                    .parse()
                    .map_err(|_| fail(format!("`{name}` is not a number: `{}`", &rec[i])))?;
                if !v.is_finite() {
                    return Err(fail(format!("`{name}` is not finite")));
                }
                Ok(v)
            };
            let y = num(0, "y")?;
            let a = num(1, "a")?;
            if a != 0.0 && a != 1.0 {
                return Err(fail(format!(
                    "treatment `a` must be 0 or 1, got {}",
                    &rec[1]
                )));
            }
            if self.outcome == Some(OutcomeType::Binary) && y != 0.0 && y != 1.0 {
                return Err(fail(format!(
                    "binary outcome `y` must be 0 or 1, got {}",
                    &rec[0]
                )));
            }
            let mut x = Vec::with_capacity(self.covariates + 1);
            x.push(1.0);
            for k in 0..self.covariates {
                x.push(num(k + 2, &format!("x{}", k + 1))?);
            }
            Observation::new(y, a as u8, x).map_err(|e| fail(e.to_string()))
        }))
    }
}

/// Reads a whole batch from any reader.
pub fn read_batch<R: Read>(
    reader: R,
    source: &str,
    index: u64,
    outcome: Option<OutcomeType>,
) -> Result<DataBatch> {
    let rows = BatchReader::new(reader, source, outcome)?;
    let mut batch = DataBatch::new(index, rows.p());
    for obs in rows {
        batch.push(obs?.as_ref())?;
    }
    if batch.is_empty() {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 2,
            message: "no observations".into(),
        });
    }
    Ok(batch)
}

/// Reads a batch file, validating outcomes for the given outcome type.
pub fn read_batch_csv(path: &Path, index: u64, outcome: Option<OutcomeType>) -> Result<DataBatch> {
    let file = std::fs::File::open(path)?;
    read_batch(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        index,
        outcome,
    )
}

/// Reads a batch file and checks it against a model specification.
pub fn read_batch_for(path: &Path, index: u64, spec: &ModelSpec) -> Result<DataBatch> {
    let batch = read_batch_csv(path, index, Some(spec.outcome))?;
    if batch.p() != spec.p {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "file has {} covariates but the model expects {}",
                batch.p() - 1,
                spec.p - 1
            ),
        });
    }
    Ok(batch)
}

/// Writes a batch in the same format (intercept dropped).
pub fn write_batch<W: std::io::Write>(batch: &DataBatch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string(), "a".to_string()];
    header.extend((1..batch.p()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for obs in batch.iter() {
        let mut rec = vec![format!("{:?}", obs.y), obs.a.to_string()];
        rec.extend(obs.x[1..].iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, outcome: Option<OutcomeType>) -> Result<DataBatch> {
        read_batch(text.as_bytes(), "mem.csv", 1, outcome)
    }

    #[test]
    fn minimal_file() {
        let b = parse("y,a,x1\n1.0,1,0.5\n", None).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.get(0).x, &[1.0, 0.5]);
        assert_eq!(b.get(0).a, 1);
    }

    #[test]
    fn bad_treatment_names_line() {
        let err = parse("y,a,x1\n1.0,2,0.5\n", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let err = parse("y,a,x1\n1.0,1,0.5\n0.0,0,abc\n", None).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn binary_outcomes_checked() {
        assert!(parse("y,a\n0.5,1\n", Some(OutcomeType::Binary)).is_err());
        assert!(parse("y,a\n1,1\n0,0\n", Some(OutcomeType::Binary)).is_ok());
    }

    #[test]
    fn header_and_empty_errors() {
        assert!(parse("", None).is_err());
        assert!(parse("y,a,x1\n", None).is_err());
        assert!(parse("y,a,x2\n1,1,0\n", None).is_err());
        assert!(parse("a,y\n1,1\n", None).is_err());
        assert!(parse("y,a,x1\n1,1\n", None).is_err());
    }

    #[test]
    fn dimension_against_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        std::fs::write(&path, "y,a,x1,x2\n1,1,0.2,0.3\n").unwrap();
        let spec = ModelSpec::new(crate::model::Family::Gcomp, OutcomeType::Continuous, 2).unwrap();
        assert!(read_batch_for(&path, 1, &spec).is_err());
        let spec3 =
            ModelSpec::new(crate::model::Family::Gcomp, OutcomeType::Continuous, 3).unwrap();
        assert_eq!(read_batch_for(&path, 1, &spec3).unwrap().p(), 3);
    }

    #[test]
    fn write_then_read_is_lossless() {
        let b = parse(
            "y,a,x1,x2\n0.1,1,-3.25,1e-300\n2,0,0.3333333333333333,7\n",
            None,
        )
        .unwrap();
        let mut out = Vec::new();
        write_batch(&b, &mut out).unwrap();
        let back = parse(std::str::from_utf8(&out).unwrap(), None).unwrap();
        assert_eq!(back, b);
    }
}
