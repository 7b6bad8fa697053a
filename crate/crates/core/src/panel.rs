//! Unbalanced longitudinal panels with per-cell missingness, dropout
//! indicators and (complete) covariates, plus long-format CSV I/O.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::ObsPattern;

/// One subject's sequence of occasions. Missing response cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// T_i rows of length r.
    pub responses: Vec<Vec<f64>>,
    pub patterns: Vec<ObsPattern>,
    pub dropout: Vec<bool>,
    /// T_i rows of length p, when the panel carries covariates.
    pub covariates: Option<Vec<Vec<f64>>>,
}

impl SubjectRecord {
    /// Builds a record, deriving the observation patterns from NaN cells.
    pub fn new(
        id: impl Into<String>,
        responses: Vec<Vec<f64>>,
        dropout: Vec<bool>,
        covariates: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let patterns = responses.iter().map(|y| ObsPattern::from_values(y)).collect();
        let rec = SubjectRecord {
            id: id.into(),
            responses,
            patterns,
            dropout,
            covariates,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_occasions(&self) -> usize {
        self.responses.len()
    }

    /// Observed entries at occasion `t` (0-based), in slot order.
    pub fn observed_values(&self, t: usize) -> Vec<f64> {
        self.patterns[t].select(&self.responses[t])
    }

    pub fn n_dropout(&self) -> usize {
        self.dropout.iter().filter(|&&d| d).count()
    }

    /// Covariate row at occasion `t`, empty when there are none.
    pub fn covariate_row(&self, t: usize) -> &[f64] {
        match &self.covariates {
            Some(x) => &x[t],
            None => &[],
        }
    }

    fn validate(&self) -> Result<()> {
        let t_i = self.responses.len();
        if t_i == 0 {
            return Err(Error::InvalidInput(format!("subject {} has no occasions", self.id)));
        }
        if self.dropout.len() != t_i || self.patterns.len() != t_i {
            return Err(Error::InvalidInput(format!(
                "subject {}: dropout/pattern length does not match occasions",
                self.id
            )));
        }
        let r = self.responses[0].len();
        for (t, y) in self.responses.iter().enumerate() {
            if y.len() != r {
                return Err(Error::InvalidInput(format!(
                    "subject {} occasion {}: expected {r} responses",
                    self.id,
                    t + 1
                )));
            }
            if y.iter().any(|v| v.is_infinite()) {
                return Err(Error::InvalidInput(format!(
                    "subject {} occasion {}: infinite response",
                    self.id,
                    t + 1
                )));
            }
            if self.patterns[t] != ObsPattern::from_values(y) {
                return Err(Error::InvalidInput(format!(
                    "subject {} occasion {}: mask does not match missing cells",
                    self.id,
                    t + 1
                )));
            }
        }
        if self.dropout[0] {
            return Err(Error::InvalidDropout {
                id: self.id.clone(),
                t: 1,
            });
        }
        for t in 1..t_i {
            if self.dropout[t - 1] && !self.dropout[t] {
                return Err(Error::InvalidDropout {
                    id: self.id.clone(),
                    t: t + 1,
                });
            }
        }
        for t in 0..t_i {
            if self.dropout[t] && !self.patterns[t].is_all_missing() {
                return Err(Error::InconsistentRow {
                    id: self.id.clone(),
                    t: t + 1,
                });
            }
        }
        if let Some(x) = &self.covariates {
            if x.len() != t_i {
                return Err(Error::InvalidInput(format!(
                    "subject {}: covariate rows do not match occasions",
                    self.id
                )));
            }
            let p = x[0].len();
            if x.iter().any(|row| row.len() != p || row.iter().any(|v| !v.is_finite())) {
                return Err(Error::InvalidInput(format!(
                    "subject {}: covariates must be complete and finite",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A validated collection of subjects sharing r responses and p covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub subjects: Vec<SubjectRecord>,
    pub r: usize,
    pub p: usize,
    pub response_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl PanelDataset {
    pub fn new(
        subjects: Vec<SubjectRecord>,
        response_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidInput("panel has no subjects".into()));
        }
        let r = response_names.len();
        let p = covariate_names.len();
        if r == 0 {
            return Err(Error::InvalidInput("panel needs at least one response".into()));
        }
        for s in &subjects {
            s.validate()?;
            if s.responses[0].len() != r {
                return Err(Error::InvalidInput(format!(
                    "subject {} has {} responses, expected {r}",
                    s.id,
                    s.responses[0].len()
                )));
            }
            let sp = s.covariates.as_ref().map_or(0, |x| x[0].len());
            if sp != p || (p > 0) != s.covariates.is_some() {
                return Err(Error::InvalidInput(format!(
                    "subject {} has {sp} covariates, expected {p}",
                    s.id
                )));
            }
        }
        Ok(PanelDataset {
            subjects,
            r,
            p,
            response_names,
            covariate_names,
        })
    }

    /// Panel with default names `y1..yr` and `x1..xp`.
    pub fn from_subjects(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::InvalidInput("panel has no subjects".into()))?;
        let r = first.responses[0].len();
        let p = first.covariates.as_ref().map_or(0, |x| x[0].len());
        Self::new(
            subjects,
            (1..=r).map(|j| format!("y{j}")).collect(),
            (1..=p).map(|j| format!("x{j}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn has_covariates(&self) -> bool {
        self.p > 0
    }

    pub fn total_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.n_occasions()).sum()
    }

    /// Σ_i (T_i − d_{i+}): occasions still in the panel.
    pub fn present_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.n_occasions() - s.n_dropout()).sum()
    }

    pub fn max_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.n_occasions()).max().unwrap_or(0)
    }

    pub fn any_missing(&self) -> bool {
        self.subjects
            .iter()
            .any(|s| s.patterns.iter().any(|p| !p.is_complete()))
    }

    pub fn any_dropout(&self) -> bool {
        self.subjects.iter().any(|s| s.n_dropout() > 0)
    }

    /// New panel made of the given subjects (repeats allowed), in order.
    pub fn resample(&self, indices: &[usize]) -> PanelDataset {
        PanelDataset {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            r: self.r,
            p: self.p,
            response_names: self.response_names.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Column names of a long-format table.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub id: String,
    pub time: String,
    pub dropout: String,
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
}

impl Schema {
    /// Parses `id=…,time=…,drop=…,y=…,y=…,x=…`. Response and covariate keys
    /// may repeat; their order is the column order of the model.
    pub fn parse(spec: &str) -> Result<Self> {
        let (mut id, mut time, mut dropout) = (None, None, None);
        let (mut responses, mut covariates) = (Vec::new(), Vec::new());
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("schema entry `{part}` lacks `=`")))?;
            let value = value.trim().to_string();
            match key.trim() {
                "id" => id = Some(value),
                "time" => time = Some(value),
                "drop" | "dropout" => dropout = Some(value),
                "y" => responses.push(value),
                "x" => covariates.push(value),
                other => {
                    return Err(Error::InvalidInput(format!("unknown schema key `{other}`")));
                }
            }
        }
        let need = |v: Option<String>, k: &str| {
            v.ok_or_else(|| Error::InvalidInput(format!("schema is missing `{k}=`")))
        };
        let schema = Schema {
            id: need(id, "id")?,
            time: need(time, "time")?,
            dropout: need(dropout, "drop")?,
            responses,
            covariates,
        };
        if schema.responses.is_empty() {
            return Err(Error::InvalidInput("schema lists no response column (`y=`)".into()));
        }
        Ok(schema)
    }

    /// `id`, `time`, `drop` plus the panel's own response/covariate names.
    pub fn for_panel(panel: &PanelDataset) -> Self {
        Schema {
            id: "id".into(),
            time: "time".into(),
            dropout: "drop".into(),
            responses: panel.response_names.clone(),
            covariates: panel.covariate_names.clone(),
        }
    }
}

struct RawRow {
    line: u64,
    time: usize,
    dropout: bool,
    y: Vec<f64>,
    x: Vec<f64>,
}

fn is_missing_token(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

/// Reads a long-format panel: one row per subject-occasion.
pub fn parse_long_csv<R: Read>(reader: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::ParseError {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("column `{name}` not found in header")))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let drop_col = col(&schema.dropout)?;
    let y_cols = schema.responses.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let x_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<RawRow>> = HashMap::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::ParseError {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse_err = |what: &str, v: &str| Error::ParseError {
            line,
            msg: format!("cannot parse {what} `{v}`"),
        };

        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(Error::ParseError {
                line,
                msg: "empty subject id".into(),
            });
        }
        let time: usize = field(time_col)
            .parse()
            .map_err(|_| parse_err("time index", field(time_col)))?;
        let dropout = match field(drop_col) {
            "0" => false,
            "1" => true,
            v => return Err(parse_err("dropout flag", v)),
        };
        let mut y = Vec::with_capacity(y_cols.len());
        for &c in &y_cols {
            let v = field(c);
            if is_missing_token(v) {
                y.push(f64::NAN);
            } else {
                let parsed: f64 = v.parse().map_err(|_| parse_err("response", v))?;
                if !parsed.is_finite() {
                    return Err(parse_err("response", v));
                }
                y.push(parsed);
            }
        }
        let mut x = Vec::with_capacity(x_cols.len());
        for (&c, name) in x_cols.iter().zip(&schema.covariates) {
            let v = field(c);
            if is_missing_token(v) {
                return Err(Error::InvalidInput(format!(
                    "line {line}: covariate `{name}` is missing (covariates must be complete)"
                )));
            }
            let parsed: f64 = v.parse().map_err(|_| parse_err("covariate", v))?;
            if !parsed.is_finite() {
                return Err(parse_err("covariate", v));
            }
            x.push(parsed);
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(RawRow {
            line,
            time,
            dropout,
            y,
            x,
        });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut raw = rows.remove(&id).unwrap_or_default();
        raw.sort_by_key(|r| r.time);
        for (pos, row) in raw.iter().enumerate() {
            if row.time != pos + 1 {
                return Err(Error::InvalidInput(format!(
                    "line {}: subject {id} has time index {} where {} was expected \
                     (occasions must be 1-based, contiguous and unique)",
                    row.line,
                    row.time,
                    pos + 1
                )));
            }
        }
        let covariates = if x_cols.is_empty() {
            None
        } else {
            Some(raw.iter().map(|r| r.x.clone()).collect())
        };
        let dropout = raw.iter().map(|r| r.dropout).collect();
        let responses = raw.into_iter().map(|r| r.y).collect();
        subjects.push(SubjectRecord::new(id, responses, dropout, covariates)?);
    }
    PanelDataset::new(subjects, schema.responses.clone(), schema.covariates.clone())
}

pub fn read_long_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<PanelDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    parse_long_csv(std::io::BufReader::new(file), schema)
}

/// Formats a float with 17 significant digits; NaN becomes `NA`.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Writes the panel in the long CSV dialect read by [`parse_long_csv`],
/// using the column names from [`Schema::for_panel`].
pub fn write_long_csv<W: Write>(panel: &PanelDataset, writer: W) -> Result<()> {
    let io_err = |e: csv::Error| Error::InvalidInput(format!("write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "time".to_string(), "drop".to_string()];
    header.extend(panel.response_names.iter().cloned());
    header.extend(panel.covariate_names.iter().cloned());
    w.write_record(&header).map_err(io_err)?;
    for s in &panel.subjects {
        for t in 0..s.n_occasions() {
            let mut row = vec![
                s.id.clone(),
                (t + 1).to_string(),
                if s.dropout[t] { "1" } else { "0" }.to_string(),
            ];
            row.extend(s.responses[t].iter().map(|&v| format_f64(v)));
            row.extend(s.covariate_row(t).iter().map(|&v| format_f64(v)));
            w.write_record(&row).map_err(io_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::InvalidInput(format!("write failed: {e}")))?;
    Ok(())
}

/// Descriptive missingness rates of a panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingnessSummary {
    /// Fraction of subjects observed at occasion t (1-based index t−1) that
    /// are in dropout there.
    pub dropout_rate: Vec<f64>,
    /// Per response: missing fraction among non-dropout cells.
    pub intermittent_rate: Vec<f64>,
    /// Non-dropout occasions with every response missing.
    pub fully_missing_present: usize,
}

pub fn missingness_summary(data: &PanelDataset) -> MissingnessSummary {
    let t_max = data.max_occasions();
    let mut at_risk = vec![0usize; t_max];
    let mut dropped = vec![0usize; t_max];
    let mut missing = vec![0usize; data.r];
    let mut present = 0usize;
    let mut fully_missing_present = 0usize;
    for s in &data.subjects {
        for t in 0..s.n_occasions() {
            at_risk[t] += 1;
            if s.dropout[t] {
                dropped[t] += 1;
                continue;
            }
            present += 1;
            let pat = &s.patterns[t];
            for (j, m) in missing.iter_mut().enumerate() {
                if !pat.is_observed(j) {
                    *m += 1;
                }
            }
            if pat.is_all_missing() {
                fully_missing_present += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    MissingnessSummary {
        dropout_rate: dropped.iter().zip(&at_risk).map(|(&d, &n)| ratio(d, n)).collect(),
        intermittent_rate: missing.iter().map(|&m| ratio(m, present)).collect(),
        fully_missing_present,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema1() -> Schema {
        Schema::parse("id=id,time=t,drop=d,y=y").unwrap()
    }

    #[test]
    fn minimal_panel() {
        let csv = "id,t,d,y\na,1,0,1.0\na,2,1,NA\n";
        let p = parse_long_csv(csv.as_bytes(), &schema1()).unwrap();
        assert_eq!(p.n(), 1);
        assert_eq!(p.subjects[0].dropout, vec![false, true]);
        assert_eq!(p.subjects[0].responses[0], vec![1.0]);
        assert!(p.subjects[0].patterns[1].is_all_missing());
    }

    #[test]
    fn dropout_row_with_value_is_inconsistent() {
        let csv = "id,t,d,y\na,1,0,1.0\na,2,1,3.2\n";
        let err = parse_long_csv(csv.as_bytes(), &schema1()).unwrap_err();
        assert_eq!(err, Error::InconsistentRow { id: "a".into(), t: 2 });
    }

    #[test]
    fn unbalanced_panel_preserved_in_input_order() {
        let mut csv = String::from("id,t,d,y\n");
        for t in (1..=5).rev() {
            csv.push_str(&format!("b,{t},0,{t}.5\n"));
        }
        for t in 1..=3 {
            csv.push_str(&format!("a,{t},0,\n"));
        }
        let p = parse_long_csv(csv.as_bytes(), &schema1()).unwrap();
        assert_eq!(p.n(), 2);
        assert_eq!(p.subjects[0].id, "b");
        assert_eq!(p.subjects[0].n_occasions(), 5);
        assert_eq!(p.subjects[0].responses[0], vec![1.5]);
        assert_eq!(p.subjects[1].n_occasions(), 3);
    }

    #[test]
    fn dropout_errors() {
        let at_start = "id,t,d,y\na,1,1,NA\n";
        assert_eq!(
            parse_long_csv(at_start.as_bytes(), &schema1()).unwrap_err(),
            Error::InvalidDropout { id: "a".into(), t: 1 }
        );
        let resumes = "id,t,d,y\na,1,0,1\na,2,1,NA\na,3,0,2\n";
        assert_eq!(
            parse_long_csv(resumes.as_bytes(), &schema1()).unwrap_err(),
            Error::InvalidDropout { id: "a".into(), t: 3 }
        );
    }

    #[test]
    fn gaps_and_bad_numbers_rejected() {
        let gap = "id,t,d,y\na,1,0,1\na,3,0,2\n";
        assert!(matches!(
            parse_long_csv(gap.as_bytes(), &schema1()),
            Err(Error::InvalidInput(_))
        ));
        let bad = "id,t,d,y\na,1,0,1\na,2,0,abc\n";
        assert_eq!(
            parse_long_csv(bad.as_bytes(), &schema1()).unwrap_err(),
            Error::ParseError {
                line: 3,
                msg: "cannot parse response `abc`".into()
            }
        );
    }

    #[test]
    fn missing_covariate_rejected() {
        let s = Schema::parse("id=id,time=t,drop=d,y=y,x=age").unwrap();
        let csv = "id,t,d,y,age\na,1,0,1,50\na,2,0,2,NA\n";
        assert!(matches!(
            parse_long_csv(csv.as_bytes(), &s),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn schema_parsing() {
        let s = Schema::parse("id=pid, time=visit, drop=d, y=a, y=b, x=c").unwrap();
        assert_eq!(s.responses, vec!["a", "b"]);
        assert_eq!(s.covariates, vec!["c"]);
        assert!(Schema::parse("id=a,time=b,y=c").is_err());
        assert!(Schema::parse("id=a,time=b,drop=c").is_err());
    }

    #[test]
    fn summary_rates() {
        let csv = "id,t,d,y\na,1,0,1.0\na,2,1,NA\n";
        let p = parse_long_csv(csv.as_bytes(), &schema1()).unwrap();
        let s = missingness_summary(&p);
        assert_eq!(s.dropout_rate, vec![0.0, 1.0]);
        assert_eq!(s.intermittent_rate, vec![0.0]);
        assert_eq!(s.fully_missing_present, 0);

        let csv = "id,t,d,y\na,1,0,1.0\na,2,0,2.0\nb,1,0,3\n";
        let s = missingness_summary(&parse_long_csv(csv.as_bytes(), &schema1()).unwrap());
        assert!(s.dropout_rate.iter().all(|&v| v == 0.0));
        assert!(s.intermittent_rate.iter().all(|&v| v == 0.0));
    }
}
