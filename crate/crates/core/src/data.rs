//! Survey respondents, location metadata and their CSV forms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Covariate, ModelConfig};
use crate::error::DataError;
use crate::linalg::Matrix;

/// Raw individual fields as they appear in the survey file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawCovariates {
    pub sex: Option<u8>,
    pub edu: Option<u8>,
    pub eco: Option<u8>,
    pub smoke: Option<u8>,
    /// Age in years at interview.
    pub age: Option<f64>,
}

/// Raw column names in file order.
pub const RAW_FIELDS: [&str; 5] = ["sex", "edu", "eco", "smoke", "age"];

/// Raw columns required to build the configured design.
pub fn required_raw_fields(config: &ModelConfig) -> Vec<&'static str> {
    let need = |f: &str| {
        config.covariates.iter().any(|c| match c {
            Covariate::Intercept => false,
            Covariate::AgeSex => f == "age" || f == "sex",
            other => other.name() == f,
        })
    };
    RAW_FIELDS.into_iter().filter(|f| need(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentRecord {
    pub id: String,
    pub location: usize,
    /// Offset from the earliest cohort.
    pub cohort: usize,
    pub responses: Vec<u8>,
    /// Design vector; entry 0 is the intercept.
    pub covariates: Vec<f64>,
    pub raw: RawCovariates,
}

pub fn standardize_age(age_years: f64, min_age: f64, span: f64) -> Result<f64, DataError> {
    if !(span > 0.0) {
        return Err(DataError::NonpositiveSpan(span));
    }
    Ok((age_years - min_age) / span)
}

/// Builds the design vector in the configured covariate order.
pub fn build_design(raw: &RawCovariates, config: &ModelConfig) -> Result<Vec<f64>, DataError> {
    let flag = |v: Option<u8>, name: &str| {
        v.map(f64::from).ok_or_else(|| DataError::MissingValue { field: name.into(), line: 0 })
    };
    let age = |raw: &RawCovariates| -> Result<f64, DataError> {
        let a = raw.age.ok_or_else(|| DataError::MissingValue { field: "age".into(), line: 0 })?;
        if !(a >= config.age_min && a <= config.age_max()) {
            return Err(DataError::AgeOutOfRange { age: a, min: config.age_min, max: config.age_max() });
        }
        standardize_age(a, config.age_min, config.age_span)
    };
    config
        .covariates
        .iter()
        .map(|c| match c {
            Covariate::Intercept => Ok(1.0),
            Covariate::Sex => flag(raw.sex, "sex"),
            Covariate::Edu => flag(raw.edu, "edu"),
            Covariate::Eco => flag(raw.eco, "eco"),
            Covariate::Smoke => flag(raw.smoke, "smoke"),
            Covariate::Age => age(raw),
            Covariate::AgeSex => Ok(age(raw)? * flag(raw.sex, "sex")?),
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv { path: path.to_path_buf(), source }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<&'a str, DataError> {
    match rec.get(idx).map(str::trim) {
        Some(s) if !s.is_empty() && s != "NA" => Ok(s),
        _ => Err(DataError::MissingValue { field: name.into(), line }),
    }
}

fn parse_index(s: &str, name: &str, bound: usize, line: usize) -> Result<usize, DataError> {
    let v: usize = s
        .parse()
        .map_err(|_| DataError::MalformedRow { line, reason: format!("`{name}` is not an index: {s}") })?;
    if v >= bound {
        return Err(DataError::IndexOutOfRange { field: name.into(), line });
    }
    Ok(v)
}

fn parse_flag(s: &str, name: &str, line: usize) -> Result<u8, DataError> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(DataError::MalformedRow { line, reason: format!("`{name}` must be 0 or 1, got {s}") }),
    }
}

/// Reads `respondents.csv`. Rows with any missing response or covariate are rejected.
pub fn load_dataset(
    path: &Path,
    config: &ModelConfig,
    num_locations: usize,
) -> Result<Vec<RespondentRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing_col = |name: &str| DataError::MalformedRow { line: 1, reason: format!("missing column `{name}`") };

    let id_col = col("id").ok_or_else(|| missing_col("id"))?;
    let loc_col = col("location").ok_or_else(|| missing_col("location"))?;
    let coh_col = col("cohort").ok_or_else(|| missing_col("cohort"))?;
    let y_cols = (1..=config.num_diseases)
        .map(|j| {
            let name = format!("y_{j}");
            col(&name).ok_or_else(|| missing_col(&name))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let raw_cols = required_raw_fields(config)
        .into_iter()
        .map(|f| col(f).map(|c| (f, c)).ok_or_else(|| missing_col(f)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(row + 2);
        if rec.len() != headers.len() {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let id = field(&rec, id_col, "id", line)?.to_string();
        let location = parse_index(field(&rec, loc_col, "location", line)?, "location", num_locations, line)?;
        let cohort = parse_index(field(&rec, coh_col, "cohort", line)?, "cohort", config.num_cohorts, line)?;
        let responses = y_cols
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let name = format!("y_{}", j + 1);
                parse_flag(field(&rec, c, &name, line)?, &name, line)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut raw = RawCovariates::default();
        for &(name, c) in &raw_cols {
            let s = field(&rec, c, name, line)?;
            match name {
                "sex" => raw.sex = Some(parse_flag(s, name, line)?),
                "edu" => raw.edu = Some(parse_flag(s, name, line)?),
                "eco" => raw.eco = Some(parse_flag(s, name, line)?),
                "smoke" => raw.smoke = Some(parse_flag(s, name, line)?),
                _ => {
                    let a: f64 = s.parse().map_err(|_| DataError::MalformedRow {
                        line,
                        reason: format!("`age` is not a number: {s}"),
                    })?;
                    if !a.is_finite() {
                        return Err(DataError::MalformedRow { line, reason: "`age` is not finite".into() });
                    }
                    raw.age = Some(a);
                }
            }
        }
        let covariates = build_design(&raw, config).map_err(|e| match e {
            DataError::MissingValue { field, .. } => DataError::MissingValue { field, line },
            DataError::AgeOutOfRange { age, .. } => {
                DataError::MalformedRow { line, reason: format!("age {age} outside configured range") }
            }
            other => other,
        })?;
        out.push(RespondentRecord { id, location, cohort, responses, covariates, raw });
    }
    Ok(out)
}

/// Writes the canonical respondents file that [`load_dataset`] reads.
pub fn write_dataset(path: &Path, records: &[RespondentRecord], config: &ModelConfig) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let raw_fields = required_raw_fields(config);
    let mut header = vec!["id".to_string(), "location".into(), "cohort".into()];
    header.extend((1..=config.num_diseases).map(|j| format!("y_{j}")));
    header.extend(raw_fields.iter().map(|s| s.to_string()));
    let mut buf = header.join(",");
    buf.push('\n');
    for r in records {
        buf.push_str(&format!("{},{},{}", r.id, r.location, r.cohort));
        for y in &r.responses {
            buf.push_str(&format!(",{y}"));
        }
        for f in &raw_fields {
            let v = match *f {
                "sex" => r.raw.sex.map(|v| v.to_string()),
                "edu" => r.raw.edu.map(|v| v.to_string()),
                "eco" => r.raw.eco.map(|v| v.to_string()),
                "smoke" => r.raw.smoke.map(|v| v.to_string()),
                _ => r.raw.age.map(|v| format!("{v}")),
            };
            buf.push(',');
            buf.push_str(&v.unwrap_or_default());
        }
        buf.push('\n');
    }
    w.write_all(buf.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Locations with their region partition, adjacency and contextual distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTable {
    region_of: Vec<usize>,
    num_regions: usize,
    adjacency: Vec<Vec<usize>>,
    distances: Vec<Matrix>,
}

impl LocationTable {
    /// Validates and builds a table. Adjacency lists must already be symmetric.
    pub fn new(
        region_of: Vec<Option<usize>>,
        adjacency: Vec<Vec<usize>>,
        distances: Vec<Matrix>,
    ) -> Result<Self, DataError> {
        let n = region_of.len();
        let region_of = region_of
            .into_iter()
            .enumerate()
            .map(|(l, r)| r.ok_or(DataError::IncompletePartition(l)))
            .collect::<Result<Vec<_>, _>>()?;
        let num_regions = region_of.iter().map(|r| r + 1).max().unwrap_or(0);
        if adjacency.len() != n {
            return Err(DataError::DanglingAdjacency { from: adjacency.len().min(n), to: n });
        }
        let mut adjacency = adjacency;
        for list in adjacency.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        for (l, list) in adjacency.iter().enumerate() {
            for &m in list {
                if m >= n || m == l || adjacency[m].binary_search(&l).is_err() {
                    return Err(DataError::DanglingAdjacency { from: l, to: m });
                }
            }
        }
        for (k, d) in distances.iter().enumerate() {
            if d.dim() != n {
                return Err(DataError::InvalidDistance { matrix: k, row: d.dim(), col: n });
            }
            for i in 0..n {
                if d[(i, i)] != 0.0 {
                    return Err(DataError::NonzeroDiagonal { matrix: k, location: i });
                }
                for j in 0..n {
                    let v = d[(i, j)];
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(DataError::InvalidDistance { matrix: k, row: i, col: j });
                    }
                }
                for j in 0..i {
                    let (a, b) = (d[(i, j)], d[(j, i)]);
                    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()) {
                        return Err(DataError::AsymmetricMatrix { matrix: k, row: i, col: j });
                    }
                }
            }
        }
        Ok(Self { region_of, num_regions, adjacency, distances })
    }

    pub fn num_locations(&self) -> usize {
        self.region_of.len()
    }

    pub fn num_regions(&self) -> usize {
        self.num_regions
    }

    pub fn region_of(&self, l: usize) -> usize {
        self.region_of[l]
    }

    pub fn neighbors(&self, l: usize) -> &[usize] {
        &self.adjacency[l]
    }

    pub fn degree(&self, l: usize) -> usize {
        self.adjacency[l].len()
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn distances(&self) -> &[Matrix] {
        &self.distances
    }

    pub fn distance(&self, m: usize) -> Option<&Matrix> {
        self.distances.get(m)
    }

    /// Undirected edges with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let mut s = String::from("location,region\n");
        for (l, r) in self.region_of.iter().enumerate() {
            s.push_str(&format!("{l},{r}\n"));
        }
        write_text(&dir.join("locations.csv"), &s)?;
        let mut s = String::from("location_a,location_b\n");
        for (a, b) in self.edges() {
            s.push_str(&format!("{a},{b}\n"));
        }
        write_text(&dir.join("adjacency.csv"), &s)?;
        for (m, d) in self.distances.iter().enumerate() {
            let n = d.dim();
            let mut s = String::from("location");
            for j in 0..n {
                s.push_str(&format!(",{j}"));
            }
            s.push('\n');
            for i in 0..n {
                s.push_str(&i.to_string());
                for j in 0..n {
                    s.push_str(&format!(",{}", d[(i, j)]));
                }
                s.push('\n');
            }
            write_text(&dir.join(format!("distance_{m}.csv")), &s)?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, s: &str) -> Result<(), DataError> {
    std::fs::write(path, s).map_err(io_err(path))
}

fn read_rows(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        rows.push((line, rec));
    }
    Ok(rows)
}

fn parse_usize(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<usize, DataError> {
    let s = field(rec, idx, name, line)?;
    s.parse()
        .map_err(|_| DataError::MalformedRow { line, reason: format!("`{name}` is not an index: {s}") })
}

/// Reads `locations.csv`, `adjacency.csv` and the dense distance matrices.
pub fn load_locations(
    region_path: &Path,
    adjacency_path: &Path,
    distance_paths: &[impl AsRef<Path>],
) -> Result<LocationTable, DataError> {
    let rows = read_rows(region_path)?;
    let mut pairs = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        pairs.push((parse_usize(rec, 0, "location", *line)?, parse_usize(rec, 1, "region", *line)?, *line));
    }
    let n = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let mut region_of = vec![None; n];
    for (l, r, line) in pairs {
        if region_of[l].replace(r).is_some() {
            return Err(DataError::MalformedRow { line, reason: format!("location {l} listed twice") });
        }
    }

    let mut adjacency = vec![Vec::new(); n];
    for (line, rec) in read_rows(adjacency_path)? {
        let a = parse_usize(&rec, 0, "location_a", line)?;
        let b = parse_usize(&rec, 1, "location_b", line)?;
        if a >= n || b >= n || a == b {
            return Err(DataError::DanglingAdjacency { from: a, to: b });
        }
        adjacency[a].push(b);
        adjacency[b].push(a);
    }

    let mut distances = Vec::new();
    for (m, p) in distance_paths.iter().enumerate() {
        let p = p.as_ref();
        let rows = read_rows(p)?;
        if rows.len() != n {
            return Err(DataError::InvalidDistance { matrix: m, row: rows.len(), col: n });
        }
        let mut d = Matrix::zeros(n);
        for (line, rec) in rows {
            let i = parse_usize(&rec, 0, "location", line)?;
            if i >= n || rec.len() != n + 1 {
                return Err(DataError::MalformedRow { line, reason: "distance row has wrong shape".into() });
            }
            for j in 0..n {
                let s = field(&rec, j + 1, "distance", line)?;
                d[(i, j)] = s
                    .parse()
                    .map_err(|_| DataError::MalformedRow { line, reason: format!("bad distance {s}") })?;
            }
        }
        distances.push(d);
    }
    LocationTable::new(region_of, adjacency, distances)
}

/// Loads `locations.csv`, `adjacency.csv` and `distance_{m}.csv` from a data directory.
pub fn load_location_dir(dir: &Path, num_distance: usize) -> Result<LocationTable, DataError> {
    let paths: Vec<_> = (0..num_distance).map(|m| dir.join(format!("distance_{m}.csv"))).collect();
    load_locations(&dir.join("locations.csv"), &dir.join("adjacency.csv"), &paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Covariate::*;

    fn full_config() -> ModelConfig {
        ModelConfig {
            num_diseases: 2,
            covariates: vec![Intercept, Sex, Edu, Eco, Smoke, Age, AgeSex],
            num_cohorts: 5,
            ..ModelConfig::default()
        }
    }

    fn raw(sex: u8, age: f64) -> RawCovariates {
        RawCovariates { sex: Some(sex), edu: Some(0), eco: Some(0), smoke: Some(0), age: Some(age) }
    }

    #[test]
    fn age_standardisation() {
        assert_eq!(standardize_age(51.0, 51.0, 11.0).unwrap(), 0.0);
        assert_eq!(standardize_age(62.0, 51.0, 11.0).unwrap(), 1.0);
        assert_eq!(standardize_age(56.5, 51.0, 11.0).unwrap(), 0.5);
        assert!(matches!(standardize_age(56.5, 51.0, 0.0), Err(DataError::NonpositiveSpan(_))));
    }

    #[test]
    fn design_vectors() {
        let cfg = full_config();
        assert_eq!(build_design(&raw(0, 51.0), &cfg).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(build_design(&raw(1, 62.0), &cfg).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(build_design(&raw(0, 62.0), &cfg).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(build_design(&raw(0, 70.0), &cfg), Err(DataError::AgeOutOfRange { .. })));
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const HEADER: &str = "id,location,cohort,y_1,y_2,sex,edu,eco,smoke,age\n";

    #[test]
    fn loads_well_formed_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}a,0,0,1,0,1,0,0,1,55\nb,1,4,0,0,0,1,1,0,51\nc,1,2,1,1,1,1,0,0,62\n");
        let p = write(dir.path(), "r.csv", &body);
        let recs = load_dataset(&p, &full_config(), 2).unwrap();
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(recs[1].cohort, 4);
        assert_eq!(recs[2].covariates, vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_non_binary_response() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", &format!("{HEADER}a,0,0,1,2,1,0,0,1,55\n"));
        assert!(matches!(load_dataset(&p, &full_config(), 2), Err(DataError::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn rejects_location_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", &format!("{HEADER}a,2,0,1,0,1,0,0,1,55\n"));
        let err = load_dataset(&p, &full_config(), 2).unwrap_err();
        assert!(matches!(err, DataError::IndexOutOfRange { ref field, line: 2 } if field == "location"), "{err}");
    }

    #[test]
    fn rejects_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", &format!("{HEADER}a,1,0,1,,1,0,0,1,55\n"));
        assert!(matches!(load_dataset(&p, &full_config(), 2), Err(DataError::MissingValue { .. })));
        let p = write(dir.path(), "r2.csv", &format!("{HEADER}a,1,0,1,0,1,0,0,1,NA\n"));
        assert!(matches!(load_dataset(&p, &full_config(), 2), Err(DataError::MissingValue { .. })));
    }

    #[test]
    fn canonical_file_round_trips_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}a,0,0,1,0,1,0,0,1,55.25\nb,1,4,0,0,0,1,1,0,51\n");
        let p = write(dir.path(), "r.csv", &body);
        let cfg = full_config();
        let recs = load_dataset(&p, &cfg, 2).unwrap();
        let out = dir.path().join("out.csv");
        write_dataset(&out, &recs, &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), body);
    }

    #[test]
    fn minimal_location_table() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "locations.csv", "location,region\n0,0\n1,0\n");
        let a = write(dir.path(), "adjacency.csv", "location_a,location_b\n0,1\n");
        let d = write(dir.path(), "distance_0.csv", "location,0,1\n0,0,1\n1,1,0\n");
        let t = load_locations(&r, &a, &[d]).unwrap();
        assert_eq!((t.degree(0), t.degree(1)), (1, 1));
        assert_eq!(t.num_regions(), 1);
    }

    #[test]
    fn asymmetric_distance_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "locations.csv", "location,region\n0,0\n1,0\n");
        let a = write(dir.path(), "adjacency.csv", "location_a,location_b\n0,1\n");
        let d = write(dir.path(), "distance_0.csv", "location,0,1\n0,0,1\n1,2,0\n");
        assert!(matches!(load_locations(&r, &a, &[d]), Err(DataError::AsymmetricMatrix { .. })));
    }

    #[test]
    fn one_sided_adjacency_rejected() {
        let err = LocationTable::new(vec![Some(0), Some(0)], vec![vec![1], vec![]], vec![]).unwrap_err();
        assert!(matches!(err, DataError::DanglingAdjacency { from: 0, to: 1 }));
    }

    #[test]
    fn partition_must_be_total() {
        let err = LocationTable::new(vec![Some(0), None], vec![vec![], vec![]], vec![]).unwrap_err();
        assert!(matches!(err, DataError::IncompletePartition(1)));
    }

    #[test]
    fn nonzero_diagonal_rejected() {
        let d = Matrix::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.0]]);
        let err = LocationTable::new(vec![Some(0), Some(0)], vec![vec![], vec![]], vec![d]).unwrap_err();
        assert!(matches!(err, DataError::NonzeroDiagonal { matrix: 0, location: 0 }));
    }
}
