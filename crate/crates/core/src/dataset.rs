//! Column-oriented categorical tables and attribute roles.
//!
//! Every column is integer coded against a [`CategoricalDomain`] whose labels
//! are kept in lexicographic order, so the code of a label never depends on
//! the order in which records arrive.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered label set of one attribute. Code `i` is label `labels[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalDomain {
    pub attribute_name: String,
    labels: Vec<String>,
}

impl CategoricalDomain {
    pub fn new(attribute_name: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let attribute_name = attribute_name.into();
        if labels.is_empty() {
            return Err(Error::Empty(format!("domain of `{attribute_name}`")));
        }
        let distinct: BTreeSet<&String> = labels.iter().collect();
        if distinct.len() != labels.len() {
            return Err(Error::Config(format!(
                "duplicate labels in domain of `{attribute_name}`"
            )));
        }
        Ok(Self {
            attribute_name,
            labels,
        })
    }

    /// Domain over the distinct values of `values`, sorted lexicographically.
    pub fn from_values<'a>(
        attribute_name: impl Into<String>,
        values: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let set: BTreeSet<&str> = values.into_iter().collect();
        Self::new(attribute_name, set.into_iter().map(str::to_owned).collect())
    }

    /// Labels `0..size` zero-padded to a common width, so numeric and
    /// lexicographic order agree.
    pub fn numbered(attribute_name: impl Into<String>, size: usize) -> Result<Self> {
        let width = size.saturating_sub(1).to_string().len();
        let labels = (0..size).map(|i| format!("{i:0width$}")).collect();
        Self::new(attribute_name, labels)
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, code: u32) -> &str {
        &self.labels[code as usize]
    }

    pub fn code_of(&self, label: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == label).map(|i| i as u32)
    }
}

/// Immutable, integer-coded categorical table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    columns: Vec<Vec<u32>>,
    domains: Vec<CategoricalDomain>,
    n_records: usize,
}

impl Dataset {
    pub fn new(columns: Vec<Vec<u32>>, domains: Vec<CategoricalDomain>) -> Result<Self> {
        Self::with_len(columns, domains, None)
    }

    /// Like [`Dataset::new`], but keeps the record count when there are no
    /// columns.
    pub fn with_len(
        columns: Vec<Vec<u32>>,
        domains: Vec<CategoricalDomain>,
        n_records: Option<usize>,
    ) -> Result<Self> {
        if columns.len() != domains.len() {
            return Err(Error::Internal(format!(
                "{} columns but {} domains",
                columns.len(),
                domains.len()
            )));
        }
        let n_records = match (columns.first(), n_records) {
            (Some(c), _) => c.len(),
            (None, Some(n)) => n,
            (None, None) => 0,
        };
        let mut seen = BTreeSet::new();
        for (col, dom) in columns.iter().zip(&domains) {
            if !seen.insert(dom.attribute_name.as_str()) {
                return Err(Error::DoublyAssigned(dom.attribute_name.clone()));
            }
            if col.len() != n_records {
                return Err(Error::Internal(format!(
                    "column `{}` has {} records, expected {n_records}",
                    dom.attribute_name,
                    col.len()
                )));
            }
            let size = dom.size() as u32;
            if let Some(bad) = col.iter().find(|&&c| c >= size) {
                return Err(Error::Internal(format!(
                    "code {bad} out of range for `{}` (size {size})",
                    dom.attribute_name
                )));
            }
        }
        Ok(Self {
            columns,
            domains,
            n_records,
        })
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn n_attributes(&self) -> usize {
        self.columns.len()
    }

    pub fn domains(&self) -> &[CategoricalDomain] {
        &self.domains
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|d| d.attribute_name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.attribute_name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_owned()))
    }

    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[u32]> {
        Ok(&self.columns[self.index_of(name)?])
    }

    pub fn column_at(&self, idx: usize) -> &[u32] {
        &self.columns[idx]
    }

    pub fn domain(&self, name: &str) -> Result<&CategoricalDomain> {
        Ok(&self.domains[self.index_of(name)?])
    }

    pub fn domain_at(&self, idx: usize) -> &CategoricalDomain {
        &self.domains[idx]
    }

    /// Restriction to `attrs`, in the order given.
    pub fn project<S: AsRef<str>>(&self, attrs: &[S]) -> Result<Dataset> {
        let idx = self.indices_of(attrs)?;
        let columns = idx.iter().map(|&i| self.columns[i].clone()).collect();
        let domains = idx.iter().map(|&i| self.domains[i].clone()).collect();
        Dataset::with_len(columns, domains, Some(self.n_records))
    }

    /// Rows `rows` (with repetition allowed), in the order given.
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Dataset {
            columns,
            domains: self.domains.clone(),
            n_records: rows.len(),
        }
    }

    /// Appends a column. The name must be new.
    pub fn with_column(&self, domain: CategoricalDomain, codes: Vec<u32>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        let mut domains = self.domains.clone();
        columns.push(codes);
        domains.push(domain);
        Dataset::with_len(columns, domains, Some(self.n_records))
    }

    /// Row-major index of each record's joint value over `attrs`; the last
    /// attribute varies fastest.
    pub fn joint_config_index<S: AsRef<str>>(&self, attrs: &[S]) -> Result<Vec<u64>> {
        if attrs.is_empty() {
            return Err(Error::Config(
                "joint_config_index needs at least one attribute".into(),
            ));
        }
        let idx = self.indices_of(attrs)?;
        let mut strides = vec![0u64; idx.len()];
        let mut acc: u64 = 1;
        for (k, &i) in idx.iter().enumerate().rev() {
            strides[k] = acc;
            acc = acc.checked_mul(self.domains[i].size() as u64).ok_or_else(|| {
                Error::IndexOverflow(attrs.iter().map(|a| a.as_ref().to_owned()).collect())
            })?;
        }
        Ok((0..self.n_records)
            .map(|r| {
                idx.iter()
                    .zip(&strides)
                    .map(|(&i, &s)| u64::from(self.columns[i][r]) * s)
                    .sum()
            })
            .collect())
    }

    /// Dense ids of the realized joint configurations over the given column
    /// indices, numbered by first appearance.
    pub fn realized_configs(&self, cols: &[usize]) -> JointConfigs {
        JointConfigs::build(self, cols)
    }

    pub fn cell(&self, record: usize, col: usize) -> &str {
        self.domains[col].label(self.columns[col][record])
    }

    /// Decoded string rows, header first.
    pub fn decode(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = self.names().map(str::to_owned).collect();
        let rows = (0..self.n_records)
            .map(|r| {
                (0..self.columns.len())
                    .map(|c| self.cell(r, c).to_owned())
                    .collect()
            })
            .collect();
        (header, rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(self.names())?;
        let mut row: Vec<&str> = Vec::with_capacity(self.columns.len());
        for r in 0..self.n_records {
            row.clear();
            row.extend((0..self.columns.len()).map(|c| self.cell(r, c)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }
}

/// Interned joint configurations of a column tuple.
#[derive(Debug, Clone)]
pub struct JointConfigs {
    pub cols: Vec<usize>,
    /// Per-record config id.
    pub ids: Vec<u32>,
    /// Codes of each config, by id.
    pub keys: Vec<Box<[u32]>>,
    lookup: HashMap<Box<[u32]>, u32>,
}

impl JointConfigs {
    fn build(ds: &Dataset, cols: &[usize]) -> Self {
        let mut lookup: HashMap<Box<[u32]>, u32> = HashMap::new();
        let mut keys: Vec<Box<[u32]>> = Vec::new();
        let mut ids = Vec::with_capacity(ds.n_records);
        let mut buf = Vec::with_capacity(cols.len());
        for r in 0..ds.n_records {
            buf.clear();
            buf.extend(cols.iter().map(|&c| ds.columns[c][r]));
            let id = match lookup.get(buf.as_slice()) {
                Some(&id) => id,
                None => {
                    let id = keys.len() as u32;
                    let key: Box<[u32]> = buf.clone().into_boxed_slice();
                    keys.push(key.clone());
                    lookup.insert(key, id);
                    id
                }
            };
            ids.push(id);
        }
        if ds.n_records == 0 && cols.is_empty() {
            keys.push(Box::new([]));
            lookup.insert(Box::new([]), 0);
        }
        Self {
            cols: cols.to_vec(),
            ids,
            keys,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id_of(&self, codes: &[u32]) -> Option<u32> {
        self.lookup.get(codes).copied()
    }
}

/// Raw string table as read from CSV, before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => return Err(Error::Empty("csv file has no rows".into())),
            Some(h) => h?,
        };
        let header: Vec<String> = header.iter().map(|h| h.trim().to_owned()).collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::MissingHeader);
        }
        if let Some(pos) = header.iter().position(String::is_empty) {
            return Err(Error::Config(format!("empty column name at position {pos}")));
        }
        let mut rows = Vec::new();
        for rec in records {
            let rec = rec?;
            rows.push(rec.iter().map(str::to_owned).collect());
        }
        Ok(Self { header, rows })
    }

    /// Replaces every purely numeric column with more than `bins` distinct
    /// values by equal-frequency bin labels `b0..b{bins-1}` (zero-padded).
    pub fn bin_numeric(&mut self, bins: usize) -> Vec<String> {
        let mut binned = Vec::new();
        if bins < 2 {
            return binned;
        }
        let width = (bins - 1).to_string().len();
        for c in 0..self.header.len() {
            let parsed: Option<Vec<f64>> = self
                .rows
                .iter()
                .map(|r| r[c].trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect();
            let Some(values) = parsed else { continue };
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() <= bins {
                continue;
            }
            // Cut points at the empirical quantiles of all values.
            let mut all = values.clone();
            all.sort_by(f64::total_cmp);
            let n = all.len();
            let cuts: Vec<f64> = (1..bins).map(|q| all[(q * n) / bins]).collect();
            for (row, v) in self.rows.iter_mut().zip(values) {
                let bin = cuts.partition_point(|&cut| cut <= v);
                row[c] = format!("b{bin:0width$}");
            }
            binned.push(self.header[c].clone());
        }
        binned
    }

    pub fn encode(&self) -> Result<Dataset> {
        let mut seen = BTreeSet::new();
        for h in &self.header {
            if !seen.insert(h.as_str()) {
                return Err(Error::DoublyAssigned(h.clone()));
            }
        }
        let mut columns = Vec::with_capacity(self.header.len());
        let mut domains = Vec::with_capacity(self.header.len());
        for (c, name) in self.header.iter().enumerate() {
            if let Some(r) = self.rows.iter().position(|row| row[c].is_empty()) {
                return Err(Error::MissingCell {
                    column: name.clone(),
                    record: r,
                });
            }
            let domain = if self.rows.is_empty() {
                // A header-only file still yields a well-formed empty column.
                CategoricalDomain::new(name.clone(), vec![String::new()])?
            } else {
                CategoricalDomain::from_values(name.clone(), self.rows.iter().map(|r| r[c].as_str()))?
            };
            let lookup: HashMap<&str, u32> = domain
                .labels()
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i as u32))
                .collect();
            columns.push(self.rows.iter().map(|r| lookup[r[c].as_str()]).collect());
            domains.push(domain);
        }
        Dataset::with_len(columns, domains, Some(self.rows.len()))
    }
}

/// Role of an attribute in the fairness policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sensitive,
    Inadmissible,
    Admissible,
    Additional,
    Label,
}

/// Assignment of every attribute to exactly one role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSpec {
    #[serde(default)]
    pub sensitive: Vec<String>,
    #[serde(default)]
    pub inadmissible: Vec<String>,
    #[serde(default)]
    pub admissible: Vec<String>,
    #[serde(default)]
    pub additional: Vec<String>,
    pub label: String,
}

impl RoleSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Roles(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn role_of(&self, name: &str) -> Option<Role> {
        let has = |v: &[String]| v.iter().any(|n| n == name);
        if self.label == name {
            Some(Role::Label)
        } else if has(&self.sensitive) {
            Some(Role::Sensitive)
        } else if has(&self.inadmissible) {
            Some(Role::Inadmissible)
        } else if has(&self.admissible) {
            Some(Role::Admissible)
        } else if has(&self.additional) {
            Some(Role::Additional)
        } else {
            None
        }
    }

    /// Checks that roles partition the attributes of `ds` and that the label
    /// has at least two values.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for name in self
            .sensitive
            .iter()
            .chain(&self.inadmissible)
            .chain(&self.admissible)
            .chain(&self.additional)
            .chain(std::iter::once(&self.label))
        {
            *counts.entry(name.as_str()).or_default() += 1;
        }
        for name in counts.keys() {
            ds.index_of(name)?;
        }
        for name in ds.names() {
            match counts.get(name) {
                None => return Err(Error::UnassignedAttribute(name.to_owned())),
                Some(&c) if c > 1 => return Err(Error::DoublyAssigned(name.to_owned())),
                _ => {}
            }
        }
        let size = ds.domain(&self.label)?.size();
        if size < 2 {
            return Err(Error::DegenerateLabel {
                name: self.label.clone(),
                size,
            });
        }
        Ok(())
    }

    /// Attributes of `roles`, in the dataset's schema order.
    pub fn in_schema_order(&self, ds: &Dataset, roles: &[Role]) -> Vec<String> {
        ds.names()
            .filter(|n| self.role_of(n).is_some_and(|r| roles.contains(&r)))
            .map(str::to_owned)
            .collect()
    }
}

/// Reads and encodes a CSV, then validates `roles` against it.
pub fn load_dataset(
    csv_path: impl AsRef<Path>,
    roles_path: impl AsRef<Path>,
) -> Result<(Dataset, RoleSpec)> {
    let raw = RawTable::read_csv(csv_path)?;
    let roles = RoleSpec::load(roles_path)?;
    let ds = encode_with_roles(&raw, &roles)?;
    Ok((ds, roles))
}

pub fn encode_with_roles(raw: &RawTable, roles: &RoleSpec) -> Result<Dataset> {
    if raw.rows.is_empty() {
        return Err(Error::Empty("csv file has a header but no records".into()));
    }
    let ds = raw.encode()?;
    roles.validate(&ds)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(text: &str) -> RawTable {
        RawTable::from_reader(text.as_bytes()).unwrap()
    }

    fn roles(text: &str) -> RoleSpec {
        RoleSpec::from_toml_str(text).unwrap()
    }

    #[test]
    fn three_row_csv_encodes() {
        let t = raw("sex,income,Y\nF,low,0\nM,high,1\nF,high,1\n");
        let r = roles("sensitive = [\"sex\"]\nadmissible = [\"income\"]\nlabel = \"Y\"\n");
        let ds = encode_with_roles(&t, &r).unwrap();
        assert_eq!(ds.n_records(), 3);
        assert_eq!(ds.n_attributes(), 3);
        assert_eq!(ds.domain("income").unwrap().labels(), ["high", "low"]);
        assert_eq!(ds.column("sex").unwrap(), [0, 1, 0]);
    }

    #[test]
    fn unassigned_column_rejected() {
        let t = raw("sex,income,Y\nF,low,0\nM,high,1\n");
        let r = roles("sensitive = [\"sex\"]\nlabel = \"Y\"\n");
        let err = encode_with_roles(&t, &r).unwrap_err();
        assert!(err.to_string().contains("unassigned attribute"), "{err}");
    }

    #[test]
    fn doubly_assigned_rejected() {
        let t = raw("a,Y\nx,0\ny,1\n");
        let r = roles("sensitive = [\"a\"]\nadmissible = [\"a\"]\nlabel = \"Y\"\n");
        assert!(matches!(
            encode_with_roles(&t, &r),
            Err(Error::DoublyAssigned(_))
        ));
    }

    #[test]
    fn constant_label_rejected() {
        let t = raw("a,Y\nx,0\ny,0\n");
        let r = roles("admissible = [\"a\"]\nlabel = \"Y\"\n");
        assert!(matches!(
            encode_with_roles(&t, &r),
            Err(Error::DegenerateLabel { .. })
        ));
    }

    #[test]
    fn unknown_role_key_rejected() {
        assert!(RoleSpec::from_toml_str("label = \"Y\"\nprotected = [\"a\"]\n").is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(
            RawTable::from_reader("".as_bytes()),
            Err(Error::Empty(_))
        ));
        let t = raw("a,Y\n");
        let r = roles("admissible = [\"a\"]\nlabel = \"Y\"\n");
        assert!(matches!(encode_with_roles(&t, &r), Err(Error::Empty(_))));
    }

    #[test]
    fn missing_cell_rejected() {
        let t = raw("a,Y\nx,0\n,1\n");
        assert!(matches!(t.encode(), Err(Error::MissingCell { record: 1, .. })));
    }

    #[test]
    fn quoted_cells_survive() {
        let t = raw("a,Y\n\"x, with comma\",0\n\"say \"\"hi\"\"\",1\n");
        let ds = t.encode().unwrap();
        let (_, rows) = ds.decode();
        assert_eq!(rows[0][0], "x, with comma");
        assert_eq!(rows[1][0], "say \"hi\"");
    }

    #[test]
    fn project_edge_cases() {
        let t = raw("a,b,c\n1,2,3\n4,5,6\n");
        let ds = t.encode().unwrap();
        assert_eq!(ds.project(&["a", "b", "c"]).unwrap(), ds);
        let empty = ds.project::<&str>(&[]).unwrap();
        assert_eq!(empty.n_attributes(), 0);
        assert_eq!(empty.n_records(), 2);
        assert!(matches!(ds.project(&["zz"]), Err(Error::UnknownAttribute(_))));
    }

    #[test]
    fn joint_index_examples() {
        let doms = vec![
            CategoricalDomain::numbered("a", 2).unwrap(),
            CategoricalDomain::numbered("b", 3).unwrap(),
            CategoricalDomain::numbered("c", 2).unwrap(),
        ];
        let ds = Dataset::new(vec![vec![1, 0], vec![2, 1], vec![0, 1]], doms).unwrap();
        assert_eq!(ds.joint_config_index(&["a", "b", "c"]).unwrap(), [10, 3]);
        assert_eq!(ds.joint_config_index(&["b"]).unwrap(), [2, 1]);
        assert_eq!(ds.joint_config_index(&["a", "c"]).unwrap(), [2, 1]);
        assert!(ds.joint_config_index::<&str>(&[]).is_err());
        assert!(ds.joint_config_index(&["q"]).is_err());
    }

    #[test]
    fn joint_index_is_a_bijection_on_all_configs() {
        // Enumerate every config of sizes (2,3,2) and check indices 0..12 are hit once.
        let sizes = [2u32, 3, 2];
        let mut cols = vec![Vec::new(); 3];
        for a in 0..sizes[0] {
            for b in 0..sizes[1] {
                for c in 0..sizes[2] {
                    cols[0].push(a);
                    cols[1].push(b);
                    cols[2].push(c);
                }
            }
        }
        let doms = ["a", "b", "c"]
            .iter()
            .zip(sizes)
            .map(|(n, s)| CategoricalDomain::numbered(*n, s as usize).unwrap())
            .collect();
        let ds = Dataset::new(cols, doms).unwrap();
        let idx = ds.joint_config_index(&["a", "b", "c"]).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<u64>>());
        // Row-major: the record (1,2,0) is the 11th enumerated, index 10.
        assert_eq!(idx[10], 10);
    }

    #[test]
    fn numbered_domain_sorts_numerically() {
        let d = CategoricalDomain::numbered("x", 12).unwrap();
        let mut sorted = d.labels().to_vec();
        sorted.sort();
        assert_eq!(sorted, d.labels());
        assert_eq!(d.label(11), "11");
        assert_eq!(d.label(3), "03");
    }

    #[test]
    fn equal_frequency_binning() {
        let mut t = raw("age,Y\n1,a\n2,a\n3,b\n4,b\n5,a\n6,b\n7,a\n8,b\n");
        let binned = t.bin_numeric(4);
        assert_eq!(binned, ["age"]);
        let labels: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(labels, ["b0", "b0", "b1", "b1", "b2", "b2", "b3", "b3"]);
        // Columns with few distinct values are left alone.
        let mut t = raw("flag,Y\n0,a\n1,b\n");
        assert!(t.bin_numeric(4).is_empty());
    }

    #[test]
    fn realized_configs_number_by_first_appearance() {
        let t = raw("a,b\nx,1\ny,2\nx,1\ny,1\n");
        let ds = t.encode().unwrap();
        let jc = ds.realized_configs(&[0, 1]);
        assert_eq!(jc.ids, [0, 1, 0, 2]);
        assert_eq!(jc.len(), 3);
        assert_eq!(jc.id_of(&[1, 1]), Some(1));
    }

    fn small_table() -> impl Strategy<Value = Vec<Vec<String>>> {
        let cell = prop::sample::select(vec!["a", "b", "c,d", "\"q\"", "Z", "10", "9"]);
        (1usize..4, 1usize..20).prop_flat_map(move |(w, h)| {
            prop::collection::vec(
                prop::collection::vec(cell.clone().prop_map(str::to_owned), w),
                h,
            )
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in small_table()) {
            let width = rows[0].len();
            let header: Vec<String> = (0..width).map(|i| format!("c{i}")).collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).unwrap();
            for r in &rows { w.write_record(r).unwrap(); }
            let bytes = w.into_inner().unwrap();
            let ds = RawTable::from_reader(bytes.as_slice()).unwrap().encode().unwrap();
            let (h, decoded) = ds.decode();
            prop_assert_eq!(h, header);
            prop_assert_eq!(decoded, rows);
        }

        #[test]
        fn joint_index_injective(
            sizes in prop::collection::vec(1u32..=4, 1..=4),
            seed_rows in prop::collection::vec(prop::collection::vec(0u32..4, 4), 1..40),
        ) {
            let cols: Vec<Vec<u32>> = sizes.iter().enumerate()
                .map(|(k, &s)| seed_rows.iter().map(|r| r[k] % s).collect())
                .collect();
            let doms = sizes.iter().enumerate()
                .map(|(k, &s)| CategoricalDomain::numbered(format!("v{k}"), s as usize).unwrap())
                .collect();
            let ds = Dataset::new(cols.clone(), doms).unwrap();
            let names: Vec<String> = (0..sizes.len()).map(|k| format!("v{k}")).collect();
            let idx = ds.joint_config_index(&names).unwrap();
            let mut by_index: HashMap<u64, Vec<u32>> = HashMap::new();
            for (r, &i) in idx.iter().enumerate() {
                let tuple: Vec<u32> = cols.iter().map(|c| c[r]).collect();
                if let Some(prev) = by_index.insert(i, tuple.clone()) {
                    prop_assert_eq!(prev, tuple);
                }
            }
        }
    }
}
