//! Typed in-memory tables with conjunctive filters, one inner equi-join and
//! scalar aggregates.
//!
//! Queries are structured values, not SQL text. Evaluation order is fixed:
//! filter each side, join (left-major, insertion order), then project or
//! aggregate.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{Chunk, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Integer,
    Real,
    Boolean,
}

impl ColumnType {
    fn is_numeric(self) -> bool {
        matches!(self, ColumnType::Integer | ColumnType::Real)
    }

    /// Parse a raw cell as this type.
    pub fn parse(self, raw: &str) -> Result<Value> {
        let raw = raw.trim();
        let bad = || Error::TypeMismatch(format!("`{raw}` is not a valid {self}"));
        Ok(match self {
            ColumnType::Text => Value::Text(raw.to_string()),
            ColumnType::Integer => Value::Integer(raw.parse().map_err(|_| bad())?),
            ColumnType::Real => {
                let x: f64 = raw.parse().map_err(|_| bad())?;
                if !x.is_finite() {
                    return Err(bad());
                }
                Value::Real(x)
            }
            ColumnType::Boolean => match raw.to_ascii_lowercase().as_str() {
                "true" => Value::Boolean(true),
                "false" => Value::Boolean(false),
                _ => return Err(bad()),
            },
        })
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Text => "text",
            ColumnType::Integer => "integer",
            ColumnType::Real => "real",
            ColumnType::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Boolean(bool),
    Integer(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Value::Text(_) => ColumnType::Text,
            Value::Integer(_) => ColumnType::Integer,
            Value::Real(_) => ColumnType::Real,
            Value::Boolean(_) => ColumnType::Boolean,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    /// Ordering between values of compatible types (integers and reals mix).
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => Some(a.cmp(b)),
            (Value::Integer(a), Value::Integer(b)) => Some(a.cmp(b)),
            (Value::Boolean(a), Value::Boolean(b)) => Some(a.cmp(b)),
            (a, b) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        }
    }

    fn join_key(&self) -> JoinKey {
        match self {
            Value::Text(s) => JoinKey::Text(s.clone()),
            Value::Boolean(b) => JoinKey::Bool(*b),
            // Normalize -0.0 so it joins with 0.
            Value::Integer(i) => JoinKey::Num((*i as f64 + 0.0).to_bits()),
            Value::Real(x) => JoinKey::Num((x + 0.0).to_bits()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
            Value::Boolean(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum JoinKey {
    Text(String),
    Bool(bool),
    Num(u64),
}

fn compatible(column: ColumnType, literal: ColumnType) -> bool {
    column == literal || (column == ColumnType::Real && literal == ColumnType::Integer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn new(name: impl Into<String>, columns: &[(&str, ColumnType)]) -> Self {
        TableSchema {
            name: name.into(),
            columns: columns
                .iter()
                .map(|(n, t)| Column {
                    name: n.to_string(),
                    ty: *t,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::SchemaError(format!(
                "table name `{}` must be nonempty ASCII alphanumerics or `_`",
                self.name
            )));
        }
        if self.columns.is_empty() {
            return Err(Error::SchemaError(format!("table `{}` has no columns", self.name)));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() || c.name.contains('.') {
                return Err(Error::SchemaError(format!("invalid column name `{}`", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaError(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub values: Vec<Value>,
    #[serde(default)]
    pub provenance: Option<String>,
}

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row {
            values,
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: CmpOp,
    pub value: Value,
}

impl Predicate {
    pub fn new(column: impl Into<String>, op: CmpOp, value: Value) -> Self {
        Predicate {
            column: column.into(),
            op,
            value,
        }
    }

    /// Parse `col<op>literal` (ops `=`, `!=`, `<`, `<=`, `>`, `>=`) with the
    /// literal typed by the column's declared type in `schema`.
    pub fn parse(expr: &str, schema: &TableSchema) -> Result<Self> {
        const OPS: [(&str, CmpOp); 6] = [
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("=", CmpOp::Eq),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ];
        let (pos, token, op) = OPS
            .iter()
            .filter_map(|(tok, op)| expr.find(tok).map(|p| (p, *tok, *op)))
            .min_by_key(|(p, tok, _)| (*p, std::cmp::Reverse(tok.len())))
            .ok_or_else(|| Error::Parse(format!("no comparison operator in `{expr}`")))?;
        let column = expr[..pos].trim();
        let literal = &expr[pos + token.len()..];
        let bare = column.rsplit('.').next().unwrap_or(column);
        let idx = schema
            .index_of(bare)
            .ok_or_else(|| Error::UnknownColumn(column.to_string()))?;
        let value = schema.columns[idx].ty.parse(literal)?;
        Ok(Predicate::new(column, op, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregate {
    pub func: AggFn,
    /// Required for everything except `count`.
    #[serde(default)]
    pub column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Join {
    pub table: String,
    pub left_col: String,
    pub right_col: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Query {
    pub table: String,
    #[serde(default)]
    pub filter: Vec<Predicate>,
    /// Empty means every column.
    #[serde(default)]
    pub projection: Vec<String>,
    #[serde(default)]
    pub aggregate: Option<Aggregate>,
    #[serde(default)]
    pub join: Option<Join>,
}

impl Query {
    pub fn table(name: impl Into<String>) -> Self {
        Query {
            table: name.into(),
            ..Query::default()
        }
    }

    pub fn filter(mut self, p: Predicate) -> Self {
        self.filter.push(p);
        self
    }

    pub fn project(mut self, cols: &[&str]) -> Self {
        self.projection = cols.iter().map(|c| c.to_string()).collect();
        self
    }

    pub fn aggregate(mut self, func: AggFn, column: Option<&str>) -> Self {
        self.aggregate = Some(Aggregate {
            func,
            column: column.map(str::to_string),
        });
        self
    }

    pub fn join(mut self, table: &str, left_col: &str, right_col: &str) -> Self {
        self.join = Some(Join {
            table: table.into(),
            left_col: left_col.into(),
            right_col: right_col.into(),
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub values: Vec<Value>,
    /// Source chunk ids of the contributing rows.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryResult {
    Rows {
        columns: Vec<String>,
        rows: Vec<ResultRow>,
    },
    Scalar {
        value: Value,
        /// Source chunk ids of every row the aggregate consumed.
        provenance: Vec<String>,
    },
}

impl QueryResult {
    pub fn rows(&self) -> Option<&[ResultRow]> {
        match self {
            QueryResult::Rows { rows, .. } => Some(rows),
            QueryResult::Scalar { .. } => None,
        }
    }

    pub fn scalar(&self) -> Option<&Value> {
        match self {
            QueryResult::Scalar { value, .. } => Some(value),
            QueryResult::Rows { .. } => None,
        }
    }

    /// Distinct provenance chunk ids in first-appearance order.
    pub fn provenance(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let all: Box<dyn Iterator<Item = &String>> = match self {
            QueryResult::Rows { rows, .. } => Box::new(rows.iter().flat_map(|r| &r.provenance)),
            QueryResult::Scalar { provenance, .. } => Box::new(provenance.iter()),
        };
        all.filter(|id| seen.insert(id.as_str())).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Output columns after an optional join: left columns, then right columns
/// without the join column. Right names that collide with a left name are
/// qualified as `table.column`.
struct JoinedColumns {
    names: Vec<String>,
    types: Vec<ColumnType>,
    /// (side, index within that side) per output column.
    origin: Vec<(Side, usize)>,
    left_table: String,
    right_table: Option<String>,
}

impl JoinedColumns {
    fn new(left: &TableSchema, right: Option<(&TableSchema, usize)>) -> Self {
        let mut names: Vec<String> = left.columns.iter().map(|c| c.name.clone()).collect();
        let mut types: Vec<ColumnType> = left.columns.iter().map(|c| c.ty).collect();
        let mut origin: Vec<(Side, usize)> = (0..left.columns.len()).map(|i| (Side::Left, i)).collect();
        if let Some((schema, join_idx)) = right {
            for (i, c) in schema.columns.iter().enumerate() {
                if i == join_idx {
                    continue;
                }
                let name = if left.index_of(&c.name).is_some() {
                    format!("{}.{}", schema.name, c.name)
                } else {
                    c.name.clone()
                };
                names.push(name);
                types.push(c.ty);
                origin.push((Side::Right, i));
            }
        }
        JoinedColumns {
            names,
            types,
            origin,
            left_table: left.name.clone(),
            right_table: right.map(|(s, _)| s.name.clone()),
        }
    }

    fn resolve(&self, column: &str) -> Result<usize> {
        if let Some(i) = self.names.iter().position(|n| n == column) {
            return Ok(i);
        }
        // `left.col` is accepted as an alias for an unqualified left column.
        if let Some((table, col)) = column.split_once('.') {
            if table == self.left_table {
                if let Some(i) = self.names.iter().position(|n| n == col) {
                    if self.origin[i].0 == Side::Left {
                        return Ok(i);
                    }
                }
            }
            if Some(table) == self.right_table.as_deref() {
                if let Some(i) = self.names.iter().position(|n| n == col) {
                    if self.origin[i].0 == Side::Right {
                        return Ok(i);
                    }
                }
            }
        }
        Err(Error::UnknownColumn(column.to_string()))
    }
}

/// Resolve a filter column against the pre-join tables.
fn resolve_filter_column(
    column: &str,
    left: &TableSchema,
    right: Option<&TableSchema>,
) -> Result<(Side, usize)> {
    if let Some((table, col)) = column.split_once('.') {
        if table == left.name {
            if let Some(i) = left.index_of(col) {
                return Ok((Side::Left, i));
            }
        }
        if let Some(r) = right.filter(|r| r.name == table) {
            if let Some(i) = r.index_of(col) {
                return Ok((Side::Right, i));
            }
        }
        return Err(Error::UnknownColumn(column.to_string()));
    }
    if let Some(i) = left.index_of(column) {
        return Ok((Side::Left, i));
    }
    if let Some(i) = right.and_then(|r| r.index_of(column)) {
        return Ok((Side::Right, i));
    }
    Err(Error::UnknownColumn(column.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct TableStore {
    tables: BTreeMap<String, Table>,
}

impl TableStore {
    pub fn new() -> Self {
        TableStore::default()
    }

    pub fn create_table(&mut self, schema: TableSchema) -> Result<()> {
        schema.validate()?;
        if self.tables.contains_key(&schema.name) {
            return Err(Error::AlreadyExists(schema.name));
        }
        self.tables.insert(
            schema.name.clone(),
            Table {
                schema,
                rows: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn row_count(&self) -> usize {
        self.tables.values().map(|t| t.rows.len()).sum()
    }

    /// All-or-nothing batch insert.
    pub fn insert_rows(&mut self, table: &str, rows: Vec<Row>) -> Result<usize> {
        let t = self
            .tables
            .get_mut(table)
            .ok_or_else(|| Error::UnknownTable(table.to_string()))?;
        for (n, row) in rows.iter().enumerate() {
            if row.values.len() != t.schema.columns.len() {
                return Err(Error::TypeMismatch(format!(
                    "row {n}: expected {} values, got {}",
                    t.schema.columns.len(),
                    row.values.len()
                )));
            }
            for (v, c) in row.values.iter().zip(&t.schema.columns) {
                if v.column_type() != c.ty {
                    return Err(Error::TypeMismatch(format!(
                        "row {n}: column `{}` expects {}, got {}",
                        c.name,
                        c.ty,
                        v.column_type()
                    )));
                }
                if let Value::Real(x) = v {
                    if !x.is_finite() {
                        return Err(Error::TypeMismatch(format!("row {n}: non-finite real")));
                    }
                }
            }
        }
        let count = rows.len();
        t.rows.extend(rows);
        Ok(count)
    }

    /// Import CSV with a header row naming the columns; cell types come from
    /// the table schema.
    pub fn import_csv<R: Read>(&mut self, table: &str, reader: R) -> Result<usize> {
        let schema = self.table(table)?.schema.clone();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::MalformedInput(e.to_string()))?.clone();
        let mut mapping = Vec::with_capacity(schema.columns.len());
        for c in &schema.columns {
            let pos = headers
                .iter()
                .position(|h| h.trim() == c.name)
                .ok_or_else(|| Error::SchemaError(format!("CSV header lacks column `{}`", c.name)))?;
            mapping.push(pos);
        }
        let mut rows = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::MalformedInput(e.to_string()))?;
            let mut values = Vec::with_capacity(mapping.len());
            for (c, &pos) in schema.columns.iter().zip(&mapping) {
                let raw = rec
                    .get(pos)
                    .ok_or_else(|| Error::MalformedInput(format!("CSV row {}: missing cell", n + 1)))?;
                values.push(c.ty.parse(raw)?);
            }
            rows.push(Row::new(values));
        }
        self.insert_rows(table, rows)
    }

    pub fn run_query(&self, q: &Query) -> Result<QueryResult> {
        let left = self.table(&q.table)?;
        let right = match &q.join {
            Some(j) => Some(self.table(&j.table)?),
            None => None,
        };

        // Validate everything before touching rows.
        let mut left_preds = Vec::new();
        let mut right_preds = Vec::new();
        for p in &q.filter {
            let (side, idx) = resolve_filter_column(&p.column, &left.schema, right.map(|t| &t.schema))?;
            let schema = match side {
                Side::Left => &left.schema,
                Side::Right => &right.expect("resolved to right side").schema,
            };
            let ty = schema.columns[idx].ty;
            if !compatible(ty, p.value.column_type()) {
                return Err(Error::TypeMismatch(format!(
                    "filter on `{}` ({ty}) with {} literal",
                    p.column,
                    p.value.column_type()
                )));
            }
            match side {
                Side::Left => left_preds.push((idx, p)),
                Side::Right => right_preds.push((idx, p)),
            }
        }
        let join_cols = match (&q.join, right) {
            (Some(j), Some(r)) => {
                let li = left
                    .schema
                    .index_of(&j.left_col)
                    .ok_or_else(|| Error::UnknownColumn(j.left_col.clone()))?;
                let ri = r
                    .schema
                    .index_of(&j.right_col)
                    .ok_or_else(|| Error::UnknownColumn(j.right_col.clone()))?;
                let (lt, rt) = (left.schema.columns[li].ty, r.schema.columns[ri].ty);
                if !(compatible(lt, rt) || compatible(rt, lt)) {
                    return Err(Error::TypeMismatch(format!("join {lt} column with {rt} column")));
                }
                Some((li, ri))
            }
            _ => None,
        };
        let columns = JoinedColumns::new(&left.schema, right.zip(join_cols).map(|(r, (_, ri))| (&r.schema, ri)));
        let projection: Vec<usize> = q
            .projection
            .iter()
            .map(|c| columns.resolve(c))
            .collect::<Result<_>>()?;
        let agg_col = match &q.aggregate {
            Some(a) => {
                if !q.projection.is_empty() {
                    return Err(Error::SchemaError("aggregate queries take no projection".into()));
                }
                match (&a.func, &a.column) {
                    (AggFn::Count, None) => None,
                    (_, Some(c)) => {
                        let i = columns.resolve(c)?;
                        if a.func != AggFn::Count && !columns.types[i].is_numeric() {
                            return Err(Error::TypeMismatch(format!("{:?} over non-numeric `{c}`", a.func)));
                        }
                        Some(i)
                    }
                    (_, None) => {
                        return Err(Error::SchemaError(format!("{:?} needs a column", a.func)))
                    }
                }
            }
            None => None,
        };

        let passes = |row: &Row, preds: &[(usize, &Predicate)]| {
            preds.iter().all(|(i, p)| {
                row.values[*i]
                    .compare(&p.value)
                    .is_some_and(|ord| p.op.holds(ord))
            })
        };
        let left_rows: Vec<&Row> = left.rows.iter().filter(|r| passes(r, &left_preds)).collect();

        // Each joined row: (left row, optional right row).
        let joined: Vec<(&Row, Option<&Row>)> = match (right, join_cols) {
            (Some(r), Some((li, ri))) => {
                let mut buckets: HashMap<JoinKey, Vec<&Row>> = HashMap::new();
                for row in r.rows.iter().filter(|row| passes(row, &right_preds)) {
                    buckets.entry(row.values[ri].join_key()).or_default().push(row);
                }
                let mut out = Vec::new();
                for l in &left_rows {
                    if let Some(matches) = buckets.get(&l.values[li].join_key()) {
                        out.extend(matches.iter().map(|m| (*l, Some(*m))));
                    }
                }
                out
            }
            _ => left_rows.into_iter().map(|l| (l, None)).collect(),
        };

        let cell = |pair: &(&Row, Option<&Row>), col: usize| -> Value {
            match columns.origin[col] {
                (Side::Left, i) => pair.0.values[i].clone(),
                (Side::Right, i) => pair.1.expect("joined row").values[i].clone(),
            }
        };
        let provenance = |pair: &(&Row, Option<&Row>)| -> Vec<String> {
            pair.0
                .provenance
                .iter()
                .chain(pair.1.and_then(|r| r.provenance.as_ref()))
                .cloned()
                .collect()
        };

        if let Some(agg) = &q.aggregate {
            let prov: Vec<String> = joined.iter().flat_map(provenance).collect();
            let value = aggregate(agg.func, agg_col.map(|c| columns.types[c]), joined.iter().map(|p| agg_col.map(|c| cell(p, c))))?;
            return Ok(QueryResult::Scalar {
                value,
                provenance: prov,
            });
        }

        let selected: Vec<usize> = if projection.is_empty() {
            (0..columns.names.len()).collect()
        } else {
            projection
        };
        Ok(QueryResult::Rows {
            columns: selected.iter().map(|&i| columns.names[i].clone()).collect(),
            rows: joined
                .iter()
                .map(|p| ResultRow {
                    values: selected.iter().map(|&i| cell(p, i)).collect(),
                    provenance: provenance(p),
                })
                .collect(),
        })
    }

    /// Import a table chunk whose text parses as a rectangular grid with a
    /// header row. Returns the created table name, or `None` when the chunk is
    /// not a table or not rectangular.
    pub fn import_table_chunk(&mut self, chunk: &Chunk) -> Result<Option<String>> {
        if chunk.modality != Modality::Table {
            return Ok(None);
        }
        let Some(grid) = parse_grid(&chunk.text) else {
            warn!(chunk_id = %chunk.chunk_id, "table chunk is not a rectangular grid; skipped");
            return Ok(None);
        };
        let name = table_name_for_chunk(&chunk.chunk_id);
        let types: Vec<ColumnType> = (0..grid.header.len())
            .map(|c| infer_type(grid.rows.iter().map(|r| r[c].as_str())))
            .collect();
        let schema = TableSchema {
            name: name.clone(),
            columns: grid
                .header
                .iter()
                .zip(&types)
                .map(|(n, t)| Column {
                    name: n.clone(),
                    ty: *t,
                })
                .collect(),
        };
        if let Err(e) = schema.validate() {
            warn!(chunk_id = %chunk.chunk_id, error = %e, "table chunk header unusable; skipped");
            return Ok(None);
        }
        let rows = grid
            .rows
            .iter()
            .map(|cells| {
                let values = cells
                    .iter()
                    .zip(&types)
                    .map(|(raw, t)| t.parse(raw))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Row {
                    values,
                    provenance: Some(chunk.chunk_id.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.create_table(schema)?;
        self.insert_rows(&name, rows)?;
        Ok(Some(name))
    }

    /// One `<name>.json` per table.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, table) in &self.tables {
            let mut text = serde_json::to_string_pretty(table)?;
            text.push('\n');
            fs::write(dir.join(format!("{name}.json")), text)?;
        }
        Ok(())
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        let mut store = TableStore::new();
        if !dir.exists() {
            return Err(Error::CorruptSnapshot(format!("{} missing", dir.display())));
        }
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let corrupt = |e: String| Error::CorruptSnapshot(format!("{}: {e}", path.display()));
            let raw: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| corrupt(e.to_string()))?;
            let schema: TableSchema =
                serde_json::from_value(raw["schema"].clone()).map_err(|e| corrupt(e.to_string()))?;
            let mut rows = Vec::new();
            for r in raw["rows"].as_array().ok_or_else(|| corrupt("rows missing".into()))? {
                let cells = r["values"].as_array().ok_or_else(|| corrupt("values missing".into()))?;
                if cells.len() != schema.columns.len() {
                    return Err(corrupt("row width disagrees with schema".into()));
                }
                let values = cells
                    .iter()
                    .zip(&schema.columns)
                    .map(|(v, c)| json_to_value(v, c.ty).ok_or_else(|| corrupt(format!("bad cell {v}"))))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(Row {
                    values,
                    provenance: r["provenance"].as_str().map(str::to_string),
                });
            }
            let name = schema.name.clone();
            store.create_table(schema).map_err(|e| corrupt(e.to_string()))?;
            store.insert_rows(&name, rows).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(store)
    }
}

fn json_to_value(v: &serde_json::Value, ty: ColumnType) -> Option<Value> {
    Some(match ty {
        ColumnType::Text => Value::Text(v.as_str()?.to_string()),
        ColumnType::Integer => Value::Integer(v.as_i64()?),
        ColumnType::Real => Value::Real(v.as_f64()?),
        ColumnType::Boolean => Value::Boolean(v.as_bool()?),
    })
}

fn aggregate(
    func: AggFn,
    ty: Option<ColumnType>,
    cells: impl Iterator<Item = Option<Value>>,
) -> Result<Value> {
    let values: Vec<Option<Value>> = cells.collect();
    if func == AggFn::Count {
        return Ok(Value::Integer(values.len() as i64));
    }
    let values: Vec<Value> = values.into_iter().flatten().collect();
    let ty = ty.expect("validated: aggregate column present");
    match func {
        AggFn::Count => unreachable!(),
        AggFn::Sum => match ty {
            ColumnType::Integer => {
                let mut total: i64 = 0;
                for v in &values {
                    if let Value::Integer(i) = v {
                        total = total
                            .checked_add(*i)
                            .ok_or_else(|| Error::Range("integer sum overflow".into()))?;
                    }
                }
                Ok(Value::Integer(total))
            }
            _ => Ok(Value::Real(values.iter().filter_map(Value::as_f64).sum())),
        },
        AggFn::Avg => {
            if values.is_empty() {
                return Err(Error::EmptyAggregate);
            }
            let sum: f64 = values.iter().filter_map(Value::as_f64).sum();
            Ok(Value::Real(sum / values.len() as f64))
        }
        AggFn::Min | AggFn::Max => {
            let want = if func == AggFn::Min { Ordering::Less } else { Ordering::Greater };
            values
                .into_iter()
                .reduce(|best, v| if v.compare(&best) == Some(want) { v } else { best })
                .ok_or(Error::EmptyAggregate)
        }
    }
}

pub fn table_name_for_chunk(chunk_id: &str) -> String {
    let safe: String = chunk_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("chunk_{safe}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn is_separator_line(line: &str) -> bool {
    line.contains('-') && line.chars().all(|c| matches!(c, '|' | '-' | ':' | '+' | ' ' | '\t'))
}

/// Parse a row-delimited table serialization (pipe-, tab- or comma-separated
/// cells, Markdown separator rows ignored). Requires a header, at least one
/// data row, at least two columns and equal widths throughout.
pub fn parse_grid(text: &str) -> Option<Grid> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !is_separator_line(l))
        .collect();
    if lines.len() < 2 {
        return None;
    }
    let delim = if lines.iter().all(|l| l.contains('|')) {
        '|'
    } else if lines.iter().all(|l| l.contains('\t')) {
        '\t'
    } else if lines.iter().all(|l| l.contains(',')) {
        ','
    } else {
        return None;
    };
    let split = |line: &str| -> Vec<String> {
        let line = if delim == '|' {
            line.strip_prefix('|').unwrap_or(line)
        } else {
            line
        };
        let line = if delim == '|' {
            line.strip_suffix('|').unwrap_or(line)
        } else {
            line
        };
        line.split(delim).map(|c| c.trim().to_string()).collect()
    };
    let header = split(lines[0]);
    let rows: Vec<Vec<String>> = lines[1..].iter().map(|l| split(l)).collect();
    if header.len() < 2 || rows.iter().any(|r| r.len() != header.len()) {
        return None;
    }
    Some(Grid { header, rows })
}

fn infer_type<'a>(cells: impl Iterator<Item = &'a str> + Clone) -> ColumnType {
    for ty in [ColumnType::Integer, ColumnType::Real, ColumnType::Boolean] {
        if cells.clone().all(|c| ty.parse(c).is_ok()) {
            return ty;
        }
    }
    ColumnType::Text
}
