//! Tabular rendering of command results.
//!
//! Every command produces one [`Table`]; the three formats carry the same
//! cells. Numbers are printed with Rust's shortest round-trip formatting, so
//! a fixed seed yields byte-identical output. CSV quoting follows RFC 4180;
//! JSON output is a single compact object on stdout.

use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl Cell {
    fn as_string(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x}"),
            Cell::Int(x) => format!("{x}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn as_json(&self) -> serde_json::Value {
        match self {
            Cell::Num(x) if x.is_finite() => json!(x),
            Cell::Num(_) | Cell::Empty => serde_json::Value::Null,
            Cell::Int(x) => json!(x),
            Cell::Text(s) => json!(s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub command: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(command: &str, columns: &[&str]) -> Self {
        Table {
            command: command.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.render_table(),
            Format::Csv => self.render_csv(),
            Format::Json => self.render_json(),
        }
    }

    fn render_table(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::as_string).collect())
            .collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                cells
                    .iter()
                    .map(|r| r[j].len())
                    .chain(std::iter::once(c.len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |fields: &[String]| {
            let joined: Vec<String> = fields
                .iter()
                .zip(&widths)
                .map(|(f, w)| format!("{f:<w$}"))
                .collect();
            joined.join("  ").trim_end().to_string()
        };
        out.push_str(&line(&self.columns));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    fn render_csv(&self) -> String {
        fn quote(field: &str) -> String {
            if field.contains([',', '"', '\n', '\r']) {
                format!("\"{}\"", field.replace('"', "\"\""))
            } else {
                field.to_string()
            }
        }
        let mut out = String::new();
        out.push_str(
            &self
                .columns
                .iter()
                .map(|c| quote(c))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push_str("\r\n");
        for row in &self.rows {
            out.push_str(
                &row.iter()
                    .map(|c| quote(&c.as_string()))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push_str("\r\n");
        }
        out
    }

    fn render_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::Value::Array(r.iter().map(Cell::as_json).collect())
            })
            .collect();
        let doc = json!({
            "command": self.command,
            "columns": self.columns,
            "rows": rows,
        });
        let mut s = doc.to_string();
        s.push('\n');
        s
    }
}

/// The machine-readable error document printed to stderr under
/// `--output json`.
pub fn error_json(kind: &str, message: &str, exit_code: i32) -> String {
    let mut s = json!({
        "error": { "kind": kind, "message": message },
        "exit_code": exit_code,
    })
    .to_string();
    s.push('\n');
    s
}
