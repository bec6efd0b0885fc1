use std::io::{self, Write};

pub const DSO_LOG_SCHEMA: &str = "# gridmoe dso_log v1";

/// One governor iteration as written to `dso_log.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsoLogRow {
    pub iteration: u64,
    pub cur: Vec<f64>,
    pub his: Vec<f64>,
    pub ratios: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub consistency: f64,
    pub gamma: f64,
    pub lr_heads: Vec<f64>,
    pub lr_backbone: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DsoLog {
    pub n_tasks: usize,
    pub rows: Vec<DsoLogRow>,
}

impl DsoLog {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: DsoLogRow) {
        self.rows.push(row);
    }

    pub fn header(&self) -> Vec<String> {
        let t = self.n_tasks;
        let mut h = vec!["iteration".to_string()];
        for prefix in ["cur_L", "his_L", "w", "lambda"] {
            h.extend((0..t).map(|i| format!("{prefix}_{i}")));
        }
        h.push("consistency".into());
        h.push("gamma".into());
        h.extend((0..t).map(|i| format!("lr_head_{i}")));
        h.push("lr_backbone".into());
        h.push("skipped".into());
        h
    }

    fn record(row: &DsoLogRow) -> Vec<String> {
        let mut r = vec![row.iteration.to_string()];
        for v in [&row.cur, &row.his, &row.ratios, &row.lambdas] {
            r.extend(v.iter().map(f64::to_string));
        }
        r.push(row.consistency.to_string());
        r.push(row.gamma.to_string());
        r.extend(row.lr_heads.iter().map(f64::to_string));
        r.push(row.lr_backbone.to_string());
        r.push(u8::from(row.skipped).to_string());
        r
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        self.write_rows(out, &self.rows)
    }

    /// Writes only the trailing `n` rows.
    pub fn write_tail<W: Write>(&self, out: W, n: usize) -> io::Result<()> {
        let start = self.rows.len().saturating_sub(n);
        self.write_rows(out, &self.rows[start..])
    }

    fn write_rows<W: Write>(&self, mut out: W, rows: &[DsoLogRow]) -> io::Result<()> {
        writeln!(out, "{DSO_LOG_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for row in rows {
            w.write_record(Self::record(row))?;
        }
        w.flush()
    }
}
