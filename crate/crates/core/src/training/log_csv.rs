use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const ESSNET_LOG_HEADER: &str = "step,d1,d2,adv_A2B,adv_B2A,cyc_A,cyc_B,seg,total";
pub const UNET_LOG_HEADER: &str = "step,epoch,bce";

/// A parsed loss log: column names and one `(step, values)` row per line.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLogTable {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl LossLogTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().skip(1).position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    /// Rows of a synthesis-stage log as loss breakdowns.
    pub fn breakdowns(&self) -> Result<Vec<(u64, LossBreakdown)>> {
        if self.columns.join(",") != ESSNET_LOG_HEADER {
            return Err(Error::Data("not a synthesis-stage loss log".into()));
        }
        Ok(self
            .rows
            .iter()
            .map(|(s, v)| {
                (
                    *s,
                    LossBreakdown {
                        d1_loss: v[0],
                        d2_loss: v[1],
                        adv_a2b: v[2],
                        adv_b2a: v[3],
                        cycle_a: v[4],
                        cycle_b: v[5],
                        seg: v[6],
                        total: v[7],
                    },
                )
            })
            .collect())
    }
}

/// Parses a loss log. The first column must be `step`, every row must have
/// as many fields as the header and steps must strictly increase.
pub fn parse_loss_log(text: &str) -> Result<LossLogTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty loss log".into()))?;
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    if columns.first().map(String::as_str) != Some("step") || columns.len() < 2 {
        return Err(Error::Data(format!("loss log header `{header}` must start with step")));
    }
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Data(format!(
                "loss log line {}: {} fields, header has {}",
                n + 2,
                fields.len(),
                columns.len()
            )));
        }
        let step: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("loss log line {}: bad step `{}`", n + 2, fields[0])))?;
        if rows.last().is_some_and(|(prev, _)| *prev >= step) {
            return Err(Error::Data(format!("loss log line {}: step {step} not increasing", n + 2)));
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Data(format!("loss log line {}: bad value `{f}`", n + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((step, values));
    }
    Ok(LossLogTable { columns, rows })
}

/// Append-only CSV loss log.
pub struct LossLog {
    path: PathBuf,
    columns: usize,
    out: BufWriter<File>,
}

impl LossLog {
    /// Opens the log at `path`. With `keep_through = Some(step)` an existing
    /// log is kept up to and including that step (rows written after the
    /// checkpoint being resumed are dropped); otherwise a fresh log is
    /// started.
    pub fn open(path: &Path, header: &str, keep_through: Option<u64>) -> Result<Self> {
        let columns = header.split(',').count();
        let kept = match keep_through {
            Some(last) if path.exists() => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let table = parse_loss_log(&text)?;
                if table.columns.join(",") != header {
                    return Err(Error::Data(format!("{}: unexpected header", path.display())));
                }
                table.rows.into_iter().filter(|(s, _)| *s <= last).collect()
            }
            _ => Vec::new(),
        };
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            columns,
            out: BufWriter::new(file),
        };
        writeln!(log.out, "{header}").map_err(|e| Error::io(&log.path, e))?;
        for (step, values) in kept {
            log.append(step, &values)?;
        }
        log.flush()?;
        Ok(log)
    }

    pub fn append(&mut self, step: u64, values: &[f64]) -> Result<()> {
        debug_assert_eq!(values.len() + 1, self.columns);
        let mut line = step.to_string();
        for v in values {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append_breakdown(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        self.append(
            step,
            &[b.d1_loss, b.d2_loss, b.adv_a2b, b.adv_b2a, b.cycle_a, b.cycle_b, b.seg, b.total],
        )
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let mut log = LossLog::open(&p, UNET_LOG_HEADER, None).unwrap();
        log.append(1, &[0.0, 0.5]).unwrap();
        log.append(2, &[0.0, 0.25]).unwrap();
        log.append(3, &[1.0, 0.125]).unwrap();
        drop(log);
        let t = parse_loss_log(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.column("bce").unwrap(), vec![0.5, 0.25, 0.125]);

        let log = LossLog::open(&p, UNET_LOG_HEADER, Some(2)).unwrap();
        drop(log);
        let t = parse_loss_log(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_logs() {
        assert!(parse_loss_log("").is_err());
        assert!(parse_loss_log("epoch,x\n1,2").is_err());
        assert!(parse_loss_log("step,x\n2,1\n1,1").is_err());
        assert!(parse_loss_log("step,x\n1,1,1").is_err());
        assert!(parse_loss_log("step,x\n1,abc").is_err());
    }

    #[test]
    fn float_text_round_trips() {
        let v = 0.1f32 as f64;
        let text = format!("step,x\n1,{v}\n");
        assert_eq!(parse_loss_log(&text).unwrap().rows[0].1[0], v);
    }
}
