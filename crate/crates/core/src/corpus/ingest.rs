use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::trace::{ApiTrace, Label};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
    Csv,
}

impl TraceFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> TraceFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => TraceFormat::Csv,
            _ => TraceFormat::Jsonl,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(TraceFormat::Jsonl),
            "csv" => Ok(TraceFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown trace format `{other}`"))),
        }
    }
}

/// Reads traces in file order.
pub fn ingest(path: &Path, format: TraceFormat) -> Result<Vec<ApiTrace>> {
    let file = File::open(path)?;
    match format {
        TraceFormat::Jsonl => read_jsonl(BufReader::new(file)),
        TraceFormat::Csv => read_csv(BufReader::new(file)),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<ApiTrace>> {
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ApiTrace = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        trace.validate()?;
        traces.push(trace);
    }
    Ok(traces)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<ApiTrace>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(id_col), Some(label_col), Some(calls_col)) = (col("id"), col("label"), col("calls")) else {
        return Err(Error::Parse {
            line: 1,
            message: "CSV header must contain id,label,calls".to_string(),
        });
    };
    let source_col = col("source");
    let mut traces = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let label = Label::parse(field(label_col)).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown label `{}`", field(label_col)),
        })?;
        let trace = ApiTrace {
            id: field(id_col).to_string(),
            label,
            calls: field(calls_col).split_whitespace().map(str::to_string).collect(),
            source: source_col.map(|c| field(c).to_string()).unwrap_or_default(),
        };
        trace.validate()?;
        traces.push(trace);
    }
    Ok(traces)
}

pub fn write_traces(path: &Path, traces: &[ApiTrace], format: TraceFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        TraceFormat::Jsonl => {
            for t in traces {
                serde_json::to_writer(&mut w, t)?;
                w.write_all(b"\n")?;
            }
        }
        TraceFormat::Csv => {
            let mut cw = csv::Writer::from_writer(&mut w);
            cw.write_record(["id", "label", "calls", "source"])?;
            for t in traces {
                cw.write_record([t.id.as_str(), t.label.as_str(), &t.calls.join(" "), t.source.as_str()])?;
            }
            cw.flush()?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_record() {
        let line = r#"{"id":"t1","label":"malware","api_calls":["A","B"],"source":"x"}"#;
        let t = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(t[0].label, Label::Malware);
        assert_eq!(t[0].calls, vec!["A", "B"]);
        assert_eq!(t[0].source, "x");
    }

    #[test]
    fn csv_row() {
        let text = "id,label,calls\nt2,benign,A B C\n";
        let t = read_csv(text.as_bytes()).unwrap();
        assert_eq!(t[0].label, Label::Benign);
        assert_eq!(t[0].calls, vec!["A", "B", "C"]);
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"id\":\"a\",\"label\":\"benign\",\"api_calls\":[\"A\"]}\n{not json}\n";
        match read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = "id,label,calls\nt1,benign,A\nt2,evil,A\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_calls_rejected_with_id() {
        let line = r#"{"id":"void","label":"benign","api_calls":[],"source":""}"#;
        let err = read_jsonl(line.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyTrace(ref id) if id == "void"));
        let err = read_csv("id,label,calls\nz,benign,\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyTrace(ref id) if id == "z"));
    }

    #[test]
    fn csv_requires_header() {
        assert!(read_csv("t2,benign,A B C\n".as_bytes()).is_err());
    }
}
