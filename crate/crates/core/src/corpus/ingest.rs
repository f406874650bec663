use std::fs::File;
use std::path::Path;

use super::{CorpusError, RawEvent};

/// A column selected by header name or by zero-based position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Column {
    Name(String),
    Index(usize),
}

impl Column {
    /// Numeric strings select by position, anything else by name.
    pub fn parse(spec: &str) -> Self {
        spec.parse::<usize>()
            .map(Column::Index)
            .unwrap_or_else(|_| Column::Name(spec.to_string()))
    }

    fn resolve(&self, header: Option<&csv::StringRecord>) -> Result<usize, CorpusError> {
        match self {
            Column::Index(i) => Ok(*i),
            Column::Name(name) => {
                let header = header.ok_or(CorpusError::NamedColumnsWithoutHeader)?;
                header
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| CorpusError::MissingColumn(name.clone()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventLogFormat {
    /// `None` picks tab for `.tsv`/`.txt` files and comma otherwise.
    pub delimiter: Option<u8>,
    pub has_header: bool,
    pub session: Column,
    pub item: Column,
    pub time: Column,
}

impl Default for EventLogFormat {
    fn default() -> Self {
        Self {
            delimiter: None,
            has_header: true,
            session: Column::Index(0),
            item: Column::Index(1),
            time: Column::Index(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestReport {
    pub events: Vec<RawEvent>,
    pub malformed: usize,
}

fn parse_timestamp(field: &str) -> Option<i64> {
    let field = field.trim();
    field
        .parse::<i64>()
        .ok()
        .or_else(|| field.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v.floor() as i64))
        .filter(|&t| t >= 0)
}

/// Read a delimiter-separated event log in file order.
pub fn ingest(path: &Path, format: &EventLogFormat) -> Result<IngestReport, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let delimiter = format.delimiter.unwrap_or_else(|| {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => b'\t',
            _ => b',',
        }
    });
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .from_reader(file);

    let header = if format.has_header {
        match reader.headers() {
            Ok(h) => Some(h.clone()),
            Err(_) => return Err(CorpusError::NoEvents(path.to_path_buf())),
        }
    } else {
        None
    };
    let cols = [
        format.session.resolve(header.as_ref())?,
        format.item.resolve(header.as_ref())?,
        format.time.resolve(header.as_ref())?,
    ];

    let mut events = Vec::new();
    let mut malformed = 0;
    for record in reader.records() {
        let Ok(record) = record else {
            malformed += 1;
            continue;
        };
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let fields: Option<Vec<&str>> = cols.iter().map(|&c| record.get(c).map(str::trim)).collect();
        let parsed = fields.and_then(|f| {
            let (s, i) = (f[0], f[1]);
            if s.is_empty() || i.is_empty() {
                return None;
            }
            Some(RawEvent {
                session_id: s.to_string(),
                item_id: i.to_string(),
                timestamp: parse_timestamp(f[2])?,
            })
        });
        match parsed {
            Some(e) => events.push(e),
            None => malformed += 1,
        }
    }
    if events.is_empty() {
        return Err(CorpusError::NoEvents(path.to_path_buf()));
    }
    Ok(IngestReport { events, malformed })
}
