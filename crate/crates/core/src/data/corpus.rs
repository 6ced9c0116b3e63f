use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub tool_id: String,
    pub description: String,
}

/// A query with its usage label and golden tool set (sorted, deduplicated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub usage_label: bool,
    pub golden_tools: Vec<String>,
}

impl QueryRecord {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>, golden: &[&str]) -> Self {
        let golden_tools: BTreeSet<String> = golden.iter().map(|s| s.to_string()).collect();
        Self {
            query_id: query_id.into(),
            text: text.into(),
            usage_label: !golden_tools.is_empty(),
            golden_tools: golden_tools.into_iter().collect(),
        }
    }
}

#[derive(Deserialize)]
struct QueryLine {
    query_id: String,
    text: String,
    label: u8,
    #[serde(default)]
    golden_tools: Vec<String>,
}

#[derive(Serialize)]
struct QueryLineOut<'a> {
    query_id: &'a str,
    text: &'a str,
    label: u8,
    golden_tools: &'a [String],
}

/// Validated tool and query collections.
///
/// Queries with label 0 form the detection-only subset; label 1 queries form
/// the retrieval subset.
#[derive(Debug, Clone)]
pub struct Corpus {
    tools: Vec<ToolRecord>,
    queries: Vec<QueryRecord>,
    tool_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

impl Corpus {
    pub fn from_records(tools: Vec<ToolRecord>, mut queries: Vec<QueryRecord>) -> Result<Self> {
        let mut tool_index = HashMap::with_capacity(tools.len());
        for (i, t) in tools.iter().enumerate() {
            if t.description.trim().is_empty() {
                return Err(Error::Config(format!("tool `{}` has an empty description", t.tool_id)));
            }
            if tool_index.insert(t.tool_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.tool_id.clone()));
            }
        }
        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter_mut().enumerate() {
            let set: BTreeSet<String> = q.golden_tools.drain(..).collect();
            q.golden_tools = set.into_iter().collect();
            if q.usage_label == q.golden_tools.is_empty() {
                return Err(Error::LabelMismatch(q.query_id.clone()));
            }
            if let Some(t) = q.golden_tools.iter().find(|t| !tool_index.contains_key(*t)) {
                return Err(Error::DanglingTool { query: q.query_id.clone(), tool: t.clone() });
            }
            if query_index.insert(q.query_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.query_id.clone()));
            }
        }
        Ok(Self { tools, queries, tool_index, query_index })
    }

    pub fn load(tools_path: impl AsRef<Path>, queries_path: impl AsRef<Path>) -> Result<Self> {
        let tools_path = tools_path.as_ref();
        let queries_path = queries_path.as_ref();
        let mut tools = Vec::new();
        for (line, text) in read_lines(tools_path)? {
            let rec: ToolRecord =
                serde_json::from_str(&text).map_err(|e| parse_err(tools_path, line, e.to_string()))?;
            if rec.description.trim().is_empty() {
                return Err(parse_err(tools_path, line, "empty description"));
            }
            tools.push(rec);
        }
        let mut queries = Vec::new();
        for (line, text) in read_lines(queries_path)? {
            let q: QueryLine =
                serde_json::from_str(&text).map_err(|e| parse_err(queries_path, line, e.to_string()))?;
            let usage_label = match q.label {
                0 => false,
                1 => true,
                other => return Err(parse_err(queries_path, line, format!("label must be 0 or 1, got {other}"))),
            };
            queries.push(QueryRecord { query_id: q.query_id, text: q.text, usage_label, golden_tools: q.golden_tools });
        }
        Self::from_records(tools, queries)
    }

    pub fn write_jsonl(&self, tools_path: impl AsRef<Path>, queries_path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tools {
            out.push_str(&serde_json::to_string(t).expect("tool record serializes"));
            out.push('\n');
        }
        std::fs::write(tools_path, out)?;
        let mut out = String::new();
        for q in &self.queries {
            let line = QueryLineOut {
                query_id: &q.query_id,
                text: &q.text,
                label: q.usage_label as u8,
                golden_tools: &q.golden_tools,
            };
            out.push_str(&serde_json::to_string(&line).expect("query record serializes"));
            out.push('\n');
        }
        std::fs::write(queries_path, out)?;
        Ok(())
    }

    pub fn tools(&self) -> &[ToolRecord] {
        &self.tools
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn tool(&self, id: &str) -> Option<&ToolRecord> {
        self.tool_index.get(id).map(|&i| &self.tools[i])
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    pub fn query_position(&self, id: &str) -> Option<usize> {
        self.query_index.get(id).copied()
    }

    /// Label-1 queries.
    pub fn retrieval_queries(&self) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(|q| q.usage_label)
    }

    /// Label-0 queries.
    pub fn detection_queries(&self) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(|q| !q.usage_label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tools() -> Vec<ToolRecord> {
        vec![
            ToolRecord { tool_id: "t1".into(), description: "weather".into() },
            ToolRecord { tool_id: "t2".into(), description: "stocks".into() },
        ]
    }

    #[test]
    fn partitions_by_label() {
        let c = Corpus::from_records(
            tools(),
            vec![QueryRecord::new("q1", "rain?", &["t1"]), QueryRecord::new("q2", "hello", &[])],
        )
        .unwrap();
        assert_eq!(c.retrieval_queries().count(), 1);
        assert_eq!(c.detection_queries().count(), 1);
    }

    #[test]
    fn label_and_golden_must_agree() {
        let mut q = QueryRecord::new("q1", "x", &["t1"]);
        q.usage_label = false;
        assert!(matches!(Corpus::from_records(tools(), vec![q]), Err(Error::LabelMismatch(_))));
        let mut q = QueryRecord::new("q1", "x", &[]);
        q.usage_label = true;
        assert!(matches!(Corpus::from_records(tools(), vec![q]), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn dangling_and_duplicate_ids() {
        let r = Corpus::from_records(tools(), vec![QueryRecord::new("q1", "x", &["t9"])]);
        assert!(matches!(r, Err(Error::DanglingTool { .. })));
        let mut t = tools();
        t.push(t[0].clone());
        assert!(matches!(Corpus::from_records(t, vec![]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("tools.jsonl");
        let qp = dir.path().join("queries.jsonl");
        std::fs::write(&tp, "{\"tool_id\":\"t1\",\"description\":\"d\"}\n").unwrap();
        let mut f = File::create(&qp).unwrap();
        writeln!(f, "{{\"query_id\":\"q1\",\"text\":\"a\",\"label\":1,\"golden_tools\":[\"t1\"]}}").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "{{\"query_id\":\"q2\",\"text\":\"b\",\"label\":0,\"golden_tools\":[\"t1\"]}}").unwrap();
        drop(f);
        assert!(matches!(Corpus::load(&tp, &qp), Err(Error::LabelMismatch(_))));

        std::fs::write(&qp, "{\"query_id\":\"q1\",\"text\":\"a\",\"label\":1,\"golden_tools\":[\"t1\"]}\nnot json\n")
            .unwrap();
        match Corpus::load(&tp, &qp) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::from_records(
            tools(),
            vec![QueryRecord::new("q1", "rain?", &["t2", "t1"]), QueryRecord::new("q2", "hi", &[])],
        )
        .unwrap();
        let (tp, qp) = (dir.path().join("t.jsonl"), dir.path().join("q.jsonl"));
        c.write_jsonl(&tp, &qp).unwrap();
        let back = Corpus::load(&tp, &qp).unwrap();
        assert_eq!(back.queries(), c.queries());
        assert_eq!(back.tools(), c.tools());
        assert_eq!(back.query("q1").unwrap().golden_tools, vec!["t1", "t2"]);
    }
}
