//! Synthetic long-context retrieval tasks: generation, rendering for the
//! byte-level model, exact-match scoring, and the JSONL dataset format.

pub mod code_needle;
pub mod transactions;

pub use code_needle::{gen_code_needle_task, violates_needle_property, CodeNeedleTask};
pub use transactions::{
    gen_transaction_task, verify_transaction_log, BugType, GeneratedTransaction,
    TransactionTask, Verdict, ViolatedRule,
};

use crate::error::{Error, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

pub const ANSWER_MARKER: &str = "[ANSWER]\n";
pub const SCRATCH_MARKER: &str = "[SCRATCH]\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "transactions")]
    Transactions,
    #[serde(rename = "code")]
    Code,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Transactions => "transactions",
            TaskKind::Code => "code",
        }
    }
}

/// Ground-truth answer carried by a dataset instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerKey {
    Transaction {
        bug_type: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        bug_location: Option<String>,
    },
    Code {
        line: String,
    },
}

/// One generated long-context problem, as serialized to the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    pub length_param: usize,
    pub context_text: String,
    pub question_text: String,
    pub answer: AnswerKey,
    pub seed: u64,
}

const TRANSACTION_QUESTION: &str = "Possible bug types (choose exactly one):\n\
- CALC_ERROR: Mathematical calculation is incorrect\n\
- NEGATIVE_BAL: Account balance becomes negative\n\
- LOST_UPDATE: Concurrent update causes lost transaction\n\
- DUPLICATE_TXN: Same transaction processed multiple times\n\
\n\
Identify the bug type and location, e.g. {\"bug_type\": CALC_ERROR, \"bug_location\": TX003}.";

impl TaskInstance {
    pub fn from_transaction(task: &TransactionTask, seed: u64) -> TaskInstance {
        let context_text = format!(
            "Task: Analyze this banking transaction log for bugs.\n\n\
             Initial state: {}\n\n\
             Rules:\n\
             1. Total money must remain constant (conservation)\n\
             2. No account can go negative\n\
             3. All calculations must be mathematically correct\n\n\
             Transaction log:\n{}\n",
            task.render_initial_state(),
            task.render_log()
        );
        TaskInstance {
            id: format!("transactions-n{}-{}-s{}", task.n_ops, task.bug_type, seed),
            kind: TaskKind::Transactions,
            length_param: task.n_ops,
            context_text,
            question_text: TRANSACTION_QUESTION.to_string(),
            answer: AnswerKey::Transaction {
                bug_type: task.bug_type.canonical().to_string(),
                bug_location: task.bug_tx.map(|tx| format!("TX{tx:03}")),
            },
            seed,
        }
    }

    pub fn from_code(task: &CodeNeedleTask, seed: u64) -> TaskInstance {
        let context_text = format!(
            "Task: Find the buggy line in this code.\n\n\
             Bug description: {}\n\n\
             Code context:\n{}\n",
            task.needle_desc,
            task.render_lines()
        );
        TaskInstance {
            id: format!("code-l{}-s{}", task.n_lines, seed),
            kind: TaskKind::Code,
            length_param: task.n_lines,
            context_text,
            question_text:
                "Identify the exact location of the bug. Answer with the line reference, e.g. L7."
                    .to_string(),
            answer: AnswerKey::Code {
                line: format!("L{}", task.needle_line),
            },
            seed,
        }
    }

    /// Byte range of the needle (the injected line) inside `context_text`.
    pub fn needle_byte_span(&self) -> Option<(usize, usize)> {
        let marker = match &self.answer {
            AnswerKey::Transaction { bug_location, .. } => {
                format!("[{}]:", bug_location.as_deref()?)
            }
            AnswerKey::Code { line } => format!("{line}: "),
        };
        let start = self.context_text.find(&marker)?;
        let end = self.context_text[start..]
            .find('\n')
            .map(|i| start + i)
            .unwrap_or(self.context_text.len());
        Some((start, end))
    }
}

/// Prompt layout fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStyle {
    /// Context, question, answer marker.
    Direct,
    /// Context, question, scratch marker (free decoding happens there),
    /// answer marker appended by the harness after the scratch budget.
    Scratchpad,
}

/// Deterministic byte rendering of a task prompt. With `Scratchpad` the
/// prompt ends at the scratch marker; the answer marker is forced later.
pub fn render_task_tokens(task: &TaskInstance, style: PromptStyle) -> Vec<u8> {
    let mut text = String::new();
    text.push_str(&task.context_text);
    text.push('\n');
    text.push_str(&task.question_text);
    text.push('\n');
    match style {
        PromptStyle::Direct => text.push_str(ANSWER_MARKER),
        PromptStyle::Scratchpad => text.push_str(SCRATCH_MARKER),
    }
    text.into_bytes()
}

/// Parsed fields recovered from an answer text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub bug_type: Option<String>,
    pub bug_location: Option<String>,
    pub line: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub correct: bool,
    pub parsed: ParsedAnswer,
}

fn bug_type_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)bug[_\s]?type"?\s*[:=]\s*"?([A-Za-z_]+)"#).unwrap()
    })
}

fn bug_loc_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)bug[_\s]?location"?\s*[:=]\s*"?(TX\s*\d+)"#).unwrap()
    })
}

fn tx_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bTX\s*(\d+)").unwrap())
}

fn line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bL\s*(\d+)\b").unwrap())
}

fn bare_int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(\d+)\b").unwrap())
}

fn tx_number(s: &str) -> Option<u64> {
    tx_re()
        .captures(s)
        .and_then(|c| c.get(1))
        .and_then(|m| m.as_str().parse().ok())
}

/// Exact-match scoring with tolerant parsing.
///
/// Transaction answers need both the bug type and the transaction id to
/// match; code answers need the needle line number. Surrounding prose is
/// ignored; case and whitespace are normalized; the content itself must be
/// exact. Unparseable text scores incorrect with a note.
pub fn score_answer(task: &TaskInstance, answer_text: &str) -> ScoreOutcome {
    match &task.answer {
        AnswerKey::Transaction { bug_type, bug_location } => {
            let found_type = bug_type_re()
                .captures(answer_text)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().to_ascii_uppercase())
                .or_else(|| {
                    // Free-text fallback: first taxonomy token mentioned.
                    let upper = answer_text.to_ascii_uppercase();
                    ["CALC_ERROR", "NEGATIVE_BAL", "LOST_UPDATE", "DUPLICATE_TXN", "NONE"]
                        .iter()
                        .filter_map(|t| upper.find(t).map(|i| (i, t.to_string())))
                        .min_by_key(|(i, _)| *i)
                        .map(|(_, t)| t)
                });
            let found_loc = bug_loc_re()
                .captures(answer_text)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().to_string())
                .or_else(|| {
                    tx_re()
                        .captures(answer_text)
                        .map(|c| c.get(0).unwrap().as_str().to_string())
                });
            let parsed = ParsedAnswer {
                bug_type: found_type.clone(),
                bug_location: found_loc.clone(),
                line: None,
                note: if found_type.is_none() {
                    Some("no bug type found in answer".to_string())
                } else {
                    None
                },
            };
            let type_ok = found_type.as_deref() == Some(bug_type.as_str());
            let loc_ok = match bug_location {
                Some(want) => {
                    let want_n = tx_number(want);
                    let got_n = found_loc.as_deref().and_then(tx_number);
                    want_n.is_some() && want_n == got_n
                }
                None => true,
            };
            ScoreOutcome { correct: type_ok && loc_ok, parsed }
        }
        AnswerKey::Code { line } => {
            let want: Option<u64> = line_re()
                .captures(line)
                .and_then(|c| c.get(1))
                .and_then(|m| m.as_str().parse().ok());
            let got: Option<u64> = line_re()
                .captures(answer_text)
                .and_then(|c| c.get(1))
                .and_then(|m| m.as_str().parse().ok())
                .or_else(|| {
                    bare_int_re()
                        .captures(answer_text)
                        .and_then(|c| c.get(1))
                        .and_then(|m| m.as_str().parse().ok())
                });
            let parsed = ParsedAnswer {
                bug_type: None,
                bug_location: None,
                line: got.map(|n| format!("L{n}")),
                note: if got.is_none() {
                    Some("no line reference found in answer".to_string())
                } else {
                    None
                },
            };
            ScoreOutcome { correct: want.is_some() && want == got, parsed }
        }
    }
}

/// The answer text in the format the scorer and the training corpus share.
pub fn canonical_answer_text(answer: &AnswerKey) -> String {
    match answer {
        AnswerKey::Transaction { bug_type, bug_location } => match bug_location {
            Some(loc) => format!("{{\"bug_type\": {bug_type}, \"bug_location\": {loc}}}"),
            None => format!("{{\"bug_type\": {bug_type}}}"),
        },
        AnswerKey::Code { line } => line.clone(),
    }
}

/// Write one task per line; serialization is field-order stable, so a
/// rewrite of the same tasks is byte-identical.
pub fn write_jsonl(tasks: &[TaskInstance], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("bad task record: {e}"),
        })?;
        out.push(task);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_instance() -> TaskInstance {
        TaskInstance::from_transaction(&TransactionTask::reference_instance(), 0)
    }

    #[test]
    fn reference_render_contains_exact_lines() {
        let inst = reference_instance();
        assert!(inst
            .context_text
            .contains("[TX001]: Transfer $107: A=4000 → 3893, B=4200 → 4307"));
        assert!(inst
            .context_text
            .contains("[TX005]: Transfer $699: B=8216 → 7517, A=-16 → 683"));
        assert!(inst
            .context_text
            .contains("{\"account_A\": 4000, \"account_B\": 4200, \"total\": 8200}"));
    }

    #[test]
    fn render_is_deterministic_and_ends_with_marker() {
        let inst = reference_instance();
        let a = render_task_tokens(&inst, PromptStyle::Direct);
        let b = render_task_tokens(&inst, PromptStyle::Direct);
        assert_eq!(a, b);
        assert!(a.ends_with(ANSWER_MARKER.as_bytes()));
        let c = render_task_tokens(&inst, PromptStyle::Scratchpad);
        assert!(c.ends_with(SCRATCH_MARKER.as_bytes()));
    }

    #[test]
    fn rendered_length_sweep_recorded_and_monotone() {
        let mut last = 0;
        let mut recorded = Vec::new();
        for &n in &[25usize, 50, 100, 250, 500] {
            let t = gen_transaction_task(n, 3, BugType::CalcError, 11, false).unwrap();
            let inst = TaskInstance::from_transaction(&t.task, 11);
            let bytes = render_task_tokens(&inst, PromptStyle::Direct);
            assert!(bytes.len() > last, "n_ops {n} did not grow the render");
            last = bytes.len();
            recorded.push((n, bytes.len()));
        }
        println!("rendered byte counts per n_ops sweep: {recorded:?}");
        // The sweep spans roughly 1e3..1e5 bytes at these lengths.
        assert!(recorded[0].1 < 4_000);
        assert!(last > 20_000);
    }

    #[test]
    fn score_reference_answer_formats() {
        let inst = reference_instance();
        for text in [
            "{\"bug_type\": NEGATIVE_BAL, \"bug_location\": TX004}",
            "{\"bug_type\": \"NEGATIVE_BAL\", \"bug_location\": \"TX004\"}",
            "bug_type: negative_bal, bug_location: tx004",
            "After replaying the log I believe the answer is {\"bug_type\": NEGATIVE_BAL, \"bug_location\": TX004}, because A over-debits.",
        ] {
            let s = score_answer(&inst, text);
            assert!(s.correct, "should accept: {text}");
        }
    }

    #[test]
    fn score_rejects_wrong_or_partial() {
        let inst = reference_instance();
        for text in [
            "{\"bug_type\": NEGATIVE_BAL, \"bug_location\": TX005}",
            "{\"bug_type\": CALC_ERROR, \"bug_location\": TX004}",
            "no idea",
            "",
        ] {
            let s = score_answer(&inst, text);
            assert!(!s.correct, "should reject: {text}");
        }
    }

    #[test]
    fn score_code_answers() {
        let task = gen_code_needle_task(40, 5).unwrap();
        let inst = TaskInstance::from_code(&task, 5);
        let want = task.needle_line;
        assert!(score_answer(&inst, &format!("L{want}")).correct);
        assert!(score_answer(&inst, &format!("the bug is at line L{want} in the context")).correct);
        assert!(score_answer(&inst, &format!("{want}")).correct);
        assert!(!score_answer(&inst, &format!("L{}", want + 1)).correct);
        let s = score_answer(&inst, "unparseable");
        assert!(!s.correct);
        assert!(s.parsed.note.is_some());
    }

    #[test]
    fn scorer_matches_ground_truth_self_consistently() {
        for seed in 0..20 {
            let t = gen_code_needle_task(30, seed).unwrap();
            let inst = TaskInstance::from_code(&t, seed);
            let AnswerKey::Code { line } = &inst.answer else { panic!() };
            assert!(score_answer(&inst, line).correct);
        }
    }

    #[test]
    fn needle_byte_span_points_at_bug_line() {
        let inst = reference_instance();
        let (s, e) = inst.needle_byte_span().unwrap();
        let line = &inst.context_text[s..e];
        assert!(line.starts_with("[TX004]:"));
        assert!(line.contains("2925"));

        let code = gen_code_needle_task(25, 9).unwrap();
        let ci = TaskInstance::from_code(&code, 9);
        let (s, e) = ci.needle_byte_span().unwrap();
        assert!(ci.context_text[s..e].contains(code.needle_text().trim()));
    }

    #[test]
    fn jsonl_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join("qttt-tasks-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tasks.jsonl");

        let mut tasks = Vec::new();
        for seed in 0..4 {
            let t = gen_transaction_task(25, 3, BugType::DuplicateTxn, seed, false).unwrap();
            tasks.push(TaskInstance::from_transaction(&t.task, seed));
            let c = gen_code_needle_task(20, seed).unwrap();
            tasks.push(TaskInstance::from_code(&c, seed));
        }
        write_jsonl(&tasks, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, tasks);
        write_jsonl(&back, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_file(&path).ok();
    }
}
