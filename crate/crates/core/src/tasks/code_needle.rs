//! Code-needle task: line-numbered code-like text with exactly one line
//! violating a stated property, surrounded by template distractors.
//!
//! Within one seed family the needle text and its relative position are
//! fixed; growing the line budget only adds distractors.

use crate::error::{Error, Result};
use crate::numeric::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeLine {
    pub line_no: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeNeedleTask {
    pub lines: Vec<CodeLine>,
    /// 1-based line number of the needle.
    pub needle_line: usize,
    pub needle_desc: String,
    pub n_lines: usize,
    pub needle_family: u8,
}

/// The three needle families. Each pairs a buggy line shape with a
/// predicate no distractor template can satisfy.
const FAMILY_DESCS: [&str; 3] = [
    "normalization divides by a bare std with no epsilon guard",
    "attention scores are missing the inverse-sqrt head-dim scale",
    "running accumulator subtracts its increment instead of adding it",
];

fn needle_text(family: u8, tag: u64) -> String {
    match family {
        0 => format!("    norm_{tag} = total_{tag} / std_{tag}"),
        1 => format!("    scores_{tag} = dot(q_{tag}, k_{tag})"),
        _ => format!("    running_{tag} = running_{tag} - delta_{tag}"),
    }
}

/// Does `line` violate the property of the given family?
pub fn violates_family_property(family: u8, line: &str) -> bool {
    match family {
        0 => line.contains("/ std_"),
        1 => line.contains("dot(q_") && !line.contains("inv_sqrt_dk"),
        _ => line.contains("running_") && line.contains("- delta_"),
    }
}

/// Does `line` violate the property named by this task's description?
pub fn violates_needle_property(task: &CodeNeedleTask, line: &str) -> bool {
    violates_family_property(task.needle_family, line)
}

fn distractor_line(rng: &mut Rng) -> String {
    let i = rng.below(10_000);
    let j = rng.below(10_000);
    let c = rng.range_inclusive(2, 9);
    match rng.below(12) {
        0 => format!("def update_{i}(state, input_{j}):"),
        1 => format!("    total_{i} = total_{i} + input_{j} * {c}"),
        2 => format!("    buf_{i} = clamp(buf_{i} + input_{j}, 0, limit_{i})"),
        3 => format!("# refresh cached block {i} before the next pass"),
        4 => format!("    std_{i} = var_{i} ** 0.5"),
        5 => format!("    norm_{i} = total_{i} / (std_{i} + eps)"),
        6 => format!("    scores_{i} = dot(q_{i}, k_{i}) * inv_sqrt_dk"),
        7 => format!("    running_{i} = running_{i} + delta_{i}"),
        8 => format!("    weight_{i} = weight_{i} * decay + grad_{j}"),
        9 => format!("    if count_{i} > limit_{i}:"),
        10 => format!("        count_{i} = 0"),
        _ => format!("    return acc_{i}"),
    }
}

/// Generate a code-needle task with `l` lines. The needle's family, tag,
/// and relative position come from `seed` alone; distractor content comes
/// from a (seed, l)-keyed stream, so the same seed at a different length
/// carries the identical needle.
pub fn gen_code_needle_task(l: usize, seed: u64) -> Result<CodeNeedleTask> {
    if l < 5 {
        return Err(Error::Precondition(format!("need at least 5 lines, got {l}")));
    }
    let mut family_rng = Rng::new(seed);
    let family = family_rng.below(3) as u8;
    let tag = family_rng.below(10_000);
    let rel_pos = family_rng.uniform_in(0.1, 0.9);
    let needle_idx = ((rel_pos * (l - 1) as f64).round() as usize).min(l - 1);

    let mut line_rng = family_rng.fork(l as u64);
    let mut lines = Vec::with_capacity(l);
    for idx in 0..l {
        let text = if idx == needle_idx {
            needle_text(family, tag)
        } else {
            // Redraw on the (never observed with these templates) chance a
            // distractor trips any family predicate.
            loop {
                let t = distractor_line(&mut line_rng);
                if (0..3).all(|f| !violates_family_property(f, &t)) {
                    break t;
                }
            }
        };
        lines.push(CodeLine { line_no: idx + 1, text });
    }
    Ok(CodeNeedleTask {
        lines,
        needle_line: needle_idx + 1,
        needle_desc: FAMILY_DESCS[family as usize].to_string(),
        n_lines: l,
        needle_family: family,
    })
}

impl CodeNeedleTask {
    pub fn render_lines(&self) -> String {
        self.lines
            .iter()
            .map(|l| format!("L{}: {}", l.line_no, l.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn needle_text(&self) -> &str {
        &self.lines[self.needle_line - 1].text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_length_has_one_needle() {
        let t = gen_code_needle_task(5, 0).unwrap();
        assert_eq!(t.lines.len(), 5);
        let matches: Vec<_> = t
            .lines
            .iter()
            .filter(|l| violates_needle_property(&t, &l.text))
            .collect();
        assert_eq!(matches.len(), 1);
        assert_eq!(matches[0].line_no, t.needle_line);
    }

    #[test]
    fn too_short_rejected() {
        assert!(gen_code_needle_task(4, 0).is_err());
    }

    #[test]
    fn needle_text_fixed_across_lengths() {
        for seed in 0..30 {
            let small = gen_code_needle_task(5, seed).unwrap();
            let big = gen_code_needle_task(2000, seed).unwrap();
            assert_eq!(small.needle_text(), big.needle_text());
            assert_eq!(small.needle_desc, big.needle_desc);
            // Pinned relative position.
            let fs = (small.needle_line - 1) as f64 / (small.n_lines - 1) as f64;
            let fb = (big.needle_line - 1) as f64 / (big.n_lines - 1) as f64;
            assert!((fs - fb).abs() < 0.2);
        }
    }

    #[test]
    fn distractors_never_satisfy_any_needle_predicate() {
        for seed in 0..100 {
            let t = gen_code_needle_task(60, seed).unwrap();
            for l in &t.lines {
                if l.line_no == t.needle_line {
                    continue;
                }
                for f in 0..3 {
                    assert!(
                        !violates_family_property(f, &l.text),
                        "seed {seed} line {} trips family {f}: {}",
                        l.line_no,
                        l.text
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_code_needle_task(50, 7).unwrap();
        let b = gen_code_needle_task(50, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn line_numbers_contiguous_from_one() {
        let t = gen_code_needle_task(25, 3).unwrap();
        for (i, l) in t.lines.iter().enumerate() {
            assert_eq!(l.line_no, i + 1);
        }
    }
}
