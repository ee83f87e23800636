//! Pulls the program out of a model response.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no program found in model response")]
pub struct NoProgramFound;

/// Drops `<think>…</think>` spans; an unclosed one runs to the end.
fn strip_think(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<think>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</think>") {
            Some(end) => rest = &rest[start + end + "</think>".len()..],
            None => return out,
        }
    }
    out.push_str(rest);
    out
}

/// Fenced blocks as (info string, body). An unterminated fence runs to the end.
fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let info = info.trim().to_ascii_lowercase();
        let mut body = Vec::new();
        for l in lines.by_ref() {
            if l.trim_start().starts_with("```") {
                break;
            }
            body.push(l);
        }
        blocks.push((info, body.join("\n")));
    }
    blocks
}

fn defines_run(src: &str) -> bool {
    src.lines().any(|l| {
        let t = l.trim_start();
        t.starts_with("def run(") || t.starts_with("def run (")
    })
}

/// Unfenced text: from the first import or def line to the end, dropping
/// trailing prose lines that are not indented.
fn bare_program(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.iter().position(|l| {
        let t = l.trim_start();
        t.starts_with("def ") || t.starts_with("import ") || t.starts_with("from ")
    })?;
    let mut end = lines.len();
    let mut seen_def = false;
    for (i, l) in lines.iter().enumerate().skip(start) {
        let t = l.trim_start();
        if t.starts_with("def ") {
            seen_def = true;
            continue;
        }
        let indented = l.starts_with(' ') || l.starts_with('\t');
        let code_like = t.is_empty() || indented || t.starts_with('#') || t.starts_with("import ") || t.starts_with("from ") || t.starts_with('@');
        if seen_def && !code_like {
            end = i;
            break;
        }
    }
    let program = lines[start..end].join("\n").trim_end().to_string();
    seen_def.then_some(program)
}

/// The program in a response: a fenced block defining `run` (python blocks
/// first), then any fenced block defining `run`, then bare code. Imports
/// outside the chosen block are kept out.
pub fn extract_program(response: &str) -> Result<String, NoProgramFound> {
    let text = strip_think(response);
    let blocks = fenced_blocks(&text);
    let pick = blocks
        .iter()
        .find(|(info, body)| (info == "python" || info == "py") && defines_run(body))
        .or_else(|| blocks.iter().find(|(_, body)| defines_run(body)))
        .or_else(|| blocks.iter().find(|(_, body)| body.contains("def ")));
    if let Some((_, body)) = pick {
        return Ok(body.trim_end().to_string() + "\n");
    }
    bare_program(&text).map(|p| p + "\n").ok_or(NoProgramFound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_python_block() {
        let r = "Here:\n```python\nimport math\ndef run(value_list):\n    return (1.0, '')\n```\nDone.";
        assert_eq!(extract_program(r).unwrap(), "import math\ndef run(value_list):\n    return (1.0, '')\n");
    }

    #[test]
    fn prefers_block_with_run() {
        let r = "```python\ndef helper(x):\n    return x\n```\n```\ndef run(v):\n    return (2.0, '')\n```";
        assert!(extract_program(r).unwrap().starts_with("def run(v)"));
    }

    #[test]
    fn think_spans_are_ignored() {
        let r = "<think>\n```python\ndef run(v):\n    return (9.0, '')\n```\n</think>\n```python\ndef run(v):\n    return (1.0, '')\n```";
        assert!(extract_program(r).unwrap().contains("1.0"));
        assert_eq!(extract_program("<think>def run(v): pass"), Err(NoProgramFound));
    }

    #[test]
    fn bare_code_with_trailing_prose() {
        let r = "from math import fabs\n\ndef run(value_list):\n    x = 1\n\n    return (x, 'million')\nThis returns the answer.";
        assert_eq!(
            extract_program(r).unwrap(),
            "from math import fabs\n\ndef run(value_list):\n    x = 1\n\n    return (x, 'million')\n"
        );
    }

    #[test]
    fn unterminated_fence() {
        let r = "```python\ndef run(v):\n    return (1.0, '')";
        assert!(extract_program(r).unwrap().ends_with("return (1.0, '')\n"));
    }

    #[test]
    fn nothing_to_extract() {
        assert_eq!(extract_program("I cannot answer that."), Err(NoProgramFound));
        assert_eq!(extract_program(""), Err(NoProgramFound));
    }
}
