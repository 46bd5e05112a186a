//! Tolerant extraction of `{'Question': ..., 'Answer': ...}` objects from
//! free-form model completions.

/// Extracts every well-formed question/answer object from `raw`, in order.
///
/// Strings may be single- or double-quoted; surrounding prose, list
/// brackets and separators are ignored. Inside a single-quoted string an
/// apostrophe only terminates the string when followed by `:`, `,` or `}`,
/// so answers such as `'patient's consent'` survive. Objects with an empty
/// question or answer are dropped.
pub fn parse_llm_output(raw: &str) -> Vec<(String, String)> {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '{' {
            if let Some((fields, end)) = parse_object(&chars, i) {
                let mut question = None;
                let mut answer = None;
                for (k, v) in fields {
                    match k.trim().to_ascii_lowercase().as_str() {
                        "question" => question = Some(v),
                        "answer" => answer = Some(v),
                        _ => {}
                    }
                }
                if let (Some(q), Some(a)) = (question, answer) {
                    let (q, a) = (q.trim().to_string(), a.trim().to_string());
                    if !q.is_empty() && !a.is_empty() {
                        out.push((q, a));
                    }
                }
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Renders pairs in the canonical completion format; parsing the result
/// gives the pairs back.
pub fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(q, a)| {
            format!(
                "{{\"Question\": {}, \"Answer\": {}}}",
                serde_json::Value::String(q.clone()),
                serde_json::Value::String(a.clone())
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn skip_ws(chars: &[char], mut i: usize) -> usize {
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    i
}

/// Parses `{ "k": "v", ... }` starting at `start` (which holds `{`).
/// Returns the fields and the index just past the closing brace.
fn parse_object(chars: &[char], start: usize) -> Option<(Vec<(String, String)>, usize)> {
    let mut fields = Vec::new();
    let mut i = skip_ws(chars, start + 1);
    if chars.get(i) == Some(&'}') {
        return Some((fields, i + 1));
    }
    loop {
        let (key, next) = parse_string(chars, i)?;
        i = skip_ws(chars, next);
        if chars.get(i) != Some(&':') {
            return None;
        }
        i = skip_ws(chars, i + 1);
        let (value, next) = parse_string(chars, i)?;
        fields.push((key, value));
        i = skip_ws(chars, next);
        match chars.get(i) {
            Some(',') => i = skip_ws(chars, i + 1),
            Some('}') => return Some((fields, i + 1)),
            _ => return None,
        }
    }
}

fn parse_string(chars: &[char], start: usize) -> Option<(String, usize)> {
    let quote = *chars.get(start)?;
    if quote != '"' && quote != '\'' {
        return None;
    }
    let mut s = String::new();
    let mut i = start + 1;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            let escaped = *chars.get(i + 1)?;
            match escaped {
                'n' => s.push('\n'),
                't' => s.push('\t'),
                'r' => s.push('\r'),
                'u' => {
                    let hex: String = chars.get(i + 2..i + 6)?.iter().collect();
                    s.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
                    i += 6;
                    continue;
                }
                other => s.push(other),
            }
            i += 2;
            continue;
        }
        if c == quote {
            let after = skip_ws(chars, i + 1);
            let terminal = matches!(chars.get(after), Some(':') | Some(',') | Some('}'));
            if quote == '"' || terminal {
                return Some((s, i + 1));
            }
        }
        if c == '\n' && quote == '\'' {
            // a runaway single-quoted string never spans lines in model output
            return None;
        }
        s.push(c);
        i += 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(q, a)| (q.to_string(), a.to_string()))
            .collect()
    }

    #[test]
    fn single_quoted_objects() {
        let raw = "{'Question': 'q1', 'Answer': 'a1'} {'Question': 'q2', 'Answer': 'a2'}";
        assert_eq!(parse_llm_output(raw), pairs(&[("q1", "a1"), ("q2", "a2")]));
    }

    #[test]
    fn prose_wrapped_double_quoted() {
        let raw = "Here are the pairs: {\"Question\": \"q\", \"Answer\": \"a\"}";
        assert_eq!(parse_llm_output(raw), pairs(&[("q", "a")]));
    }

    #[test]
    fn no_json_gives_nothing() {
        assert!(parse_llm_output("no json here").is_empty());
    }

    #[test]
    fn apostrophes_inside_single_quotes() {
        let raw = "{'Question': 'What is required for the patient's consent?', 'Answer': 'Parent's signature'}";
        assert_eq!(
            parse_llm_output(raw),
            pairs(&[(
                "What is required for the patient's consent?",
                "Parent's signature"
            )])
        );
    }

    #[test]
    fn array_and_newlines() {
        let raw = "[\n  {\"Question\": \"Age?\", \"Answer\": \"18 years\"},\n  {\"Question\": \"\", \"Answer\": \"x\"},\n  {'Question': 'Sex?', 'Answer': 'Female'}\n]";
        assert_eq!(
            parse_llm_output(raw),
            pairs(&[("Age?", "18 years"), ("Sex?", "Female")])
        );
    }

    #[test]
    fn broken_object_is_skipped() {
        let raw = "{'Question': 'q1', 'Answer' 'a1'} {'Question': 'q2', 'Answer': 'a2'}";
        assert_eq!(parse_llm_output(raw), pairs(&[("q2", "a2")]));
    }

    proptest! {
        #[test]
        fn parse_is_idempotent_on_formatted_output(
            raw in proptest::collection::vec(("[a-zA-Z0-9 '?,:{}\"\\\\-]{1,30}", "[a-zA-Z0-9 '?,:{}\"\\\\-]{1,20}"), 0..12)
        ) {
            let clean: Vec<(String, String)> = raw
                .into_iter()
                .map(|(q, a)| (q.trim().to_string(), a.trim().to_string()))
                .filter(|(q, a)| !q.is_empty() && !a.is_empty())
                .collect();
            let parsed = parse_llm_output(&format_pairs(&clean));
            prop_assert_eq!(&parsed, &clean);
            prop_assert_eq!(parse_llm_output(&format_pairs(&parsed)), parsed);
        }
    }
}
